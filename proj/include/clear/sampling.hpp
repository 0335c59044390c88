#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "clear/common.hpp"
#include "clear/corpus.hpp"

namespace clear {

enum class PairAblation { none, mask_vv, mask_vn };

inline PairAblation parse_ablation(const std::string& s) {
  if (s == "none" || s == "full") return PairAblation::none;
  if (s == "mvv") return PairAblation::mask_vv;
  if (s == "mvn") return PairAblation::mask_vn;
  throw ValidationError("unknown ablation '" + s + "' (expected none|mvv|mvn)");
}

struct SamplingPlan {
  std::uint64_t seed = 0;
  PairAblation ablation = PairAblation::none;
  bool resample_each_epoch = true;
};

// A pair of training-set indices plus its correlation label. The partner b
// is always drawn from the POS set, so label 1 means V-V and 0 means V-N.
struct ContractPair {
  std::size_t a = 0;
  std::size_t b = 0;
  int label = 0;
  bool is_vv() const { return label == 1; }
};

inline std::vector<int> task_labels(const std::vector<LabeledExample>& examples,
                                    const std::string& task) {
  std::vector<int> labels;
  labels.reserve(examples.size());
  for (const auto& ex : examples) labels.push_back(ex.label_for(task));
  return labels;
}

// Indices of the vulnerable contracts for one task.
inline std::vector<std::size_t> build_pos_set(const std::vector<int>& labels) {
  std::vector<std::size_t> pos;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == 1) pos.push_back(i);
  if (pos.empty()) throw ValidationError("empty POS set: no vulnerable contracts in training set");
  return pos;
}

inline std::vector<std::size_t> build_pos_set(const std::vector<LabeledExample>& train,
                                              const std::string& task) {
  return build_pos_set(task_labels(train, task));
}

inline int correlation_label(int label_a, int label_b) {
  if (label_b != 1) throw ValidationError("N-N pairing forbidden: partner must be vulnerable");
  if (label_a != 0 && label_a != 1) throw ValidationError("correlation label: labels must be 0/1");
  return label_a == 1 ? 1 : 0;
}

// One pair per training contract; partner uniform over the POS set
// (self-pairing allowed). Ablation drops the masked relationship after
// sampling, so the surviving pairs keep their original partners.
inline std::vector<ContractPair> sample_pairs(const std::vector<int>& labels,
                                              const std::vector<std::size_t>& pos_set,
                                              const SamplingPlan& plan, int epoch) {
  if (pos_set.empty()) throw ValidationError("empty POS set: no vulnerable contracts in training set");
  const std::uint64_t epoch_tag =
      plan.resample_each_epoch ? static_cast<std::uint64_t>(epoch) : 0ull;
  Rng rng = Rng::derive(plan.seed, "pair-partners", epoch_tag);
  std::vector<ContractPair> pairs;
  pairs.reserve(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::size_t j = pos_set[static_cast<std::size_t>(rng.below(pos_set.size()))];
    ContractPair p;
    p.a = i;
    p.b = j;
    p.label = correlation_label(labels[i], labels[j]);
    if (plan.ablation == PairAblation::mask_vv && p.is_vv()) continue;
    if (plan.ablation == PairAblation::mask_vn && !p.is_vv()) continue;
    pairs.push_back(p);
  }
  return pairs;
}

}  // namespace clear
