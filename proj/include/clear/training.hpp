#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "clear/checkpoint.hpp"
#include "clear/corpus.hpp"
#include "clear/encoder.hpp"
#include "clear/objectives.hpp"
#include "clear/optimizer.hpp"
#include "clear/sampling.hpp"

namespace clear {

inline std::vector<EncodedContract> encode_corpus(const std::vector<LabeledExample>& corpus,
                                                  const Vocabulary& vocab, int max_len) {
  std::vector<EncodedContract> out;
  out.reserve(corpus.size());
  for (const auto& ex : corpus)
    out.push_back(encode(tokenize(ex.source), vocab, std::size_t(max_len), ex.id));
  return out;
}

namespace graph {

// Stage-1 loss over one batch of pairs. Both members of every pair run
// through the same ModelState; the projection batch-normalizes all 2B
// summary rows together. Returns the scalar total-loss node.
inline Var stage1_batch_loss(Tape& t, ModelState& st,
                             const std::vector<EncodedContract>& contracts,
                             const std::vector<ContractPair>& batch, const LossConfig& lcfg,
                             Rng& mask_rng, bool mlm_masking, LossReport* report = nullptr) {
  if (batch.empty()) throw ValidationError("stage1_batch_loss: empty batch");
  const bool want_mlm = mlm_masking && lcfg.lambda_mlm > 0.0;

  std::vector<Var> summaries;   // 2B rows, pair members adjacent
  std::vector<Var> member_mlm;  // per-member MLM loss nodes
  summaries.reserve(batch.size() * 2);

  auto forward_member = [&](std::size_t idx) {
    const auto& ec = contracts.at(idx);
    std::vector<int> ids = ec.token_ids;
    std::vector<int> positions;
    std::vector<int> targets;
    if (want_mlm) {
      MaskedSequence ms = apply_mlm_mask(ids, st.cfg.mask_rate, mask_rng);
      for (int p : ms.mask_positions) targets.push_back(ms.target_ids[std::size_t(p)]);
      positions = ms.mask_positions;
      ids = std::move(ms.masked_ids);
    }
    const int n_valid = int(ids.size());
    Var xprime = mlm_stack(t, st, ids, n_valid);
    if (want_mlm)
      member_mlm.push_back(t.cross_entropy_rows(mlm_logits(t, st, xprime, positions), targets));
    FeatureVars fv = encode_features(t, st, xprime, n_valid);
    summaries.push_back(fv.summary);
  };

  for (const auto& pr : batch) {
    forward_member(pr.a);
    forward_member(pr.b);
  }

  Var stacked = t.vstack(summaries);
  Var vrows = project(t, st, stacked, /*train_mode=*/true);

  Var cl_sum;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Var u = t.slice_rows(vrows, long(2 * i), 1);
    Var w = t.slice_rows(vrows, long(2 * i + 1), 1);
    Var term = t.contrastive(u, w, batch[i].label, lcfg.margin);
    cl_sum = cl_sum.valid() ? t.add(cl_sum, term) : term;
  }
  Var cl_mean = t.scale(cl_sum, 1.0 / double(batch.size()));

  Var total;
  double mlm_value = 0.0;
  if (want_mlm) {
    Var mlm_sum;
    for (Var m : member_mlm) mlm_sum = mlm_sum.valid() ? t.add(mlm_sum, m) : m;
    Var mlm_mean = t.scale(mlm_sum, 1.0 / double(member_mlm.size()));
    mlm_value = t.scalar(mlm_mean);
    total = t.axpby(cl_mean, mlm_mean, lcfg.lambda_cl, lcfg.lambda_mlm);
  } else {
    total = t.scale(cl_mean, lcfg.lambda_cl);
  }
  if (report) {
    report->loss_cl = t.scalar(cl_mean);
    report->loss_mlm = mlm_value;
    report->loss_total = t.scalar(total);
  }
  return total;
}

// Stage-2 loss over one batch of single contracts: mean binary cross-entropy
// of the classification logits. Projection runs in train mode (batch stats).
inline Var stage2_batch_loss(Tape& t, ModelState& st,
                             const std::vector<EncodedContract>& contracts,
                             const std::vector<std::size_t>& batch,
                             const std::vector<int>& labels, LossReport* report = nullptr) {
  if (batch.empty()) throw ValidationError("stage2_batch_loss: empty batch");
  std::vector<Var> summaries;
  std::vector<FeatureVars> feats;
  summaries.reserve(batch.size());
  feats.reserve(batch.size());
  for (std::size_t idx : batch) {
    const auto& ec = contracts.at(idx);
    const int n_valid = int(ec.token_ids.size());
    Var xprime = mlm_stack(t, st, ec.token_ids, n_valid);
    FeatureVars fv = encode_features(t, st, xprime, n_valid);
    summaries.push_back(fv.summary);
    feats.push_back(fv);
  }
  Var stacked = t.vstack(summaries);
  Var vrows = project(t, st, stacked, /*train_mode=*/true);
  Var sum;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Var vrow = t.slice_rows(vrows, long(i), 1);
    Var logit = classify_logit(t, st, feats[i].F, feats[i].n_valid, vrow);
    Var term = t.bce_with_logits(logit, double(labels.at(batch[i])));
    sum = sum.valid() ? t.add(sum, term) : term;
  }
  Var mean = t.scale(sum, 1.0 / double(batch.size()));
  if (report) report->loss_cla = t.scalar(mean);
  return mean;
}

}  // namespace graph

struct TrainOutputs {
  std::filesystem::path out_dir;  // empty: keep everything in memory
  bool epoch_snapshots = false;   // write <out>/epochs/epoch-NNNN checkpoints
};

struct StageResult {
  Checkpoint final;
  std::vector<LossReport> epoch_losses;
  std::vector<std::string> log_lines;
  int best_epoch = 1;  // 1-based; lowest epoch loss
};

namespace detail {

inline std::string log_line(int epoch, const std::string& stage, const LossReport& r,
                            double wall_ms, std::uint64_t seed) {
  nlohmann::json j;
  j["epoch"] = epoch;
  j["stage"] = stage;
  j["loss_mlm"] = r.loss_mlm;
  j["loss_cl"] = r.loss_cl;
  j["loss_total"] = r.loss_total;
  j["loss_cla"] = r.loss_cla;
  j["wall_ms"] = wall_ms;
  j["seed"] = seed;
  return j.dump();
}

inline void append_log(const TrainOutputs& outs, const std::string& line) {
  if (outs.out_dir.empty()) return;
  std::filesystem::create_directories(outs.out_dir);
  std::ofstream f(outs.out_dir / "log.jsonl", std::ios::app | std::ios::binary);
  f << line << "\n";
}

inline Checkpoint make_checkpoint(const ModelState& st, const Vocabulary& vocab,
                                  const TrainConfig& tcfg, const LossConfig& lcfg,
                                  const std::string& stage, int epoch,
                                  const std::vector<std::string>& log_lines) {
  Checkpoint c;
  c.state = st;
  c.vocab = vocab;
  c.train_cfg = tcfg;
  c.loss_cfg = lcfg;
  c.stage = stage;
  c.epoch = epoch;
  const std::size_t keep = 50;
  const std::size_t from = log_lines.size() > keep ? log_lines.size() - keep : 0;
  c.log_tail.assign(log_lines.begin() + long(from), log_lines.end());
  return c;
}

inline void check_finite(double loss, const std::string& stage, int epoch, std::size_t batch) {
  if (!std::isfinite(loss))
    throw RuntimeFailure("divergence: non-finite loss in stage " + stage + " at epoch " +
                         std::to_string(epoch) + ", batch " + std::to_string(batch));
}

}  // namespace detail

// Stage 1: contrastive pretraining with the MLM objective over contract pairs.
inline StageResult pretrain_cl(ModelState& st, const std::vector<EncodedContract>& contracts,
                               const std::vector<int>& labels, const Vocabulary& vocab,
                               const TrainConfig& tcfg, const LossConfig& lcfg,
                               const SamplingPlan& plan, const TrainOutputs& outs = {}) {
  if (contracts.size() != labels.size())
    throw ValidationError("pretrain_cl: contract/label count mismatch");
  lcfg.validate();
  const auto pos_set = build_pos_set(labels);

  OptimizerConfig ocfg;
  ocfg.learning_rate = tcfg.learning_rate;
  ocfg.weight_decay = tcfg.weight_decay;
  AdamW opt(ocfg);
  auto params = st.parameters();

  StageResult res;
  double best = std::numeric_limits<double>::infinity();
  Checkpoint best_ckpt;

  for (int epoch = 1; epoch <= tcfg.epochs_cl; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    auto pairs = sample_pairs(labels, pos_set, plan, epoch);
    Rng order_rng = Rng::derive(plan.seed, "batch-order", std::uint64_t(epoch));
    order_rng.shuffle(pairs);
    Rng mask_rng = Rng::derive(tcfg.seed, "mlm-mask", std::uint64_t(epoch));

    LossReport epoch_sum;
    std::size_t n_batches = 0;
    for (std::size_t at = 0; at < pairs.size(); at += std::size_t(tcfg.batch_size)) {
      const std::size_t end = std::min(pairs.size(), at + std::size_t(tcfg.batch_size));
      std::vector<ContractPair> batch(pairs.begin() + long(at), pairs.begin() + long(end));
      Tape tape;
      LossReport r;
      Var total = graph::stage1_batch_loss(tape, st, contracts, batch, lcfg, mask_rng,
                                           tcfg.mlm_masking, &r);
      detail::check_finite(r.loss_total, "cl", epoch, n_batches);
      zero_grads(params);
      tape.backward(total);
      opt.step(params);
      epoch_sum.loss_mlm += r.loss_mlm;
      epoch_sum.loss_cl += r.loss_cl;
      epoch_sum.loss_total += r.loss_total;
      ++n_batches;
    }
    LossReport mean;
    mean.loss_mlm = epoch_sum.loss_mlm / double(n_batches);
    mean.loss_cl = epoch_sum.loss_cl / double(n_batches);
    mean.loss_total = epoch_sum.loss_total / double(n_batches);
    const double wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    res.epoch_losses.push_back(mean);
    res.log_lines.push_back(detail::log_line(epoch, "cl", mean, wall_ms, tcfg.seed));
    detail::append_log(outs, res.log_lines.back());

    if (mean.loss_total < best) {
      best = mean.loss_total;
      res.best_epoch = epoch;
      best_ckpt = detail::make_checkpoint(st, vocab, tcfg, lcfg, "cl", epoch, res.log_lines);
    }
    if (!outs.out_dir.empty() && outs.epoch_snapshots) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch-%04d", epoch);
      save_checkpoint(detail::make_checkpoint(st, vocab, tcfg, lcfg, "cl", epoch, res.log_lines),
                      outs.out_dir / "epochs" / name);
    }
  }

  res.final = detail::make_checkpoint(st, vocab, tcfg, lcfg, "cl", tcfg.epochs_cl, res.log_lines);
  if (!outs.out_dir.empty()) {
    save_checkpoint(res.final, outs.out_dir / "final");
    save_checkpoint(best_ckpt, outs.out_dir / "best");
  }
  return res;
}

// Stage 2: supervised fine-tuning of the full model with classification loss.
inline StageResult finetune(Checkpoint ckpt, const std::vector<EncodedContract>& contracts,
                            const std::vector<int>& labels, const TrainConfig& tcfg,
                            const TrainOutputs& outs = {}) {
  if (ckpt.stage != "cl")
    throw ValidationError("stage mismatch: fine-tuning requires a stage-cl checkpoint, got '" +
                          ckpt.stage + "'");
  if (contracts.size() != labels.size())
    throw ValidationError("finetune: contract/label count mismatch");

  ModelState& st = ckpt.state;
  OptimizerConfig ocfg;
  ocfg.learning_rate = tcfg.learning_rate;
  ocfg.weight_decay = tcfg.weight_decay;
  AdamW opt(ocfg);
  auto params = st.parameters();

  StageResult res;
  double best = std::numeric_limits<double>::infinity();
  Checkpoint best_ckpt;

  std::vector<std::size_t> indices(contracts.size());
  for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;

  for (int epoch = 1; epoch <= tcfg.epochs_ft; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng order_rng = Rng::derive(tcfg.seed, "ft-order", std::uint64_t(epoch));
    order_rng.shuffle(indices);

    double epoch_sum = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t at = 0; at < indices.size(); at += std::size_t(tcfg.batch_size)) {
      const std::size_t end = std::min(indices.size(), at + std::size_t(tcfg.batch_size));
      std::vector<std::size_t> batch(indices.begin() + long(at), indices.begin() + long(end));
      Tape tape;
      LossReport r;
      Var loss = graph::stage2_batch_loss(tape, st, contracts, batch, labels, &r);
      detail::check_finite(r.loss_cla, "ft", epoch, n_batches);
      zero_grads(params);
      tape.backward(loss);
      opt.step(params);
      epoch_sum += r.loss_cla;
      ++n_batches;
    }
    LossReport mean;
    mean.loss_cla = epoch_sum / double(n_batches);
    const double wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    res.epoch_losses.push_back(mean);
    res.log_lines.push_back(detail::log_line(epoch, "ft", mean, wall_ms, tcfg.seed));
    detail::append_log(outs, res.log_lines.back());

    if (mean.loss_cla < best) {
      best = mean.loss_cla;
      res.best_epoch = epoch;
      best_ckpt =
          detail::make_checkpoint(st, ckpt.vocab, tcfg, ckpt.loss_cfg, "ft", epoch, res.log_lines);
    }
  }

  res.final = detail::make_checkpoint(st, ckpt.vocab, tcfg, ckpt.loss_cfg, "ft", tcfg.epochs_ft,
                                      res.log_lines);
  if (!outs.out_dir.empty()) {
    save_checkpoint(res.final, outs.out_dir / "final");
    save_checkpoint(best_ckpt, outs.out_dir / "best");
  }
  return res;
}

}  // namespace clear
