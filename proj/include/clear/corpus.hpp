#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "clear/common.hpp"
#include "clear/tokenizer.hpp"
#include "clear/vocabulary.hpp"

namespace clear {

// Supported vulnerability task tags. ORDER is the synthetic statement-order
// task used by the desk-scale pipeline.
inline const std::set<std::string>& known_label_tags() {
  static const std::set<std::string> tags = {"RE", "TD", "IO", "ORDER"};
  return tags;
}

struct LabeledExample {
  std::string id;
  std::string source;
  std::map<std::string, int> labels;  // tag -> {0,1}

  int label_for(const std::string& task) const {
    auto it = labels.find(task);
    if (it == labels.end())
      throw ValidationError("contract " + id + " has no label for task " + task);
    return it->second;
  }
};

struct EncodedContract {
  std::string id;
  std::vector<int> token_ids;
  int original_length = 0;
};

// Tokenize + id-encode one contract. Overlong sequences are tail-truncated,
// unknown tokens map to UNK, and an empty token list encodes as single UNK.
inline EncodedContract encode(const std::vector<std::string>& tokens, const Vocabulary& vocab,
                              int max_len, const std::string& id = "") {
  if (max_len < 1) throw ValidationError("encode: max_len must be >= 1");
  EncodedContract ec;
  ec.id = id;
  ec.original_length = static_cast<int>(tokens.size());
  if (tokens.empty()) {
    ec.token_ids = {kUnkId};
    return ec;
  }
  const std::size_t n = std::min<std::size_t>(tokens.size(), static_cast<std::size_t>(max_len));
  ec.token_ids.reserve(n);
  for (std::size_t i = 0; i < n; ++i) ec.token_ids.push_back(vocab.lookup(tokens[i]));
  return ec;
}

inline std::uint64_t corpus_hash(const std::vector<LabeledExample>& corpus) {
  std::uint64_t h = fnv1a64("clear-corpus");
  for (const auto& ex : corpus) {
    h = fnv1a64(ex.id, h);
    h = fnv1a64("\x1f", h);
    h = fnv1a64(ex.source, h);
    for (const auto& kv : ex.labels) {
      h = fnv1a64(kv.first, h);
      h = fnv1a64(kv.second ? "1" : "0", h);
    }
    h = fnv1a64("\x1e", h);
  }
  return h;
}

// JSON Lines reader: {"id": ..., "source": ..., "labels": {...}} per line.
inline std::vector<LabeledExample> load_corpus(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open corpus file: " + path.string());
  std::vector<LabeledExample> out;
  std::set<std::string> seen_ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("malformed JSON at line " + std::to_string(line_no) + ": " + e.what());
    }
    for (const char* field : {"id", "source", "labels"}) {
      if (!j.contains(field))
        throw ValidationError("missing field " + std::string(field) + " at line " +
                              std::to_string(line_no));
    }
    LabeledExample ex;
    if (!j["id"].is_string() || !j["source"].is_string() || !j["labels"].is_object())
      throw ValidationError("wrong field type at line " + std::to_string(line_no));
    ex.id = j["id"].get<std::string>();
    ex.source = j["source"].get<std::string>();
    for (auto it = j["labels"].begin(); it != j["labels"].end(); ++it) {
      if (!known_label_tags().count(it.key()))
        throw ValidationError("unknown label key '" + it.key() + "' at line " +
                              std::to_string(line_no));
      if (!it.value().is_number_integer() ||
          (it.value().get<int>() != 0 && it.value().get<int>() != 1))
        throw ValidationError("label '" + it.key() + "' must be 0 or 1 at line " +
                              std::to_string(line_no));
      ex.labels[it.key()] = it.value().get<int>();
    }
    if (ex.labels.empty())
      throw ValidationError("empty labels object at line " + std::to_string(line_no));
    if (!seen_ids.insert(ex.id).second)
      throw ValidationError("duplicate id '" + ex.id + "' at line " + std::to_string(line_no));
    out.push_back(std::move(ex));
  }
  return out;
}

inline void save_corpus(const std::vector<LabeledExample>& corpus,
                        const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ValidationError("cannot write corpus file: " + path.string());
  for (const auto& ex : corpus) {
    nlohmann::json j;
    j["id"] = ex.id;
    j["source"] = ex.source;
    j["labels"] = nlohmann::json::object();
    for (const auto& kv : ex.labels) j["labels"][kv.first] = kv.second;
    os << j.dump() << "\n";
  }
  if (!os) throw RuntimeFailure("write failed: " + path.string());
}

struct CorpusSplit {
  std::vector<std::size_t> train;  // indices into the source corpus
  std::vector<std::size_t> test;
  std::uint64_t seed = 0;
  double ratio = 0.8;

  std::uint64_t hash() const {
    std::uint64_t h = fnv1a64("split");
    for (auto i : train) h = splitmix64(h ^ i);
    h = splitmix64(h ^ 0xffffffffull);
    for (auto i : test) h = splitmix64(h ^ i);
    return h;
  }
};

// Seeded uniform shuffle; the first floor(ratio * N) indices become train.
inline CorpusSplit split_corpus(std::size_t corpus_size, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ValidationError("split: ratio must be in (0,1)");
  if (corpus_size < 2) throw ValidationError("split: need at least 2 contracts");
  std::vector<std::size_t> order(corpus_size);
  for (std::size_t i = 0; i < corpus_size; ++i) order[i] = i;
  Rng rng = Rng::derive(seed, "split");
  rng.shuffle(order);
  const std::size_t n_train = static_cast<std::size_t>(
      std::floor(ratio * static_cast<double>(corpus_size)));
  CorpusSplit s;
  s.seed = seed;
  s.ratio = ratio;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  return s;
}

}  // namespace clear
