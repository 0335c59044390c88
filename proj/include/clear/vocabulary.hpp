#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "clear/common.hpp"

namespace clear {

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kMaskId = 2;
inline constexpr int kNumReserved = 3;

inline constexpr const char* kPadToken = "<PAD>";
inline constexpr const char* kUnkToken = "<UNK>";
inline constexpr const char* kMaskToken = "<MASK>";

// Token <-> id table with fixed reserved ids. Non-reserved ids are assigned
// by descending corpus frequency, ties broken lexicographically.
class Vocabulary {
 public:
  Vocabulary() {
    add_reserved();
  }

  int size() const { return static_cast<int>(id_to_token_.size()); }
  int min_frequency() const { return min_frequency_; }

  int lookup(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnkId : it->second;
  }

  const std::string& token(int id) const {
    if (id < 0 || id >= size()) throw ValidationError("Vocabulary::token: id out of range");
    return id_to_token_[static_cast<size_t>(id)];
  }

  // Fingerprint over min_frequency and the ordered token list.
  std::uint64_t hash() const {
    std::uint64_t h = fnv1a64(std::to_string(min_frequency_));
    for (int id = kNumReserved; id < size(); ++id) {
      h = fnv1a64(id_to_token_[static_cast<size_t>(id)], h);
      h = fnv1a64("\n", h);
    }
    return h;
  }

  static Vocabulary build(const std::vector<std::vector<std::string>>& corpus, int min_frequency,
                          std::uint64_t fitting_corpus_hash = 0) {
    if (corpus.empty()) throw ValidationError("build_vocabulary: empty corpus");
    if (min_frequency < 1) throw ValidationError("build_vocabulary: min_frequency must be >= 1");
    std::unordered_map<std::string, std::int64_t> counts;
    for (const auto& seq : corpus)
      for (const auto& tok : seq) ++counts[tok];
    std::vector<std::pair<std::string, std::int64_t>> kept;
    kept.reserve(counts.size());
    for (auto& kv : counts)
      if (kv.second >= min_frequency) kept.emplace_back(kv.first, kv.second);
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    Vocabulary v;
    v.min_frequency_ = min_frequency;
    v.fitting_corpus_hash_ = fitting_corpus_hash;
    for (auto& kv : kept) {
      v.token_to_id_.emplace(kv.first, v.size());
      v.id_to_token_.push_back(kv.first);
    }
    return v;
  }

  // One token per line after a header recording the fit parameters;
  // line number equals id - 3.
  void save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ValidationError("cannot write vocabulary file: " + path.string());
    os << "# clear-vocab v1 min_frequency=" << min_frequency_
       << " corpus_hash=" << hex64(fitting_corpus_hash_) << "\n";
    for (int id = kNumReserved; id < size(); ++id)
      os << id_to_token_[static_cast<size_t>(id)] << "\n";
    if (!os) throw RuntimeFailure("write failed: " + path.string());
  }

  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("cannot open vocabulary file: " + path.string());
    std::string header;
    if (!std::getline(is, header) || header.rfind("# clear-vocab v1 ", 0) != 0)
      throw ValidationError("bad vocabulary header in " + path.string());
    Vocabulary v;
    {
      std::istringstream hs(header.substr(std::string("# clear-vocab v1 ").size()));
      std::string field;
      while (hs >> field) {
        auto eq = field.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = field.substr(0, eq);
        const std::string val = field.substr(eq + 1);
        if (key == "min_frequency") v.min_frequency_ = std::stoi(val);
        else if (key == "corpus_hash") v.fitting_corpus_hash_ = std::stoull(val, nullptr, 16);
      }
    }
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      if (v.token_to_id_.count(line))
        throw ValidationError("duplicate token in vocabulary file: " + line);
      v.token_to_id_.emplace(line, v.size());
      v.id_to_token_.push_back(line);
    }
    return v;
  }

  std::uint64_t fitting_corpus_hash() const { return fitting_corpus_hash_; }

 private:
  void add_reserved() {
    id_to_token_ = {kPadToken, kUnkToken, kMaskToken};
    token_to_id_ = {{kPadToken, kPadId}, {kUnkToken, kUnkId}, {kMaskToken, kMaskId}};
  }

  std::unordered_map<std::string, int> token_to_id_;
  std::vector<std::string> id_to_token_;
  int min_frequency_ = 1;
  std::uint64_t fitting_corpus_hash_ = 0;
};

inline Vocabulary build_vocabulary(const std::vector<std::vector<std::string>>& corpus,
                                   int min_frequency, std::uint64_t fitting_corpus_hash = 0) {
  return Vocabulary::build(corpus, min_frequency, fitting_corpus_hash);
}

}  // namespace clear
