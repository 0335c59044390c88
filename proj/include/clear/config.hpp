#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "clear/checkpoint.hpp"
#include "clear/common.hpp"
#include "clear/encoder.hpp"
#include "clear/objectives.hpp"

namespace clear {

struct ExperimentConfig {
  EncoderConfig enc;
  TrainConfig train;
  LossConfig loss;
  double split_ratio = 0.8;
  int min_frequency = 2;
  double threshold = 0.5;

  void validate() const {
    // vocab_size is resolved from data at run time; check the rest
    EncoderConfig probe = enc;
    probe.vocab_size = kNumReserved + 1;
    probe.validate();
    train.validate();
    loss.validate();
    if (!(split_ratio > 0.0 && split_ratio < 1.0))
      throw ValidationError("config: split_ratio must lie in (0,1)");
    if (min_frequency < 1) throw ValidationError("config: min_frequency must be >= 1");
    if (!(threshold > 0.0 && threshold < 1.0))
      throw ValidationError("config: threshold must lie in (0,1)");
  }
};

// Flat key=value file; '#' starts a comment; blank lines ignored.
inline std::map<std::string, std::string> parse_config_text(std::istream& is) {
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError("config: malformed line " + std::to_string(lineno) +
                            " (expected key=value)");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ValidationError("config: empty key at line " + std::to_string(lineno));
    if (kv.count(key))
      throw ValidationError("config: duplicate key '" + key + "' at line " +
                            std::to_string(lineno));
    kv[key] = value;
  }
  return kv;
}

namespace detail {

inline int to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const int r = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ValidationError("config: key '" + key + "' expects an integer, got '" + v + "'");
  }
}
inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ValidationError("config: key '" + key + "' expects a number, got '" + v + "'");
  }
}
inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const std::uint64_t r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ValidationError("config: key '" + key + "' expects an unsigned integer, got '" + v +
                          "'");
  }
}

}  // namespace detail

// Apply a parsed key=value map onto defaults. Unknown keys are rejected so a
// typo cannot silently fall back to a default.
inline ExperimentConfig experiment_config_from_map(const std::map<std::string, std::string>& kv) {
  ExperimentConfig cfg;
  using detail::to_double;
  using detail::to_int;
  using detail::to_u64;
  for (const auto& [key, value] : kv) {
    if (key == "k") cfg.enc.k = to_int(key, value);
    else if (key == "heads") cfg.enc.heads = to_int(key, value);
    else if (key == "layers_mlm") cfg.enc.layers_mlm = to_int(key, value);
    else if (key == "layers_feat") cfg.enc.layers_feat = to_int(key, value);
    else if (key == "max_len") cfg.enc.max_len = to_int(key, value);
    else if (key == "mask_rate") cfg.enc.mask_rate = to_double(key, value);
    else if (key == "encoder_kind") cfg.enc.encoder_kind = parse_encoder_kind(value);
    else if (key == "proj_norm") cfg.enc.proj_norm = parse_proj_norm(value);
    else if (key == "learning_rate") cfg.train.learning_rate = to_double(key, value);
    else if (key == "batch_size") cfg.train.batch_size = to_int(key, value);
    else if (key == "epochs_cl") cfg.train.epochs_cl = to_int(key, value);
    else if (key == "epochs_ft") cfg.train.epochs_ft = to_int(key, value);
    else if (key == "weight_decay") cfg.train.weight_decay = to_double(key, value);
    else if (key == "seed") cfg.train.seed = to_u64(key, value);
    else if (key == "optimizer") cfg.train.optimizer = value;
    else if (key == "task") cfg.train.task = value;
    else if (key == "device") cfg.train.device = value;
    else if (key == "margin") cfg.loss.margin = to_double(key, value);
    else if (key == "lambda_cl") cfg.loss.lambda_cl = to_double(key, value);
    else if (key == "lambda_mlm") cfg.loss.lambda_mlm = to_double(key, value);
    else if (key == "split_ratio") cfg.split_ratio = to_double(key, value);
    else if (key == "min_frequency") cfg.min_frequency = to_int(key, value);
    else if (key == "threshold") cfg.threshold = to_double(key, value);
    else throw ValidationError("config: unknown key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open " + path.string());
  return experiment_config_from_map(parse_config_text(is));
}

// Every key with its resolved value, for manifests and reproduction.
inline std::map<std::string, std::string> experiment_config_to_map(const ExperimentConfig& cfg) {
  using detail::fmt_double;
  std::map<std::string, std::string> kv;
  kv["k"] = std::to_string(cfg.enc.k);
  kv["heads"] = std::to_string(cfg.enc.heads);
  kv["layers_mlm"] = std::to_string(cfg.enc.layers_mlm);
  kv["layers_feat"] = std::to_string(cfg.enc.layers_feat);
  kv["max_len"] = std::to_string(cfg.enc.max_len);
  kv["mask_rate"] = fmt_double(cfg.enc.mask_rate);
  kv["encoder_kind"] = encoder_kind_name(cfg.enc.encoder_kind);
  kv["proj_norm"] = proj_norm_name(cfg.enc.proj_norm);
  kv["learning_rate"] = fmt_double(cfg.train.learning_rate);
  kv["batch_size"] = std::to_string(cfg.train.batch_size);
  kv["epochs_cl"] = std::to_string(cfg.train.epochs_cl);
  kv["epochs_ft"] = std::to_string(cfg.train.epochs_ft);
  kv["weight_decay"] = fmt_double(cfg.train.weight_decay);
  kv["seed"] = std::to_string(cfg.train.seed);
  kv["optimizer"] = cfg.train.optimizer;
  kv["task"] = cfg.train.task;
  kv["device"] = cfg.train.device;
  kv["margin"] = fmt_double(cfg.loss.margin);
  kv["lambda_cl"] = fmt_double(cfg.loss.lambda_cl);
  kv["lambda_mlm"] = fmt_double(cfg.loss.lambda_mlm);
  kv["split_ratio"] = fmt_double(cfg.split_ratio);
  kv["min_frequency"] = std::to_string(cfg.min_frequency);
  kv["threshold"] = fmt_double(cfg.threshold);
  return kv;
}

}  // namespace clear
