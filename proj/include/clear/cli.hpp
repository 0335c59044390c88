#pragma once

#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "clear/config.hpp"
#include "clear/detection.hpp"
#include "clear/evaluation.hpp"
#include "clear/synthetic.hpp"

namespace clear {

// Everything a run needs to be reproduced: the command, the fully resolved
// configuration, the seed actually used, and fingerprints of the inputs.
// Written before any training step touches the output directory.
struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  std::map<std::string, std::string> config;
  std::uint64_t seed = 0;
  std::string seed_source = "config";  // "config" | "flag" | "CLEAR_SEED"
  std::uint64_t corpus_hash = 0;
  bool has_vocab_hash = false;
  std::uint64_t vocab_hash = 0;
  std::string created_at;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["command"] = command;
    j["argv"] = argv;
    j["config"] = config;
    j["seed"] = seed;
    j["seed_source"] = seed_source;
    j["corpus_hash"] = corpus_hash;
    if (has_vocab_hash)
      j["vocab_hash"] = vocab_hash;
    else
      j["vocab_hash"] = nullptr;
    j["version"] = kVersion;
    j["created_at"] = created_at;
    return j;
  }
};

namespace cli_detail {

// Flag errors print the usage text; plain validation errors do not.
struct UsageError : ValidationError {
  using ValidationError::ValidationError;
};

inline const char* usage_text() {
  return
      "usage: clear <command> [flags]\n"
      "\n"
      "commands:\n"
      "  ingest            --input <dir|file> --out <corpus.jsonl>\n"
      "  synth             --n <int> --vuln-fraction <f> --seed <int> --out <corpus.jsonl>\n"
      "  pretrain          --corpus <f> --task {RE,TD,IO,ORDER} --config <f> --out <dir>\n"
      "                    [--ablation {none,mvv,mvn,rmlm}]\n"
      "  finetune          --ckpt <dir> --corpus <f> --out <dir>\n"
      "  eval              --model <dir> --corpus <f> --report <metrics.json>\n"
      "                    [--threshold <f>]\n"
      "  ablate            --corpus <f> --config <f> --variants <v1,v2,...> --out <dir>\n"
      "  sweep-encoders    --corpus <f> --config <f> --out <dir>\n"
      "  export-embeddings --ckpt-series <dir> --corpus <f> --out <dir>\n"
      "  detect            --model <dir> --task <t> --file <sol> [--threshold <f>]\n"
      "\n"
      "exit codes: 0 success, 1 validation error, 2 runtime failure\n"
      "environment: CLEAR_SEED overrides the configured seed for training commands\n";
}

struct Args {
  std::string command;
  std::map<std::string, std::string> flags;

  const std::string& require(const std::string& name) const {
    auto it = flags.find(name);
    if (it == flags.end())
      throw ValidationError(command + ": missing required flag --" + name);
    return it->second;
  }
  std::string get_or(const std::string& name, const std::string& fallback) const {
    auto it = flags.find(name);
    return it == flags.end() ? fallback : it->second;
  }
};

inline Args parse_args(const std::vector<std::string>& argv,
                       const std::set<std::string>& allowed) {
  Args a;
  a.command = argv.at(0);
  for (std::size_t i = 1; i < argv.size(); ++i) {
    const std::string& tok = argv[i];
    if (tok.rfind("--", 0) != 0)
      throw UsageError(a.command + ": unexpected argument '" + tok + "'");
    const std::string name = tok.substr(2);
    if (!allowed.count(name))
      throw UsageError(a.command + ": unknown flag --" + name);
    if (i + 1 >= argv.size())
      throw UsageError(a.command + ": flag --" + name + " needs a value");
    if (!a.flags.emplace(name, argv[++i]).second)
      throw UsageError(a.command + ": duplicate flag --" + name);
  }
  return a;
}

inline int parse_int(const std::string& cmd, const std::string& name, const std::string& value) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(value, &used);
    if (used == value.size()) return v;
  } catch (const std::exception&) {
  }
  throw ValidationError(cmd + ": --" + name + " expects an integer, got '" + value + "'");
}

inline double parse_double(const std::string& cmd, const std::string& name,
                           const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used == value.size()) return v;
  } catch (const std::exception&) {
  }
  throw ValidationError(cmd + ": --" + name + " expects a number, got '" + value + "'");
}

inline std::uint64_t parse_u64(const std::string& cmd, const std::string& name,
                               const std::string& value) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(value, &used);
    if (used == value.size() && value[0] != '-') return v;
  } catch (const std::exception&) {
  }
  throw ValidationError(cmd + ": --" + name + " expects a non-negative integer, got '" + value +
                        "'");
}

inline std::string timestamp_utc() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Training commands honor CLEAR_SEED so sweeps can be scripted without
// editing config files.
inline void apply_seed_env(TrainConfig& tcfg, RunManifest& manifest) {
  const char* env = std::getenv("CLEAR_SEED");
  if (env == nullptr || *env == '\0') return;
  tcfg.seed = parse_u64("seed override", "CLEAR_SEED", env);
  manifest.seed_source = "CLEAR_SEED";
}

inline void write_manifest(const RunManifest& m, const std::filesystem::path& path) {
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw RuntimeFailure("cannot write " + path.string());
  f << m.to_json().dump(2) << "\n";
}

// Manifest location: <out>/manifest.json for directory outputs,
// <out>.manifest.json as a sidecar for single-file outputs.
inline std::filesystem::path dir_manifest(const std::filesystem::path& out_dir) {
  return out_dir / "manifest.json";
}
inline std::filesystem::path file_manifest(const std::filesystem::path& out_file) {
  return out_file.string() + ".manifest.json";
}

inline RunManifest base_manifest(const Args& a, const std::vector<std::string>& argv) {
  RunManifest m;
  m.command = a.command;
  m.argv = argv;
  m.created_at = timestamp_utc();
  return m;
}

inline std::string fmt_f1_line(const MetricsReport& r, const std::string& tag) {
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "%-10s precision=%.4f recall=%.4f f1=%.4f (tp=%ld fp=%ld fn=%ld tn=%ld)",
                tag.c_str(), r.precision, r.recall, r.f1, r.tp, r.fp, r.fn, r.tn);
  return buf;
}

// --- subcommands -------------------------------------------------------------

inline int cmd_ingest(const Args& a, const std::vector<std::string>& argv, std::ostream& out) {
  namespace fs = std::filesystem;
  const fs::path input = a.require("input");
  const fs::path out_path = a.require("out");

  std::vector<fs::path> files;
  if (fs::is_directory(input)) {
    for (const auto& entry : fs::directory_iterator(input))
      if (entry.is_regular_file() && entry.path().extension() == ".jsonl")
        files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    if (files.empty())
      throw ValidationError("ingest: no .jsonl files under " + input.string());
  } else if (fs::is_regular_file(input)) {
    files.push_back(input);
  } else {
    throw ValidationError("ingest: no such file or directory: " + input.string());
  }

  std::vector<LabeledExample> merged;
  std::set<std::string> seen;
  for (const auto& f : files) {
    for (auto& ex : load_corpus(f)) {
      if (!seen.insert(ex.id).second)
        throw ValidationError("ingest: duplicate id '" + ex.id + "' across input files");
      merged.push_back(std::move(ex));
    }
  }

  RunManifest m = base_manifest(a, argv);
  m.corpus_hash = corpus_hash(merged);
  write_manifest(m, file_manifest(out_path));
  save_corpus(merged, out_path);
  out << "ingest: " << merged.size() << " contracts from " << files.size() << " file(s) -> "
      << out_path.string() << "\n";
  return 0;
}

inline int cmd_synth(const Args& a, const std::vector<std::string>& argv, std::ostream& out) {
  const int n = parse_int(a.command, "n", a.require("n"));
  const double vf = parse_double(a.command, "vuln-fraction", a.require("vuln-fraction"));
  const std::uint64_t seed = parse_u64(a.command, "seed", a.require("seed"));
  const std::filesystem::path out_path = a.require("out");

  const auto corpus = generate_synthetic_corpus(n, vf, seed);
  RunManifest m = base_manifest(a, argv);
  m.seed = seed;
  m.seed_source = "flag";
  m.corpus_hash = corpus_hash(corpus);
  write_manifest(m, file_manifest(out_path));
  save_corpus(corpus, out_path);
  out << "synth: " << corpus.size() << " contracts -> " << out_path.string() << "\n";
  return 0;
}

inline int cmd_pretrain(const Args& a, const std::vector<std::string>& argv, std::ostream& out) {
  const std::filesystem::path out_dir = a.require("out");
  const std::string ablation = a.get_or("ablation", "none");
  if (ablation != "none" && ablation != "mvv" && ablation != "mvn" && ablation != "rmlm")
    throw ValidationError("pretrain: --ablation must be one of none, mvv, mvn, rmlm");

  ExperimentConfig cfg = load_experiment_config(a.require("config"));
  cfg.train.task = a.require("task");
  const auto corpus = load_corpus(a.require("corpus"));
  const auto labels = task_labels(corpus, cfg.train.task);

  std::vector<std::vector<std::string>> token_seqs;
  token_seqs.reserve(corpus.size());
  for (const auto& ex : corpus) token_seqs.push_back(tokenize(ex.source));
  const Vocabulary vocab = Vocabulary::build(token_seqs, cfg.min_frequency, corpus_hash(corpus));
  cfg.enc.vocab_size = vocab.size();
  cfg.validate();

  SamplingPlan plan;
  if (ablation == "mvv") plan.ablation = PairAblation::mask_vv;
  if (ablation == "mvn") plan.ablation = PairAblation::mask_vn;
  if (ablation == "rmlm") {
    cfg.loss.lambda_mlm = 0.0;
    cfg.train.mlm_masking = false;
  }

  RunManifest m = base_manifest(a, argv);
  apply_seed_env(cfg.train, m);
  plan.seed = cfg.train.seed;
  m.seed = cfg.train.seed;
  m.config = experiment_config_to_map(cfg);
  m.config["ablation"] = ablation;
  m.corpus_hash = corpus_hash(corpus);
  m.has_vocab_hash = true;
  m.vocab_hash = vocab.hash();
  write_manifest(m, dir_manifest(out_dir));

  const auto encoded = encode_corpus(corpus, vocab, cfg.enc.max_len);
  ModelState st;
  st.init(cfg.enc, cfg.train.seed);

  TrainOutputs outs;
  outs.out_dir = out_dir;
  outs.epoch_snapshots = true;
  const StageResult r =
      pretrain_cl(st, encoded, labels, vocab, cfg.train, cfg.loss, plan, outs);
  out << "pretrain: " << cfg.train.epochs_cl << " epochs, final loss "
      << r.epoch_losses.back().loss_total << ", best epoch " << r.best_epoch
      << ", checkpoints under " << out_dir.string() << "\n";
  return 0;
}

inline int cmd_finetune(const Args& a, const std::vector<std::string>& argv, std::ostream& out) {
  const std::filesystem::path out_dir = a.require("out");
  Checkpoint ckpt = load_checkpoint(a.require("ckpt"));
  const auto corpus = load_corpus(a.require("corpus"));
  const auto labels = task_labels(corpus, ckpt.train_cfg.task);
  const auto encoded = encode_corpus(corpus, ckpt.vocab, ckpt.state.cfg.max_len);

  TrainConfig tcfg = ckpt.train_cfg;
  RunManifest m = base_manifest(a, argv);
  apply_seed_env(tcfg, m);
  m.seed = tcfg.seed;
  ExperimentConfig resolved;
  resolved.enc = ckpt.state.cfg;
  resolved.train = tcfg;
  resolved.loss = ckpt.loss_cfg;
  m.config = experiment_config_to_map(resolved);
  m.corpus_hash = corpus_hash(corpus);
  m.has_vocab_hash = true;
  m.vocab_hash = ckpt.vocab.hash();
  write_manifest(m, dir_manifest(out_dir));

  TrainOutputs outs;
  outs.out_dir = out_dir;
  const StageResult r = finetune(std::move(ckpt), encoded, labels, tcfg, outs);
  out << "finetune: " << tcfg.epochs_ft << " epochs, final loss "
      << r.epoch_losses.back().loss_cla << ", checkpoints under " << out_dir.string() << "\n";
  return 0;
}

inline int cmd_eval(const Args& a, const std::vector<std::string>& argv, std::ostream& out) {
  const std::filesystem::path report_path = a.require("report");
  const double threshold =
      parse_double(a.command, "threshold", a.get_or("threshold", "0.5"));
  Checkpoint ckpt = load_checkpoint(a.require("model"));
  if (ckpt.stage != "ft")
    throw ValidationError("stage mismatch: evaluation requires a fine-tuned model, got stage '" +
                          ckpt.stage + "'");
  const auto corpus = load_corpus(a.require("corpus"));
  const auto labels = task_labels(corpus, ckpt.train_cfg.task);
  const auto encoded = encode_corpus(corpus, ckpt.vocab, ckpt.state.cfg.max_len);

  std::vector<int> predictions;
  predictions.reserve(encoded.size());
  for (const auto& ec : encoded) {
    const EncoderOutput enc_out = encode_eval(ckpt.state, ec.token_ids);
    predictions.push_back(
        predict(classify(enc_out.F, enc_out.v, ckpt.state, enc_out.n_valid), threshold));
  }
  MetricsReport r = compute_metrics(predictions, labels);
  r.task = ckpt.train_cfg.task;
  r.variant = "eval";

  RunManifest m = base_manifest(a, argv);
  m.seed = ckpt.train_cfg.seed;
  m.corpus_hash = corpus_hash(corpus);
  m.has_vocab_hash = true;
  m.vocab_hash = ckpt.vocab.hash();
  write_manifest(m, file_manifest(report_path));
  std::ofstream f(report_path, std::ios::binary);
  if (!f) throw RuntimeFailure("cannot write " + report_path.string());
  f << r.to_json().dump(2) << "\n";
  out << fmt_f1_line(r, r.task) << "\n";
  return 0;
}

inline int cmd_ablate(const Args& a, const std::vector<std::string>& argv, std::ostream& out) {
  const std::filesystem::path out_dir = a.require("out");
  std::vector<std::string> variants;
  {
    std::stringstream ss(a.require("variants"));
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item.empty()) throw ValidationError("ablate: empty entry in --variants");
      if (std::find(known_variants().begin(), known_variants().end(), item) ==
          known_variants().end())
        throw ValidationError("ablate: unknown variant '" + item + "'");
      if (std::find(variants.begin(), variants.end(), item) != variants.end())
        throw ValidationError("ablate: duplicate variant '" + item + "'");
      variants.push_back(item);
    }
    if (variants.empty()) throw ValidationError("ablate: --variants list is empty");
  }

  ExperimentConfig cfg = load_experiment_config(a.require("config"));
  const auto corpus = load_corpus(a.require("corpus"));

  RunManifest m = base_manifest(a, argv);
  apply_seed_env(cfg.train, m);
  m.seed = cfg.train.seed;
  m.config = experiment_config_to_map(cfg);
  m.corpus_hash = corpus_hash(corpus);
  write_manifest(m, dir_manifest(out_dir));

  nlohmann::json summary = nlohmann::json::array();
  for (const auto& variant : variants) {
    TrainOutputs outs;
    outs.out_dir = out_dir / variant;
    const VariantRun run = run_variant(corpus, cfg, variant, outs);
    std::ofstream f(out_dir / variant / "metrics.json", std::ios::binary);
    if (!f) throw RuntimeFailure("cannot write metrics for variant " + variant);
    f << run.metrics.to_json().dump(2) << "\n";
    nlohmann::json e = run.metrics.to_json();
    e["split_hash"] = run.split_hash;
    summary.push_back(e);
    out << fmt_f1_line(run.metrics, variant) << "\n";
  }
  std::ofstream f(out_dir / "ablation.json", std::ios::binary);
  f << summary.dump(2) << "\n";
  return 0;
}

inline int cmd_sweep_encoders(const Args& a, const std::vector<std::string>& argv,
                              std::ostream& out) {
  const std::filesystem::path out_dir = a.require("out");
  ExperimentConfig cfg = load_experiment_config(a.require("config"));
  const auto corpus = load_corpus(a.require("corpus"));

  RunManifest m = base_manifest(a, argv);
  apply_seed_env(cfg.train, m);
  m.seed = cfg.train.seed;
  m.config = experiment_config_to_map(cfg);
  m.corpus_hash = corpus_hash(corpus);
  write_manifest(m, dir_manifest(out_dir));

  TrainOutputs outs;
  outs.out_dir = out_dir;
  const auto reports = run_encoder_sweep(corpus, cfg, outs);
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& r : reports) {
    summary.push_back(r.to_json());
    out << fmt_f1_line(r, r.variant) << "\n";
  }
  std::ofstream f(out_dir / "sweep.json", std::ios::binary);
  if (!f) throw RuntimeFailure("cannot write " + (out_dir / "sweep.json").string());
  f << summary.dump(2) << "\n";
  return 0;
}

inline int cmd_export_embeddings(const Args& a, const std::vector<std::string>& argv,
                                 std::ostream& out) {
  namespace fs = std::filesystem;
  const fs::path series = a.require("ckpt-series");
  const fs::path out_dir = a.require("out");
  const auto corpus = load_corpus(a.require("corpus"));

  if (!fs::is_directory(series))
    throw ValidationError("export-embeddings: no such directory " + series.string());
  std::vector<fs::path> epochs;
  for (const auto& entry : fs::directory_iterator(series))
    if (entry.is_directory() && entry.path().filename().string().rfind("epoch-", 0) == 0)
      epochs.push_back(entry.path());
  if (epochs.empty())
    throw ValidationError("export-embeddings: no epoch checkpoints under " + series.string());
  std::sort(epochs.begin(), epochs.end());
  const Checkpoint first = load_checkpoint(epochs.front());

  RunManifest m = base_manifest(a, argv);
  m.seed = first.train_cfg.seed;
  m.corpus_hash = corpus_hash(corpus);
  m.has_vocab_hash = true;
  m.vocab_hash = first.vocab.hash();
  write_manifest(m, dir_manifest(out_dir));

  const auto snaps = export_embeddings(series, corpus, first.train_cfg.task, out_dir);
  out << "export-embeddings: " << snaps.size() << " epochs x " << corpus.size()
      << " contracts -> " << (out_dir / "embeddings.csv").string() << "\n";
  return 0;
}

inline int cmd_detect(const Args& a, const std::vector<std::string>& argv, std::ostream& out) {
  (void)argv;
  const std::filesystem::path file = a.require("file");
  const double threshold =
      parse_double(a.command, "threshold", a.get_or("threshold", "0.5"));
  Checkpoint ckpt = load_checkpoint(a.require("model"));
  const std::string task = a.get_or("task", ckpt.train_cfg.task);
  if (task != ckpt.train_cfg.task)
    throw ValidationError("task mismatch: model is trained for " + ckpt.train_cfg.task +
                          ", not " + task);

  std::ifstream f(file, std::ios::binary);
  if (!f) throw ValidationError("detect: cannot open " + file.string());
  std::stringstream ss;
  ss << f.rdbuf();

  const Prediction p = detect(ss.str(), ckpt, file.stem().string(), threshold);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", p.probability);
  out << "{\"id\":" << nlohmann::json(p.id).dump() << ",\"task\":"
      << nlohmann::json(p.task).dump() << ",\"probability\":" << buf
      << ",\"verdict\":" << p.verdict << "}\n";
  return 0;
}

}  // namespace cli_detail

// Dispatch a full command line (without the program name). Writes human
// output to `out`, errors to `err`; returns the process exit code.
inline int run_cli(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  using namespace cli_detail;
  static const std::map<std::string, std::set<std::string>> kFlags = {
      {"ingest", {"input", "out"}},
      {"synth", {"n", "vuln-fraction", "seed", "out"}},
      {"pretrain", {"corpus", "task", "config", "out", "ablation"}},
      {"finetune", {"ckpt", "corpus", "out"}},
      {"eval", {"model", "corpus", "report", "threshold"}},
      {"ablate", {"corpus", "config", "variants", "out"}},
      {"sweep-encoders", {"corpus", "config", "out"}},
      {"export-embeddings", {"ckpt-series", "corpus", "out"}},
      {"detect", {"model", "task", "file", "threshold"}},
  };

  if (argv.empty()) {
    err << usage_text();
    return 1;
  }
  if (argv[0] == "help" || argv[0] == "--help" || argv[0] == "-h") {
    out << usage_text();
    return 0;
  }
  const auto spec = kFlags.find(argv[0]);
  if (spec == kFlags.end()) {
    err << "unknown command '" << argv[0] << "'\n" << usage_text();
    return 1;
  }

  try {
    const Args a = parse_args(argv, spec->second);
    if (a.command == "ingest") return cmd_ingest(a, argv, out);
    if (a.command == "synth") return cmd_synth(a, argv, out);
    if (a.command == "pretrain") return cmd_pretrain(a, argv, out);
    if (a.command == "finetune") return cmd_finetune(a, argv, out);
    if (a.command == "eval") return cmd_eval(a, argv, out);
    if (a.command == "ablate") return cmd_ablate(a, argv, out);
    if (a.command == "sweep-encoders") return cmd_sweep_encoders(a, argv, out);
    if (a.command == "export-embeddings") return cmd_export_embeddings(a, argv, out);
    return cmd_detect(a, argv, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n" << usage_text();
    return 1;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const RuntimeFailure& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace clear
