#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "clear/common.hpp"
#include "clear/corpus.hpp"
#include "clear/encoder.hpp"
#include "clear/objectives.hpp"
#include "clear/vocabulary.hpp"

namespace clear {

struct TrainConfig {
  double learning_rate = 3e-4;
  int batch_size = 16;
  int epochs_cl = 20;
  int epochs_ft = 10;
  double weight_decay = 0.01;
  std::uint64_t seed = 1;
  std::string optimizer = "adamw";
  std::string task = "ORDER";
  std::string device = "cpu";
  bool mlm_masking = true;  // off only for the no-MLM training variant

  void validate() const {
    if (!(learning_rate > 0.0)) throw ValidationError("train config: learning_rate must be > 0");
    if (batch_size < 1) throw ValidationError("train config: batch_size must be >= 1");
    if (epochs_cl < 1 || epochs_ft < 1)
      throw ValidationError("train config: epoch counts must be >= 1");
    if (weight_decay < 0.0) throw ValidationError("train config: negative weight_decay");
    if (optimizer != "adamw") throw ValidationError("train config: unknown optimizer tag");
    if (!known_label_tags().count(task))
      throw ValidationError("train config: unknown task '" + task + "'");
  }
};

struct Checkpoint {
  ModelState state;
  Vocabulary vocab;
  TrainConfig train_cfg;
  LossConfig loss_cfg;
  std::string stage;  // "cl" or "ft"
  int epoch = 0;
  std::vector<std::string> log_tail;
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  os.write(b, 4);
}
inline std::uint32_t get_u32(std::istream& is) {
  char b[4];
  if (!is.read(b, 4)) throw ValidationError("checkpoint: truncated parameter file");
  std::uint32_t v;
  std::memcpy(&v, b, 4);
  return v;
}

inline void write_array(std::ostream& os, const std::string& name, const Eigen::MatrixXd& m) {
  put_u32(os, std::uint32_t(name.size()));
  os.write(name.data(), long(name.size()));
  put_u32(os, std::uint32_t(m.rows()));
  put_u32(os, std::uint32_t(m.cols()));
  for (long i = 0; i < m.rows(); ++i)
    for (long j = 0; j < m.cols(); ++j) {
      const double d = m(i, j);
      char b[8];
      std::memcpy(b, &d, 8);
      os.write(b, 8);
    }
}

inline void read_array(std::istream& is, const std::string& want_name, Eigen::MatrixXd& out) {
  const std::uint32_t nl = get_u32(is);
  std::string name(nl, '\0');
  if (!is.read(name.data(), long(nl))) throw ValidationError("checkpoint: truncated parameter file");
  if (name != want_name)
    throw ValidationError("checkpoint: parameter order mismatch: expected '" + want_name +
                          "', found '" + name + "'");
  const long rows = long(get_u32(is));
  const long cols = long(get_u32(is));
  if (rows != out.rows() || cols != out.cols())
    throw ValidationError("checkpoint: shape mismatch for '" + name + "'");
  for (long i = 0; i < rows; ++i)
    for (long j = 0; j < cols; ++j) {
      char b[8];
      if (!is.read(b, 8)) throw ValidationError("checkpoint: truncated parameter file");
      double d;
      std::memcpy(&d, b, 8);
      out(i, j) = d;
    }
}

}  // namespace detail

// Directory layout: manifest.txt (ordered key=value), params.bin ("CLRB"
// array stream in parameters() order plus BN running stats), vocab.txt,
// log_tail.jsonl. No timestamps anywhere, so save->load->save is byte-stable.
inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    std::ofstream mf(dir / "manifest.txt", std::ios::binary);
    if (!mf) throw RuntimeFailure("cannot write " + (dir / "manifest.txt").string());
    const EncoderConfig& e = ckpt.state.cfg;
    const TrainConfig& t = ckpt.train_cfg;
    const LossConfig& l = ckpt.loss_cfg;
    using detail::fmt_double;
    mf << "format=clear-checkpoint v1\n";
    mf << "stage=" << ckpt.stage << "\n";
    mf << "epoch=" << ckpt.epoch << "\n";
    mf << "k=" << e.k << "\n";
    mf << "heads=" << e.heads << "\n";
    mf << "layers_mlm=" << e.layers_mlm << "\n";
    mf << "layers_feat=" << e.layers_feat << "\n";
    mf << "max_len=" << e.max_len << "\n";
    mf << "mask_rate=" << fmt_double(e.mask_rate) << "\n";
    mf << "vocab_size=" << e.vocab_size << "\n";
    mf << "encoder_kind=" << encoder_kind_name(e.encoder_kind) << "\n";
    mf << "proj_norm=" << proj_norm_name(e.proj_norm) << "\n";
    mf << "proj_batchnorm=" << (e.proj_batchnorm ? 1 : 0) << "\n";
    mf << "learning_rate=" << fmt_double(t.learning_rate) << "\n";
    mf << "batch_size=" << t.batch_size << "\n";
    mf << "epochs_cl=" << t.epochs_cl << "\n";
    mf << "epochs_ft=" << t.epochs_ft << "\n";
    mf << "weight_decay=" << fmt_double(t.weight_decay) << "\n";
    mf << "seed=" << t.seed << "\n";
    mf << "optimizer=" << t.optimizer << "\n";
    mf << "task=" << t.task << "\n";
    mf << "device=" << t.device << "\n";
    mf << "mlm_masking=" << (t.mlm_masking ? 1 : 0) << "\n";
    mf << "margin=" << fmt_double(l.margin) << "\n";
    mf << "lambda_cl=" << fmt_double(l.lambda_cl) << "\n";
    mf << "lambda_mlm=" << fmt_double(l.lambda_mlm) << "\n";
    mf << "vocab_hash=" << hex64(ckpt.vocab.hash()) << "\n";
    mf << "bn_count=" << ckpt.state.bn_count << "\n";
  }
  ckpt.vocab.save(dir / "vocab.txt");
  {
    std::ofstream pf(dir / "params.bin", std::ios::binary);
    if (!pf) throw RuntimeFailure("cannot write " + (dir / "params.bin").string());
    pf.write("CLRB", 4);
    detail::put_u32(pf, 1);  // format version
    // parameters() is non-const by design; checkpoint state is a value we own a copy of
    auto& st = const_cast<ModelState&>(ckpt.state);
    auto params = st.parameters();
    detail::put_u32(pf, std::uint32_t(params.size() + 2));
    for (Parameter* p : params) detail::write_array(pf, p->name, p->value);
    detail::write_array(pf, "bn.run_mean", ckpt.state.bn_run_mean);
    detail::write_array(pf, "bn.run_var", ckpt.state.bn_run_var);
  }
  {
    std::ofstream lf(dir / "log_tail.jsonl", std::ios::binary);
    for (const auto& line : ckpt.log_tail) lf << line << "\n";
  }
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::ifstream mf(dir / "manifest.txt", std::ios::binary);
  if (!mf) throw ValidationError("cannot open " + (dir / "manifest.txt").string());
  std::map<std::string, std::string> kv;
  std::vector<std::string> order;
  std::string line;
  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError("checkpoint manifest: malformed line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
    order.push_back(line.substr(0, eq));
  }
  auto need = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw ValidationError("checkpoint manifest: missing key '" + key + "'");
    return it->second;
  };
  if (need("format") != "clear-checkpoint v1")
    throw ValidationError("checkpoint manifest: unsupported format '" + need("format") + "'");

  Checkpoint ckpt;
  ckpt.stage = need("stage");
  if (ckpt.stage != "cl" && ckpt.stage != "ft")
    throw ValidationError("checkpoint manifest: stage must be cl or ft");
  ckpt.epoch = std::stoi(need("epoch"));

  EncoderConfig e;
  e.k = std::stoi(need("k"));
  e.heads = std::stoi(need("heads"));
  e.layers_mlm = std::stoi(need("layers_mlm"));
  e.layers_feat = std::stoi(need("layers_feat"));
  e.max_len = std::stoi(need("max_len"));
  e.mask_rate = std::stod(need("mask_rate"));
  e.vocab_size = std::stoi(need("vocab_size"));
  e.encoder_kind = parse_encoder_kind(need("encoder_kind"));
  e.proj_norm = parse_proj_norm(need("proj_norm"));
  e.proj_batchnorm = need("proj_batchnorm") == "1";

  TrainConfig& t = ckpt.train_cfg;
  t.learning_rate = std::stod(need("learning_rate"));
  t.batch_size = std::stoi(need("batch_size"));
  t.epochs_cl = std::stoi(need("epochs_cl"));
  t.epochs_ft = std::stoi(need("epochs_ft"));
  t.weight_decay = std::stod(need("weight_decay"));
  t.seed = std::stoull(need("seed"));
  t.optimizer = need("optimizer");
  t.task = need("task");
  t.device = need("device");
  t.mlm_masking = need("mlm_masking") == "1";

  ckpt.loss_cfg.margin = std::stod(need("margin"));
  ckpt.loss_cfg.lambda_cl = std::stod(need("lambda_cl"));
  ckpt.loss_cfg.lambda_mlm = std::stod(need("lambda_mlm"));

  ckpt.vocab = Vocabulary::load(dir / "vocab.txt");
  if (hex64(ckpt.vocab.hash()) != need("vocab_hash"))
    throw ValidationError("checkpoint: vocabulary hash mismatch");
  if (e.vocab_size != int(ckpt.vocab.size()))
    throw ValidationError("checkpoint: vocab_size does not match vocabulary file");

  ckpt.state.init(e, /*seed=*/0);
  ckpt.state.bn_count = std::stol(need("bn_count"));

  std::ifstream pf(dir / "params.bin", std::ios::binary);
  if (!pf) throw ValidationError("cannot open " + (dir / "params.bin").string());
  char magic[4];
  if (!pf.read(magic, 4) || std::memcmp(magic, "CLRB", 4) != 0)
    throw ValidationError("checkpoint: bad parameter file magic");
  if (detail::get_u32(pf) != 1)
    throw ValidationError("checkpoint: unsupported parameter file version");
  auto params = ckpt.state.parameters();
  const std::uint32_t count = detail::get_u32(pf);
  if (count != params.size() + 2)
    throw ValidationError("checkpoint: parameter count mismatch");
  for (Parameter* p : params) detail::read_array(pf, p->name, p->value);
  Eigen::MatrixXd tmp = ckpt.state.bn_run_mean;
  detail::read_array(pf, "bn.run_mean", tmp);
  ckpt.state.bn_run_mean = tmp.row(0);
  tmp = ckpt.state.bn_run_var;
  detail::read_array(pf, "bn.run_var", tmp);
  ckpt.state.bn_run_var = tmp.row(0);

  std::ifstream lf(dir / "log_tail.jsonl", std::ios::binary);
  std::string ll;
  while (std::getline(lf, ll)) ckpt.log_tail.push_back(ll);
  return ckpt;
}

}  // namespace clear
