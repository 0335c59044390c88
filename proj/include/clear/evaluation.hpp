#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "clear/config.hpp"
#include "clear/detection.hpp"
#include "clear/sampling.hpp"
#include "clear/training.hpp"

namespace clear {

struct MetricsReport {
  long tp = 0, fp = 0, tn = 0, fn = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  bool degenerate_precision = false;  // TP+FP == 0
  bool degenerate_recall = false;     // TP+FN == 0
  std::string task;
  std::string variant;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["tp"] = tp;
    j["fp"] = fp;
    j["tn"] = tn;
    j["fn"] = fn;
    j["precision"] = precision;
    j["recall"] = recall;
    j["f1"] = f1;
    j["degenerate_precision"] = degenerate_precision;
    j["degenerate_recall"] = degenerate_recall;
    j["task"] = task;
    j["variant"] = variant;
    return j;
  }
};

inline MetricsReport compute_metrics(const std::vector<int>& predictions,
                                     const std::vector<int>& labels) {
  if (predictions.size() != labels.size())
    throw ValidationError("compute_metrics: prediction/label count mismatch");
  MetricsReport r;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const int p = predictions[i], y = labels[i];
    if ((p != 0 && p != 1) || (y != 0 && y != 1))
      throw ValidationError("compute_metrics: entries must be 0 or 1");
    if (p == 1 && y == 1) ++r.tp;
    else if (p == 1 && y == 0) ++r.fp;
    else if (p == 0 && y == 1) ++r.fn;
    else ++r.tn;
  }
  if (r.tp + r.fp == 0) r.degenerate_precision = true;
  else r.precision = double(r.tp) / double(r.tp + r.fp);
  if (r.tp + r.fn == 0) r.degenerate_recall = true;
  else r.recall = double(r.tp) / double(r.tp + r.fn);
  if (r.precision + r.recall > 0.0)
    r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
  return r;
}

// --- experiment runner ------------------------------------------------------

struct VariantRun {
  MetricsReport metrics;
  Checkpoint model;                     // fine-tuned, stage "ft"
  std::vector<std::string> cl_log;      // stage-1 epoch lines (empty for rcl)
  std::vector<std::string> ft_log;
  std::uint64_t split_hash = 0;
  std::vector<int> test_predictions;
  std::vector<int> test_labels;
  std::vector<double> test_probabilities;
};

inline const std::vector<std::string>& known_variants() {
  static const std::vector<std::string> v{"full", "mvv", "mvn", "rmlm", "rcl"};
  return v;
}

// One complete two-stage experiment on a labeled corpus. Variants:
//   full — both stages; mvv/mvn — stage 1 with the pair ablation;
//   rmlm — stage 1 without masking or the MLM loss term;
//   rcl  — no stage 1 at all (random initialization straight to fine-tuning).
inline VariantRun run_variant(const std::vector<LabeledExample>& corpus,
                              const ExperimentConfig& base, const std::string& variant,
                              const TrainOutputs& outs = {}) {
  if (std::find(known_variants().begin(), known_variants().end(), variant) ==
      known_variants().end())
    throw ValidationError("unknown variant '" + variant + "'");
  ExperimentConfig cfg = base;
  cfg.validate();
  SamplingPlan plan;
  plan.seed = cfg.train.seed;
  if (variant == "mvv") plan.ablation = PairAblation::mask_vv;
  if (variant == "mvn") plan.ablation = PairAblation::mask_vn;
  if (variant == "rmlm") {
    cfg.loss.lambda_mlm = 0.0;
    cfg.train.mlm_masking = false;
  }

  const CorpusSplit split = split_corpus(corpus.size(), cfg.split_ratio, cfg.train.seed);
  std::vector<LabeledExample> train_set, test_set;
  for (std::size_t i : split.train) train_set.push_back(corpus[i]);
  for (std::size_t i : split.test) test_set.push_back(corpus[i]);

  std::vector<std::vector<std::string>> train_tokens;
  train_tokens.reserve(train_set.size());
  for (const auto& ex : train_set) train_tokens.push_back(tokenize(ex.source));
  const Vocabulary vocab =
      Vocabulary::build(train_tokens, cfg.min_frequency, corpus_hash(train_set));
  cfg.enc.vocab_size = vocab.size();

  const auto train_enc = encode_corpus(train_set, vocab, cfg.enc.max_len);
  const auto test_enc = encode_corpus(test_set, vocab, cfg.enc.max_len);
  const auto train_labels = task_labels(train_set, cfg.train.task);
  const auto test_labels = task_labels(test_set, cfg.train.task);

  ModelState st;
  st.init(cfg.enc, cfg.train.seed);

  VariantRun out;
  out.split_hash = split.hash();

  Checkpoint cl_ckpt;
  if (variant == "rcl") {
    cl_ckpt = detail::make_checkpoint(st, vocab, cfg.train, cfg.loss, "cl", 0, {});
  } else {
    TrainOutputs cl_outs = outs;
    if (!outs.out_dir.empty()) cl_outs.out_dir = outs.out_dir / "cl";
    StageResult r = pretrain_cl(st, train_enc, train_labels, vocab, cfg.train, cfg.loss, plan,
                                cl_outs);
    out.cl_log = r.log_lines;
    cl_ckpt = std::move(r.final);
  }

  TrainOutputs ft_outs = outs;
  if (!outs.out_dir.empty()) ft_outs.out_dir = outs.out_dir / "ft";
  ft_outs.epoch_snapshots = false;
  StageResult ft = finetune(std::move(cl_ckpt), train_enc, train_labels, cfg.train, ft_outs);
  out.ft_log = ft.log_lines;
  out.model = std::move(ft.final);

  for (std::size_t i = 0; i < test_enc.size(); ++i) {
    const EncoderOutput enc_out = encode_eval(out.model.state, test_enc[i].token_ids);
    const double p = classify(enc_out.F, enc_out.v, out.model.state, enc_out.n_valid);
    out.test_probabilities.push_back(p);
    out.test_predictions.push_back(predict(p, cfg.threshold));
  }
  out.test_labels = test_labels;
  out.metrics = compute_metrics(out.test_predictions, out.test_labels);
  out.metrics.task = cfg.train.task;
  out.metrics.variant = variant;
  return out;
}

// Encoder comparison: for each recurrent kind, one run with the pretraining
// stage ("cl-<kind>") and one without ("<kind>"). Six tagged reports.
inline std::vector<MetricsReport> run_encoder_sweep(const std::vector<LabeledExample>& corpus,
                                                    const ExperimentConfig& base,
                                                    const TrainOutputs& outs = {}) {
  std::vector<MetricsReport> reports;
  for (EncoderKind kind : {EncoderKind::rnn, EncoderKind::lstm, EncoderKind::gru}) {
    for (const bool with_cl : {true, false}) {
      ExperimentConfig cfg = base;
      cfg.enc.encoder_kind = kind;
      TrainOutputs sub = outs;
      const std::string tag =
          (with_cl ? std::string("cl-") : std::string()) + encoder_kind_name(kind);
      if (!outs.out_dir.empty()) sub.out_dir = outs.out_dir / tag;
      VariantRun run = run_variant(corpus, cfg, with_cl ? "full" : "rcl", sub);
      run.metrics.variant = tag;
      reports.push_back(run.metrics);
    }
  }
  return reports;
}

// --- embedding export -------------------------------------------------------

struct Pca2 {
  Eigen::MatrixXd coords;    // N x 2, centered inputs projected on the basis
  Eigen::MatrixXd basis;     // k x 2, orthonormal columns
  double explained[2] = {0.0, 0.0};
};

// Top-2 principal components. Sign convention: the first nonzero loading of
// each basis column is positive, so output is row-order independent.
inline Pca2 pca_top2(const Eigen::MatrixXd& rows) {
  if (rows.rows() < 3) throw ValidationError("pca_top2: need at least 3 rows");
  const Eigen::RowVectorXd mean = rows.colwise().mean();
  const Eigen::MatrixXd centered = rows.rowwise() - mean;
  const Eigen::MatrixXd cov =
      (centered.transpose() * centered) / double(rows.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw RuntimeFailure("pca_top2: eigendecomposition failed");
  const long k = cov.rows();
  Pca2 out;
  out.basis.resize(k, 2);
  double total = 0.0;
  for (long i = 0; i < k; ++i) total += std::max(0.0, eig.eigenvalues()(i));
  for (int c = 0; c < 2; ++c) {
    const long src = k - 1 - c;  // eigenvalues ascend; take the top two
    Eigen::VectorXd dir = eig.eigenvectors().col(src);
    for (long i = 0; i < k; ++i) {
      if (std::abs(dir(i)) > 1e-12) {
        if (dir(i) < 0.0) dir = -dir;
        break;
      }
    }
    out.basis.col(c) = dir;
    out.explained[c] = total > 0.0 ? std::max(0.0, eig.eigenvalues()(src)) / total : 0.0;
  }
  out.coords = centered * out.basis;
  return out;
}

struct EmbeddingSnapshot {
  int epoch = 0;
  std::vector<std::string> ids;
  std::vector<int> labels;
  Eigen::MatrixXd coords;  // N x 2
  double explained[2] = {0.0, 0.0};
};

// Correlation vectors of every contract under one checkpoint, one row each.
inline Eigen::MatrixXd eval_v_rows(Checkpoint& ckpt,
                                   const std::vector<EncodedContract>& contracts) {
  Eigen::MatrixXd vs(long(contracts.size()), ckpt.state.cfg.k);
  for (std::size_t i = 0; i < contracts.size(); ++i)
    vs.row(long(i)) = encode_eval(ckpt.state, contracts[i].token_ids).v;
  return vs;
}

inline double inter_class_centroid_distance(const Eigen::MatrixXd& vs,
                                            const std::vector<int>& labels) {
  if (vs.rows() != long(labels.size()))
    throw ValidationError("centroid distance: row/label count mismatch");
  Eigen::RowVectorXd c0 = Eigen::RowVectorXd::Zero(vs.cols());
  Eigen::RowVectorXd c1 = Eigen::RowVectorXd::Zero(vs.cols());
  long n0 = 0, n1 = 0;
  for (long i = 0; i < vs.rows(); ++i) {
    if (labels[std::size_t(i)] == 1) {
      c1 += vs.row(i);
      ++n1;
    } else {
      c0 += vs.row(i);
      ++n0;
    }
  }
  if (n0 == 0 || n1 == 0)
    throw ValidationError("centroid distance: both classes must be present");
  return (c1 / double(n1) - c0 / double(n0)).norm();
}

// Project v-space onto 2-D per epoch across a series of checkpoints
// (<series>/epoch-NNNN directories as written during pretraining).
inline std::vector<EmbeddingSnapshot> export_embeddings(
    const std::filesystem::path& series_dir, const std::vector<LabeledExample>& corpus,
    const std::string& task, const std::filesystem::path& out_dir = {}) {
  namespace fs = std::filesystem;
  if (corpus.size() < 3) throw ValidationError("export_embeddings: need at least 3 contracts");
  std::vector<fs::path> epochs;
  if (!fs::is_directory(series_dir))
    throw ValidationError("export_embeddings: no such directory " + series_dir.string());
  for (const auto& entry : fs::directory_iterator(series_dir))
    if (entry.is_directory() && entry.path().filename().string().rfind("epoch-", 0) == 0)
      epochs.push_back(entry.path());
  if (epochs.empty())
    throw ValidationError("export_embeddings: no epoch checkpoints under " + series_dir.string());
  std::sort(epochs.begin(), epochs.end());

  const std::vector<int> labels = task_labels(corpus, task);
  std::vector<EmbeddingSnapshot> snaps;
  for (const auto& dir : epochs) {
    Checkpoint ckpt = load_checkpoint(dir);
    const auto encoded = encode_corpus(corpus, ckpt.vocab, ckpt.state.cfg.max_len);
    const Eigen::MatrixXd vs = eval_v_rows(ckpt, encoded);
    const Pca2 pca = pca_top2(vs);
    EmbeddingSnapshot snap;
    snap.epoch = ckpt.epoch;
    for (const auto& ex : corpus) snap.ids.push_back(ex.id);
    snap.labels = labels;
    snap.coords = pca.coords;
    snap.explained[0] = pca.explained[0];
    snap.explained[1] = pca.explained[1];
    snaps.push_back(std::move(snap));
  }

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream csv(out_dir / "embeddings.csv", std::ios::binary);
    if (!csv) throw RuntimeFailure("cannot write " + (out_dir / "embeddings.csv").string());
    csv << "epoch,id,label,x,y\n";
    for (const auto& s : snaps)
      for (std::size_t i = 0; i < s.ids.size(); ++i)
        csv << s.epoch << "," << s.ids[i] << "," << s.labels[i] << ","
            << detail::fmt_double(s.coords(long(i), 0)) << ","
            << detail::fmt_double(s.coords(long(i), 1)) << "\n";
    nlohmann::json j = nlohmann::json::array();
    for (const auto& s : snaps) {
      nlohmann::json e;
      e["epoch"] = s.epoch;
      e["explained_variance"] = {s.explained[0], s.explained[1]};
      j.push_back(e);
    }
    std::ofstream side(out_dir / "explained_variance.json", std::ios::binary);
    side << j.dump(2) << "\n";
  }
  return snaps;
}

}  // namespace clear
