#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "clear/autodiff.hpp"
#include "clear/common.hpp"
#include "clear/vocabulary.hpp"

namespace clear {

enum class EncoderKind { transformer, rnn, lstm, gru };
enum class ProjNorm { layernorm, l2, none };

inline EncoderKind parse_encoder_kind(const std::string& s) {
  if (s == "transformer") return EncoderKind::transformer;
  if (s == "rnn") return EncoderKind::rnn;
  if (s == "lstm") return EncoderKind::lstm;
  if (s == "gru") return EncoderKind::gru;
  throw ValidationError("unknown encoder kind '" + s + "'");
}
inline std::string encoder_kind_name(EncoderKind k) {
  switch (k) {
    case EncoderKind::transformer: return "transformer";
    case EncoderKind::rnn: return "rnn";
    case EncoderKind::lstm: return "lstm";
    default: return "gru";
  }
}
inline ProjNorm parse_proj_norm(const std::string& s) {
  if (s == "layernorm") return ProjNorm::layernorm;
  if (s == "l2") return ProjNorm::l2;
  if (s == "none") return ProjNorm::none;
  throw ValidationError("unknown projection norm '" + s + "'");
}
inline std::string proj_norm_name(ProjNorm n) {
  switch (n) {
    case ProjNorm::layernorm: return "layernorm";
    case ProjNorm::l2: return "l2";
    default: return "none";
  }
}

struct EncoderConfig {
  int k = 128;
  int heads = 4;
  int layers_mlm = 3;
  int layers_feat = 3;
  int max_len = 256;
  double mask_rate = 0.3;
  int vocab_size = 0;
  EncoderKind encoder_kind = EncoderKind::transformer;
  ProjNorm proj_norm = ProjNorm::layernorm;
  bool proj_batchnorm = true;  // disabled only in identity-style test setups

  void validate() const {
    if (k < 2 || k % 2 != 0) throw ValidationError("encoder config: k must be even and >= 2");
    if (heads < 1 || k % heads != 0)
      throw ValidationError("encoder config: k must be divisible by heads");
    if (layers_mlm < 0 || layers_feat < 0)
      throw ValidationError("encoder config: negative layer count");
    if (!(mask_rate > 0.0 && mask_rate < 1.0))
      throw ValidationError("encoder config: mask_rate must be in (0,1)");
    if (max_len < 1) throw ValidationError("encoder config: max_len must be >= 1");
    if (vocab_size < kNumReserved + 1)
      throw ValidationError("encoder config: vocabulary too small");
  }
};

// One post-norm transformer block: attention + residual + LN, FFN + residual + LN.
struct TransformerLayer {
  Parameter wq, bq, wk, bk, wv, bv, wo, bo;
  Parameter ln1_g, ln1_b;
  Parameter w1, b1, w2, b2;
  Parameter ln2_g, ln2_b;
};

// Sin/cos position table; pos runs over rows, paired columns share a frequency.
inline Eigen::MatrixXd positional_encoding(int n, int k) {
  if (k % 2 != 0) throw ValidationError("positional_encoding: k must be even");
  Eigen::MatrixXd pe(n, k);
  for (int pos = 0; pos < n; ++pos) {
    for (int l = 0; 2 * l < k; ++l) {
      const double freq = std::pow(10000.0, double(2 * l) / double(k));
      pe(pos, 2 * l) = std::sin(double(pos) / freq);
      pe(pos, 2 * l + 1) = std::cos(double(pos) / freq);
    }
  }
  return pe;
}

// One token sequence with a masked view for the MLM objective.
struct MaskedSequence {
  std::vector<int> masked_ids;
  std::vector<int> target_ids;      // the original sequence
  std::vector<int> mask_positions;  // sorted, unique
};

// Replace max(1, round(rate*n)) uniformly chosen positions with MASK.
inline MaskedSequence apply_mlm_mask(const std::vector<int>& ids, double mask_rate, Rng& rng) {
  if (ids.empty()) throw ValidationError("apply_mlm_mask: empty sequence");
  const std::size_t n = ids.size();
  std::size_t want = std::size_t(std::llround(mask_rate * double(n)));
  if (want < 1) want = 1;
  if (want > n) want = n;
  std::vector<int> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = int(i);
  // partial Fisher-Yates: first `want` slots become the masked positions
  for (std::size_t i = 0; i < want; ++i) {
    const std::size_t j = i + std::size_t(rng.below(n - i));
    std::swap(order[i], order[j]);
  }
  MaskedSequence out;
  out.target_ids = ids;
  out.masked_ids = ids;
  out.mask_positions.assign(order.begin(), order.begin() + long(want));
  std::sort(out.mask_positions.begin(), out.mask_positions.end());
  for (int p : out.mask_positions) out.masked_ids[std::size_t(p)] = kMaskId;
  return out;
}

// All trainable state. Parameter objects never move after init(), so raw
// pointers into the state stay valid for a training run.
struct ModelState {
  EncoderConfig cfg;
  Parameter embed;
  std::vector<TransformerLayer> mlm_layers;
  std::vector<TransformerLayer> feat_layers;
  Parameter rec_wx, rec_wh, rec_b;          // recurrent feature stack
  Parameter rec_sum_w, rec_sum_b;           // final-state projection
  Parameter mlm_head_w, mlm_head_b;
  Parameter proj_w1, proj_ln_g, proj_ln_b, proj_w2, proj_bn_g, proj_bn_b;
  Parameter cls_w3, cls_b;
  Eigen::RowVectorXd bn_run_mean, bn_run_var;
  long bn_count = 0;  // train-mode projection batches seen so far

  bool has_running_stats() const { return bn_count > 0; }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> ps;
    ps.push_back(&embed);
    auto add_layer = [&](TransformerLayer& L) {
      for (Parameter* p : {&L.wq, &L.bq, &L.wk, &L.bk, &L.wv, &L.bv, &L.wo, &L.bo, &L.ln1_g,
                           &L.ln1_b, &L.w1, &L.b1, &L.w2, &L.b2, &L.ln2_g, &L.ln2_b})
        ps.push_back(p);
    };
    for (auto& L : mlm_layers) add_layer(L);
    if (cfg.encoder_kind == EncoderKind::transformer) {
      for (auto& L : feat_layers) add_layer(L);
    } else {
      for (Parameter* p : {&rec_wx, &rec_wh, &rec_b, &rec_sum_w, &rec_sum_b}) ps.push_back(p);
    }
    for (Parameter* p : {&mlm_head_w, &mlm_head_b, &proj_w1, &proj_ln_g, &proj_ln_b, &proj_w2,
                         &proj_bn_g, &proj_bn_b, &cls_w3, &cls_b})
      ps.push_back(p);
    return ps;
  }

  void init(const EncoderConfig& config, std::uint64_t seed) {
    config.validate();
    cfg = config;
    const int k = cfg.k;
    const int ffn = 2 * k;

    auto uni = [seed](Parameter& p, const std::string& name, long rows, long cols) {
      p.name = name;
      p.no_decay = false;
      p.value.resize(rows, cols);
      Rng rng = Rng::derive(seed, "init:" + name);
      const double s = 1.0 / std::sqrt(double(rows));
      for (long i = 0; i < rows; ++i)
        for (long j = 0; j < cols; ++j) p.value(i, j) = rng.uniform(-s, s);
      p.ensure_grad();
    };
    auto fill = [](Parameter& p, const std::string& name, long cols, double v) {
      p.name = name;
      p.no_decay = true;
      p.value = Eigen::MatrixXd::Constant(1, cols, v);
      p.ensure_grad();
    };

    uni(embed, "embed", cfg.vocab_size, k);

    auto init_layer = [&](TransformerLayer& L, const std::string& prefix) {
      uni(L.wq, prefix + ".wq", k, k);
      fill(L.bq, prefix + ".bq", k, 0.0);
      uni(L.wk, prefix + ".wk", k, k);
      fill(L.bk, prefix + ".bk", k, 0.0);
      uni(L.wv, prefix + ".wv", k, k);
      fill(L.bv, prefix + ".bv", k, 0.0);
      uni(L.wo, prefix + ".wo", k, k);
      fill(L.bo, prefix + ".bo", k, 0.0);
      fill(L.ln1_g, prefix + ".ln1_g", k, 1.0);
      fill(L.ln1_b, prefix + ".ln1_b", k, 0.0);
      uni(L.w1, prefix + ".w1", k, ffn);
      fill(L.b1, prefix + ".b1", ffn, 0.0);
      uni(L.w2, prefix + ".w2", ffn, k);
      fill(L.b2, prefix + ".b2", k, 0.0);
      fill(L.ln2_g, prefix + ".ln2_g", k, 1.0);
      fill(L.ln2_b, prefix + ".ln2_b", k, 0.0);
    };

    mlm_layers.clear();
    mlm_layers.resize(std::size_t(cfg.layers_mlm));
    for (std::size_t i = 0; i < mlm_layers.size(); ++i)
      init_layer(mlm_layers[i], "mlm.L" + std::to_string(i));

    feat_layers.clear();
    if (cfg.encoder_kind == EncoderKind::transformer) {
      feat_layers.resize(std::size_t(cfg.layers_feat));
      for (std::size_t i = 0; i < feat_layers.size(); ++i)
        init_layer(feat_layers[i], "feat.L" + std::to_string(i));
    } else {
      const int mult = cfg.encoder_kind == EncoderKind::lstm
                           ? 4
                           : (cfg.encoder_kind == EncoderKind::gru ? 3 : 1);
      uni(rec_wx, "rec.wx", k, mult * k);
      uni(rec_wh, "rec.wh", k, mult * k);
      fill(rec_b, "rec.b", mult * k, 0.0);
      uni(rec_sum_w, "rec.sum_w", k, k);
      fill(rec_sum_b, "rec.sum_b", k, 0.0);
    }

    uni(mlm_head_w, "mlm_head.w", k, cfg.vocab_size);
    fill(mlm_head_b, "mlm_head.b", cfg.vocab_size, 0.0);

    uni(proj_w1, "proj.w1", k, k);
    fill(proj_ln_g, "proj.ln_g", k, 1.0);
    fill(proj_ln_b, "proj.ln_b", k, 0.0);
    uni(proj_w2, "proj.w2", k, k);
    fill(proj_bn_g, "proj.bn_g", k, 1.0);
    fill(proj_bn_b, "proj.bn_b", k, 0.0);
    bn_run_mean = Eigen::RowVectorXd::Zero(k);
    bn_run_var = Eigen::RowVectorXd::Ones(k);
    bn_count = 0;

    uni(cls_w3, "cls.w3", 2 * k, 1);
    fill(cls_b, "cls.b", 1, 0.0);
  }
};

namespace graph {

inline Var transformer_layer(Tape& t, Var x, TransformerLayer& L, int heads, int valid_len) {
  Var q = t.add_rowvec(t.matmul(x, t.leaf(L.wq)), t.leaf(L.bq));
  Var k = t.add_rowvec(t.matmul(x, t.leaf(L.wk)), t.leaf(L.bk));
  Var v = t.add_rowvec(t.matmul(x, t.leaf(L.wv)), t.leaf(L.bv));
  Var attn = t.attention(q, k, v, heads, valid_len);
  Var o = t.add_rowvec(t.matmul(attn, t.leaf(L.wo)), t.leaf(L.bo));
  Var h = t.layernorm(t.add(x, o), t.leaf(L.ln1_g), t.leaf(L.ln1_b));
  Var f = t.add_rowvec(t.matmul(h, t.leaf(L.w1)), t.leaf(L.b1));
  f = t.gelu(f);
  f = t.add_rowvec(t.matmul(f, t.leaf(L.w2)), t.leaf(L.b2));
  return t.layernorm(t.add(h, f), t.leaf(L.ln2_g), t.leaf(L.ln2_b));
}

// MLM augmentation stack: embeddings -> transformer layers -> X' (n x k).
// No positional signal here; order information enters at the feature stack.
inline Var mlm_stack(Tape& t, ModelState& st, const std::vector<int>& ids, int n_valid) {
  Var x = t.embed(st.embed, ids);
  for (auto& L : st.mlm_layers)
    x = transformer_layer(t, x, L, st.cfg.heads, n_valid);
  return x;
}

// Vocabulary logits at the masked positions of X'.
inline Var mlm_logits(Tape& t, ModelState& st, Var xprime, const std::vector<int>& positions) {
  Var rows = t.select_rows(xprime, positions);
  return t.add_rowvec(t.matmul(rows, t.leaf(st.mlm_head_w)), t.leaf(st.mlm_head_b));
}

// CLS = (1/sqrt(n)) * sum of the valid rows of X'.
inline Var compute_cls(Tape& t, Var xprime, int n_valid) {
  Var valid = t.slice_rows(xprime, 0, n_valid);
  return t.scaled_sum_rows(valid, 1.0 / std::sqrt(double(n_valid)));
}

struct FeatureVars {
  Var summary;  // 1 x k: CLS' for the transformer, projected final state otherwise
  Var F;        // token features
  int n_valid = 0;
};

// Feature stack on top of X'. Transformer path: sequence CLS ⊕ (X' + PE),
// summary read from position 0. Recurrent path: unidirectional pass, no PE.
inline FeatureVars encode_features(Tape& t, ModelState& st, Var xprime, int n_valid) {
  FeatureVars out;
  out.n_valid = n_valid;
  if (st.cfg.encoder_kind == EncoderKind::transformer) {
    const long n = t.value(xprime).rows();
    Var cls = compute_cls(t, xprime, n_valid);
    Var pe = t.constant(positional_encoding(int(n), st.cfg.k));
    Var seq = t.vstack({cls, t.add(xprime, pe)});
    for (auto& L : st.feat_layers)
      seq = transformer_layer(t, seq, L, st.cfg.heads, n_valid + 1);
    out.summary = t.slice_rows(seq, 0, 1);
    out.F = t.slice_rows(seq, 1, n);
  } else {
    const int kind = st.cfg.encoder_kind == EncoderKind::rnn
                         ? 0
                         : (st.cfg.encoder_kind == EncoderKind::lstm ? 1 : 2);
    Var valid = t.slice_rows(xprime, 0, n_valid);
    Var H = t.recurrent(valid, t.leaf(st.rec_wx), t.leaf(st.rec_wh), t.leaf(st.rec_b), kind);
    Var last = t.slice_rows(H, n_valid - 1, 1);
    out.summary = t.add_rowvec(t.matmul(last, t.leaf(st.rec_sum_w)), t.leaf(st.rec_sum_b));
    out.F = H;
  }
  return out;
}

// v = BatchNorm(W2 . Norm(W1 . summary)) over a batch of summary rows.
inline Var project(Tape& t, ModelState& st, Var summaries, bool train_mode) {
  Var z = t.matmul(summaries, t.leaf(st.proj_w1));
  switch (st.cfg.proj_norm) {
    case ProjNorm::layernorm:
      z = t.layernorm(z, t.leaf(st.proj_ln_g), t.leaf(st.proj_ln_b));
      break;
    case ProjNorm::l2:
      z = t.l2norm_rows(z);
      break;
    case ProjNorm::none:
      break;
  }
  z = t.matmul(z, t.leaf(st.proj_w2));
  if (!st.cfg.proj_batchnorm) return z;
  if (!train_mode && !st.has_running_stats())
    throw ValidationError("uninitialized running statistics: train before eval-mode projection");
  Var v = t.batchnorm(z, t.leaf(st.proj_bn_g), t.leaf(st.proj_bn_b), &st.bn_run_mean,
                      &st.bn_run_var, train_mode);
  if (train_mode) ++st.bn_count;
  return v;
}

// Classification logit: sigma^-1 side of Eq-style head, W3 . (AvgPool(F) ⊕ v) + b.
inline Var classify_logit(Tape& t, ModelState& st, Var F, int n_valid, Var v) {
  Var pooled = t.mean_rows(F, n_valid);
  Var cat = t.concat_cols(pooled, v);
  return t.add_rowvec(t.matmul(cat, t.leaf(st.cls_w3)), t.leaf(st.cls_b));
}

}  // namespace graph

// Plain-value forward products for scoring and analysis.
struct EncoderOutput {
  Eigen::RowVectorXd cls_prime;
  Eigen::MatrixXd F;
  Eigen::RowVectorXd v;           // empty unless projection was requested
  Eigen::MatrixXd mlm_logits;     // empty unless mask positions were given
  int n_valid = 0;
};

// Mask-free evaluation forward pass over one sequence (optionally padded to
// a longer length; n_valid marks the real token count).
inline EncoderOutput encode_eval(ModelState& st, const std::vector<int>& ids, int n_valid = -1,
                                 bool with_projection = true,
                                 const std::vector<int>& mask_positions = {}) {
  if (ids.empty()) throw ValidationError("encode_eval: empty sequence");
  if (n_valid < 0) n_valid = int(ids.size());
  if (n_valid < 1 || n_valid > int(ids.size()))
    throw ValidationError("encode_eval: bad n_valid");
  Tape t;
  Var xprime = graph::mlm_stack(t, st, ids, n_valid);
  EncoderOutput out;
  out.n_valid = n_valid;
  if (!mask_positions.empty())
    out.mlm_logits = t.value(graph::mlm_logits(t, st, xprime, mask_positions));
  auto feats = graph::encode_features(t, st, xprime, n_valid);
  out.cls_prime = t.value(feats.summary).row(0);
  out.F = t.value(feats.F);
  if (with_projection) out.v = t.value(graph::project(t, st, feats.summary, false)).row(0);
  return out;
}

}  // namespace clear
