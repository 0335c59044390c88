#include "clear/detection.hpp"

#include <cmath>

#include <gtest/gtest.h>

#include "clear/evaluation.hpp"
#include "clear/synthetic.hpp"
#include "clear/training.hpp"
#include "test_util.hpp"

using namespace clear;
using testutil::error_of;

namespace {

Vocabulary tiny_vocab(int n_tokens) {
  std::vector<std::vector<std::string>> corpus(1);
  for (int i = 0; i < n_tokens; ++i) corpus[0].push_back("tok" + std::to_string(i));
  return build_vocabulary(corpus, 1);
}

ModelState small_state(int vocab_size, std::uint64_t seed = 7) {
  EncoderConfig ec;
  ec.k = 8;
  ec.heads = 2;
  ec.layers_mlm = 1;
  ec.layers_feat = 1;
  ec.max_len = 64;
  ec.vocab_size = vocab_size;
  ModelState st;
  st.init(ec, seed);
  return st;
}

// one fine-tuned model on a 20-contract toy corpus, built once
Checkpoint& toy_model() {
  static Checkpoint ckpt = [] {
    auto corpus = generate_synthetic_corpus(20, 0.5, 3);
    ExperimentConfig cfg;
    cfg.enc.k = 8;
    cfg.enc.heads = 2;
    cfg.enc.layers_mlm = 1;
    cfg.enc.layers_feat = 1;
    cfg.enc.max_len = 128;
    cfg.train.batch_size = 8;
    cfg.train.epochs_cl = 2;
    cfg.train.epochs_ft = 2;
    cfg.train.seed = 5;
    return run_variant(corpus, cfg, "full").model;
  }();
  return ckpt;
}

}  // namespace

TEST(ClassifyTest, ZeroWeightsGiveOneHalf) {
  auto vocab = tiny_vocab(9);
  ModelState st = small_state(vocab.size());
  st.cls_w3.value.setZero();
  st.cls_b.value.setZero();
  Rng rng = Rng::derive(1, "classify-zero");
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::MatrixXd F(3, 8);
    Eigen::RowVectorXd v(8);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 8; ++j) F(i, j) = rng.normal();
    for (int j = 0; j < 8; ++j) v(j) = rng.normal();
    EXPECT_DOUBLE_EQ(classify(F, v, st), 0.5);
  }
}

TEST(ClassifyTest, IdenticalRowsReduceToSingleRowFormula) {
  auto vocab = tiny_vocab(9);
  ModelState st = small_state(vocab.size());
  Rng rng = Rng::derive(2, "classify-rows");
  Eigen::RowVectorXd r(8), v(8);
  for (int j = 0; j < 8; ++j) {
    r(j) = rng.normal();
    v(j) = rng.normal();
  }
  Eigen::MatrixXd F = r.replicate(5, 1);
  Eigen::RowVectorXd cat(16);
  cat << r, v;
  const double z = (cat * st.cls_w3.value)(0, 0) + st.cls_b.value(0, 0);
  EXPECT_NEAR(classify(F, v, st), 1.0 / (1.0 + std::exp(-z)), 1e-12);
}

TEST(ClassifyTest, OutputStaysInOpenUnitInterval) {
  auto vocab = tiny_vocab(9);
  ModelState st = small_state(vocab.size());
  Rng rng = Rng::derive(3, "classify-range");
  for (int trial = 0; trial < 1000; ++trial) {
    const long n = 1 + long(rng.below(6));
    Eigen::MatrixXd F(n, 8);
    Eigen::RowVectorXd v(8);
    for (long i = 0; i < n; ++i)
      for (int j = 0; j < 8; ++j) F(i, j) = 5.0 * rng.normal();
    for (int j = 0; j < 8; ++j) v(j) = 5.0 * rng.normal();
    const double p = classify(F, v, st);
    EXPECT_GT(p, 0.0);
    EXPECT_LT(p, 1.0);
  }
}

TEST(ClassifyTest, RejectsEmptyAndMismatchedInputs) {
  auto vocab = tiny_vocab(9);
  ModelState st = small_state(vocab.size());
  Eigen::RowVectorXd v = Eigen::RowVectorXd::Zero(8);
  EXPECT_NE(error_of([&] { classify(Eigen::MatrixXd(0, 8), v, st); }).find("empty"),
            std::string::npos);
  EXPECT_NE(error_of([&] { classify(Eigen::MatrixXd::Zero(2, 4), v, st); }).find("width"),
            std::string::npos);
  EXPECT_NE(
      error_of([&] { classify(Eigen::MatrixXd::Zero(2, 8), v, st, 3); }).find("exceeds"),
      std::string::npos);
}

TEST(ClassifyTest, PadRowsBeyondValidCountAreIgnored) {
  auto vocab = tiny_vocab(9);
  ModelState st = small_state(vocab.size());
  Rng rng = Rng::derive(4, "classify-pad");
  Eigen::MatrixXd F(3, 8);
  Eigen::RowVectorXd v(8);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 8; ++j) F(i, j) = rng.normal();
  for (int j = 0; j < 8; ++j) v(j) = rng.normal();
  Eigen::MatrixXd padded(6, 8);
  padded.topRows(3) = F;
  padded.bottomRows(3).setConstant(123.0);  // garbage that must not leak in
  EXPECT_NEAR(classify(F, v, st), classify(padded, v, st, 3), 1e-6);
}

TEST(PredictTest, ThresholdRuleIsInclusive) {
  EXPECT_EQ(predict(0.7, 0.5), 1);
  EXPECT_EQ(predict(0.5, 0.5), 1);
  EXPECT_EQ(predict(0.49, 0.5), 0);
  EXPECT_EQ(predict(0.05, 0.5), 0);
  EXPECT_EQ(predict(0.05, 0.04), 1);
  EXPECT_NE(error_of([] { predict(0.5, 0.0); }).find("threshold"), std::string::npos);
  EXPECT_NE(error_of([] { predict(0.5, 1.0); }).find("threshold"), std::string::npos);
}

// Whole-pipeline padding invariance: a sequence scored with a PAD tail must
// produce the same probability as the bare sequence.
TEST(DetectionPipelineTest, PaddedForwardMatchesUnpaddedForward) {
  Checkpoint& model = toy_model();
  auto corpus = generate_synthetic_corpus(20, 0.5, 3);
  const auto enc = encode_corpus(corpus, model.vocab, model.state.cfg.max_len);
  for (std::size_t i = 0; i < 5; ++i) {
    const std::vector<int>& ids = enc[i].token_ids;
    std::vector<int> padded = ids;
    padded.resize(ids.size() + 17, kPadId);
    const auto bare = encode_eval(model.state, ids);
    const auto with_pad = encode_eval(model.state, padded, int(ids.size()));
    const double p_bare = classify(bare.F, bare.v, model.state, bare.n_valid);
    const double p_pad = classify(with_pad.F, with_pad.v, model.state, with_pad.n_valid);
    EXPECT_NEAR(p_bare, p_pad, 1e-6);
    EXPECT_LT((bare.F - with_pad.F.topRows(long(ids.size()))).norm(), 1e-6);
    EXPECT_LT((bare.v - with_pad.v).norm(), 1e-6);
  }
}

TEST(DetectTest, RequiresFineTunedModel) {
  auto vocab = tiny_vocab(9);
  Checkpoint raw;
  raw.state = small_state(vocab.size());
  raw.vocab = vocab;
  raw.stage = "cl";
  const std::string err = error_of([&] { detect("contract A {}", raw, "a"); });
  EXPECT_NE(err.find("stage mismatch"), std::string::npos);
}

TEST(DetectTest, DeterministicAndConsistentWithPredict) {
  Checkpoint& model = toy_model();
  const std::string source = render_synthetic_contract(3, 0, true);
  const Prediction a = detect(source, model, "sample");
  const Prediction b = detect(source, model, "sample");
  EXPECT_EQ(a.probability, b.probability);
  EXPECT_EQ(a.verdict, b.verdict);
  EXPECT_EQ(a.verdict, predict(a.probability, a.threshold));
  EXPECT_EQ(a.task, "ORDER");
  EXPECT_GT(a.probability, 0.0);
  EXPECT_LT(a.probability, 1.0);
}

TEST(DetectTest, EmptySourceTakesUnknownTokenPath) {
  Checkpoint& model = toy_model();
  const Prediction p = detect("", model, "empty");
  EXPECT_GT(p.probability, 0.0);
  EXPECT_LT(p.probability, 1.0);
  EXPECT_EQ(p.verdict, predict(p.probability, p.threshold));
}
