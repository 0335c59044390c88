#include "clear/training.hpp"

#include <fstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "clear/detection.hpp"
#include "clear/synthetic.hpp"
#include "test_util.hpp"

using namespace clear;
using testutil::TempDir;
using testutil::error_of;
using testutil::read_file;

namespace {

struct TinyRig {
  std::vector<LabeledExample> corpus;
  Vocabulary vocab;
  std::vector<EncodedContract> enc;
  std::vector<int> labels;
  EncoderConfig ecfg;
  TrainConfig tcfg;
  LossConfig lcfg;
  SamplingPlan plan;

  explicit TinyRig(std::uint64_t seed = 5) {
    corpus = generate_synthetic_corpus(20, 0.5, 3);
    std::vector<std::vector<std::string>> tokens;
    for (const auto& ex : corpus) tokens.push_back(tokenize(ex.source));
    vocab = Vocabulary::build(tokens, 1, corpus_hash(corpus));
    ecfg.k = 8;
    ecfg.heads = 2;
    ecfg.layers_mlm = 1;
    ecfg.layers_feat = 1;
    ecfg.max_len = 128;
    ecfg.vocab_size = vocab.size();
    enc = encode_corpus(corpus, vocab, ecfg.max_len);
    labels = task_labels(corpus, "ORDER");
    tcfg.learning_rate = 3e-4;
    tcfg.batch_size = 8;
    tcfg.epochs_cl = 2;
    tcfg.epochs_ft = 1;
    tcfg.weight_decay = 0.0;
    tcfg.seed = seed;
    plan.seed = seed;
  }

  ModelState fresh_state() const {
    ModelState st;
    st.init(ecfg, tcfg.seed);
    return st;
  }
};

std::vector<Eigen::MatrixXd> snapshot(ModelState& st) {
  std::vector<Eigen::MatrixXd> vals;
  for (auto* p : st.parameters()) vals.push_back(p->value);
  return vals;
}

nlohmann::json without_wall_time(const std::string& line) {
  nlohmann::json j = nlohmann::json::parse(line);
  j.erase("wall_ms");
  return j;
}

}  // namespace

TEST(PretrainTest, ToyRunLogsOneEntryPerEpochAndWritesCheckpoints) {
  TinyRig rig;
  TempDir tmp;
  TrainOutputs outs;
  outs.out_dir = tmp.path();
  ModelState st = rig.fresh_state();
  StageResult r =
      pretrain_cl(st, rig.enc, rig.labels, rig.vocab, rig.tcfg, rig.lcfg, rig.plan, outs);
  ASSERT_EQ(r.log_lines.size(), 2u);
  ASSERT_EQ(r.epoch_losses.size(), 2u);
  for (const auto& line : r.log_lines) {
    nlohmann::json j = nlohmann::json::parse(line);
    EXPECT_EQ(j["stage"], "cl");
    EXPECT_TRUE(j.contains("epoch"));
    EXPECT_TRUE(j.contains("loss_mlm"));
    EXPECT_TRUE(j.contains("loss_cl"));
    EXPECT_TRUE(j.contains("loss_total"));
    EXPECT_TRUE(j.contains("wall_ms"));
    EXPECT_TRUE(j.contains("seed"));
  }
  EXPECT_TRUE(std::filesystem::exists(tmp.path() / "final" / "manifest.txt"));
  EXPECT_TRUE(std::filesystem::exists(tmp.path() / "best" / "params.bin"));
  EXPECT_TRUE(std::filesystem::exists(tmp.path() / "log.jsonl"));
  EXPECT_EQ(r.final.stage, "cl");
  EXPECT_EQ(r.final.epoch, 2);
  EXPECT_TRUE(st.has_running_stats());
}

TEST(PretrainTest, ZeroLearningRateLeavesParametersBitwiseUnchanged) {
  TinyRig rig;
  rig.tcfg.learning_rate = 0.0;
  rig.tcfg.epochs_cl = 1;
  ModelState st = rig.fresh_state();
  const auto before = snapshot(st);
  pretrain_cl(st, rig.enc, rig.labels, rig.vocab, rig.tcfg, rig.lcfg, rig.plan);
  const auto after = snapshot(st);
  ASSERT_EQ(before.size(), after.size());
  for (std::size_t i = 0; i < before.size(); ++i) {
    ASSERT_EQ(before[i].rows(), after[i].rows());
    for (long r = 0; r < before[i].rows(); ++r)
      for (long c = 0; c < before[i].cols(); ++c)
        EXPECT_EQ(before[i](r, c), after[i](r, c)) << "group " << i;
  }
}

TEST(PretrainTest, IdenticalSeedsReproduceLossTrajectoriesExactly) {
  TinyRig rig;
  ModelState a = rig.fresh_state();
  ModelState b = rig.fresh_state();
  StageResult ra = pretrain_cl(a, rig.enc, rig.labels, rig.vocab, rig.tcfg, rig.lcfg, rig.plan);
  StageResult rb = pretrain_cl(b, rig.enc, rig.labels, rig.vocab, rig.tcfg, rig.lcfg, rig.plan);
  ASSERT_EQ(ra.log_lines.size(), rb.log_lines.size());
  for (std::size_t i = 0; i < ra.log_lines.size(); ++i)
    EXPECT_EQ(without_wall_time(ra.log_lines[i]), without_wall_time(rb.log_lines[i]));
  auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    EXPECT_EQ((pa[i]->value - pb[i]->value).norm(), 0.0) << pa[i]->name;
}

TEST(PretrainTest, DifferentSeedsDiverge) {
  TinyRig rig;
  TinyRig other(6);
  other.tcfg.epochs_cl = rig.tcfg.epochs_cl;
  ModelState a = rig.fresh_state();
  ModelState b = other.fresh_state();
  StageResult ra = pretrain_cl(a, rig.enc, rig.labels, rig.vocab, rig.tcfg, rig.lcfg, rig.plan);
  StageResult rb =
      pretrain_cl(b, other.enc, other.labels, other.vocab, other.tcfg, other.lcfg, other.plan);
  EXPECT_NE(without_wall_time(ra.log_lines[0])["loss_total"],
            without_wall_time(rb.log_lines[0])["loss_total"]);
}

TEST(PretrainTest, NonFiniteLossAbortsNamingTheBatch) {
  TinyRig rig;
  ModelState st = rig.fresh_state();
  st.embed.value.setConstant(std::numeric_limits<double>::quiet_NaN());
  const std::string err = error_of([&] {
    pretrain_cl(st, rig.enc, rig.labels, rig.vocab, rig.tcfg, rig.lcfg, rig.plan);
  });
  EXPECT_NE(err.find("divergence"), std::string::npos) << err;
  EXPECT_NE(err.find("epoch 1"), std::string::npos) << err;
  EXPECT_NE(err.find("batch 0"), std::string::npos) << err;
}

TEST(PretrainTest, RequiresVulnerableContractsForTheTask) {
  TinyRig rig;
  std::vector<int> all_safe(rig.labels.size(), 0);
  ModelState st = rig.fresh_state();
  const std::string err = error_of([&] {
    pretrain_cl(st, rig.enc, all_safe, rig.vocab, rig.tcfg, rig.lcfg, rig.plan);
  });
  EXPECT_NE(err.find("empty POS set"), std::string::npos);
}

TEST(FinetuneTest, OneEpochLogsAndMovesClassifierWeights) {
  TinyRig rig;
  ModelState st = rig.fresh_state();
  StageResult cl =
      pretrain_cl(st, rig.enc, rig.labels, rig.vocab, rig.tcfg, rig.lcfg, rig.plan);
  const Eigen::MatrixXd w3_before = cl.final.state.cls_w3.value;
  StageResult ft = finetune(cl.final, rig.enc, rig.labels, rig.tcfg);
  ASSERT_EQ(ft.log_lines.size(), 1u);
  nlohmann::json j = nlohmann::json::parse(ft.log_lines[0]);
  EXPECT_EQ(j["stage"], "ft");
  EXPECT_GT(j["loss_cla"].get<double>(), 0.0);
  EXPECT_EQ(ft.final.stage, "ft");
  EXPECT_GT((ft.final.state.cls_w3.value - w3_before).norm(), 0.0);
}

TEST(FinetuneTest, RejectsNonPretrainingCheckpoint) {
  TinyRig rig;
  ModelState st = rig.fresh_state();
  StageResult cl =
      pretrain_cl(st, rig.enc, rig.labels, rig.vocab, rig.tcfg, rig.lcfg, rig.plan);
  StageResult ft = finetune(cl.final, rig.enc, rig.labels, rig.tcfg);
  const std::string err =
      error_of([&] { finetune(ft.final, rig.enc, rig.labels, rig.tcfg); });
  EXPECT_NE(err.find("stage mismatch"), std::string::npos);
}

TEST(FinetuneTest, GradientsReachTheEncoderInTheFirstStep) {
  TinyRig rig;
  ModelState st = rig.fresh_state();
  std::vector<std::size_t> batch{0, 1, 2, 3};
  auto params = st.parameters();
  zero_grads(params);
  Tape t;
  Var loss = graph::stage2_batch_loss(t, st, rig.enc, batch, rig.labels, nullptr);
  t.backward(loss);
  EXPECT_GT(st.mlm_layers[0].wq.grad.norm(), 0.0);
  EXPECT_GT(st.embed.grad.norm(), 0.0);
  EXPECT_GT(st.proj_w1.grad.norm(), 0.0);
  EXPECT_GT(st.cls_w3.grad.norm(), 0.0);
}

TEST(FinetuneTest, ClassifierOnlyTrainingStillReducesLoss) {
  TinyRig rig;
  ModelState st = rig.fresh_state();
  std::vector<std::size_t> batch;
  for (std::size_t i = 0; i < rig.enc.size(); ++i) batch.push_back(i);
  auto all_params = st.parameters();
  std::vector<Parameter*> head{&st.cls_w3, &st.cls_b};
  OptimizerConfig ocfg;
  ocfg.learning_rate = 0.05;
  AdamW opt(ocfg);
  double first = 0.0, last = 0.0;
  for (int step = 0; step < 25; ++step) {
    Tape t;
    LossReport r;
    Var loss = graph::stage2_batch_loss(t, st, rig.enc, batch, rig.labels, &r);
    if (step == 0) first = r.loss_cla;
    last = r.loss_cla;
    zero_grads(all_params);
    t.backward(loss);
    opt.step(head);
  }
  EXPECT_LT(last, first);
}

TEST(OptimizerTest, ZeroGradientStepLeavesFreshParametersUnchanged) {
  Parameter p;
  p.name = "w";
  p.value = Eigen::MatrixXd::Random(3, 3);
  p.ensure_grad();
  const Eigen::MatrixXd before = p.value;
  OptimizerConfig ocfg;
  ocfg.learning_rate = 0.1;
  AdamW opt(ocfg);
  std::vector<Parameter*> ps{&p};
  zero_grads(ps);
  opt.step(ps);
  EXPECT_EQ((p.value - before).norm(), 0.0);
}

TEST(OptimizerTest, DecoupledDecayShrinksWeightsIndependentlyOfGradient) {
  Parameter p;
  p.name = "w";
  p.value = Eigen::MatrixXd::Constant(2, 2, 4.0);
  p.ensure_grad();
  OptimizerConfig ocfg;
  ocfg.learning_rate = 0.5;
  ocfg.weight_decay = 0.1;
  AdamW opt(ocfg);
  std::vector<Parameter*> ps{&p};
  zero_grads(ps);
  opt.step(ps);
  // zero gradient: the only movement is the decay term lr*wd*value
  EXPECT_NEAR(p.value(0, 0), 4.0 - 0.5 * 0.1 * 4.0, 1e-12);
  Parameter q = p;
  q.no_decay = true;
  std::vector<Parameter*> qs{&q};
  const Eigen::MatrixXd before = q.value;
  zero_grads(qs);
  opt.step(qs);
  EXPECT_EQ((q.value - before).norm(), 0.0);
}

// --- checkpoint persistence -------------------------------------------------

TEST(CheckpointTest, SaveLoadSaveIsByteIdentical) {
  TinyRig rig;
  ModelState st = rig.fresh_state();
  StageResult cl =
      pretrain_cl(st, rig.enc, rig.labels, rig.vocab, rig.tcfg, rig.lcfg, rig.plan);
  TempDir tmp;
  const auto dir_a = tmp.path() / "a";
  const auto dir_b = tmp.path() / "b";
  save_checkpoint(cl.final, dir_a);
  Checkpoint loaded = load_checkpoint(dir_a);
  save_checkpoint(loaded, dir_b);
  for (const char* f : {"manifest.txt", "params.bin", "vocab.txt", "log_tail.jsonl"}) {
    EXPECT_EQ(read_file(dir_a / f), read_file(dir_b / f)) << f;
    EXPECT_FALSE(read_file(dir_a / f).empty()) << f;
  }
}

TEST(CheckpointTest, RoundTripPreservesParametersBitwiseAndPredictions) {
  TinyRig rig;
  ModelState st = rig.fresh_state();
  StageResult cl =
      pretrain_cl(st, rig.enc, rig.labels, rig.vocab, rig.tcfg, rig.lcfg, rig.plan);
  StageResult ft = finetune(cl.final, rig.enc, rig.labels, rig.tcfg);
  TempDir tmp;
  save_checkpoint(ft.final, tmp.path() / "ckpt");
  Checkpoint loaded = load_checkpoint(tmp.path() / "ckpt");

  auto pa = ft.final.state.parameters();
  auto pb = loaded.state.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i]->name, pb[i]->name);
    for (long r = 0; r < pa[i]->value.rows(); ++r)
      for (long c = 0; c < pa[i]->value.cols(); ++c)
        EXPECT_EQ(pa[i]->value(r, c), pb[i]->value(r, c)) << pa[i]->name;
  }
  EXPECT_EQ((ft.final.state.bn_run_mean - loaded.state.bn_run_mean).norm(), 0.0);
  EXPECT_EQ((ft.final.state.bn_run_var - loaded.state.bn_run_var).norm(), 0.0);
  EXPECT_EQ(ft.final.state.bn_count, loaded.state.bn_count);
  EXPECT_EQ(ft.final.epoch, loaded.epoch);
  EXPECT_EQ(ft.final.log_tail, loaded.log_tail);

  for (const auto& ec : rig.enc) {
    const auto out_a = encode_eval(ft.final.state, ec.token_ids);
    const auto out_b = encode_eval(loaded.state, ec.token_ids);
    const double p_a = classify(out_a.F, out_a.v, ft.final.state, out_a.n_valid);
    const double p_b = classify(out_b.F, out_b.v, loaded.state, out_b.n_valid);
    EXPECT_NEAR(p_a, p_b, 1e-7);
  }
}

TEST(CheckpointTest, VocabularyHashMismatchIsRejected) {
  TinyRig rig;
  ModelState st = rig.fresh_state();
  StageResult cl =
      pretrain_cl(st, rig.enc, rig.labels, rig.vocab, rig.tcfg, rig.lcfg, rig.plan);
  TempDir tmp;
  const auto dir = tmp.path() / "ckpt";
  save_checkpoint(cl.final, dir);
  // swap one vocabulary entry; the stored hash no longer matches
  std::string vt = read_file(dir / "vocab.txt");
  const auto pos = vt.rfind('\n', vt.size() - 2);
  vt = vt.substr(0, pos + 1) + "tampered_token\n";
  std::ofstream(dir / "vocab.txt", std::ios::binary) << vt;
  const std::string err = error_of([&] { load_checkpoint(dir); });
  EXPECT_NE(err.find("hash mismatch"), std::string::npos) << err;
}

TEST(CheckpointTest, CorruptionAndVersionErrors) {
  TinyRig rig;
  ModelState st = rig.fresh_state();
  StageResult cl =
      pretrain_cl(st, rig.enc, rig.labels, rig.vocab, rig.tcfg, rig.lcfg, rig.plan);
  TempDir tmp;
  const auto dir = tmp.path() / "ckpt";
  save_checkpoint(cl.final, dir);

  {
    std::string pb = read_file(dir / "params.bin");
    pb[0] = 'X';
    std::ofstream(dir / "params.bin", std::ios::binary) << pb;
    EXPECT_NE(error_of([&] { load_checkpoint(dir); }).find("magic"), std::string::npos);
  }
  save_checkpoint(cl.final, dir);
  {
    std::string mf = read_file(dir / "manifest.txt");
    mf.replace(mf.find("clear-checkpoint v1"), 19, "clear-checkpoint v9");
    std::ofstream(dir / "manifest.txt", std::ios::binary) << mf;
    EXPECT_NE(error_of([&] { load_checkpoint(dir); }).find("unsupported format"),
              std::string::npos);
  }
  save_checkpoint(cl.final, dir);
  {
    // drop the epoch line entirely
    std::string mf = read_file(dir / "manifest.txt");
    const auto at = mf.find("epoch=");
    mf.erase(at, mf.find('\n', at) - at + 1);
    std::ofstream(dir / "manifest.txt", std::ios::binary) << mf;
    EXPECT_NE(error_of([&] { load_checkpoint(dir); }).find("missing key"), std::string::npos);
  }
  EXPECT_FALSE(error_of([&] { load_checkpoint(tmp.path() / "nowhere"); }).empty());
}
