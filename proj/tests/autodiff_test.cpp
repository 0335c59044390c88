#include <cmath>
#include <functional>
#include <vector>

#include <gtest/gtest.h>

#include "clear/autodiff.hpp"

using namespace clear;

namespace {

Eigen::MatrixXd rand_mat(long r, long c, Rng& rng, double s = 0.8) {
  Eigen::MatrixXd m(r, c);
  for (long i = 0; i < r; ++i)
    for (long j = 0; j < c; ++j) m(i, j) = rng.uniform(-s, s);
  return m;
}

Parameter make_param(const std::string& name, long r, long c, Rng& rng, double s = 0.8) {
  Parameter p;
  p.name = name;
  p.value = rand_mat(r, c, rng, s);
  p.ensure_grad();
  return p;
}

// Central finite differences against the tape's analytic gradients.
void check_grads(std::vector<Parameter*> params, const std::function<Var(Tape&)>& build,
                 double tol = 2e-6, double h = 1e-5) {
  zero_grads(params);
  {
    Tape t;
    Var loss = build(t);
    t.backward(loss);
  }
  std::vector<Eigen::MatrixXd> analytic;
  analytic.reserve(params.size());
  for (auto* p : params) analytic.push_back(p->grad);

  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& P = params[pi]->value;
    for (long i = 0; i < P.rows(); ++i) {
      for (long j = 0; j < P.cols(); ++j) {
        const double save = P(i, j);
        P(i, j) = save + h;
        double fp;
        {
          Tape t;
          fp = t.scalar(build(t));
        }
        P(i, j) = save - h;
        double fm;
        {
          Tape t;
          fm = t.scalar(build(t));
        }
        P(i, j) = save;
        const double numeric = (fp - fm) / (2.0 * h);
        const double a = analytic[pi](i, j);
        const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
        ASSERT_NEAR(a, numeric, tol * denom)
            << params[pi]->name << "(" << i << "," << j << ")";
      }
    }
  }
}

}  // namespace

TEST(TapeValues, MatmulAddBias) {
  Tape t;
  Eigen::MatrixXd a(2, 2), b(2, 2);
  a << 1, 2, 3, 4;
  b << 5, 6, 7, 8;
  Var va = t.constant(a);
  Var vb = t.constant(b);
  Eigen::MatrixXd c = t.value(t.matmul(va, vb));
  EXPECT_DOUBLE_EQ(c(0, 0), 19);
  EXPECT_DOUBLE_EQ(c(0, 1), 22);
  EXPECT_DOUBLE_EQ(c(1, 0), 43);
  EXPECT_DOUBLE_EQ(c(1, 1), 50);

  Eigen::MatrixXd bias(1, 2);
  bias << 10, 20;
  Eigen::MatrixXd d = t.value(t.add_rowvec(va, t.constant(bias)));
  EXPECT_DOUBLE_EQ(d(0, 0), 11);
  EXPECT_DOUBLE_EQ(d(1, 1), 24);
}

TEST(TapeValues, GeluKnownPoints) {
  Tape t;
  Eigen::MatrixXd x(1, 3);
  x << 0.0, 1.0, -1.0;
  Eigen::MatrixXd y = t.value(t.gelu(t.constant(x)));
  EXPECT_NEAR(y(0, 0), 0.0, 1e-12);
  EXPECT_NEAR(y(0, 1), 0.8413447460685429, 1e-12);   // x * Phi(x) at 1
  EXPECT_NEAR(y(0, 2), -0.15865525393145707, 1e-12);  // at -1
}

TEST(TapeValues, LayerNormNormalizesRows) {
  Tape t;
  Eigen::MatrixXd x(2, 4);
  x << 1, 2, 3, 4, -5, 0, 5, 10;
  Eigen::MatrixXd ones = Eigen::MatrixXd::Ones(1, 4);
  Eigen::MatrixXd zeros = Eigen::MatrixXd::Zero(1, 4);
  Eigen::MatrixXd y = t.value(t.layernorm(t.constant(x), t.constant(ones), t.constant(zeros)));
  for (long r = 0; r < 2; ++r) {
    EXPECT_NEAR(y.row(r).mean(), 0.0, 1e-12);
    EXPECT_NEAR(y.row(r).array().square().mean(), 1.0, 1e-4);  // eps shrinks it slightly
  }
}

TEST(TapeValues, BatchNormTrainAndEvalModes) {
  Rng rng = Rng::derive(5, "bn");
  Eigen::MatrixXd x = rand_mat(16, 3, rng);
  Eigen::RowVectorXd rm = Eigen::RowVectorXd::Zero(3);
  Eigen::RowVectorXd rv = Eigen::RowVectorXd::Ones(3);
  Tape t;
  Eigen::MatrixXd ones = Eigen::MatrixXd::Ones(1, 3);
  Eigen::MatrixXd zeros = Eigen::MatrixXd::Zero(1, 3);
  Eigen::MatrixXd y = t.value(
      t.batchnorm(t.constant(x), t.constant(ones), t.constant(zeros), &rm, &rv, true));
  for (long c = 0; c < 3; ++c) {
    EXPECT_NEAR(y.col(c).mean(), 0.0, 1e-12);
    EXPECT_NEAR(y.col(c).array().square().mean(), 1.0, 1e-3);
  }
  // running stats moved toward the batch statistics
  EXPECT_NEAR(rm(0), 0.1 * x.col(0).mean(), 1e-12);

  // eval mode: per-row output independent of batch companions
  Eigen::MatrixXd single = x.topRows(1);
  Tape t2;
  Eigen::MatrixXd ya = t2.value(
      t2.batchnorm(t2.constant(x), t2.constant(ones), t2.constant(zeros), &rm, &rv, false));
  Eigen::MatrixXd yb = t2.value(
      t2.batchnorm(t2.constant(single), t2.constant(ones), t2.constant(zeros), &rm, &rv, false));
  EXPECT_NEAR((ya.row(0) - yb.row(0)).norm(), 0.0, 1e-12);
}

TEST(TapeValues, AttentionMatchesSingleHeadOracle) {
  Rng rng = Rng::derive(7, "attn");
  const long m = 5, k = 4;
  Eigen::MatrixXd Q = rand_mat(m, k, rng), K = rand_mat(m, k, rng), V = rand_mat(m, k, rng);

  Tape t;
  Eigen::MatrixXd got =
      t.value(t.attention(t.constant(Q), t.constant(K), t.constant(V), 1, int(m)));

  // independent scalar-loop oracle
  const double scale = 1.0 / std::sqrt(double(k));
  Eigen::MatrixXd want(m, k);
  for (long i = 0; i < m; ++i) {
    std::vector<double> s(static_cast<size_t>(m));
    double mx = -1e300;
    for (long j = 0; j < m; ++j) {
      double dot = 0;
      for (long c = 0; c < k; ++c) dot += Q(i, c) * K(j, c);
      s[size_t(j)] = dot * scale;
      mx = std::max(mx, s[size_t(j)]);
    }
    double z = 0;
    for (long j = 0; j < m; ++j) z += std::exp(s[size_t(j)] - mx);
    for (long c = 0; c < k; ++c) {
      double acc = 0;
      for (long j = 0; j < m; ++j) acc += std::exp(s[size_t(j)] - mx) / z * V(j, c);
      want(i, c) = acc;
    }
  }
  EXPECT_NEAR((got - want).norm(), 0.0, 1e-10);
}

TEST(TapeValues, AttentionMaskIgnoresPaddingColumns) {
  Rng rng = Rng::derive(9, "mask");
  const long m = 4, k = 6;
  Eigen::MatrixXd Q = rand_mat(m, k, rng), K = rand_mat(m, k, rng), V = rand_mat(m, k, rng);
  Eigen::MatrixXd Qp(m + 3, k), Kp(m + 3, k), Vp(m + 3, k);
  Qp << Q, rand_mat(3, k, rng);
  Kp << K, rand_mat(3, k, rng);
  Vp << V, rand_mat(3, k, rng);

  Tape t;
  Eigen::MatrixXd small =
      t.value(t.attention(t.constant(Q), t.constant(K), t.constant(V), 2, int(m)));
  Eigen::MatrixXd padded =
      t.value(t.attention(t.constant(Qp), t.constant(Kp), t.constant(Vp), 2, int(m)));
  EXPECT_NEAR((padded.topRows(m) - small).norm(), 0.0, 1e-12);
}

TEST(TapeValues, CrossEntropyUniformLogitsIsLogV) {
  Tape t;
  const int V = 23;
  Eigen::MatrixXd logits = Eigen::MatrixXd::Constant(4, V, 0.37);
  Var loss = t.cross_entropy_rows(t.constant(logits), {0, 5, 11, 22});
  EXPECT_NEAR(t.scalar(loss), std::log(double(V)), 1e-12);
}

TEST(TapeValues, BceKnownPoints) {
  Tape t;
  Var l0 = t.bce_with_logits(t.constant(Eigen::MatrixXd::Zero(1, 1)), 1.0);
  EXPECT_NEAR(t.scalar(l0), std::log(2.0), 1e-12);
  Var l1 = t.bce_with_logits(t.constant(Eigen::MatrixXd::Constant(1, 1, 40.0)), 1.0);
  EXPECT_NEAR(t.scalar(l1), 0.0, 1e-12);
}

TEST(TapeValues, ContrastiveHandValues) {
  Tape t;
  Eigen::MatrixXd u = Eigen::MatrixXd::Zero(1, 2);
  Eigen::MatrixXd v(1, 2);
  v << 3, 4;  // d = 5
  EXPECT_NEAR(t.scalar(t.contrastive(t.constant(u), t.constant(v), 0, 6.0)), 1.0, 1e-12);
  EXPECT_NEAR(t.scalar(t.contrastive(t.constant(u), t.constant(v), 0, 5.0)), 0.0, 1e-12);
  EXPECT_NEAR(t.scalar(t.contrastive(t.constant(u), t.constant(v), 1, 6.0)), 25.0, 1e-12);
  EXPECT_NEAR(t.scalar(t.contrastive(t.constant(u), t.constant(u), 1, 6.0)), 0.0, 1e-12);
  // symmetry
  EXPECT_NEAR(t.scalar(t.contrastive(t.constant(v), t.constant(u), 0, 6.0)), 1.0, 1e-12);
}

TEST(TapeValues, RecurrentSingleStepFormulas) {
  Rng rng = Rng::derive(3, "rec1");
  const long k = 3, h = 2;
  Eigen::MatrixXd x = rand_mat(1, k, rng);

  {  // plain tanh cell
    Eigen::MatrixXd wx = rand_mat(k, h, rng), wh = rand_mat(h, h, rng), b = rand_mat(1, h, rng);
    Tape t;
    Eigen::MatrixXd H = t.value(
        t.recurrent(t.constant(x), t.constant(wx), t.constant(wh), t.constant(b), 0));
    Eigen::MatrixXd want = (x * wx + b).array().tanh();
    EXPECT_NEAR((H - want).norm(), 0.0, 1e-12);
  }
  {  // lstm, zero initial state
    Eigen::MatrixXd wx = rand_mat(k, 4 * h, rng), wh = rand_mat(h, 4 * h, rng),
                    b = rand_mat(1, 4 * h, rng);
    Tape t;
    Eigen::MatrixXd H = t.value(
        t.recurrent(t.constant(x), t.constant(wx), t.constant(wh), t.constant(b), 1));
    Eigen::RowVectorXd a = x * wx + b;
    auto sig = [](double q) { return 1.0 / (1.0 + std::exp(-q)); };
    Eigen::RowVectorXd i = a.head(h).unaryExpr(sig);
    Eigen::RowVectorXd g = a.segment(2 * h, h).array().tanh();
    Eigen::RowVectorXd o = a.tail(h).unaryExpr(sig);
    Eigen::RowVectorXd c = i.cwiseProduct(g);
    Eigen::RowVectorXd want = o.cwiseProduct(c.array().tanh().matrix());
    EXPECT_NEAR((H.row(0) - want).norm(), 0.0, 1e-12);
  }
  {  // gru, zero initial state: h' = (1-z) .* tanh(ax_n)
    Eigen::MatrixXd wx = rand_mat(k, 3 * h, rng), wh = rand_mat(h, 3 * h, rng),
                    b = rand_mat(1, 3 * h, rng);
    Tape t;
    Eigen::MatrixXd H = t.value(
        t.recurrent(t.constant(x), t.constant(wx), t.constant(wh), t.constant(b), 2));
    Eigen::RowVectorXd a = x * wx + b;
    auto sig = [](double q) { return 1.0 / (1.0 + std::exp(-q)); };
    Eigen::RowVectorXd z = a.segment(h, h).unaryExpr(sig);
    Eigen::RowVectorXd n = a.tail(h).array().tanh();
    Eigen::RowVectorXd want =
        (Eigen::RowVectorXd::Ones(h) - z).cwiseProduct(n);
    EXPECT_NEAR((H.row(0) - want).norm(), 0.0, 1e-12);
  }
}

TEST(TapeValues, RecurrentOrderSensitivity) {
  Rng rng = Rng::derive(4, "rec-order");
  const long n = 5, k = 3, h = 3;
  Eigen::MatrixXd x = rand_mat(n, k, rng);
  Eigen::MatrixXd xr = x.colwise().reverse();
  for (int kind : {0, 1, 2}) {
    const long mult = kind == 1 ? 4 : (kind == 2 ? 3 : 1);
    Eigen::MatrixXd wx = rand_mat(k, mult * h, rng), wh = rand_mat(h, mult * h, rng),
                    b = rand_mat(1, mult * h, rng);
    Tape t;
    Eigen::MatrixXd fwd = t.value(
        t.recurrent(t.constant(x), t.constant(wx), t.constant(wh), t.constant(b), kind));
    Eigen::MatrixXd rev = t.value(
        t.recurrent(t.constant(xr), t.constant(wx), t.constant(wh), t.constant(b), kind));
    EXPECT_GT((fwd.row(n - 1) - rev.row(n - 1)).norm(), 1e-6) << "kind " << kind;
  }
}

// ---- gradient checks ----

TEST(TapeGrads, DenseChain) {
  Rng rng = Rng::derive(21, "g1");
  auto A = make_param("A", 3, 4, rng);
  auto B = make_param("B", 4, 5, rng);
  auto bias = make_param("bias", 1, 5, rng);
  auto C = make_param("C", 5, 2, rng);
  auto D = make_param("D", 4, 1, rng);
  std::vector<Parameter*> ps = {&A, &B, &bias, &C, &D};
  check_grads(ps, [&](Tape& t) {
    Var x = t.matmul(t.leaf(A), t.leaf(B));       // 3x5
    x = t.add_rowvec(x, t.leaf(bias));
    x = t.gelu(x);
    x = t.matmul(x, t.leaf(C));                   // 3x2
    Var top = t.slice_rows(x, 0, 2);
    Var bot = t.slice_rows(x, 1, 2);
    Var st = t.vstack({top, bot});                // 4x2
    Var sel = t.select_rows(st, {0, 3, 1});       // 3x2
    Var pooled = t.mean_rows(sel, 2);             // 1x2
    Var summed = t.scaled_sum_rows(sel, 0.5);     // 1x2
    Var cat = t.concat_cols(pooled, summed);      // 1x4
    Var logit = t.matmul(cat, t.leaf(D));         // 1x1
    return t.bce_with_logits(logit, 1.0);
  });
}

TEST(TapeGrads, LayerNorm) {
  Rng rng = Rng::derive(22, "g2");
  auto X = make_param("X", 4, 6, rng);
  auto G = make_param("G", 1, 6, rng);
  auto Bb = make_param("B", 1, 6, rng);
  auto W = make_param("W", 6, 1, rng);
  std::vector<Parameter*> ps = {&X, &G, &Bb, &W};
  check_grads(ps, [&](Tape& t) {
    Var y = t.layernorm(t.leaf(X), t.leaf(G), t.leaf(Bb));
    Var pooled = t.mean_rows(y, 4);
    return t.bce_with_logits(t.matmul(pooled, t.leaf(W)), 0.0);
  });
}

TEST(TapeGrads, BatchNormTrain) {
  Rng rng = Rng::derive(23, "g3");
  auto X = make_param("X", 6, 4, rng);
  auto G = make_param("G", 1, 4, rng);
  auto Bb = make_param("B", 1, 4, rng);
  auto W = make_param("W", 4, 1, rng);
  std::vector<Parameter*> ps = {&X, &G, &Bb, &W};
  Eigen::RowVectorXd rm = Eigen::RowVectorXd::Zero(4);
  Eigen::RowVectorXd rv = Eigen::RowVectorXd::Ones(4);
  check_grads(ps, [&](Tape& t) {
    Var y = t.batchnorm(t.leaf(X), t.leaf(G), t.leaf(Bb), &rm, &rv, true);
    Var pooled = t.mean_rows(y, 6);
    return t.bce_with_logits(t.matmul(pooled, t.leaf(W)), 1.0);
  });
}

TEST(TapeGrads, BatchNormEval) {
  Rng rng = Rng::derive(24, "g4");
  auto X = make_param("X", 3, 4, rng);
  auto G = make_param("G", 1, 4, rng);
  auto Bb = make_param("B", 1, 4, rng);
  auto W = make_param("W", 4, 1, rng);
  std::vector<Parameter*> ps = {&X, &G, &Bb, &W};
  Eigen::RowVectorXd rm(4), rv(4);
  rm << 0.1, -0.2, 0.05, 0.3;
  rv << 1.1, 0.9, 1.3, 0.7;
  check_grads(ps, [&](Tape& t) {
    Var y = t.batchnorm(t.leaf(X), t.leaf(G), t.leaf(Bb), &rm, &rv, false);
    Var pooled = t.mean_rows(y, 3);
    return t.bce_with_logits(t.matmul(pooled, t.leaf(W)), 0.0);
  });
}

TEST(TapeGrads, L2NormRows) {
  Rng rng = Rng::derive(25, "g5");
  auto X = make_param("X", 3, 5, rng);
  auto W = make_param("W", 5, 1, rng);
  std::vector<Parameter*> ps = {&X, &W};
  check_grads(ps, [&](Tape& t) {
    Var y = t.l2norm_rows(t.leaf(X));
    Var pooled = t.mean_rows(y, 3);
    return t.bce_with_logits(t.matmul(pooled, t.leaf(W)), 1.0);
  });
}

TEST(TapeGrads, AttentionTwoHeads) {
  Rng rng = Rng::derive(26, "g6");
  const long m = 5, k = 6;
  auto X = make_param("X", m, k, rng);
  auto Wq = make_param("Wq", k, k, rng, 0.5);
  auto Wk = make_param("Wk", k, k, rng, 0.5);
  auto Wv = make_param("Wv", k, k, rng, 0.5);
  auto Wo = make_param("Wo", k, 1, rng, 0.5);
  std::vector<Parameter*> ps = {&X, &Wq, &Wk, &Wv, &Wo};
  check_grads(ps, [&](Tape& t) {
    Var x = t.leaf(X);
    Var q = t.matmul(x, t.leaf(Wq));
    Var kk = t.matmul(x, t.leaf(Wk));
    Var v = t.matmul(x, t.leaf(Wv));
    Var o = t.attention(q, kk, v, 2, int(m));
    Var pooled = t.mean_rows(o, m);
    return t.bce_with_logits(t.matmul(pooled, t.leaf(Wo)), 1.0);
  });
}

TEST(TapeGrads, AttentionWithMaskedTail) {
  Rng rng = Rng::derive(27, "g7");
  const long m = 6, k = 4;
  auto X = make_param("X", m, k, rng);
  auto Wo = make_param("Wo", k, 1, rng, 0.5);
  std::vector<Parameter*> ps = {&X, &Wo};
  check_grads(ps, [&](Tape& t) {
    Var x = t.leaf(X);
    Var o = t.attention(x, x, x, 2, 4);  // last 2 rows masked out of keys
    Var pooled = t.mean_rows(o, 4);
    return t.bce_with_logits(t.matmul(pooled, t.leaf(Wo)), 0.0);
  });
}

TEST(TapeGrads, Embedding) {
  Rng rng = Rng::derive(28, "g8");
  auto T = make_param("T", 7, 4, rng);
  auto W = make_param("W", 4, 1, rng);
  std::vector<Parameter*> ps = {&T, &W};
  std::vector<int> ids = {2, 5, 2, 0, 6};  // repeated id exercises scatter-add
  check_grads(ps, [&](Tape& t) {
    Var x = t.embed(T, ids);
    Var pooled = t.mean_rows(x, long(ids.size()));
    return t.bce_with_logits(t.matmul(pooled, t.leaf(W)), 1.0);
  });
}

TEST(TapeGrads, CrossEntropy) {
  Rng rng = Rng::derive(29, "g9");
  auto Z = make_param("Z", 4, 9, rng);
  std::vector<Parameter*> ps = {&Z};
  check_grads(ps, [&](Tape& t) { return t.cross_entropy_rows(t.leaf(Z), {3, 0, 8, 5}); });
}

TEST(TapeGrads, ContrastiveBothBranches) {
  Rng rng = Rng::derive(30, "g10");
  auto U = make_param("U", 1, 5, rng);
  auto V = make_param("V", 1, 5, rng);
  std::vector<Parameter*> ps = {&U, &V};
  // similar pair: loss = d^2
  check_grads(ps, [&](Tape& t) { return t.contrastive(t.leaf(U), t.leaf(V), 1, 1.0); });
  // dissimilar pair inside the margin: hinge branch active
  check_grads(ps, [&](Tape& t) { return t.contrastive(t.leaf(U), t.leaf(V), 0, 10.0); });
}

TEST(TapeGrads, SharedParameterTwoBranches) {
  Rng rng = Rng::derive(31, "g11");
  auto W = make_param("W", 5, 5, rng, 0.5);
  auto A = make_param("A", 1, 5, rng);
  auto B = make_param("B", 1, 5, rng);
  std::vector<Parameter*> ps = {&W, &A, &B};
  // both branches run through the same leaf: siamese weight sharing
  check_grads(ps, [&](Tape& t) {
    Var w = t.leaf(W);
    Var u = t.matmul(t.leaf(A), w);
    Var v = t.matmul(t.leaf(B), w);
    return t.contrastive(u, v, 0, 8.0);
  });
}

TEST(TapeGrads, RecurrentCells) {
  Rng rng = Rng::derive(32, "g12");
  const long n = 4, k = 3, h = 3;
  for (int kind : {0, 1, 2}) {
    const long mult = kind == 1 ? 4 : (kind == 2 ? 3 : 1);
    auto X = make_param("X", n, k, rng);
    auto Wx = make_param("Wx", k, mult * h, rng, 0.5);
    auto Wh = make_param("Wh", h, mult * h, rng, 0.5);
    auto B = make_param("B", 1, mult * h, rng, 0.5);
    auto Wo = make_param("Wo", h, 1, rng);
    std::vector<Parameter*> ps = {&X, &Wx, &Wh, &B, &Wo};
    check_grads(ps, [&](Tape& t) {
      Var hs = t.recurrent(t.leaf(X), t.leaf(Wx), t.leaf(Wh), t.leaf(B), kind);
      Var last = t.slice_rows(hs, n - 1, 1);
      return t.bce_with_logits(t.matmul(last, t.leaf(Wo)), 1.0);
    });
  }
}

TEST(TapeGrads, TotalLossStyleCombination) {
  Rng rng = Rng::derive(33, "g13");
  auto Z = make_param("Z", 3, 7, rng);
  auto U = make_param("U", 1, 4, rng);
  auto V = make_param("V", 1, 4, rng);
  std::vector<Parameter*> ps = {&Z, &U, &V};
  check_grads(ps, [&](Tape& t) {
    Var mlm = t.cross_entropy_rows(t.leaf(Z), {1, 4, 6});
    Var cl = t.contrastive(t.leaf(U), t.leaf(V), 0, 5.0);
    return t.axpby(cl, mlm, 1.0, 0.1);  // weighted stage-1 total
  });
}
