#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "clear/common.hpp"

namespace clear {

// A named, trainable matrix. Lives outside any tape; gradients accumulate
// into `grad` across backward passes until the optimizer consumes them.
struct Parameter {
  std::string name;
  Eigen::MatrixXd value;
  Eigen::MatrixXd grad;
  Eigen::MatrixXd m, v;   // optimizer moment estimates
  bool no_decay = false;  // biases and norm gains skip weight decay

  void ensure_grad() {
    if (grad.rows() != value.rows() || grad.cols() != value.cols())
      grad = Eigen::MatrixXd::Zero(value.rows(), value.cols());
  }
};

inline void zero_grads(std::vector<Parameter*>& params) {
  for (auto* p : params) {
    p->ensure_grad();
    p->grad.setZero();
  }
}

// Handle into a Tape's node list.
struct Var {
  int i = -1;
  bool valid() const { return i >= 0; }
};

// Reverse-mode tape over Eigen matrices. Nodes are recorded in forward
// order, which is already a topological order, so backward is a single
// reverse sweep. One tape per training step; not thread-safe.
class Tape {
 public:
  Tape() { nodes_.reserve(512); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  const Eigen::MatrixXd& value(Var v) const { return nodes_[size_t(v.i)].value; }
  double scalar(Var v) const {
    const auto& m = value(v);
    if (m.rows() != 1 || m.cols() != 1) throw RuntimeFailure("scalar() on non-1x1 node");
    return m(0, 0);
  }
  const Eigen::MatrixXd& grad(Var v) const { return nodes_[size_t(v.i)].grad; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Eigen::MatrixXd m) {
    return push(std::move(m), false, {});
  }

  // Leaf tied to a parameter; backward adds into p.grad.
  Var leaf(Parameter& p) {
    p.ensure_grad();
    Var out = push(p.value, true, {});
    Parameter* pp = &p;
    int oi = out.i;
    nodes_[size_t(oi)].backprop = [this, pp, oi] { pp->grad += nodes_[size_t(oi)].grad; };
    return out;
  }

  // Rows of an embedding table selected by id; gradients scatter back.
  Var embed(Parameter& table, const std::vector<int>& ids) {
    table.ensure_grad();
    const int k = int(table.value.cols());
    Eigen::MatrixXd out(long(ids.size()), k);
    for (size_t r = 0; r < ids.size(); ++r) {
      const int id = ids[r];
      if (id < 0 || id >= table.value.rows())
        throw ValidationError("token id out of vocabulary range: " + std::to_string(id));
      out.row(long(r)) = table.value.row(id);
    }
    Var o = push(std::move(out), true, {});
    Parameter* tp = &table;
    int oi = o.i;
    auto ids_copy = ids;
    nodes_[size_t(oi)].backprop = [this, tp, oi, ids_copy] {
      const auto& g = nodes_[size_t(oi)].grad;
      for (size_t r = 0; r < ids_copy.size(); ++r) tp->grad.row(ids_copy[r]) += g.row(long(r));
    };
    return o;
  }

  Var matmul(Var a, Var b) {
    Var o = push(value(a) * value(b), needs(a) || needs(b), {a, b});
    record(o, [this, a, b, o] {
      const auto& g = nodes_[size_t(o.i)].grad;
      if (needs(a)) nodes_[size_t(a.i)].grad += g * value(b).transpose();
      if (needs(b)) nodes_[size_t(b.i)].grad += value(a).transpose() * g;
    });
    return o;
  }

  Var add(Var a, Var b) { return axpby(a, b, 1.0, 1.0); }
  Var sub(Var a, Var b) { return axpby(a, b, 1.0, -1.0); }

  Var axpby(Var a, Var b, double alpha, double beta) {
    Var o = push(alpha * value(a) + beta * value(b), needs(a) || needs(b), {a, b});
    record(o, [this, a, b, o, alpha, beta] {
      const auto& g = nodes_[size_t(o.i)].grad;
      if (needs(a)) nodes_[size_t(a.i)].grad += alpha * g;
      if (needs(b)) nodes_[size_t(b.i)].grad += beta * g;
    });
    return o;
  }

  Var scale(Var a, double s) {
    Var o = push(s * value(a), needs(a), {a});
    record(o, [this, a, o, s] {
      if (needs(a)) nodes_[size_t(a.i)].grad += s * nodes_[size_t(o.i)].grad;
    });
    return o;
  }

  // Broadcast-add a 1xC row vector to every row of a.
  Var add_rowvec(Var a, Var row) {
    if (value(row).rows() != 1 || value(row).cols() != value(a).cols())
      throw RuntimeFailure("add_rowvec shape mismatch");
    Eigen::MatrixXd out = value(a).rowwise() + value(row).row(0);
    Var o = push(std::move(out), needs(a) || needs(row), {a, row});
    record(o, [this, a, row, o] {
      const auto& g = nodes_[size_t(o.i)].grad;
      if (needs(a)) nodes_[size_t(a.i)].grad += g;
      if (needs(row)) nodes_[size_t(row.i)].grad += g.colwise().sum();
    });
    return o;
  }

  Var gelu(Var a) {
    static constexpr double inv_sqrt2 = 0.70710678118654752440;
    static constexpr double inv_sqrt2pi = 0.39894228040143267794;
    const auto& x = value(a);
    Eigen::MatrixXd y = x.unaryExpr(
        [](double t) { return 0.5 * t * (1.0 + std::erf(t * inv_sqrt2)); });
    Var o = push(std::move(y), needs(a), {a});
    record(o, [this, a, o] {
      if (!needs(a)) return;
      const auto& x2 = value(a);
      const auto& g = nodes_[size_t(o.i)].grad;
      Eigen::MatrixXd d = x2.unaryExpr([](double t) {
        const double cdf = 0.5 * (1.0 + std::erf(t * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * t * t);
        return cdf + t * pdf;
      });
      nodes_[size_t(a.i)].grad += g.cwiseProduct(d);
    });
    return o;
  }

  // Row-wise layer normalization with gain/bias (both 1xC).
  Var layernorm(Var x, Var gain, Var bias, double eps = 1e-5) {
    const auto& X = value(x);
    const long R = X.rows(), C = X.cols();
    Eigen::MatrixXd xhat(R, C);
    Eigen::VectorXd inv_std(R);
    for (long r = 0; r < R; ++r) {
      const double mu = X.row(r).mean();
      const double var = (X.row(r).array() - mu).square().mean();
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std(r) = is;
      xhat.row(r) = (X.row(r).array() - mu) * is;
    }
    Eigen::MatrixXd out =
        ((xhat.array().rowwise() * value(gain).row(0).array()).rowwise() +
         value(bias).row(0).array())
            .matrix();
    Var o = push(std::move(out), needs(x) || needs(gain) || needs(bias), {x, gain, bias});
    record(o, [this, x, gain, bias, o, xhat, inv_std] {
      const auto& g = nodes_[size_t(o.i)].grad;
      const long R = g.rows(), C = g.cols();
      if (needs(gain)) nodes_[size_t(gain.i)].grad += (g.array() * xhat.array()).colwise().sum().matrix();
      if (needs(bias)) nodes_[size_t(bias.i)].grad += g.colwise().sum();
      if (needs(x)) {
        Eigen::MatrixXd dxhat = (g.array().rowwise() * value(gain).row(0).array()).matrix();
        Eigen::MatrixXd dx(R, C);
        for (long r = 0; r < R; ++r) {
          const double sum_d = dxhat.row(r).sum();
          const double sum_dx = (dxhat.row(r).array() * xhat.row(r).array()).sum();
          dx.row(r) = ((inv_std(r) / double(C)) *
                       (double(C) * dxhat.row(r).array() - sum_d - xhat.row(r).array() * sum_dx))
                          .matrix();
        }
        nodes_[size_t(x.i)].grad += dx;
      }
    });
    return o;
  }

  // Column-wise batch normalization over the rows of x (the batch).
  // In train mode batch statistics normalize and running stats are updated
  // in place; in eval mode the provided running stats normalize.
  Var batchnorm(Var x, Var gain, Var bias, Eigen::RowVectorXd* running_mean,
                Eigen::RowVectorXd* running_var, bool train_mode, double momentum = 0.1,
                double eps = 1e-5) {
    const auto& X = value(x);
    const long R = X.rows(), C = X.cols();
    Eigen::RowVectorXd mu(C), var(C);
    if (train_mode) {
      mu = X.colwise().mean();
      var = (X.rowwise() - mu).array().square().colwise().mean();
      if (running_mean && running_var) {
        const double unbias = R > 1 ? double(R) / double(R - 1) : 1.0;
        *running_mean = (1.0 - momentum) * (*running_mean) + momentum * mu;
        *running_var = (1.0 - momentum) * (*running_var) + momentum * (unbias * var);
      }
    } else {
      mu = *running_mean;
      var = *running_var;
    }
    Eigen::RowVectorXd inv_std = (var.array() + eps).rsqrt().matrix();
    Eigen::MatrixXd xhat = ((X.rowwise() - mu).array().rowwise() * inv_std.array()).matrix();
    Eigen::MatrixXd out =
        ((xhat.array().rowwise() * value(gain).row(0).array()).rowwise() +
         value(bias).row(0).array())
            .matrix();
    Var o = push(std::move(out), needs(x) || needs(gain) || needs(bias), {x, gain, bias});
    record(o, [this, x, gain, bias, o, xhat, inv_std, train_mode] {
      const auto& g = nodes_[size_t(o.i)].grad;
      const long R = g.rows();
      if (needs(gain)) nodes_[size_t(gain.i)].grad += (g.array() * xhat.array()).colwise().sum().matrix();
      if (needs(bias)) nodes_[size_t(bias.i)].grad += g.colwise().sum();
      if (!needs(x)) return;
      Eigen::MatrixXd dxhat = (g.array().rowwise() * value(gain).row(0).array()).matrix();
      if (!train_mode) {
        nodes_[size_t(x.i)].grad += (dxhat.array().rowwise() * inv_std.array()).matrix();
        return;
      }
      Eigen::RowVectorXd sum_d = dxhat.colwise().sum();
      Eigen::RowVectorXd sum_dx = (dxhat.array() * xhat.array()).colwise().sum().matrix();
      Eigen::MatrixXd dx = (((double(R) * dxhat.array()).rowwise() - sum_d.array()) -
                            xhat.array().rowwise() * sum_dx.array())
                               .matrix();
      dx = (dx.array().rowwise() * (inv_std.array() / double(R))).matrix();
      nodes_[size_t(x.i)].grad += dx;
    });
    return o;
  }

  // Row-wise L2 normalization: y_r = x_r / (||x_r|| + eps).
  Var l2norm_rows(Var x, double eps = 1e-8) {
    const auto& X = value(x);
    const long R = X.rows();
    Eigen::VectorXd norms(R);
    for (long r = 0; r < R; ++r) norms(r) = X.row(r).norm();
    Eigen::MatrixXd out = X;
    for (long r = 0; r < R; ++r) out.row(r) /= (norms(r) + eps);
    Var o = push(std::move(out), needs(x), {x});
    record(o, [this, x, o, norms, eps] {
      if (!needs(x)) return;
      const auto& g = nodes_[size_t(o.i)].grad;
      const auto& X2 = value(x);
      Eigen::MatrixXd dx(X2.rows(), X2.cols());
      for (long r = 0; r < X2.rows(); ++r) {
        const double rr = norms(r) + eps;
        if (norms(r) < 1e-12) {
          dx.row(r) = g.row(r) / rr;
        } else {
          const double xdotg = X2.row(r).dot(g.row(r));
          dx.row(r) = g.row(r) / rr - X2.row(r) * (xdotg / (rr * rr * norms(r)));
        }
      }
      nodes_[size_t(x.i)].grad += dx;
    });
    return o;
  }

  // Fused multi-head scaled-dot-product attention on pre-projected Q, K, V
  // (all m x k). Only the first valid_len key/value positions participate;
  // later columns are masked out of every row's softmax.
  Var attention(Var q, Var k, Var v, int heads, int valid_len) {
    const auto& Q = value(q);
    const auto& K = value(k);
    const auto& V = value(v);
    const long m = Q.rows(), kdim = Q.cols();
    if (kdim % heads != 0) throw ValidationError("attention: width not divisible by head count");
    if (valid_len < 1 || valid_len > m) throw RuntimeFailure("attention: bad valid_len");
    const long dh = kdim / heads;
    const double scale = 1.0 / std::sqrt(double(dh));

    std::vector<Eigen::MatrixXd> attn(static_cast<size_t>(heads));
    Eigen::MatrixXd out(m, kdim);
    for (int h = 0; h < heads; ++h) {
      auto Qh = Q.middleCols(h * dh, dh);
      auto Kh = K.middleCols(h * dh, dh);
      auto Vh = V.middleCols(h * dh, dh);
      Eigen::MatrixXd S = scale * (Qh * Kh.transpose());  // m x m
      Eigen::MatrixXd A = Eigen::MatrixXd::Zero(m, m);
      for (long r = 0; r < m; ++r) {
        const auto row = S.row(r).head(valid_len);
        const double mx = row.maxCoeff();
        Eigen::RowVectorXd e = (row.array() - mx).exp().matrix();
        A.row(r).head(valid_len) = e / e.sum();
      }
      out.middleCols(h * dh, dh) = A * Vh;
      attn[size_t(h)] = std::move(A);
    }
    Var o = push(std::move(out), needs(q) || needs(k) || needs(v), {q, k, v});
    record(o, [this, q, k, v, o, heads, dh, scale, attn] {
      const auto& g = nodes_[size_t(o.i)].grad;
      const auto& Q = value(q);
      const auto& K = value(k);
      const auto& V = value(v);
      for (int h = 0; h < heads; ++h) {
        const auto& A = attn[size_t(h)];
        auto Qh = Q.middleCols(h * dh, dh);
        auto Kh = K.middleCols(h * dh, dh);
        auto Vh = V.middleCols(h * dh, dh);
        auto gh = g.middleCols(h * dh, dh);
        if (needs(v)) nodes_[size_t(v.i)].grad.middleCols(h * dh, dh) += A.transpose() * gh;
        if (!needs(q) && !needs(k)) continue;
        Eigen::MatrixXd dA = gh * Vh.transpose();                       // m x m
        Eigen::VectorXd rowdot = (dA.array() * A.array()).rowwise().sum().matrix();
        Eigen::MatrixXd dS =
            (A.array() * (dA.array().colwise() - rowdot.array())).matrix();
        if (needs(q)) nodes_[size_t(q.i)].grad.middleCols(h * dh, dh) += scale * (dS * Kh);
        if (needs(k)) nodes_[size_t(k.i)].grad.middleCols(h * dh, dh) += scale * (dS.transpose() * Qh);
      }
    });
    return o;
  }

  // Stack a list of matrices with equal column counts by rows.
  Var vstack(const std::vector<Var>& parts) {
    if (parts.empty()) throw RuntimeFailure("vstack: empty");
    long rows = 0;
    const long cols = value(parts[0]).cols();
    for (auto p : parts) rows += value(p).rows();
    Eigen::MatrixXd out(rows, cols);
    std::vector<long> offsets(parts.size());
    bool any = false;
    long at = 0;
    for (size_t i = 0; i < parts.size(); ++i) {
      offsets[i] = at;
      out.middleRows(at, value(parts[i]).rows()) = value(parts[i]);
      at += value(parts[i]).rows();
      any = any || needs(parts[i]);
    }
    Var o = push(std::move(out), any, parts);
    auto parts_copy = parts;
    record(o, [this, o, parts_copy, offsets] {
      const auto& g = nodes_[size_t(o.i)].grad;
      for (size_t i = 0; i < parts_copy.size(); ++i) {
        if (!needs(parts_copy[i])) continue;
        auto& tg = nodes_[size_t(parts_copy[i].i)].grad;
        tg += g.middleRows(offsets[i], tg.rows());
      }
    });
    return o;
  }

  Var slice_rows(Var a, long start, long count) {
    Var o = push(value(a).middleRows(start, count), needs(a), {a});
    record(o, [this, a, o, start, count] {
      if (needs(a))
        nodes_[size_t(a.i)].grad.middleRows(start, count) += nodes_[size_t(o.i)].grad;
    });
    return o;
  }

  Var concat_cols(Var a, Var b) {
    const long ca = value(a).cols();
    Eigen::MatrixXd out(value(a).rows(), ca + value(b).cols());
    out.leftCols(ca) = value(a);
    out.rightCols(value(b).cols()) = value(b);
    Var o = push(std::move(out), needs(a) || needs(b), {a, b});
    record(o, [this, a, b, o, ca] {
      const auto& g = nodes_[size_t(o.i)].grad;
      if (needs(a)) nodes_[size_t(a.i)].grad += g.leftCols(ca);
      if (needs(b)) nodes_[size_t(b.i)].grad += g.rightCols(g.cols() - ca);
    });
    return o;
  }

  // Rows of a node selected by index (e.g. masked positions of X').
  Var select_rows(Var a, const std::vector<int>& idx) {
    Eigen::MatrixXd out(long(idx.size()), value(a).cols());
    for (size_t r = 0; r < idx.size(); ++r) out.row(long(r)) = value(a).row(idx[r]);
    Var o = push(std::move(out), needs(a), {a});
    auto idx_copy = idx;
    record(o, [this, a, o, idx_copy] {
      if (!needs(a)) return;
      const auto& g = nodes_[size_t(o.i)].grad;
      for (size_t r = 0; r < idx_copy.size(); ++r)
        nodes_[size_t(a.i)].grad.row(idx_copy[r]) += g.row(long(r));
    });
    return o;
  }

  // Column-wise mean over the first `valid` rows (pooling that ignores PAD).
  Var mean_rows(Var a, long valid) {
    if (valid < 1 || valid > value(a).rows()) throw RuntimeFailure("mean_rows: bad valid count");
    Eigen::MatrixXd out = value(a).topRows(valid).colwise().mean();
    Var o = push(std::move(out), needs(a), {a});
    record(o, [this, a, o, valid] {
      if (!needs(a)) return;
      const auto& g = nodes_[size_t(o.i)].grad;
      nodes_[size_t(a.i)].grad.topRows(valid).rowwise() += (g.row(0) / double(valid));
    });
    return o;
  }

  // s * (sum of all rows), as a 1xC row.
  Var scaled_sum_rows(Var a, double s) {
    Eigen::MatrixXd out = s * value(a).colwise().sum();
    Var o = push(std::move(out), needs(a), {a});
    record(o, [this, a, o, s] {
      if (needs(a))
        nodes_[size_t(a.i)].grad.rowwise() += (s * nodes_[size_t(o.i)].grad.row(0));
    });
    return o;
  }

  // Mean cross-entropy of row-wise softmax against integer targets.
  Var cross_entropy_rows(Var logits, const std::vector<int>& targets) {
    const auto& Z = value(logits);
    if (Z.rows() != long(targets.size()) || targets.empty())
      throw RuntimeFailure("cross_entropy_rows: target/row mismatch");
    const long m = Z.rows();
    Eigen::MatrixXd P(m, Z.cols());
    double loss = 0.0;
    for (long r = 0; r < m; ++r) {
      const double mx = Z.row(r).maxCoeff();
      Eigen::RowVectorXd e = (Z.row(r).array() - mx).exp().matrix();
      const double s = e.sum();
      P.row(r) = e / s;
      loss -= (Z(r, targets[size_t(r)]) - mx - std::log(s));
    }
    loss /= double(m);
    Var o = push(Eigen::MatrixXd::Constant(1, 1, loss), needs(logits), {logits});
    auto t_copy = targets;
    record(o, [this, logits, o, P, t_copy] {
      if (!needs(logits)) return;
      const double g = nodes_[size_t(o.i)].grad(0, 0);
      Eigen::MatrixXd d = P;
      for (long r = 0; r < d.rows(); ++r) d(r, t_copy[size_t(r)]) -= 1.0;
      nodes_[size_t(logits.i)].grad += (g / double(d.rows())) * d;
    });
    return o;
  }

  // Numerically stable binary cross-entropy on a single logit.
  Var bce_with_logits(Var logit, double target) {
    const double z = scalar(logit);
    const double loss = std::max(z, 0.0) - z * target + std::log1p(std::exp(-std::abs(z)));
    Var o = push(Eigen::MatrixXd::Constant(1, 1, loss), needs(logit), {logit});
    record(o, [this, logit, o, z, target] {
      if (!needs(logit)) return;
      const double sig = 1.0 / (1.0 + std::exp(-z));
      nodes_[size_t(logit.i)].grad(0, 0) += nodes_[size_t(o.i)].grad(0, 0) * (sig - target);
    });
    return o;
  }

  // Margin contrastive loss on two 1xC vectors:
  //   label 1 -> d^2, label 0 -> max(0, M - d)^2, d = ||u - v||.
  Var contrastive(Var u, Var v, int label, double margin) {
    const Eigen::RowVectorXd diff = value(u).row(0) - value(v).row(0);
    const double d = diff.norm();
    double loss;
    if (label == 1)
      loss = d * d;
    else
      loss = (d >= margin) ? 0.0 : (margin - d) * (margin - d);
    Var o = push(Eigen::MatrixXd::Constant(1, 1, loss), needs(u) || needs(v), {u, v});
    record(o, [this, u, v, o, diff, d, label, margin] {
      const double g = nodes_[size_t(o.i)].grad(0, 0);
      Eigen::RowVectorXd du;
      if (label == 1) {
        du = 2.0 * g * diff;
      } else if (d >= margin || d < 1e-12) {
        du = Eigen::RowVectorXd::Zero(diff.cols());
      } else {
        du = (-2.0 * g * (margin - d) / d) * diff;
      }
      if (needs(u)) nodes_[size_t(u.i)].grad.row(0) += du;
      if (needs(v)) nodes_[size_t(v.i)].grad.row(0) -= du;
    });
    return o;
  }

  // Fused unidirectional recurrent pass over the rows of x (one row per
  // step), returning all hidden states (n x hidden). kind: 0 = plain tanh
  // cell, 1 = LSTM, 2 = GRU. Weight layouts (columns grouped per gate):
  //   lstm: wx k x 4h [i f g o], wh h x 4h, b 1 x 4h
  //   gru:  wx k x 3h [r z n],   wh h x 3h, b 1 x 3h
  Var recurrent(Var x, Var wx, Var wh, Var b, int kind) {
    const auto& X = value(x);
    const auto& Wx = value(wx);
    const auto& Wh = value(wh);
    const auto& B = value(b);
    const long n = X.rows();
    const long h = Wh.rows();
    Eigen::MatrixXd H(n, h);

    struct StepCache {
      Eigen::RowVectorXd i, f, g, o, c, rv, zv, nv, hprev, cprev;
    };
    std::vector<StepCache> cache(static_cast<size_t>(n));
    Eigen::RowVectorXd hp = Eigen::RowVectorXd::Zero(h);
    Eigen::RowVectorXd cp = Eigen::RowVectorXd::Zero(h);
    auto sig = [](double t) { return 1.0 / (1.0 + std::exp(-t)); };

    for (long t = 0; t < n; ++t) {
      auto& sc = cache[size_t(t)];
      sc.hprev = hp;
      if (kind == 0) {
        Eigen::RowVectorXd a = X.row(t) * Wx + hp * Wh + B;
        hp = a.array().tanh().matrix();
      } else if (kind == 1) {
        sc.cprev = cp;
        Eigen::RowVectorXd a = X.row(t) * Wx + hp * Wh + B;  // 1 x 4h
        sc.i = a.head(h).unaryExpr(sig);
        sc.f = a.segment(h, h).unaryExpr(sig);
        sc.g = a.segment(2 * h, h).array().tanh().matrix();
        sc.o = a.tail(h).unaryExpr(sig);
        cp = sc.f.cwiseProduct(sc.cprev) + sc.i.cwiseProduct(sc.g);
        sc.c = cp;
        hp = sc.o.cwiseProduct(cp.array().tanh().matrix());
      } else {
        Eigen::RowVectorXd ax = X.row(t) * Wx + B;  // 1 x 3h
        Eigen::RowVectorXd ah = hp * Wh;
        sc.rv = (ax.head(h) + ah.head(h)).unaryExpr(sig);
        sc.zv = (ax.segment(h, h) + ah.segment(h, h)).unaryExpr(sig);
        sc.nv = (ax.tail(h) + sc.rv.cwiseProduct(ah.tail(h))).array().tanh().matrix();
        hp = (Eigen::RowVectorXd::Ones(h) - sc.zv).cwiseProduct(sc.nv) + sc.zv.cwiseProduct(hp);
      }
      H.row(t) = hp;
    }

    Var out = push(std::move(H), needs(x) || needs(wx) || needs(wh) || needs(b),
                   {x, wx, wh, b});
    record(out, [this, x, wx, wh, b, out, kind, cache] {
      const auto& X = value(x);
      const auto& Wx = value(wx);
      const auto& Wh = value(wh);
      const auto& Hv = value(out);
      const auto& G = nodes_[size_t(out.i)].grad;
      const long n = X.rows();
      const long h = Wh.rows();
      Eigen::MatrixXd dX = Eigen::MatrixXd::Zero(X.rows(), X.cols());
      Eigen::MatrixXd dWx = Eigen::MatrixXd::Zero(Wx.rows(), Wx.cols());
      Eigen::MatrixXd dWh = Eigen::MatrixXd::Zero(Wh.rows(), Wh.cols());
      Eigen::RowVectorXd dB = Eigen::RowVectorXd::Zero(Wx.cols());
      Eigen::RowVectorXd dh_next = Eigen::RowVectorXd::Zero(h);
      Eigen::RowVectorXd dc_next = Eigen::RowVectorXd::Zero(h);

      for (long t = n - 1; t >= 0; --t) {
        const auto& sc = cache[size_t(t)];
        Eigen::RowVectorXd dh = G.row(t) + dh_next;
        if (kind == 0) {
          Eigen::RowVectorXd ht = Hv.row(t);
          Eigen::RowVectorXd da =
              (dh.array() * (1.0 - ht.array().square())).matrix();
          dX.row(t) += da * Wx.transpose();
          dWx += X.row(t).transpose() * da;
          dWh += sc.hprev.transpose() * da;
          dB += da;
          dh_next = da * Wh.transpose();
        } else if (kind == 1) {
          Eigen::RowVectorXd tc = sc.c.array().tanh().matrix();
          Eigen::RowVectorXd dc =
              dc_next + (dh.array() * sc.o.array() * (1.0 - tc.array().square())).matrix();
          Eigen::RowVectorXd do_ = dh.cwiseProduct(tc);
          Eigen::RowVectorXd di = dc.cwiseProduct(sc.g);
          Eigen::RowVectorXd df = dc.cwiseProduct(sc.cprev);
          Eigen::RowVectorXd dg = dc.cwiseProduct(sc.i);
          Eigen::RowVectorXd da(4 * h);
          da.head(h) = (di.array() * sc.i.array() * (1.0 - sc.i.array())).matrix();
          da.segment(h, h) = (df.array() * sc.f.array() * (1.0 - sc.f.array())).matrix();
          da.segment(2 * h, h) = (dg.array() * (1.0 - sc.g.array().square())).matrix();
          da.tail(h) = (do_.array() * sc.o.array() * (1.0 - sc.o.array())).matrix();
          dX.row(t) += da * Wx.transpose();
          dWx += X.row(t).transpose() * da;
          dWh += sc.hprev.transpose() * da;
          dB += da;
          dh_next = da * Wh.transpose();
          dc_next = dc.cwiseProduct(sc.f);
        } else {
          Eigen::RowVectorXd ah_n = sc.hprev * Wh.rightCols(h);
          Eigen::RowVectorXd dn =
              dh.cwiseProduct((Eigen::RowVectorXd::Ones(h) - sc.zv));
          Eigen::RowVectorXd dz = dh.cwiseProduct(sc.hprev - sc.nv);
          Eigen::RowVectorXd dan = (dn.array() * (1.0 - sc.nv.array().square())).matrix();
          Eigen::RowVectorXd dr = dan.cwiseProduct(ah_n);
          Eigen::RowVectorXd da(3 * h);
          da.head(h) = (dr.array() * sc.rv.array() * (1.0 - sc.rv.array())).matrix();
          da.segment(h, h) = (dz.array() * sc.zv.array() * (1.0 - sc.zv.array())).matrix();
          da.tail(h) = dan;
          dX.row(t) += da * Wx.transpose();
          dWx += X.row(t).transpose() * da;
          dB += da;
          // hidden-path gradients: r/z gates see hprev directly, the n gate
          // through r ⊙ (hprev · Whn); plus the z ⊙ hprev skip connection
          Eigen::RowVectorXd da_h(3 * h);
          da_h.head(h) = da.head(h);
          da_h.segment(h, h) = da.segment(h, h);
          da_h.tail(h) = dan.cwiseProduct(sc.rv);
          dWh += sc.hprev.transpose() * da_h;
          dh_next = da_h * Wh.transpose() + dh.cwiseProduct(sc.zv);
        }
      }
      if (needs(x)) nodes_[size_t(x.i)].grad += dX;
      if (needs(wx)) nodes_[size_t(wx.i)].grad += dWx;
      if (needs(wh)) nodes_[size_t(wh.i)].grad += dWh;
      if (needs(b)) nodes_[size_t(b.i)].grad += dB;
    });
    return out;
  }

  // Seed d(root)=1 and sweep the tape in reverse.
  void backward(Var root) {
    auto& r = nodes_[size_t(root.i)];
    if (r.value.rows() != 1 || r.value.cols() != 1)
      throw RuntimeFailure("backward: root must be scalar");
    for (auto& n : nodes_)
      if (n.needs_grad) n.grad = Eigen::MatrixXd::Zero(n.value.rows(), n.value.cols());
    if (!r.needs_grad) return;
    r.grad(0, 0) = 1.0;
    for (long i = root.i; i >= 0; --i) {
      auto& n = nodes_[size_t(i)];
      if (n.needs_grad && n.backprop) n.backprop();
    }
  }

 private:
  struct Node {
    Eigen::MatrixXd value;
    Eigen::MatrixXd grad;
    std::function<void()> backprop;
    bool needs_grad = false;
  };

  bool needs(Var v) const { return nodes_[size_t(v.i)].needs_grad; }

  Var push(Eigen::MatrixXd value, bool needs_grad, const std::vector<Var>&) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var{int(nodes_.size()) - 1};
  }

  void record(Var v, std::function<void()> fn) {
    if (nodes_[size_t(v.i)].needs_grad) nodes_[size_t(v.i)].backprop = std::move(fn);
  }

  std::vector<Node> nodes_;
};

}  // namespace clear
