#pragma once

#include <cmath>
#include <string>

#include "clear/checkpoint.hpp"
#include "clear/encoder.hpp"
#include "clear/tokenizer.hpp"

namespace clear {

struct Prediction {
  std::string id;
  double probability = 0.0;
  int verdict = 0;
  std::string task;
  double threshold = 0.5;
};

// sigma(W3 . (AvgPool(F) ⊕ v) + b). AvgPool is the column-wise mean over the
// first n_valid rows, so trailing PAD rows never dilute the features.
inline double classify(const Eigen::MatrixXd& F, const Eigen::RowVectorXd& v, ModelState& st,
                       int n_valid = -1) {
  if (n_valid < 0) n_valid = int(F.rows());
  if (F.rows() == 0 || n_valid == 0) throw ValidationError("classify: empty feature matrix");
  if (n_valid > F.rows()) throw ValidationError("classify: n_valid exceeds feature rows");
  if (F.cols() != st.cfg.k || v.size() != st.cfg.k)
    throw ValidationError("classify: feature width mismatch");
  Eigen::RowVectorXd pooled = F.topRows(n_valid).colwise().mean();
  Eigen::RowVectorXd cat(2 * st.cfg.k);
  cat << pooled, v;
  const double z = (cat * st.cls_w3.value)(0, 0) + st.cls_b.value(0, 0);
  return 1.0 / (1.0 + std::exp(-z));
}

inline int predict(double probability, double threshold = 0.5) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw ValidationError("predict: threshold must lie in (0,1)");
  return probability >= threshold ? 1 : 0;
}

// End-to-end scoring of one source text with a fine-tuned model.
inline Prediction detect(const std::string& source, Checkpoint& model, const std::string& id = "",
                         double threshold = 0.5) {
  if (model.stage != "ft")
    throw ValidationError("stage mismatch: detection requires a fine-tuned model, got stage '" +
                          model.stage + "'");
  const EncodedContract ec =
      encode(tokenize(source), model.vocab, std::size_t(model.state.cfg.max_len), id);
  const EncoderOutput out = encode_eval(model.state, ec.token_ids);
  Prediction p;
  p.id = id;
  p.task = model.train_cfg.task;
  p.threshold = threshold;
  p.probability = classify(out.F, out.v, model.state, out.n_valid);
  p.verdict = predict(p.probability, threshold);
  return p;
}

}  // namespace clear
