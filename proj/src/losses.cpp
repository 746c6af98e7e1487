#include "ntpseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ntpseg/error.hpp"

namespace ntpseg {

void LossConfig::validate() const {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("loss.alpha must be in (0, 1]");
  if (!(gamma >= 0.0)) throw ConfigError("loss.gamma must be >= 0");
  if (k < 1) throw ConfigError("loss.k must be >= 1");
  if (m < 0) throw ConfigError("loss.m must be >= 0");
  if (l < 2 || l % 2 != 0) throw ConfigError("loss.l must be even and >= 2");
  if (!std::isfinite(lambda1) || !std::isfinite(lambda2) || !std::isfinite(lambda_het))
    throw ConfigError("loss weights must be finite");
}

int LossConfig::resolved_het_start(int total_epochs) const {
  if (het_start_epoch >= 0) return het_start_epoch;
  return static_cast<int>(std::floor(0.6 * total_epochs));
}

double focal_nll(double p, double alpha, double gamma) {
  if (!(p > kProbFloor)) p = kProbFloor;  // also catches NaN
  if (p >= 1.0) return 0.0;
  return -alpha * std::pow(1.0 - p, gamma) * std::log(p);
}

template <typename T>
T focal_from_logp(T logp, T alpha, T gamma, T* d_logp) {
  using std::exp;
  using std::pow;
  if (logp > T(0)) logp = T(0);
  const T p = exp(logp);
  const T q = T(1) - p;
  // (1 - p)^gamma with 0^0 = 1.
  const T w = gamma == T(0) ? T(1) : pow(q, gamma);
  const T loss = -alpha * w * logp;
  if (d_logp) {
    // d/dlogp of -a q^g logp, with dq/dlogp = -p.
    T extra = T(0);
    if (gamma != T(0) && q > T(0)) extra = alpha * gamma * p * pow(q, gamma - T(1)) * logp;
    *d_logp = -alpha * w + extra;
  }
  return loss;
}

template float focal_from_logp<float>(float, float, float, float*);
template double focal_from_logp<double>(double, double, double, double*);

namespace {

template <typename Row>
auto row_lse(const Row& row) {
  using T = typename Row::Scalar;
  const T mx = row.maxCoeff();
  return mx + std::log((row.array() - mx).exp().sum());
}

}  // namespace

template <typename T>
T focal_softmax_rows(const Matrix<T>& logits, std::span<const int32_t> targets, T alpha, T gamma,
                     T weight, Matrix<T>* d_logits) {
  if (static_cast<size_t>(logits.rows()) != targets.size())
    throw InvalidInput("focal_softmax_rows: row count differs from target count");
  if (d_logits) d_logits->setZero(logits.rows(), logits.cols());
  T total = T(0);
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const int32_t t = targets[static_cast<size_t>(r)];
    if (t < 0) continue;
    if (t >= logits.cols()) throw InvalidInput("focal_softmax_rows: target out of range");
    const auto row = logits.row(r);
    const T lse = row_lse(row);
    const T logp = row(t) - lse;
    T g = T(0);
    total += weight * focal_from_logp<T>(logp, alpha, gamma, d_logits ? &g : nullptr);
    if (d_logits) {
      // dlogp/dlogits = onehot - softmax
      auto drow = d_logits->row(r);
      drow = -(weight * g) * (row.array() - lse).exp().matrix();
      drow(t) += weight * g;
    }
  }
  return total;
}

template float focal_softmax_rows<float>(const Matrix<float>&, std::span<const int32_t>, float,
                                         float, float, Matrix<float>*);
template double focal_softmax_rows<double>(const Matrix<double>&, std::span<const int32_t>, double,
                                           double, double, Matrix<double>*);

std::vector<int> target_rows(std::span<const uint8_t> loss_mask, int offset) {
  std::vector<int> rows;
  if (offset < 1) return rows;
  const int L = static_cast<int>(loss_mask.size());
  for (int n = 0; n + offset <= L - 1; ++n)
    if (loss_mask[static_cast<size_t>(n + offset - 1)]) rows.push_back(n);
  return rows;
}

namespace {

void check_shapes(Eigen::Index rows, std::span<const int32_t> ids,
                  std::span<const uint8_t> loss_mask) {
  if (ids.size() != loss_mask.size() || static_cast<size_t>(rows) != ids.size())
    throw InvalidInput("loss: logits, ids and loss_mask lengths differ");
}

std::vector<int32_t> offset_targets(std::span<const int32_t> ids,
                                    std::span<const uint8_t> loss_mask, int offset) {
  std::vector<int32_t> targets(ids.size(), -1);
  for (int n : target_rows(loss_mask, offset))
    targets[static_cast<size_t>(n)] = ids[static_cast<size_t>(n + offset)];
  return targets;
}

}  // namespace

template <typename T>
T ntp_loss(const Matrix<T>& logits1, std::span<const int32_t> ids,
           std::span<const uint8_t> loss_mask, const LossConfig& cfg, Matrix<T>* d_logits,
           bool* empty) {
  check_shapes(logits1.rows(), ids, loss_mask);
  const auto targets = offset_targets(ids, loss_mask, 1);
  const bool none = std::all_of(targets.begin(), targets.end(), [](int32_t t) { return t < 0; });
  if (empty) *empty = none;
  return focal_softmax_rows<T>(logits1, targets, T(cfg.alpha), T(cfg.gamma), T(1), d_logits);
}

template float ntp_loss<float>(const Matrix<float>&, std::span<const int32_t>,
                               std::span<const uint8_t>, const LossConfig&, Matrix<float>*, bool*);
template double ntp_loss<double>(const Matrix<double>&, std::span<const int32_t>,
                                 std::span<const uint8_t>, const LossConfig&, Matrix<double>*,
                                 bool*);

template <typename T>
T nktp_loss(std::span<const Matrix<T>> head_logits, std::span<const int32_t> ids,
            std::span<const uint8_t> loss_mask, const LossConfig& cfg,
            std::vector<Matrix<T>>* d_logits) {
  if (d_logits) d_logits->clear();
  if (cfg.k <= 1) return T(0);
  if (head_logits.size() < static_cast<size_t>(cfg.k - 1))
    throw InvalidInput("nktp_loss: expected logits for heads 2..k");
  const T weight = T(1) / T(cfg.k - 1);
  T total = T(0);
  for (int j = 2; j <= cfg.k; ++j) {
    const Matrix<T>& lg = head_logits[static_cast<size_t>(j - 2)];
    check_shapes(lg.rows(), ids, loss_mask);
    const auto targets = offset_targets(ids, loss_mask, j);
    Matrix<T> d;
    total += focal_softmax_rows<T>(lg, targets, T(cfg.alpha), T(cfg.gamma), weight,
                                   d_logits ? &d : nullptr);
    if (d_logits) d_logits->push_back(std::move(d));
  }
  return total;
}

template float nktp_loss<float>(std::span<const Matrix<float>>, std::span<const int32_t>,
                                std::span<const uint8_t>, const LossConfig&,
                                std::vector<Matrix<float>>*);
template double nktp_loss<double>(std::span<const Matrix<double>>, std::span<const int32_t>,
                                  std::span<const uint8_t>, const LossConfig&,
                                  std::vector<Matrix<double>>*);

std::vector<int32_t> tcl_negatives(std::span<const int32_t> ids, size_t target_index, int m) {
  if (target_index >= ids.size()) throw InvalidInput("tcl_negatives: target index out of range");
  const int32_t target = ids[target_index];
  const size_t first = target_index > static_cast<size_t>(std::max(m, 0))
                           ? target_index - static_cast<size_t>(std::max(m, 0))
                           : 0;
  std::vector<int32_t> negs;
  for (size_t i = first; i < target_index; ++i)
    if (ids[i] != target) negs.push_back(ids[i]);
  std::sort(negs.begin(), negs.end());
  negs.erase(std::unique(negs.begin(), negs.end()), negs.end());
  return negs;
}

template <typename T>
T tcl_position(const Eigen::Ref<const Eigen::Matrix<T, 1, Eigen::Dynamic>>& hidden_row,
               const ConstMatrixMap<T>& embedding, int32_t target,
               std::span<const int32_t> negatives, T alpha, T gamma, T weight,
               Eigen::Matrix<T, 1, Eigen::Dynamic>* d_hidden_row, MatrixMap<T>* d_embedding) {
  if (negatives.empty()) return T(0);
  const auto et = embedding.row(target);
  const T st = hidden_row.dot(et);
  // margins s_j = h.E_j - h.E_t; logp = -log(1 + sum exp s_j)
  std::vector<T> s(negatives.size());
  T mx = T(0);
  for (size_t i = 0; i < negatives.size(); ++i) {
    s[i] = hidden_row.dot(embedding.row(negatives[i])) - st;
    mx = std::max(mx, s[i]);
  }
  T z = std::exp(-mx);
  for (T v : s) z += std::exp(v - mx);
  const T logp = -(mx + std::log(z));
  T g = T(0);
  const T loss = weight * focal_from_logp<T>(logp, alpha, gamma, &g);
  if (d_hidden_row || d_embedding) {
    const T gw = weight * g;
    for (size_t i = 0; i < negatives.size(); ++i) {
      // dlogp/ds_j = -exp(s_j) / (1 + sum exp s)
      const T ds = -gw * std::exp(s[i] - mx) / z;
      const auto ej = embedding.row(negatives[i]);
      if (d_hidden_row) *d_hidden_row += ds * (ej - et);
      if (d_embedding) {
        d_embedding->row(negatives[i]) += ds * hidden_row;
        d_embedding->row(target) -= ds * hidden_row;
      }
    }
  }
  return loss;
}

template float tcl_position<float>(const Eigen::Ref<const Eigen::Matrix<float, 1, Eigen::Dynamic>>&,
                                   const ConstMatrixMap<float>&, int32_t, std::span<const int32_t>,
                                   float, float, float, Eigen::Matrix<float, 1, Eigen::Dynamic>*,
                                   MatrixMap<float>*);
template double tcl_position<double>(
    const Eigen::Ref<const Eigen::Matrix<double, 1, Eigen::Dynamic>>&,
    const ConstMatrixMap<double>&, int32_t, std::span<const int32_t>, double, double, double,
    Eigen::Matrix<double, 1, Eigen::Dynamic>*, MatrixMap<double>*);

template <typename T>
T tcl_loss(const Matrix<T>& hidden, const ConstMatrixMap<T>& embedding,
           std::span<const int32_t> ids, std::span<const uint8_t> loss_mask, const LossConfig& cfg,
           Matrix<T>* d_hidden, MatrixMap<T>* d_embedding) {
  check_shapes(hidden.rows(), ids, loss_mask);
  if (d_hidden) d_hidden->setZero(hidden.rows(), hidden.cols());
  T total = T(0);
  if (cfg.m == 0) return total;
  Eigen::Matrix<T, 1, Eigen::Dynamic> dh(hidden.cols());
  for (int n : target_rows(loss_mask, 1)) {
    const size_t t = static_cast<size_t>(n) + 1;
    const auto negs = tcl_negatives(ids, t, cfg.m);
    dh.setZero();
    total += tcl_position<T>(hidden.row(n), embedding, ids[t], negs, T(cfg.alpha), T(cfg.gamma),
                             T(1), d_hidden ? &dh : nullptr, d_embedding);
    if (d_hidden) d_hidden->row(n) += dh;
  }
  return total;
}

template float tcl_loss<float>(const Matrix<float>&, const ConstMatrixMap<float>&,
                               std::span<const int32_t>, std::span<const uint8_t>,
                               const LossConfig&, Matrix<float>*, MatrixMap<float>*);
template double tcl_loss<double>(const Matrix<double>&, const ConstMatrixMap<double>&,
                                 std::span<const int32_t>, std::span<const uint8_t>,
                                 const LossConfig&, Matrix<double>*, MatrixMap<double>*);

double combined_loss(const LossParts& parts, const LossConfig& cfg) {
  double total = parts.ntp + cfg.lambda1 * parts.tcl + cfg.lambda2 * parts.nktp;
  if (parts.het_active) total += cfg.lambda_het * parts.het;
  return total;
}

}  // namespace ntpseg
