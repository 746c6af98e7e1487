#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ntpseg/model.hpp"

namespace ntpseg {

// Loss weights and hyperparameters. het_start_epoch < 0 means "60% of the
// configured epochs"; kHetNever disables the hard-error-token loss.
struct LossConfig {
  static constexpr int kHetNever = 1 << 30;

  double alpha = 0.25;
  double gamma = 2.0;
  int k = 16;
  int m = 5;
  double lambda1 = 0.5;
  double lambda2 = 1.0;
  double lambda_het = 1.0;
  int l = 50;
  int het_start_epoch = -1;

  void validate() const;
  int resolved_het_start(int total_epochs) const;
  bool operator==(const LossConfig&) const = default;
};

// Probability floor used wherever a bare probability enters a logarithm.
inline constexpr double kProbFloor = 1e-9;

// -alpha (1 - p)^gamma log p, with p clamped to [kProbFloor, 1].
double focal_nll(double p, double alpha, double gamma);

// Focal loss expressed through log p (finite for any finite logits).
// Writes d loss / d logp when `d_logp` is non-null.
template <typename T>
T focal_from_logp(T logp, T alpha, T gamma, T* d_logp);

// Sum over rows of focal(softmax(logits.row(r))[targets[r]]), each row scaled
// by `weight`. When `d_logits` is non-null it receives the gradient of the
// weighted sum (same shape as `logits`).
template <typename T>
T focal_softmax_rows(const Matrix<T>& logits, std::span<const int32_t> targets, T alpha, T gamma,
                     T weight, Matrix<T>* d_logits);

// Input positions n whose target ids[n + offset] is a loss target, i.e.
// loss_mask[n + offset - 1] is set. offset = 1 gives the NTP rows.
std::vector<int> target_rows(std::span<const uint8_t> loss_mask, int offset);

// Per-document next-token focal loss. logits1 is L x V; the target of
// position n is ids[n + 1]. Sets *empty when no position is masked.
template <typename T>
T ntp_loss(const Matrix<T>& logits1, std::span<const int32_t> ids,
           std::span<const uint8_t> loss_mask, const LossConfig& cfg, Matrix<T>* d_logits = nullptr,
           bool* empty = nullptr);

// Per-document next-k-token loss. head_logits[j - 2] holds the L x V logits
// of head j for j = 2..k. Head j at position n is scored against
// ids[n + j]; the per-offset sums are averaged over the k - 1 offsets.
template <typename T>
T nktp_loss(std::span<const Matrix<T>> head_logits, std::span<const int32_t> ids,
            std::span<const uint8_t> loss_mask, const LossConfig& cfg,
            std::vector<Matrix<T>>* d_logits = nullptr);

// Negative set for the target at index `target_index`: the m ids right before
// it, deduplicated, with the target id itself removed. Ascending order.
std::vector<int32_t> tcl_negatives(std::span<const int32_t> ids, size_t target_index, int m);

// Token-level contrastive loss for one input position given its hidden row:
// p_ct = 1 / (1 + sum_j exp(h.E_j - h.E_target)), loss = weight * focal(p_ct).
template <typename T>
T tcl_position(const Eigen::Ref<const Eigen::Matrix<T, 1, Eigen::Dynamic>>& hidden_row,
               const ConstMatrixMap<T>& embedding, int32_t target,
               std::span<const int32_t> negatives, T alpha, T gamma, T weight,
               Eigen::Matrix<T, 1, Eigen::Dynamic>* d_hidden_row, MatrixMap<T>* d_embedding);

// Per-document contrastive loss summed over masked positions.
template <typename T>
T tcl_loss(const Matrix<T>& hidden, const ConstMatrixMap<T>& embedding,
           std::span<const int32_t> ids, std::span<const uint8_t> loss_mask, const LossConfig& cfg,
           Matrix<T>* d_hidden = nullptr, MatrixMap<T>* d_embedding = nullptr);

struct LossParts {
  double ntp = 0;
  double tcl = 0;
  double nktp = 0;
  double het = 0;
  bool het_active = false;
};

// L_ntp + lambda1 L_tcl + lambda2 L_nktp (+ lambda_het L_het when active).
double combined_loss(const LossParts& parts, const LossConfig& cfg);

}  // namespace ntpseg
