#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "ntpseg/het.hpp"
#include "ntpseg/losses.hpp"
#include "ntpseg/model.hpp"
#include "ntpseg/sequence.hpp"

namespace ntpseg {

struct TrainConfig {
  int epochs = 40;
  int batch_size = 8;
  double peak_lr = 1e-4;
  double min_lr = 1e-5;
  int warmup_steps = 30;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;  // <= 0 disables clipping
  uint64_t seed = 0;
  int eval_every = 0;  // epochs; 0 disables periodic evaluation
  int threads = 0;     // 0: NTPSEG_THREADS or 1
  // Train on every next-token prediction of the document, not only the mask block.
  bool train_on_all_tokens = false;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

// Linear warmup from 0 to peak_lr over warmup_steps, then cosine decay to
// min_lr at total_steps.
double lr_at(int64_t step, int64_t total_steps, const TrainConfig& cfg);

struct AdamState {
  std::vector<float> m, v;
  int64_t t = 0;
};

// Decoupled weight decay on tensors marked `decay` in the layout, then a
// bias-corrected Adam update. Returns false (and leaves everything untouched)
// when any gradient is non-finite.
bool adamw_step(std::span<float> params, std::span<const float> grads, AdamState& state, double lr,
                const TrainConfig& cfg, const ParamLayout& layout);

// Scales grads so the global L2 norm is at most max_norm. Returns the norm
// before clipping.
double clip_grad_norm(std::span<float> grads, double max_norm);

struct EpochReport {
  int epoch = 0;
  int64_t steps = 0;  // optimizer updates so far
  double ntp = 0, tcl = 0, nktp = 0, het = 0, total = 0;  // means over the epoch's steps
  bool het_active = false;
  double token_accuracy = 0;  // greedy head-1 accuracy on masked positions
  size_t rejected_steps = 0;
  size_t het_memory_tokens = 0;
};

// Full mutable training state. Everything that influences later steps lives
// here, so saving it at an epoch boundary is enough to resume exactly.
struct TrainState {
  Model<float> model;
  AdamState adam;
  HetMemory het;
  int epoch = 0;      // completed epochs
  int64_t step = 0;   // completed optimizer updates
};

class Trainer {
 public:
  Trainer(TrainState state, LossConfig loss, TrainConfig train,
          std::vector<MultimodalDocument> docs);

  // Fresh model from train.seed.
  static TrainState initial_state(const ModelConfig& model, const TrainConfig& train);

  // Runs the next epoch. Metrics records go to `log` (line-delimited JSON)
  // when it is set.
  EpochReport train_epoch();
  bool finished() const { return state_.epoch >= train_.epochs; }

  void set_log(std::ostream* log) { log_ = log; }
  int64_t total_steps() const;
  int64_t steps_per_epoch() const;
  // Shuffled order of document indices for an epoch.
  std::vector<size_t> epoch_order(int epoch) const;

  const TrainState& state() const { return state_; }
  TrainState& state() { return state_; }
  const LossConfig& loss_config() const { return loss_; }
  const TrainConfig& train_config() const { return train_; }

 private:
  TrainState state_;
  LossConfig loss_;
  TrainConfig train_;
  std::vector<MultimodalDocument> docs_;
  std::ostream* log_ = nullptr;
};

}  // namespace ntpseg
