#include "ntpseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <numeric>
#include <ostream>

#include "ntpseg/error.hpp"
#include "ntpseg/objective.hpp"
#include "ntpseg/rng.hpp"

namespace ntpseg {

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(peak_lr > 0.0)) throw ConfigError("train.peak_lr must be positive");
  if (!(min_lr >= 0.0) || min_lr > peak_lr) throw ConfigError("train.min_lr must be in [0, peak_lr]");
  if (warmup_steps < 0) throw ConfigError("train.warmup_steps must be >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("train.beta1 and train.beta2 must be in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps must be positive");
  if (eval_every < 0) throw ConfigError("train.eval_every must be >= 0");
  if (threads < 0) throw ConfigError("train.threads must be >= 0");
}

double lr_at(int64_t step, int64_t total_steps, const TrainConfig& cfg) {
  step = std::max<int64_t>(step, 0);
  if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps)
    return cfg.peak_lr * static_cast<double>(step) / cfg.warmup_steps;
  const int64_t span = total_steps - cfg.warmup_steps;
  if (span <= 0) return cfg.min_lr;
  const double progress =
      std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(span));
  return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + std::cos(M_PI * progress));
}

bool adamw_step(std::span<float> params, std::span<const float> grads, AdamState& state, double lr,
                const TrainConfig& cfg, const ParamLayout& layout) {
  if (params.size() != grads.size() || params.size() != layout.total())
    throw InvalidInput("adamw_step: size mismatch");
  for (float g : grads)
    if (!std::isfinite(g)) return false;
  if (state.m.size() != params.size()) state.m.assign(params.size(), 0.0f);
  if (state.v.size() != params.size()) state.v.assign(params.size(), 0.0f);
  ++state.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  const float b1 = static_cast<float>(cfg.beta1);
  const float b2 = static_cast<float>(cfg.beta2);
  const float step_size = static_cast<float>(lr / bc1);
  const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
  const float eps = static_cast<float>(cfg.adam_eps);
  const float decay = static_cast<float>(1.0 - lr * cfg.weight_decay);
  for (const TensorInfo& info : layout.tensors()) {
    const size_t end = info.offset + info.size();
    for (size_t i = info.offset; i < end; ++i) {
      if (info.decay) params[i] *= decay;
      const float g = grads[i];
      state.m[i] = b1 * state.m[i] + (1.0f - b1) * g;
      state.v[i] = b2 * state.v[i] + (1.0f - b2) * g * g;
      params[i] -= step_size * state.m[i] / (std::sqrt(state.v[i]) * inv_sqrt_bc2 + eps);
    }
  }
  return true;
}

double clip_grad_norm(std::span<float> grads, double max_norm) {
  double sq = 0.0;
  for (float g : grads) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const float scale = static_cast<float>(max_norm / (norm + 1e-6));
    for (float& g : grads) g *= scale;
  }
  return norm;
}

Trainer::Trainer(TrainState state, LossConfig loss, TrainConfig train,
                 std::vector<MultimodalDocument> docs)
    : state_(std::move(state)), loss_(loss), train_(train), docs_(std::move(docs)) {
  loss_.validate();
  train_.validate();
  if (docs_.empty()) throw InvalidInput("trainer: no training documents");
  if (train_.train_on_all_tokens)
    for (auto& d : docs_) mark_all_positions(d);
  if (loss_.k > state_.model.config().k_heads)
    throw ConfigError("loss.k exceeds the model's prediction heads");
}

TrainState Trainer::initial_state(const ModelConfig& model, const TrainConfig& train) {
  TrainState s{Model<float>(model), {}, {}, 0, 0};
  s.model.init(hash_combine(train.seed, 0x1417));
  return s;
}

int64_t Trainer::steps_per_epoch() const {
  return (static_cast<int64_t>(docs_.size()) + train_.batch_size - 1) / train_.batch_size;
}

int64_t Trainer::total_steps() const { return steps_per_epoch() * train_.epochs; }

std::vector<size_t> Trainer::epoch_order(int epoch) const {
  std::vector<size_t> order(docs_.size());
  std::iota(order.begin(), order.end(), size_t{0});
  Rng rng(hash_combine(hash_combine(train_.seed, 0x5eed), static_cast<uint64_t>(epoch)));
  for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

EpochReport Trainer::train_epoch() {
  const int epoch = state_.epoch;
  const bool het_active =
      loss_.lambda_het != 0.0 && epoch >= loss_.resolved_het_start(train_.epochs);
  const auto order = epoch_order(epoch);
  const size_t B = static_cast<size_t>(train_.batch_size);
  const ParamLayout& layout = state_.model.layout();
  std::vector<float> grad(state_.model.params().size());
  std::vector<HetMemory::Prediction> predictions;

  EpochReport rep;
  rep.epoch = epoch;
  rep.het_active = het_active;
  size_t masked = 0, correct = 0, batches = 0;
  for (size_t begin = 0; begin < order.size(); begin += B) {
    const size_t end = std::min(order.size(), begin + B);
    std::vector<const MultimodalDocument*> batch;
    for (size_t i = begin; i < end; ++i) batch.push_back(&docs_[order[i]]);

    ObjectiveOptions opts;
    opts.loss = loss_;
    opts.het_active = het_active;
    opts.memory = &state_.het;
    opts.training = true;
    opts.dropout_seed = hash_combine(hash_combine(train_.seed, 0xd409), static_cast<uint64_t>(state_.step));
    opts.collect_predictions = true;
    opts.threads = train_.threads;
    BatchResult res = batch_objective<float>(
        state_.model, std::span<const MultimodalDocument* const>(batch), opts, grad);

    if (!std::isfinite(res.total)) {
      std::string ids;
      for (const auto* d : batch) ids += (ids.empty() ? "" : ",") + d->sample_id;
      throw TrainingAborted("non-finite loss at epoch " + std::to_string(epoch) + " step " +
                            std::to_string(state_.step) + " (samples " + ids + ")");
    }
    const double grad_norm = clip_grad_norm(grad, train_.grad_clip);
    const double lr = lr_at(state_.step + 1, total_steps(), train_);
    const bool applied = adamw_step(state_.model.params(), grad, state_.adam, lr, train_, layout);
    if (applied) {
      ++state_.step;
    } else {
      ++rep.rejected_steps;
    }

    rep.ntp += res.parts.ntp;
    rep.tcl += res.parts.tcl;
    rep.nktp += res.parts.nktp;
    rep.het += res.parts.het;
    rep.total += res.total;
    masked += res.masked_positions;
    correct += res.correct_positions;
    ++batches;
    predictions.insert(predictions.end(), res.predictions.begin(), res.predictions.end());

    if (log_) {
      nlohmann::ordered_json j;
      j["type"] = "step";
      j["epoch"] = epoch;
      j["step"] = state_.step;
      j["lr"] = lr;
      j["L_ntp"] = res.parts.ntp;
      j["L_tcl"] = res.parts.tcl;
      j["L_nktp"] = res.parts.nktp;
      j["L_het"] = res.parts.het;
      j["L_total"] = res.total;
      j["het_active"] = het_active;
      j["het_errors"] = res.het_errors;
      j["grad_norm"] = grad_norm;
      if (!applied) j["rejected"] = "non-finite gradient";
      *log_ << j.dump() << '\n';
    }
  }

  state_.het.record_epoch_errors(epoch, predictions);
  ++state_.epoch;

  const double nb = static_cast<double>(std::max<size_t>(batches, 1));
  rep.ntp /= nb;
  rep.tcl /= nb;
  rep.nktp /= nb;
  rep.het /= nb;
  rep.total /= nb;
  rep.steps = state_.step;
  rep.token_accuracy = masked ? static_cast<double>(correct) / static_cast<double>(masked) : 0.0;
  rep.het_memory_tokens = state_.het.token_count();
  if (log_) {
    nlohmann::ordered_json j;
    j["type"] = "epoch";
    j["epoch"] = epoch;
    j["step"] = state_.step;
    j["L_ntp"] = rep.ntp;
    j["L_tcl"] = rep.tcl;
    j["L_nktp"] = rep.nktp;
    j["L_het"] = rep.het;
    j["L_total"] = rep.total;
    j["het_active"] = het_active;
    j["token_accuracy"] = rep.token_accuracy;
    j["het_memory_tokens"] = rep.het_memory_tokens;
    j["rejected_steps"] = rep.rejected_steps;
    *log_ << j.dump() << std::endl;
  }
  return rep;
}

}  // namespace ntpseg
