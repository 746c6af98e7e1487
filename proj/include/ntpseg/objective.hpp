#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ntpseg/het.hpp"
#include "ntpseg/losses.hpp"
#include "ntpseg/model.hpp"
#include "ntpseg/sequence.hpp"

namespace ntpseg {

// Everything the batch objective needs besides parameters and documents.
struct ObjectiveOptions {
  LossConfig loss;
  bool het_active = false;
  const HetMemory* memory = nullptr;
  // When set, HET positions and negatives come from this plan instead of the
  // current argmax (used by gradient checks so the loss stays smooth).
  const HetPlan* frozen_plan = nullptr;
  bool training = false;  // dropout on
  uint64_t dropout_seed = 0;  // per-document streams are derived from it
  bool collect_predictions = false;
  // Leaves the NTP term out of the objective (isolates the other parts in
  // gradient checks). Its value is still reported.
  bool include_ntp = true;
  int threads = 1;
};

struct BatchResult {
  LossParts parts;  // ntp, tcl and nktp are batch means; het is the mean over error positions
  double total = 0.0;      // combined loss
  double objective = 0.0;  // the value whose gradient was computed (total unless include_ntp is off)
  size_t het_errors = 0;
  size_t masked_positions = 0;
  size_t correct_positions = 0;  // greedy head-1 hits among masked positions
  std::vector<HetMemory::Prediction> predictions;  // filled when collect_predictions
  HetPlan plan;
};

// Dropout stream of document `index` within a step.
uint64_t document_dropout_seed(uint64_t step_seed, const std::string& sample_id);

// Loss of a document batch and, when `grad` is non-empty, its gradient with
// respect to the flat parameters (overwritten, not accumulated). Per-document
// gradients are reduced in batch order, so the result is independent of the
// thread count.
template <typename T>
BatchResult batch_objective(const Model<T>& model, std::span<const MultimodalDocument* const> docs,
                            const ObjectiveOptions& opts, std::span<T> grad);

// Convenience for a whole vector of documents.
template <typename T>
BatchResult batch_objective(const Model<T>& model, std::span<const MultimodalDocument> docs,
                            const ObjectiveOptions& opts, std::span<T> grad);

extern template BatchResult batch_objective<float>(const Model<float>&,
                                                   std::span<const MultimodalDocument* const>,
                                                   const ObjectiveOptions&, std::span<float>);
extern template BatchResult batch_objective<double>(const Model<double>&,
                                                    std::span<const MultimodalDocument* const>,
                                                    const ObjectiveOptions&, std::span<double>);

}  // namespace ntpseg
