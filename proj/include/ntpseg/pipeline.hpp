#pragma once

#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "ntpseg/config.hpp"
#include "ntpseg/data.hpp"
#include "ntpseg/metrics.hpp"
#include "ntpseg/trainer.hpp"

namespace ntpseg {

// Ablation switches as pure config edits.
void disable_tcl(RunConfig& cfg);   // lambda1 = 0
void disable_nktp(RunConfig& cfg);  // k = 1
void disable_het(RunConfig& cfg);   // HET never starts

// Rows 0..3: baseline, +TCL, +TCL+NkTP, +TCL+NkTP+HET (= base).
RunConfig ablation_variant(const RunConfig& base, int row);
const char* ablation_row_name(int row);

std::vector<MultimodalDocument> documents_of(std::span<const LoadedSample> samples);

struct TrainHooks {
  std::ostream* log = nullptr;  // metrics JSONL
  // Called after every epoch; returning false stops training early.
  std::function<bool(const Trainer&, const EpochReport&)> after_epoch;
};

// Trains from scratch (or continues `state` when given) until the configured
// epoch count or until a hook stops it.
TrainState train_model(const RunConfig& cfg, std::span<const LoadedSample> train,
                       const TrainHooks& hooks = {}, TrainState* resume = nullptr);

struct AblationCell {
  uint64_t seed = 0;
  double dice = 0.0;
  double miou = 0.0;
};

struct AblationRow {
  std::string name;
  std::vector<AblationCell> runs;
  double median_dice = 0.0;
  double median_miou = 0.0;
};

double median(std::vector<double> v);

// Trains every variant for every seed on `train` and scores it on `test`.
std::vector<AblationRow> run_ablation(const RunConfig& base, std::span<const LoadedSample> train,
                                      std::span<const LoadedSample> test,
                                      std::span<const uint64_t> seeds,
                                      std::span<const int> rows = {},
                                      std::ostream* progress = nullptr);

std::string ablation_table(std::span<const AblationRow> rows);
std::string ablation_json(std::span<const AblationRow> rows);

}  // namespace ntpseg
