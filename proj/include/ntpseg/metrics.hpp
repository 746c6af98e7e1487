#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ntpseg/codec.hpp"

namespace ntpseg {

struct ConfusionCounts {
  uint64_t tp = 0;
  uint64_t fp = 0;
  uint64_t fn = 0;

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

ConfusionCounts confusion(const MaskGrid& pred, const MaskGrid& gt);

// 2TP / (2TP + FP + FN); 1 when all counts are zero.
double dice(const ConfusionCounts& c);
// TP / (TP + FP + FN); 1 when all counts are zero.
double miou(const ConfusionCounts& c);

struct ImageScore {
  std::string sample_id;
  ConfusionCounts counts;
  double dice = 0.0;
  double miou = 0.0;
  double logprob = 0.0;
  std::string error;  // non-empty when decoding failed; scores are then 0
};

struct EvalReport {
  std::string split;
  std::vector<ImageScore> images;
  double macro_dice = 0.0;  // headline: mean of per-image scores
  double macro_miou = 0.0;
  double micro_dice = 0.0;  // from summed counts
  double micro_miou = 0.0;
  size_t failures = 0;

  // Fills the aggregates from `images`.
  void aggregate();
  std::string to_json() const;  // pretty-printed
  std::string to_table() const;
};

}  // namespace ntpseg
