#pragma once

#include <span>
#include <string>

#include "ntpseg/data.hpp"
#include "ntpseg/inference.hpp"
#include "ntpseg/metrics.hpp"
#include "ntpseg/model.hpp"

namespace ntpseg {

// Decodes every sample's mask from its prompt and scores it against the
// ground truth. A sample that fails to decode scores 0 and carries the error
// text; evaluation continues.
EvalReport evaluate(const Model<float>& model, std::span<const LoadedSample> samples,
                    const VocabLayout& layout, const DecodeConfig& decode, int threads = 0,
                    const std::string& split = {});

}  // namespace ntpseg
