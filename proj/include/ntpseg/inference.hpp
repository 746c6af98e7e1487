#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <vector>

#include "ntpseg/codec.hpp"
#include "ntpseg/model.hpp"
#include "ntpseg/sequence.hpp"

namespace ntpseg {

struct DecodeConfig {
  int beam_width = 4;
  void validate() const;
  bool operator==(const DecodeConfig&) const = default;
};

// One surviving expansion: parent beam index, candidate index, cumulative score.
struct BeamCandidate {
  int parent = 0;
  int32_t token = 0;
  double score = 0.0;
};

// Expands every beam over all candidates and keeps the best `width`.
// step_logprobs[b][c] is the log-probability of candidate c after beam b.
// Order: score descending, then earlier parent, then smaller candidate.
std::vector<BeamCandidate> beam_step(std::span<const double> beam_scores,
                                     const std::vector<std::vector<double>>& step_logprobs,
                                     int width);

struct BeamResult {
  std::vector<int32_t> tokens;  // candidate indices, one per step
  double logprob = 0.0;
};

// Fixed-length beam search over an abstract state. `score(state)` returns
// candidate log-probabilities; `advance(state, c)` feeds candidate c. The
// state after the last step is never advanced.
template <typename State, typename Score, typename Advance>
BeamResult beam_search(State initial, int steps, int width, Score&& score, Advance&& advance) {
  struct Beam {
    std::vector<int32_t> tokens;
    double logprob;
    State state;
  };
  std::vector<Beam> beams;
  beams.push_back({{}, 0.0, std::move(initial)});
  for (int s = 0; s < steps; ++s) {
    std::vector<std::vector<double>> lp;
    std::vector<double> scores;
    lp.reserve(beams.size());
    for (auto& b : beams) {
      lp.push_back(score(b.state));
      scores.push_back(b.logprob);
    }
    const auto picked = beam_step(scores, lp, width);
    std::vector<Beam> next;
    next.reserve(picked.size());
    for (const auto& c : picked) {
      const Beam& parent = beams[static_cast<size_t>(c.parent)];
      Beam child{parent.tokens, c.score, parent.state};
      child.tokens.push_back(c.token);
      if (s + 1 < steps) advance(child.state, c.token);
      next.push_back(std::move(child));
    }
    beams = std::move(next);
  }
  return {beams.front().tokens, beams.front().logprob};
}

struct MaskPrediction {
  std::vector<PatternToken> patterns;  // grid_h * grid_w, row-major
  MaskGrid mask;
  double logprob = 0.0;
  std::vector<int32_t> ids;  // prompt + mask tokens + [EOV] [EOS]
  bool greedy_fallback = false;  // greedy scored higher than the beam result
};

// Decodes the mask block for a prompt that ends at the mask block's [SOT].
// Only mask tokens are scored (log-softmax over that range of head 1).
template <typename T>
MaskPrediction generate_mask(const Model<T>& model, std::span<const int32_t> prompt,
                             const VocabLayout& layout, const DecodeConfig& cfg);

// Log-probability of a full mask token grid under the same constrained scoring.
template <typename T>
double score_mask_tokens(const Model<T>& model, std::span<const int32_t> prompt,
                         std::span<const int32_t> mask_ids, const VocabLayout& layout);

}  // namespace ntpseg
