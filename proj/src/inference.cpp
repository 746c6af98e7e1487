#include "ntpseg/inference.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "ntpseg/error.hpp"

namespace ntpseg {

void DecodeConfig::validate() const {
  if (beam_width < 1) throw ConfigError("decode.beam_width must be >= 1");
}

std::vector<BeamCandidate> beam_step(std::span<const double> beam_scores,
                                     const std::vector<std::vector<double>>& step_logprobs,
                                     int width) {
  if (width < 1) throw InvalidInput("beam_step: width must be >= 1");
  if (beam_scores.size() != step_logprobs.size())
    throw InvalidInput("beam_step: one log-probability row per beam expected");
  std::vector<BeamCandidate> all;
  for (size_t b = 0; b < step_logprobs.size(); ++b) {
    for (size_t c = 0; c < step_logprobs[b].size(); ++c)
      all.push_back({static_cast<int>(b), static_cast<int32_t>(c), beam_scores[b] + step_logprobs[b][c]});
  }
  auto better = [](const BeamCandidate& a, const BeamCandidate& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.parent != b.parent) return a.parent < b.parent;
    return a.token < b.token;
  };
  const size_t keep = std::min(all.size(), static_cast<size_t>(width));
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(keep), all.end(), better);
  all.resize(keep);
  return all;
}

namespace {

struct PromptShape {
  int grid_h = 0;
  int grid_w = 0;
  int first_position = 0;  // rotary position of the first mask cell
};

PromptShape inspect_prompt(std::span<const int32_t> prompt, const VocabLayout& layout) {
  if (prompt.empty() || prompt.back() != VocabLayout::kSot)
    throw InvalidInput("generate_mask: prompt must end at the mask block's [SOT]");
  size_t sov = prompt.size() - 1;
  while (sov > 0 && prompt[sov] != VocabLayout::kSov) --sov;
  std::string meta;
  for (size_t i = sov + 1; i + 1 < prompt.size(); ++i) {
    if (!layout.is_text(prompt[i])) throw InvalidInput("generate_mask: malformed mask header");
    meta.push_back(static_cast<char>(prompt[i]));
  }
  const auto star = meta.find('*');
  if (prompt[sov] != VocabLayout::kSov || star == std::string::npos)
    throw InvalidInput("generate_mask: malformed mask header '" + meta + "'");
  PromptShape shape;
  try {
    shape.grid_h = std::stoi(meta.substr(0, star)) / layout.patch_size;
    shape.grid_w = std::stoi(meta.substr(star + 1)) / layout.patch_size;
  } catch (const std::exception&) {
    throw InvalidInput("generate_mask: malformed mask header '" + meta + "'");
  }
  if (shape.grid_h <= 0 || shape.grid_w <= 0)
    throw InvalidInput("generate_mask: malformed mask header '" + meta + "'");

  // The whole prompt must be a valid document prefix: completing it with any
  // mask grid has to parse.
  std::vector<int32_t> probe(prompt.begin(), prompt.end());
  probe.insert(probe.end(), static_cast<size_t>(shape.grid_h * shape.grid_w), layout.mask_base);
  probe.push_back(VocabLayout::kEov);
  probe.push_back(VocabLayout::kEos);
  try {
    parse_document(probe, layout);
  } catch (const Error& e) {
    throw InvalidInput(std::string("generate_mask: prompt is not a document prefix: ") + e.what());
  }
  shape.first_position = grid_aligned_positions(prompt).back() + 1;
  return shape;
}

template <typename T>
std::vector<double> mask_logprobs(const Model<T>& model, const Eigen::Matrix<T, 1, Eigen::Dynamic>& h,
                                  const VocabLayout& layout) {
  const auto emb = model.embedding();
  const Eigen::Index n = layout.pattern_count;
  const Eigen::Matrix<T, Eigen::Dynamic, 1> logits = emb.middleRows(layout.mask_base, n) * h.transpose();
  std::vector<double> out(static_cast<size_t>(n));
  double mx = -INFINITY;
  for (Eigen::Index i = 0; i < n; ++i) mx = std::max(mx, static_cast<double>(logits(i)));
  double z = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) z += std::exp(static_cast<double>(logits(i)) - mx);
  const double lse = mx + std::log(z);
  for (Eigen::Index i = 0; i < n; ++i) out[static_cast<size_t>(i)] = static_cast<double>(logits(i)) - lse;
  return out;
}

template <typename T>
struct DecodeState {
  typename Model<T>::Decoder decoder;
  Eigen::Matrix<T, 1, Eigen::Dynamic> hidden;
  int next_position = 0;
};

template <typename T>
BeamResult run_search(const Model<T>& model, std::span<const int32_t> prompt,
                      const VocabLayout& layout, const PromptShape& shape, int width) {
  DecodeState<T> init{typename Model<T>::Decoder(model), {}, shape.first_position};
  init.hidden = init.decoder.prefill(prompt, grid_aligned_positions(prompt));
  const int steps = shape.grid_h * shape.grid_w;
  return beam_search(
      std::move(init), steps, width,
      [&](const DecodeState<T>& s) { return mask_logprobs(model, s.hidden, layout); },
      [&](DecodeState<T>& s, int32_t c) {
        s.hidden = s.decoder.step(layout.mask_base + c, s.next_position);
        ++s.next_position;
      });
}

}  // namespace

template <typename T>
MaskPrediction generate_mask(const Model<T>& model, std::span<const int32_t> prompt,
                             const VocabLayout& layout, const DecodeConfig& cfg) {
  cfg.validate();
  if (model.config().vocab_size != layout.vocab_size)
    throw InvalidInput("generate_mask: model vocabulary does not match the codec");
  const PromptShape shape = inspect_prompt(prompt, layout);
  const size_t cells = static_cast<size_t>(shape.grid_h * shape.grid_w);
  if (prompt.size() + cells + 2 > static_cast<size_t>(model.config().max_seq_len))
    throw InvalidInput("generate_mask: document would exceed max_seq_len");

  BeamResult best = run_search(model, prompt, layout, shape, cfg.beam_width);
  MaskPrediction pred;
  if (cfg.beam_width > 1) {
    BeamResult greedy = run_search(model, prompt, layout, shape, 1);
    if (greedy.logprob > best.logprob) {
      best = std::move(greedy);
      pred.greedy_fallback = true;
    }
  }
  pred.logprob = best.logprob;
  pred.patterns.assign(best.tokens.begin(), best.tokens.end());
  pred.mask = decode_mask(pred.patterns, shape.grid_h, shape.grid_w, layout.codec());
  pred.ids.assign(prompt.begin(), prompt.end());
  for (int32_t c : best.tokens) pred.ids.push_back(layout.mask_base + c);
  pred.ids.push_back(VocabLayout::kEov);
  pred.ids.push_back(VocabLayout::kEos);
  return pred;
}

template <typename T>
double score_mask_tokens(const Model<T>& model, std::span<const int32_t> prompt,
                         std::span<const int32_t> mask_ids, const VocabLayout& layout) {
  const PromptShape shape = inspect_prompt(prompt, layout);
  if (mask_ids.size() != static_cast<size_t>(shape.grid_h * shape.grid_w))
    throw InvalidInput("score_mask_tokens: wrong number of mask tokens");
  typename Model<T>::Decoder dec(model);
  auto h = dec.prefill(prompt, grid_aligned_positions(prompt));
  double total = 0.0;
  for (size_t c = 0; c < mask_ids.size(); ++c) {
    if (!layout.is_mask(mask_ids[c])) throw InvalidInput("score_mask_tokens: not a mask token");
    total += mask_logprobs(model, h, layout)[static_cast<size_t>(mask_ids[c] - layout.mask_base)];
    if (c + 1 < mask_ids.size()) h = dec.step(mask_ids[c], shape.first_position + static_cast<int>(c));
  }
  return total;
}

template MaskPrediction generate_mask<float>(const Model<float>&, std::span<const int32_t>,
                                             const VocabLayout&, const DecodeConfig&);
template MaskPrediction generate_mask<double>(const Model<double>&, std::span<const int32_t>,
                                              const VocabLayout&, const DecodeConfig&);
template double score_mask_tokens<float>(const Model<float>&, std::span<const int32_t>,
                                         std::span<const int32_t>, const VocabLayout&);
template double score_mask_tokens<double>(const Model<double>&, std::span<const int32_t>,
                                          std::span<const int32_t>, const VocabLayout&);

}  // namespace ntpseg
