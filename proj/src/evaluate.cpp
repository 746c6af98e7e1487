#include "ntpseg/evaluate.hpp"

#include "ntpseg/error.hpp"
#include "ntpseg/parallel.hpp"

namespace ntpseg {

EvalReport evaluate(const Model<float>& model, std::span<const LoadedSample> samples,
                    const VocabLayout& layout, const DecodeConfig& decode, int threads,
                    const std::string& split) {
  EvalReport report;
  report.split = split;
  report.images.resize(samples.size());
  parallel_for(samples.size(), resolve_threads(threads), [&](size_t i) {
    const LoadedSample& s = samples[i];
    ImageScore& score = report.images[i];
    score.sample_id = s.record.sample_id;
    try {
      const std::vector<int32_t> prompt(s.doc.ids.begin(),
                                        s.doc.ids.begin() + static_cast<std::ptrdiff_t>(s.doc.prompt_length()));
      const MaskPrediction pred = generate_mask(model, prompt, layout, decode);
      score.counts = confusion(pred.mask, s.mask);
      score.dice = dice(score.counts);
      score.miou = miou(score.counts);
      score.logprob = pred.logprob;
    } catch (const std::exception& e) {
      score.counts = {};
      score.dice = score.miou = 0.0;
      score.error = e.what();
    }
  });
  report.aggregate();
  return report;
}

}  // namespace ntpseg
