#include "ntpseg/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <json.hpp>
#include <ostream>
#include <sstream>

#include "ntpseg/error.hpp"
#include "ntpseg/evaluate.hpp"

namespace ntpseg {

void disable_tcl(RunConfig& cfg) { cfg.loss.lambda1 = 0.0; }
void disable_nktp(RunConfig& cfg) { cfg.loss.k = 1; }
void disable_het(RunConfig& cfg) { cfg.loss.het_start_epoch = LossConfig::kHetNever; }

RunConfig ablation_variant(const RunConfig& base, int row) {
  if (row < 0 || row > 3) throw InvalidInput("ablation row must be 0..3");
  RunConfig c = base;
  if (row < 1) disable_tcl(c);
  if (row < 2) disable_nktp(c);
  if (row < 3) disable_het(c);
  c.finalize();
  return c;
}

const char* ablation_row_name(int row) {
  static const char* names[] = {"baseline", "+TCL", "+TCL+NkTP", "+TCL+NkTP+HET"};
  return names[row];
}

std::vector<MultimodalDocument> documents_of(std::span<const LoadedSample> samples) {
  std::vector<MultimodalDocument> docs;
  docs.reserve(samples.size());
  for (const auto& s : samples) docs.push_back(s.doc);
  return docs;
}

TrainState train_model(const RunConfig& cfg, std::span<const LoadedSample> train,
                       const TrainHooks& hooks, TrainState* resume) {
  TrainState state = resume ? std::move(*resume) : Trainer::initial_state(cfg.model, cfg.train);
  Trainer trainer(std::move(state), cfg.loss, cfg.train, documents_of(train));
  trainer.set_log(hooks.log);
  while (!trainer.finished()) {
    const EpochReport rep = trainer.train_epoch();
    if (hooks.after_epoch && !hooks.after_epoch(trainer, rep)) break;
  }
  return std::move(trainer.state());
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<AblationRow> run_ablation(const RunConfig& base, std::span<const LoadedSample> train,
                                      std::span<const LoadedSample> test,
                                      std::span<const uint64_t> seeds, std::span<const int> rows,
                                      std::ostream* progress) {
  if (test.empty()) throw InvalidInput("ablation needs a non-empty test split");
  std::vector<int> which(rows.begin(), rows.end());
  if (which.empty()) which = {0, 1, 2, 3};
  std::vector<AblationRow> out;
  for (int row : which) {
    AblationRow r;
    r.name = ablation_row_name(row);
    std::vector<double> dices, mious;
    for (uint64_t seed : seeds) {
      RunConfig cfg = ablation_variant(base, row);
      cfg.train.seed = seed;
      const auto t0 = std::chrono::steady_clock::now();
      const TrainState st = train_model(cfg, train);
      const EvalReport rep = evaluate(st.model, test, cfg.vocab(), cfg.decode, cfg.train.threads, "test");
      r.runs.push_back({seed, rep.macro_dice, rep.macro_miou});
      dices.push_back(rep.macro_dice);
      mious.push_back(rep.macro_miou);
      if (progress) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        char line[200];
        std::snprintf(line, sizeof line, "[ablate] %-14s seed %llu  dice %.4f  miou %.4f  (%.0f s)\n",
                      r.name.c_str(), static_cast<unsigned long long>(seed), rep.macro_dice,
                      rep.macro_miou, secs);
        *progress << line << std::flush;
      }
    }
    r.median_dice = median(dices);
    r.median_miou = median(mious);
    out.push_back(std::move(r));
  }
  return out;
}

std::string ablation_table(std::span<const AblationRow> rows) {
  std::ostringstream out;
  char line[200];
  std::snprintf(line, sizeof line, "%-16s %12s %12s  %s\n", "variant", "median dice", "median miou",
                "per-seed dice");
  out << line;
  for (const auto& r : rows) {
    std::string per;
    for (const auto& c : r.runs) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%s%.4f", per.empty() ? "" : " ", c.dice);
      per += buf;
    }
    std::snprintf(line, sizeof line, "%-16s %12.4f %12.4f  %s\n", r.name.c_str(), r.median_dice,
                  r.median_miou, per.c_str());
    out << line;
  }
  return out.str();
}

std::string ablation_json(std::span<const AblationRow> rows) {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json row;
    row["variant"] = r.name;
    row["median_dice"] = r.median_dice;
    row["median_miou"] = r.median_miou;
    auto runs = nlohmann::ordered_json::array();
    for (const auto& c : r.runs) runs.push_back({{"seed", c.seed}, {"dice", c.dice}, {"miou", c.miou}});
    row["runs"] = std::move(runs);
    j.push_back(std::move(row));
  }
  return j.dump(2);
}

}  // namespace ntpseg
