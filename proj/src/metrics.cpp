#include "ntpseg/metrics.hpp"

#include <cstdio>
#include <json.hpp>
#include <sstream>

#include "ntpseg/error.hpp"

namespace ntpseg {

ConfusionCounts confusion(const MaskGrid& pred, const MaskGrid& gt) {
  if (pred.height != gt.height || pred.width != gt.width || pred.bits.size() != gt.bits.size())
    throw InvalidInput("confusion: mask dimensions differ (" + std::to_string(pred.height) + "x" +
                       std::to_string(pred.width) + " vs " + std::to_string(gt.height) + "x" +
                       std::to_string(gt.width) + ")");
  ConfusionCounts c;
  for (size_t i = 0; i < pred.bits.size(); ++i) {
    const bool p = pred.bits[i] != 0;
    const bool g = gt.bits[i] != 0;
    c.tp += p && g;
    c.fp += p && !g;
    c.fn += !p && g;
  }
  return c;
}

double dice(const ConfusionCounts& c) {
  const uint64_t den = 2 * c.tp + c.fp + c.fn;
  return den == 0 ? 1.0 : static_cast<double>(2 * c.tp) / static_cast<double>(den);
}

double miou(const ConfusionCounts& c) {
  const uint64_t den = c.tp + c.fp + c.fn;
  return den == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(den);
}

void EvalReport::aggregate() {
  macro_dice = macro_miou = 0.0;
  failures = 0;
  ConfusionCounts total;
  for (const auto& im : images) {
    macro_dice += im.dice;
    macro_miou += im.miou;
    total += im.counts;
    failures += !im.error.empty();
  }
  if (!images.empty()) {
    macro_dice /= static_cast<double>(images.size());
    macro_miou /= static_cast<double>(images.size());
  }
  micro_dice = dice(total);
  micro_miou = miou(total);
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["split"] = split;
  j["count"] = images.size();
  j["failures"] = failures;
  j["macro_dice"] = macro_dice;
  j["macro_miou"] = macro_miou;
  j["micro_dice"] = micro_dice;
  j["micro_miou"] = micro_miou;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& im : images) {
    nlohmann::ordered_json r;
    r["sample_id"] = im.sample_id;
    r["dice"] = im.dice;
    r["miou"] = im.miou;
    r["tp"] = im.counts.tp;
    r["fp"] = im.counts.fp;
    r["fn"] = im.counts.fn;
    r["logprob"] = im.logprob;
    if (!im.error.empty()) r["error"] = im.error;
    rows.push_back(std::move(r));
  }
  j["images"] = std::move(rows);
  return j.dump(2);
}

std::string EvalReport::to_table() const {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "%-24s %8s %8s\n", "sample", "dice", "miou");
  out << line;
  for (const auto& im : images) {
    std::snprintf(line, sizeof line, "%-24s %8.4f %8.4f%s\n", im.sample_id.c_str(), im.dice,
                  im.miou, im.error.empty() ? "" : "  (failed)");
    out << line;
  }
  std::snprintf(line, sizeof line, "%-24s %8.4f %8.4f\n", "macro", macro_dice, macro_miou);
  out << line;
  std::snprintf(line, sizeof line, "%-24s %8.4f %8.4f\n", "micro", micro_dice, micro_miou);
  out << line;
  return out.str();
}

}  // namespace ntpseg
