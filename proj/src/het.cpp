#include "ntpseg/het.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ntpseg/error.hpp"

namespace ntpseg {

void HetMemory::add(const std::string& sample_id, int position, int32_t token, int32_t target,
                    int epoch) {
  if (token == target) return;
  Entry& e = table_[{sample_id, position}];
  e.tokens.insert(token);
  e.last_updated_epoch = std::max(e.last_updated_epoch, epoch);
}

void HetMemory::record_epoch_errors(int epoch, std::span<const Prediction> predictions) {
  for (const auto& p : predictions) add(p.sample_id, p.position, p.predicted, p.target, epoch);
}

const std::set<int32_t>& HetMemory::lookup(const std::string& sample_id, int position) const {
  static const std::set<int32_t> kEmpty;
  const Entry* e = find(sample_id, position);
  return e ? e->tokens : kEmpty;
}

const HetMemory::Entry* HetMemory::find(const std::string& sample_id, int position) const {
  auto it = table_.find({sample_id, position});
  return it == table_.end() ? nullptr : &it->second;
}

size_t HetMemory::token_count() const {
  size_t n = 0;
  for (const auto& [key, e] : table_) n += e.tokens.size();
  return n;
}

std::vector<HetMemory::Record> HetMemory::records() const {
  std::vector<Record> out;
  out.reserve(table_.size());
  for (const auto& [key, e] : table_)
    out.push_back({key.first, key.second, {e.tokens.begin(), e.tokens.end()}, e.last_updated_epoch});
  return out;
}

HetMemory HetMemory::from_records(std::span<const Record> records) {
  HetMemory m;
  for (const auto& r : records) {
    if (r.position < 0) throw LoadError("het memory: negative position");
    Entry& e = m.table_[{r.sample_id, r.position}];
    e.tokens.insert(r.tokens.begin(), r.tokens.end());
    e.last_updated_epoch = std::max(e.last_updated_epoch, r.last_updated_epoch);
  }
  return m;
}

template <typename T>
T error_degree(std::span<const T> logits, int32_t token, int32_t target) {
  return logits[static_cast<size_t>(token)] - logits[static_cast<size_t>(target)];
}

template float error_degree<float>(std::span<const float>, int32_t, int32_t);
template double error_degree<double>(std::span<const double>, int32_t, int32_t);

std::vector<int32_t> select_negatives(std::span<const int32_t> tokens,
                                      std::span<const double> degrees, int l) {
  if (tokens.size() != degrees.size()) throw InvalidInput("select_negatives: size mismatch");
  if (l < 2 || l % 2 != 0) throw InvalidInput("select_negatives: l must be even and >= 2");
  std::vector<int32_t> out;
  if (tokens.size() <= static_cast<size_t>(l)) {
    out.assign(tokens.begin(), tokens.end());
  } else {
    std::vector<size_t> idx(tokens.size());
    std::iota(idx.begin(), idx.end(), size_t{0});
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
      if (degrees[a] != degrees[b]) return degrees[a] > degrees[b];
      return tokens[a] < tokens[b];
    });
    const size_t half = static_cast<size_t>(l / 2);
    for (size_t i = 0; i < half; ++i) out.push_back(tokens[idx[i]]);
    std::vector<size_t> rest(idx.begin() + static_cast<std::ptrdiff_t>(half), idx.end());
    std::sort(rest.begin(), rest.end(), [&](size_t a, size_t b) {
      if (degrees[a] != degrees[b]) return degrees[a] < degrees[b];
      return tokens[a] < tokens[b];
    });
    for (size_t i = 0; i < half; ++i) out.push_back(tokens[rest[i]]);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

template <typename T>
T het_position_loss(std::span<const T> logits, int32_t target, std::span<const int32_t> negatives,
                    T weight, std::span<T> d_logits) {
  if (negatives.empty()) return T(0);
  const T gt = logits[static_cast<size_t>(target)];
  T mx = gt;
  for (int32_t j : negatives) mx = std::max(mx, logits[static_cast<size_t>(j)]);
  T z = std::exp(gt - mx);
  for (int32_t j : negatives) z += std::exp(logits[static_cast<size_t>(j)] - mx);
  const T loss = mx + std::log(z) - gt;
  if (!d_logits.empty()) {
    d_logits[static_cast<size_t>(target)] += weight * (std::exp(gt - mx) / z - T(1));
    for (int32_t j : negatives)
      d_logits[static_cast<size_t>(j)] += weight * std::exp(logits[static_cast<size_t>(j)] - mx) / z;
  }
  return loss;
}

template float het_position_loss<float>(std::span<const float>, int32_t, std::span<const int32_t>,
                                        float, std::span<float>);
template double het_position_loss<double>(std::span<const double>, int32_t,
                                          std::span<const int32_t>, double, std::span<double>);

template <typename T>
void plan_het_document(const Matrix<T>& logits_rows, std::span<const int> rows,
                       std::span<const int32_t> ids, const std::string& sample_id, int doc,
                       const HetMemory& memory, int l, HetPlan& plan) {
  if (static_cast<size_t>(logits_rows.rows()) != rows.size())
    throw InvalidInput("plan_het_document: row count mismatch");
  for (size_t r = 0; r < rows.size(); ++r) {
    const int n = rows[r];
    const int32_t target = ids[static_cast<size_t>(n) + 1];
    Eigen::Index best = 0;
    logits_rows.row(static_cast<Eigen::Index>(r)).maxCoeff(&best);
    if (best == target) continue;
    ++plan.error_positions;
    const auto& stored = memory.lookup(sample_id, n);
    if (stored.empty()) continue;
    std::vector<int32_t> tokens;
    std::vector<double> degrees;
    const std::span<const T> row(logits_rows.row(static_cast<Eigen::Index>(r)).data(),
                                 static_cast<size_t>(logits_rows.cols()));
    for (int32_t t : stored) {
      if (t == target) continue;
      tokens.push_back(t);
      degrees.push_back(static_cast<double>(error_degree<T>(row, t, target)));
    }
    if (tokens.empty()) continue;
    plan.items.push_back({doc, n, target, select_negatives(tokens, degrees, l)});
  }
}

template void plan_het_document<float>(const Matrix<float>&, std::span<const int>,
                                       std::span<const int32_t>, const std::string&, int,
                                       const HetMemory&, int, HetPlan&);
template void plan_het_document<double>(const Matrix<double>&, std::span<const int>,
                                        std::span<const int32_t>, const std::string&, int,
                                        const HetMemory&, int, HetPlan&);

double het_loss(std::span<const double> position_losses, size_t error_positions) {
  if (error_positions == 0) return 0.0;
  double s = 0.0;
  for (double v : position_losses) s += v;
  return s / static_cast<double>(error_positions);
}

}  // namespace ntpseg
