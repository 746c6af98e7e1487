#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ntpseg/model.hpp"

namespace ntpseg {

// Tokens the NTP head has wrongly predicted at a given (sample, input
// position) in earlier epochs. The position is the input index n whose
// target is ids[n + 1].
class HetMemory {
 public:
  using Key = std::pair<std::string, int>;
  struct Entry {
    std::set<int32_t> tokens;
    int last_updated_epoch = -1;
    bool operator==(const Entry&) const = default;
  };

  struct Prediction {
    std::string sample_id;
    int position = 0;
    int32_t predicted = 0;
    int32_t target = 0;
  };

  // Adds every wrong prediction of the finished epoch. Correct predictions
  // leave the memory untouched.
  void record_epoch_errors(int epoch, std::span<const Prediction> predictions);
  void add(const std::string& sample_id, int position, int32_t token, int32_t target, int epoch);

  // Empty set when nothing was recorded.
  const std::set<int32_t>& lookup(const std::string& sample_id, int position) const;
  const Entry* find(const std::string& sample_id, int position) const;

  size_t size() const { return table_.size(); }
  size_t token_count() const;
  bool empty() const { return table_.empty(); }
  const std::map<Key, Entry>& table() const { return table_; }

  struct Record {
    std::string sample_id;
    int position = 0;
    std::vector<int32_t> tokens;
    int last_updated_epoch = -1;
  };
  // Sorted by (sample_id, position); tokens ascending.
  std::vector<Record> records() const;
  static HetMemory from_records(std::span<const Record> records);

  bool operator==(const HetMemory&) const = default;

 private:
  std::map<Key, Entry> table_;
};

// logit(token) - logit(target).
template <typename T>
T error_degree(std::span<const T> logits, int32_t token, int32_t target);

// At most l tokens: all when the set is small enough, otherwise the l/2 with
// the highest degree plus the l/2 lowest of the rest. Ties go to the smaller
// id. `degrees[i]` belongs to `tokens[i]`. Result is ascending.
std::vector<int32_t> select_negatives(std::span<const int32_t> tokens,
                                      std::span<const double> degrees, int l);

// -log(e^gt / (e^gt + sum_j e^{logit_j})) for one position (unweighted). Adds
// the gradient scaled by `weight` into `d_logits` unless it is empty.
template <typename T>
T het_position_loss(std::span<const T> logits, int32_t target, std::span<const int32_t> negatives,
                    T weight, std::span<T> d_logits);

// One scored error position of a batch.
struct HetItem {
  int doc = 0;       // index into the batch
  int position = 0;  // input position
  int32_t target = 0;
  std::vector<int32_t> negatives;  // already selected
};

// Error positions of a batch paired with their selected negatives. Built
// once per step from the current head-1 logits and the memory snapshot.
struct HetPlan {
  std::vector<HetItem> items;
  size_t error_positions = 0;  // denominator of the batch mean
};

// Error positions of one document: masked input positions whose greedy
// head-1 prediction differs from the target. `logits_rows` holds the head-1
// logits of `rows` in order.
template <typename T>
void plan_het_document(const Matrix<T>& logits_rows, std::span<const int> rows,
                       std::span<const int32_t> ids, const std::string& sample_id, int doc,
                       const HetMemory& memory, int l, HetPlan& plan);

// Batch loss: mean of the per-position losses over all error positions (those
// without stored tokens contribute 0). 0 when there are no errors.
double het_loss(std::span<const double> position_losses, size_t error_positions);

}  // namespace ntpseg
