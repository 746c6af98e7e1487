#include "ntpseg/objective.hpp"

#include <algorithm>
#include <cstdlib>
#include <map>
#include <optional>
#include <string>

#include "ntpseg/error.hpp"
#include "ntpseg/parallel.hpp"
#include "ntpseg/rng.hpp"

namespace ntpseg {

int resolve_threads(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("NTPSEG_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0 && v < 1024) return static_cast<int>(v);
  }
  return 1;
}

uint64_t document_dropout_seed(uint64_t step_seed, const std::string& sample_id) {
  return hash_combine(step_seed, hash_string(sample_id));
}

namespace {

template <typename T>
struct DocState {
  typename Model<T>::Cache cache;
  Matrix<T> hidden;
  std::vector<int> rows1;         // input positions with an NTP target
  std::vector<int32_t> targets1;  // ids[row + 1]
  Matrix<T> head1;                // hidden rows of rows1
  Matrix<T> logits1;              // rows1 x V
};

template <typename T>
Matrix<T> gather_rows(const Matrix<T>& m, std::span<const int> rows) {
  Matrix<T> out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = m.row(rows[r]);
  return out;
}

template <typename T>
void scatter_add_rows(Matrix<T>& dst, const Matrix<T>& src, std::span<const int> rows) {
  for (size_t r = 0; r < rows.size(); ++r) dst.row(rows[r]) += src.row(static_cast<Eigen::Index>(r));
}

template <typename T>
void forward_document(const Model<T>& model, const MultimodalDocument& doc,
                      const ObjectiveOptions& opts, bool keep_cache, DocState<T>& st) {
  if (doc.ids.size() < 2) throw InvalidInput("objective: document too short");
  if (doc.ids.size() > static_cast<size_t>(model.config().max_seq_len))
    throw InvalidInput("objective: document '" + doc.sample_id + "' exceeds max_seq_len");
  const auto positions = grid_aligned_positions(doc.ids);
  ForwardOptions fo;
  fo.training = opts.training;
  fo.dropout_seed = document_dropout_seed(opts.dropout_seed, doc.sample_id);
  st.hidden = model.forward_hidden(doc.ids, positions, fo, keep_cache ? &st.cache : nullptr);
  st.rows1 = target_rows(doc.loss_mask, 1);
  st.targets1.clear();
  for (int n : st.rows1) st.targets1.push_back(doc.ids[static_cast<size_t>(n) + 1]);
  st.head1 = gather_rows(st.hidden, st.rows1);
  st.logits1 = model.logits(st.head1);
}

struct DocParts {
  double ntp = 0, tcl = 0, nktp = 0, het = 0;
};

// Adds this document's share of the batch gradient into `grad`.
template <typename T>
DocParts backward_document(const Model<T>& model, const MultimodalDocument& doc,
                           const ObjectiveOptions& opts, DocState<T>& st,
                           std::span<const HetItem* const> het_items, double het_scale,
                           size_t batch_size, std::span<T> grad) {
  const LossConfig& cfg = opts.loss;
  const bool want_grad = !grad.empty();
  const T inv_b = T(1) / static_cast<T>(batch_size);
  const T alpha = static_cast<T>(cfg.alpha);
  const T gamma = static_cast<T>(cfg.gamma);
  DocParts parts;
  Matrix<T> d_hidden;
  if (want_grad) d_hidden.setZero(st.hidden.rows(), st.hidden.cols());

  // Head 1: NTP plus HET share the same logits.
  {
    Matrix<T> d_logits;
    const T w_ntp = opts.include_ntp ? inv_b : T(0);
    parts.ntp = static_cast<double>(
        focal_softmax_rows<T>(st.logits1, st.targets1, alpha, gamma, T(1), nullptr));
    if (want_grad) {
      focal_softmax_rows<T>(st.logits1, st.targets1, alpha, gamma, w_ntp, &d_logits);
    }
    if (!het_items.empty()) {
      std::map<int, Eigen::Index> row_of;
      for (size_t r = 0; r < st.rows1.size(); ++r) row_of[st.rows1[r]] = static_cast<Eigen::Index>(r);
      const T w = static_cast<T>(cfg.lambda_het * het_scale);
      for (const HetItem* item : het_items) {
        auto it = row_of.find(item->position);
        if (it == row_of.end()) throw InvalidInput("objective: HET position outside the loss mask");
        const Eigen::Index r = it->second;
        std::span<const T> row(st.logits1.row(r).data(), static_cast<size_t>(st.logits1.cols()));
        std::span<T> drow;
        if (want_grad) drow = std::span<T>(d_logits.row(r).data(), static_cast<size_t>(d_logits.cols()));
        parts.het += static_cast<double>(
            het_position_loss<T>(row, item->target, item->negatives, w, drow));
      }
    }
    if (want_grad && !st.rows1.empty()) {
      Matrix<T> d_head = model.backward_logits(st.head1, d_logits, grad);
      scatter_add_rows(d_hidden, d_head, st.rows1);
    }
  }

  // Token-level contrast on the head-1 hidden state.
  if (cfg.lambda1 != 0.0 && cfg.m > 0) {
    const auto emb = model.embedding();
    const TensorInfo& info = model.layout()[model.layout().embedding];
    std::optional<MatrixMap<T>> d_emb;
    if (want_grad) d_emb.emplace(grad.data() + info.offset, info.rows, info.cols);
    const T w = static_cast<T>(cfg.lambda1) * inv_b;
    Eigen::Matrix<T, 1, Eigen::Dynamic> dh(st.hidden.cols());
    double sum = 0.0;
    for (size_t r = 0; r < st.rows1.size(); ++r) {
      const size_t t = static_cast<size_t>(st.rows1[r]) + 1;
      const auto negs = tcl_negatives(doc.ids, t, cfg.m);
      if (negs.empty()) continue;
      dh.setZero();
      sum += static_cast<double>(tcl_position<T>(st.head1.row(static_cast<Eigen::Index>(r)), emb,
                                                 doc.ids[t], negs, alpha, gamma, w,
                                                 want_grad ? &dh : nullptr,
                                                 want_grad ? &*d_emb : nullptr));
      if (want_grad) d_hidden.row(st.rows1[r]) += dh;
    }
    parts.tcl = sum / static_cast<double>(w);
  }

  // Heads 2..k.
  if (cfg.lambda2 != 0.0 && cfg.k > 1) {
    const T w = static_cast<T>(cfg.lambda2) * inv_b / static_cast<T>(cfg.k - 1);
    double sum = 0.0;
    for (int j = 2; j <= cfg.k; ++j) {
      const auto rows = target_rows(doc.loss_mask, j);
      if (rows.empty()) continue;
      std::vector<int32_t> targets;
      targets.reserve(rows.size());
      for (int n : rows) targets.push_back(doc.ids[static_cast<size_t>(n + j)]);
      const Matrix<T> h = gather_rows(st.hidden, rows);
      const Matrix<T> hin = model.head_input(h, j);
      const Matrix<T> lg = model.logits(hin);
      Matrix<T> d_lg;
      sum += static_cast<double>(
          focal_softmax_rows<T>(lg, targets, alpha, gamma, w, want_grad ? &d_lg : nullptr));
      if (want_grad) {
        const Matrix<T> d_hin = model.backward_logits(hin, d_lg, grad);
        const Matrix<T> d_h = model.backward_head_input(h, d_hin, j, grad);
        scatter_add_rows(d_hidden, d_h, rows);
      }
    }
    // per-document value: mean over the k - 1 offsets of the summed focal terms
    parts.nktp = sum / static_cast<double>(w) / static_cast<double>(cfg.k - 1);
  }

  if (want_grad) model.backward_hidden(st.cache, d_hidden, grad);
  return parts;
}

}  // namespace

template <typename T>
BatchResult batch_objective(const Model<T>& model, std::span<const MultimodalDocument* const> docs,
                            const ObjectiveOptions& opts, std::span<T> grad) {
  const LossConfig& cfg = opts.loss;
  cfg.validate();
  if (cfg.k > model.config().k_heads)
    throw ConfigError("loss.k exceeds the number of model prediction heads");
  if (docs.empty()) throw InvalidInput("objective: empty batch");
  const bool want_grad = !grad.empty();
  if (want_grad && grad.size() != model.params().size())
    throw InvalidInput("objective: gradient buffer has the wrong size");
  const int threads = resolve_threads(opts.threads);
  const size_t B = docs.size();

  // Phase 1: forward every document. HET needs the batch-wide error count
  // before any gradient can be scaled.
  std::vector<DocState<T>> states(B);
  parallel_for(B, threads, [&](size_t i) { forward_document(model, *docs[i], opts, want_grad, states[i]); });

  BatchResult result;
  for (size_t i = 0; i < B; ++i) {
    const auto& st = states[i];
    result.masked_positions += st.rows1.size();
    for (size_t r = 0; r < st.rows1.size(); ++r) {
      Eigen::Index best = 0;
      st.logits1.row(static_cast<Eigen::Index>(r)).maxCoeff(&best);
      const int32_t pred = static_cast<int32_t>(best);
      if (pred == st.targets1[r]) ++result.correct_positions;
      if (opts.collect_predictions)
        result.predictions.push_back({docs[i]->sample_id, st.rows1[r], pred, st.targets1[r]});
    }
  }

  if (opts.het_active) {
    if (opts.frozen_plan) {
      result.plan = *opts.frozen_plan;
    } else {
      static const HetMemory kEmpty;
      const HetMemory& mem = opts.memory ? *opts.memory : kEmpty;
      for (size_t i = 0; i < B; ++i)
        plan_het_document<T>(states[i].logits1, states[i].rows1, docs[i]->ids, docs[i]->sample_id,
                             static_cast<int>(i), mem, cfg.l, result.plan);
    }
    result.het_errors = result.plan.error_positions;
  }
  std::vector<std::vector<const HetItem*>> items(B);
  for (const auto& item : result.plan.items) {
    if (item.doc < 0 || static_cast<size_t>(item.doc) >= B) throw InvalidInput("objective: bad HET plan");
    items[static_cast<size_t>(item.doc)].push_back(&item);
  }
  const double het_scale =
      result.het_errors > 0 ? 1.0 / static_cast<double>(result.het_errors) : 0.0;

  // Phase 2: losses and backward, one gradient buffer per document.
  std::vector<DocParts> parts(B);
  std::vector<std::vector<T>> grads(want_grad ? B : 0);
  parallel_for(B, threads, [&](size_t i) {
    std::span<T> g;
    if (want_grad) {
      grads[i].assign(grad.size(), T(0));
      g = grads[i];
    }
    parts[i] = backward_document(model, *docs[i], opts, states[i], items[i], het_scale, B, g);
    states[i] = DocState<T>{};  // release activations early
  });

  if (want_grad) {
    std::fill(grad.begin(), grad.end(), T(0));
    for (size_t i = 0; i < B; ++i) {
      for (size_t p = 0; p < grad.size(); ++p) grad[p] += grads[i][p];
    }
  }
  double het_sum = 0.0;
  for (size_t i = 0; i < B; ++i) {
    result.parts.ntp += parts[i].ntp;
    result.parts.tcl += parts[i].tcl;
    result.parts.nktp += parts[i].nktp;
    het_sum += parts[i].het;
  }
  result.parts.ntp /= static_cast<double>(B);
  result.parts.tcl /= static_cast<double>(B);
  result.parts.nktp /= static_cast<double>(B);
  result.parts.het_active = opts.het_active;
  result.parts.het = opts.het_active ? het_sum * het_scale : 0.0;
  result.total = combined_loss(result.parts, cfg);
  result.objective = opts.include_ntp ? result.total : result.total - result.parts.ntp;
  return result;
}

template <typename T>
BatchResult batch_objective(const Model<T>& model, std::span<const MultimodalDocument> docs,
                            const ObjectiveOptions& opts, std::span<T> grad) {
  std::vector<const MultimodalDocument*> ptrs;
  ptrs.reserve(docs.size());
  for (const auto& d : docs) ptrs.push_back(&d);
  return batch_objective<T>(model, std::span<const MultimodalDocument* const>(ptrs), opts, grad);
}

template BatchResult batch_objective<float>(const Model<float>&,
                                            std::span<const MultimodalDocument* const>,
                                            const ObjectiveOptions&, std::span<float>);
template BatchResult batch_objective<double>(const Model<double>&,
                                             std::span<const MultimodalDocument* const>,
                                             const ObjectiveOptions&, std::span<double>);
template BatchResult batch_objective<float>(const Model<float>&, std::span<const MultimodalDocument>,
                                            const ObjectiveOptions&, std::span<float>);
template BatchResult batch_objective<double>(const Model<double>&,
                                             std::span<const MultimodalDocument>,
                                             const ObjectiveOptions&, std::span<double>);

}  // namespace ntpseg
