#include "ntpseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ntpseg/het.hpp"
#include "ntpseg/objective.hpp"
#include "ntpseg/rng.hpp"

namespace ntpseg {

namespace {

std::vector<MultimodalDocument> random_documents(const GradcheckConfig& cfg, Rng& rng) {
  std::vector<MultimodalDocument> docs;
  const int L = cfg.seq_len;
  // A narrow id range makes repeated tokens (TCL negatives) common.
  const int range = std::min(cfg.model.vocab_size, 12);
  for (int d = 0; d < cfg.documents; ++d) {
    MultimodalDocument doc;
    doc.sample_id = "g" + std::to_string(d);
    for (int n = 0; n < L; ++n) doc.ids.push_back(static_cast<int32_t>(rng.below(static_cast<uint64_t>(range))));
    doc.loss_mask.assign(static_cast<size_t>(L), 0);
    for (int n = L / 3; n <= L - 2; ++n) doc.loss_mask[static_cast<size_t>(n)] = 1;
    docs.push_back(std::move(doc));
  }
  return docs;
}

HetMemory random_memory(const GradcheckConfig& cfg, const std::vector<MultimodalDocument>& docs,
                        Rng& rng) {
  HetMemory mem;
  for (const auto& doc : docs) {
    for (int n : target_rows(doc.loss_mask, 1)) {
      const int32_t target = doc.ids[static_cast<size_t>(n) + 1];
      const int count = static_cast<int>(rng.below(8));  // some positions stay empty
      for (int i = 0; i < count; ++i) {
        const int32_t t = static_cast<int32_t>(rng.below(static_cast<uint64_t>(cfg.model.vocab_size)));
        mem.add(doc.sample_id, n, t, target, 0);
      }
    }
  }
  return mem;
}

}  // namespace

std::vector<GradcheckResult> run_gradcheck(const GradcheckConfig& cfg) {
  Rng rng(cfg.seed);
  Model<double> model(cfg.model);
  model.init(cfg.seed);
  // Move away from the symmetric initialisation (unit gains, identity
  // adapters) so every parameter has a generic gradient.
  for (double& p : model.params()) p += 0.1 * rng.normal();
  const auto docs = random_documents(cfg, rng);
  const HetMemory memory = random_memory(cfg, docs, rng);

  LossConfig base = cfg.loss;
  base.k = cfg.model.k_heads;
  base.m = cfg.m;
  base.l = cfg.l;

  struct Case {
    const char* name;
    double lambda1, lambda2, lambda_het;
    bool het, include_ntp;
  };
  const Case cases[] = {
      {"L_ntp", 0.0, 0.0, 0.0, false, true},
      {"L_tcl", 1.0, 0.0, 0.0, false, false},
      {"L_nktp", 0.0, 1.0, 0.0, false, false},
      {"L_het", 0.0, 0.0, 1.0, true, false},
      {"combined", base.lambda1, base.lambda2, base.lambda_het, true, true},
  };

  std::vector<GradcheckResult> results;
  const size_t P = model.params().size();
  for (const Case& c : cases) {
    ObjectiveOptions opts;
    opts.loss = base;
    opts.loss.lambda1 = c.lambda1;
    opts.loss.lambda2 = c.lambda2;
    opts.loss.lambda_het = c.lambda_het;
    opts.het_active = c.het;
    opts.memory = &memory;
    opts.include_ntp = c.include_ntp;
    HetPlan plan;
    if (c.het) {
      plan = batch_objective<double>(model, std::span<const MultimodalDocument>(docs), opts, {}).plan;
      opts.frozen_plan = &plan;
    }
    auto f = [&]() {
      return batch_objective<double>(model, std::span<const MultimodalDocument>(docs), opts, {}).objective;
    };
    std::vector<double> grad(P);
    batch_objective<double>(model, std::span<const MultimodalDocument>(docs), opts, grad);

    std::vector<size_t> idx(P);
    std::iota(idx.begin(), idx.end(), size_t{0});
    const size_t n = std::min(P, static_cast<size_t>(cfg.params_per_check));
    for (size_t i = 0; i < n; ++i) std::swap(idx[i], idx[i + rng.below(P - i)]);

    GradcheckResult r;
    r.name = c.name;
    r.checked = n;
    for (size_t i = 0; i < n; ++i) {
      const size_t p = idx[i];
      double& theta = model.params()[p];
      const double saved = theta;
      auto central = [&](double h) {
        theta = saved + h;
        const double up = f();
        theta = saved - h;
        const double down = f();
        theta = saved;
        return (up - down) / (2.0 * h);
      };
      const double d1 = central(cfg.step);
      const double d2 = central(cfg.step / 2.0);
      const double numeric = (4.0 * d2 - d1) / 3.0;
      const double analytic = grad[p];
      const double rel = std::abs(analytic - numeric) /
                         std::max({std::abs(analytic), std::abs(numeric), cfg.abs_floor});
      if (rel > r.max_rel_err || r.worst_param.empty()) {
        r.max_rel_err = std::max(r.max_rel_err, rel);
        // name the tensor holding the worst entry
        for (const TensorInfo& t : model.layout().tensors()) {
          if (p >= t.offset && p < t.offset + t.size()) {
            r.worst_param = t.name + "[" + std::to_string(p - t.offset) + "]";
            break;
          }
        }
      }
    }
    r.passed = r.max_rel_err < cfg.tolerance;
    results.push_back(r);
  }
  return results;
}

}  // namespace ntpseg
