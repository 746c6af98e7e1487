#include <doctest.h>

#include <cmath>

#include "ntpseg/gradcheck.hpp"
#include "ntpseg/het.hpp"
#include "ntpseg/objective.hpp"
#include "ntpseg/rng.hpp"
#include "oracles.hpp"

using namespace ntpseg;

TEST_SUITE("het") {
  TEST_CASE("record_epoch_errors examples") {
    HetMemory mem;
    const HetMemory::Prediction correct{"s", 4, 9, 9};
    mem.record_epoch_errors(0, std::span(&correct, 1));
    CHECK(mem.empty());
    const HetMemory::Prediction wrong{"s", 4, 7, 9};
    mem.record_epoch_errors(1, std::span(&wrong, 1));
    CHECK(mem.lookup("s", 4) == std::set<int32_t>{7});
    CHECK(mem.find("s", 4)->last_updated_epoch == 1);
    const HetMemory before = mem;
    mem.record_epoch_errors(2, std::span(&wrong, 1));
    CHECK(mem.lookup("s", 4) == before.lookup("s", 4));
    CHECK(mem.token_count() == 1);
    CHECK(mem.lookup("s", 5).empty());
    CHECK(mem.lookup("t", 4).empty());
  }

  TEST_CASE("memory only grows and never stores the target") {
    Rng rng(1);
    HetMemory mem;
    for (int epoch = 0; epoch < 20; ++epoch) {
      std::vector<HetMemory::Prediction> preds;
      for (int i = 0; i < 30; ++i) {
        preds.push_back({"s" + std::to_string(rng.below(3)), static_cast<int>(rng.below(5)),
                         static_cast<int32_t>(rng.below(6)), 2});
      }
      const HetMemory before = mem;
      mem.record_epoch_errors(epoch, preds);
      for (const auto& [key, entry] : before.table()) {
        const auto& now = mem.lookup(key.first, key.second);
        CHECK(std::includes(now.begin(), now.end(), entry.tokens.begin(), entry.tokens.end()));
      }
      for (const auto& [key, entry] : mem.table()) CHECK(entry.tokens.count(2) == 0);
    }
    CHECK(HetMemory::from_records(mem.records()) == mem);
  }

  TEST_CASE("error_degree") {
    const std::vector<double> logits{1.0, 3.0, 3.0};
    CHECK(error_degree<double>(logits, 1, 2) == 0.0);
    CHECK(error_degree<double>(logits, 0, 1) == -2.0);
    const std::vector<double> shifted{6.0, 8.0, 8.0};
    CHECK(error_degree<double>(shifted, 0, 1) == -2.0);
  }

  TEST_CASE("select_negatives examples") {
    // a=0, b=1, c=2, d=3
    const std::vector<int32_t> toks{0, 1, 2, 3};
    const std::vector<double> deg{3.0, 1.0, -0.5, -2.0};
    CHECK(select_negatives(toks, deg, 2) == std::vector<int32_t>{0, 3});
    const std::vector<int32_t> three{4, 8, 15};
    const std::vector<double> d3{0.1, 0.2, 0.3};
    CHECK(select_negatives(three, d3, 50) == three);
    const std::vector<int32_t> eq{5, 9, 11};
    const std::vector<double> deq{1.0, 1.0, 1.0};
    CHECK(select_negatives(eq, deq, 2) == std::vector<int32_t>{5, 9});
  }

  TEST_CASE("het_position_loss examples") {
    const std::vector<double> logits{2.0, 1.0, 0.0, 5.0};
    const std::vector<int32_t> negs{1, 2};
    const double v = het_position_loss<double>(logits, 0, negs, 1.0, {});
    CHECK(v == doctest::Approx(0.40761).epsilon(1e-5));
    CHECK(v == doctest::Approx(oracle::het_position(2.0, {1.0, 0.0})).epsilon(1e-12));
    CHECK(het_position_loss<double>(logits, 0, {}, 1.0, {}) == 0.0);
    CHECK(het_loss({}, 0) == 0.0);
    const std::vector<double> parts{0.4, 0.0, 0.2};
    CHECK(het_loss(parts, 3) == doctest::Approx(0.2));
  }

  TEST_CASE("het_position_loss is shift invariant, decreasing in the target logit, and has the right gradient") {
    Rng rng(2);
    for (int t = 0; t < 50; ++t) {
      std::vector<double> logits(8);
      for (auto& x : logits) x = rng.normal() * 3;
      const std::vector<int32_t> negs{1, 4, 6};
      const double base = het_position_loss<double>(logits, 2, negs, 1.0, {});
      CHECK(base >= 0.0);
      auto shifted = logits;
      for (auto& x : shifted) x += 17.0;
      CHECK(het_position_loss<double>(shifted, 2, negs, 1.0, {}) == doctest::Approx(base).epsilon(1e-10));
      auto up = logits;
      up[2] += 0.5;
      CHECK(het_position_loss<double>(up, 2, negs, 1.0, {}) < base);
      std::vector<double> g(8, 0.0);
      het_position_loss<double>(logits, 2, negs, 0.5, g);
      for (size_t i = 0; i < 8; ++i) {
        auto a = logits, b = logits;
        a[i] += 1e-5;
        b[i] -= 1e-5;
        const double num = 0.5 * (het_position_loss<double>(a, 2, negs, 1.0, {}) -
                                  het_position_loss<double>(b, 2, negs, 1.0, {})) / 2e-5;
        CHECK(g[i] == doctest::Approx(num).epsilon(1e-6).scale(1e-3));
      }
    }
  }

  TEST_CASE("selection matches the oracle on random instances") {
    Rng rng(3);
    for (int t = 0; t < 300; ++t) {
      const int n = static_cast<int>(rng.below(20));
      std::vector<int32_t> toks;
      std::vector<double> deg;
      std::vector<std::pair<int32_t, double>> items;
      std::set<int32_t> used;
      while (static_cast<int>(toks.size()) < n) {
        const auto id = static_cast<int32_t>(rng.below(100));
        if (!used.insert(id).second) continue;
        const double d = static_cast<double>(rng.below(5)) - 2.0;  // many ties
        toks.push_back(id);
        deg.push_back(d);
        items.push_back({id, d});
      }
      const int l = 2 * (1 + static_cast<int>(rng.below(6)));
      CHECK(select_negatives(toks, deg, l) == oracle::select(items, l));
    }
  }
}

TEST_SUITE("objective") {
  namespace {
  struct Fixture {
    GradcheckConfig gc;
    Model<double> model{gc.model};
    std::vector<MultimodalDocument> docs;
    Fixture() {
      model.init(1);
      Rng rng(2);
      for (double& p : model.params()) p += 0.1 * rng.normal();
      for (int d = 0; d < 3; ++d) {
        MultimodalDocument doc;
        doc.sample_id = "d" + std::to_string(d);
        for (int n = 0; n < 20; ++n) doc.ids.push_back(static_cast<int32_t>(rng.below(10)));
        doc.loss_mask.assign(20, 0);
        for (int n = 6; n < 19; ++n) doc.loss_mask[static_cast<size_t>(n)] = 1;
        docs.push_back(doc);
      }
    }
    BatchResult run(const ObjectiveOptions& o, std::span<double> grad = {}) {
      return batch_objective<double>(model, std::span<const MultimodalDocument>(docs), o, grad);
    }
  };
  }  // namespace

  TEST_CASE("reduction identities") {
    Fixture f;
    ObjectiveOptions o;
    o.loss.k = 3;
    o.loss.m = 3;
    HetMemory empty;
    o.memory = &empty;
    o.het_active = true;
    const BatchResult base = f.run(o);
    CHECK(base.parts.het == 0.0);  // empty memory

    // alpha = 1, gamma = 0: NTP equals summed cross-entropy (batch mean)
    ObjectiveOptions c = o;
    c.loss.alpha = 1.0;
    c.loss.gamma = 0.0;
    double ce = 0.0;
    for (const auto& d : f.docs) {
      const auto out = f.model.forward(d.ids, grid_aligned_positions(d.ids));
      for (size_t n = 0; n + 1 < d.ids.size(); ++n) {
        if (!d.loss_mask[n]) continue;
        std::vector<double> row(out.logits[0].row(static_cast<Eigen::Index>(n)).data(),
                                out.logits[0].row(static_cast<Eigen::Index>(n)).data() + out.logits[0].cols());
        ce -= oracle::log_softmax_at(row, static_cast<size_t>(d.ids[n + 1]));
      }
    }
    CHECK(f.run(c).parts.ntp == doctest::Approx(ce / 3.0).epsilon(1e-9));

    ObjectiveOptions k1 = o;
    k1.loss.k = 1;
    CHECK(f.run(k1).parts.nktp == 0.0);
    ObjectiveOptions m0 = o;
    m0.loss.m = 0;
    CHECK(f.run(m0).parts.tcl == 0.0);

    ObjectiveOptions plain = o;
    plain.loss.lambda1 = plain.loss.lambda2 = 0.0;
    plain.het_active = false;
    const BatchResult r = f.run(plain);
    CHECK(r.total == doctest::Approx(r.parts.ntp).epsilon(1e-12));
  }

  TEST_CASE("batch loss equals the mean of single-document losses") {
    Fixture f;
    ObjectiveOptions o;
    o.loss.k = 3;
    o.loss.m = 3;
    const BatchResult all = f.run(o);
    double ntp = 0, tcl = 0, nktp = 0;
    for (const auto& d : f.docs) {
      const BatchResult one = batch_objective<double>(f.model, std::span<const MultimodalDocument>(&d, 1), o, {});
      ntp += one.parts.ntp;
      tcl += one.parts.tcl;
      nktp += one.parts.nktp;
    }
    CHECK(all.parts.ntp == doctest::Approx(ntp / 3).epsilon(1e-12));
    CHECK(all.parts.tcl == doctest::Approx(tcl / 3).epsilon(1e-12));
    CHECK(all.parts.nktp == doctest::Approx(nktp / 3).epsilon(1e-12));
  }

  TEST_CASE("het uses the mean over error positions of the batch") {
    Fixture f;
    HetMemory mem;
    Rng rng(4);
    for (const auto& d : f.docs)
      for (int n = 6; n < 19; ++n)
        for (int i = 0; i < 3; ++i) mem.add(d.sample_id, n, static_cast<int32_t>(rng.below(32)), d.ids[static_cast<size_t>(n) + 1], 0);
    ObjectiveOptions o;
    o.loss.k = 3;
    o.loss.l = 4;
    o.memory = &mem;
    o.het_active = true;
    const BatchResult r = f.run(o);
    REQUIRE(r.het_errors > 0);
    // replay with the oracle
    double sum = 0.0;
    size_t errors = 0;
    for (const auto& d : f.docs) {
      const auto out = f.model.forward(d.ids, grid_aligned_positions(d.ids));
      for (int n = 0; n + 1 < static_cast<int>(d.ids.size()); ++n) {
        if (!d.loss_mask[static_cast<size_t>(n)]) continue;
        const auto row = out.logits[0].row(n);
        Eigen::Index arg;
        row.maxCoeff(&arg);
        const int32_t tgt = d.ids[static_cast<size_t>(n) + 1];
        if (arg == tgt) continue;
        ++errors;
        std::vector<std::pair<int32_t, double>> items;
        for (int32_t tok : mem.lookup(d.sample_id, n)) items.push_back({tok, row[tok] - row[tgt]});
        std::vector<double> negs;
        for (int32_t tok : oracle::select(items, 4)) negs.push_back(row[tok]);
        sum += oracle::het_position(row[tgt], negs);
      }
    }
    CHECK(r.het_errors == errors);
    CHECK(r.parts.het == doctest::Approx(sum / static_cast<double>(errors)).epsilon(1e-9));
    o.het_active = false;
    CHECK(f.run(o).parts.het == 0.0);
  }

  TEST_CASE("gradient and loss do not depend on the thread count") {
    Fixture f;
    f.model.config();
    ObjectiveOptions o;
    o.loss.k = 3;
    o.loss.m = 3;
    o.training = true;
    o.dropout_seed = 77;
    std::vector<double> g1(f.model.params().size()), g4(g1.size());
    o.threads = 1;
    const BatchResult a = f.run(o, g1);
    o.threads = 4;
    const BatchResult b = f.run(o, g4);
    CHECK(a.total == b.total);
    CHECK(g1 == g4);
  }

  TEST_CASE("combined gradient is the weighted sum of part gradients") {
    Fixture f;
    const size_t P = f.model.params().size();
    auto grad_of = [&](double l1, double l2, bool ntp) {
      ObjectiveOptions o;
      o.loss.k = 3;
      o.loss.m = 3;
      o.loss.lambda1 = l1;
      o.loss.lambda2 = l2;
      o.include_ntp = ntp;
      std::vector<double> g(P);
      f.run(o, g);
      return g;
    };
    const auto all = grad_of(0.5, 1.0, true);
    const auto ntp = grad_of(0.0, 0.0, true);
    const auto tcl = grad_of(1.0, 0.0, false);
    const auto nktp = grad_of(0.0, 1.0, false);
    double worst = 0;
    for (size_t i = 0; i < P; ++i)
      worst = std::max(worst, std::abs(all[i] - (ntp[i] + 0.5 * tcl[i] + nktp[i])));
    CHECK(worst < 1e-12);
  }

  TEST_CASE("gradcheck passes on the tiny configuration") {
    GradcheckConfig gc;
    gc.params_per_check = 60;  // the full 200-parameter run is an acceptance criterion
    for (const auto& r : run_gradcheck(gc)) {
      INFO(r.name << " worst " << r.worst_param << " rel err " << r.max_rel_err);
      CHECK(r.passed);
    }
  }
}
