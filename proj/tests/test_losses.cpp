#include <doctest.h>

#include <cmath>

#include "ntpseg/error.hpp"
#include "ntpseg/losses.hpp"
#include "ntpseg/rng.hpp"
#include "oracles.hpp"

using namespace ntpseg;

namespace {

Matrix<double> random_logits(Rng& rng, int rows, int cols, double scale = 2.0) {
  Matrix<double> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

std::vector<double> row_of(const Matrix<double>& m, Eigen::Index r) {
  return std::vector<double>(m.row(r).data(), m.row(r).data() + m.cols());
}

LossConfig ce() {
  LossConfig c;
  c.alpha = 1.0;
  c.gamma = 0.0;
  return c;
}

}  // namespace

TEST_SUITE("losses") {
  TEST_CASE("focal_nll examples") {
    CHECK(focal_nll(0.5, 1.0, 0.0) == doctest::Approx(0.693147).epsilon(1e-6));
    CHECK(focal_nll(1.0, 0.25, 2.0) == 0.0);
    CHECK(focal_nll(1.0, 1.0, 0.0) == 0.0);
    CHECK(focal_nll(0.5, 0.25, 2.0) == doctest::Approx(0.043322).epsilon(1e-5));
    // p = 0 clamps instead of producing inf
    CHECK(std::isfinite(focal_nll(0.0, 1.0, 0.0)));
    CHECK(focal_nll(0.0, 1.0, 0.0) == doctest::Approx(-std::log(1e-9)));
  }

  TEST_CASE("focal reduces to cross-entropy and is monotone") {
    Rng rng(1);
    double prev = std::numeric_limits<double>::infinity();
    for (int i = 1; i <= 1000; ++i) {
      const double p = i / 1000.0;
      CHECK(std::abs(focal_nll(p, 1.0, 0.0) + std::log(p)) < 1e-12);
      const double f = focal_nll(p, 0.25, 2.0);
      CHECK(f == doctest::Approx(oracle::focal(p, 0.25, 2.0)).epsilon(1e-12));
      if (i < 1000) CHECK(f < prev);
      prev = f;
    }
  }

  TEST_CASE("focal_from_logp value and derivative") {
    for (double logp : {-5.0, -1.0, -0.3, -1e-4}) {
      for (double gamma : {0.0, 0.5, 2.0}) {
        double d = 0;
        const double v = focal_from_logp<double>(logp, 0.25, gamma, &d);
        CHECK(v == doctest::Approx(oracle::focal(std::exp(logp), 0.25, gamma)).epsilon(1e-10));
        const double h = 1e-6;
        const double num = (focal_from_logp<double>(logp + h, 0.25, gamma, nullptr) -
                            focal_from_logp<double>(logp - h, 0.25, gamma, nullptr)) / (2 * h);
        CHECK(d == doctest::Approx(num).epsilon(1e-6));
      }
    }
  }

  TEST_CASE("config validation") {
    LossConfig c;
    CHECK_NOTHROW(c.validate());
    c.alpha = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.l = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.gamma = -1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.k = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    CHECK(c.resolved_het_start(40) == 24);
    CHECK(c.resolved_het_start(300) == 180);
    c.het_start_epoch = 5;
    CHECK(c.resolved_het_start(40) == 5);
  }

  TEST_CASE("target_rows") {
    const std::vector<uint8_t> mask{0, 1, 1, 0, 1, 0};
    CHECK(target_rows(mask, 1) == std::vector<int>{1, 2, 4});
    // offset j: rows n with mask[n + j - 1]
    CHECK(target_rows(mask, 2) == std::vector<int>{0, 1, 3});
    CHECK(target_rows(mask, 3) == std::vector<int>{0, 2});
  }

  TEST_CASE("ntp_loss examples") {
    const int V = 17;
    Matrix<double> uniform = Matrix<double>::Zero(3, V);
    const std::vector<int32_t> ids{1, 5, 9};
    const std::vector<uint8_t> one{0, 1, 0};
    CHECK(ntp_loss<double>(uniform, ids, one, ce()) == doctest::Approx(std::log(double(V))));

    Matrix<double> sat = Matrix<double>::Zero(3, V);
    sat(1, 9) = 50.0;
    CHECK(ntp_loss<double>(sat, ids, one, ce()) < 1e-15);

    bool empty = false;
    const std::vector<uint8_t> none{0, 0, 0};
    CHECK(ntp_loss<double>(uniform, ids, none, ce(), nullptr, &empty) == 0.0);
    CHECK(empty);
  }

  TEST_CASE("ntp_loss against brute-force softmax + focal") {
    Rng rng(2);
    for (int t = 0; t < 20; ++t) {
      const int L = 6, V = 11;
      const Matrix<double> logits = random_logits(rng, L, V);
      std::vector<int32_t> ids;
      for (int i = 0; i < L; ++i) ids.push_back(static_cast<int32_t>(rng.below(V)));
      std::vector<uint8_t> mask(L, 0);
      for (int i = 0; i < L - 1; ++i) mask[static_cast<size_t>(i)] = rng.below(2);
      LossConfig cfg;
      double expect = 0;
      for (int n = 0; n < L - 1; ++n) {
        if (!mask[static_cast<size_t>(n)]) continue;
        const double p = std::exp(oracle::log_softmax_at(row_of(logits, n), static_cast<size_t>(ids[n + 1])));
        expect += oracle::focal(p, cfg.alpha, cfg.gamma);
      }
      CHECK(ntp_loss<double>(logits, ids, mask, cfg) == doctest::Approx(expect).epsilon(1e-10));
    }
  }

  TEST_CASE("ntp_loss gradient matches finite differences") {
    Rng rng(3);
    const int L = 5, V = 7;
    Matrix<double> logits = random_logits(rng, L, V);
    const std::vector<int32_t> ids{0, 3, 6, 2, 2};
    const std::vector<uint8_t> mask{1, 1, 0, 1, 0};
    LossConfig cfg;
    Matrix<double> grad;
    ntp_loss<double>(logits, ids, mask, cfg, &grad);
    for (Eigen::Index i = 0; i < logits.size(); ++i) {
      const double s = logits.data()[i], h = 1e-6;
      logits.data()[i] = s + h;
      const double up = ntp_loss<double>(logits, ids, mask, cfg);
      logits.data()[i] = s - h;
      const double dn = ntp_loss<double>(logits, ids, mask, cfg);
      logits.data()[i] = s;
      CHECK(grad.data()[i] == doctest::Approx((up - dn) / (2 * h)).epsilon(1e-6).scale(1e-8));
    }
  }

  TEST_CASE("nktp examples") {
    const int V = 13;
    const std::vector<int32_t> ids{1, 2, 3, 4};
    const std::vector<uint8_t> mask{0, 0, 1, 0};  // only target ids[3]
    LossConfig k1 = ce(), k2 = ce();
    k1.k = 1;
    k2.k = 2;
    std::vector<Matrix<double>> none;
    CHECK(nktp_loss<double>(std::span<const Matrix<double>>(none), ids, mask, k1) == 0.0);
    std::vector<Matrix<double>> one{Matrix<double>::Zero(4, V)};
    // head 2 at row 1 predicts ids[3]
    CHECK(nktp_loss<double>(std::span<const Matrix<double>>(one), ids, mask, k2) ==
          doctest::Approx(std::log(double(V))));
  }

  TEST_CASE("nktp against the brute-force double sum") {
    Rng rng(4);
    for (int t = 0; t < 20; ++t) {
      const int L = 9, V = 6, k = 3 + static_cast<int>(rng.below(3));
      std::vector<Matrix<double>> heads;
      for (int j = 2; j <= k; ++j) heads.push_back(random_logits(rng, L, V));
      std::vector<int32_t> ids;
      for (int i = 0; i < L; ++i) ids.push_back(static_cast<int32_t>(rng.below(V)));
      std::vector<uint8_t> mask(L, 0);
      for (int i = 2; i < L - 1; ++i) mask[static_cast<size_t>(i)] = rng.below(2);
      LossConfig cfg;
      cfg.k = k;
      double expect = 0;
      for (int j = 2; j <= k; ++j) {
        for (int n = 0; n + j <= L - 1; ++n) {
          if (!mask[static_cast<size_t>(n + j - 1)]) continue;
          const auto& lg = heads[static_cast<size_t>(j - 2)];
          const double p = std::exp(oracle::log_softmax_at(row_of(lg, n), static_cast<size_t>(ids[static_cast<size_t>(n + j)])));
          expect += oracle::focal(p, cfg.alpha, cfg.gamma);
        }
      }
      expect /= (k - 1);
      CHECK(nktp_loss<double>(std::span<const Matrix<double>>(heads), ids, mask, cfg) ==
            doctest::Approx(expect).epsilon(1e-10));
    }
  }

  TEST_CASE("tcl negatives") {
    const std::vector<int32_t> ids{4, 4, 7, 1, 7, 9};
    CHECK(tcl_negatives(ids, 5, 3) == std::vector<int32_t>{1, 7});
    CHECK(tcl_negatives(ids, 5, 5) == std::vector<int32_t>{1, 4, 7});
    CHECK(tcl_negatives(ids, 4, 2) == std::vector<int32_t>{1});  // 7 is the target
    CHECK(tcl_negatives(ids, 1, 3).empty());                     // only 4 precedes, equal to target
    CHECK(tcl_negatives(ids, 5, 0).empty());
    Rng rng(5);
    for (int t = 0; t < 500; ++t) {
      std::vector<int32_t> r;
      for (int i = 0; i < 12; ++i) r.push_back(static_cast<int32_t>(rng.below(4)));
      const size_t at = 1 + rng.below(11);
      for (int32_t n : tcl_negatives(r, at, static_cast<int>(rng.below(7)))) CHECK(n != r[at]);
    }
  }

  TEST_CASE("tcl_loss examples") {
    // dim 1, h = 1; E = [2, 1, 0] gives margins -1 and -2 for targets 0
    Matrix<double> emb(3, 1);
    emb << 2.0, 1.0, 0.0;
    const ConstMatrixMap<double> E(emb.data(), 3, 1);
    Matrix<double> hidden = Matrix<double>::Ones(3, 1);
    LossConfig cfg = ce();
    cfg.m = 2;
    const std::vector<uint8_t> mask{0, 1, 0};

    const std::vector<int32_t> two_negs{1, 2, 0};
    const double p = 1.0 / (1.0 + std::exp(-1.0) + std::exp(-2.0));
    CHECK(p == doctest::Approx(0.66524).epsilon(1e-5));
    CHECK(tcl_loss<double>(hidden, E, two_negs, mask, cfg) == doctest::Approx(0.40761).epsilon(1e-5));
    CHECK(tcl_loss<double>(hidden, E, two_negs, mask, cfg) == doctest::Approx(-std::log(p)).epsilon(1e-12));

    // all predecessors equal to the target: empty negative set
    const std::vector<int32_t> same{0, 0, 0};
    CHECK(tcl_loss<double>(hidden, E, same, mask, cfg) == 0.0);

    // zero margin: p = 0.5
    Matrix<double> emb2(2, 1);
    emb2 << 1.0, 1.0;
    const ConstMatrixMap<double> E2(emb2.data(), 2, 1);
    const std::vector<int32_t> tie{1, 1, 0};
    CHECK(tcl_loss<double>(hidden, E2, tie, mask, cfg) == doctest::Approx(0.693147).epsilon(1e-6));

    cfg.m = 0;
    CHECK(tcl_loss<double>(hidden, E, two_negs, mask, cfg) == 0.0);
  }

  TEST_CASE("tcl_loss against brute force on random cases") {
    Rng rng(6);
    for (int t = 0; t < 20; ++t) {
      const int L = 10, V = 6, d = 4;
      const Matrix<double> hidden = random_logits(rng, L, d, 1.0);
      Matrix<double> emb = random_logits(rng, V, d, 1.0);
      const ConstMatrixMap<double> E(emb.data(), V, d);
      std::vector<int32_t> ids;
      for (int i = 0; i < L; ++i) ids.push_back(static_cast<int32_t>(rng.below(V)));
      std::vector<uint8_t> mask(L, 0);
      for (int i = 0; i < L - 1; ++i) mask[static_cast<size_t>(i)] = rng.below(2);
      LossConfig cfg;
      cfg.m = 1 + static_cast<int>(rng.below(5));
      double expect = 0;
      for (int n = 0; n < L - 1; ++n) {
        if (!mask[static_cast<size_t>(n)]) continue;
        const int tgt = ids[static_cast<size_t>(n + 1)];
        std::set<int32_t> negs;
        for (int i = std::max(0, n + 1 - cfg.m); i <= n; ++i)
          if (ids[static_cast<size_t>(i)] != tgt) negs.insert(ids[static_cast<size_t>(i)]);
        const double pos = hidden.row(n).dot(emb.row(tgt));
        double s = 0;
        for (int32_t j : negs) s += std::exp(hidden.row(n).dot(emb.row(j)) - pos);
        expect += oracle::focal(1.0 / (1.0 + s), cfg.alpha, cfg.gamma);
      }
      CHECK(tcl_loss<double>(hidden, E, ids, mask, cfg) == doctest::Approx(expect).epsilon(1e-10));
    }
  }

  TEST_CASE("combined_loss") {
    LossConfig cfg;
    LossParts parts{1.0, 0.4, 0.2, 0.3, false};
    CHECK(combined_loss(parts, cfg) == doctest::Approx(1.4));
    parts.het_active = true;
    CHECK(combined_loss(parts, cfg) == doctest::Approx(1.7));
    cfg.lambda1 = cfg.lambda2 = 0;
    parts.het_active = false;
    CHECK(combined_loss(parts, cfg) == 1.0);
  }
}
