#include <gtest/gtest.h>

#include <cmath>

#include "cat/causal.hpp"
#include "cat/gradcheck.hpp"

using namespace cat;

namespace {

// Interval [lo, hi) of mass p[i] under the ordered CDF.
std::pair<double, double> cell(const std::vector<double>& p, std::size_t i) {
  double lo = 0.0;
  for (std::size_t k = 0; k < i; ++k) lo += p[k];
  return {lo, lo + p[i]};
}

double overlap(std::pair<double, double> a, std::pair<double, double> b) {
  return std::max(0.0, std::min(a.second, b.second) - std::max(a.first, b.first));
}

// P(X | c, Z in set) by Bayes; nullopt-like empty vector when the set has no mass.
std::vector<double> conditional_x(const DiscreteScm& s, std::size_t c, std::size_t z, bool complement) {
  std::vector<double> p(s.nx());
  double m = 0.0;
  for (std::size_t x = 0; x < s.nx(); ++x) {
    const double w = complement ? 1.0 - s.z_given_x[x][z] : s.z_given_x[x][z];
    m += p[x] = s.x_given_c[c][x] * w;
  }
  if (m <= 0.0) return s.x_given_c[c];
  for (double& v : p) v /= m;
  return p;
}

// Comonotone joint of (X_do, X_not) as an explicit |X|×|X| table, then the
// comonotone joint of (Y_do, Y_not) per cell: PNS = Σ mass · P(Y_do=y, Y_not≠y).
double oracle_pns(const DiscreteScm& s, std::size_t z, std::size_t y) {
  double pns = 0.0;
  for (std::size_t c = 0; c < s.nc(); ++c) {
    const auto a = conditional_x(s, c, z, false), b = conditional_x(s, c, z, true);
    for (std::size_t x1 = 0; x1 < s.nx(); ++x1)
      for (std::size_t x2 = 0; x2 < s.nx(); ++x2) {
        const double mass = overlap(cell(a, x1), cell(b, x2));
        if (mass == 0.0) continue;
        const auto y1 = cell(s.y_given_x[x1], y), y2 = cell(s.y_given_x[x2], y);
        pns += s.prior_c[c] * mass * ((y1.second - y1.first) - overlap(y1, y2));
      }
  }
  return pns;
}

double do_prob(const DiscreteScm& s, std::size_t z, std::size_t y, bool complement) {
  double p = 0.0;
  for (std::size_t c = 0; c < s.nc(); ++c) {
    const auto px = conditional_x(s, c, z, complement);
    for (std::size_t x = 0; x < s.nx(); ++x) p += s.prior_c[c] * px[x] * s.y_given_x[x][y];
  }
  return p;
}

double softmax_prob(double a, double b, double c, std::size_t k) {
  const double m = std::max({a, b, c});
  const double ea = std::exp(a - m), eb = std::exp(b - m), ec = std::exp(c - m);
  return (k == 0 ? ea : k == 1 ? eb : ec) / (ea + eb + ec);
}

}  // namespace

TEST(Scm, ValidationRejectsBadRows) {
  DiscreteScm s = bijective_scm();
  s.y_given_x[0] = {0.6, 0.6};
  EXPECT_THROW(s.validate(), ValidationError);
}

TEST(Pns, BijectiveCase) {
  const auto s = bijective_scm();
  EXPECT_EQ(brute_force_pns(s, 1, 1).value, 1.0);
  EXPECT_EQ(interventional_bound(s, 1, 1).value, 1.0);
  EXPECT_EQ(observational_estimate(s, 1, 1).value, 1.0);
}

TEST(Pns, IndependenceCase) {
  const auto s = independent_scm();
  EXPECT_NEAR(brute_force_pns(s, 1, 1).value, 0.0, 1e-15);
  const double bound = interventional_bound(s, 1, 1).value;
  EXPECT_LE(bound, 0.0 + 1e-15);
  EXPECT_NEAR(bound, 0.0, 1e-15);
}

TEST(Pns, ConstantMechanismHasNoEffect) {
  const auto s = constant_f_scm();
  const auto exact = brute_force_pns(s, 0, 1);
  EXPECT_EQ(exact.value, 0.0);
  EXPECT_TRUE(exact.degenerate);
}

TEST(Pns, ZOutsideImageIsDegenerate) {
  // f maps everything to 0; query z = 1 has empty support.
  const auto s = DiscreteScm::functional({0.3, 0.7}, {0, 0}, 2, {{0.2, 0.8}, {0.6, 0.4}});
  const auto est = observational_estimate(s, 1, 1);
  EXPECT_TRUE(est.degenerate);
  const double py = 0.3 * 0.8 + 0.7 * 0.4;
  EXPECT_NEAR(est.value, -py, 1e-15);
}

TEST(Pns, MatchesIndependentOracleOnRandomScms) {
  Rng rng(101);
  for (int i = 0; i < 200; ++i) {
    const bool conf = i % 2 == 1, det = i % 3 != 0;
    const auto s = random_scm(rng, 3, 2 + rng.below(2), 3, conf ? 3 : 1, det);
    const std::size_t z = rng.below(s.nz()), y = rng.below(s.ny());
    const double exact = brute_force_pns(s, z, y).value;
    EXPECT_NEAR(exact, oracle_pns(s, z, y), 1e-12) << "case " << i;
    const double bound = interventional_bound(s, z, y).value;
    EXPECT_NEAR(bound, do_prob(s, z, y, false) - do_prob(s, z, y, true), 1e-12);
    EXPECT_LE(bound, exact + 1e-10);
    // Fréchet upper limit.
    EXPECT_LE(exact, std::min(do_prob(s, z, y, false), 1.0 - do_prob(s, z, y, true)) + 1e-12);
  }
}

TEST(Pns, IdentityHoldsWithoutConfounding) {
  Rng rng(7);
  int checked = 0;
  for (int i = 0; i < 100; ++i) {
    const auto s = random_scm(rng, 2 + rng.below(4), 2 + rng.below(3), 2 + rng.below(3), 1, true);
    const std::size_t z = rng.below(s.nz()), y = rng.below(s.ny());
    const auto est = observational_estimate(s, z, y);
    if (est.degenerate) continue;
    ++checked;
    EXPECT_NEAR(est.value, interventional_bound(s, z, y).value, 1e-10);
  }
  EXPECT_GT(checked, 50);
}

TEST(Pns, OversizedScmIsSizeError) {
  DiscreteScm s;
  const std::size_t n = 120;
  s.x_given_c = {std::vector<double>(n, 1.0 / n)};
  s.x_given_c[0].back() += 1.0 - [&] { double t = 0; for (double v : s.x_given_c[0]) t += v; return t; }();
  for (std::size_t x = 0; x < n; ++x) {
    std::vector<double> z(n, 0.0);
    z[x] = 1.0;
    s.z_given_x.push_back(z);
    s.y_given_x.push_back(z);
  }
  EXPECT_THROW(brute_force_pns(s, 0, 0), SizeError);
}

TEST(PnsVerify, FiftyCasesClean) {
  const auto rows = run_pns_verification(1, 50);
  ASSERT_EQ(rows.size(), 53u);
  for (const auto& r : rows) EXPECT_TRUE(r.ok()) << r.id;
  EXPECT_EQ(rows[0].id, "bijective");
  EXPECT_EQ(rows[0].exact, 1.0);
  EXPECT_EQ(rows[0].bound, 1.0);
  EXPECT_EQ(rows[0].estimate, 1.0);
  EXPECT_EQ(rows[1].exact, 0.0);
  EXPECT_LE(rows[1].bound, 0.0);
  const std::string table = format_pns_table(rows);
  EXPECT_NE(table.find("independent"), std::string::npos);
}

// ---------------------------------------------------------------------------

namespace {

struct LinearClf {
  Tensor w{Tensor::matrix({{1.0, -0.5, 0.2}, {0.3, 0.8, -1.0}})};  // [2 × 3]
  Tensor b{Tensor::vector({0.1, -0.2, 0.05})};
  Tape* tape = nullptr;
  Var operator()(Var z) const { return add_bias(matmul(z, tape->constant(w)), tape->constant(b)); }
  double prob(double z0, double z1, std::size_t k) const {
    double l[3];
    for (std::size_t c = 0; c < 3; ++c) l[c] = z0 * w.at(0, c) + z1 * w.at(1, c) + b[c];
    return softmax_prob(l[0], l[1], l[2], k);
  }
};

}  // namespace

TEST(PnsEstimator, HandSubstitutionOracle) {
  Tape t;
  LinearClf clf;
  clf.tape = &t;
  const Tensor zv = Tensor::matrix({{1.5, -0.3}, {-0.7, 2.0}});
  const Tensor targets = Tensor::matrix({{1, 0, 0}, {0, 0.25, 0.75}});
  const std::vector<std::size_t> perm{1, 0};
  const Tensor est = pns_estimates(t.constant(zv), targets, clf, perm, 1e-4).value();
  ASSERT_EQ(est.shape(), (Shape{2, 2}));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double z[2] = {zv.at(i, 0), zv.at(i, 1)};
      auto p = [&](const double* zz) {
        double s = 0.0;
        for (std::size_t k = 0; k < 3; ++k) s += targets.at(i, k) * clf.prob(zz[0], zz[1], k);
        return s;
      };
      const double pf = p(z);
      z[j] = zv.at(perm[i], j);
      const double ref = std::clamp(pf - p(z), 1e-4, 1.0);
      EXPECT_NEAR(est.at(i, j), ref, 1e-12) << i << "," << j;
    }
  const Tensor col = estimate_pns_per_dim(t.constant(zv), targets, clf, 1, perm).value();
  EXPECT_EQ(col[0], est.at(0, 1));
  EXPECT_EQ(col[1], est.at(1, 1));
}

TEST(PnsEstimator, NullInterventionsGiveEpsilon) {
  Tape t;
  LinearClf clf;
  clf.tape = &t;
  const Tensor targets = Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  // Dimension 0 constant across the batch.
  const Tensor zv = Tensor::matrix({{0.4, 1.0}, {0.4, -1.0}, {0.4, 0.3}});
  const Tensor est = pns_estimates(t.constant(zv), targets, clf, {1, 2, 0}, 1e-4).value();
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(est.at(i, 0), 1e-4);
  // Classifier ignoring dimension 1.
  clf.w.at(1, 0) = clf.w.at(1, 1) = clf.w.at(1, 2) = 0.0;
  const Tensor est2 = pns_estimates(t.constant(zv), targets, clf, {1, 2, 0}, 1e-4).value();
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(est2.at(i, 1), 1e-4);
}

TEST(PnsEstimator, BatchOfOneIsContractError) {
  Rng rng(1);
  EXPECT_THROW(donor_permutation(rng, 1), ContractError);
  Tape t;
  LinearClf clf;
  clf.tape = &t;
  EXPECT_THROW(pns_estimates(t.constant(Tensor::matrix({{1, 2}})), Tensor::matrix({{1, 0, 0}}), clf, {0}),
               ContractError);
}

TEST(CausalLoss, AnalyticValues) {
  Tape t;
  // Logits ±1000·z make every estimate exactly 1.
  Classifier sharp = [&](Var z) {
    return matmul(z, t.constant(Tensor::matrix({{1000.0, -1000.0}})));
  };
  const Tensor zv = Tensor::matrix({{1.0}, {-1.0}});
  const Tensor targets = Tensor::matrix({{1, 0}, {0, 1}});
  EXPECT_EQ(causal_loss(t.constant(zv), targets, sharp, {1, 0}).value().item(), 0.0);
  Classifier flat = [&](Var z) { return matmul(z, t.constant(Tensor::matrix({{0.0, 0.0}}))); };
  EXPECT_NEAR(causal_loss(t.constant(zv), targets, flat, {1, 0}).value().item(), -std::log(1e-4), 1e-12);
  EXPECT_NEAR(-std::log(1e-4), 9.2103, 1e-4);
}

TEST(CausalLoss, InvariantToBatchRelabeling) {
  Rng rng(4);
  Tensor zv({6, 3}), tg({6, 3});
  for (std::size_t i = 0; i < zv.size(); ++i) zv[i] = rng.uniform(-2.0, 2.0);
  for (std::size_t i = 0; i < 6; ++i) tg.at(i, i % 3) = 1.0;
  const Tensor w = Tensor::matrix({{2, -1, 0.5}, {-1.5, 2, 1}, {0.7, 0.2, -2}});
  const auto perm = rng.derangement(6);
  auto loss = [&](const Tensor& z, const Tensor& y, const std::vector<std::size_t>& pm) {
    Tape t;
    Classifier clf = [&](Var v) { return matmul(v, t.constant(w)); };
    return causal_loss(t.constant(z), y, clf, pm).value().item();
  };
  const double base = loss(zv, tg, perm);
  // Relabel sample i as sigma(i).
  const auto sigma = rng.permutation(6);
  Tensor z2({6, 3}), y2({6, 3});
  std::vector<std::size_t> p2(6);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      z2.at(sigma[i], j) = zv.at(i, j);
      y2.at(sigma[i], j) = tg.at(i, j);
    }
    p2[sigma[i]] = sigma[perm[i]];
  }
  EXPECT_EQ(loss(z2, y2, p2), base);
}

TEST(CausalLoss, GradientMatchesFiniteDifferences) {
  Rng rng(12);
  Tensor zv({4, 3});
  for (std::size_t i = 0; i < zv.size(); ++i) zv[i] = rng.uniform(-2.0, 2.0);
  Tensor tg({4, 3});
  for (std::size_t i = 0; i < 4; ++i) tg.at(i, i % 3) = 1.0;
  const Tensor w = Tensor::matrix({{3, -2, 0.5}, {-2.5, 2, 1}, {1.7, 0.2, -3}});
  const std::vector<std::size_t> perm{2, 3, 1, 0};
  auto f = [&](Tape& t, const std::vector<Var>& p) {
    Classifier clf = [&](Var v) { return matmul(v, t.constant(w)); };
    return causal_loss(p[0], tg, clf, perm);
  };
  // Confirm the point is away from the clamp boundaries.
  {
    Tape t;
    Classifier clf = [&](Var v) { return matmul(v, t.constant(w)); };
    // A lower clamp of -2 exposes the raw differences.
    const Tensor raw = pns_estimates(t.constant(zv), tg, clf, perm, -2.0).value();
    std::size_t interior = 0;
    for (double e : raw.data()) {
      ASSERT_GT(std::abs(e - 1e-4), 5e-5) << e;
      interior += e > 1e-4;
    }
    EXPECT_GT(interior, 2u);
  }
  const auto rep = grad_check(f, {{"z", &zv}});
  EXPECT_TRUE(rep.passed()) << rep.max_rel_error();
}

TEST(ReconstructionLoss, Cases) {
  Rng rng(3);
  Tensor x({3, 2, 2, 2});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(-1.0, 1.0);
  Tape t;
  EXPECT_EQ(reconstruction_loss(t.constant(x), x).value().item(), 0.0);
  Tensor x1 = x;
  for (double& v : x1.storage()) v += 1.0;
  EXPECT_NEAR(reconstruction_loss(t.constant(x1), x).value().item(), 1.0, 1e-12);
  Tensor r = x;
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = rng.uniform(-1.0, 1.0);
  double sq = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) sq += (r[i] - x[i]) * (r[i] - x[i]);
  EXPECT_NEAR(reconstruction_loss(t.constant(r), x).value().item(), std::sqrt(sq / r.size()), 1e-12);
  EXPECT_THROW(reconstruction_loss(t.constant(Tensor({3, 2, 2, 1})), x), DimensionError);
}

TEST(TotalLoss, ArithmeticAndSwitches) {
  Rng rng(6);
  Tape t;
  Tensor zv({3, 2});
  for (std::size_t i = 0; i < zv.size(); ++i) zv[i] = rng.uniform(-1.0, 1.0);
  Var z = t.constant(zv);
  Classifier clf = [&](Var v) { return matmul(v, t.constant(Tensor::matrix({{1, -1}, {0.5, 2}}))); };
  const Tensor tg = Tensor::matrix({{1, 0}, {0, 1}, {0.3, 0.7}});
  Tensor x({2, 1, 1, 2}, {1, 2, 3, 4});
  std::vector<Var> rec;
  std::vector<Tensor> xs;
  for (int i = 0; i < 3; ++i) {
    Tensor r = x;
    r[0] += 0.1 * i;
    rec.push_back(t.constant(r));
    xs.push_back(x);
  }
  const std::vector<std::size_t> perm{1, 2, 0};
  Var logits = clf(z);
  const LossBreakdown all = total_loss(logits, tg, rec, xs, z, clf, perm, LossWeights{});
  EXPECT_EQ(all.total, (all.l_theta + all.l_c) + all.l_rs);
  EXPECT_EQ(all.l_theta, cross_entropy(logits, tg).value().item());
  EXPECT_EQ(all.l_c, causal_loss(z, tg, clf, perm).value().item());
  EXPECT_EQ(all.l_rs, reconstruction_loss(rec, xs).value().item());

  const std::size_t nodes_before = t.size();
  const LossBreakdown ce = total_loss(logits, tg, rec, xs, z, clf, {}, LossWeights{1.0, 0.0, 0.0});
  EXPECT_EQ(ce.total, all.l_theta);
  EXPECT_EQ(ce.l_c, 0.0);
  EXPECT_EQ(ce.l_rs, 0.0);
  EXPECT_LT(t.size() - nodes_before, 6u);  // causal and reconstruction graphs never built
}

TEST(TotalLoss, NearZeroWhenEverythingIsPerfect) {
  Tape t;
  Classifier sharp = [&](Var z) { return matmul(z, t.constant(Tensor::matrix({{1000.0, -1000.0}}))); };
  Var z = t.constant(Tensor::matrix({{1.0}, {-1.0}}));
  const Tensor tg = Tensor::matrix({{1, 0}, {0, 1}});
  Tensor x({1, 1, 1, 2}, {0.5, 0.25});
  const LossBreakdown l =
      total_loss(sharp(z), tg, {t.constant(x), t.constant(x)}, {x, x}, z, sharp, {1, 0}, LossWeights{});
  EXPECT_LT(l.total, 1e-3);
}
