#pragma once

// Probability of necessity and sufficiency (PNS): exact oracles on discrete
// structural causal models, the interventional lower bound and its
// observational form, and the differentiable training losses built on them.
//
// SCM semantics. Exogenous C ~ p(C), X ~ P(X | C), Z ~ P(Z | X) (a function
// f when rows are one-hot), Y ~ P(Y | X). An intervention do(Z ∈ S) is a
// functional intervention: X is redrawn from P(X | C, Z ∈ S) and Y follows
// from the redrawn X. Counterfactual worlds share C and two uniform noises:
// U_X picks X by inverse CDF and U_Y picks Y by inverse CDF. If S has zero
// mass under P(X | C) the intervention leaves X at its factual draw.

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "cat/autodiff.hpp"
#include "cat/random.hpp"

namespace cat {

using ProbTable = std::vector<std::vector<double>>;

struct DiscreteScm {
  std::vector<double> prior_c{1.0};  // p(C); a single state means no confounder
  ProbTable x_given_c;               // |C| × |X|
  ProbTable z_given_x;               // |X| × |Z|
  ProbTable y_given_x;               // |X| × |Y|

  std::size_t nc() const { return prior_c.size(); }
  std::size_t nx() const { return y_given_x.size(); }
  std::size_t nz() const { return z_given_x.empty() ? 0 : z_given_x[0].size(); }
  std::size_t ny() const { return y_given_x.empty() ? 0 : y_given_x[0].size(); }
  bool confounder_free() const { return prior_c.size() == 1; }

  bool deterministic_f() const {
    for (const auto& row : z_given_x)
      if (std::count(row.begin(), row.end(), 1.0) != 1) return false;
    return true;
  }

  /// f(x) for a deterministic mechanism.
  std::size_t f(std::size_t x) const {
    const auto& row = z_given_x.at(x);
    return static_cast<std::size_t>(std::find(row.begin(), row.end(), 1.0) - row.begin());
  }

  void validate() const {
    auto check_row = [](const std::vector<double>& row, const std::string& what) {
      double s = 0.0;
      for (double v : row) {
        if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError(what + ": negative or non-finite probability");
        s += v;
      }
      if (std::abs(s - 1.0) > 1e-12) throw ValidationError(what + ": row sums to " + std::to_string(s));
    };
    if (prior_c.empty() || y_given_x.empty() || z_given_x.empty()) throw ValidationError("scm: empty domain");
    check_row(prior_c, "scm p(C)");
    if (x_given_c.size() != nc()) throw ValidationError("scm: P(X|C) needs one row per confounder state");
    for (const auto& row : x_given_c) {
      if (row.size() != nx()) throw ValidationError("scm: P(X|C) row width differs from |X|");
      check_row(row, "scm P(X|C)");
    }
    if (z_given_x.size() != nx()) throw ValidationError("scm: P(Z|X) needs one row per X state");
    for (const auto& row : z_given_x) {
      if (row.size() != nz()) throw ValidationError("scm: ragged P(Z|X)");
      check_row(row, "scm P(Z|X)");
    }
    for (const auto& row : y_given_x) {
      if (row.size() != ny()) throw ValidationError("scm: ragged P(Y|X)");
      check_row(row, "scm P(Y|X)");
    }
  }

  /// Marginal P(X) = Σ_c p(c) P(X | c).
  std::vector<double> x_marginal() const {
    std::vector<double> px(nx(), 0.0);
    for (std::size_t c = 0; c < nc(); ++c)
      for (std::size_t x = 0; x < nx(); ++x) px[x] += prior_c[c] * x_given_c[c][x];
    return px;
  }

  /// Confounder-free SCM with deterministic f: X ~ px, Z = f(X).
  static DiscreteScm functional(std::vector<double> px, const std::vector<std::size_t>& f, std::size_t nz,
                                ProbTable y_given_x) {
    DiscreteScm s;
    s.x_given_c = {std::move(px)};
    for (std::size_t x : f) {
      std::vector<double> row(nz, 0.0);
      row.at(x) = 1.0;
      s.z_given_x.push_back(std::move(row));
    }
    s.y_given_x = std::move(y_given_x);
    return s;
  }
};

enum class PnsKind { exact, interventional_bound, observational_estimate };

struct PnsEstimate {
  double value = 0.0;
  PnsKind kind = PnsKind::exact;
  /// An intervention or conditioning event had zero mass.
  bool degenerate = false;
};

inline constexpr double kMaxEnumeration = 1e6;

namespace detail {

inline void require_enumerable(const DiscreteScm& scm, std::size_t z, std::size_t y) {
  scm.validate();
  const double size = static_cast<double>(scm.nx()) * scm.nz() * scm.ny() * scm.nc();
  if (size > kMaxEnumeration) {
    throw SizeError("scm with |X||Z||Y||C| = " + std::to_string(static_cast<long long>(size)) +
                    " exceeds the enumeration budget of 1e6");
  }
  if (z >= scm.nz()) throw ValidationError("query z outside Z's domain");
  if (y >= scm.ny()) throw ValidationError("query y outside Y's domain");
}

/// P(X | C=c, Z ∈ S) where S = {z} (complement=false) or Z \ {z}. Falls back to
/// P(X | C=c) when S has no mass; `empty` reports that fallback.
inline std::vector<double> intervened_x(const DiscreteScm& scm, std::size_t c, std::size_t z, bool complement,
                                        bool* empty) {
  const std::size_t nx = scm.nx();
  std::vector<double> px(nx);
  double mass = 0.0;
  for (std::size_t x = 0; x < nx; ++x) {
    const double pz = scm.z_given_x[x][z];
    const double in_set = complement ? 1.0 - pz : pz;
    px[x] = scm.x_given_c[c][x] * std::max(0.0, in_set);
    mass += px[x];
  }
  if (mass <= 0.0) {
    if (empty) *empty = true;
    return scm.x_given_c[c];
  }
  for (double& v : px) v /= mass;
  return px;
}

inline std::vector<double> cumulative(const std::vector<double>& p) {
  std::vector<double> c(p.size());
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) c[i] = (s += p[i]);
  return c;
}

/// Smallest index whose cumulative mass exceeds u, skipping zero-mass states.
inline std::size_t inverse_cdf(const std::vector<double>& cdf, const std::vector<double>& p, double u) {
  for (std::size_t i = 0; i < cdf.size(); ++i)
    if (u < cdf[i] && p[i] > 0.0) return i;
  for (std::size_t i = p.size(); i-- > 0;)
    if (p[i] > 0.0) return i;
  return 0;
}

}  // namespace detail

/// Exact PNS_{Z=z, Y=y} = P(Y(Z≠z) ≠ y, Y(Z=z) = y) by sweeping the shared
/// exogenous noise: for every confounder state the unit interval of U_X is cut
/// at both worlds' CDF points, and on each piece the U_Y event is an interval
/// difference measured exactly.
inline PnsEstimate brute_force_pns(const DiscreteScm& scm, std::size_t z, std::size_t y) {
  detail::require_enumerable(scm, z, y);
  PnsEstimate out{0.0, PnsKind::exact, false};
  double total = 0.0;
  for (std::size_t c = 0; c < scm.nc(); ++c) {
    if (scm.prior_c[c] == 0.0) continue;
    bool empty = false;
    const auto p_do = detail::intervened_x(scm, c, z, false, &empty);
    const auto p_not = detail::intervened_x(scm, c, z, true, &empty);
    out.degenerate = out.degenerate || empty;
    const auto cdf_do = detail::cumulative(p_do), cdf_not = detail::cumulative(p_not);
    std::vector<double> cuts{0.0, 1.0};
    cuts.insert(cuts.end(), cdf_do.begin(), cdf_do.end());
    cuts.insert(cuts.end(), cdf_not.begin(), cdf_not.end());
    std::sort(cuts.begin(), cuts.end());
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
      const double a = std::clamp(cuts[i], 0.0, 1.0), b = std::clamp(cuts[i + 1], 0.0, 1.0);
      if (b <= a) continue;
      const double mid = 0.5 * (a + b);
      const std::size_t x_do = detail::inverse_cdf(cdf_do, p_do, mid);
      const std::size_t x_not = detail::inverse_cdf(cdf_not, p_not, mid);
      // U_Y interval mapping to Y = y in each world.
      const auto& ydo = scm.y_given_x[x_do];
      const auto& ynot = scm.y_given_x[x_not];
      double lo_do = 0.0, lo_not = 0.0;
      for (std::size_t k = 0; k < y; ++k) {
        lo_do += ydo[k];
        lo_not += ynot[k];
      }
      const double hi_do = lo_do + ydo[y], hi_not = lo_not + ynot[y];
      const double overlap = std::max(0.0, std::min(hi_do, hi_not) - std::max(lo_do, lo_not));
      acc += (b - a) * std::max(0.0, (hi_do - lo_do) - overlap);
    }
    total += scm.prior_c[c] * acc;
  }
  out.value = std::clamp(total, 0.0, 1.0);
  return out;
}

/// P(Y=y | do(Z=z)) under the functional intervention.
inline double interventional_probability(const DiscreteScm& scm, std::size_t z, std::size_t y, bool complement,
                                         bool* empty = nullptr) {
  double p = 0.0;
  for (std::size_t c = 0; c < scm.nc(); ++c) {
    const auto px = detail::intervened_x(scm, c, z, complement, empty);
    double inner = 0.0;
    for (std::size_t x = 0; x < scm.nx(); ++x) inner += px[x] * scm.y_given_x[x][y];
    p += scm.prior_c[c] * inner;
  }
  return p;
}

/// Lower bound P(Y=y | do(Z=z)) − P(Y=y | do(Z≠z)).
inline PnsEstimate interventional_bound(const DiscreteScm& scm, std::size_t z, std::size_t y) {
  detail::require_enumerable(scm, z, y);
  bool empty = false;
  const double p_do = interventional_probability(scm, z, y, false, &empty);
  const double p_not = interventional_probability(scm, z, y, true, &empty);
  return {p_do - p_not, PnsKind::interventional_bound, empty};
}

/// Σ_X P(y|X) [P(X | f(X)=z) − P(X | f(X)≠z)] from the observational joint.
/// A conditioning event with zero mass contributes 0 and marks the result degenerate.
inline PnsEstimate observational_estimate(const DiscreteScm& scm, std::size_t z, std::size_t y) {
  detail::require_enumerable(scm, z, y);
  if (!scm.deterministic_f()) throw ValidationError("observational_estimate requires a deterministic f");
  const auto px = scm.x_marginal();
  double mass_in = 0.0, mass_out = 0.0;
  for (std::size_t x = 0; x < scm.nx(); ++x) (scm.f(x) == z ? mass_in : mass_out) += px[x];
  double v = 0.0;
  for (std::size_t x = 0; x < scm.nx(); ++x) {
    const bool in = scm.f(x) == z;
    const double cond_in = in && mass_in > 0.0 ? px[x] / mass_in : 0.0;
    const double cond_out = !in && mass_out > 0.0 ? px[x] / mass_out : 0.0;
    v += scm.y_given_x[x][y] * (cond_in - cond_out);
  }
  return {v, PnsKind::observational_estimate, mass_in <= 0.0 || mass_out <= 0.0};
}

namespace detail {

inline std::vector<double> random_simplex(Rng& rng, std::size_t n, double zero_prob) {
  std::vector<double> p(n);
  double s = 0.0;
  for (double& v : p) {
    v = rng.uniform() < zero_prob ? 0.0 : rng.uniform(0.05, 1.0);
    s += v;
  }
  if (s == 0.0) {
    p[rng.below(n)] = 1.0;
    return p;
  }
  for (double& v : p) v /= s;
  // Renormalised rows can drift by an ulp; fold the residue into the largest entry.
  double t = 0.0;
  for (double v : p) t += v;
  *std::max_element(p.begin(), p.end()) += 1.0 - t;
  return p;
}

}  // namespace detail

/// Random enumerable SCM. Deterministic f draws f(x) uniformly; otherwise P(Z|X) rows are random.
inline DiscreteScm random_scm(Rng& rng, std::size_t nx, std::size_t nz, std::size_t ny, std::size_t nc,
                              bool deterministic_f) {
  DiscreteScm s;
  s.prior_c = nc == 1 ? std::vector<double>{1.0} : detail::random_simplex(rng, nc, 0.0);
  for (std::size_t c = 0; c < nc; ++c) s.x_given_c.push_back(detail::random_simplex(rng, nx, 0.15));
  for (std::size_t x = 0; x < nx; ++x) {
    if (deterministic_f) {
      std::vector<double> row(nz, 0.0);
      row[rng.below(nz)] = 1.0;
      s.z_given_x.push_back(std::move(row));
    } else {
      s.z_given_x.push_back(detail::random_simplex(rng, nz, 0.2));
    }
    s.y_given_x.push_back(detail::random_simplex(rng, ny, 0.2));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Verification table

struct PnsVerifyRow {
  std::string id;
  double exact = 0.0;
  double bound = 0.0;
  double estimate = std::numeric_limits<double>::quiet_NaN();  // NaN when f is stochastic
  bool confounder_free = false;
  bool degenerate = false;
  bool ordering_ok = true;
  bool identity_checked = false;
  bool identity_ok = true;

  double gap() const { return exact - bound; }
  bool ok() const { return ordering_ok && identity_ok; }
};

inline constexpr double kPnsSlack = 1e-10;

inline PnsVerifyRow verify_pns_case(const std::string& id, const DiscreteScm& scm, std::size_t z, std::size_t y) {
  PnsVerifyRow row;
  row.id = id;
  const PnsEstimate exact = brute_force_pns(scm, z, y);
  const PnsEstimate bound = interventional_bound(scm, z, y);
  row.exact = exact.value;
  row.bound = bound.value;
  row.confounder_free = scm.confounder_free();
  row.degenerate = exact.degenerate || bound.degenerate;
  row.ordering_ok = bound.value <= exact.value + kPnsSlack && exact.value >= 0.0 && exact.value <= 1.0;
  if (scm.deterministic_f()) {
    const PnsEstimate est = observational_estimate(scm, z, y);
    row.estimate = est.value;
    row.degenerate = row.degenerate || est.degenerate;
    if (scm.confounder_free() && !row.degenerate) {
      row.identity_checked = true;
      row.identity_ok = std::abs(est.value - bound.value) <= kPnsSlack;
    }
  }
  return row;
}

/// Binary X, Z = X, Y = X, uniform X; query z=1, y=1.
inline DiscreteScm bijective_scm() {
  return DiscreteScm::functional({0.5, 0.5}, {0, 1}, 2, {{1.0, 0.0}, {0.0, 1.0}});
}

/// Y independent of X (hence of Z); Z = X.
inline DiscreteScm independent_scm() {
  return DiscreteScm::functional({0.5, 0.5}, {0, 1}, 2, {{0.3, 0.7}, {0.3, 0.7}});
}

/// f constant: Z is always 0.
inline DiscreteScm constant_f_scm() {
  return DiscreteScm::functional({0.4, 0.6}, {0, 0}, 2, {{0.5, 0.5}, {0.5, 0.5}});
}

/// Canonical cases followed by `count` random SCMs. Even-numbered random cases are
/// confounder-free with deterministic f (identity checked); odd ones carry a
/// confounder and, every other time, a stochastic mechanism for Z.
inline std::vector<PnsVerifyRow> run_pns_verification(std::uint64_t seed, std::size_t count) {
  if (count == 0) throw ValidationError("pns verification needs count >= 1");
  std::vector<PnsVerifyRow> rows;
  rows.push_back(verify_pns_case("bijective", bijective_scm(), 1, 1));
  rows.push_back(verify_pns_case("independent", independent_scm(), 1, 1));
  rows.push_back(verify_pns_case("constant-f", constant_f_scm(), 0, 1));
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const bool confounded = i % 2 == 1;
    const bool deterministic = !confounded || (i / 2) % 2 == 0;
    const std::size_t nx = 2 + rng.below(5), nz = 2 + rng.below(3), ny = 2 + rng.below(3);
    const std::size_t nc = confounded ? 2 + rng.below(2) : 1;
    DiscreteScm scm = random_scm(rng, nx, nz, ny, nc, deterministic);
    const std::size_t z = rng.below(nz), y = rng.below(ny);
    rows.push_back(verify_pns_case("random-" + std::to_string(i), scm, z, y));
  }
  return rows;
}

inline std::string format_pns_table(const std::vector<PnsVerifyRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(14) << "scm" << std::right << std::setw(14) << "exact" << std::setw(14) << "bound"
     << std::setw(14) << "estimate" << std::setw(14) << "gap" << "  flags\n";
  os << std::fixed << std::setprecision(10);
  for (const auto& r : rows) {
    os << std::left << std::setw(14) << r.id << std::right << std::setw(14) << r.exact << std::setw(14) << r.bound;
    if (std::isnan(r.estimate))
      os << std::setw(14) << "-";
    else
      os << std::setw(14) << r.estimate;
    os << std::setw(14) << r.gap() << "  ";
    std::string flags;
    if (!r.confounder_free) flags += "confounded ";
    if (r.degenerate) flags += "degenerate ";
    if (!r.ordering_ok) flags += "ORDER-VIOLATION ";
    if (!r.identity_ok) flags += "IDENTITY-VIOLATION ";
    os << (flags.empty() ? "ok" : flags) << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Training losses

/// Maps latents [n × d] to logits [n × classes].
using Classifier = std::function<Var(Var z)>;

/// Batch permutation supplying counterfactual donors; a derangement for every n ≥ 2.
inline std::vector<std::size_t> donor_permutation(Rng& rng, std::size_t n) {
  if (n < 2) throw ContractError("causal estimate needs a batch of at least 2 (no counterfactual donor)");
  return rng.derangement(n);
}

/// Stacks d copies of z: row j·n + i is z_i with coordinate j taken from z_{perm(i)}.
inline Var counterfactual_stack(Var z, const std::vector<std::size_t>& perm) {
  const Tensor& zv = z.value();
  if (zv.rank() != 2) throw DimensionError("counterfactual_stack: z must be [n x d]");
  const std::size_t n = zv.dim(0), d = zv.dim(1);
  if (perm.size() != n) throw DimensionError("counterfactual_stack: permutation length differs from batch size");
  Tensor out({d * n, d});
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t i = 0; i < n; ++i) {
      double* row = out.data().data() + (j * n + i) * d;
      for (std::size_t k = 0; k < d; ++k) row[k] = zv[i * d + k];
      row[j] = zv[perm[i] * d + j];
    }
  return z.tape().record(std::move(out), {z.id()}, [iz = z.id(), perm, n, d](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_slot(self);
    Tensor& gz = t.grad_slot(iz);
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t i = 0; i < n; ++i) {
        const double* row = g.data().data() + (j * n + i) * d;
        for (std::size_t k = 0; k < d; ++k)
          if (k != j) gz[i * d + k] += row[k];
        gz[perm[i] * d + j] += row[j];
      }
  });
}

/// Probability the classifier assigns to each sample's target: Σ_c target_c · softmax_c, [rows × 1].
inline Var target_probability(Var logits, const Tensor& targets) {
  return sum_cols(mul_const(softmax(logits, 1), targets));
}

/// Per-sample, per-dimension PNS surrogate, [n × d]:
/// clamp(P(y_i | z_i) − P(y_i | z_i with z_ij ← z_perm(i),j), ε, 1).
inline Var pns_estimates(Var z, const Tensor& targets, const Classifier& clf, const std::vector<std::size_t>& perm,
                         double eps = 1e-4) {
  const std::size_t n = z.value().dim(0), d = z.value().dim(1);
  if (n < 2) throw ContractError("causal estimate needs a batch of at least 2 (no counterfactual donor)");
  if (targets.rank() != 2 || targets.dim(0) != n) throw DimensionError("pns_estimates: targets must have one row per sample");
  validate_distribution_rows(targets, "pns_estimates");
  Var p_fact = target_probability(clf(z), targets);  // [n × 1]
  Tensor tiled({d * n, targets.dim(1)});
  for (std::size_t j = 0; j < d; ++j)
    std::copy(targets.data().begin(), targets.data().end(), tiled.data().begin() + static_cast<std::ptrdiff_t>(j * targets.size()));
  Var p_cf = target_probability(clf(counterfactual_stack(z, perm)), tiled);  // [d·n × 1]
  std::vector<Var> fact_copies(d, p_fact);
  Var diff = sub(concat_rows(fact_copies), p_cf);
  Var est = clamp(diff, eps, 1.0);
  return transpose(reshape(est, {d, n}));
}

/// Estimates for a single latent dimension j, [n × 1].
inline Var estimate_pns_per_dim(Var z, const Tensor& targets, const Classifier& clf, std::size_t j,
                                const std::vector<std::size_t>& perm, double eps = 1e-4) {
  if (j >= z.value().dim(1)) throw DimensionError("estimate_pns_per_dim: dimension out of range");
  return slice_cols(pns_estimates(z, targets, clf, perm, eps), j, j + 1);
}

/// l_c = −Σ_j Σ_i log(estimate_ij) / (n·d), summed in sorted order.
inline Var causal_loss(Var z, const Tensor& targets, const Classifier& clf, const std::vector<std::size_t>& perm,
                       double eps = 1e-4) {
  Var est = pns_estimates(z, targets, clf, perm, eps);
  const double nd = static_cast<double>(est.value().size());
  return scale(sum_sorted(log(est)), -1.0 / nd);
}

/// l_rs = ‖recon − x‖₂ / √(element count), over the whole batch.
inline Var reconstruction_loss(const std::vector<Var>& recon, const std::vector<Tensor>& xs) {
  if (recon.empty() || recon.size() != xs.size()) throw DimensionError("reconstruction_loss: batch sizes differ");
  Tape& tape = recon[0].tape();
  std::vector<Var> sq;
  std::size_t count = 0;
  for (std::size_t i = 0; i < recon.size(); ++i) {
    if (recon[i].value().shape() != xs[i].shape()) {
      throw DimensionError("reconstruction_loss: recon " + shape_str(recon[i].value().shape()) + " vs input " +
                           shape_str(xs[i].shape()));
    }
    Var d = sub(recon[i], tape.constant(xs[i]));
    sq.push_back(sum(square(d)));
    count += xs[i].size();
  }
  Var total = sq[0];
  for (std::size_t i = 1; i < sq.size(); ++i) total = add(total, sq[i]);
  return sqrt(scale(total, 1.0 / static_cast<double>(count)));
}

inline Var reconstruction_loss(Var recon, const Tensor& x) { return reconstruction_loss(std::vector<Var>{recon}, {x}); }

struct LossWeights {
  double theta = 1.0;
  double causal = 1.0;
  double recon = 1.0;
};

struct LossBreakdown {
  double l_theta = 0.0;
  double l_c = 0.0;
  double l_rs = 0.0;
  double total = 0.0;
  Var objective;
};

/// L = λ_θ·l_θ + λ_c·l_c + λ_rs·l_rs. Terms with zero weight are not built at all.
inline LossBreakdown total_loss(Var logits, const Tensor& targets, const std::vector<Var>& recon,
                                const std::vector<Tensor>& xs, Var z, const Classifier& clf,
                                const std::vector<std::size_t>& perm, const LossWeights& w, double eps = 1e-4) {
  LossBreakdown out;
  Var ce = cross_entropy(logits, targets);
  out.l_theta = ce.value().item();
  Var obj = scale(ce, w.theta);
  if (w.causal != 0.0) {
    Var lc = causal_loss(z, targets, clf, perm, eps);
    out.l_c = lc.value().item();
    obj = add(obj, scale(lc, w.causal));
  }
  if (w.recon != 0.0) {
    Var lrs = reconstruction_loss(recon, xs);
    out.l_rs = lrs.value().item();
    obj = add(obj, scale(lrs, w.recon));
  }
  out.objective = obj;
  out.total = obj.value().item();
  return out;
}

}  // namespace cat
