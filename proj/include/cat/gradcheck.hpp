#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "cat/autodiff.hpp"

namespace cat {

/// A tensor the checker may perturb in place, with a display name.
struct NamedTensor {
  std::string name;
  Tensor* value;
};

struct GradCheckEntry {
  std::string name;
  std::size_t count = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_tape = 0.0;
  double worst_numeric = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;

  bool passed() const {
    return std::all_of(entries.begin(), entries.end(), [](const GradCheckEntry& e) { return e.passed; });
  }
  double max_rel_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
  }
};

struct GradCheckOptions {
  double h = 1e-5;
  double tol = 1e-3;
  /// Denominator floor: |a−b| / max(|a|, |b|, floor).
  double floor = 1e-5;
  /// Optional hook applied to the tape gradients before comparison (harness self-test).
  std::function<void(std::vector<Tensor>&)> tamper;
};

/// Builds a scalar on `tape` from parameters bound as tape leaves (same order as `params`).
using ScalarFn = std::function<Var(Tape& tape, const std::vector<Var>& params)>;

inline double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Compares tape gradients of `f` with central differences (f(p+h) − f(p−h)) / 2h
/// for every entry of every parameter. Failures are reported, never thrown.
inline GradCheckReport grad_check(const ScalarFn& f, const std::vector<NamedTensor>& params,
                                  const GradCheckOptions& opt = {}) {
  if (!(opt.h > 0.0)) throw ValidationError("grad_check: h must be positive");

  auto evaluate = [&](bool want_grads, std::vector<Tensor>* grads) {
    Tape tape;
    std::vector<Var> bound;
    bound.reserve(params.size());
    for (const auto& p : params) bound.push_back(tape.parameter(*p.value));
    Var out = f(tape, bound);
    const double value = out.value().item();
    if (want_grads) {
      tape.backward(out);
      grads->clear();
      for (const Var& v : bound) grads->push_back(tape.grad(v));
    }
    return value;
  };

  std::vector<Tensor> grads;
  evaluate(true, &grads);
  if (opt.tamper) opt.tamper(grads);

  GradCheckReport report;
  report.tolerance = opt.tol;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k].value;
    GradCheckEntry entry;
    entry.name = params[k].name;
    entry.count = p.size();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double orig = p[i];
      p[i] = orig + opt.h;
      const double fp = evaluate(false, nullptr);
      p[i] = orig - opt.h;
      const double fm = evaluate(false, nullptr);
      p[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opt.h);
      const double err = relative_error(grads[k][i], numeric, opt.floor);
      if (std::isnan(err) || err > entry.max_rel_error) {
        entry.max_rel_error = std::isnan(err) ? std::numeric_limits<double>::infinity() : err;
        entry.worst_index = i;
        entry.worst_tape = grads[k][i];
        entry.worst_numeric = numeric;
      }
    }
    entry.passed = entry.max_rel_error < opt.tol;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace cat
