#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "vcas/tensor.hpp"

namespace vcas {

struct GradCheckReport {
  bool passed = true;
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_element = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  std::string message;
};

struct GradCheckOptions {
  double h = 1e-5;
  double tol = 1e-4;
  // Floor of the relative-error denominator. Gradients smaller than this are
  // effectively compared with absolute tolerance tol * min_denominator, which
  // keeps round-off in (f(x+h) - f(x-h)) from failing exact zeros.
  double min_denominator = 1e-4;
  // Check at most this many elements per input (chosen with `seed`); 0 = all.
  std::size_t max_elements_per_input = 0;
  std::uint64_t seed = 0;
};

// Compares reverse-mode gradients of the scalar program `f` against central
// differences (f(x+h) - f(x-h)) / 2h. `f` must read `inputs` by handle, so
// perturbing their values in place changes its result. Relative error uses
// max(|analytic|, |numeric|, min_denominator) as denominator.
inline GradCheckReport gradient_check(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> inputs,
                                      const GradCheckOptions& opt = {}) {
  GradCheckReport rep;
  for (auto& x : inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> y = f();
    if (y.numel() != 1) {
      rep.passed = false;
      rep.message = "program output is not a scalar: " + y.shape().str();
      return rep;
    }
    if (!std::isfinite(y.item())) {
      rep.passed = false;
      rep.message = "program value is non-finite at the unperturbed point";
      return rep;
    }
    tape.backward(y);
    for (auto& x : inputs) {
      auto g = x.grad();
      analytic.emplace_back(g.begin(), g.end());
    }
  }

  NoGradScope<double> no_grad;
  std::mt19937_64 rng(opt.seed);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto vals = inputs[i].values();
    std::vector<std::size_t> idx(vals.size());
    for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = k;
    if (opt.max_elements_per_input && idx.size() > opt.max_elements_per_input) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opt.max_elements_per_input);
    }
    for (std::size_t k : idx) {
      const double saved = vals[k];
      vals[k] = saved + opt.h;
      const double fp = f().item();
      vals[k] = saved - opt.h;
      const double fm = f().item();
      vals[k] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        std::ostringstream os;
        os << "non-finite program value perturbing input " << i << " element " << k;
        rep.passed = false;
        rep.message = os.str();
        return rep;
      }
      const double num = (fp - fm) / (2 * opt.h);
      const double ana = analytic[i][k];
      const double denom = std::max({std::abs(ana), std::abs(num), opt.min_denominator});
      const double rel = std::abs(ana - num) / denom;
      ++rep.checked;
      if (rel > rep.max_rel_error || !std::isfinite(rel)) {
        rep.max_rel_error = rel;
        rep.worst_input = i;
        rep.worst_element = k;
        rep.worst_analytic = ana;
        rep.worst_numeric = num;
      }
    }
  }
  for (auto& x : inputs) x.zero_grad();
  rep.passed = rep.max_rel_error <= opt.tol;
  if (!rep.passed) {
    std::ostringstream os;
    os << "max relative error " << rep.max_rel_error << " at input " << rep.worst_input << " element "
       << rep.worst_element << " (analytic " << rep.worst_analytic << ", numeric " << rep.worst_numeric << ")";
    rep.message = os.str();
  }
  return rep;
}

}  // namespace vcas
