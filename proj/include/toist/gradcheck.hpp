#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "toist/tensor.hpp"

namespace toist::ad {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> params;
  double max_rel_error = 0.0;
  bool passed = false;
};

// Compares the tape gradient of a scalar function against five-point
// central differences. Relative error is |a - n| / max(|a|, |n|, floor); the floor
// keeps entries whose true gradient is ~0 from dividing noise by noise.
// Parameter gradients are overwritten.
inline GradCheckReport finite_difference_check(
    const std::function<Var<double>(Tape<double>&)>& f, const std::vector<Parameter<double>*>& params,
    double step = 1e-5, double tolerance = 1e-4, double floor = 1e-6) {
  GradCheckReport report;
  for (Parameter<double>* p : params) p->zero_grad();
  bool finite = true;
  {
    Tape<double> tape;
    Var<double> y = f(tape);
    finite = std::isfinite(y.item());
    tape.backward(y);
  }
  auto eval = [&]() {
    Tape<double> tape;
    return f(tape).item();
  };
  for (Parameter<double>* p : params) {
    GradCheckEntry entry{p->name, 0.0};
    double* x = p->value.data.data();
    const double* analytic = p->grad.data();
    for (Index i = 0; i < p->value.size(); ++i) {
      const double saved = x[i];
      auto at = [&](double dx) {
        x[i] = saved + dx;
        return eval();
      };
      const double numeric = (-at(2 * step) + 8 * at(step) - 8 * at(-step) + at(-2 * step)) / (12.0 * step);
      x[i] = saved;
      if (!std::isfinite(numeric) || !std::isfinite(analytic[i])) {
        finite = false;
        continue;
      }
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      entry.max_rel_error = std::max(entry.max_rel_error, std::abs(analytic[i] - numeric) / denom);
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.params.push_back(std::move(entry));
  }
  report.passed = finite && report.max_rel_error <= tolerance;
  return report;
}

}  // namespace toist::ad
