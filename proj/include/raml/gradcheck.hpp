#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace raml {

struct GradCheckOptions {
  int seeds = 20;
  double step = 1e-5;
  double tolerance = 1e-4;
  double floor = 1e-5;  // relative error = |a - n| / max(|a|, |n|, floor)
};

struct GradCheckEntry {
  std::string name;
  std::uint64_t seed = 0;
  std::size_t coordinates = 0;
  double max_relative_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double worst = 0.0;
  bool pass = true;
};

/// Loss with analytic gradient: returns L(x) and, when `grad` is non-null,
/// writes dL/dx (same length as x).
using ScalarFn = std::function<double(const std::vector<double>& x, std::vector<double>* grad)>;

/// Largest relative error between the analytic gradient and central
/// differences over every coordinate of x.
double max_relative_error(const ScalarFn& fn, const std::vector<double>& x, double step, double floor);

/// Circle loss alone, then seg loss, the combined fine-tuning objective
/// (sigmoid and softmax activations) and the circle loss on pooled region
/// embeddings, each through a small double-precision network, for every seed.
GradCheckReport run_grad_checks(const GradCheckOptions& opt);

}  // namespace raml
