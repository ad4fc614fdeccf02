#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sctx/tape.hpp"

namespace sctx {

struct GradCheckOptions {
  double step = 1e-3;       // central-difference half width
  double tolerance = 1e-3;  // on the relative error below
  // 0 checks every element; otherwise a seeded sample of this many per parameter.
  std::size_t max_elements_per_param = 0;
  std::uint64_t sample_seed = 0;
  // When the +/- step evaluations take a different ReLU / max-pool branch
  // than the unperturbed point, retry with step/10, ... down to min_step.
  bool refine_at_kinks = true;
  // When the plain difference D(h) misses the tolerance, compare against
  // (4 D(h/2) - D(h)) / 3 instead, which cancels the O(h^2) truncation term.
  bool richardson = true;
  double min_step = 1e-7;
};

struct ParamGradReport {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0;  // |a - n| / (|a| + |n| + 1e-12), max over checked elements
  std::size_t worst_index = 0;
  double analytic_at_worst = 0;
  double numeric_at_worst = 0;
  // Elements whose +/- step evaluations took a different branch of some
  // ReLU / max-pool than the unperturbed point.
  std::size_t kink_crossings = 0;
  std::size_t refined = 0;     // crossings resolved by a smaller step
  std::size_t unresolved = 0;  // still crossing at min_step; not compared
};

struct GradCheckReport {
  std::vector<ParamGradReport> params;
  double max_rel_error = 0;
  bool passed = false;
  std::size_t kink_crossings = 0;
  std::size_t refined = 0;
  std::size_t unresolved = 0;
};

/// Builds the scalar loss on the given tape. Must be deterministic.
using LossBuilder = std::function<Var<double>(Tape<double>&)>;

double relative_error(double analytic, double numeric);

/// Compares reverse-mode gradients against central differences for every
/// listed parameter. Runs in 64-bit only.
GradCheckReport grad_check(const LossBuilder& loss, const std::vector<Parameter<double>*>& params,
                           const GradCheckOptions& options = {});
GradCheckReport grad_check(const LossBuilder& loss, ParameterStore<double>& store,
                           const GradCheckOptions& options = {});

std::string describe(const GradCheckReport& report);

}  // namespace sctx
