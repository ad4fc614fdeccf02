#pragma once

#include <cstddef>

#include "sctx/checkpoint.hpp"

namespace sctx {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double scale = 1.0;         // multiplies the schedule
  std::size_t warmup = 400;   // 0 selects a constant rate equal to `scale`
};

/// rate(step) = d_model^-0.5 * min(step^-0.5, step * warmup^-1.5), step >= 1.
double noam_rate(std::size_t step, std::size_t d_model, std::size_t warmup);

/// Adam over every parameter of a store. Moments are kept in the
/// parameters' precision.
template <typename T>
class Adam {
 public:
  Adam(ParameterStore<T>& store, const AdamConfig& config, std::size_t d_model);

  /// Learning rate used by update number `step` (1-based).
  double rate(std::size_t step) const;
  /// Applies one update from the accumulated gradients; returns the rate used.
  double update();
  std::size_t step() const { return step_; }

  /// "optim.m.<name>", "optim.v.<name>" and "optim.step".
  NamedTensors state() const;
  void load_state(const NamedTensors& entries);

 private:
  ParameterStore<T>& store_;
  AdamConfig config_;
  std::size_t d_model_;
  std::size_t step_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

}  // namespace sctx
