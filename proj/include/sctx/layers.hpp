#pragma once

#include <cmath>
#include <string>

#include "sctx/ops.hpp"

namespace sctx {

/// Uniform init with the Glorot bound sqrt(6 / (fan_in + fan_out)).
template <typename T>
Tensor<T> glorot(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  Tensor<T> t({fan_in, fan_out});
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : t.storage()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <typename T>
Tensor<T> uniform_init(Shape shape, double bound, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.storage()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

/// y = x W + b with W [in, out]. Key projections are built without b: a
/// key bias only shifts every attention score of a query by the same amount.
template <typename T>
struct Linear {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;

  static Linear create(ParameterStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
                       Rng& rng, bool with_bias = true) {
    Linear l;
    l.weight = &store.add(name + ".w", glorot<T>(in, out, rng));
    if (with_bias) l.bias = &store.add(name + ".b", Tensor<T>({out}, T(0)));
    return l;
  }

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) const {
    const Var<T> y = matmul(x, tape.param(*weight));
    return bias ? add(y, tape.param(*bias)) : y;
  }
};

template <typename T>
struct LayerNormParams {
  Parameter<T>* gamma = nullptr;
  Parameter<T>* beta = nullptr;

  static LayerNormParams create(ParameterStore<T>& store, const std::string& name, std::size_t d) {
    LayerNormParams n;
    n.gamma = &store.add(name + ".g", Tensor<T>({d}, T(1)));
    n.beta = &store.add(name + ".b", Tensor<T>({d}, T(0)));
    return n;
  }

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) const {
    return layer_norm(x, tape.param(*gamma), tape.param(*beta));
  }
};

/// Two-layer ReLU network [in -> hidden -> out].
template <typename T>
struct FeedForward {
  Linear<T> inner;
  Linear<T> outer;

  static FeedForward create(ParameterStore<T>& store, const std::string& name, std::size_t in, std::size_t hidden,
                            std::size_t out, Rng& rng) {
    return {Linear<T>::create(store, name + ".w1", in, hidden, rng),
            Linear<T>::create(store, name + ".w2", hidden, out, rng)};
  }

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) const { return outer(tape, relu(inner(tape, x))); }
};

/// Dropout switch shared by a forward pass: active only when training.
template <typename T>
struct Dropout {
  T rate = T(0);
  Rng* rng = nullptr;

  bool active() const { return rng != nullptr && rate > T(0); }
  Var<T> operator()(const Var<T>& x) const { return active() ? dropout(x, rate, *rng) : x; }
  T attention_rate() const { return active() ? rate : T(0); }
};

}  // namespace sctx
