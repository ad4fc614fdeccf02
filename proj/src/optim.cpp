#include "sctx/optim.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "sctx/errors.hpp"

namespace sctx {

double noam_rate(std::size_t step, std::size_t d_model, std::size_t warmup) {
  if (step == 0) throw InputError("learning-rate schedule starts at step 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return std::pow(static_cast<double>(d_model), -0.5) * std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

template <typename T>
Adam<T>::Adam(ParameterStore<T>& store, const AdamConfig& config, std::size_t d_model)
    : store_(store), config_(config), d_model_(d_model) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    m_.emplace_back(store[i].value.shape(), T(0));
    v_.emplace_back(store[i].value.shape(), T(0));
  }
}

template <typename T>
double Adam<T>::rate(std::size_t step) const {
  return config_.warmup == 0 ? config_.scale : config_.scale * noam_rate(step, d_model_, config_.warmup);
}

template <typename T>
double Adam<T>::update() {
  ++step_;
  const double lr = rate(step_);
  const T b1 = static_cast<T>(config_.beta1), b2 = static_cast<T>(config_.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(config_.beta1, static_cast<double>(step_)));
  const T c2 = static_cast<T>(1.0 - std::pow(config_.beta2, static_cast<double>(step_)));
  const T step_size = static_cast<T>(lr);
  const T eps = static_cast<T>(config_.eps);
  for (std::size_t i = 0; i < store_.size(); ++i) {
    auto& p = store_[i];
    auto& m = m_[i].storage();
    auto& v = v_[i].storage();
    auto& w = p.value.storage();
    const auto& g = p.grad.storage();
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = b1 * m[k] + (T(1) - b1) * g[k];
      v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
      const T mhat = m[k] / c1;
      const T vhat = v[k] / c2;
      w[k] -= step_size * mhat / (std::sqrt(vhat) + eps);
    }
  }
  return lr;
}

template <typename T>
NamedTensors Adam<T>::state() const {
  NamedTensors out;
  for (std::size_t i = 0; i < store_.size(); ++i) out.emplace_back("optim.m." + store_[i].name, m_[i].template cast<float>());
  for (std::size_t i = 0; i < store_.size(); ++i) out.emplace_back("optim.v." + store_[i].name, v_[i].template cast<float>());
  out.emplace_back("optim.step", Tensor<float>::scalar(static_cast<float>(step_)));
  return out;
}

template <typename T>
void Adam<T>::load_state(const NamedTensors& entries) {
  std::unordered_map<std::string, const Tensor<float>*> by_name;
  for (const auto& [name, t] : entries) by_name[name] = &t;
  auto fetch = [&](const std::string& name, const Shape& shape) -> const Tensor<float>& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw IoError("checkpoint lacks optimizer entry '" + name + "'");
    if (it->second->shape() != shape) throw IoError("optimizer entry '" + name + "' has the wrong shape");
    return *it->second;
  };
  for (std::size_t i = 0; i < store_.size(); ++i) {
    m_[i] = fetch("optim.m." + store_[i].name, m_[i].shape()).template cast<T>();
    v_[i] = fetch("optim.v." + store_[i].name, v_[i].shape()).template cast<T>();
  }
  step_ = static_cast<std::size_t>(fetch("optim.step", {1})[0]);
}

template class Adam<float>;
template class Adam<double>;

}  // namespace sctx
