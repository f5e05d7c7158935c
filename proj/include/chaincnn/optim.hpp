#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "chaincnn/error.hpp"
#include "chaincnn/tensor.hpp"

namespace chaincnn {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  std::map<std::string, Tensor> first_moment;
  std::map<std::string, Tensor> second_moment;
  std::uint64_t step = 0;
};

/// One trainable tensor and its gradient.
struct ParamSlot {
  std::string name;
  Tensor* value = nullptr;
  std::span<const float> grad;
};

/// Bias-corrected Adam step. Every gradient is checked before any
/// parameter moves, so a non-finite entry leaves the model untouched.
inline void adam_update(std::span<const ParamSlot> params, AdamState& state, double lr,
                        const AdamConfig& cfg = {}) {
  for (const ParamSlot& p : params) {
    if (p.grad.size() != p.value->size())
      throw ShapeError("gradient for '" + p.name + "' has " + std::to_string(p.grad.size()) +
                       " entries, parameter has " + std::to_string(p.value->size()));
    for (std::size_t i = 0; i < p.grad.size(); ++i)
      if (!std::isfinite(p.grad[i]))
        throw NumericalError("non-finite gradient in '" + p.name + "' at index " +
                             std::to_string(i));
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  const float b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
  for (const ParamSlot& p : params) {
    auto [m_it, m_new] = state.first_moment.try_emplace(p.name, p.value->shape());
    auto [v_it, v_new] = state.second_moment.try_emplace(p.name, p.value->shape());
    Tensor& m = m_it->second;
    Tensor& v = v_it->second;
    require_shape(m, p.value->shape(), "adam first moment");
    require_shape(v, p.value->shape(), "adam second moment");
    auto w = p.value->data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const float g = p.grad[i];
      m[i] = b1 * m[i] + (1.0f - b1) * g;
      v[i] = b2 * v[i] + (1.0f - b2) * g * g;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] = static_cast<float>(w[i] - lr * mhat / (std::sqrt(vhat) + cfg.epsilon));
    }
  }
}

}  // namespace chaincnn
