#pragma once

#include <cmath>
#include <map>
#include <random>
#include <string>

#include "chaincnn/autodiff.hpp"
#include "chaincnn/tensor.hpp"

namespace chaincnn {

inline constexpr float kBiasInit = 0.1f;
inline constexpr float kWeightInitScale = 3.0f;

/// Trainable weights and biases of one layer plus named auxiliary tensors
/// (running statistics for batch norm).
struct LayerParams {
  std::string name;
  Tensor weights;
  Tensor biases;
  std::map<std::string, Tensor> extra;
};

/// Zero-centred Gaussian with standard deviation 3/sqrt(fan_in).
inline Tensor init_weights(Shape shape, std::size_t fan_in, Rng& rng) {
  if (fan_in == 0) throw ConfigError("init_weights: fan-in must be at least 1");
  Tensor t(std::move(shape));
  std::normal_distribution<float> dist(0.0f, kWeightInitScale / std::sqrt(static_cast<float>(fan_in)));
  for (float& v : t.data()) v = dist(rng);
  return t;
}

inline Tensor init_bias(Shape shape) { return Tensor(std::move(shape), kBiasInit); }

/// Rescales each output unit's incoming weight vector onto the l2 ball of
/// radius c. `weights` is viewed as [fan_in, units] (the last axis indexes
/// units). Columns within c*(1+1e-6) are left untouched, which makes the
/// projection idempotent under float rounding.
inline void max_norm_project(Tensor& weights, float c) {
  if (!(c > 0.0f)) throw ConfigError("max-norm radius must be positive");
  const std::size_t units = weights.shape().back();
  const std::size_t fan_in = weights.size() / units;
  std::vector<double> sq(units, 0.0);
  for (std::size_t i = 0; i < fan_in; ++i)
    for (std::size_t j = 0; j < units; ++j) {
      const double w = weights[i * units + j];
      sq[j] += w * w;
    }
  const double limit = static_cast<double>(c) * (1.0 + 1e-6);
  for (std::size_t j = 0; j < units; ++j) {
    const double norm = std::sqrt(sq[j]);
    if (norm <= limit) continue;
    const double factor = static_cast<double>(c) / norm;
    for (std::size_t i = 0; i < fan_in; ++i)
      weights[i * units + j] = static_cast<float>(weights[i * units + j] * factor);
  }
}

inline std::vector<double> column_norms(const Tensor& weights) {
  const std::size_t units = weights.shape().back();
  const std::size_t fan_in = weights.size() / units;
  std::vector<double> sq(units, 0.0);
  for (std::size_t i = 0; i < fan_in; ++i)
    for (std::size_t j = 0; j < units; ++j) sq[j] += double(weights[i * units + j]) * weights[i * units + j];
  for (double& s : sq) s = std::sqrt(s);
  return sq;
}

}  // namespace chaincnn
