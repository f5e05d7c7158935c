#pragma once

// Shared fixtures for the unit tests and the acceptance harness.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "chaincnn/autodiff.hpp"
#include "chaincnn/data.hpp"
#include "chaincnn/model.hpp"
#include "chaincnn/tensor.hpp"

namespace chaincnn::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
  std::uniform_real_distribution<float> u(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

/// Like random_tensor but every entry has magnitude at least `gap`, so a
/// finite-difference step never crosses a ReLU kink.
inline Tensor random_away_from_zero(Shape shape, Rng& rng, float gap) {
  std::uniform_real_distribution<float> u(gap, 1.0f);
  std::bernoulli_distribution sign(0.5);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = sign(rng) ? u(rng) : -u(rng);
  return t;
}

/// Mask [batch, length] with a random real prefix of at least `min_real`
/// positions per row.
inline Tensor random_prefix_mask(std::size_t batch, std::size_t length, Rng& rng,
                                 std::size_t min_real = 1) {
  Tensor m({batch, length});
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t n = min_real + rng() % (length - min_real + 1);
    for (std::size_t p = 0; p < n; ++p) m[b * length + p] = 1.0f;
  }
  return m;
}

/// Records `sum(r * y)` as a scalar so any op output can seed backward.
inline Var weighted_sum(Var y, std::span<const float> r) {
  const Tensor& yv = y.value();
  double s = 0.0;
  for (std::size_t i = 0; i < yv.size(); ++i) s += static_cast<double>(r[i]) * yv[i];
  std::vector<float> weights(r.begin(), r.end());
  Tape* tape = y.tape;
  return tape->record(Tensor(Shape{1}, static_cast<float>(s)), {y},
                      [tape, y, weights](const Tensor&, std::span<const float> g) {
                        auto dy = tape->grad(y.id);
                        for (std::size_t i = 0; i < dy.size(); ++i) dy[i] += g[0] * weights[i];
                      });
}

struct GradcheckResult {
  /// Worst norm-wise relative error over the checked inputs.
  double rel_error = 0.0;
  std::string worst_input;
};

/// Compares reverse-mode gradients of f(inputs) = sum(r * op(inputs)) with
/// central differences (step h, divided by the step actually representable
/// in float). The objective is accumulated in double.
/// `op` builds the output on a fresh tape from leaf Vars of `inputs`.
inline GradcheckResult gradcheck(std::vector<Tensor> inputs, const std::vector<std::string>& names,
                                 const std::function<Var(Tape&, std::vector<Var>&)>& op, Rng& rng,
                                 float h = 1e-3f) {
  auto objective = [&](const std::vector<Tensor>& xs, std::span<const float> r) {
    Tape tape(false);
    std::vector<Var> vars;
    for (const auto& x : xs) vars.push_back(tape.leaf(x));
    const Tensor& y = op(tape, vars).value();
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += static_cast<double>(r[i]) * y[i];
    return s;
  };

  std::vector<float> r;
  std::vector<std::vector<float>> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& x : inputs) vars.push_back(tape.leaf(x, true));
    const Var y = op(tape, vars);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    r.resize(y.value().size());
    for (auto& v : r) v = u(rng);
    tape.backward(weighted_sum(y, r));
    for (const auto& v : vars) {
      const auto g = v.grad();
      analytic.emplace_back(g.begin(), g.end());
    }
  }

  GradcheckResult result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    double diff = 0.0, norm_a = 0.0, norm_n = 0.0;
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const float x0 = inputs[k][i];
      const float xp = x0 + h;
      const float xm = x0 - h;
      inputs[k][i] = xp;
      const double fp = objective(inputs, r);
      inputs[k][i] = xm;
      const double fm = objective(inputs, r);
      inputs[k][i] = x0;
      const double numeric = (fp - fm) / (static_cast<double>(xp) - static_cast<double>(xm));
      const double a = analytic[k][i];
      diff += (a - numeric) * (a - numeric);
      norm_a += a * a;
      norm_n += numeric * numeric;
    }
    const double denom = std::max({std::sqrt(norm_a), std::sqrt(norm_n), 1e-12});
    const double rel = std::sqrt(diff) / denom;
    if (rel > result.rel_error || result.worst_input.empty()) {
      result.rel_error = std::max(result.rel_error, rel);
      result.worst_input = k < names.size() ? names[k] : std::to_string(k);
    }
  }
  return result;
}

/// Short conditioned convolutional model for decoding tests: one block
/// with a width-3 filter and a width-3 FC window, receptive field 5.
inline ModelConfig toy_conditioned_config() {
  ModelConfig cfg;
  cfg.kind = ModelKind::convolutional;
  cfg.blocks = {BlockSpec{{}, FilterSpec{3, 8}}};
  cfg.fc_window = 3;
  cfg.fc_layers = 1;
  cfg.fc_width = 16;
  cfg.conditioned = true;
  cfg.dropout_rate = 0.0f;
  cfg.fc_max_norm = 1.0f;
  return cfg;
}

/// Scales every weight tensor so a random toy model produces varied,
/// non-degenerate distributions rather than near-one-hot ones.
inline void damp_weights(Model& model, float factor) {
  for (auto& l : model.layers())
    if (l.extra.empty())
      for (auto& v : l.weights.data()) v *= factor;
}

/// Random record of `length` residues with random labels.
inline ProteinRecord random_record(std::size_t length, Rng& rng, const std::string& id = "r") {
  ProteinRecord r;
  r.id = id;
  r.length = length;
  r.features.assign(length * kFeatureChannels, 0.0f);
  std::normal_distribution<float> n(0.0f, 1.0f);
  for (std::size_t p = 0; p < length; ++p) {
    r.features[p * kFeatureChannels + rng() % kResidueChannels] = 1.0f;
    for (std::size_t c = 0; c < kPssmChannels; ++c) r.features[p * kFeatureChannels + kResidueChannels + c] = n(rng);
    r.labels[p] = static_cast<int>(rng() % kStructureClasses);
  }
  return r;
}

}  // namespace chaincnn::testing
