#pragma once

// Tape-based reverse-mode differentiation over the layer set the sequence
// models need: 1D convolution, dense, batch norm, ReLU, dropout, channel
// concatenation, position masking and masked softmax cross-entropy.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "chaincnn/error.hpp"
#include "chaincnn/kernels.hpp"
#include "chaincnn/tensor.hpp"

namespace chaincnn {

using Rng = std::mt19937_64;

enum class Mode { train, infer };

class Tape;

/// Handle to a tape node.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  std::span<float> grad() const;
  bool requires_grad() const;
};

class Tape {
 public:
  /// Receives the node's own value and gradient; adds into parents' grads.
  using Backward = std::function<void(const Tensor& value, std::span<const float> grad)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }

  Var leaf(Tensor value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), nullptr, requires_grad && grad_enabled_, {}, {}});
    return Var{this, nodes_.size() - 1};
  }

  /// Leaf that reads `value` in place; it must outlive the tape.
  Var leaf_ref(const Tensor& value, bool requires_grad = false) {
    nodes_.push_back(Node{Tensor{}, &value, requires_grad && grad_enabled_, {}, {}});
    return Var{this, nodes_.size() - 1};
  }

  /// Adds an op result. The backward function is kept only when some parent
  /// needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> parents, Backward backward) {
    return record_impl(std::move(value), parents.begin(), parents.end(), std::move(backward));
  }

  Var record(Tensor value, const std::vector<Var>& parents, Backward backward) {
    return record_impl(std::move(value), parents.begin(), parents.end(), std::move(backward));
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value(); }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Gradient buffer of a node, zero-initialised on first access.
  std::span<float> grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad.assign(n.value().size(), 0.0f);
    return n.grad;
  }
  bool has_grad(std::size_t id) const { return !nodes_.at(id).grad.empty(); }

  /// Seeds d(root)/d(root) = 1 and runs every recorded backward in reverse.
  void backward(Var root) {
    if (root.tape != this) throw ConfigError("backward root belongs to another tape");
    if (value(root.id).size() != 1) throw ShapeError("backward root must be a scalar");
    if (!nodes_[root.id].requires_grad) return;
    grad(root.id)[0] = 1.0f;
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.backward || node.grad.empty()) continue;
      node.backward(node.value(), node.grad);
    }
  }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    bool requires_grad = false;
    std::vector<float> grad;
    Backward backward;

    const Tensor& value() const { return external ? *external : owned; }
  };

  template <typename It>
  Var record_impl(Tensor value, It first, It last, Backward backward) {
    bool needs = false;
    if (grad_enabled_)
      for (It p = first; p != last; ++p) needs = needs || nodes_[p->id].requires_grad;
    nodes_.push_back(Node{std::move(value), nullptr, needs, {}, needs ? std::move(backward) : Backward{}});
    return Var{this, nodes_.size() - 1};
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }
inline std::span<float> Var::grad() const { return tape->grad(id); }
inline bool Var::requires_grad() const { return tape->requires_grad(id); }

namespace detail {

// Conv forward on raw buffers; out must hold the bias-initialised result.
inline void conv_forward(const float* x, std::size_t batch, std::size_t length, std::size_t in_ch,
                         const float* w, std::size_t width, std::size_t out_ch, float* y) {
  const std::size_t radius = (width - 1) / 2;
  const std::size_t window = width * in_ch;
  std::vector<float> scratch(kernels::kRowBlock * window);
  const float* rows[kernels::kRowBlock];
  float* outs[kernels::kRowBlock];
  for (std::size_t b = 0; b < batch; ++b) {
    const float* xb = x + b * length * in_ch;
    for (std::size_t t0 = 0; t0 < length; t0 += kernels::kRowBlock) {
      const std::size_t n = std::min(kernels::kRowBlock, length - t0);
      for (std::size_t r = 0; r < n; ++r) {
        const std::size_t t = t0 + r;
        outs[r] = y + (b * length + t) * out_ch;
        if (t >= radius && t + radius < length) {
          rows[r] = xb + (t - radius) * in_ch;
        } else {
          float* s = scratch.data() + r * window;
          std::fill(s, s + window, 0.0f);
          for (std::size_t k = 0; k < width; ++k) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(radius);
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(length)) continue;
            std::copy_n(xb + src * in_ch, in_ch, s + k * in_ch);
          }
          rows[r] = s;
        }
      }
      kernels::accumulate(std::span<const float* const>(rows, n), window, w, out_ch,
                          std::span<float* const>(outs, n));
    }
  }
}

inline void conv_backward(const float* x, std::size_t batch, std::size_t length,
                          std::size_t in_ch, const float* w, std::size_t width, std::size_t out_ch,
                          const float* dy, float* dx, float* dw, float* db) {
  const std::size_t radius = (width - 1) / 2;
  const std::size_t window = width * in_ch;
  std::vector<float> wt;
  if (dx) {
    wt.resize(window * out_ch);
    kernels::transpose(w, window, out_ch, wt.data());
  }
  std::vector<float> scratch(kernels::kRowBlock * window);
  std::vector<float> dwin(kernels::kRowBlock * window);
  const float* rows[kernels::kRowBlock];
  const float* grads[kernels::kRowBlock];
  float* douts[kernels::kRowBlock];
  for (std::size_t b = 0; b < batch; ++b) {
    const float* xb = x + b * length * in_ch;
    for (std::size_t t0 = 0; t0 < length; t0 += kernels::kRowBlock) {
      const std::size_t n = std::min(kernels::kRowBlock, length - t0);
      for (std::size_t r = 0; r < n; ++r) {
        const std::size_t t = t0 + r;
        grads[r] = dy + (b * length + t) * out_ch;
        douts[r] = dwin.data() + r * window;
        if (t >= radius && t + radius < length) {
          rows[r] = xb + (t - radius) * in_ch;
        } else {
          float* s = scratch.data() + r * window;
          std::fill(s, s + window, 0.0f);
          for (std::size_t k = 0; k < width; ++k) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(radius);
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(length)) continue;
            std::copy_n(xb + src * in_ch, in_ch, s + k * in_ch);
          }
          rows[r] = s;
        }
      }
      if (dw)
        kernels::rank_update(std::span<const float* const>(rows, n), window,
                             std::span<const float* const>(grads, n), out_ch, dw);
      if (db)
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < out_ch; ++j) db[j] += grads[r][j];
      if (dx) {
        std::fill(dwin.begin(), dwin.end(), 0.0f);
        kernels::accumulate(std::span<const float* const>(grads, n), out_ch, wt.data(), window,
                            std::span<float* const>(douts, n));
        for (std::size_t r = 0; r < n; ++r) {
          const std::size_t t = t0 + r;
          for (std::size_t k = 0; k < width; ++k) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(radius);
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(length)) continue;
            float* dst = dx + (b * length + static_cast<std::size_t>(src)) * in_ch;
            const float* from = douts[r] + k * in_ch;
            for (std::size_t c = 0; c < in_ch; ++c) dst[c] += from[c];
          }
        }
      }
    }
  }
}

inline void require_mask(const Tensor& mask, std::size_t batch, std::size_t length,
                         const char* what) {
  if (mask.shape() != Shape{batch, length})
    throw ShapeError(std::string(what) + ": mask " + shape_string(mask.shape()) +
                     " does not match [" + std::to_string(batch) + "," + std::to_string(length) +
                     "]");
}

}  // namespace detail

/// SAME-length 1D convolution with zero padding.
/// x: [batch, length, in_ch], w: [width, in_ch, out_ch], b: [out_ch].
inline Var conv1d(Var x, Var w, Var b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  require_rank(xv, 3, "conv1d input");
  require_rank(wv, 3, "conv1d filter");
  const std::size_t batch = xv.dim(0), length = xv.dim(1), in_ch = xv.dim(2);
  const std::size_t width = wv.dim(0), out_ch = wv.dim(2);
  if (wv.dim(1) != in_ch)
    throw ShapeError("conv1d filter expects " + std::to_string(wv.dim(1)) +
                     " input channels, input has " + std::to_string(in_ch));
  if (width % 2 == 0) throw ShapeError("conv1d filter width must be odd");
  require_shape(bv, {out_ch}, "conv1d bias");

  Tensor y({batch, length, out_ch});
  for (std::size_t i = 0; i < batch * length; ++i)
    std::copy_n(bv.raw(), out_ch, y.raw() + i * out_ch);
  detail::conv_forward(xv.raw(), batch, length, in_ch, wv.raw(), width, out_ch, y.raw());

  Tape* tape = x.tape;
  return tape->record(std::move(y), {x, w, b},
                      [tape, x, w, b, batch, length, in_ch, width, out_ch](
                          const Tensor&, std::span<const float> g) {
                        const Tensor& xv = tape->value(x.id);
                        const Tensor& wv = tape->value(w.id);
                        float* dx = tape->requires_grad(x.id) ? tape->grad(x.id).data() : nullptr;
                        float* dw = tape->requires_grad(w.id) ? tape->grad(w.id).data() : nullptr;
                        float* db = tape->requires_grad(b.id) ? tape->grad(b.id).data() : nullptr;
                        detail::conv_backward(xv.raw(), batch, length, in_ch, wv.raw(), width,
                                              out_ch, g.data(), dx, dw, db);
                      });
}

/// Affine map over the last axis: x[..., in] · w[in, out] + b[out]. Weights
/// of higher rank are read as [product of leading axes, out], so a
/// [width, ch, out] filter applies to a gathered window of width * ch.
inline Var dense(Var x, Var w, Var b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (wv.rank() < 2) throw ShapeError("dense weights must have rank >= 2");
  const std::size_t out = wv.shape().back();
  const std::size_t in = wv.size() / out;
  if (xv.rank() < 1 || xv.shape().back() != in)
    throw ShapeError("dense weights have " + std::to_string(in) + " rows, input is " +
                     shape_string(xv.shape()));
  require_shape(b.value(), {out}, "dense bias");
  const std::size_t rows = xv.size() / in;
  Shape out_shape = xv.shape();
  out_shape.back() = out;
  Tensor y(out_shape);
  for (std::size_t i = 0; i < rows; ++i) std::copy_n(b.value().raw(), out, y.raw() + i * out);
  detail::conv_forward(xv.raw(), 1, rows, in, wv.raw(), 1, out, y.raw());

  Tape* tape = x.tape;
  return tape->record(std::move(y), {x, w, b},
                      [tape, x, w, b, rows, in, out](const Tensor&, std::span<const float> g) {
                        float* dx = tape->requires_grad(x.id) ? tape->grad(x.id).data() : nullptr;
                        float* dw = tape->requires_grad(w.id) ? tape->grad(w.id).data() : nullptr;
                        float* db = tape->requires_grad(b.id) ? tape->grad(b.id).data() : nullptr;
                        detail::conv_backward(tape->value(x.id).raw(), 1, rows, in,
                                              tape->value(w.id).raw(), 1, out, g.data(), dx, dw,
                                              db);
                      });
}

inline Var relu(Var x) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = xv[i] > 0.0f ? xv[i] : 0.0f;
  Tape* tape = x.tape;
  return tape->record(std::move(y), {x}, [tape, x](const Tensor&, std::span<const float> g) {
    const Tensor& xv = tape->value(x.id);
    auto dx = tape->grad(x.id);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0f) dx[i] += g[i];
  });
}

/// Inverted dropout: survivors are scaled by 1/(1-rate) at train time and
/// inference is the identity.
inline Var dropout(Var x, float rate, Mode mode, Rng& rng) {
  if (!(rate >= 0.0f && rate < 1.0f))
    throw ConfigError("dropout rate must lie in [0,1), got " + std::to_string(rate));
  if (mode == Mode::infer || rate == 0.0f) return x;
  const Tensor& xv = x.value();
  const float scale = 1.0f / (1.0f - rate);
  std::vector<float> keep(xv.size());
  std::bernoulli_distribution survive(1.0 - static_cast<double>(rate));
  for (float& k : keep) k = survive(rng) ? scale : 0.0f;
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = keep[i] != 0.0f ? xv[i] * keep[i] : 0.0f;
  Tape* tape = x.tape;
  return tape->record(std::move(y), {x},
                      [tape, x, keep = std::move(keep)](const Tensor&, std::span<const float> g) {
                        auto dx = tape->grad(x.id);
                        for (std::size_t i = 0; i < g.size(); ++i)
                          if (keep[i] != 0.0f) dx[i] += g[i] * keep[i];
                      });
}

/// Zeroes every masked-out position. mask: [batch, length] of 0/1.
inline Var apply_mask(Var x, const Tensor& mask) {
  const Tensor& xv = x.value();
  require_rank(xv, 3, "mask input");
  const std::size_t batch = xv.dim(0), length = xv.dim(1), ch = xv.dim(2);
  detail::require_mask(mask, batch, length, "apply_mask");
  Tensor y(xv.shape());
  for (std::size_t p = 0; p < batch * length; ++p)
    if (mask[p] != 0.0f) std::copy_n(xv.raw() + p * ch, ch, y.raw() + p * ch);
  Tape* tape = x.tape;
  return tape->record(std::move(y), {x},
                      [tape, x, mask, ch](const Tensor&, std::span<const float> g) {
                        auto dx = tape->grad(x.id);
                        for (std::size_t p = 0; p < mask.size(); ++p)
                          if (mask[p] != 0.0f)
                            for (std::size_t c = 0; c < ch; ++c) dx[p * ch + c] += g[p * ch + c];
                      });
}

/// Depth concatenation of [batch, length, c_i] tensors.
inline Var concat_channels(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Tensor& first = parts.front().value();
  require_rank(first, 3, "concat input");
  const std::size_t batch = first.dim(0), length = first.dim(1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    require_rank(v, 3, "concat input");
    if (v.dim(0) != batch || v.dim(1) != length)
      throw ShapeError("concat inputs disagree on batch/length: " + shape_string(first.shape()) +
                       " vs " + shape_string(v.shape()));
    widths.push_back(v.dim(2));
    total += v.dim(2);
  }
  Tensor y({batch, length, total});
  std::size_t offset = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor& v = parts[i].value();
    for (std::size_t p = 0; p < batch * length; ++p)
      std::copy_n(v.raw() + p * widths[i], widths[i], y.raw() + p * total + offset);
    offset += widths[i];
  }
  Tape* tape = parts.front().tape;
  return tape->record(std::move(y), parts,
                      [tape, parts, widths, total](const Tensor&, std::span<const float> g) {
                        std::size_t offset = 0;
                        for (std::size_t i = 0; i < parts.size(); ++i) {
                          if (tape->requires_grad(parts[i].id)) {
                            auto dx = tape->grad(parts[i].id);
                            const std::size_t positions = dx.size() / widths[i];
                            for (std::size_t p = 0; p < positions; ++p)
                              for (std::size_t c = 0; c < widths[i]; ++c)
                                dx[p * widths[i] + c] += g[p * total + offset + c];
                          }
                          offset += widths[i];
                        }
                      });
}

struct BatchNormConfig {
  float momentum = 0.99f;
  float epsilon = 1e-5f;
};

/// Per-channel batch normalisation with statistics over masked-in positions.
/// Masked-out positions go through the same affine transform. Train mode
/// updates the running statistics by exponential moving average.
inline Var batch_norm(Var x, const Tensor& mask, Var scale, Var shift, Tensor& running_mean,
                      Tensor& running_var, Mode mode, BatchNormConfig cfg = {}) {
  const Tensor& xv = x.value();
  require_rank(xv, 3, "batch_norm input");
  const std::size_t batch = xv.dim(0), length = xv.dim(1), ch = xv.dim(2);
  detail::require_mask(mask, batch, length, "batch_norm");
  require_shape(scale.value(), {ch}, "batch_norm scale");
  require_shape(shift.value(), {ch}, "batch_norm shift");
  require_shape(running_mean, {ch}, "batch_norm running mean");
  require_shape(running_var, {ch}, "batch_norm running variance");

  std::vector<float> mean(ch), inv_std(ch);
  std::size_t count = 0;
  if (mode == Mode::train) {
    for (std::size_t p = 0; p < batch * length; ++p) count += mask[p] != 0.0f;
    if (count < 2)
      throw NumericalError("batch_norm: degenerate statistics, " + std::to_string(count) +
                           " masked-in positions");
    std::vector<double> sum(ch, 0.0), sq(ch, 0.0);
    for (std::size_t p = 0; p < batch * length; ++p) {
      if (mask[p] == 0.0f) continue;
      for (std::size_t c = 0; c < ch; ++c) sum[c] += xv[p * ch + c];
    }
    for (std::size_t c = 0; c < ch; ++c) sum[c] /= static_cast<double>(count);
    for (std::size_t p = 0; p < batch * length; ++p) {
      if (mask[p] == 0.0f) continue;
      for (std::size_t c = 0; c < ch; ++c) {
        const double d = xv[p * ch + c] - sum[c];
        sq[c] += d * d;
      }
    }
    for (std::size_t c = 0; c < ch; ++c) {
      const double var = sq[c] / static_cast<double>(count);
      mean[c] = static_cast<float>(sum[c]);
      inv_std[c] = static_cast<float>(1.0 / std::sqrt(var + cfg.epsilon));
      running_mean[c] = cfg.momentum * running_mean[c] + (1.0f - cfg.momentum) * mean[c];
      running_var[c] =
          cfg.momentum * running_var[c] + (1.0f - cfg.momentum) * static_cast<float>(var);
    }
  } else {
    for (std::size_t c = 0; c < ch; ++c) {
      mean[c] = running_mean[c];
      inv_std[c] = static_cast<float>(1.0 / std::sqrt(static_cast<double>(running_var[c]) + cfg.epsilon));
    }
  }

  const Tensor& gamma = scale.value();
  const Tensor& beta = shift.value();
  Tensor y(xv.shape());
  for (std::size_t p = 0; p < batch * length; ++p)
    for (std::size_t c = 0; c < ch; ++c)
      y[p * ch + c] = gamma[c] * ((xv[p * ch + c] - mean[c]) * inv_std[c]) + beta[c];

  Tape* tape = x.tape;
  return tape->record(
      std::move(y), {x, scale, shift},
      [tape, x, scale, shift, mask, mean, inv_std, count, ch, train = mode == Mode::train](
          const Tensor&, std::span<const float> g) {
        const Tensor& xv = tape->value(x.id);
        const Tensor& gamma = tape->value(scale.id);
        const std::size_t positions = xv.size() / ch;
        std::vector<double> dgamma(ch, 0.0), dbeta(ch, 0.0), dvar(ch, 0.0), dxhat_sum(ch, 0.0);
        for (std::size_t p = 0; p < positions; ++p)
          for (std::size_t c = 0; c < ch; ++c) {
            const double centered = xv[p * ch + c] - mean[c];
            const double gy = g[p * ch + c];
            dgamma[c] += gy * centered * inv_std[c];
            dbeta[c] += gy;
            const double dxhat = gy * gamma[c];
            dxhat_sum[c] += dxhat;
            dvar[c] += dxhat * centered;
          }
        if (tape->requires_grad(scale.id)) {
          auto ds = tape->grad(scale.id);
          for (std::size_t c = 0; c < ch; ++c) ds[c] += static_cast<float>(dgamma[c]);
        }
        if (tape->requires_grad(shift.id)) {
          auto dsh = tape->grad(shift.id);
          for (std::size_t c = 0; c < ch; ++c) dsh[c] += static_cast<float>(dbeta[c]);
        }
        if (!tape->requires_grad(x.id)) return;
        auto dx = tape->grad(x.id);
        const double n = static_cast<double>(count);
        for (std::size_t p = 0; p < positions; ++p) {
          const bool in = train && mask[p] != 0.0f;
          for (std::size_t c = 0; c < ch; ++c) {
            const double s = inv_std[c];
            double d = g[p * ch + c] * gamma[c] * s;
            if (in) {
              const double centered = xv[p * ch + c] - mean[c];
              const double dmean = -s * dxhat_sum[c];
              const double dv = -0.5 * s * s * s * dvar[c];
              d += dmean / n + dv * 2.0 * centered / n;
            }
            dx[p * ch + c] += static_cast<float>(d);
          }
        }
      });
}

/// Mean over masked-in positions of -log softmax(logits)[label]. Masked-out
/// positions contribute nothing to the loss or its gradient.
inline Var softmax_cross_entropy(Var logits, std::span<const int> labels, const Tensor& mask) {
  const Tensor& lv = logits.value();
  require_rank(lv, 3, "cross-entropy logits");
  const std::size_t batch = lv.dim(0), length = lv.dim(1), classes = lv.dim(2);
  detail::require_mask(mask, batch, length, "softmax_cross_entropy");
  if (labels.size() != batch * length)
    throw ShapeError("cross-entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(batch * length) + " positions");
  std::size_t count = 0;
  for (std::size_t p = 0; p < batch * length; ++p) {
    if (mask[p] == 0.0f) continue;
    ++count;
    if (labels[p] < 0 || static_cast<std::size_t>(labels[p]) >= classes)
      throw DataError("cross-entropy: label " + std::to_string(labels[p]) + " out of range at " +
                      std::to_string(p));
  }
  if (count == 0) throw NumericalError("cross-entropy: no masked-in positions (empty loss)");

  std::vector<float> probs(batch * length * classes, 0.0f);
  double total = 0.0;
  for (std::size_t p = 0; p < batch * length; ++p) {
    if (mask[p] == 0.0f) continue;
    const float* z = lv.raw() + p * classes;
    double mx = z[0];
    for (std::size_t k = 1; k < classes; ++k) mx = std::max(mx, static_cast<double>(z[k]));
    double sum = 0.0;
    for (std::size_t k = 0; k < classes; ++k) sum += std::exp(z[k] - mx);
    const double lse = mx + std::log(sum);
    total += lse - z[labels[p]];
    for (std::size_t k = 0; k < classes; ++k)
      probs[p * classes + k] = static_cast<float>(std::exp(z[k] - lse));
  }
  Tensor loss(Shape{1}, static_cast<float>(total / static_cast<double>(count)));

  Tape* tape = logits.tape;
  std::vector<int> lab(labels.begin(), labels.end());
  return tape->record(std::move(loss), {logits},
                      [tape, logits, probs = std::move(probs), lab = std::move(lab), mask, count,
                       classes](const Tensor&, std::span<const float> g) {
                        auto dz = tape->grad(logits.id);
                        const float scale = g[0] / static_cast<float>(count);
                        for (std::size_t p = 0; p < lab.size(); ++p) {
                          if (mask[p] == 0.0f) continue;
                          for (std::size_t k = 0; k < classes; ++k) {
                            const float target = static_cast<int>(k) == lab[p] ? 1.0f : 0.0f;
                            dz[p * classes + k] += (probs[p * classes + k] - target) * scale;
                          }
                        }
                      });
}

/// Gathers a centred window of `width` positions around one position per
/// batch row: [batch, length, ch] -> [batch, width * ch], zero outside.
inline Var gather_window(Var x, std::span<const std::size_t> centers, std::size_t width) {
  const Tensor& xv = x.value();
  require_rank(xv, 3, "window input");
  const std::size_t batch = xv.dim(0), length = xv.dim(1), ch = xv.dim(2);
  if (centers.size() != batch) throw ShapeError("gather_window: one centre per batch row");
  if (width % 2 == 0) throw ShapeError("gather_window: width must be odd");
  const std::ptrdiff_t radius = static_cast<std::ptrdiff_t>((width - 1) / 2);
  Tensor y({batch, width * ch});
  std::vector<std::ptrdiff_t> sources(batch * width, -1);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t k = 0; k < width; ++k) {
      const std::ptrdiff_t src =
          static_cast<std::ptrdiff_t>(centers[b]) - radius + static_cast<std::ptrdiff_t>(k);
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(length)) continue;
      sources[b * width + k] = src;
      std::copy_n(xv.raw() + (b * length + static_cast<std::size_t>(src)) * ch, ch,
                  y.raw() + (b * width + k) * ch);
    }
  Tape* tape = x.tape;
  return tape->record(std::move(y), {x},
                      [tape, x, sources = std::move(sources), width, length, ch](
                          const Tensor&, std::span<const float> g) {
                        auto dx = tape->grad(x.id);
                        for (std::size_t i = 0; i < sources.size(); ++i) {
                          if (sources[i] < 0) continue;
                          const std::size_t b = i / width;
                          float* dst = dx.data() + (b * length + static_cast<std::size_t>(sources[i])) * ch;
                          for (std::size_t c = 0; c < ch; ++c) dst[c] += g[i * ch + c];
                        }
                      });
}

/// Numerically stable log-softmax of one logit row, in double.
inline std::vector<double> log_softmax(std::span<const float> logits) {
  double mx = logits[0];
  for (float z : logits) mx = std::max(mx, static_cast<double>(z));
  double sum = 0.0;
  for (float z : logits) sum += std::exp(z - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t k = 0; k < logits.size(); ++k) out[k] = logits[k] - lse;
  return out;
}

}  // namespace chaincnn
