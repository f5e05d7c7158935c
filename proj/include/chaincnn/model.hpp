#pragma once

// Declarative sequence-labelling networks: a windowed fully-connected
// baseline and multi-scale convolutional stacks with concatenating skip
// connections, optionally conditioned on a shifted copy of the labels.

#include <algorithm>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "chaincnn/autodiff.hpp"
#include "chaincnn/data.hpp"
#include "chaincnn/params.hpp"

namespace chaincnn {

enum class ModelKind { fully_connected, convolutional };

struct FilterSpec {
  std::size_t width = 1;
  std::size_t depth = 1;
  bool operator==(const FilterSpec&) const = default;
};

/// Multi-scale filters applied in parallel and depth-concatenated, then an
/// optional single-scale filter.
struct BlockSpec {
  std::vector<FilterSpec> multi_scale;
  std::optional<FilterSpec> single_scale;
  std::size_t skip_projection_depth = 96;
  bool operator==(const BlockSpec&) const = default;
};

struct ModelConfig {
  ModelKind kind = ModelKind::fully_connected;
  std::size_t fc_window = 17;
  std::size_t fc_layers = 5;
  std::size_t fc_width = 455;
  std::vector<BlockSpec> blocks;
  bool skip_connections = false;
  bool conditioned = false;
  float dropout_rate = 0.2f;
  float fc_max_norm = 0.04614f;
  std::size_t num_classes = kNumClasses;

  bool operator==(const ModelConfig&) const = default;

  std::size_t input_channels() const {
    return conditioned ? kConditionedChannels : kFeatureChannels;
  }

  void validate() const {
    if (fc_window % 2 == 0) throw ConfigError("fc_window must be odd");
    if (fc_layers < 1) throw ConfigError("at least one fully-connected layer is required");
    if (fc_width < 1) throw ConfigError("fc_width must be positive");
    if (num_classes != kNumClasses) throw ConfigError("num_classes must be 9");
    if (!(dropout_rate >= 0.0f && dropout_rate < 1.0f))
      throw ConfigError("dropout_rate must lie in [0,1)");
    if (!(fc_max_norm > 0.0f)) throw ConfigError("fc_max_norm must be positive");
    if (kind == ModelKind::fully_connected && !blocks.empty())
      throw ConfigError("a fully-connected model has no convolutional blocks");
    if (kind == ModelKind::convolutional && blocks.empty())
      throw ConfigError("a convolutional model needs at least one block");
    for (const auto& b : blocks) {
      if (b.multi_scale.empty() && !b.single_scale)
        throw ConfigError("a block needs multi-scale or single-scale filters");
      auto check = [](const FilterSpec& f) {
        if (f.width % 2 == 0) throw ConfigError("filter widths must be odd");
        if (f.depth < 1) throw ConfigError("filter depths must be at least 1");
      };
      for (const auto& f : b.multi_scale) check(f);
      if (b.single_scale) check(*b.single_scale);
      if (skip_connections && b.skip_projection_depth < 1)
        throw ConfigError("skip projection depth must be at least 1");
    }
  }
};

/// Span of input positions that can influence one output position.
struct ReceptiveField {
  std::size_t width = 1;
  std::size_t radius = 0;
  /// Label shift for conditioning: the label at the predicted position is
  /// never visible and the most recent visible one is its predecessor.
  std::size_t conditioning_shift = 1;
};

/// fc_window plus (widest filter - 1) for every conv layer on the deepest
/// path. Width-1 skip projections add nothing.
inline ReceptiveField receptive_field(const ModelConfig& cfg) {
  std::size_t width = cfg.fc_window;
  for (const auto& b : cfg.blocks) {
    if (!b.multi_scale.empty()) {
      std::size_t widest = 0;
      for (const auto& f : b.multi_scale) widest = std::max(widest, f.width);
      width += widest - 1;
    }
    if (b.single_scale) width += b.single_scale->width - 1;
  }
  const std::size_t radius = (width - 1) / 2;
  return {width, radius, radius + 1};
}

/// One forward pass recorded on a tape, with the parameter leaves in layer
/// order so gradients can be read back.
struct ForwardPass {
  Var logits;
  std::vector<Var> weights;
  std::vector<Var> biases;
};

class Model {
 public:
  Model(ModelConfig config, Rng& rng) : config_(std::move(config)) {
    config_.validate();
    build(rng);
  }

  const ModelConfig& config() const { return config_; }
  ReceptiveField receptive_field() const { return chaincnn::receptive_field(config_); }
  bool conditioned() const { return config_.conditioned; }

  std::vector<LayerParams>& layers() { return layers_; }
  const std::vector<LayerParams>& layers() const { return layers_; }

  /// (layer name, output channels) in construction order.
  const std::vector<std::pair<std::string, std::size_t>>& channel_widths() const { return widths_; }

  /// Layers whose incoming weights are max-norm constrained (hidden FC).
  const std::vector<std::size_t>& max_norm_layers() const { return fc_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weights.size() + l.biases.size();
    return n;
  }

  /// Every stored tensor by checkpoint name: "<layer>.weight", "<layer>.bias"
  /// and "<layer>.<extra>".
  std::vector<std::pair<std::string, Tensor*>> named_tensors() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (auto& l : layers_) {
      out.emplace_back(l.name + ".weight", &l.weights);
      out.emplace_back(l.name + ".bias", &l.biases);
      for (auto& [k, t] : l.extra) out.emplace_back(l.name + "." + k, &t);
    }
    return out;
  }
  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    for (const auto& l : layers_) {
      out.emplace_back(l.name + ".weight", &l.weights);
      out.emplace_back(l.name + ".bias", &l.biases);
      for (const auto& [k, t] : l.extra) out.emplace_back(l.name + "." + k, &t);
    }
    return out;
  }

  /// Full forward recorded on `tape`. Train mode applies dropout and
  /// batch statistics (updating running statistics).
  ForwardPass forward(Tape& tape, const Batch& batch, Mode mode, Rng& rng) {
    return run(tape, batch, mode, rng, {});
  }

  /// Inference logits [batch, length, 9].
  Tensor infer_logits(const Batch& batch) const {
    Tape tape(false);
    Rng unused(0);
    return const_cast<Model*>(this)->run(tape, batch, Mode::infer, unused, {}).logits.value();
  }

  /// Inference logits [batch, 9] at one position per batch row.
  Tensor infer_logits_at(const Batch& batch, std::span<const std::size_t> centers) const {
    if (centers.size() != batch.size()) throw ShapeError("one centre per batch row required");
    Tape tape(false);
    Rng unused(0);
    return const_cast<Model*>(this)->run(tape, batch, Mode::infer, unused, centers).logits.value();
  }

 private:
  struct BlockLayers {
    std::vector<std::size_t> multi;
    std::optional<std::size_t> multi_bn;
    std::optional<std::size_t> single;
    std::optional<std::size_t> single_bn;
    std::optional<std::size_t> skip;
  };

  std::size_t add_conv(const std::string& name, std::size_t width, std::size_t in_ch,
                       std::size_t out_ch, Rng& rng) {
    layers_.push_back(LayerParams{name, init_weights({width, in_ch, out_ch}, width * in_ch, rng),
                                  init_bias({out_ch}), {}});
    widths_.emplace_back(name, out_ch);
    return layers_.size() - 1;
  }

  std::size_t add_dense(const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    layers_.push_back(LayerParams{name, init_weights({in, out}, in, rng), init_bias({out}), {}});
    widths_.emplace_back(name, out);
    return layers_.size() - 1;
  }

  std::size_t add_batch_norm(const std::string& name, std::size_t ch) {
    LayerParams p{name, Tensor({ch}, 1.0f), init_bias({ch}), {}};
    p.extra.emplace("running_mean", Tensor({ch}, 0.0f));
    p.extra.emplace("running_var", Tensor({ch}, 1.0f));
    layers_.push_back(std::move(p));
    return layers_.size() - 1;
  }

  void build(Rng& rng) {
    std::size_t ch = config_.input_channels();
    for (std::size_t b = 0; b < config_.blocks.size(); ++b) {
      const BlockSpec& spec = config_.blocks[b];
      const std::string prefix = "block" + std::to_string(b + 1);
      const std::size_t block_in = ch;
      BlockLayers bl;
      if (!spec.multi_scale.empty()) {
        std::size_t total = 0;
        for (std::size_t i = 0; i < spec.multi_scale.size(); ++i) {
          const auto& f = spec.multi_scale[i];
          bl.multi.push_back(add_conv(prefix + ".multi" + std::to_string(i), f.width, ch, f.depth, rng));
          total += f.depth;
        }
        widths_.emplace_back(prefix + ".multi_concat", total);
        bl.multi_bn = add_batch_norm(prefix + ".multi_bn", total);
        ch = total;
      }
      if (spec.single_scale) {
        bl.single = add_conv(prefix + ".single", spec.single_scale->width, ch,
                             spec.single_scale->depth, rng);
        bl.single_bn = add_batch_norm(prefix + ".single_bn", spec.single_scale->depth);
        ch = spec.single_scale->depth;
      }
      if (config_.skip_connections && b > 0) {
        bl.skip = add_conv(prefix + ".skip", 1, block_in, spec.skip_projection_depth, rng);
        ch += spec.skip_projection_depth;
        widths_.emplace_back(prefix + ".skip_concat", ch);
      }
      blocks_.push_back(std::move(bl));
    }
    trunk_channels_ = ch;
    fc_.push_back(add_conv("fc1", config_.fc_window, ch, config_.fc_width, rng));
    for (std::size_t i = 1; i < config_.fc_layers; ++i)
      fc_.push_back(add_dense("fc" + std::to_string(i + 1), config_.fc_width, config_.fc_width, rng));
    output_ = add_dense("output", config_.fc_width, config_.num_classes, rng);
  }

  ForwardPass run(Tape& tape, const Batch& batch, Mode mode, Rng& rng,
                  std::span<const std::size_t> centers) {
    if (batch.channels() != config_.input_channels())
      throw ShapeError("model expects " + std::to_string(config_.input_channels()) +
                       " input channels, batch has " + std::to_string(batch.channels()));
    ForwardPass pass;
    const bool train = mode == Mode::train;
    for (const auto& l : layers_) {
      pass.weights.push_back(tape.leaf_ref(l.weights, train));
      pass.biases.push_back(tape.leaf_ref(l.biases, train));
    }
    const Tensor& mask = batch.mask;
    const float rate = config_.dropout_rate;

    auto normalize = [&](Var h, std::size_t layer) {
      LayerParams& bn = layers_[layer];
      h = batch_norm(h, mask, pass.weights[layer], pass.biases[layer], bn.extra.at("running_mean"),
                     bn.extra.at("running_var"), mode);
      h = relu(h);
      h = dropout(h, rate, mode, rng);
      return apply_mask(h, mask);
    };
    auto conv = [&](Var h, std::size_t layer) {
      return conv1d(h, pass.weights[layer], pass.biases[layer]);
    };

    Var x = apply_mask(tape.leaf_ref(batch.features), mask);
    for (const BlockLayers& bl : blocks_) {
      const Var block_in = x;
      Var h = x;
      if (!bl.multi.empty()) {
        std::vector<Var> parts;
        for (std::size_t layer : bl.multi) parts.push_back(conv(h, layer));
        h = parts.size() == 1 ? parts.front() : concat_channels(parts);
        h = normalize(h, *bl.multi_bn);
      }
      if (bl.single) h = normalize(conv(h, *bl.single), *bl.single_bn);
      if (bl.skip) h = concat_channels({h, apply_mask(conv(block_in, *bl.skip), mask)});
      x = h;
    }

    Var h = centers.empty()
                ? conv(x, fc_.front())
                : dense(gather_window(x, centers, config_.fc_window), pass.weights[fc_.front()],
                        pass.biases[fc_.front()]);
    h = dropout(relu(h), rate, mode, rng);
    for (std::size_t i = 1; i < fc_.size(); ++i)
      h = dropout(relu(dense(h, pass.weights[fc_[i]], pass.biases[fc_[i]])), rate, mode, rng);
    pass.logits = dense(h, pass.weights[output_], pass.biases[output_]);
    return pass;
  }

  ModelConfig config_;
  std::vector<LayerParams> layers_;
  std::vector<std::pair<std::string, std::size_t>> widths_;
  std::vector<BlockLayers> blocks_;
  std::vector<std::size_t> fc_;
  std::size_t output_ = 0;
  std::size_t trunk_channels_ = 0;
};

/// Log-probabilities over the 8 structure classes; the no-seq logit is
/// excluded from the normalisation.
inline std::array<double, kStructureClasses> structure_log_probs(std::span<const float> logits) {
  const auto lp = log_softmax(logits.first(kStructureClasses));
  std::array<double, kStructureClasses> out{};
  std::copy(lp.begin(), lp.end(), out.begin());
  return out;
}

/// One receptive-field evaluation: `record` at `position`, with the label
/// context (entries for every index < position) for conditioned models.
struct WindowQuery {
  const ProteinRecord* record = nullptr;
  std::size_t position = 0;
  std::span<const int> context;
};

/// Window batch [queries, rf.width, channels]: row q holds the receptive
/// field centred on query q, zero beyond the sequence ends.
inline Batch window_batch(const Model& model, std::span<const WindowQuery> queries) {
  if (queries.empty()) throw ConfigError("window batch needs at least one query");
  const ReceptiveField rf = model.receptive_field();
  const std::size_t ch = model.config().input_channels();
  const std::size_t width = rf.width;
  const std::size_t rows = queries.size();
  Batch batch{Tensor({rows, width, ch}), std::vector<int>(rows * width, kNoSeqClass),
              Tensor({rows, width})};
  for (std::size_t r = 0; r < rows; ++r) {
    const WindowQuery& q = queries[r];
    const ProteinRecord& rec = *q.record;
    if (q.position >= rec.length)
      throw ConfigError("window position " + std::to_string(q.position) +
                        " outside record of length " + std::to_string(rec.length));
    if (model.conditioned() && q.context.size() < q.position)
      throw ConfigError("label context shorter than the window position");
    for (std::size_t k = 0; k < width; ++k) {
      const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(q.position + k) -
                               static_cast<std::ptrdiff_t>(rf.radius);
      if (p < 0 || p >= static_cast<std::ptrdiff_t>(rec.length)) continue;
      const auto pos = static_cast<std::size_t>(p);
      float* dst = batch.features.raw() + (r * width + k) * ch;
      std::copy_n(rec.features.data() + pos * kFeatureChannels, kFeatureChannels, dst);
      batch.mask[r * width + k] = 1.0f;
      batch.labels[r * width + k] = rec.labels[pos];
      if (model.conditioned()) {
        // Positions at or after the query never reach its centre output, so
        // any context value there is inert; the no-seq label stands in.
        int cls = kNoSeqClass;
        if (pos >= rf.conditioning_shift && pos - rf.conditioning_shift < q.position)
          cls = q.context[pos - rf.conditioning_shift];
        dst[kFeatureChannels + static_cast<std::size_t>(cls)] = 1.0f;
      }
    }
  }
  return batch;
}

/// Logits [queries, 9] at each query's position, evaluated on receptive-field
/// windows only. Matches the full-sequence forward pass at that position.
inline Tensor forward_windows(const Model& model, std::span<const WindowQuery> queries) {
  const Batch batch = window_batch(model, queries);
  const std::vector<std::size_t> centers(batch.size(), model.receptive_field().radius);
  return model.infer_logits_at(batch, centers);
}

inline Tensor forward_window(const Model& model, const ProteinRecord& record, std::size_t position,
                             std::span<const int> context = {}) {
  const WindowQuery q{&record, position, context};
  return forward_windows(model, std::span<const WindowQuery>(&q, 1));
}

// ---------------------------------------------------------------------------
// Ablation ladder: the nine architectures from pure FC to the final
// residual-connected two-block network.

inline constexpr int kAblationRows = 9;

inline ModelConfig ablation_model(int row) {
  if (row < 1 || row > kAblationRows)
    throw ConfigError("invalid ablation row " + std::to_string(row) + "; valid rows are 1-9");
  ModelConfig cfg;
  if (row == 1) {
    cfg.kind = ModelKind::fully_connected;
    cfg.fc_window = 17;
    cfg.fc_layers = 5;
    cfg.dropout_rate = 0.2f;
    cfg.fc_max_norm = 0.04614f;
    return cfg;
  }
  cfg.kind = ModelKind::convolutional;
  cfg.dropout_rate = 0.4f;
  cfg.fc_max_norm = 0.150f;
  const std::vector<FilterSpec> small{{3, 32}, {5, 32}, {7, 32}};
  const std::vector<FilterSpec> large{{3, 64}, {7, 64}, {9, 64}};
  switch (row) {
    case 2:
    case 3:
      cfg.blocks.assign(row == 2 ? 1 : 2, BlockSpec{{}, FilterSpec{7, 32}});
      cfg.fc_window = 17;
      cfg.fc_layers = 5;
      break;
    case 4:
    case 5:
      cfg.blocks.assign(1, BlockSpec{small, std::nullopt});
      cfg.fc_window = 11;
      cfg.fc_layers = row == 4 ? 5 : 2;
      break;
    case 6:
      cfg.blocks.assign(1, BlockSpec{small, FilterSpec{7, 32}});
      cfg.fc_window = 11;
      cfg.fc_layers = 2;
      break;
    default:
      cfg.blocks.assign(row == 8 ? 5 : 2, BlockSpec{large, FilterSpec{9, 24}});
      cfg.fc_window = 11;
      cfg.fc_layers = 2;
      cfg.skip_connections = row == 9;
      break;
  }
  return cfg;
}

}  // namespace chaincnn
