#pragma once

// Mini-batch training with Adam, step-decayed learning rates, max-norm
// projection, scheduled sampling for label-conditioned models and early
// stopping on validation Q8.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "chaincnn/checkpoint.hpp"
#include "chaincnn/data.hpp"
#include "chaincnn/inference.hpp"
#include "chaincnn/metrics.hpp"
#include "chaincnn/model.hpp"
#include "chaincnn/optim.hpp"

namespace chaincnn {

struct TrainConfig {
  std::size_t batch_size = 50;
  double lr_init = 3.357e-4;
  double lr_decay_factor = 0.4;
  std::uint64_t lr_decay_every = 200000;
  double sampling_rate_init = 0.4;
  double sampling_rate_increment = 0.1;
  std::uint64_t sampling_rate_every = 750000;
  /// Conditioned models only; off means pure teacher forcing.
  bool scheduled_sampling = true;
  std::uint64_t max_iterations = 1000000;
  std::uint64_t eval_every = 1000;
  std::uint64_t patience = 10;
  std::uint64_t log_every = 100;
  /// Beam width used when re-ranking conditioned snapshots.
  std::size_t beam_width = 8;
  /// Snapshots re-ranked by beam-search Q8 for conditioned models.
  std::size_t top_snapshots = 3;
  std::uint64_t seed = 0;

  bool operator==(const TrainConfig&) const = default;

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (!(lr_init > 0.0)) throw ConfigError("lr_init must be positive");
    if (!(lr_decay_factor > 0.0 && lr_decay_factor < 1.0))
      throw ConfigError("lr_decay_factor must lie in (0,1)");
    if (lr_decay_every < 1) throw ConfigError("lr_decay_every must be at least 1");
    if (!(sampling_rate_init >= 0.0 && sampling_rate_init <= 1.0))
      throw ConfigError("sampling_rate_init must lie in [0,1]");
    if (!(sampling_rate_increment >= 0.0)) throw ConfigError("sampling_rate_increment must be non-negative");
    if (sampling_rate_every < 1) throw ConfigError("sampling_rate_every must be at least 1");
    if (eval_every < 1) throw ConfigError("eval_every must be at least 1");
    if (log_every < 1) throw ConfigError("log_every must be at least 1");
    if (beam_width < 1) throw ConfigError("beam_width must be at least 1");
    if (top_snapshots < 1) throw ConfigError("top_snapshots must be at least 1");
  }
};

/// Schedule of the windowed fully-connected baseline.
inline TrainConfig fc_schedule(TrainConfig cfg = {}) {
  cfg.lr_init = 0.0004;
  cfg.lr_decay_factor = 0.5;
  cfg.lr_decay_every = 35000;
  return cfg;
}

/// Schedule of the convolutional models.
inline TrainConfig conv_schedule(TrainConfig cfg = {}) {
  cfg.lr_init = 3.357e-4;
  cfg.lr_decay_factor = 0.4;
  cfg.lr_decay_every = 200000;
  return cfg;
}

inline double lr_at(std::uint64_t step, const TrainConfig& cfg) {
  return cfg.lr_init *
         std::pow(cfg.lr_decay_factor, static_cast<double>(step / cfg.lr_decay_every));
}

inline double sampling_rate_at(std::uint64_t step, const TrainConfig& cfg) {
  return std::min(1.0, cfg.sampling_rate_init +
                           cfg.sampling_rate_increment *
                               static_cast<double>(step / cfg.sampling_rate_every));
}

/// Uniform double in [0,1) from the top 53 bits of one draw.
inline double unit_draw(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Index drawn from exp(log_probs), which must sum to one.
inline int sample_class(const ClassScores& log_probs, Rng& rng) {
  const double u = unit_draw(rng);
  double cum = 0.0;
  int last_positive = 0;
  for (std::size_t c = 0; c < kStructureClasses; ++c) {
    const double p = std::exp(log_probs[c]);
    if (p > 0.0) last_positive = static_cast<int>(c);
    cum += p;
    if (u < cum) return static_cast<int>(c);
  }
  return last_positive;
}

struct SampledContexts {
  std::vector<std::vector<int>> contexts;
  /// Positions where the model sample replaced the true label.
  std::uint64_t sampled = 0;
  std::uint64_t positions = 0;
};

/// One left-to-right pass per record: at position i a label is drawn from the
/// model's distribution given the mixed context c_<i, and c_i takes that
/// sample with probability r, the true label otherwise.
inline SampledContexts scheduled_sampling_pass(const Model& model,
                                               std::span<const ProteinRecord* const> records,
                                               double rate, Rng& rng) {
  if (!model.conditioned()) throw ModeError("scheduled sampling needs a label-conditioned model");
  if (!(rate >= 0.0 && rate <= 1.0)) throw ConfigError("sampling rate must lie in [0,1]");
  SampledContexts out;
  out.contexts.resize(records.size());
  std::size_t longest_len = 0;
  for (std::size_t r = 0; r < records.size(); ++r) {
    out.contexts[r].assign(records[r]->labels.begin(),
                           records[r]->labels.begin() + static_cast<std::ptrdiff_t>(records[r]->length));
    longest_len = std::max(longest_len, records[r]->length);
    out.positions += records[r]->length;
  }
  if (rate == 0.0) return out;
  const Ensemble single(model);
  std::vector<WindowQuery> queries;
  std::vector<std::size_t> owners;
  for (std::size_t pos = 0; pos < longest_len; ++pos) {
    queries.clear();
    owners.clear();
    for (std::size_t r = 0; r < records.size(); ++r)
      if (pos < records[r]->length) {
        queries.push_back({records[r], pos, std::span<const int>(out.contexts[r]).first(pos)});
        owners.push_back(r);
      }
    const auto scores = score_windows(single, queries);
    for (std::size_t q = 0; q < queries.size(); ++q) {
      const int drawn = sample_class(scores[q], rng);
      if (unit_draw(rng) < rate) {
        out.contexts[owners[q]][pos] = drawn;
        ++out.sampled;
      }
    }
  }
  return out;
}

/// Validation accuracy used for early stopping: independent decoding for
/// unconditioned models, teacher-forced next-step accuracy for conditioned.
inline ConfusionMatrix quick_confusion(const Model& model, std::span<const ProteinRecord> records,
                                       std::size_t chunk = 32) {
  ConfusionMatrix cm;
  BatchOptions opts;
  if (model.conditioned()) opts.conditioning_shift = model.receptive_field().conditioning_shift;
  for (std::size_t start = 0; start < records.size(); start += chunk) {
    const std::size_t end = std::min(records.size(), start + chunk);
    std::vector<const ProteinRecord*> ptrs;
    for (std::size_t i = start; i < end; ++i) ptrs.push_back(&records[i]);
    opts.length = longest(ptrs);
    const Batch batch = make_batch(std::span<const ProteinRecord* const>(ptrs), opts);
    const Tensor logits = model.infer_logits(batch);
    for (std::size_t b = 0; b < ptrs.size(); ++b)
      for (std::size_t p = 0; p < ptrs[b]->length; ++p) {
        const auto off = (b * opts.length + p) * kNumClasses;
        const int pred = argmax(structure_log_probs(logits.data().subspan(off, kNumClasses)));
        cm.add(ptrs[b]->labels[p], pred);
      }
  }
  return cm;
}

/// Final decoding accuracy: beam search for conditioned models.
inline ConfusionMatrix decode_confusion(const Model& model, std::span<const ProteinRecord> records,
                                        std::size_t beam_width) {
  const Ensemble single(model);
  const auto preds = decode_all(single, records, beam_width);
  return confusion(preds, records);
}

struct StepResult {
  double loss = 0.0;
  double lr = 0.0;
  double sampling_rate = 0.0;
};

/// Owns the optimiser state and batch order for one model.
class Trainer {
 public:
  Trainer(Model& model, std::span<const ProteinRecord> train_set, TrainConfig cfg)
      : model_(model), train_(train_set), cfg_(std::move(cfg)), rng_(cfg_.seed) {
    cfg_.validate();
    if (train_.empty()) throw DataError("training set is empty");
    order_.resize(train_.size());
    std::iota(order_.begin(), order_.end(), 0);
    cursor_ = order_.size();
    for (std::size_t i = 0; i < model_.layers().size(); ++i) {
      const auto& name = model_.layers()[i].name;
      slot_names_.push_back(name + ".weight");
      slot_names_.push_back(name + ".bias");
    }
  }

  const TrainConfig& config() const { return cfg_; }
  AdamState& adam() { return adam_; }
  const AdamState& adam() const { return adam_; }
  std::uint64_t iteration() const { return adam_.step; }
  const std::vector<std::size_t>& last_batch() const { return batch_ids_; }

  /// Epoch-wise shuffled batches of min(batch_size, |train|) records.
  std::vector<const ProteinRecord*> next_batch() {
    batch_ids_.clear();
    const std::size_t n = std::min(cfg_.batch_size, train_.size());
    while (batch_ids_.size() < n) {
      if (cursor_ == order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng_);
        cursor_ = 0;
      }
      batch_ids_.push_back(order_[cursor_++]);
    }
    std::vector<const ProteinRecord*> out;
    for (auto i : batch_ids_) out.push_back(&train_[i]);
    return out;
  }

  StepResult step() {
    const std::uint64_t s = adam_.step;
    StepResult res;
    res.lr = lr_at(s, cfg_);
    const auto records = next_batch();
    BatchOptions opts;
    opts.length = longest(records);
    SampledContexts ctx;
    if (model_.conditioned()) {
      opts.conditioning_shift = model_.receptive_field().conditioning_shift;
      res.sampling_rate = cfg_.scheduled_sampling ? sampling_rate_at(s, cfg_) : 0.0;
      ctx = scheduled_sampling_pass(model_, records, res.sampling_rate, rng_);
    }
    const Batch batch = make_batch(records, opts, ctx.contexts);
    Tape tape;
    const ForwardPass pass = model_.forward(tape, batch, Mode::train, rng_);
    const Var loss = softmax_cross_entropy(pass.logits, batch.labels, batch.mask);
    res.loss = loss.value()[0];
    if (!std::isfinite(res.loss)) throw NumericalError(diagnose("non-finite loss", s));
    tape.backward(loss);
    std::vector<ParamSlot> slots;
    for (std::size_t i = 0; i < model_.layers().size(); ++i) {
      LayerParams& l = model_.layers()[i];
      slots.push_back({slot_names_[2 * i], &l.weights, pass.weights[i].grad()});
      slots.push_back({slot_names_[2 * i + 1], &l.biases, pass.biases[i].grad()});
    }
    try {
      adam_update(slots, adam_, res.lr);
    } catch (const NumericalError& e) {
      throw NumericalError(diagnose(e.what(), s));
    }
    const float c = model_.config().fc_max_norm;
    for (std::size_t i : model_.max_norm_layers()) max_norm_project(model_.layers()[i].weights, c);
    return res;
  }

 private:
  std::string diagnose(const std::string& what, std::uint64_t s) const {
    std::string ids;
    for (auto i : batch_ids_) ids += (ids.empty() ? "" : ",") + train_[i].id;
    return what + " at step " + std::to_string(s) + " (batch: " + ids + ")";
  }

  Model& model_;
  std::span<const ProteinRecord> train_;
  TrainConfig cfg_;
  Rng rng_;
  AdamState adam_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> batch_ids_;
  std::vector<std::string> slot_names_;
};

struct EvalPoint {
  std::uint64_t iteration = 0;
  double q8 = 0.0;
};

struct TrainResult {
  /// Selected snapshot; the model holds the same parameters on return.
  Checkpoint checkpoint;
  std::vector<EvalPoint> history;
  std::uint64_t iterations = 0;
  bool stopped_early = false;
  double final_loss = 0.0;
};

namespace train_detail {

inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace train_detail

/// Trains `model` on split.train with early stopping on split.validation.
/// Snapshots carry model, optimiser and the given auxiliary tensors. With no
/// validation records the final state is returned.
inline TrainResult train(Model& model, const DatasetSplit& data, const TrainConfig& cfg,
                         std::ostream* log = nullptr,
                         const std::vector<std::pair<std::string, Tensor>>& auxiliary = {}) {
  using train_detail::fmt;
  Trainer trainer(model, data.train, cfg);
  struct Snapshot {
    Checkpoint ckpt;
    double q8;
  };
  std::vector<Snapshot> top;
  auto snapshot = [&](double q8) {
    Checkpoint c = make_checkpoint(model, &trainer.adam(), trainer.iteration(), q8);
    for (const auto& [n, t] : auxiliary) c.add(n, t);
    return c;
  };
  TrainResult result;
  double best = -1.0;
  std::uint64_t stale = 0;
  const bool validate = !data.validation.empty();
  while (trainer.iteration() < cfg.max_iterations) {
    const StepResult s = trainer.step();
    result.final_loss = s.loss;
    const std::uint64_t it = trainer.iteration();
    if (log && (it % cfg.log_every == 0 || it == 1))
      *log << "iter " << it << " loss " << fmt("%.6f", s.loss) << " lr " << fmt("%.6g", s.lr)
           << " sampling_rate " << fmt("%.3f", s.sampling_rate) << "\n";
    if (!validate || (it % cfg.eval_every != 0 && it != cfg.max_iterations)) continue;
    const double q8 = quick_confusion(model, data.validation).accuracy();
    result.history.push_back({it, q8});
    const bool improved = q8 > best;
    if (log)
      *log << "eval iter " << it << " validation_q8 " << fmt("%.6f", q8)
           << (improved ? " (best)" : "") << "\n";
    if (improved) {
      best = q8;
      stale = 0;
    } else {
      ++stale;
    }
    // Keep the best snapshots, earliest first among equal scores.
    top.push_back({snapshot(q8), q8});
    std::stable_sort(top.begin(), top.end(),
                     [](const Snapshot& a, const Snapshot& b) { return a.q8 > b.q8; });
    const std::size_t keep = model.conditioned() ? cfg.top_snapshots : 1;
    if (top.size() > keep) top.resize(keep);
    if (stale > cfg.patience) {
      result.stopped_early = true;
      break;
    }
  }
  result.iterations = trainer.iteration();
  if (top.empty()) {
    result.checkpoint = snapshot(0.0);
  } else if (!model.conditioned()) {
    result.checkpoint = std::move(top.front().ckpt);
  } else {
    // Re-rank by full beam-search accuracy.
    double best_beam = -1.0;
    for (auto& snap : top) {
      restore_checkpoint(snap.ckpt, model);
      const double q = decode_confusion(model, data.validation, cfg.beam_width).accuracy();
      if (log)
        *log << "beam rerank iter " << snap.ckpt.iteration << " teacher_forced_q8 "
             << fmt("%.6f", snap.q8) << " beam_q8 " << fmt("%.6f", q) << "\n";
      if (q > best_beam) {
        best_beam = q;
        result.checkpoint = snap.ckpt;
        result.checkpoint.best_validation_q8 = q;
      }
    }
  }
  restore_checkpoint(result.checkpoint, model);
  if (log && validate)
    *log << "best validation Q8 " << fmt("%.6f", result.checkpoint.best_validation_q8)
         << " at iter " << result.checkpoint.iteration << "\n";
  return result;
}

}  // namespace chaincnn
