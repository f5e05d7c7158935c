#pragma once

// Decoding: independent per-position argmax for unconditioned models and
// left-to-right beam search for label-conditioned ones, both over ensembles
// that average member log-probabilities.

#include <algorithm>
#include <array>
#include <cstddef>
#include <span>
#include <thread>
#include <vector>

#include "chaincnn/data.hpp"
#include "chaincnn/error.hpp"
#include "chaincnn/model.hpp"

namespace chaincnn {

using ClassScores = std::array<double, kStructureClasses>;

/// Mean of member log-probabilities per class. Values are combined in sorted
/// order relative to the smallest, so member order never matters and N equal
/// members reproduce their common value exactly.
inline ClassScores ensemble_step_score(std::span<const ClassScores> members) {
  if (members.empty()) throw ConfigError("ensemble score needs at least one member");
  ClassScores out{};
  std::vector<double> column(members.size());
  for (std::size_t c = 0; c < kStructureClasses; ++c) {
    for (std::size_t m = 0; m < members.size(); ++m) column[m] = members[m][c];
    std::sort(column.begin(), column.end());
    double offset = 0.0;
    for (double v : column) offset += v - column.front();
    out[c] = column.front() + offset / static_cast<double>(members.size());
  }
  return out;
}

/// Independently trained models sharing output classes and conditioning mode.
/// Conditioned members must also share the receptive field.
class Ensemble {
 public:
  explicit Ensemble(std::vector<const Model*> members) : members_(std::move(members)) {
    if (members_.empty()) throw ConfigError("an ensemble needs at least one model");
    const Model& first = *members_.front();
    for (const Model* m : members_) {
      if (m->conditioned() != first.conditioned())
        throw ModeError("ensemble members disagree on label conditioning");
      if (m->config().num_classes != first.config().num_classes)
        throw ConfigError("ensemble members disagree on the number of classes");
      if (first.conditioned() && m->receptive_field().width != first.receptive_field().width)
        throw ConfigError("conditioned ensemble members must share the receptive field");
    }
  }
  Ensemble(const Model& single) : Ensemble(std::vector<const Model*>{&single}) {}

  std::size_t size() const { return members_.size(); }
  bool conditioned() const { return members_.front()->conditioned(); }
  const std::vector<const Model*>& members() const { return members_; }
  const Model& front() const { return *members_.front(); }

 private:
  std::vector<const Model*> members_;
};

/// Averaged 8-class scores for each window query.
inline std::vector<ClassScores> score_windows(const Ensemble& ensemble,
                                              std::span<const WindowQuery> queries) {
  std::vector<std::vector<ClassScores>> per_query(queries.size());
  for (const Model* m : ensemble.members()) {
    const Tensor logits = forward_windows(*m, queries);
    for (std::size_t q = 0; q < queries.size(); ++q)
      per_query[q].push_back(structure_log_probs(logits.data().subspan(q * kNumClasses, kNumClasses)));
  }
  std::vector<ClassScores> out;
  out.reserve(queries.size());
  for (const auto& members : per_query) out.push_back(ensemble_step_score(members));
  return out;
}

inline int argmax(const ClassScores& s) {
  return static_cast<int>(std::max_element(s.begin(), s.end()) - s.begin());
}

/// Averaged scores [length][8] for unconditioned models over a whole record.
inline std::vector<ClassScores> score_sequence(const Ensemble& ensemble, const ProteinRecord& record) {
  if (ensemble.conditioned())
    throw ModeError("independent decoding requires unconditioned models; use beam search");
  std::vector<ClassScores> out(record.length);
  if (record.length == 0) return out;
  const ProteinRecord* ptr = &record;
  BatchOptions opts;
  opts.length = record.length;
  const Batch batch = make_batch(std::span<const ProteinRecord* const>(&ptr, 1), opts);
  std::vector<std::vector<ClassScores>> per_pos(record.length);
  for (const Model* m : ensemble.members()) {
    const Tensor logits = m->infer_logits(batch);
    for (std::size_t p = 0; p < record.length; ++p)
      per_pos[p].push_back(structure_log_probs(logits.data().subspan(p * kNumClasses, kNumClasses)));
  }
  for (std::size_t p = 0; p < record.length; ++p) out[p] = ensemble_step_score(per_pos[p]);
  return out;
}

/// Per masked-in position argmax of averaged log-probabilities (lowest class
/// on ties).
inline std::vector<int> decode_independent(const Ensemble& ensemble, const ProteinRecord& record) {
  std::vector<int> labels;
  for (const auto& s : score_sequence(ensemble, record)) labels.push_back(argmax(s));
  return labels;
}

struct BeamHypothesis {
  std::vector<int> labels;
  double log_prob = 0.0;
};

/// Higher score first, then the lexicographically smaller sequence.
inline bool beam_order(const BeamHypothesis& a, const BeamHypothesis& b) {
  if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
  return a.labels < b.labels;
}

/// Left-to-right beam search over the 8 structure classes. Each step extends
/// every kept hypothesis by every class and keeps the best `beam_width`.
inline BeamHypothesis beam_search(const Ensemble& ensemble, const ProteinRecord& record,
                                  std::size_t beam_width = 8) {
  if (!ensemble.conditioned())
    throw ModeError("beam search requires label-conditioned models");
  if (beam_width < 1) throw ConfigError("beam width must be at least 1");
  std::vector<BeamHypothesis> beam(1);
  std::vector<BeamHypothesis> candidates;
  std::vector<WindowQuery> queries;
  for (std::size_t pos = 0; pos < record.length; ++pos) {
    queries.clear();
    for (const auto& h : beam) queries.push_back({&record, pos, h.labels});
    const auto scores = score_windows(ensemble, queries);
    candidates.clear();
    for (std::size_t h = 0; h < beam.size(); ++h)
      for (std::size_t c = 0; c < kStructureClasses; ++c) {
        BeamHypothesis next{beam[h].labels, beam[h].log_prob + scores[h][c]};
        next.labels.push_back(static_cast<int>(c));
        candidates.push_back(std::move(next));
      }
    const std::size_t keep = std::min(beam_width, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep),
                      candidates.end(), beam_order);
    candidates.resize(keep);
    beam.swap(candidates);
  }
  return beam.front();
}

/// Sum of per-step scores of a fixed label sequence, accumulated left to
/// right exactly as beam search does.
inline double sequence_log_prob(const Ensemble& ensemble, const ProteinRecord& record,
                                std::span<const int> labels) {
  if (labels.size() != record.length)
    throw ConfigError("label sequence length does not match the record");
  double total = 0.0;
  for (std::size_t pos = 0; pos < record.length; ++pos) {
    const WindowQuery q{&record, pos, labels.first(pos)};
    total += score_windows(ensemble, std::span<const WindowQuery>(&q, 1))
                 .front()[static_cast<std::size_t>(labels[pos])];
  }
  return total;
}

/// Beam search for conditioned ensembles, independent argmax otherwise.
inline std::vector<int> decode(const Ensemble& ensemble, const ProteinRecord& record,
                               std::size_t beam_width = 8) {
  return ensemble.conditioned() ? beam_search(ensemble, record, beam_width).labels
                                : decode_independent(ensemble, record);
}

/// Decodes every record, spreading records over `threads` workers.
inline std::vector<std::vector<int>> decode_all(const Ensemble& ensemble,
                                                std::span<const ProteinRecord> records,
                                                std::size_t beam_width = 8, std::size_t threads = 1) {
  std::vector<std::vector<int>> out(records.size());
  threads = std::max<std::size_t>(1, std::min(threads, records.size()));
  if (threads == 1) {
    for (std::size_t i = 0; i < records.size(); ++i) out[i] = decode(ensemble, records[i], beam_width);
    return out;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < records.size(); i += threads)
          out[i] = decode(ensemble, records[i], beam_width);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

}  // namespace chaincnn
