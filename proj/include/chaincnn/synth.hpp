#pragma once

// Seeded synthetic corpora with learnable labelling rules, for tests, the
// acceptance harness and the `synth` command.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "chaincnn/autodiff.hpp"
#include "chaincnn/data.hpp"
#include "chaincnn/error.hpp"

namespace chaincnn {

enum class SynthRule {
  /// Label is a fixed function of the residues at i-1, i and i+1.
  window,
  /// Label is a fixed function of the previous label only; residues carry
  /// no information about it.
  markov,
};

struct SynthOptions {
  std::size_t count = 8;
  std::size_t min_length = 30;
  std::size_t max_length = 30;
  SynthRule rule = SynthRule::window;
  /// Standard deviation of the profile noise around the residue one-hot.
  float pssm_noise = 0.3f;
  std::uint64_t seed = 0;
};

inline int window_rule(int left, int centre, int right) {
  return (left + 2 * centre + 3 * right) % static_cast<int>(kStructureClasses);
}

inline int markov_rule(int previous) { return (previous * 3 + 1) % static_cast<int>(kStructureClasses); }

inline std::vector<ProteinRecord> synthetic_corpus(const SynthOptions& opts) {
  if (opts.min_length < 1 || opts.min_length > opts.max_length || opts.max_length > kMaxLength)
    throw ConfigError("synthetic lengths must satisfy 1 <= min <= max <= 700");
  Rng rng(opts.seed);
  std::normal_distribution<float> noise(0.0f, opts.pssm_noise);
  std::vector<ProteinRecord> out;
  for (std::size_t n = 0; n < opts.count; ++n) {
    ProteinRecord r;
    r.id = "synth" + std::to_string(n);
    r.length = opts.min_length + rng() % (opts.max_length - opts.min_length + 1);
    std::vector<int> res(r.length);
    for (auto& v : res) v = static_cast<int>(rng() % 20);
    r.features.assign(r.length * kFeatureChannels, 0.0f);
    for (std::size_t p = 0; p < r.length; ++p) {
      float* f = r.features.data() + p * kFeatureChannels;
      f[res[p]] = 1.0f;
      for (std::size_t c = 0; c < kPssmChannels; ++c)
        f[kResidueChannels + c] = (static_cast<int>(c) == res[p] ? 1.0f : 0.0f) + noise(rng);
    }
    for (std::size_t p = 0; p < r.length; ++p) {
      if (opts.rule == SynthRule::window) {
        const int left = p > 0 ? res[p - 1] : 0;
        const int right = p + 1 < r.length ? res[p + 1] : 0;
        r.labels[p] = window_rule(left, res[p], right);
      } else {
        r.labels[p] = p == 0 ? static_cast<int>(rng() % kStructureClasses) : markov_rule(r.labels[p - 1]);
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace chaincnn
