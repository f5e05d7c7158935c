#pragma once

// Q8 accuracy, per-class precision/recall/frequency, bootstrap standard
// errors and the machine-readable evaluation report.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "chaincnn/data.hpp"
#include "chaincnn/error.hpp"

namespace chaincnn {

/// Rows are true classes, columns predicted classes; 8 structure classes.
class ConfusionMatrix {
 public:
  using Counts = std::array<std::array<std::uint64_t, kStructureClasses>, kStructureClasses>;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(const Counts& counts) : counts_(counts) {}

  void add(int truth, int predicted, std::uint64_t n = 1) {
    check(truth, "true");
    check(predicted, "predicted");
    counts_[static_cast<std::size_t>(truth)][static_cast<std::size_t>(predicted)] += n;
  }

  std::uint64_t at(int truth, int predicted) const {
    return counts_.at(static_cast<std::size_t>(truth)).at(static_cast<std::size_t>(predicted));
  }
  const Counts& counts() const { return counts_; }

  std::uint64_t total() const {
    std::uint64_t n = 0;
    for (const auto& row : counts_)
      for (auto v : row) n += v;
    return n;
  }
  std::uint64_t correct() const {
    std::uint64_t n = 0;
    for (std::size_t c = 0; c < kStructureClasses; ++c) n += counts_[c][c];
    return n;
  }
  std::uint64_t row_sum(std::size_t c) const {
    std::uint64_t n = 0;
    for (auto v : counts_[c]) n += v;
    return n;
  }
  std::uint64_t column_sum(std::size_t c) const {
    std::uint64_t n = 0;
    for (const auto& row : counts_) n += row[c];
    return n;
  }

  /// Diagonal over total; an empty matrix has no accuracy.
  double accuracy() const {
    const auto n = total();
    if (n == 0) throw NumericalError("Q8 is undefined over zero residues");
    return static_cast<double>(correct()) / static_cast<double>(n);
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    for (std::size_t i = 0; i < kStructureClasses; ++i)
      for (std::size_t j = 0; j < kStructureClasses; ++j) counts_[i][j] += o.counts_[i][j];
    return *this;
  }

 private:
  static void check(int c, const char* which) {
    if (c < 0 || c >= static_cast<int>(kStructureClasses))
      throw DataError(std::string(which) + " class " + std::to_string(c) +
                      " is not one of the 8 structure classes");
  }

  Counts counts_{};
};

/// Accumulates masked-in positions of every record. Predictions hold either
/// `length` entries or the full padded 700; padded entries are ignored.
inline ConfusionMatrix confusion(std::span<const std::vector<int>> predictions,
                                 std::span<const ProteinRecord> records) {
  if (predictions.size() != records.size())
    throw DataError("alignment error: " + std::to_string(predictions.size()) +
                    " predictions for " + std::to_string(records.size()) + " records");
  ConfusionMatrix cm;
  for (std::size_t r = 0; r < records.size(); ++r) {
    const ProteinRecord& rec = records[r];
    const auto& pred = predictions[r];
    if (pred.size() != rec.length && pred.size() != kMaxLength)
      throw DataError("alignment error: record '" + rec.id + "' has " +
                      std::to_string(rec.length) + " residues, prediction has " +
                      std::to_string(pred.size()));
    if (!rec.labeled) throw DataError("record '" + rec.id + "' carries no labels to score against");
    for (std::size_t p = 0; p < rec.length; ++p) cm.add(rec.labels[p], pred[p]);
  }
  return cm;
}

inline double q8(std::span<const std::vector<int>> predictions,
                 std::span<const ProteinRecord> records) {
  return confusion(predictions, records).accuracy();
}

struct ClassMetrics {
  char letter = '?';
  /// False when the class never occurs as truth or prediction.
  bool present = false;
  std::optional<double> precision;
  std::optional<double> recall;
  /// Share of true residues in this class.
  double frequency = 0.0;
};

/// Per-class precision (column), recall (row) and true-class frequency.
/// A zero denominator leaves that value unset.
inline std::array<ClassMetrics, kStructureClasses> precision_recall(const ConfusionMatrix& cm) {
  std::array<ClassMetrics, kStructureClasses> out{};
  const double total = static_cast<double>(cm.total());
  for (std::size_t c = 0; c < kStructureClasses; ++c) {
    ClassMetrics& m = out[c];
    m.letter = class_letter(static_cast<int>(c));
    const auto diag = static_cast<double>(cm.counts()[c][c]);
    const auto col = cm.column_sum(c);
    const auto row = cm.row_sum(c);
    if (col > 0) m.precision = diag / static_cast<double>(col);
    if (row > 0) m.recall = diag / static_cast<double>(row);
    m.present = col > 0 || row > 0;
    m.frequency = total > 0 ? static_cast<double>(row) / total : 0.0;
  }
  return out;
}

/// Recall averaged with true-class frequencies as weights. Each weight
/// row_c/total cancels the recall denominator, so the sum is taken over the
/// integer diagonal of the classes that occur as truth.
inline double micro_recall(const ConfusionMatrix& cm) {
  const auto total = cm.total();
  if (total == 0) throw NumericalError("micro-averaged recall is undefined over zero residues");
  std::uint64_t hits = 0;
  for (std::size_t c = 0; c < kStructureClasses; ++c)
    if (cm.row_sum(c) > 0) hits += cm.counts()[c][c];
  return static_cast<double>(hits) / static_cast<double>(total);
}

/// Class frequencies over the masked-in labels of a corpus.
inline std::array<double, kStructureClasses> class_frequencies(
    std::span<const ProteinRecord> records) {
  const auto counts = class_counts(records);
  std::uint64_t total = 0;
  for (auto c : counts) total += c;
  if (total == 0) throw NumericalError("class frequencies are undefined over zero residues");
  std::array<double, kStructureClasses> out{};
  for (std::size_t c = 0; c < kStructureClasses; ++c)
    out[c] = static_cast<double>(counts[c]) / static_cast<double>(total);
  return out;
}

struct BootstrapResult {
  double mean = 0.0;
  double stderr_ = 0.0;
  std::size_t n_draws = 0;
};

/// Sample mean and standard error s/sqrt(n), with s the (n-1) sample deviation.
inline BootstrapResult summarize(std::span<const double> values) {
  BootstrapResult r;
  r.n_draws = values.size();
  if (values.empty()) throw NumericalError("standard error of zero values is undefined");
  // Offsetting by the first value keeps the mean of identical values exact.
  double sum = 0.0;
  for (double v : values) sum += v - values[0];
  r.mean = values[0] + sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - r.mean) * (v - r.mean);
    const double n = static_cast<double>(values.size());
    r.stderr_ = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  }
  return r;
}

/// Mean and standard error of `eval` over `n_draws` random size-N subsets
/// of a pool of M ids. Each subset is drawn without replacement and passed
/// sorted.
inline BootstrapResult bootstrap_stderr(std::size_t pool_size, std::size_t subset_size,
                                        std::size_t n_draws,
                                        const std::function<double(std::span<const std::size_t>)>& eval,
                                        std::mt19937_64& rng) {
  if (subset_size < 1) throw ConfigError("bootstrap subset size must be at least 1");
  if (pool_size < subset_size)
    throw ConfigError("bootstrap pool of " + std::to_string(pool_size) +
                      " models is smaller than the subset size " + std::to_string(subset_size));
  if (n_draws < 1) throw ConfigError("bootstrap needs at least one draw");
  std::vector<double> values;
  values.reserve(n_draws);
  std::vector<std::size_t> pool(pool_size);
  for (std::size_t d = 0; d < n_draws; ++d) {
    for (std::size_t i = 0; i < pool_size; ++i) pool[i] = i;
    for (std::size_t i = 0; i < subset_size; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool_size - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
    std::vector<std::size_t> subset(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(subset_size));
    std::sort(subset.begin(), subset.end());
    values.push_back(eval(subset));
  }
  return summarize(values);
}

/// Machine-readable report: q8, per_class and bootstrap sections.
inline nlohmann::ordered_json report_json(const ConfusionMatrix& cm,
                                          const std::optional<BootstrapResult>& bootstrap = {}) {
  nlohmann::ordered_json j;
  j["q8"] = cm.accuracy();
  j["residues"] = cm.total();
  auto& rows = j["per_class"] = nlohmann::ordered_json::array();
  for (const auto& m : precision_recall(cm)) {
    nlohmann::ordered_json row;
    row["class"] = std::string(1, m.letter);
    row["present"] = m.present;
    row["precision"] = m.precision ? nlohmann::ordered_json(*m.precision) : nlohmann::ordered_json(nullptr);
    row["recall"] = m.recall ? nlohmann::ordered_json(*m.recall) : nlohmann::ordered_json(nullptr);
    row["frequency"] = m.frequency;
    rows.push_back(std::move(row));
  }
  if (bootstrap)
    j["bootstrap"] = {{"mean", bootstrap->mean},
                      {"stderr", bootstrap->stderr_},
                      {"n_draws", bootstrap->n_draws}};
  else
    j["bootstrap"] = nullptr;
  return j;
}

/// Human-readable table, 3 decimals.
inline std::string report_table(const ConfusionMatrix& cm,
                                const std::optional<BootstrapResult>& bootstrap = {}) {
  auto fmt = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    return std::string(buf);
  };
  std::string out = "Q8 " + fmt(cm.accuracy()) + " over " + std::to_string(cm.total()) + " residues\n";
  if (bootstrap)
    out += "bootstrap " + fmt(bootstrap->mean) + " +/- " + fmt(bootstrap->stderr_) + " (" +
           std::to_string(bootstrap->n_draws) + " draws)\n";
  out += "class  precision  recall  frequency\n";
  for (const auto& m : precision_recall(cm)) {
    if (!m.present) {
      out += std::string(1, m.letter) + "      absent\n";
      continue;
    }
    auto opt = [&](const std::optional<double>& v) { return v ? fmt(*v) : std::string("  -  "); };
    out += std::string(1, m.letter) + "      " + opt(m.precision) + "      " + opt(m.recall) +
           "   " + fmt(m.frequency) + "\n";
  }
  return out;
}

}  // namespace chaincnn
