#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "chaincnn/autodiff.hpp"
#include "chaincnn/error.hpp"
#include "chaincnn/npy.hpp"
#include "chaincnn/tensor.hpp"

namespace chaincnn {

inline constexpr std::size_t kMaxLength = 700;
inline constexpr std::size_t kResidueChannels = 21;
inline constexpr std::size_t kPssmChannels = 21;
inline constexpr std::size_t kFeatureChannels = kResidueChannels + kPssmChannels;  // 42
inline constexpr std::size_t kNumClasses = 9;        // 8 structure classes + no-seq
inline constexpr std::size_t kStructureClasses = 8;
inline constexpr int kNoSeqClass = 8;
inline constexpr std::size_t kConditionedChannels = kFeatureChannels + kNumClasses;  // 51

/// Class index order of the benchmark label block; index 8 is no-seq.
inline constexpr std::string_view kClassLetters = "LBEGIHST";
/// Residue one-hot order of the benchmark feature block.
inline constexpr std::string_view kResidueLetters = "ACEDGFIHKMLNQPSRTWVYX";

inline int class_index(char letter) {
  const auto pos = kClassLetters.find(letter);
  return pos == std::string_view::npos ? -1 : static_cast<int>(pos);
}

inline char class_letter(int index) {
  if (index < 0 || index >= static_cast<int>(kStructureClasses))
    throw DataError("no structure letter for class " + std::to_string(index));
  return kClassLetters[static_cast<std::size_t>(index)];
}

struct ColumnRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t width() const { return end - begin; }
  bool overlaps(const ColumnRange& o) const { return begin < o.end && o.begin < end; }
  bool operator==(const ColumnRange&) const = default;
};

/// Where the residue one-hot, label and profile blocks sit in one position
/// of the 57-column source layout.
struct ColumnMap {
  ColumnRange residue_onehot{0, 21};
  ColumnRange labels{22, 31};
  ColumnRange pssm{35, 56};
  std::size_t row_width = 57;

  bool operator==(const ColumnMap&) const = default;

  void validate() const {
    if (residue_onehot.width() != kResidueChannels || pssm.width() != kPssmChannels ||
        labels.width() != kNumClasses)
      throw ConfigError("column map widths must be 21 (residues), 9 (labels), 21 (pssm)");
    if (residue_onehot.overlaps(labels) || residue_onehot.overlaps(pssm) || labels.overlaps(pssm))
      throw ConfigError("column map ranges overlap");
    if (residue_onehot.end > row_width || labels.end > row_width || pssm.end > row_width)
      throw ConfigError("column map exceeds the row width " + std::to_string(row_width));
  }
};

/// One protein: 42 features per real residue (residue one-hot then PSSM),
/// labels padded to 700 positions with no-seq, and a prefix mask of
/// `length` real residues. Features are stored only for real residues;
/// padded positions read as zero.
struct ProteinRecord {
  std::string id;
  std::vector<float> features;  // length * 42
  std::vector<int> labels = std::vector<int>(kMaxLength, kNoSeqClass);
  std::size_t length = 0;
  bool labeled = true;

  bool masked_in(std::size_t pos) const { return pos < length; }
  float feature(std::size_t pos, std::size_t ch) const {
    return pos < length ? features[pos * kFeatureChannels + ch] : 0.0f;
  }
  std::span<const float> position(std::size_t pos) const {
    return std::span<const float>(features).subspan(pos * kFeatureChannels, kFeatureChannels);
  }
  std::vector<std::uint8_t> mask() const {
    std::vector<std::uint8_t> m(kMaxLength, 0);
    std::fill_n(m.begin(), length, 1);
    return m;
  }
  std::string label_string() const {
    std::string s;
    for (std::size_t i = 0; i < length; ++i) s += class_letter(labels[i]);
    return s;
  }
};

struct DatasetSplit {
  std::vector<ProteinRecord> train;
  std::vector<ProteinRecord> validation;
  std::vector<ProteinRecord> test;
  std::uint64_t seed = 0;
};

/// Decodes one 700 x row_width source row. The label block's argmax (ties
/// to the lowest index) gives the class; positions whose label block is
/// empty or argmax no-seq are padding, which must form a suffix.
inline ProteinRecord decode_record(std::span<const float> row, const ColumnMap& map = {},
                                   std::string id = {}) {
  map.validate();
  if (row.size() != kMaxLength * map.row_width)
    throw DataError("record row has " + std::to_string(row.size()) + " values, expected " +
                    std::to_string(kMaxLength * map.row_width));
  ProteinRecord rec;
  rec.id = std::move(id);
  bool padding_seen = false;
  for (std::size_t pos = 0; pos < kMaxLength; ++pos) {
    const float* p = row.data() + pos * map.row_width;
    int best = -1;
    float best_value = 0.0f;
    for (std::size_t k = 0; k < map.labels.width(); ++k) {
      const float v = p[map.labels.begin + k];
      if (v > best_value) {
        best_value = v;
        best = static_cast<int>(k);
      }
    }
    const bool padding = best < 0 || best == kNoSeqClass;
    if (padding) {
      padding_seen = true;
      continue;
    }
    if (padding_seen)
      throw DataError("record '" + rec.id + "': real residue at position " + std::to_string(pos) +
                      " after no-seq padding (mask must be prefix-contiguous)");
    bool any = false;
    for (std::size_t k = 0; k < kResidueChannels; ++k) any = any || p[map.residue_onehot.begin + k] != 0.0f;
    if (!any)
      throw DataError("record '" + rec.id + "': malformed residue one-hot at position " +
                      std::to_string(pos));
    for (std::size_t k = 0; k < kResidueChannels; ++k)
      rec.features.push_back(p[map.residue_onehot.begin + k]);
    for (std::size_t k = 0; k < kPssmChannels; ++k) rec.features.push_back(p[map.pssm.begin + k]);
    rec.labels[pos] = best;
    ++rec.length;
  }
  return rec;
}

/// Inverse of decode_record for the mapped blocks; other columns are zero.
inline std::vector<float> encode_record(const ProteinRecord& rec, const ColumnMap& map = {}) {
  map.validate();
  std::vector<float> row(kMaxLength * map.row_width, 0.0f);
  for (std::size_t pos = 0; pos < kMaxLength; ++pos) {
    float* p = row.data() + pos * map.row_width;
    p[map.labels.begin + static_cast<std::size_t>(rec.labels[pos])] = 1.0f;
    if (pos >= rec.length) continue;
    for (std::size_t k = 0; k < kResidueChannels; ++k)
      p[map.residue_onehot.begin + k] = rec.feature(pos, k);
    for (std::size_t k = 0; k < kPssmChannels; ++k)
      p[map.pssm.begin + k] = rec.feature(pos, kResidueChannels + k);
  }
  return row;
}

/// Accepts [N, 700*row_width] or [N, 700, row_width] arrays.
inline std::vector<ProteinRecord> decode_records(const NpyArray& array, const ColumnMap& map = {},
                                                 const std::string& prefix = "protein") {
  const std::size_t per_row = kMaxLength * map.row_width;
  const bool flat = array.shape.size() == 2 && array.shape[1] == per_row;
  const bool cube = array.shape.size() == 3 && array.shape[1] == kMaxLength &&
                    array.shape[2] == map.row_width;
  if (!flat && !cube)
    throw DataError("dataset array " + shape_string(array.shape) + " is not [N," +
                    std::to_string(per_row) + "] or [N,700," + std::to_string(map.row_width) + "]");
  std::vector<ProteinRecord> out;
  out.reserve(array.shape[0]);
  for (std::size_t i = 0; i < array.shape[0]; ++i)
    out.push_back(decode_record(std::span<const float>(array.data).subspan(i * per_row, per_row),
                                map, prefix + "_" + std::to_string(i)));
  return out;
}

struct PssmStats {
  std::array<float, kPssmChannels> mean{};
  std::array<float, kPssmChannels> stddev{};
};

/// Per-column mean and population standard deviation over masked-in
/// positions.
inline PssmStats fit_pssm_stats(std::span<const ProteinRecord> records) {
  std::array<double, kPssmChannels> sum{}, sq{};
  std::size_t n = 0;
  for (const auto& r : records)
    for (std::size_t pos = 0; pos < r.length; ++pos) {
      ++n;
      for (std::size_t k = 0; k < kPssmChannels; ++k) sum[k] += r.feature(pos, kResidueChannels + k);
    }
  if (n == 0) throw DataError("cannot fit PSSM statistics on an empty training set");
  PssmStats s;
  for (std::size_t k = 0; k < kPssmChannels; ++k) sum[k] /= static_cast<double>(n);
  for (const auto& r : records)
    for (std::size_t pos = 0; pos < r.length; ++pos)
      for (std::size_t k = 0; k < kPssmChannels; ++k) {
        const double d = r.feature(pos, kResidueChannels + k) - sum[k];
        sq[k] += d * d;
      }
  for (std::size_t k = 0; k < kPssmChannels; ++k) {
    s.mean[k] = static_cast<float>(sum[k]);
    s.stddev[k] = static_cast<float>(std::sqrt(sq[k] / static_cast<double>(n)));
  }
  return s;
}

/// Centres and scales the PSSM block. A zero-variance column is centred and
/// left unscaled.
inline void apply_pssm_stats(std::span<ProteinRecord> records, const PssmStats& stats) {
  for (auto& r : records)
    for (std::size_t pos = 0; pos < r.length; ++pos)
      for (std::size_t k = 0; k < kPssmChannels; ++k) {
        float& v = r.features[pos * kFeatureChannels + kResidueChannels + k];
        const double centered = static_cast<double>(v) - stats.mean[k];
        v = static_cast<float>(stats.stddev[k] > 0.0f ? centered / stats.stddev[k] : centered);
      }
}

inline void warn_zero_variance(const PssmStats& stats, std::ostream& log = std::clog) {
  for (std::size_t k = 0; k < kPssmChannels; ++k)
    if (stats.stddev[k] == 0.0f)
      log << "warning: PSSM column " << k << " has zero variance; centred only\n";
}

/// Fits on the records and normalises them in place.
inline PssmStats normalize_pssm(std::span<ProteinRecord> records) {
  const PssmStats stats = fit_pssm_stats(records);
  warn_zero_variance(stats);
  apply_pssm_stats(records, stats);
  return stats;
}

/// Fits on the training split and applies the same statistics everywhere.
inline PssmStats normalize_pssm(DatasetSplit& split) {
  const PssmStats stats = fit_pssm_stats(split.train);
  warn_zero_variance(stats);
  apply_pssm_stats(split.train, stats);
  apply_pssm_stats(split.validation, stats);
  apply_pssm_stats(split.test, stats);
  return stats;
}

/// Seeded shuffle; the first n_val shuffled records become validation.
inline DatasetSplit split(std::vector<ProteinRecord> records, std::size_t n_val,
                          std::uint64_t seed) {
  if (n_val >= records.size())
    throw ConfigError("validation size " + std::to_string(n_val) + " must be below record count " +
                      std::to_string(records.size()));
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<bool> is_val(records.size(), false);
  for (std::size_t i = 0; i < n_val; ++i) is_val[order[i]] = true;
  DatasetSplit out;
  out.seed = seed;
  for (std::size_t i = 0; i < n_val; ++i) out.validation.push_back(std::move(records[order[i]]));
  for (std::size_t i = 0; i < records.size(); ++i)
    if (!is_val[i]) out.train.push_back(std::move(records[i]));
  return out;
}

/// A mini-batch laid out as [batch, length, channels].
struct Batch {
  Tensor features;
  std::vector<int> labels;
  Tensor mask;

  std::size_t size() const { return features.dim(0); }
  std::size_t length() const { return features.dim(1); }
  std::size_t channels() const { return features.dim(2); }
};

struct BatchOptions {
  /// Shift S of the label-conditioning channels; none for plain batches.
  std::optional<std::size_t> conditioning_shift;
  /// Padded sequence length of the batch tensors.
  std::size_t length = kMaxLength;
};

/// Longest record in the set (at least 1): a batch this long gives the same
/// results at every real position as a 700-long one.
inline std::size_t longest(std::span<const ProteinRecord* const> records) {
  std::size_t n = 1;
  for (const auto* r : records) n = std::max(n, r->length);
  return n;
}

/// Writes the 9 conditioning channels of one sequence: position j carries
/// one-hot(context[j - shift]), or the no-seq one-hot when j < shift.
/// `out` addresses position 0 of a [length, stride] block at channel offset.
inline void write_conditioning(std::span<const int> context, std::size_t length,
                               std::size_t shift, float* out, std::size_t stride) {
  for (std::size_t j = 0; j < length; ++j) {
    const int cls = j >= shift ? context[j - shift] : kNoSeqClass;
    out[j * stride + static_cast<std::size_t>(cls)] = 1.0f;
  }
}

/// Builds a batch. `contexts`, when given, replaces the true labels as the
/// conditioning sequence of each record (scheduled sampling).
inline Batch make_batch(std::span<const ProteinRecord* const> records,
                        const BatchOptions& options = {},
                        std::span<const std::vector<int>> contexts = {}) {
  if (records.empty()) throw ConfigError("make_batch: no records");
  if (options.conditioning_shift && *options.conditioning_shift < 1)
    throw ConfigError("conditioning shift must be at least 1");
  if (!contexts.empty() && contexts.size() != records.size())
    throw ConfigError("make_batch: one context per record required");
  const std::size_t length = options.length;
  for (const auto* r : records)
    if (r->length > length)
      throw DataError("record '" + r->id + "' longer than batch length " + std::to_string(length));
  const std::size_t ch = options.conditioning_shift ? kConditionedChannels : kFeatureChannels;
  Batch batch{Tensor({records.size(), length, ch}),
              std::vector<int>(records.size() * length, kNoSeqClass),
              Tensor({records.size(), length})};
  for (std::size_t b = 0; b < records.size(); ++b) {
    const ProteinRecord& r = *records[b];
    for (std::size_t pos = 0; pos < r.length; ++pos) {
      std::copy_n(r.features.data() + pos * kFeatureChannels, kFeatureChannels,
                  batch.features.raw() + (b * length + pos) * ch);
      batch.labels[b * length + pos] = r.labels[pos];
      batch.mask[b * length + pos] = 1.0f;
    }
    if (options.conditioning_shift) {
      std::span<const int> ctx = contexts.empty() ? std::span<const int>(r.labels)
                                                  : std::span<const int>(contexts[b]);
      write_conditioning(ctx, r.length, *options.conditioning_shift,
                         batch.features.raw() + b * length * ch + kFeatureChannels, ch);
    }
  }
  return batch;
}

inline Batch make_batch(std::span<const ProteinRecord> records, const BatchOptions& options = {},
                        std::span<const std::vector<int>> contexts = {}) {
  std::vector<const ProteinRecord*> ptrs;
  for (const auto& r : records) ptrs.push_back(&r);
  return make_batch(std::span<const ProteinRecord* const>(ptrs), options, contexts);
}

/// Counts of each structure class over labelled masked-in positions.
inline std::array<std::uint64_t, kStructureClasses> class_counts(
    std::span<const ProteinRecord> records) {
  std::array<std::uint64_t, kStructureClasses> counts{};
  for (const auto& r : records) {
    if (!r.labeled) continue;
    for (std::size_t pos = 0; pos < r.length; ++pos) ++counts[static_cast<std::size_t>(r.labels[pos])];
  }
  return counts;
}

// ---------------------------------------------------------------------------
// Native fixture format: one protein per line, tab-separated
//   id <TAB> residues <TAB> labels <TAB> pssm
// pssm rows are ';'-separated, each 21 ','-separated decimals. The labels
// field may be empty for unlabelled input.

namespace native_detail {

inline std::vector<std::string_view> split_view(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline float parse_float(std::string_view text, const std::string& where) {
  while (!text.empty() && (text.front() == ' ')) text.remove_prefix(1);
  while (!text.empty() && (text.back() == ' ' || text.back() == '\r')) text.remove_suffix(1);
  std::string buf(text);
  char* end = nullptr;
  const float v = std::strtof(buf.c_str(), &end);
  if (buf.empty() || end != buf.c_str() + buf.size() || !std::isfinite(v))
    throw DataError(where + ": bad PSSM value '" + buf + "'");
  return v;
}

}  // namespace native_detail

inline ProteinRecord parse_native_line(std::string_view line, const std::string& where) {
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  const auto fields = native_detail::split_view(line, '\t');
  if (fields.size() != 4)
    throw DataError(where + ": expected 4 tab-separated fields, found " + std::to_string(fields.size()));
  ProteinRecord rec;
  rec.id = std::string(fields[0]);
  const std::string_view residues = fields[1];
  const std::string_view labels = fields[2];
  if (residues.empty()) throw DataError(where + ": empty residue string");
  if (residues.size() > kMaxLength)
    throw DataError(where + ": protein longer than " + std::to_string(kMaxLength) + " residues");
  rec.length = residues.size();
  rec.labeled = !labels.empty();
  if (rec.labeled && labels.size() != residues.size())
    throw DataError(where + ": " + std::to_string(labels.size()) + " labels for " +
                    std::to_string(residues.size()) + " residues");
  const auto rows = native_detail::split_view(fields[3], ';');
  if (rows.size() != residues.size())
    throw DataError(where + ": " + std::to_string(rows.size()) + " PSSM rows for " +
                    std::to_string(residues.size()) + " residues");
  rec.features.assign(rec.length * kFeatureChannels, 0.0f);
  for (std::size_t pos = 0; pos < rec.length; ++pos) {
    const auto idx = kResidueLetters.find(residues[pos]);
    if (idx == std::string_view::npos)
      throw DataError(where + ": unknown residue '" + std::string(1, residues[pos]) + "' at position " +
                      std::to_string(pos));
    rec.features[pos * kFeatureChannels + idx] = 1.0f;
    if (rec.labeled) {
      const int cls = class_index(labels[pos]);
      if (cls < 0)
        throw DataError(where + ": unknown structure label '" + std::string(1, labels[pos]) +
                        "' at position " + std::to_string(pos));
      rec.labels[pos] = cls;
    } else {
      rec.labels[pos] = 0;
    }
    const auto values = native_detail::split_view(rows[pos], ',');
    if (values.size() != kPssmChannels)
      throw DataError(where + ": PSSM row " + std::to_string(pos) + " has " +
                      std::to_string(values.size()) + " values, expected 21");
    for (std::size_t k = 0; k < kPssmChannels; ++k)
      rec.features[pos * kFeatureChannels + kResidueChannels + k] =
          native_detail::parse_float(values[k], where);
  }
  return rec;
}

/// Blank lines are skipped; errors name source and line number.
inline std::vector<ProteinRecord> read_native(std::istream& in, const std::string& source = "input") {
  std::vector<ProteinRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    out.push_back(parse_native_line(line, source + ":" + std::to_string(lineno)));
  }
  return out;
}

inline std::vector<ProteinRecord> load_native(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return read_native(in, path.string());
}

inline void write_native(std::ostream& out, std::span<const ProteinRecord> records) {
  char buf[32];
  for (const auto& r : records) {
    out << r.id << '\t';
    for (std::size_t pos = 0; pos < r.length; ++pos) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < kResidueChannels; ++k)
        if (r.feature(pos, k) > r.feature(pos, best)) best = k;
      out << kResidueLetters[best];
    }
    out << '\t';
    if (r.labeled) out << r.label_string();
    out << '\t';
    for (std::size_t pos = 0; pos < r.length; ++pos) {
      if (pos) out << ';';
      for (std::size_t k = 0; k < kPssmChannels; ++k) {
        std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(r.feature(pos, kResidueChannels + k)));
        out << (k ? "," : "") << buf;
      }
    }
    out << '\n';
  }
}

/// Loads a corpus file by extension: .npy (benchmark layout) or native text.
inline std::vector<ProteinRecord> load_corpus(const std::filesystem::path& path,
                                              const ColumnMap& map = {}) {
  if (!std::filesystem::exists(path)) throw DataError("data file not found: " + path.string());
  if (path.extension() == ".npy") return decode_records(load_npy(path), map, path.stem().string());
  return load_native(path);
}

}  // namespace chaincnn
