#include <gtest/gtest.h>

#include <filesystem>
#include <set>
#include <sstream>

#include "chaincnn/data.hpp"
#include "chaincnn/npy.hpp"
#include "chaincnn/synth.hpp"
#include "common.hpp"

using namespace chaincnn;
using chaincnn::testing::random_record;

namespace {

std::vector<float> empty_row() { return std::vector<float>(kMaxLength * 57, 0.0f); }

// Marks position `pos` of a 57-wide source row as a real residue.
void set_residue(std::vector<float>& row, std::size_t pos, std::size_t residue, int label, float pssm_base) {
  float* p = row.data() + pos * 57;
  p[residue] = 1.0f;
  p[22 + label] = 1.0f;
  for (std::size_t k = 0; k < 21; ++k) p[35 + k] = pssm_base + 0.01f * k;
}

void set_padding(std::vector<float>& row, std::size_t from) {
  for (std::size_t pos = from; pos < kMaxLength; ++pos) row[pos * 57 + 22 + kNoSeqClass] = 1.0f;
}

std::string npy_bytes(const Shape& shape, std::span<const float> data) {
  std::ostringstream out(std::ios::binary);
  write_npy(out, shape, data);
  return out.str();
}

}  // namespace

TEST(Npy, RoundTripIsBitExact) {
  const std::vector<float> data{1.0f, -0.0f, 3.25e-7f, 1e30f, 5.0f, -6.5f, 7.0f, 0.1f};
  std::istringstream in(npy_bytes({2, 4}, data), std::ios::binary);
  const NpyArray a = read_npy(in);
  EXPECT_EQ(a.shape, (Shape{2, 4}));
  ASSERT_EQ(a.data.size(), 8u);
  EXPECT_EQ(std::memcmp(a.data.data(), data.data(), data.size() * sizeof(float)), 0);
}

TEST(Npy, Float64PayloadIsConverted) {
  std::string header = "{'descr': '<f8', 'fortran_order': False, 'shape': (3,), }";
  while ((10 + header.size() + 1) % 64 != 0) header += ' ';
  header += '\n';
  std::string bytes = "\x93NUMPY";
  bytes += '\x01';
  bytes += '\x00';
  bytes += static_cast<char>(header.size() & 0xff);
  bytes += static_cast<char>(header.size() >> 8);
  bytes += header;
  for (double d : {0.5, -2.0, 1.0 / 3.0}) bytes.append(reinterpret_cast<const char*>(&d), 8);
  std::istringstream in(bytes, std::ios::binary);
  const NpyArray a = read_npy(in);
  ASSERT_EQ(a.shape, (Shape{3}));
  EXPECT_EQ(a.data[0], 0.5f);
  EXPECT_EQ(a.data[1], -2.0f);
  EXPECT_EQ(a.data[2], static_cast<float>(1.0 / 3.0));
}

TEST(Npy, CorruptionIsReportedWithOffset) {
  {
    std::istringstream in(std::string("PK\x03\x04junkjunk"), std::ios::binary);
    try {
      read_npy(in);
      FAIL() << "zip magic accepted";
    } catch (const FormatError& e) {
      EXPECT_NE(std::string(e.what()).find("offset 0"), std::string::npos) << e.what();
    }
  }
  {
    const std::vector<float> data(8, 1.0f);
    std::string bytes = npy_bytes({2, 4}, data);
    bytes.resize(bytes.size() - 5);
    std::istringstream in(bytes, std::ios::binary);
    try {
      read_npy(in);
      FAIL() << "truncated payload accepted";
    } catch (const FormatError& e) {
      EXPECT_NE(std::string(e.what()).find("truncated payload at offset"), std::string::npos) << e.what();
    }
  }
  {
    std::string bytes = npy_bytes({2}, std::vector<float>{1, 2});
    const auto pos = bytes.find("<f4");
    bytes.replace(pos, 3, "<i4");
    std::istringstream in(bytes, std::ios::binary);
    EXPECT_THROW(read_npy(in), FormatError);
  }
}

TEST(Npy, BenchmarkShapedFileDecodesIntoRecords) {
  std::vector<float> all;
  for (std::size_t n = 0; n < 3; ++n) {
    auto row = empty_row();
    for (std::size_t p = 0; p < 5 + n; ++p) set_residue(row, p, (p + n) % 21, static_cast<int>(p % 8), 0.5f);
    set_padding(row, 5 + n);
    all.insert(all.end(), row.begin(), row.end());
  }
  std::istringstream in(npy_bytes({3, 39900}, all), std::ios::binary);
  const auto records = decode_records(read_npy(in));
  ASSERT_EQ(records.size(), 3u);
  for (std::size_t n = 0; n < 3; ++n) {
    EXPECT_EQ(records[n].length, 5 + n);
    EXPECT_EQ(records[n].features.size(), (5 + n) * kFeatureChannels);
  }
  const NpyArray cube{{3, 700, 57}, all};
  EXPECT_EQ(decode_records(cube).size(), 3u);
  const NpyArray wrong{{3, 39899}, std::vector<float>(3 * 39899)};
  EXPECT_THROW(decode_records(wrong), DataError);
}

TEST(DecodeRecord, AllPaddingRow) {
  auto row = empty_row();
  set_padding(row, 0);
  const ProteinRecord r = decode_record(row);
  EXPECT_EQ(r.length, 0u);
  for (auto m : r.mask()) EXPECT_EQ(m, 0);
}

TEST(DecodeRecord, ThreeResiduesThenPadding) {
  auto row = empty_row();
  set_residue(row, 0, 2, 4, 0.1f);
  set_residue(row, 1, 7, 0, 0.2f);
  set_residue(row, 2, 20, 7, 0.3f);
  set_padding(row, 3);
  const ProteinRecord r = decode_record(row);
  EXPECT_EQ(r.length, 3u);
  const auto mask = r.mask();
  EXPECT_EQ(mask[0], 1);
  EXPECT_EQ(mask[2], 1);
  EXPECT_EQ(mask[3], 0);
  EXPECT_EQ(r.labels[0], 4);
  EXPECT_EQ(r.labels[1], 0);
  EXPECT_EQ(r.labels[2], 7);
  EXPECT_EQ(r.labels[3], kNoSeqClass);
  EXPECT_EQ(r.feature(0, 2), 1.0f);
  EXPECT_EQ(r.feature(1, kResidueChannels + 3), 0.2f + 0.03f);
  EXPECT_EQ(r.feature(5, 0), 0.0f);
}

TEST(DecodeRecord, LabelTiesGoToLowestIndex) {
  auto row = empty_row();
  set_residue(row, 0, 1, 5, 0.0f);
  row[22 + 2] = 1.0f;
  set_padding(row, 1);
  EXPECT_EQ(decode_record(row).labels[0], 2);
}

TEST(DecodeRecord, Rejections) {
  auto interior = empty_row();
  set_residue(interior, 0, 1, 1, 0.0f);
  set_residue(interior, 2, 1, 1, 0.0f);
  interior[1 * 57 + 22 + kNoSeqClass] = 1.0f;
  set_padding(interior, 3);
  EXPECT_THROW(decode_record(interior), DataError);

  auto no_onehot = empty_row();
  no_onehot[22 + 3] = 1.0f;
  set_padding(no_onehot, 1);
  EXPECT_THROW(decode_record(no_onehot), DataError);

  EXPECT_THROW(decode_record(std::vector<float>(10)), DataError);
}

TEST(DecodeRecord, ReencodeReproducesMappedColumns) {
  Rng rng(31);
  auto row = empty_row();
  std::uniform_real_distribution<float> u(-3.0f, 3.0f);
  for (std::size_t p = 0; p < 40; ++p) {
    row[p * 57 + rng() % 21] = 1.0f;
    row[p * 57 + 22 + rng() % 8] = 1.0f;
    for (std::size_t k = 35; k < 56; ++k) row[p * 57 + k] = u(rng);
  }
  set_padding(row, 40);
  const auto again = encode_record(decode_record(row));
  for (std::size_t p = 0; p < kMaxLength; ++p)
    for (std::size_t c : {0, 5, 20, 22, 25, 30, 35, 44, 55})
      ASSERT_EQ(again[p * 57 + c], row[p * 57 + c]) << p << "," << c;
}

TEST(ColumnMap, Validation) {
  ColumnMap ok;
  EXPECT_NO_THROW(ok.validate());
  ColumnMap overlap = ok;
  overlap.pssm = {20, 41};
  EXPECT_THROW(overlap.validate(), ConfigError);
  ColumnMap narrow = ok;
  narrow.labels = {22, 30};
  EXPECT_THROW(narrow.validate(), ConfigError);
  ColumnMap outside = ok;
  outside.row_width = 50;
  EXPECT_THROW(outside.validate(), ConfigError);
}

TEST(NormalizePssm, Examples) {
  std::vector<ProteinRecord> records(1);
  records[0].length = 3;
  records[0].features.assign(3 * kFeatureChannels, 0.0f);
  for (std::size_t p = 0; p < 3; ++p) {
    records[0].features[p * kFeatureChannels + kResidueChannels] = static_cast<float>(p + 1);
    records[0].features[p * kFeatureChannels + kResidueChannels + 1] = 4.0f;
  }
  normalize_pssm(records);
  EXPECT_NEAR(records[0].feature(0, kResidueChannels), -1.2247449, 1e-6);
  EXPECT_NEAR(records[0].feature(1, kResidueChannels), 0.0, 1e-6);
  EXPECT_NEAR(records[0].feature(2, kResidueChannels), 1.2247449, 1e-6);
  for (std::size_t p = 0; p < 3; ++p) EXPECT_EQ(records[0].feature(p, kResidueChannels + 1), 0.0f);
}

TEST(NormalizePssm, TrainStatisticsOnlyAndIdempotent) {
  Rng rng(4);
  DatasetSplit split;
  for (int i = 0; i < 6; ++i) split.train.push_back(random_record(20 + i, rng));
  split.validation.push_back(random_record(15, rng));
  split.test.push_back(random_record(9, rng));
  for (auto& r : split.train)
    for (std::size_t p = 0; p < r.length; ++p) r.features[p * kFeatureChannels + kResidueChannels] += 5.0f;
  const ProteinRecord val_before = split.validation[0];
  const PssmStats stats = normalize_pssm(split);
  EXPECT_NEAR(stats.mean[0], 5.0, 0.5);

  const PssmStats after = fit_pssm_stats(split.train);
  for (std::size_t k = 0; k < kPssmChannels; ++k) {
    EXPECT_NEAR(after.mean[k], 0.0, 1e-5);
    EXPECT_NEAR(after.stddev[k], 1.0, 1e-5);
  }
  for (std::size_t p = 0; p < 15; ++p)
    EXPECT_NEAR(split.validation[0].feature(p, kResidueChannels),
                (val_before.feature(p, kResidueChannels) - stats.mean[0]) / stats.stddev[0], 1e-5);

  auto twice = split.train;
  normalize_pssm(std::span<ProteinRecord>(twice));
  for (std::size_t i = 0; i < twice.size(); ++i)
    for (std::size_t j = 0; j < twice[i].features.size(); ++j)
      ASSERT_NEAR(twice[i].features[j], split.train[i].features[j], 1e-6);

  std::vector<ProteinRecord> none;
  EXPECT_THROW(fit_pssm_stats(none), DataError);
}

TEST(Split, SizesAndDeterminism) {
  std::vector<ProteinRecord> records(5534);
  for (std::size_t i = 0; i < records.size(); ++i) records[i].id = std::to_string(i);
  const DatasetSplit a = split(records, 256, 7);
  const DatasetSplit b = split(records, 256, 7);
  const DatasetSplit c = split(records, 256, 8);
  EXPECT_EQ(a.train.size(), 5278u);
  EXPECT_EQ(a.validation.size(), 256u);
  std::set<std::string> seen;
  for (const auto& r : a.train) seen.insert(r.id);
  for (const auto& r : a.validation) seen.insert(r.id);
  EXPECT_EQ(seen.size(), 5534u);
  for (std::size_t i = 0; i < 256; ++i) EXPECT_EQ(a.validation[i].id, b.validation[i].id);
  std::set<std::string> va, vc;
  for (const auto& r : a.validation) va.insert(r.id);
  for (const auto& r : c.validation) vc.insert(r.id);
  EXPECT_NE(va, vc);
  EXPECT_THROW(split(records, 5534, 0), ConfigError);
}

TEST(MakeBatch, ChannelsAndConditioning) {
  Rng rng(9);
  std::vector<ProteinRecord> records{random_record(30, rng, "a"), random_record(12, rng, "b")};
  const Batch plain = make_batch(records);
  EXPECT_EQ(plain.channels(), 42u);
  EXPECT_EQ(plain.length(), kMaxLength);
  EXPECT_EQ(plain.mask[29], 1.0f);
  EXPECT_EQ(plain.mask[30], 0.0f);
  EXPECT_EQ(plain.labels[kMaxLength + 12], kNoSeqClass);

  const Batch cond = make_batch(records, {.conditioning_shift = 22});
  EXPECT_EQ(cond.channels(), 51u);
  for (std::size_t j = 0; j < 22; ++j)
    EXPECT_EQ(cond.features.at(0, j, kFeatureChannels + kNoSeqClass), 1.0f) << j;
  EXPECT_EQ(cond.features.at(0, 22, kFeatureChannels + records[0].labels[0]), 1.0f);
  float sum = 0;
  for (std::size_t c = 0; c < kNumClasses; ++c) sum += cond.features.at(0, 22, kFeatureChannels + c);
  EXPECT_EQ(sum, 1.0f);
  EXPECT_THROW(make_batch(records, {.conditioning_shift = 0}), ConfigError);
}

TEST(MakeBatch, ConditioningIsCausal) {
  Rng rng(10);
  const ProteinRecord base = random_record(60, rng);
  const std::size_t shift = 5;
  for (std::size_t k : {0u, 17u, 54u}) {
    ProteinRecord changed = base;
    changed.labels[k] = (changed.labels[k] + 3) % 8;
    const Batch a = make_batch(std::span<const ProteinRecord>(&base, 1), {.conditioning_shift = shift});
    const Batch b = make_batch(std::span<const ProteinRecord>(&changed, 1), {.conditioning_shift = shift});
    for (std::size_t j = 0; j < kMaxLength; ++j) {
      bool same = true;
      for (std::size_t c = 0; c < a.channels(); ++c) same = same && a.features.at(0, j, c) == b.features.at(0, j, c);
      if (j < k + shift || j >= base.length) EXPECT_TRUE(same) << "k=" << k << " j=" << j;
      if (j == k + shift) EXPECT_FALSE(same) << "k=" << k;
    }
  }
}

TEST(MakeBatch, ExplicitContextsReplaceLabels) {
  Rng rng(12);
  const ProteinRecord r = random_record(10, rng);
  std::vector<std::vector<int>> ctx{std::vector<int>(kMaxLength, 6)};
  const Batch b = make_batch(std::span<const ProteinRecord>(&r, 1), {.conditioning_shift = 1}, ctx);
  for (std::size_t j = 1; j < 10; ++j) EXPECT_EQ(b.features.at(0, j, kFeatureChannels + 6), 1.0f);
  EXPECT_EQ(b.labels[3], r.labels[3]);
}

TEST(ClassCounts, MatchHandCounts) {
  std::vector<ProteinRecord> records(2);
  const std::vector<int> a{0, 0, 5, 7}, b{5, 3};
  records[0].length = a.size();
  records[1].length = b.size();
  std::copy(a.begin(), a.end(), records[0].labels.begin());
  std::copy(b.begin(), b.end(), records[1].labels.begin());
  const auto counts = class_counts(records);
  const std::array<std::uint64_t, 8> expected{2, 0, 0, 1, 0, 2, 0, 1};
  EXPECT_EQ(counts, expected);

  const auto synth = synthetic_corpus({.count = 5, .min_length = 10, .max_length = 40, .seed = 3});
  std::array<std::uint64_t, 8> hand{};
  for (const auto& r : synth)
    for (std::size_t p = 0; p < kMaxLength; ++p) {
      if (p < r.length) {
        ASSERT_GE(r.labels[p], 0);
        ASSERT_LT(r.labels[p], 8);
        ++hand[static_cast<std::size_t>(r.labels[p])];
      } else {
        ASSERT_EQ(r.labels[p], kNoSeqClass);
      }
    }
  EXPECT_EQ(class_counts(synth), hand);
}

TEST(Native, RoundTrip) {
  const auto records = synthetic_corpus({.count = 4, .min_length = 3, .max_length = 25, .seed = 1});
  std::stringstream text;
  write_native(text, records);
  const auto back = read_native(text);
  ASSERT_EQ(back.size(), records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    EXPECT_EQ(back[i].id, records[i].id);
    EXPECT_EQ(back[i].length, records[i].length);
    EXPECT_EQ(back[i].labels, records[i].labels);
    EXPECT_EQ(back[i].features, records[i].features);
  }
}

TEST(Native, UnlabeledRecords) {
  std::string pssm;
  for (int p = 0; p < 2; ++p) {
    if (p) pssm += ';';
    for (int k = 0; k < 21; ++k) pssm += (k ? "," : "") + std::to_string(k);
  }
  std::istringstream in("q\tAC\t\t" + pssm + "\n");
  const auto records = read_native(in);
  ASSERT_EQ(records.size(), 1u);
  EXPECT_FALSE(records[0].labeled);
  EXPECT_EQ(records[0].length, 2u);
}

TEST(Native, ErrorsNameTheLine) {
  const std::string good_pssm = [] {
    std::string s;
    for (int k = 0; k < 21; ++k) s += (k ? ",0" : "0");
    return s;
  }();
  const std::vector<std::pair<std::string, std::string>> cases{
      {"x\tA\tH\t" + good_pssm + "\nbad line\n", "src:2"},
      {"x\tA\tQ\t" + good_pssm + "\n", "unknown structure label"},
      {"x\tZ\tH\t" + good_pssm + "\n", "unknown residue"},
      {"x\tAA\tHH\t" + good_pssm + "\n", "PSSM rows"},
      {"x\tA\tH\t1,2\n", "has 2 values"},
      {"x\tA\tHH\t" + good_pssm + "\n", "labels for"},
  };
  for (const auto& [text, needle] : cases) {
    std::istringstream in(text);
    try {
      read_native(in, "src");
      FAIL() << "accepted: " << text;
    } catch (const DataError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  }
}

TEST(LoadCorpus, MissingFileIsDataError) {
  EXPECT_THROW(load_corpus("/nonexistent/cullpdb.npy"), DataError);
}
