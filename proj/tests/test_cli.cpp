#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "chaincnn/cli.hpp"

using namespace chaincnn;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "chaincnn");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("chaincnn_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_ / "data");
    ::unsetenv("CHAINCNN_SEED");
  }
  void TearDown() override {
    ::unsetenv("CHAINCNN_SEED");
    fs::remove_all(dir_);
  }

  void make_data(std::size_t count = 24) {
    for (const char* name : {"train.txt", "test.txt"}) {
      const auto r = run({"synth", "--out", (dir_ / "data" / name).string(), "--count", std::to_string(count),
                          "--min-length", "20", "--max-length", "60", "--seed",
                          std::string(name) == "train.txt" ? "1" : "2"});
      ASSERT_EQ(r.code, 0) << r.err;
    }
  }

  // Small enough to train in well under a second.
  std::vector<std::string> tiny(std::vector<std::string> extra = {}) {
    std::vector<std::string> a{"--data", (dir_ / "data").string(), "--set", "kind=conv", "--set", "num_blocks=1",
                               "--set", "multi_scale=3x4", "--set", "single_scale=3x4", "--set",
                               "skip_connections=false", "--set", "fc_window=3", "--set", "fc_layers=1",
                               "--set", "fc_width=8", "--set", "batch_size=4", "--set", "max_iterations=30",
                               "--set", "eval_every=10", "--set", "val_size=4"};
    a.insert(a.end(), extra.begin(), extra.end());
    return a;
  }

  Result train(const fs::path& out, std::vector<std::string> extra = {}) {
    std::vector<std::string> a{"train", "--out", out.string()};
    for (auto& s : tiny(std::move(extra))) a.push_back(s);
    return run(a);
  }

  fs::path dir_;
};

}  // namespace

TEST(Config, RoundTripsEveryRow) {
  for (int row = 1; row <= 9; ++row) {
    RunConfig cfg = ablation_run(row);
    cfg.data_dir = "some/dir";
    cfg.seed = 77;
    std::istringstream in(serialize_config(cfg));
    const RunConfig back = parse_config(in);
    EXPECT_TRUE(back == cfg) << "row " << row;
    EXPECT_EQ(serialize_config(back), serialize_config(cfg));
  }
}

TEST(Config, CheckedInRowFilesMatchPresets) {
  for (int row = 1; row <= 9; ++row) {
    const fs::path p = fs::path(CHAINCNN_SOURCE_DIR) / "configs" / ("ablation_row" + std::to_string(row) + ".cfg");
    ASSERT_TRUE(fs::exists(p)) << p;
    EXPECT_TRUE(load_config(p) == ablation_run(row)) << p;
  }
}

TEST(Config, RowPresets) {
  const RunConfig r1 = ablation_run(1);
  EXPECT_EQ(r1.model.kind, ModelKind::fully_connected);
  EXPECT_EQ(r1.model.fc_window, 17u);
  EXPECT_EQ(r1.model.fc_layers, 5u);
  const RunConfig r9 = ablation_run(9);
  EXPECT_TRUE(r9.model.skip_connections);
  Rng rng(0);
  EXPECT_EQ(Model(r9.model, rng).receptive_field().width, 43u);
  EXPECT_THROW(ablation_run(0), ConfigError);
  EXPECT_THROW(ablation_run(10), ConfigError);
}

TEST(Config, CommentsBlankLinesAndErrors) {
  std::istringstream ok("# header\n\nseed = 5   # trailing\n  batch_size=7\n");
  const RunConfig c = parse_config(ok);
  EXPECT_EQ(c.seed, 5u);
  EXPECT_EQ(c.train.batch_size, 7u);

  std::istringstream unknown("seed = 1\nbogus_key = 3\n");
  try {
    parse_config(unknown, "my.cfg");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("my.cfg:2"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("bogus_key"), std::string::npos) << e.what();
  }
  std::istringstream nokv("seed\n");
  EXPECT_THROW(parse_config(nokv), ConfigError);
  std::istringstream badnum("lr_init = fast\n");
  EXPECT_THROW(parse_config(badnum), ConfigError);
}

TEST_F(Cli, HelpListsEveryFlag) {
  const auto top = run({"--help"});
  EXPECT_EQ(top.code, 0);
  for (const char* s : {"train", "eval", "predict", "ablate", "synth", "batch_size", "Exit codes"})
    EXPECT_NE(top.out.find(s), std::string::npos) << s;
  const std::map<std::string, std::vector<std::string>> flags{
      {"train", {"--config", "--set", "--data", "--seed", "--row", "--out", "--log"}},
      {"eval", {"--ckpt", "--data", "--split", "--beam-width", "--threads", "--report", "--bootstrap-subset",
                "--bootstrap-draws", "--bootstrap-seed"}},
      {"predict", {"--ckpt", "--input", "--output", "--beam-width", "--threads"}},
      {"ablate", {"--row", "--config", "--set", "--data", "--seed", "--out"}},
      {"synth", {"--out", "--count", "--min-length", "--max-length", "--rule", "--seed"}}};
  for (const auto& [cmd, fs_] : flags) {
    const auto r = run({cmd, "--help"});
    EXPECT_EQ(r.code, 0) << cmd;
    for (const auto& f : fs_) EXPECT_NE(r.out.find(f), std::string::npos) << cmd << " " << f;
  }
}

TEST_F(Cli, UnknownFlagsAndKeysAreRejected) {
  EXPECT_EQ(run({"synth", "--out", (dir_ / "x").string(), "--colour", "red"}).code, 1);
  EXPECT_EQ(run({}).code, 1);
  EXPECT_EQ(run({"frobnicate"}).code, 1);
  make_data();
  const auto r = train(dir_ / "m.ckpt", {"--set", "nonsense=1"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("nonsense"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir_ / "m.ckpt"));
}

TEST_F(Cli, MissingDataDirectoryNamesThePath) {
  const std::string missing = (dir_ / "nowhere").string();
  const auto r = run({"train", "--out", (dir_ / "m.ckpt").string(), "--data", missing});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find(missing), std::string::npos) << r.err;
}

TEST_F(Cli, AblateRejectsRowZero) {
  const auto r = run({"ablate", "--row", "0", "--data", (dir_ / "data").string(), "--out", (dir_ / "abl").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("1-9"), std::string::npos) << r.err;
}

TEST_F(Cli, TrainEvalPredictSmoke) {
  make_data();
  const fs::path ckpt = dir_ / "out" / "m.ckpt";
  const auto t = train(ckpt, {"--seed", "3", "--log", (dir_ / "train.log").string()});
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_TRUE(fs::exists(ckpt));
  EXPECT_TRUE(fs::exists(config_sidecar(ckpt)));
  const std::string log = slurp(dir_ / "train.log");
  EXPECT_NE(log.find("validation_q8"), std::string::npos) << log;
  EXPECT_NE(log.find("best validation Q8"), std::string::npos) << log;

  const auto e = run({"eval", "--ckpt", ckpt.string(), "--report", (dir_ / "r.json").string()});
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_NE(e.out.find("Q8 "), std::string::npos);
  const auto report = nlohmann::json::parse(slurp(dir_ / "r.json"));
  EXPECT_TRUE(report.contains("q8"));
  EXPECT_EQ(report.at("per_class").size(), 8u);

  const auto v = run({"eval", "--ckpt", ckpt.string(), "--split", "validation"});
  EXPECT_EQ(v.code, 0) << v.err;

  const auto p = run({"predict", "--ckpt", ckpt.string(), "--input", (dir_ / "data" / "test.txt").string(),
                      "--output", (dir_ / "pred.tsv").string()});
  ASSERT_EQ(p.code, 0) << p.err;
  EXPECT_NE(p.err.find("Q8 on labelled input"), std::string::npos) << p.err;
  std::ifstream test_in(dir_ / "data" / "test.txt");
  const auto records = read_native(test_in, "test.txt");
  std::istringstream pred(slurp(dir_ / "pred.tsv"));
  std::string line;
  std::vector<std::vector<int>> preds;
  for (std::size_t i = 0; std::getline(pred, line); ++i) {
    const auto tab = line.find('\t');
    ASSERT_NE(tab, std::string::npos);
    EXPECT_EQ(line.substr(0, tab), records[i].id);
    std::vector<int> labels;
    for (char c : line.substr(tab + 1)) labels.push_back(class_index(c));
    preds.push_back(labels);
  }
  ASSERT_EQ(preds.size(), records.size());
  const double acc = q8(preds, records);
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 1.0);
}

TEST_F(Cli, ConditionedEvalAcrossBeamWidths) {
  make_data();
  const fs::path ckpt = dir_ / "c.ckpt";
  ASSERT_EQ(train(ckpt, {"--set", "conditioned=true", "--set", "top_snapshots=1"}).code, 0);
  for (const char* w : {"1", "8"}) {
    const auto r = run({"eval", "--ckpt", ckpt.string(), "--beam-width", w, "--threads", "2"});
    EXPECT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find(std::string("beam width ") + w), std::string::npos) << r.out;
  }
}

TEST_F(Cli, EnsembleEvalAndMixedModesRefused) {
  make_data();
  ASSERT_EQ(train(dir_ / "a.ckpt", {"--seed", "1"}).code, 0);
  ASSERT_EQ(train(dir_ / "b.ckpt", {"--seed", "2"}).code, 0);
  ASSERT_EQ(train(dir_ / "c.ckpt", {"--seed", "3"}).code, 0);
  const auto e = run({"eval", "--ckpt", (dir_ / "a.ckpt").string(), (dir_ / "b.ckpt").string(),
                      (dir_ / "c.ckpt").string(), "--bootstrap-subset", "2", "--bootstrap-draws", "3",
                      "--report", (dir_ / "e.json").string()});
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_NE(e.out.find("ensemble of 3"), std::string::npos);
  EXPECT_EQ(nlohmann::json::parse(slurp(dir_ / "e.json")).at("bootstrap").at("n_draws"), 3);

  ASSERT_EQ(train(dir_ / "k.ckpt", {"--set", "conditioned=true", "--set", "top_snapshots=1"}).code, 0);
  const auto mixed = run({"eval", "--ckpt", (dir_ / "a.ckpt").string(), (dir_ / "k.ckpt").string()});
  EXPECT_NE(mixed.code, 0);
  EXPECT_NE(mixed.err.find("conditioned"), std::string::npos) << mixed.err;
}

TEST_F(Cli, PredictEdgeCases) {
  make_data();
  const fs::path ckpt = dir_ / "m.ckpt";
  ASSERT_EQ(train(ckpt).code, 0);

  std::ofstream(dir_ / "empty.txt").close();
  const auto e = run({"predict", "--ckpt", ckpt.string(), "--input", (dir_ / "empty.txt").string(), "--output",
                      (dir_ / "empty.out").string()});
  EXPECT_EQ(e.code, 0) << e.err;
  EXPECT_TRUE(fs::exists(dir_ / "empty.out"));
  EXPECT_EQ(slurp(dir_ / "empty.out"), "");

  auto full = synthetic_corpus({.count = 1, .min_length = kMaxLength, .max_length = kMaxLength, .seed = 9});
  {
    std::ofstream f(dir_ / "full.txt");
    write_native(f, full);
  }
  const auto p = run({"predict", "--ckpt", ckpt.string(), "--input", (dir_ / "full.txt").string(), "--output",
                      (dir_ / "full.out").string()});
  ASSERT_EQ(p.code, 0) << p.err;
  const std::string text = slurp(dir_ / "full.out");
  EXPECT_EQ(text.size(), full[0].id.size() + 1 + kMaxLength + 1);

  {
    std::ofstream f(dir_ / "bad.txt");
    std::ifstream good(dir_ / "data" / "test.txt");
    std::string line;
    std::getline(good, line);
    f << line << "\nthis line is not a record\n";
  }
  const auto bad = run({"predict", "--ckpt", ckpt.string(), "--input", (dir_ / "bad.txt").string(), "--output",
                        (dir_ / "bad.out").string()});
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.err.find(":2"), std::string::npos) << bad.err;
}

TEST_F(Cli, SeededTrainingIsByteIdentical) {
  make_data();
  ASSERT_EQ(train(dir_ / "a.ckpt", {"--seed", "11"}).code, 0);
  ASSERT_EQ(train(dir_ / "b.ckpt", {"--seed", "11"}).code, 0);
  ASSERT_EQ(train(dir_ / "c.ckpt", {"--seed", "12"}).code, 0);
  EXPECT_EQ(slurp(dir_ / "a.ckpt"), slurp(dir_ / "b.ckpt"));
  EXPECT_NE(slurp(dir_ / "a.ckpt"), slurp(dir_ / "c.ckpt"));
}

TEST_F(Cli, EnvironmentSeedIsAFallback) {
  make_data();
  ASSERT_EQ(train(dir_ / "flag.ckpt", {"--seed", "21"}).code, 0);
  ::setenv("CHAINCNN_SEED", "21", 1);
  ASSERT_EQ(train(dir_ / "env.ckpt").code, 0);
  EXPECT_EQ(slurp(dir_ / "flag.ckpt"), slurp(dir_ / "env.ckpt"));
  ASSERT_EQ(train(dir_ / "override.ckpt", {"--seed", "5"}).code, 0);
  EXPECT_NE(slurp(dir_ / "override.ckpt"), slurp(dir_ / "env.ckpt"));
  ::setenv("CHAINCNN_SEED", "not-a-number", 1);
  EXPECT_EQ(train(dir_ / "bad.ckpt").code, 1);
}

TEST_F(Cli, ConfigFilePrecedence) {
  make_data();
  {
    std::ofstream f(dir_ / "run.cfg");
    f << "# tiny\nseed = 4\nmax_iterations = 7\n";
  }
  ASSERT_EQ(train(dir_ / "a.ckpt", {"--config", (dir_ / "run.cfg").string()}).code, 0);
  RunConfig a = load_config(config_sidecar(dir_ / "a.ckpt"));
  EXPECT_EQ(a.seed, 4u);
  // --set values come before --config in tiny(), yet --set still wins.
  EXPECT_EQ(a.train.max_iterations, 30u);
  ASSERT_EQ(train(dir_ / "b.ckpt", {"--config", (dir_ / "run.cfg").string(), "--seed", "8"}).code, 0);
  EXPECT_EQ(load_config(config_sidecar(dir_ / "b.ckpt")).seed, 8u);
}

TEST_F(Cli, NumericalFailureExitsWithThree) {
  make_data();
  const auto r = train(dir_ / "nan.ckpt", {"--set", "lr_init=1e30", "--set", "fc_max_norm=1e30"});
  EXPECT_EQ(r.code, 3) << r.err;
  EXPECT_NE(r.err.find("step"), std::string::npos) << r.err;
}

TEST_F(Cli, SynthIsSeeded) {
  for (const fs::path p : {dir_ / "a", dir_ / "nested" / "b"})
    ASSERT_EQ(run({"synth", "--out", p.string(), "--count", "3", "--rule", "markov", "--seed", "4"}).code, 0);
  EXPECT_EQ(slurp(dir_ / "a"), slurp(dir_ / "nested" / "b"));
  EXPECT_EQ(run({"synth", "--out", (dir_ / "c").string(), "--rule", "chaos"}).code, 1);
}
