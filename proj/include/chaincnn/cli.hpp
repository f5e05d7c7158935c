#pragma once

// Command-line front end: train, eval, predict, ablate and synth.
//
// Configuration precedence, lowest first: built-in defaults (or the --row
// preset), --config file, --set KEY=VALUE overrides in order, dedicated
// flags (--data, --seed). Without any seed source CHAINCNN_SEED is used.

#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "chaincnn/checkpoint.hpp"
#include "chaincnn/config.hpp"
#include "chaincnn/data.hpp"
#include "chaincnn/error.hpp"
#include "chaincnn/inference.hpp"
#include "chaincnn/metrics.hpp"
#include "chaincnn/model.hpp"
#include "chaincnn/synth.hpp"
#include "chaincnn/training.hpp"

namespace chaincnn {

inline constexpr const char* kPssmMeanName = "data.pssm_mean";
inline constexpr const char* kPssmStdName = "data.pssm_std";

/// Sidecar holding the run configuration next to a checkpoint.
inline std::filesystem::path config_sidecar(const std::filesystem::path& ckpt) {
  return ckpt.string() + ".cfg";
}

inline std::vector<std::pair<std::string, Tensor>> pssm_tensors(const PssmStats& s) {
  return {{kPssmMeanName, Tensor({kPssmChannels}, std::vector<float>(s.mean.begin(), s.mean.end()))},
          {kPssmStdName, Tensor({kPssmChannels}, std::vector<float>(s.stddev.begin(), s.stddev.end()))}};
}

inline PssmStats pssm_from_checkpoint(const Checkpoint& ckpt, const std::string& source) {
  const Tensor* mean = ckpt.find(kPssmMeanName);
  const Tensor* sd = ckpt.find(kPssmStdName);
  if (!mean || !sd || mean->size() != kPssmChannels || sd->size() != kPssmChannels)
    throw DataError(source + ": checkpoint lacks input normalisation statistics");
  PssmStats s;
  std::copy_n(mean->raw(), kPssmChannels, s.mean.begin());
  std::copy_n(sd->raw(), kPssmChannels, s.stddev.begin());
  return s;
}

/// Resolves `name` inside the data directory, or the first existing
/// `<stem>.npy|.txt|.tsv` when `name` is empty.
inline std::optional<std::filesystem::path> find_corpus(const std::filesystem::path& dir,
                                                        const std::string& name,
                                                        const std::string& stem) {
  if (!name.empty()) {
    const auto p = dir / name;
    if (!std::filesystem::exists(p)) throw DataError("data file not found: " + p.string());
    return p;
  }
  for (const char* ext : {".npy", ".txt", ".tsv"}) {
    const auto p = dir / (stem + ext);
    if (std::filesystem::exists(p)) return p;
  }
  return std::nullopt;
}

inline void require_data_dir(const std::filesystem::path& dir) {
  if (dir.empty()) throw ConfigError("no data directory given (use --data or data_dir)");
  if (!std::filesystem::is_directory(dir)) throw DataError("data directory not found: " + dir.string());
}

/// Raw (unnormalised) train/validation split of the training corpus.
inline DatasetSplit load_split(const RunConfig& cfg) {
  require_data_dir(cfg.data_dir);
  const auto train_path = find_corpus(cfg.data_dir, cfg.train_file, "train");
  if (!train_path)
    throw DataError("no training corpus (train.npy, train.txt or train.tsv) in " + cfg.data_dir.string());
  auto records = load_corpus(*train_path, cfg.columns);
  for (const auto& r : records)
    if (!r.labeled) throw DataError(train_path->string() + ": record '" + r.id + "' has no labels");
  return split(std::move(records), cfg.val_size, cfg.split_seed);
}

inline std::vector<ProteinRecord> load_test(const RunConfig& cfg) {
  require_data_dir(cfg.data_dir);
  const auto path = find_corpus(cfg.data_dir, cfg.test_file, "test");
  if (!path) throw DataError("no test corpus (test.npy, test.txt or test.tsv) in " + cfg.data_dir.string());
  return load_corpus(*path, cfg.columns);
}

/// Model plus the configuration and input statistics it was trained with.
struct LoadedModel {
  RunConfig config;
  std::unique_ptr<Model> model;
  PssmStats pssm;
};

inline LoadedModel load_model(const std::filesystem::path& ckpt_path) {
  const auto cfg_path = config_sidecar(ckpt_path);
  if (!std::filesystem::exists(cfg_path))
    throw DataError("missing model config " + cfg_path.string() + " for checkpoint " + ckpt_path.string());
  LoadedModel out;
  out.config = load_config(cfg_path);
  out.config.validate();
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  Rng rng(out.config.seed);
  out.model = std::make_unique<Model>(out.config.model, rng);
  restore_checkpoint(ckpt, *out.model);
  out.pssm = pssm_from_checkpoint(ckpt, ckpt_path.string());
  return out;
}

inline std::vector<LoadedModel> load_models(const std::vector<std::string>& paths) {
  std::vector<LoadedModel> out;
  for (const auto& p : paths) out.push_back(load_model(p));
  for (const auto& m : out) {
    if (m.model->conditioned() != out.front().model->conditioned())
      throw ModeError("checkpoints mix conditioned and unconditioned models");
    if (m.pssm.mean != out.front().pssm.mean || m.pssm.stddev != out.front().pssm.stddev)
      throw ConfigError("ensemble members were trained with different input normalisation");
  }
  return out;
}

inline Ensemble make_ensemble(const std::vector<LoadedModel>& models) {
  std::vector<const Model*> ptrs;
  for (const auto& m : models) ptrs.push_back(m.model.get());
  return Ensemble(std::move(ptrs));
}

struct TrainedRun {
  std::unique_ptr<Model> model;
  TrainResult result;
};

/// Loads data, normalises profiles, builds and trains the model, and writes
/// the checkpoint and its config sidecar.
inline TrainedRun train_run(const RunConfig& cfg, const std::filesystem::path& out, std::ostream& log) {
  cfg.validate();
  DatasetSplit data = load_split(cfg);
  const PssmStats stats = normalize_pssm(data);
  log << "train " << data.train.size() << " proteins, validation " << data.validation.size()
      << " proteins\n";
  TrainedRun run;
  Rng init(cfg.seed);
  run.model = std::make_unique<Model>(cfg.model, init);
  log << "model parameters " << run.model->parameter_count() << ", receptive field "
      << run.model->receptive_field().width << "\n";
  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed ^ 0x9e3779b97f4a7c15ull;
  run.result = train(*run.model, data, tc, &log, pssm_tensors(stats));
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  save_checkpoint(run.result.checkpoint, out);
  save_config(cfg, config_sidecar(out));
  log << "wrote " << out.string() << "\n";
  return run;
}

namespace cli_detail {

struct ConfigFlags {
  std::string config;
  std::vector<std::string> sets;
  std::string data;
  std::optional<std::uint64_t> seed;
};

inline void add_config_flags(CLI::App* cmd, ConfigFlags& f) {
  cmd->add_option("--config", f.config, "key=value run configuration file");
  cmd->add_option("--set", f.sets, "override one config key (KEY=VALUE); repeatable")->take_all();
  cmd->add_option("--data", f.data, "directory with train.{npy,txt,tsv} and test.{npy,txt,tsv}");
  cmd->add_option("--seed", f.seed, "random seed (falls back to CHAINCNN_SEED)");
}

inline RunConfig resolve_config(const ConfigFlags& f, RunConfig base) {
  RunConfig cfg = std::move(base);
  if (!f.config.empty()) cfg = load_config(f.config, std::move(cfg));
  for (const auto& kv : f.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects KEY=VALUE, got '" + kv + "'");
    set_config_value(cfg, config_detail::trim(kv.substr(0, eq)), config_detail::trim(kv.substr(eq + 1)));
  }
  if (!f.data.empty()) cfg.data_dir = f.data;
  if (f.seed) {
    cfg.seed = *f.seed;
    cfg.seed_set = true;
  } else if (!cfg.seed_set) {
    if (const char* env = std::getenv("CHAINCNN_SEED")) {
      set_config_value(cfg, "seed", env);
    }
  }
  cfg.validate();
  return cfg;
}

inline void ensure_parent(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
}

inline void write_text(const std::string& path, const std::string& text) {
  ensure_parent(path);
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << text;
  if (!out) throw DataError("write failed for " + path);
}

}  // namespace cli_detail

/// Runs the tool; returns the process exit code (0 ok, 1 usage/config,
/// 2 data, 3 numerical).
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  using namespace cli_detail;
  CLI::App app{"Next-step-conditioned multi-scale CNN for 8-class protein secondary structure"};
  app.require_subcommand(1);
  app.footer("Config keys (for --config files and --set):\n" + config_keys_help() +
             "\nPrecedence: defaults or --row preset < --config < --set < --data/--seed.\n"
             "Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.");

  // train
  ConfigFlags train_flags;
  std::string train_out, train_log;
  std::optional<int> train_row;
  auto* train_cmd = app.add_subcommand("train", "train one model and write a checkpoint");
  add_config_flags(train_cmd, train_flags);
  train_cmd->add_option("--row", train_row, "start from ablation-ladder row 1-9 instead of the defaults");
  train_cmd->add_option("--out", train_out, "checkpoint path (config written to PATH.cfg)")->required();
  train_cmd->add_option("--log", train_log, "also write the training log to this file");

  // eval
  std::vector<std::string> eval_ckpts;
  std::string eval_data, eval_split = "test", eval_report;
  std::size_t eval_beam = 8, eval_threads = 1, eval_subset = 0, eval_draws = 10;
  std::uint64_t eval_seed = 0;
  auto* eval_cmd = app.add_subcommand("eval", "score one checkpoint or an ensemble on a split");
  eval_cmd->add_option("--ckpt", eval_ckpts, "checkpoint(s); several form an ensemble")->required()->expected(1, -1);
  eval_cmd->add_option("--data", eval_data, "data directory (default: the first checkpoint's data_dir)");
  eval_cmd->add_option("--split", eval_split, "test or validation")->check(CLI::IsMember({"test", "validation"}));
  eval_cmd->add_option("--beam-width", eval_beam, "beam width for conditioned models")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--threads", eval_threads, "decoding threads")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--report", eval_report, "write the JSON report here");
  eval_cmd->add_option("--bootstrap-subset", eval_subset, "ensemble size N for bootstrap standard errors");
  eval_cmd->add_option("--bootstrap-draws", eval_draws, "number of bootstrap subsets")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--bootstrap-seed", eval_seed, "seed for bootstrap subset draws");

  // predict
  std::vector<std::string> pred_ckpts;
  std::string pred_input, pred_output;
  std::size_t pred_beam = 8, pred_threads = 1;
  auto* pred_cmd = app.add_subcommand("predict", "write DSSP label strings for a native-format file");
  pred_cmd->add_option("--ckpt", pred_ckpts, "checkpoint(s); several form an ensemble")->required()->expected(1, -1);
  pred_cmd->add_option("--input", pred_input, "native-format input (labels optional)")->required();
  pred_cmd->add_option("--output", pred_output, "output file: id<TAB>labels per protein")->required();
  pred_cmd->add_option("--beam-width", pred_beam, "beam width for conditioned models")->check(CLI::PositiveNumber);
  pred_cmd->add_option("--threads", pred_threads, "decoding threads")->check(CLI::PositiveNumber);

  // ablate
  ConfigFlags ablate_flags;
  int ablate_row = 0;
  std::string ablate_out;
  auto* ablate_cmd = app.add_subcommand("ablate", "train one row (1-9) of the architecture ablation ladder");
  ablate_cmd->add_option("--row", ablate_row, "ladder row 1-9")->required();
  add_config_flags(ablate_cmd, ablate_flags);
  ablate_cmd->add_option("--out", ablate_out, "output directory (writes rowN.ckpt)")->required();

  // synth
  std::string synth_out, synth_rule = "window";
  SynthOptions synth;
  auto* synth_cmd = app.add_subcommand("synth", "write a seeded synthetic corpus in native format");
  synth_cmd->add_option("--out", synth_out, "output file")->required();
  synth_cmd->add_option("--count", synth.count, "number of proteins");
  synth_cmd->add_option("--min-length", synth.min_length, "shortest protein");
  synth_cmd->add_option("--max-length", synth.max_length, "longest protein");
  synth_cmd->add_option("--rule", synth_rule, "window or markov")->check(CLI::IsMember({"window", "markov"}));
  synth_cmd->add_option("--seed", synth.seed, "random seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << "run with --help for usage\n";
    return 1;
  }

  try {
    if (train_cmd->parsed()) {
      const RunConfig base = train_row ? ablation_run(*train_row) : RunConfig{};
      const RunConfig cfg = resolve_config(train_flags, base);
      std::ofstream log_file;
      if (!train_log.empty()) {
        log_file.open(train_log);
        if (!log_file) throw DataError("cannot write log " + train_log);
      }
      struct Tee : std::streambuf {
        std::ostream* a;
        std::ostream* b;
        int overflow(int c) override {
          if (c == EOF) return 0;
          a->put(static_cast<char>(c));
          if (b) b->put(static_cast<char>(c));
          return c;
        }
      } tee;
      tee.a = &err;
      tee.b = log_file.is_open() ? &log_file : nullptr;
      std::ostream tee_stream(&tee);
      train_run(cfg, train_out, tee_stream);
      tee_stream.flush();
      return 0;
    }

    if (ablate_cmd->parsed()) {
      const RunConfig cfg = resolve_config(ablate_flags, ablation_run(ablate_row));
      std::filesystem::create_directories(ablate_out);
      const auto path = std::filesystem::path(ablate_out) / ("row" + std::to_string(ablate_row) + ".ckpt");
      err << "ablation row " << ablate_row << "\n";
      train_run(cfg, path, err);
      return 0;
    }

    if (eval_cmd->parsed()) {
      auto models = load_models(eval_ckpts);
      RunConfig data_cfg = models.front().config;
      if (!eval_data.empty()) data_cfg.data_dir = eval_data;
      std::vector<ProteinRecord> records;
      if (eval_split == "test") {
        records = load_test(data_cfg);
      } else {
        records = load_split(data_cfg).validation;
      }
      apply_pssm_stats(records, models.front().pssm);
      const Ensemble ensemble = make_ensemble(models);
      const auto preds = decode_all(ensemble, records, eval_beam, eval_threads);
      const ConfusionMatrix cm = confusion(preds, records);
      std::optional<BootstrapResult> boot;
      if (eval_subset > 0) {
        Rng rng(eval_seed);
        boot = bootstrap_stderr(
            models.size(), eval_subset, eval_draws,
            [&](std::span<const std::size_t> ids) {
              std::vector<const Model*> members;
              for (auto i : ids) members.push_back(models[i].model.get());
              const auto p = decode_all(Ensemble(members), records, eval_beam, eval_threads);
              return q8(p, records);
            },
            rng);
      }
      out << (models.size() == 1 ? "single model" : "ensemble of " + std::to_string(models.size()))
          << ", " << (ensemble.conditioned() ? "beam width " + std::to_string(eval_beam) : std::string("independent decoding"))
          << ", split " << eval_split << " (" << records.size() << " proteins)\n";
      out << report_table(cm, boot);
      if (!eval_report.empty()) write_text(eval_report, report_json(cm, boot).dump(2) + "\n");
      return 0;
    }

    if (pred_cmd->parsed()) {
      auto models = load_models(pred_ckpts);
      std::ifstream in(pred_input);
      if (!in) throw DataError("cannot open input " + pred_input);
      auto records = read_native(in, pred_input);
      apply_pssm_stats(records, models.front().pssm);
      const Ensemble ensemble = make_ensemble(models);
      const auto preds = decode_all(ensemble, records, pred_beam, pred_threads);
      std::string text;
      for (std::size_t i = 0; i < records.size(); ++i) {
        text += records[i].id + "\t";
        for (int c : preds[i]) text += class_letter(c);
        text += "\n";
      }
      write_text(pred_output, text);
      std::vector<ProteinRecord> labeled;
      std::vector<std::vector<int>> labeled_preds;
      for (std::size_t i = 0; i < records.size(); ++i)
        if (records[i].labeled && records[i].length > 0) {
          labeled.push_back(records[i]);
          labeled_preds.push_back(preds[i]);
        }
      err << "wrote " << records.size() << " predictions to " << pred_output << "\n";
      if (!labeled.empty())
        err << "Q8 on labelled input " << train_detail::fmt("%.3f", q8(labeled_preds, labeled)) << "\n";
      return 0;
    }

    if (synth_cmd->parsed()) {
      synth.rule = synth_rule == "markov" ? SynthRule::markov : SynthRule::window;
      const auto records = synthetic_corpus(synth);
      ensure_parent(synth_out);
      std::ofstream file(synth_out);
      if (!file) throw DataError("cannot write " + synth_out);
      write_native(file, records);
      if (!file) throw DataError("write failed for " + synth_out);
      return 0;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace chaincnn
