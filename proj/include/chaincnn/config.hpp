#pragma once

// Flat key=value run configuration: model, training, data and seed keys in
// one UTF-8 file, one key per line, '#' starting a comment.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "chaincnn/data.hpp"
#include "chaincnn/error.hpp"
#include "chaincnn/model.hpp"
#include "chaincnn/training.hpp"

namespace chaincnn {

struct RunConfig {
  ModelConfig model = ablation_model(9);
  TrainConfig train = conv_schedule();
  std::filesystem::path data_dir;
  /// File names inside data_dir; empty means train.{npy,txt} / test.{npy,txt}.
  std::string train_file;
  std::string test_file;
  std::size_t val_size = 256;
  /// Seed of the train/validation shuffle, separate from `seed` so models
  /// trained under different seeds share one split.
  std::uint64_t split_seed = 0;
  ColumnMap columns;
  std::uint64_t seed = 0;
  bool seed_set = false;
  /// Block filters kept while num_blocks is 0 so key order does not matter.
  BlockSpec block_template;

  bool operator==(const RunConfig& o) const {
    return model == o.model && train == o.train && data_dir == o.data_dir &&
           train_file == o.train_file && test_file == o.test_file && val_size == o.val_size &&
           split_seed == o.split_seed &&
           columns == o.columns && seed == o.seed;
  }

  void validate() const {
    model.validate();
    train.validate();
    columns.validate();
  }
};

/// Row preset: architecture plus the schedule of its model family.
inline RunConfig ablation_run(int row) {
  RunConfig cfg;
  cfg.model = ablation_model(row);
  cfg.train = cfg.model.kind == ModelKind::fully_connected ? fc_schedule() : conv_schedule();
  return cfg;
}

namespace config_detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_uint(const std::string& key, const std::string& v) {
  T out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
  return out;
}

template <class T>
T parse_real(const std::string& key, const std::string& v) {
  T out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out))
    throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) { return parse_real<double>(key, v); }

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("key '" + key + "': expected true/false, got '" + v + "'");
}

// Shortest text that parses back to the same value.
template <class T>
std::string num(T v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string boolean(bool b) { return b ? "true" : "false"; }

/// "3x64,7x64" -> filters; "none" -> empty.
inline std::vector<FilterSpec> parse_filters(const std::string& key, const std::string& v) {
  std::vector<FilterSpec> out;
  if (v == "none" || v.empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    const auto x = item.find('x');
    if (x == std::string::npos)
      throw ConfigError("key '" + key + "': filter '" + item + "' is not WIDTHxDEPTH");
    out.push_back({parse_uint<std::size_t>(key, item.substr(0, x)),
                   parse_uint<std::size_t>(key, item.substr(x + 1))});
  }
  return out;
}

inline std::string format_filters(const std::vector<FilterSpec>& fs) {
  if (fs.empty()) return "none";
  std::string out;
  for (const auto& f : fs)
    out += (out.empty() ? "" : ",") + std::to_string(f.width) + "x" + std::to_string(f.depth);
  return out;
}

inline ColumnRange parse_range(const std::string& key, const std::string& v) {
  const auto c = v.find(':');
  if (c == std::string::npos) throw ConfigError("key '" + key + "': expected BEGIN:END, got '" + v + "'");
  return {parse_uint<std::size_t>(key, trim(v.substr(0, c))),
          parse_uint<std::size_t>(key, trim(v.substr(c + 1)))};
}

inline std::string format_range(const ColumnRange& r) {
  return std::to_string(r.begin) + ":" + std::to_string(r.end);
}

/// Blocks are described by one shared spec replicated num_blocks times.
struct BlockKeys {
  std::size_t count = 0;
  BlockSpec spec;
};

inline BlockKeys block_keys(const RunConfig& c) {
  const ModelConfig& m = c.model;
  BlockKeys k;
  k.count = m.blocks.size();
  k.spec = c.block_template;
  if (!m.blocks.empty()) {
    k.spec = m.blocks.front();
    for (const auto& b : m.blocks)
      if (!(b == k.spec))
        throw ConfigError("blocks with differing filter specs cannot be written as flat keys");
  }
  return k;
}

inline void set_blocks(RunConfig& c, const BlockKeys& k) {
  c.block_template = k.spec;
  c.model.blocks.assign(k.count, k.spec);
}

struct Field {
  const char* key;
  const char* help;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline const std::vector<Field>& schema() {
  static const std::vector<Field> fields = [] {
    std::vector<Field> f;
    auto add = [&](const char* k, const char* h, auto get, auto set) { f.push_back({k, h, get, set}); };
    // Model.
    add("kind", "fully_connected (fc) or convolutional (conv)",
        [](const RunConfig& c) { return std::string(c.model.kind == ModelKind::fully_connected ? "fc" : "conv"); },
        [](RunConfig& c, const std::string& v) {
          if (v == "fc" || v == "fully_connected") c.model.kind = ModelKind::fully_connected;
          else if (v == "conv" || v == "convolutional") c.model.kind = ModelKind::convolutional;
          else throw ConfigError("key 'kind': expected fc or conv, got '" + v + "'");
        });
    add("fc_window", "odd window of trunk features feeding the first FC layer",
        [](const RunConfig& c) { return std::to_string(c.model.fc_window); },
        [](RunConfig& c, const std::string& v) { c.model.fc_window = parse_uint<std::size_t>("fc_window", v); });
    add("fc_layers", "number of hidden FC layers",
        [](const RunConfig& c) { return std::to_string(c.model.fc_layers); },
        [](RunConfig& c, const std::string& v) { c.model.fc_layers = parse_uint<std::size_t>("fc_layers", v); });
    add("fc_width", "units per hidden FC layer",
        [](const RunConfig& c) { return std::to_string(c.model.fc_width); },
        [](RunConfig& c, const std::string& v) { c.model.fc_width = parse_uint<std::size_t>("fc_width", v); });
    add("num_blocks", "convolutional blocks (0 for the FC baseline)",
        [](const RunConfig& c) { return std::to_string(block_keys(c).count); },
        [](RunConfig& c, const std::string& v) {
          auto k = block_keys(c);
          k.count = parse_uint<std::size_t>("num_blocks", v);
          set_blocks(c, k);
        });
    add("multi_scale", "parallel filters per block, e.g. 3x64,7x64,9x64, or none",
        [](const RunConfig& c) { return format_filters(block_keys(c).spec.multi_scale); },
        [](RunConfig& c, const std::string& v) {
          auto k = block_keys(c);
          k.spec.multi_scale = parse_filters("multi_scale", v);
          set_blocks(c, k);
        });
    add("single_scale", "single filter after the multi-scale layer, e.g. 9x24, or none",
        [](const RunConfig& c) {
          const auto& s = block_keys(c).spec.single_scale;
          return s ? format_filters({*s}) : std::string("none");
        },
        [](RunConfig& c, const std::string& v) {
          auto k = block_keys(c);
          const auto fs = parse_filters("single_scale", v);
          if (fs.size() > 1) throw ConfigError("key 'single_scale': at most one filter");
          k.spec.single_scale = fs.empty() ? std::nullopt : std::optional<FilterSpec>(fs.front());
          set_blocks(c, k);
        });
    add("skip_connections", "concatenate a width-1 projection of each block's input",
        [](const RunConfig& c) { return boolean(c.model.skip_connections); },
        [](RunConfig& c, const std::string& v) { c.model.skip_connections = parse_bool("skip_connections", v); });
    add("skip_depth", "depth of the skip projection",
        [](const RunConfig& c) { return std::to_string(block_keys(c).spec.skip_projection_depth); },
        [](RunConfig& c, const std::string& v) {
          auto k = block_keys(c);
          k.spec.skip_projection_depth = parse_uint<std::size_t>("skip_depth", v);
          set_blocks(c, k);
        });
    add("conditioned", "feed shifted previous labels as extra input channels",
        [](const RunConfig& c) { return boolean(c.model.conditioned); },
        [](RunConfig& c, const std::string& v) { c.model.conditioned = parse_bool("conditioned", v); });
    add("dropout_rate", "dropout after every hidden activation",
        [](const RunConfig& c) { return num(c.model.dropout_rate); },
        [](RunConfig& c, const std::string& v) { c.model.dropout_rate = parse_real<float>("dropout_rate", v); });
    add("fc_max_norm", "max-norm radius of hidden FC units",
        [](const RunConfig& c) { return num(c.model.fc_max_norm); },
        [](RunConfig& c, const std::string& v) { c.model.fc_max_norm = parse_real<float>("fc_max_norm", v); });
    // Training.
    add("batch_size", "proteins per mini-batch",
        [](const RunConfig& c) { return std::to_string(c.train.batch_size); },
        [](RunConfig& c, const std::string& v) { c.train.batch_size = parse_uint<std::size_t>("batch_size", v); });
    add("lr_init", "initial learning rate",
        [](const RunConfig& c) { return num(c.train.lr_init); },
        [](RunConfig& c, const std::string& v) { c.train.lr_init = parse_double("lr_init", v); });
    add("lr_decay_factor", "learning-rate multiplier per decay period, in (0,1)",
        [](const RunConfig& c) { return num(c.train.lr_decay_factor); },
        [](RunConfig& c, const std::string& v) { c.train.lr_decay_factor = parse_double("lr_decay_factor", v); });
    add("lr_decay_every", "iterations per decay period",
        [](const RunConfig& c) { return std::to_string(c.train.lr_decay_every); },
        [](RunConfig& c, const std::string& v) { c.train.lr_decay_every = parse_uint<std::uint64_t>("lr_decay_every", v); });
    add("scheduled_sampling", "mix model samples into the label context (conditioned models)",
        [](const RunConfig& c) { return boolean(c.train.scheduled_sampling); },
        [](RunConfig& c, const std::string& v) { c.train.scheduled_sampling = parse_bool("scheduled_sampling", v); });
    add("sampling_rate_init", "initial scheduled-sampling rate",
        [](const RunConfig& c) { return num(c.train.sampling_rate_init); },
        [](RunConfig& c, const std::string& v) { c.train.sampling_rate_init = parse_double("sampling_rate_init", v); });
    add("sampling_rate_increment", "rate increase per sampling period",
        [](const RunConfig& c) { return num(c.train.sampling_rate_increment); },
        [](RunConfig& c, const std::string& v) { c.train.sampling_rate_increment = parse_double("sampling_rate_increment", v); });
    add("sampling_rate_every", "iterations per sampling period",
        [](const RunConfig& c) { return std::to_string(c.train.sampling_rate_every); },
        [](RunConfig& c, const std::string& v) { c.train.sampling_rate_every = parse_uint<std::uint64_t>("sampling_rate_every", v); });
    add("max_iterations", "training iteration budget",
        [](const RunConfig& c) { return std::to_string(c.train.max_iterations); },
        [](RunConfig& c, const std::string& v) { c.train.max_iterations = parse_uint<std::uint64_t>("max_iterations", v); });
    add("eval_every", "iterations between validation evaluations",
        [](const RunConfig& c) { return std::to_string(c.train.eval_every); },
        [](RunConfig& c, const std::string& v) { c.train.eval_every = parse_uint<std::uint64_t>("eval_every", v); });
    add("patience", "non-improving evaluations tolerated before stopping",
        [](const RunConfig& c) { return std::to_string(c.train.patience); },
        [](RunConfig& c, const std::string& v) { c.train.patience = parse_uint<std::uint64_t>("patience", v); });
    add("log_every", "iterations between training log lines",
        [](const RunConfig& c) { return std::to_string(c.train.log_every); },
        [](RunConfig& c, const std::string& v) { c.train.log_every = parse_uint<std::uint64_t>("log_every", v); });
    add("beam_width", "beam width for conditioned snapshot re-ranking",
        [](const RunConfig& c) { return std::to_string(c.train.beam_width); },
        [](RunConfig& c, const std::string& v) { c.train.beam_width = parse_uint<std::size_t>("beam_width", v); });
    add("top_snapshots", "conditioned snapshots re-ranked by beam-search Q8",
        [](const RunConfig& c) { return std::to_string(c.train.top_snapshots); },
        [](RunConfig& c, const std::string& v) { c.train.top_snapshots = parse_uint<std::size_t>("top_snapshots", v); });
    // Data.
    add("data_dir", "directory holding the corpus files",
        [](const RunConfig& c) { return c.data_dir.string(); },
        [](RunConfig& c, const std::string& v) { c.data_dir = v; });
    add("train_file", "training corpus inside data_dir (default train.npy or train.txt)",
        [](const RunConfig& c) { return c.train_file; },
        [](RunConfig& c, const std::string& v) { c.train_file = v; });
    add("test_file", "test corpus inside data_dir (default test.npy or test.txt)",
        [](const RunConfig& c) { return c.test_file; },
        [](RunConfig& c, const std::string& v) { c.test_file = v; });
    add("val_size", "training records held out for validation",
        [](const RunConfig& c) { return std::to_string(c.val_size); },
        [](RunConfig& c, const std::string& v) { c.val_size = parse_uint<std::size_t>("val_size", v); });
    add("split_seed", "seed of the train/validation shuffle",
        [](const RunConfig& c) { return std::to_string(c.split_seed); },
        [](RunConfig& c, const std::string& v) { c.split_seed = parse_uint<std::uint64_t>("split_seed", v); });
    add("row_width", "columns per position in .npy corpora",
        [](const RunConfig& c) { return std::to_string(c.columns.row_width); },
        [](RunConfig& c, const std::string& v) { c.columns.row_width = parse_uint<std::size_t>("row_width", v); });
    add("residue_columns", "residue one-hot columns BEGIN:END",
        [](const RunConfig& c) { return format_range(c.columns.residue_onehot); },
        [](RunConfig& c, const std::string& v) { c.columns.residue_onehot = parse_range("residue_columns", v); });
    add("label_columns", "label block columns BEGIN:END",
        [](const RunConfig& c) { return format_range(c.columns.labels); },
        [](RunConfig& c, const std::string& v) { c.columns.labels = parse_range("label_columns", v); });
    add("pssm_columns", "profile columns BEGIN:END",
        [](const RunConfig& c) { return format_range(c.columns.pssm); },
        [](RunConfig& c, const std::string& v) { c.columns.pssm = parse_range("pssm_columns", v); });
    add("seed", "seed for initialisation, batch order, dropout and sampling",
        [](const RunConfig& c) { return std::to_string(c.seed); },
        [](RunConfig& c, const std::string& v) {
          c.seed = parse_uint<std::uint64_t>("seed", v);
          c.seed_set = true;
        });
    return f;
  }();
  return fields;
}

}  // namespace config_detail

/// Applies one key. Unknown keys are rejected.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : config_detail::schema())
    if (key == f.key) {
      f.set(cfg, value);
      return;
    }
  throw ConfigError("unknown config key '" + key + "'");
}

/// Applies "key=value" lines on top of `cfg`. Errors name source and line.
inline void apply_config(RunConfig& cfg, std::istream& in, const std::string& source = "config") {
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string t = config_detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(source + ":" + std::to_string(n) + ": expected key=value");
    try {
      set_config_value(cfg, config_detail::trim(t.substr(0, eq)), config_detail::trim(t.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

inline RunConfig parse_config(std::istream& in, const std::string& source = "config",
                              RunConfig base = {}) {
  apply_config(base, in, source);
  return base;
}

inline RunConfig load_config(const std::filesystem::path& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  return parse_config(in, path.string(), std::move(base));
}

/// Every schema key, one per line, in schema order.
inline std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : config_detail::schema()) out += std::string(f.key) + " = " + f.get(cfg) + "\n";
  return out;
}

inline void save_config(const RunConfig& cfg, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write config file " + path.string());
  out << serialize_config(cfg);
  if (!out) throw DataError("write failed for " + path.string());
}

/// "key: description" lines for help output.
inline std::string config_keys_help() {
  std::string out;
  for (const auto& f : config_detail::schema()) out += "  " + std::string(f.key) + ": " + f.help + "\n";
  return out;
}

}  // namespace chaincnn
