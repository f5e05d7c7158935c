#pragma once

// Binary checkpoint container: magic "CCNN", u32 version, u32 tensor count,
// then per tensor u16 name length, name, u8 dtype (0 = f32), u8 ndim,
// ndim x u64 dims and the raw payload; trailing u64 iteration and f64 best
// validation Q8. All integers little-endian.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "chaincnn/error.hpp"
#include "chaincnn/model.hpp"
#include "chaincnn/optim.hpp"
#include "chaincnn/tensor.hpp"

namespace chaincnn {

inline constexpr std::array<char, 4> kCheckpointMagic = {'C', 'C', 'N', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint32_t format_version = kCheckpointVersion;
  /// Tensors in file order; names are unique.
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::uint64_t iteration = 0;
  double best_validation_q8 = 0.0;

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
  void add(std::string name, Tensor t) {
    if (find(name)) throw ConfigError("duplicate checkpoint tensor '" + name + "'");
    tensors.emplace_back(std::move(name), std::move(t));
  }
};

namespace ckpt_detail {

template <typename T>
void put(std::ostream& out, T v) {
  static_assert(std::endian::native == std::endian::little);
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

class Reader {
 public:
  Reader(std::istream& in, std::string source) : in_(in), source_(std::move(source)) {}

  template <typename T>
  T get(const std::string& what) {
    T v{};
    bytes(reinterpret_cast<char*>(&v), sizeof(T), what);
    return v;
  }

  void bytes(char* dst, std::size_t n, const std::string& what) {
    in_.read(dst, static_cast<std::streamsize>(n));
    const auto got = static_cast<std::size_t>(in_.gcount());
    if (got != n)
      throw FormatError(source_ + " truncated at offset " + std::to_string(offset_ + got) +
                        " while reading " + what + " (" + std::to_string(n) + " bytes expected, " +
                        std::to_string(got) + " available)");
    offset_ += n;
  }

  std::size_t offset() const { return offset_; }

 private:
  std::istream& in_;
  std::string source_;
  std::size_t offset_ = 0;
};

}  // namespace ckpt_detail

inline void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  using ckpt_detail::put;
  out.write(kCheckpointMagic.data(), 4);
  put<std::uint32_t>(out, ckpt.format_version);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.size() > 0xffff) throw ConfigError("checkpoint tensor name too long: " + name);
    if (t.rank() > 0xff) throw ShapeError("checkpoint tensor rank too large: " + name);
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint8_t>(out, 0);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.raw()),
              static_cast<std::streamsize>(t.size() * sizeof(float)));
  }
  put<std::uint64_t>(out, ckpt.iteration);
  put<double>(out, ckpt.best_validation_q8);
}

/// Parses a whole checkpoint; nothing is returned unless every byte parses.
inline Checkpoint read_checkpoint(std::istream& in, const std::string& source = "checkpoint") {
  ckpt_detail::Reader r(in, source);
  std::array<char, 4> magic{};
  r.bytes(magic.data(), 4, "magic");
  if (magic != kCheckpointMagic) throw FormatError(source + ": bad magic at offset 0 (expected CCNN)");
  Checkpoint ckpt;
  ckpt.format_version = r.get<std::uint32_t>("version");
  if (ckpt.format_version != kCheckpointVersion)
    throw FormatError(source + ": unsupported format version " +
                      std::to_string(ckpt.format_version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint16_t>("name length");
    std::string name(len, '\0');
    r.bytes(name.data(), len, "tensor name");
    const auto dtype = r.get<std::uint8_t>("dtype of '" + name + "'");
    if (dtype != 0)
      throw FormatError(source + ": tensor '" + name + "' has unsupported dtype code " +
                        std::to_string(dtype));
    const auto ndim = r.get<std::uint8_t>("rank");
    Shape shape(ndim);
    std::size_t count_values = 1;
    for (auto& d : shape) {
      const auto v = r.get<std::uint64_t>("dimensions");
      if (v == 0 || v > (std::uint64_t{1} << 40))
        throw FormatError(source + ": tensor '" + name + "' has invalid dimension " +
                          std::to_string(v));
      d = static_cast<std::size_t>(v);
      count_values *= d;
      if (count_values > (std::size_t{1} << 34))
        throw FormatError(source + ": tensor '" + name + "' is implausibly large");
    }
    std::vector<float> data(count_values);
    r.bytes(reinterpret_cast<char*>(data.data()), data.size() * sizeof(float),
            "payload of '" + name + "'");
    ckpt.add(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  ckpt.iteration = r.get<std::uint64_t>("iteration");
  ckpt.best_validation_q8 = r.get<double>("best validation Q8");
  if (in.peek() != std::char_traits<char>::eof())
    throw FormatError(source + ": trailing bytes after offset " + std::to_string(r.offset()));
  return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  write_checkpoint(out, ckpt);
  if (!out) throw DataError("write failed for checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  return read_checkpoint(in, path.string());
}

// ---------------------------------------------------------------------------
// Model and optimiser state <-> checkpoint.

inline constexpr const char* kAdamFirstPrefix = "adam.m.";
inline constexpr const char* kAdamSecondPrefix = "adam.v.";
/// Auxiliary tensors (e.g. input normalisation) that belong to no layer.
inline constexpr const char* kDataPrefix = "data.";

/// Model tensors, then Adam moments for every trainable tensor that has them.
inline Checkpoint make_checkpoint(const Model& model, const AdamState* adam = nullptr,
                                  std::uint64_t iteration = 0, double best_q8 = 0.0) {
  Checkpoint ckpt;
  for (const auto& [name, t] : model.named_tensors()) ckpt.add(name, *t);
  if (adam) {
    for (const auto& [name, t] : adam->first_moment) ckpt.add(kAdamFirstPrefix + name, t);
    for (const auto& [name, t] : adam->second_moment) ckpt.add(kAdamSecondPrefix + name, t);
  }
  ckpt.iteration = iteration;
  ckpt.best_validation_q8 = best_q8;
  return ckpt;
}

/// Copies checkpoint tensors into `model` (and `adam`, when given). Names
/// and shapes are checked for every tensor before anything is written.
inline void restore_checkpoint(const Checkpoint& ckpt, Model& model, AdamState* adam = nullptr) {
  auto named = model.named_tensors();
  std::map<std::string, const Tensor*> source;
  for (const auto& [n, t] : ckpt.tensors) source.emplace(n, &t);
  for (const auto& [name, t] : named) {
    auto it = source.find(name);
    if (it == source.end())
      throw ConfigError("checkpoint lacks parameter '" + name + "' required by the model");
    if (it->second->shape() != t->shape())
      throw ShapeError("checkpoint parameter '" + name + "' has shape " +
                       shape_string(it->second->shape()) + ", model expects " +
                       shape_string(t->shape()));
  }
  std::map<std::string, Tensor> m, v;
  for (const auto& [n, t] : ckpt.tensors) {
    const bool is_m = n.starts_with(kAdamFirstPrefix);
    const bool is_v = n.starts_with(kAdamSecondPrefix);
    if (is_m || is_v) {
      const std::string target = n.substr(std::strlen(is_m ? kAdamFirstPrefix : kAdamSecondPrefix));
      bool known = false;
      for (const auto& [name, p] : named)
        if (name == target) {
          if (p->shape() != t.shape())
            throw ShapeError("optimizer state '" + n + "' does not match parameter shape");
          known = true;
        }
      if (!known) throw ConfigError("optimizer state '" + n + "' names no model parameter");
      (is_m ? m : v).emplace(target, t);
      continue;
    }
    if (n.starts_with(kDataPrefix)) continue;
    bool known = false;
    for (const auto& [name, p] : named) known = known || name == n;
    if (!known)
      throw ConfigError("checkpoint parameter '" + n + "' does not exist in the target model");
  }
  for (auto& [name, t] : named) *t = *source.at(name);
  if (adam) {
    adam->first_moment = std::move(m);
    adam->second_moment = std::move(v);
    adam->step = ckpt.iteration;
  }
}

}  // namespace chaincnn
