#pragma once

#include <stdexcept>
#include <string>

namespace chaincnn {

/// Base for every error raised by the library. The category decides the
/// process exit code used by the command-line tool.
class Error : public std::runtime_error {
 public:
  enum class Category { config = 1, data = 2, numerical = 3 };

  Error(Category category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  Category category() const noexcept { return category_; }
  int exit_code() const noexcept { return static_cast<int>(category_); }

 private:
  Category category_;
};

/// Invalid configuration, parameter or usage.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(Category::config, what) {}
};

/// Tensor shapes that do not line up.
class ShapeError : public ConfigError {
 public:
  explicit ShapeError(const std::string& what) : ConfigError("shape error: " + what) {}
};

/// Wrong decoding mode or mixed conditioning modes.
class ModeError : public ConfigError {
 public:
  explicit ModeError(const std::string& what) : ConfigError("mode error: " + what) {}
};

/// Unreadable, malformed or inconsistent input files.
class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(Category::data, what) {}
};

/// Binary container problems (NPY, checkpoint).
class FormatError : public DataError {
 public:
  explicit FormatError(const std::string& what) : DataError("format error: " + what) {}
};

/// Non-finite values, degenerate statistics, empty reductions.
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error(Category::numerical, what) {}
};

}  // namespace chaincnn
