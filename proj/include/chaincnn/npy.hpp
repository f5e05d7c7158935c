#pragma once

// Reader and writer for NumPy .npy files (format versions 1.0 and 2.0),
// restricted to little-endian float32/float64 payloads in C order.

#include <array>
#include <bit>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "chaincnn/error.hpp"
#include "chaincnn/tensor.hpp"

namespace chaincnn {

static_assert(std::endian::native == std::endian::little, "npy I/O assumes a little-endian host");

/// Row-major float matrix/array with its parsed shape. Dimensions may be 0.
struct NpyArray {
  Shape shape;
  std::vector<float> data;

  std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::size_t row_size() const { return shape.empty() ? 1 : data.size() / std::max<std::size_t>(rows(), 1); }
  std::span<const float> row(std::size_t i) const {
    const std::size_t n = row_size();
    return std::span<const float>(data).subspan(i * n, n);
  }
};

namespace npy_detail {

inline const std::array<char, 6> kMagic = {'\x93', 'N', 'U', 'M', 'P', 'Y'};

inline std::string dict_value(const std::string& header, const std::string& key,
                              std::size_t header_offset) {
  const std::string quoted_a = "'" + key + "'";
  const std::string quoted_b = "\"" + key + "\"";
  std::size_t pos = header.find(quoted_a);
  std::size_t key_len = quoted_a.size();
  if (pos == std::string::npos) {
    pos = header.find(quoted_b);
    key_len = quoted_b.size();
  }
  if (pos == std::string::npos)
    throw FormatError("npy header at offset " + std::to_string(header_offset) + " lacks key '" +
                      key + "'");
  std::size_t i = header.find(':', pos + key_len);
  if (i == std::string::npos)
    throw FormatError("npy header at offset " + std::to_string(header_offset + pos) +
                      ": missing ':' after '" + key + "'");
  ++i;
  while (i < header.size() && std::isspace(static_cast<unsigned char>(header[i]))) ++i;
  if (i >= header.size())
    throw FormatError("npy header truncated at offset " + std::to_string(header_offset + i));
  std::size_t end;
  if (header[i] == '\'' || header[i] == '"') {
    end = header.find(header[i], i + 1);
    if (end == std::string::npos)
      throw FormatError("npy header: unterminated string at offset " +
                        std::to_string(header_offset + i));
    return header.substr(i + 1, end - i - 1);
  }
  if (header[i] == '(') {
    end = header.find(')', i);
    if (end == std::string::npos)
      throw FormatError("npy header: unterminated shape tuple at offset " +
                        std::to_string(header_offset + i));
    return header.substr(i, end - i + 1);
  }
  end = header.find_first_of(",}", i);
  if (end == std::string::npos) end = header.size();
  std::string v = header.substr(i, end - i);
  while (!v.empty() && std::isspace(static_cast<unsigned char>(v.back()))) v.pop_back();
  return v;
}

inline Shape parse_shape(const std::string& tuple, std::size_t offset) {
  Shape shape;
  std::size_t i = 1;
  while (i + 1 < tuple.size()) {
    while (i < tuple.size() && (std::isspace(static_cast<unsigned char>(tuple[i])) || tuple[i] == ',')) ++i;
    if (i >= tuple.size() - 1) break;
    std::size_t j = i;
    while (j < tuple.size() && std::isdigit(static_cast<unsigned char>(tuple[j]))) ++j;
    if (j == i)
      throw FormatError("npy header: bad shape entry at offset " + std::to_string(offset) + " in " +
                        tuple);
    shape.push_back(std::stoull(tuple.substr(i, j - i)));
    i = j;
  }
  return shape;
}

}  // namespace npy_detail

/// Parses an .npy stream. Errors name the byte offset where parsing failed.
inline NpyArray read_npy(std::istream& in) {
  std::array<char, 8> preamble{};
  in.read(preamble.data(), preamble.size());
  if (in.gcount() < 6 || std::memcmp(preamble.data(), npy_detail::kMagic.data(), 6) != 0)
    throw FormatError("npy: bad magic at offset 0 (expected \\x93NUMPY)");
  if (in.gcount() < 8) throw FormatError("npy: truncated version field at offset 6");
  const auto major = static_cast<unsigned char>(preamble[6]);
  std::size_t header_len = 0;
  std::size_t header_offset = 0;
  if (major == 1) {
    unsigned char len[2];
    in.read(reinterpret_cast<char*>(len), 2);
    if (in.gcount() != 2) throw FormatError("npy: truncated header length at offset 8");
    header_len = len[0] | (std::size_t(len[1]) << 8);
    header_offset = 10;
  } else if (major == 2 || major == 3) {
    unsigned char len[4];
    in.read(reinterpret_cast<char*>(len), 4);
    if (in.gcount() != 4) throw FormatError("npy: truncated header length at offset 8");
    header_len = len[0] | (std::size_t(len[1]) << 8) | (std::size_t(len[2]) << 16) |
                 (std::size_t(len[3]) << 24);
    header_offset = 12;
  } else {
    throw FormatError("npy: unsupported format version " + std::to_string(major) + " at offset 6");
  }
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (static_cast<std::size_t>(in.gcount()) != header_len)
    throw FormatError("npy: truncated header at offset " + std::to_string(header_offset) +
                      ": expected " + std::to_string(header_len) + " bytes, got " +
                      std::to_string(in.gcount()));

  const std::string descr = npy_detail::dict_value(header, "descr", header_offset);
  const std::string fortran = npy_detail::dict_value(header, "fortran_order", header_offset);
  const std::string shape_text = npy_detail::dict_value(header, "shape", header_offset);
  std::size_t item = 0;
  if (descr == "<f4" || descr == "=f4")
    item = 4;
  else if (descr == "<f8" || descr == "=f8")
    item = 8;
  else
    throw FormatError("npy: unsupported dtype '" + descr + "' in header at offset " +
                      std::to_string(header_offset));
  if (fortran != "False")
    throw FormatError("npy: fortran_order=" + fortran + " is not supported (header at offset " +
                      std::to_string(header_offset) + ")");

  NpyArray out;
  out.shape = npy_detail::parse_shape(shape_text, header_offset);
  const std::size_t count = shape_size(out.shape);
  const std::size_t payload_offset = header_offset + header_len;
  std::vector<char> bytes(count * item);
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size())
    throw FormatError("npy: truncated payload at offset " + std::to_string(payload_offset) +
                      ": expected " + std::to_string(bytes.size()) + " bytes, got " +
                      std::to_string(in.gcount()));
  out.data.resize(count);
  if (item == 4) {
    std::memcpy(out.data.data(), bytes.data(), bytes.size());
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      double d;
      std::memcpy(&d, bytes.data() + i * 8, 8);
      out.data[i] = static_cast<float>(d);
    }
  }
  return out;
}

inline NpyArray load_npy(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open npy file " + path.string());
  return read_npy(in);
}

/// Writes a little-endian float32 .npy (version 1.0) in C order.
inline void write_npy(std::ostream& out, const Shape& shape, std::span<const float> data) {
  if (shape_size(shape) != data.size()) throw ShapeError("write_npy: shape/data size mismatch");
  std::string dict = "{'descr': '<f4', 'fortran_order': False, 'shape': (";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    dict += std::to_string(shape[i]);
    if (shape.size() == 1 || i + 1 < shape.size()) dict += ",";
    if (i + 1 < shape.size()) dict += " ";
  }
  dict += "), }";
  std::size_t total = 10 + dict.size() + 1;
  dict.append((64 - total % 64) % 64, ' ');
  dict += '\n';
  out.write(npy_detail::kMagic.data(), 6);
  const char version[2] = {1, 0};
  out.write(version, 2);
  const unsigned char len[2] = {static_cast<unsigned char>(dict.size() & 0xff),
                                static_cast<unsigned char>(dict.size() >> 8)};
  out.write(reinterpret_cast<const char*>(len), 2);
  out.write(dict.data(), static_cast<std::streamsize>(dict.size()));
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
}

inline void save_npy(const std::filesystem::path& path, const Shape& shape,
                     std::span<const float> data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write npy file " + path.string());
  write_npy(out, shape, data);
  if (!out) throw DataError("write failed for " + path.string());
}

}  // namespace chaincnn
