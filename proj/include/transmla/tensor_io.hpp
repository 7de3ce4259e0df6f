#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "transmla/errors.hpp"
#include "transmla/matrix.hpp"

namespace transmla {

// MLAF tensor container, little-endian throughout:
//
//   offset  size     field
//   0       4        magic "MLAF"
//   4       2        version (u16, currently 1)
//   6       1        dtype code (0 = f32, 1 = f64)
//   7       1        ndim (u8)
//   8       8·ndim   dims (u64 each)
//   ...     ...      payload, row-major, product(dims)·sizeof(dtype) bytes
//
// A Matrix is written with ndim = 2. Readers accept ndim 1 (as a 1×n row).

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1 };

inline constexpr std::array<char, 4> kTensorMagic = {'M', 'L', 'A', 'F'};
inline constexpr std::uint16_t kTensorVersion = 1;

inline std::size_t dtype_size(DType t) { return t == DType::kF32 ? 4 : 8; }

namespace detail {

inline void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_le(std::span<const std::uint8_t> in, std::size_t off, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(in[off + static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_tensor(const Matrix& m, DType dtype = DType::kF64) {
  std::vector<std::uint8_t> out;
  out.reserve(8 + 16 + m.size() * dtype_size(dtype));
  out.insert(out.end(), kTensorMagic.begin(), kTensorMagic.end());
  detail::put_le(out, kTensorVersion, 2);
  out.push_back(static_cast<std::uint8_t>(dtype));
  out.push_back(2);
  detail::put_le(out, m.rows(), 8);
  detail::put_le(out, m.cols(), 8);
  for (double v : m.data()) {
    if (dtype == DType::kF64) {
      detail::put_le(out, std::bit_cast<std::uint64_t>(v), 8);
    } else {
      detail::put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
    }
  }
  return out;
}

struct DecodedTensor {
  Matrix matrix;
  DType dtype = DType::kF64;
};

inline DecodedTensor decode_tensor(std::span<const std::uint8_t> in) {
  if (in.size() < 8) throw IoError("tensor: truncated header");
  if (!std::equal(kTensorMagic.begin(), kTensorMagic.end(), in.begin())) throw IoError("tensor: bad magic");
  const auto version = detail::get_le(in, 4, 2);
  if (version != kTensorVersion) throw IoError("tensor: unsupported version " + std::to_string(version));
  const std::uint8_t code = in[6];
  if (code > 1) throw IoError("tensor: unknown dtype code " + std::to_string(code));
  const DType dtype = static_cast<DType>(code);
  const std::size_t ndim = in[7];
  if (ndim < 1 || ndim > 2) throw IoError("tensor: unsupported ndim " + std::to_string(ndim));
  if (in.size() < 8 + 8 * ndim) throw IoError("tensor: truncated dims");

  std::vector<std::uint64_t> dims(ndim);
  std::uint64_t count = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    dims[i] = detail::get_le(in, 8 + 8 * i, 8);
    if (dims[i] != 0 && count > std::numeric_limits<std::uint64_t>::max() / dims[i])
      throw IoError("tensor: dimension product overflows");
    count *= dims[i];
  }
  const std::size_t elem = dtype_size(dtype);
  if (count > (std::numeric_limits<std::uint64_t>::max() - 64) / elem) throw IoError("tensor: payload size overflows");
  const std::size_t header = 8 + 8 * ndim;
  const std::uint64_t payload = count * elem;
  if (in.size() - header < payload) throw IoError("tensor: truncated payload");
  if (in.size() - header > payload) throw IoError("tensor: trailing bytes after payload");

  const std::size_t rows = ndim == 2 ? static_cast<std::size_t>(dims[0]) : 1;
  const std::size_t cols = static_cast<std::size_t>(ndim == 2 ? dims[1] : dims[0]);
  std::vector<double> data(static_cast<std::size_t>(count));
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::size_t off = header + i * elem;
    data[i] = dtype == DType::kF64 ? std::bit_cast<double>(detail::get_le(in, off, 8))
                                   : static_cast<double>(std::bit_cast<float>(
                                         static_cast<std::uint32_t>(detail::get_le(in, off, 4))));
  }
  if (dims.size() == 2 && rows * cols == 0) return {Matrix(rows, cols), dtype};
  return {Matrix(rows, cols, std::move(data)), dtype};
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for " + path.string());
}

inline void save_tensor(const std::filesystem::path& path, const Matrix& m, DType dtype = DType::kF64) {
  write_file_bytes(path, encode_tensor(m, dtype));
}

inline Matrix load_tensor(const std::filesystem::path& path) {
  try {
    return decode_tensor(read_file_bytes(path)).matrix;
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace transmla
