#pragma once

// Row-blocked float kernels shared by the dense and convolution ops.
//
// Every output row is accumulated in the same order (input index ascending)
// no matter how many rows are processed together, so a row's result never
// depends on the other rows of the batch. Beam search and occlusion probes
// rely on this to compare windows bit for bit.

#include <cstddef>
#include <span>

namespace chaincnn::kernels {

inline constexpr std::size_t kRowBlock = 4;

/// y_r += x_r · w for one row; w is row-major [in, out].
inline void accumulate_row(const float* x, std::size_t in, const float* w, std::size_t out,
                           float* __restrict y0) {
  for (std::size_t k = 0; k < in; ++k) {
    const float* __restrict wk = w + k * out;
    const float a0 = x[k];
    for (std::size_t j = 0; j < out; ++j) y0[j] += a0 * wk[j];
  }
}

inline void accumulate_rows4(const float* const* x, std::size_t in, const float* w,
                             std::size_t out, float* const* y) {
  float* __restrict y0 = y[0];
  float* __restrict y1 = y[1];
  float* __restrict y2 = y[2];
  float* __restrict y3 = y[3];
  for (std::size_t k = 0; k < in; ++k) {
    const float* __restrict wk = w + k * out;
    const float a0 = x[0][k], a1 = x[1][k], a2 = x[2][k], a3 = x[3][k];
    for (std::size_t j = 0; j < out; ++j) {
      const float wj = wk[j];
      y0[j] += a0 * wj;
      y1[j] += a1 * wj;
      y2[j] += a2 * wj;
      y3[j] += a3 * wj;
    }
  }
}

/// y_r += x_r · w for every row r. Rows are independent.
inline void accumulate(std::span<const float* const> x, std::size_t in, const float* w,
                       std::size_t out, std::span<float* const> y) {
  std::size_t r = 0;
  for (; r + kRowBlock <= x.size(); r += kRowBlock)
    accumulate_rows4(x.data() + r, in, w, out, y.data() + r);
  for (; r < x.size(); ++r) accumulate_row(x[r], in, w, out, y[r]);
}

/// dw += Σ_r x_rᵀ · dy_r, the weight gradient of `accumulate`.
inline void rank_update(std::span<const float* const> x, std::size_t in,
                        std::span<const float* const> dy, std::size_t out, float* dw) {
  std::size_t r = 0;
  for (; r + kRowBlock <= x.size(); r += kRowBlock) {
    const float* __restrict d0 = dy[r];
    const float* __restrict d1 = dy[r + 1];
    const float* __restrict d2 = dy[r + 2];
    const float* __restrict d3 = dy[r + 3];
    for (std::size_t q = 0; q < in; ++q) {
      const float a0 = x[r][q], a1 = x[r + 1][q], a2 = x[r + 2][q], a3 = x[r + 3][q];
      if (a0 == 0.0f && a1 == 0.0f && a2 == 0.0f && a3 == 0.0f) continue;
      float* __restrict wq = dw + q * out;
      for (std::size_t j = 0; j < out; ++j)
        wq[j] += a0 * d0[j] + a1 * d1[j] + a2 * d2[j] + a3 * d3[j];
    }
  }
  for (; r < x.size(); ++r) {
    const float* __restrict d0 = dy[r];
    for (std::size_t q = 0; q < in; ++q) {
      const float a0 = x[r][q];
      if (a0 == 0.0f) continue;
      float* __restrict wq = dw + q * out;
      for (std::size_t j = 0; j < out; ++j) wq[j] += a0 * d0[j];
    }
  }
}

/// Row-major transpose of an [rows, cols] matrix.
inline void transpose(const float* src, std::size_t rows, std::size_t cols, float* dst) {
  constexpr std::size_t kTile = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += kTile)
    for (std::size_t j0 = 0; j0 < cols; j0 += kTile)
      for (std::size_t i = i0; i < rows && i < i0 + kTile; ++i)
        for (std::size_t j = j0; j < cols && j < j0 + kTile; ++j)
          dst[j * rows + i] = src[i * cols + j];
}

}  // namespace chaincnn::kernels
