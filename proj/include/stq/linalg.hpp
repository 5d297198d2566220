#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <utility>
#include <vector>

#include "stq/error.hpp"
#include "stq/rng.hpp"
#include "stq/tensor.hpp"

namespace stq {

// ---------------------------------------------------------------------------
// Dense products. All loops accumulate over the contraction index in
// increasing order, so results are reproducible bit-for-bit.
// ---------------------------------------------------------------------------

namespace detail {

// 4 packed rows times the last NR (< 4) columns of B.
template <int NR>
[[gnu::always_inline]] inline void gemm_tail_cols(std::size_t k, const Real* ap, const Real* B, std::size_t b_p,
                                                  std::size_t b_j, Real* C, std::size_t ldc) {
  Real s[4][NR] = {};
  for (std::size_t p = 0; p < k; ++p)
    for (int v = 0; v < NR; ++v) {
      const Real bv = B[p * b_p + static_cast<std::size_t>(v) * b_j];
      for (int u = 0; u < 4; ++u) s[u][v] += ap[p * 4 + u] * bv;
    }
  for (int u = 0; u < 4; ++u)
    for (int v = 0; v < NR; ++v) C[static_cast<std::size_t>(u) * ldc + static_cast<std::size_t>(v)] = s[u][v];
}

// 8 rows of A times all NR (< 4) columns of B.
template <int NR>
[[gnu::always_inline]] inline void gemm_narrow_rows(std::size_t k, const Real* A, std::size_t a_i, std::size_t a_p,
                                                    const Real* B, std::size_t b_p, std::size_t b_j, Real* C) {
  Real s[8][NR] = {};
  for (std::size_t p = 0; p < k; ++p)
    for (int v = 0; v < NR; ++v) {
      const Real bv = B[p * b_p + static_cast<std::size_t>(v) * b_j];
      for (std::size_t u = 0; u < 8; ++u) s[u][v] += A[u * a_i + p * a_p] * bv;
    }
  for (std::size_t u = 0; u < 8; ++u)
    for (int v = 0; v < NR; ++v) C[u * NR + static_cast<std::size_t>(v)] = s[u][v];
}

// C[i][j] = sum_p A(i, p) * B(p, j) over strided operands, in 4 x 4 register
// tiles. Operand panels are packed contiguously first so the tile update
// vectorizes. Every output is one sequential sum over p starting from zero,
// the same order as the textbook triple loop.
STQ_HOT inline void gemm_strided(std::size_t m, std::size_t n, std::size_t k, const Real* A, std::size_t a_i,
                                 std::size_t a_p, const Real* B, std::size_t b_p, std::size_t b_j, Real* C) {
  std::size_t i = 0;
  if (n < 4) {
    // Narrow output (low-rank projections): 8 independent rows hide the
    // add latency.
    for (; i + 8 <= m; i += 8) switch (n) {
        case 1: gemm_narrow_rows<1>(k, A + i * a_i, a_i, a_p, B, b_p, b_j, C + i * n); break;
        case 2: gemm_narrow_rows<2>(k, A + i * a_i, a_i, a_p, B, b_p, b_j, C + i * n); break;
        case 3: gemm_narrow_rows<3>(k, A + i * a_i, a_i, a_p, B, b_p, b_j, C + i * n); break;
        default: break;
      }
  }
  const std::size_t nb = n / 4;
  std::vector<Real> bp(nb * k * 4);
  for (std::size_t jb = 0; jb < nb; ++jb)
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t v = 0; v < 4; ++v) bp[(jb * k + p) * 4 + v] = B[p * b_p + (jb * 4 + v) * b_j];
  std::vector<Real> ap(k * 4);

  for (; i + 4 <= m; i += 4) {
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t u = 0; u < 4; ++u) ap[p * 4 + u] = A[(i + u) * a_i + p * a_p];
    for (std::size_t jb = 0; jb < nb; ++jb) {
      const Real* bj = bp.data() + jb * k * 4;
      Real s[4][4] = {};
      for (std::size_t p = 0; p < k; ++p) {
        const Real* av = ap.data() + p * 4;
        const Real* bv = bj + p * 4;
        for (int u = 0; u < 4; ++u)
          for (int v = 0; v < 4; ++v) s[u][v] += av[u] * bv[v];
      }
      for (int u = 0; u < 4; ++u)
        for (int v = 0; v < 4; ++v) C[(i + u) * n + jb * 4 + v] = s[u][v];
    }
    switch (n - nb * 4) {
      case 1: gemm_tail_cols<1>(k, ap.data(), B + nb * 4 * b_j, b_p, b_j, C + i * n + nb * 4, n); break;
      case 2: gemm_tail_cols<2>(k, ap.data(), B + nb * 4 * b_j, b_p, b_j, C + i * n + nb * 4, n); break;
      case 3: gemm_tail_cols<3>(k, ap.data(), B + nb * 4 * b_j, b_p, b_j, C + i * n + nb * 4, n); break;
      default: break;
    }
  }
  if (i < m && b_j == 1) {
    // Rows of B are contiguous: stream each once for all leftover rows,
    // accumulating every output in p order.
    std::fill(C + i * n, C + m * n, Real{0});
    for (std::size_t p = 0; p < k; ++p) {
      const Real* b = B + p * b_p;
      for (std::size_t r = i; r < m; ++r) {
        const Real a = A[r * a_i + p * a_p];
        Real* c = C + r * n;
        for (std::size_t j = 0; j < n; ++j) c[j] += a * b[j];
      }
    }
    return;
  }
  for (; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      Real s = 0;
      for (std::size_t p = 0; p < k; ++p) s += A[i * a_i + p * a_p] * B[p * b_p + j * b_j];
      C[i * n + j] = s;
    }
}

}  // namespace detail

// a[m x k] * b[k x n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw DimensionError("matmul: inner extents differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  Tensor c({m, n});
  detail::gemm_strided(m, n, k, a.data().data(), k, 1, b.data().data(), n, 1, c.data().data());
  return c;
}

// a[m x k] * b[n x k]^T
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k)
    throw DimensionError("matmul_nt: inner extents differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  Tensor c({m, n});
  detail::gemm_strided(m, n, k, a.data().data(), k, 1, b.data().data(), 1, k, c.data().data());
  return c;
}

// a[k x m]^T * b[k x n]
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_tn");
  require_rank(b, 2, "matmul_tn");
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw DimensionError("matmul_tn: inner extents differ " + shape_str(a.shape()) + "^T x " +
                         shape_str(b.shape()));
  Tensor c({m, n});
  detail::gemm_strided(m, n, k, a.data().data(), 1, m, b.data().data(), n, 1, c.data().data());
  return c;
}

inline Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  Tensor t({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor c = a;
  for (std::size_t i = 0; i < c.numel(); ++i) c[i] += b[i];
  return c;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor c = a;
  for (std::size_t i = 0; i < c.numel(); ++i) c[i] -= b[i];
  return c;
}

inline Tensor scaled(const Tensor& a, Real s) {
  Tensor c = a;
  for (auto& v : c.data()) v *= s;
  return c;
}

// ---------------------------------------------------------------------------
// Convolution as im2col + GEMM. Activations are laid out T x C x H x W.
// Columns of the im2col matrix are tap-major: column = tap * C_in + c, with
// tap = (kt * kH + kh) * kW + kw. The flattened weight uses the same order,
// so each kernel tap owns one contiguous block of C_in columns.
// ---------------------------------------------------------------------------

struct ConvGeometry {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::array<std::size_t, 3> kernel{1, 1, 1};  // kT, kH, kW
  std::array<std::size_t, 3> stride{1, 1, 1};
  std::array<std::size_t, 3> pad{0, 0, 0};

  std::size_t taps() const { return kernel[0] * kernel[1] * kernel[2]; }
  std::size_t patch() const { return taps() * in_channels; }

  // Output extents (T', H', W') for an input of T x H x W.
  std::array<std::size_t, 3> output_extents(std::size_t t, std::size_t h, std::size_t w) const {
    const std::array<std::size_t, 3> in{t, h, w};
    std::array<std::size_t, 3> out{};
    for (int a = 0; a < 3; ++a) {
      const std::size_t padded = in[a] + 2 * pad[a];
      if (kernel[a] > padded)
        throw DimensionError("convolution kernel extent " + std::to_string(kernel[a]) +
                             " exceeds padded input extent " + std::to_string(padded));
      out[a] = (padded - kernel[a]) / stride[a] + 1;
    }
    return out;
  }

  bool operator==(const ConvGeometry&) const = default;
};

inline void check_conv_input(const Tensor& x, const ConvGeometry& g, const char* op) {
  require_rank(x, 4, op);
  if (x.dim(1) != g.in_channels)
    throw DimensionError(std::string(op) + ": input has " + std::to_string(x.dim(1)) +
                         " channels, layer expects " + std::to_string(g.in_channels));
}

// x[T x C x H x W] -> [T'H'W' x taps*C]
template <typename T>
BasicTensor<T> im2col(const BasicTensor<T>& x, const ConvGeometry& g, T pad_value = T{}) {
  if (x.rank() != 4) throw DimensionError("im2col: expected T x C x H x W input");
  if (x.dim(1) != g.in_channels)
    throw DimensionError("im2col: input has " + std::to_string(x.dim(1)) +
                         " channels, layer expects " + std::to_string(g.in_channels));
  const std::size_t T_ = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto [To, Ho, Wo] = g.output_extents(T_, H, W);
  const auto [kT, kH, kW] = g.kernel;
  const std::size_t K = g.patch();
  BasicTensor<T> cols({To * Ho * Wo, K}, pad_value);
  const T* X = x.data().data();
  T* out = cols.data().data();
  for (std::size_t to = 0; to < To; ++to)
    for (std::size_t ho = 0; ho < Ho; ++ho)
      for (std::size_t wo = 0; wo < Wo; ++wo) {
        T* row = out + ((to * Ho + ho) * Wo + wo) * K;
        for (std::size_t kt = 0; kt < kT; ++kt) {
          const auto ti = static_cast<std::ptrdiff_t>(to * g.stride[0] + kt) -
                          static_cast<std::ptrdiff_t>(g.pad[0]);
          if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(T_)) continue;
          for (std::size_t kh = 0; kh < kH; ++kh) {
            const auto hi = static_cast<std::ptrdiff_t>(ho * g.stride[1] + kh) -
                            static_cast<std::ptrdiff_t>(g.pad[1]);
            if (hi < 0 || hi >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t kw = 0; kw < kW; ++kw) {
              const auto wi = static_cast<std::ptrdiff_t>(wo * g.stride[2] + kw) -
                              static_cast<std::ptrdiff_t>(g.pad[2]);
              if (wi < 0 || wi >= static_cast<std::ptrdiff_t>(W)) continue;
              const std::size_t tap = (kt * kH + kh) * kW + kw;
              for (std::size_t c = 0; c < C; ++c)
                row[tap * C + c] =
                    X[((static_cast<std::size_t>(ti) * C + c) * H + static_cast<std::size_t>(hi)) * W +
                      static_cast<std::size_t>(wi)];
            }
          }
        }
      }
  return cols;
}

// Adjoint of im2col: scatters column gradients back onto the input grid.
inline Tensor col2im(const Tensor& cols, const ConvGeometry& g, const Shape& input_shape) {
  const std::size_t T_ = input_shape[0], C = input_shape[1], H = input_shape[2], W = input_shape[3];
  const auto [To, Ho, Wo] = g.output_extents(T_, H, W);
  const auto [kT, kH, kW] = g.kernel;
  const std::size_t K = g.patch();
  if (cols.rank() != 2 || cols.rows() != To * Ho * Wo || cols.cols() != K)
    throw DimensionError("col2im: column matrix " + shape_str(cols.shape()) +
                         " does not match geometry");
  Tensor x(input_shape);
  Real* X = x.data().data();
  const Real* in = cols.data().data();
  for (std::size_t to = 0; to < To; ++to)
    for (std::size_t ho = 0; ho < Ho; ++ho)
      for (std::size_t wo = 0; wo < Wo; ++wo) {
        const Real* row = in + ((to * Ho + ho) * Wo + wo) * K;
        for (std::size_t kt = 0; kt < kT; ++kt) {
          const auto ti = static_cast<std::ptrdiff_t>(to * g.stride[0] + kt) -
                          static_cast<std::ptrdiff_t>(g.pad[0]);
          if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(T_)) continue;
          for (std::size_t kh = 0; kh < kH; ++kh) {
            const auto hi = static_cast<std::ptrdiff_t>(ho * g.stride[1] + kh) -
                            static_cast<std::ptrdiff_t>(g.pad[1]);
            if (hi < 0 || hi >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t kw = 0; kw < kW; ++kw) {
              const auto wi = static_cast<std::ptrdiff_t>(wo * g.stride[2] + kw) -
                              static_cast<std::ptrdiff_t>(g.pad[2]);
              if (wi < 0 || wi >= static_cast<std::ptrdiff_t>(W)) continue;
              const std::size_t tap = (kt * kH + kh) * kW + kw;
              for (std::size_t c = 0; c < C; ++c)
                X[((static_cast<std::size_t>(ti) * C + c) * H + static_cast<std::size_t>(hi)) * W +
                  static_cast<std::size_t>(wi)] += row[tap * C + c];
            }
          }
        }
      }
  return x;
}

// [T'H'W' x N] -> [T' x N x H' x W']
inline Tensor rows_to_frames(const Tensor& rows, std::size_t t, std::size_t h, std::size_t w) {
  const std::size_t n = rows.cols();
  if (rows.rows() != t * h * w) throw DimensionError("rows_to_frames: row count mismatch");
  Tensor out({t, n, h, w});
  for (std::size_t ti = 0; ti < t; ++ti)
    for (std::size_t hw = 0; hw < h * w; ++hw)
      for (std::size_t c = 0; c < n; ++c)
        out[(ti * n + c) * h * w + hw] = rows[(ti * h * w + hw) * n + c];
  return out;
}

// [T x N x H x W] -> [THW x N]
inline Tensor frames_to_rows(const Tensor& x) {
  require_rank(x, 4, "frames_to_rows");
  const std::size_t t = x.dim(0), n = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor rows({t * hw, n});
  for (std::size_t ti = 0; ti < t; ++ti)
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t c = 0; c < n; ++c) rows[(ti * hw + p) * n + c] = x[(ti * n + c) * hw + p];
  return rows;
}

// Reorders a Cout x Cin x kT x kH x kW kernel into the Cout x (taps * Cin)
// matrix matching the im2col column order.
inline Tensor flatten_conv_weight(const Tensor& w) {
  require_rank(w, 5, "flatten_conv_weight");
  const std::size_t co = w.dim(0), ci = w.dim(1), taps = w.dim(2) * w.dim(3) * w.dim(4);
  Tensor flat({co, taps * ci});
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t c = 0; c < ci; ++c)
      for (std::size_t tap = 0; tap < taps; ++tap)
        flat.at(o, tap * ci + c) = w[(o * ci + c) * taps + tap];
  return flat;
}

inline Tensor unflatten_conv_weight(const Tensor& flat, const ConvGeometry& g) {
  const std::size_t co = g.out_channels, ci = g.in_channels, taps = g.taps();
  Tensor w({co, ci, g.kernel[0], g.kernel[1], g.kernel[2]});
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t c = 0; c < ci; ++c)
      for (std::size_t tap = 0; tap < taps; ++tap)
        w[(o * ci + c) * taps + tap] = flat.at(o, tap * ci + c);
  return w;
}

// Cross-correlation (no kernel flip). x: T x Cin x H x W,
// w: Cout x Cin x kT x kH x kW. Returns T' x Cout x H' x W'.
inline Tensor conv_forward(const Tensor& x, const Tensor& w, std::array<std::size_t, 3> stride,
                           std::array<std::size_t, 3> pad) {
  require_rank(w, 5, "conv_forward");
  ConvGeometry g;
  g.in_channels = w.dim(1);
  g.out_channels = w.dim(0);
  g.kernel = {w.dim(2), w.dim(3), w.dim(4)};
  g.stride = stride;
  g.pad = pad;
  check_conv_input(x, g, "conv_forward");
  const auto [to, ho, wo] = g.output_extents(x.dim(0), x.dim(2), x.dim(3));
  return rows_to_frames(matmul_nt(im2col(x, g), flatten_conv_weight(w)), to, ho, wo);
}

// ---------------------------------------------------------------------------
// Randomized Hadamard transform, H = (1/sqrt(d)) * H_walsh * D, applied to
// contiguous blocks of size d along the last axis.
// ---------------------------------------------------------------------------

inline bool is_power_of_two(std::size_t d) { return d != 0 && std::has_single_bit(d); }

inline void require_power_of_two(std::size_t d, const char* what) {
  if (!is_power_of_two(d))
    throw UnsupportedDimension(std::string(what) + ": dimension " + std::to_string(d) +
                               " is not a power of two");
}

// Unnormalized in-place Walsh-Hadamard butterfly (Sylvester order).
inline void walsh_hadamard_inplace(Real* v, std::size_t d) {
  for (std::size_t len = 1; len < d; len <<= 1)
    for (std::size_t i = 0; i < d; i += len << 1)
      for (std::size_t j = i; j < i + len; ++j) {
        const Real a = v[j], b = v[j + len];
        v[j] = a + b;
        v[j + len] = a - b;
      }
}

namespace detail {

// Same butterfly with the block size known at compile time so small blocks
// unroll. pre/post are per-element factors applied before/after.
template <std::size_t D>
[[gnu::always_inline]] inline void fwht_blocks_fixed(Real* p, std::size_t n, const Real* pre_in, const Real* post_in) {
  std::array<Real, D> pre, post, v;
  std::copy_n(pre_in, D, pre.begin());
  std::copy_n(post_in, D, post.begin());
  for (std::size_t off = 0; off < n; off += D) {
    for (std::size_t i = 0; i < D; ++i) v[i] = p[off + i] * pre[i];
    for (std::size_t len = 1; len < D; len <<= 1)
      for (std::size_t i = 0; i < D; i += len << 1)
        for (std::size_t j = i; j < i + len; ++j) {
          const Real a = v[j], b = v[j + len];
          v[j] = a + b;
          v[j + len] = a - b;
        }
    for (std::size_t i = 0; i < D; ++i) p[off + i] = v[i] * post[i];
  }
}

STQ_HOT inline void fwht_blocks(Real* p, std::size_t n, std::size_t d, const Real* pre, const Real* post) {
  switch (d) {
    case 1: return fwht_blocks_fixed<1>(p, n, pre, post);
    case 2: return fwht_blocks_fixed<2>(p, n, pre, post);
    case 4: return fwht_blocks_fixed<4>(p, n, pre, post);
    case 8: return fwht_blocks_fixed<8>(p, n, pre, post);
    case 16: return fwht_blocks_fixed<16>(p, n, pre, post);
    case 32: return fwht_blocks_fixed<32>(p, n, pre, post);
    case 64: return fwht_blocks_fixed<64>(p, n, pre, post);
    default: break;
  }
  for (std::size_t off = 0; off < n; off += d) {
    for (std::size_t i = 0; i < d; ++i) p[off + i] *= pre[i];
    walsh_hadamard_inplace(p + off, d);
    for (std::size_t i = 0; i < d; ++i) p[off + i] *= post[i];
  }
}

}  // namespace detail

inline std::vector<Real> hadamard_signs(std::size_t d, std::uint64_t seed) {
  require_power_of_two(d, "hadamard_signs");
  Rng rng(seed);
  std::vector<Real> signs(d);
  for (auto& s : signs) s = static_cast<Real>(rng.sign());
  return signs;
}

// y = H x per block.
inline Tensor block_fwht(const Tensor& x, std::span<const Real> signs) {
  const std::size_t d = signs.size();
  require_power_of_two(d, "fwht");
  if (x.empty() || x.shape().back() % d != 0)
    throw DimensionError("fwht: last axis " + shape_str(x.shape()) +
                         " is not a multiple of the block size " + std::to_string(d));
  const Real norm = 1.0 / std::sqrt(static_cast<Real>(d));
  const std::vector<Real> post(d, norm);
  Tensor y = x;
  detail::fwht_blocks(y.data().data(), y.numel(), d, signs.data(), post.data());
  return y;
}

// x = H^T y per block.
inline Tensor block_fwht_inverse(const Tensor& y, std::span<const Real> signs) {
  const std::size_t d = signs.size();
  require_power_of_two(d, "fwht_inverse");
  if (y.empty() || y.shape().back() % d != 0)
    throw DimensionError("fwht_inverse: last axis " + shape_str(y.shape()) +
                         " is not a multiple of the block size " + std::to_string(d));
  const Real norm = 1.0 / std::sqrt(static_cast<Real>(d));
  const std::vector<Real> pre(d, 1.0);
  std::vector<Real> post(d);
  for (std::size_t i = 0; i < d; ++i) post[i] = norm * signs[i];
  Tensor x = y;
  detail::fwht_blocks(x.data().data(), x.numel(), d, pre.data(), post.data());
  return x;
}

// Whole-last-axis transform with signs drawn from `sign_seed`.
inline Tensor fwht(const Tensor& x, std::uint64_t sign_seed) {
  if (x.empty()) throw DimensionError("fwht: empty tensor");
  const auto signs = hadamard_signs(x.shape().back(), sign_seed);
  return block_fwht(x, signs);
}

inline Tensor fwht_inverse(const Tensor& y, std::uint64_t sign_seed) {
  if (y.empty()) throw DimensionError("fwht_inverse: empty tensor");
  const auto signs = hadamard_signs(y.shape().back(), sign_seed);
  return block_fwht_inverse(y, signs);
}

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition (Householder tridiagonalization, then
// implicit QL) and truncated SVD through the smaller Gram matrix.
// ---------------------------------------------------------------------------

struct SymmetricEigen {
  std::vector<Real> values;  // non-increasing
  Tensor vectors;            // column j is the eigenvector of values[j]
};

inline SymmetricEigen symmetric_eigen(const Tensor& a) {
  require_rank(a, 2, "symmetric_eigen");
  const int n = static_cast<int>(a.rows());
  if (a.cols() != a.rows()) throw DimensionError("symmetric_eigen: matrix is not square");
  const auto un = static_cast<std::size_t>(n);
  if (n == 0) return {{}, Tensor({0, 0})};

  // Row-major working copy; v(i, j) addresses row i, column j.
  std::vector<Real> vbuf(a.data().begin(), a.data().end()), d(un), e(un);
  auto v = [&](int i, int j) -> Real& { return vbuf[static_cast<std::size_t>(i) * un + static_cast<std::size_t>(j)]; };

  // Reduce to tridiagonal form: diagonal d, subdiagonal e, transform in v.
  for (int j = 0; j < n; ++j) d[j] = v(n - 1, j);
  for (int i = n - 1; i > 0; --i) {
    Real scale = 0, h = 0;
    for (int k = 0; k < i; ++k) scale += std::abs(d[k]);
    if (scale == 0) {
      e[i] = d[i - 1];
      for (int j = 0; j < i; ++j) {
        d[j] = v(i - 1, j);
        v(i, j) = 0;
        v(j, i) = 0;
      }
    } else {
      for (int k = 0; k < i; ++k) {
        d[k] /= scale;
        h += d[k] * d[k];
      }
      Real f = d[i - 1], g = std::sqrt(h);
      if (f > 0) g = -g;
      e[i] = scale * g;
      h -= f * g;
      d[i - 1] = f - g;
      for (int j = 0; j < i; ++j) e[j] = 0;
      for (int j = 0; j < i; ++j) {
        f = d[j];
        v(j, i) = f;
        g = e[j] + v(j, j) * f;
        for (int k = j + 1; k < i; ++k) {
          g += v(k, j) * d[k];
          e[k] += v(k, j) * f;
        }
        e[j] = g;
      }
      f = 0;
      for (int j = 0; j < i; ++j) {
        e[j] /= h;
        f += e[j] * d[j];
      }
      const Real hh = f / (h + h);
      for (int j = 0; j < i; ++j) e[j] -= hh * d[j];
      for (int j = 0; j < i; ++j) {
        f = d[j];
        g = e[j];
        for (int k = j; k < i; ++k) v(k, j) -= f * e[k] + g * d[k];
        d[j] = v(i - 1, j);
        v(i, j) = 0;
      }
    }
    d[i] = h;
  }
  for (int i = 0; i < n - 1; ++i) {
    v(n - 1, i) = v(i, i);
    v(i, i) = 1;
    const Real h = d[i + 1];
    if (h != 0) {
      for (int k = 0; k <= i; ++k) d[k] = v(k, i + 1) / h;
      for (int j = 0; j <= i; ++j) {
        Real g = 0;
        for (int k = 0; k <= i; ++k) g += v(k, i + 1) * v(k, j);
        for (int k = 0; k <= i; ++k) v(k, j) -= g * d[k];
      }
    }
    for (int k = 0; k <= i; ++k) v(k, i + 1) = 0;
  }
  for (int j = 0; j < n; ++j) {
    d[j] = v(n - 1, j);
    v(n - 1, j) = 0;
  }
  v(n - 1, n - 1) = 1;
  e[0] = 0;

  // QL iterations act on columns of v; work on its transpose so each
  // rotation touches two contiguous rows.
  std::vector<Real> vt(un * un);
  for (std::size_t i = 0; i < un; ++i)
    for (std::size_t j = 0; j < un; ++j) vt[j * un + i] = vbuf[i * un + j];

  for (int i = 1; i < n; ++i) e[i - 1] = e[i];
  e[n - 1] = 0;
  Real f = 0, tst1 = 0;
  const Real eps = std::numeric_limits<Real>::epsilon();
  for (int l = 0; l < n; ++l) {
    tst1 = std::max(tst1, std::abs(d[l]) + std::abs(e[l]));
    int m = l;
    while (m < n - 1 && std::abs(e[m]) > eps * tst1) ++m;
    if (m > l) {
      do {
        Real g = d[l];
        Real p = (d[l + 1] - g) / (2 * e[l]);
        Real r = std::hypot(p, Real{1});
        if (p < 0) r = -r;
        d[l] = e[l] / (p + r);
        d[l + 1] = e[l] * (p + r);
        const Real dl1 = d[l + 1];
        Real h = g - d[l];
        for (int i = l + 2; i < n; ++i) d[i] -= h;
        f += h;
        p = d[m];
        Real c = 1, c2 = 1, c3 = 1, s = 0, s2 = 0;
        const Real el1 = e[l + 1];
        for (int i = m - 1; i >= l; --i) {
          c3 = c2;
          c2 = c;
          s2 = s;
          g = c * e[i];
          h = c * p;
          r = std::hypot(p, e[i]);
          e[i + 1] = s * r;
          s = e[i] / r;
          c = p / r;
          p = c * d[i] - s * g;
          d[i + 1] = h + s * (c * g + s * d[i]);
          Real* x = &vt[static_cast<std::size_t>(i) * un];
          Real* y = x + un;
          for (std::size_t k = 0; k < un; ++k) {
            const Real yk = y[k];
            y[k] = s * x[k] + c * yk;
            x[k] = c * x[k] - s * yk;
          }
        }
        p = -s * s2 * c3 * el1 * e[l] / dl1;
        e[l] = s * p;
        d[l] = c * p;
      } while (std::abs(e[l]) > eps * tst1);
    }
    d[l] += f;
    e[l] = 0;
  }

  std::vector<std::size_t> order(un);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return d[i] > d[j]; });
  SymmetricEigen out{std::vector<Real>(un), Tensor({un, un})};
  for (std::size_t j = 0; j < un; ++j) {
    out.values[j] = d[order[j]];
    for (std::size_t k = 0; k < un; ++k) out.vectors.at(k, j) = vt[order[j] * un + k];
  }
  return out;
}

// Singular values (non-increasing) from the Gram-matrix eigenvalues.
inline std::vector<Real> singular_values(const Tensor& w) {
  require_rank(w, 2, "singular_values");
  const bool tall = w.rows() >= w.cols();
  auto eig = symmetric_eigen(tall ? matmul_tn(w, w) : matmul_nt(w, w));
  for (auto& l : eig.values) l = std::sqrt(std::max(l, Real{0}));
  return eig.values;
}

struct LowRankFactors {
  Tensor l1;  // m x r, U_r * Sigma_r
  Tensor l2;  // r x n, V_r^T
};

inline LowRankFactors svd_truncated(const Tensor& w, std::size_t r) {
  require_rank(w, 2, "svd_truncated");
  const std::size_t m = w.rows(), n = w.cols();
  if (r < 1 || r > std::min(m, n))
    throw ArgumentError("svd_truncated: rank " + std::to_string(r) + " outside [1, " +
                        std::to_string(std::min(m, n)) + "]");
  LowRankFactors f{Tensor({m, r}), Tensor({r, n})};
  if (m >= n) {
    // G = W^T W = V S^2 V^T; L1 = W V_r = U_r S_r, L2 = V_r^T.
    const auto eig = symmetric_eigen(matmul_tn(w, w));
    for (std::size_t j = 0; j < r; ++j)
      for (std::size_t k = 0; k < n; ++k) f.l2.at(j, k) = eig.vectors.at(k, j);
    f.l1 = matmul_nt(w, f.l2);
  } else {
    // G = W W^T = U S^2 U^T; L1 = U_r S_r, L2 = S_r^-1 U_r^T W.
    const auto eig = symmetric_eigen(matmul_nt(w, w));
    const Real smax = std::sqrt(std::max(eig.values[0], Real{0}));
    Tensor ut({r, m});
    for (std::size_t j = 0; j < r; ++j)
      for (std::size_t k = 0; k < m; ++k) ut.at(j, k) = eig.vectors.at(k, j);
    const Tensor proj = matmul(ut, w);  // U_r^T W = S_r V_r^T
    for (std::size_t j = 0; j < r; ++j) {
      Real sigma = 0;
      for (std::size_t k = 0; k < n; ++k) sigma += proj.at(j, k) * proj.at(j, k);
      sigma = std::sqrt(sigma);
      if (sigma <= 1e-14 * smax) continue;  // null direction; leave the pair at zero
      for (std::size_t k = 0; k < m; ++k) f.l1.at(k, j) = ut.at(j, k) * sigma;
      for (std::size_t k = 0; k < n; ++k) f.l2.at(j, k) = proj.at(j, k) / sigma;
    }
  }
  return f;
}

// ---------------------------------------------------------------------------
// Nearest-rank percentile.
// ---------------------------------------------------------------------------

inline Real percentile(std::vector<Real> values, Real p) {
  if (values.empty()) throw ArgumentError("percentile: empty input");
  if (!(p >= 0 && p <= 100)) throw ArgumentError("percentile: p outside [0, 100]");
  std::sort(values.begin(), values.end());
  const auto n = static_cast<Real>(values.size());
  auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * n));
  const std::size_t idx = rank == 0 ? 0 : rank - 1;
  return values[std::min(idx, values.size() - 1)];
}

}  // namespace stq
