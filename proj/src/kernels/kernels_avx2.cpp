// Compiled with -mavx2 -mfma. Only reached after the dispatcher has confirmed
// CPU support, so nothing in this file may run at static-init time.

#include <immintrin.h>

#include <algorithm>
#include <cstring>
#include <vector>

#include "etide/kernels.hpp"

namespace etide::kernels::avx2 {
namespace {

constexpr int kBlockK = 256;
constexpr int kMaxRows = 6;

inline __m256i tail_mask(int n) {
  alignas(32) static const std::int32_t bits[16] = {-1, -1, -1, -1, -1, -1, -1, -1, 0, 0, 0, 0, 0, 0, 0, 0};
  return _mm256_loadu_si256(reinterpret_cast<const __m256i*>(bits + 8 - n));
}

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 sh = _mm_movehdup_ps(lo);
  __m128 s = _mm_add_ps(lo, sh);
  sh = _mm_movehl_ps(sh, s);
  s = _mm_add_ss(s, sh);
  return _mm_cvtss_f32(s);
}

// C[R,16] += A[R,K] * B[K,16]
template <int R>
void micro16(int K, const float* a, int lda, const float* b, int ldb, float* c, int ldc) {
  __m256 acc0[R], acc1[R];
  for (int r = 0; r < R; ++r) {
    acc0[r] = _mm256_loadu_ps(c + r * ldc);
    acc1[r] = _mm256_loadu_ps(c + r * ldc + 8);
  }
  for (int k = 0; k < K; ++k) {
    const float* bk = b + static_cast<std::ptrdiff_t>(k) * ldb;
    const __m256 b0 = _mm256_loadu_ps(bk);
    const __m256 b1 = _mm256_loadu_ps(bk + 8);
    for (int r = 0; r < R; ++r) {
      const __m256 av = _mm256_broadcast_ss(a + r * lda + k);
      acc0[r] = _mm256_fmadd_ps(av, b0, acc0[r]);
      acc1[r] = _mm256_fmadd_ps(av, b1, acc1[r]);
    }
  }
  for (int r = 0; r < R; ++r) {
    _mm256_storeu_ps(c + r * ldc, acc0[r]);
    _mm256_storeu_ps(c + r * ldc + 8, acc1[r]);
  }
}

template <int R>
void strip(int K, const float* a, int lda, const float* bp, float* c, int ldc) {
  micro16<R>(K, a, lda, bp, 16, c, ldc);
}

void dispatch_rows(int rows, int K, const float* a, int lda, const float* bp, float* c, int ldc) {
  switch (rows) {
    case 1: strip<1>(K, a, lda, bp, c, ldc); break;
    case 2: strip<2>(K, a, lda, bp, c, ldc); break;
    case 3: strip<3>(K, a, lda, bp, c, ldc); break;
    case 4: strip<4>(K, a, lda, bp, c, ldc); break;
    case 5: strip<5>(K, a, lda, bp, c, ldc); break;
    default: strip<6>(K, a, lda, bp, c, ldc); break;
  }
}

// Copies op(B)[k0:k0+kc, j0:j0+nc] into 16-column strips laid out [strip][k][16],
// zero padding the last strip.
void pack_b(Trans tb, const float* B, int ldb, int k0, int kc, int j0, int nc, float* out) {
  const int strips = (nc + 15) / 16;
  for (int s = 0; s < strips; ++s) {
    const int cols = std::min(16, nc - s * 16);
    float* dst = out + static_cast<std::ptrdiff_t>(s) * kc * 16;
    if (tb == Trans::No) {
      for (int k = 0; k < kc; ++k) {
        const float* src = B + static_cast<std::ptrdiff_t>(k0 + k) * ldb + j0 + s * 16;
        float* d = dst + k * 16;
        if (cols == 16) {
          _mm256_storeu_ps(d, _mm256_loadu_ps(src));
          _mm256_storeu_ps(d + 8, _mm256_loadu_ps(src + 8));
        } else {
          std::memset(d, 0, 16 * sizeof(float));
          std::memcpy(d, src, sizeof(float) * static_cast<std::size_t>(cols));
        }
      }
    } else {
      if (cols < 16) std::memset(dst, 0, sizeof(float) * static_cast<std::size_t>(kc) * 16);
      for (int jj = 0; jj < cols; ++jj) {
        const float* src = B + static_cast<std::ptrdiff_t>(j0 + s * 16 + jj) * ldb + k0;
        for (int k = 0; k < kc; ++k) dst[k * 16 + jj] = src[k];
      }
    }
  }
}

// dst[cols, rows] = transpose(src[rows, cols])
void transpose(const float* src, int rows, int cols, int ld, float* dst) {
  constexpr int kTile = 32;
  for (int i0 = 0; i0 < rows; i0 += kTile) {
    const int i1 = std::min(rows, i0 + kTile);
    for (int j0 = 0; j0 < cols; j0 += kTile) {
      const int j1 = std::min(cols, j0 + kTile);
      for (int i = i0; i < i1; ++i)
        for (int j = j0; j < j1; ++j) dst[static_cast<std::ptrdiff_t>(j) * rows + i] = src[static_cast<std::ptrdiff_t>(i) * ld + j];
    }
  }
}

}  // namespace

void gemm(Trans ta, Trans tb, int M, int N, int K, const float* A, int lda, const float* B, int ldb, float* C,
          int ldc, bool accumulate) {
  if (!accumulate) {
    for (int i = 0; i < M; ++i) std::memset(C + static_cast<std::ptrdiff_t>(i) * ldc, 0, sizeof(float) * static_cast<std::size_t>(N));
  }
  if (M == 0 || N == 0 || K == 0) return;
  std::vector<float> apack;
  if (ta == Trans::Yes) {
    apack.resize(static_cast<std::size_t>(M) * K);
    transpose(A, K, M, lda, apack.data());
    A = apack.data();
    lda = K;
  }
  constexpr int kBlockN = 512;
  std::vector<float> bpack(static_cast<std::size_t>(kBlockK) * kBlockN);
  alignas(32) float tile[kMaxRows * 16];
  for (int k0 = 0; k0 < K; k0 += kBlockK) {
    const int kc = std::min(kBlockK, K - k0);
    for (int j0 = 0; j0 < N; j0 += kBlockN) {
      const int nc = std::min(kBlockN, N - j0);
      pack_b(tb, B, ldb, k0, kc, j0, nc, bpack.data());
      for (int i0 = 0; i0 < M; i0 += kMaxRows) {
        const int rows = std::min(kMaxRows, M - i0);
        const float* a = A + static_cast<std::ptrdiff_t>(i0) * lda + k0;
        for (int s = 0; s * 16 < nc; ++s) {
          const int cols = std::min(16, nc - s * 16);
          const float* bp = bpack.data() + static_cast<std::ptrdiff_t>(s) * kc * 16;
          float* c = C + static_cast<std::ptrdiff_t>(i0) * ldc + j0 + s * 16;
          if (cols == 16) {
            dispatch_rows(rows, kc, a, lda, bp, c, ldc);
          } else {
            std::memset(tile, 0, sizeof tile);
            dispatch_rows(rows, kc, a, lda, bp, tile, 16);
            for (int r = 0; r < rows; ++r)
              for (int j = 0; j < cols; ++j) c[static_cast<std::ptrdiff_t>(r) * ldc + j] += tile[r * 16 + j];
          }
        }
      }
    }
  }
}

namespace {

struct Range {
  int lo;
  int hi;
};

inline Range valid_range(int n, int offset) { return {std::max(0, -offset), std::min(n, n - offset)}; }

// dst[x] += w * src[x] for x in [lo, hi)
inline void axpy_row(float w, const float* src, float* dst, int lo, int hi) {
  const __m256 wv = _mm256_set1_ps(w);
  int x = lo;
  for (; x + 8 <= hi; x += 8) {
    _mm256_storeu_ps(dst + x, _mm256_fmadd_ps(wv, _mm256_loadu_ps(src + x), _mm256_loadu_ps(dst + x)));
  }
  if (x < hi) {
    const __m256i m = tail_mask(hi - x);
    _mm256_maskstore_ps(dst + x, m, _mm256_fmadd_ps(wv, _mm256_maskload_ps(src + x, m), _mm256_maskload_ps(dst + x, m)));
  }
}

}  // namespace

void depthwise_forward(const DepthwiseGeometry& g, const float* in, const float* w, float* out) {
  const int H = g.height, W = g.width;
  std::memset(out, 0, sizeof(float) * static_cast<std::size_t>(H) * W);
  for (int i = 0; i < g.kernel; ++i) {
    const int oy = i * g.dilation - g.pad;
    const auto ry = valid_range(H, oy);
    for (int j = 0; j < g.kernel; ++j) {
      const int ox = j * g.dilation - g.pad;
      const auto rx = valid_range(W, ox);
      const float wv = w[i * g.kernel + j];
      for (int y = ry.lo; y < ry.hi; ++y) {
        axpy_row(wv, in + static_cast<std::ptrdiff_t>(y + oy) * W + ox, out + static_cast<std::ptrdiff_t>(y) * W, rx.lo,
                 rx.hi);
      }
    }
  }
}

void depthwise_backward_input(const DepthwiseGeometry& g, const float* dout, const float* w, float* din) {
  const int H = g.height, W = g.width;
  for (int i = 0; i < g.kernel; ++i) {
    const int oy = i * g.dilation - g.pad;
    const auto ry = valid_range(H, oy);
    for (int j = 0; j < g.kernel; ++j) {
      const int ox = j * g.dilation - g.pad;
      const auto rx = valid_range(W, ox);
      const float wv = w[i * g.kernel + j];
      for (int y = ry.lo; y < ry.hi; ++y) {
        axpy_row(wv, dout + static_cast<std::ptrdiff_t>(y) * W, din + static_cast<std::ptrdiff_t>(y + oy) * W + ox, rx.lo,
                 rx.hi);
      }
    }
  }
}

void depthwise_backward_weight(const DepthwiseGeometry& g, const float* dout, const float* in, float* dw) {
  const int H = g.height, W = g.width;
  for (int i = 0; i < g.kernel; ++i) {
    const int oy = i * g.dilation - g.pad;
    const auto ry = valid_range(H, oy);
    for (int j = 0; j < g.kernel; ++j) {
      const int ox = j * g.dilation - g.pad;
      const auto rx = valid_range(W, ox);
      __m256 acc = _mm256_setzero_ps();
      float tail = 0.0f;
      for (int y = ry.lo; y < ry.hi; ++y) {
        const float* d = dout + static_cast<std::ptrdiff_t>(y) * W;
        const float* s = in + static_cast<std::ptrdiff_t>(y + oy) * W + ox;
        int x = rx.lo;
        for (; x + 8 <= rx.hi; x += 8) acc = _mm256_fmadd_ps(_mm256_loadu_ps(d + x), _mm256_loadu_ps(s + x), acc);
        for (; x < rx.hi; ++x) tail += d[x] * s[x];
      }
      dw[i * g.kernel + j] += hsum(acc) + tail;
    }
  }
}

}  // namespace etide::kernels::avx2
