#include <algorithm>
#include <cstring>

#include "etide/kernels.hpp"

namespace etide::kernels::scalar {

template <class T>
void gemm(Trans ta, Trans tb, int M, int N, int K, const T* A, int lda, const T* B, int ldb, T* C, int ldc,
          bool accumulate) {
  if (!accumulate) {
    for (int i = 0; i < M; ++i) std::fill(C + static_cast<std::ptrdiff_t>(i) * ldc, C + static_cast<std::ptrdiff_t>(i) * ldc + N, T{0});
  }
  for (int i = 0; i < M; ++i) {
    T* c = C + static_cast<std::ptrdiff_t>(i) * ldc;
    for (int k = 0; k < K; ++k) {
      const T a = ta == Trans::No ? A[static_cast<std::ptrdiff_t>(i) * lda + k] : A[static_cast<std::ptrdiff_t>(k) * lda + i];
      if (a == T{0}) continue;
      if (tb == Trans::No) {
        const T* b = B + static_cast<std::ptrdiff_t>(k) * ldb;
        for (int j = 0; j < N; ++j) c[j] += a * b[j];
      } else {
        for (int j = 0; j < N; ++j) c[j] += a * B[static_cast<std::ptrdiff_t>(j) * ldb + k];
      }
    }
  }
}

namespace {

struct Span1 {
  int lo;
  int hi;
};

// Output indices o in [0, n) for which o + offset lands inside [0, n).
inline Span1 valid_range(int n, int offset) { return {std::max(0, -offset), std::min(n, n - offset)}; }

}  // namespace

template <class T>
void depthwise_forward(const DepthwiseGeometry& g, const T* in, const T* w, T* out) {
  const int H = g.height, W = g.width;
  std::fill(out, out + static_cast<std::ptrdiff_t>(H) * W, T{0});
  for (int i = 0; i < g.kernel; ++i) {
    const int oy = i * g.dilation - g.pad;
    const auto ry = valid_range(H, oy);
    for (int j = 0; j < g.kernel; ++j) {
      const int ox = j * g.dilation - g.pad;
      const auto rx = valid_range(W, ox);
      const T wv = w[i * g.kernel + j];
      for (int y = ry.lo; y < ry.hi; ++y) {
        T* o = out + static_cast<std::ptrdiff_t>(y) * W;
        const T* s = in + static_cast<std::ptrdiff_t>(y + oy) * W + ox;
        for (int x = rx.lo; x < rx.hi; ++x) o[x] += wv * s[x];
      }
    }
  }
}

template <class T>
void depthwise_backward_input(const DepthwiseGeometry& g, const T* dout, const T* w, T* din) {
  const int H = g.height, W = g.width;
  for (int i = 0; i < g.kernel; ++i) {
    const int oy = i * g.dilation - g.pad;
    const auto ry = valid_range(H, oy);
    for (int j = 0; j < g.kernel; ++j) {
      const int ox = j * g.dilation - g.pad;
      const auto rx = valid_range(W, ox);
      const T wv = w[i * g.kernel + j];
      for (int y = ry.lo; y < ry.hi; ++y) {
        const T* d = dout + static_cast<std::ptrdiff_t>(y) * W;
        T* s = din + static_cast<std::ptrdiff_t>(y + oy) * W + ox;
        for (int x = rx.lo; x < rx.hi; ++x) s[x] += wv * d[x];
      }
    }
  }
}

template <class T>
void depthwise_backward_weight(const DepthwiseGeometry& g, const T* dout, const T* in, T* dw) {
  const int H = g.height, W = g.width;
  for (int i = 0; i < g.kernel; ++i) {
    const int oy = i * g.dilation - g.pad;
    const auto ry = valid_range(H, oy);
    for (int j = 0; j < g.kernel; ++j) {
      const int ox = j * g.dilation - g.pad;
      const auto rx = valid_range(W, ox);
      T acc{0};
      for (int y = ry.lo; y < ry.hi; ++y) {
        const T* d = dout + static_cast<std::ptrdiff_t>(y) * W;
        const T* s = in + static_cast<std::ptrdiff_t>(y + oy) * W + ox;
        for (int x = rx.lo; x < rx.hi; ++x) acc += d[x] * s[x];
      }
      dw[i * g.kernel + j] += acc;
    }
  }
}

template void gemm<float>(Trans, Trans, int, int, int, const float*, int, const float*, int, float*, int, bool);
template void gemm<double>(Trans, Trans, int, int, int, const double*, int, const double*, int, double*, int, bool);
template void depthwise_forward<float>(const DepthwiseGeometry&, const float*, const float*, float*);
template void depthwise_forward<double>(const DepthwiseGeometry&, const double*, const double*, double*);
template void depthwise_backward_input<float>(const DepthwiseGeometry&, const float*, const float*, float*);
template void depthwise_backward_input<double>(const DepthwiseGeometry&, const double*, const double*, double*);
template void depthwise_backward_weight<float>(const DepthwiseGeometry&, const float*, const float*, float*);
template void depthwise_backward_weight<double>(const DepthwiseGeometry&, const double*, const double*, double*);

}  // namespace etide::kernels::scalar
