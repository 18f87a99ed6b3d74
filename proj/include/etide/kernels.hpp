#pragma once

// Arithmetic inner loops. Every kernel has a scalar reference version
// (templated, used for double precision) and, for float, SIMD variants
// chosen at runtime from what the CPU reports.

#include <cstdint>

namespace etide::kernels {

enum class Backend { Scalar, Avx2 };

const char* backend_name(Backend b);
bool backend_available(Backend b);
/// Best available backend on this CPU, unless ETIDE_KERNELS=scalar is set.
Backend detect_backend();
Backend active_backend();
/// Overrides the active float backend. Throws if `b` is not available.
void set_backend(Backend b);

enum class Trans { No, Yes };

/// C[M,N] = op(A)[M,K] * op(B)[K,N], or C += ... when `accumulate`.
/// Row-major with explicit leading dimensions (of the stored, untransposed arrays).
template <class T>
void gemm(Trans ta, Trans tb, int M, int N, int K, const T* A, int lda, const T* B, int ldb, T* C, int ldc,
          bool accumulate);

/// One channel plane of a stride-1 depthwise convolution with "same" output size.
/// out[y,x] = sum_{i,j} w[i,j] * in[y + i*dilation - pad, x + j*dilation - pad].
struct DepthwiseGeometry {
  int height;
  int width;
  int kernel;
  int dilation;
  int pad;
};

/// Overwrites `out`.
template <class T>
void depthwise_forward(const DepthwiseGeometry& g, const T* in, const T* w, T* out);
/// Accumulates into `din`.
template <class T>
void depthwise_backward_input(const DepthwiseGeometry& g, const T* dout, const T* w, T* din);
/// Accumulates into `dw`.
template <class T>
void depthwise_backward_weight(const DepthwiseGeometry& g, const T* dout, const T* in, T* dw);

// Explicit-backend entry points, used by the equivalence tests and the dispatcher.
namespace scalar {
template <class T>
void gemm(Trans ta, Trans tb, int M, int N, int K, const T* A, int lda, const T* B, int ldb, T* C, int ldc,
          bool accumulate);
template <class T>
void depthwise_forward(const DepthwiseGeometry& g, const T* in, const T* w, T* out);
template <class T>
void depthwise_backward_input(const DepthwiseGeometry& g, const T* dout, const T* w, T* din);
template <class T>
void depthwise_backward_weight(const DepthwiseGeometry& g, const T* dout, const T* in, T* dw);
}  // namespace scalar

namespace avx2 {
void gemm(Trans ta, Trans tb, int M, int N, int K, const float* A, int lda, const float* B, int ldb, float* C,
          int ldc, bool accumulate);
void depthwise_forward(const DepthwiseGeometry& g, const float* in, const float* w, float* out);
void depthwise_backward_input(const DepthwiseGeometry& g, const float* dout, const float* w, float* din);
void depthwise_backward_weight(const DepthwiseGeometry& g, const float* dout, const float* in, float* dw);
}  // namespace avx2

}  // namespace etide::kernels
