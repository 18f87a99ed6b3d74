#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "etide/kernels.hpp"

namespace etide::kernels {
namespace {

bool cpu_has_avx2() {
#if defined(ETIDE_HAVE_AVX2) && (defined(__x86_64__) || defined(__i386__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

std::atomic<Backend>& active() {
  static std::atomic<Backend> b{detect_backend()};
  return b;
}

}  // namespace

const char* backend_name(Backend b) {
  switch (b) {
    case Backend::Scalar: return "scalar";
    case Backend::Avx2: return "avx2";
  }
  return "unknown";
}

bool backend_available(Backend b) { return b == Backend::Scalar || (b == Backend::Avx2 && cpu_has_avx2()); }

Backend detect_backend() {
  if (const char* env = std::getenv("ETIDE_KERNELS"); env && std::string(env) == "scalar") return Backend::Scalar;
  return cpu_has_avx2() ? Backend::Avx2 : Backend::Scalar;
}

Backend active_backend() { return active().load(std::memory_order_relaxed); }

void set_backend(Backend b) {
  if (!backend_available(b)) throw std::runtime_error(std::string("kernel backend unavailable: ") + backend_name(b));
  active().store(b, std::memory_order_relaxed);
}

template <>
void gemm<double>(Trans ta, Trans tb, int M, int N, int K, const double* A, int lda, const double* B, int ldb, double* C,
                  int ldc, bool accumulate) {
  scalar::gemm(ta, tb, M, N, K, A, lda, B, ldb, C, ldc, accumulate);
}

template <>
void gemm<float>(Trans ta, Trans tb, int M, int N, int K, const float* A, int lda, const float* B, int ldb, float* C,
                 int ldc, bool accumulate) {
#ifdef ETIDE_HAVE_AVX2
  if (active_backend() == Backend::Avx2) return avx2::gemm(ta, tb, M, N, K, A, lda, B, ldb, C, ldc, accumulate);
#endif
  scalar::gemm(ta, tb, M, N, K, A, lda, B, ldb, C, ldc, accumulate);
}

template <>
void depthwise_forward<double>(const DepthwiseGeometry& g, const double* in, const double* w, double* out) {
  scalar::depthwise_forward(g, in, w, out);
}

template <>
void depthwise_forward<float>(const DepthwiseGeometry& g, const float* in, const float* w, float* out) {
#ifdef ETIDE_HAVE_AVX2
  if (active_backend() == Backend::Avx2) return avx2::depthwise_forward(g, in, w, out);
#endif
  scalar::depthwise_forward(g, in, w, out);
}

template <>
void depthwise_backward_input<double>(const DepthwiseGeometry& g, const double* dout, const double* w, double* din) {
  scalar::depthwise_backward_input(g, dout, w, din);
}

template <>
void depthwise_backward_input<float>(const DepthwiseGeometry& g, const float* dout, const float* w, float* din) {
#ifdef ETIDE_HAVE_AVX2
  if (active_backend() == Backend::Avx2) return avx2::depthwise_backward_input(g, dout, w, din);
#endif
  scalar::depthwise_backward_input(g, dout, w, din);
}

template <>
void depthwise_backward_weight<double>(const DepthwiseGeometry& g, const double* dout, const double* in, double* dw) {
  scalar::depthwise_backward_weight(g, dout, in, dw);
}

template <>
void depthwise_backward_weight<float>(const DepthwiseGeometry& g, const float* dout, const float* in, float* dw) {
#ifdef ETIDE_HAVE_AVX2
  if (active_backend() == Backend::Avx2) return avx2::depthwise_backward_weight(g, dout, in, dw);
#endif
  scalar::depthwise_backward_weight(g, dout, in, dw);
}

}  // namespace etide::kernels
