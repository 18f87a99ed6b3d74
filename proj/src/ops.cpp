#include "etide/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <string>

#include "etide/kernels.hpp"

namespace etide {
namespace {

using kernels::Trans;

template <class T>
void add_into(Tensor<T>& dst, std::span<const T> src) {
  auto d = dst.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += src[i];
}

std::string dim_msg(const char* op, const char* what, std::int64_t got, std::int64_t want) {
  return std::string(op) + ": " + what + " is " + std::to_string(got) + ", expected " + std::to_string(want);
}

template <class T>
void im2col(const T* x, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* col) {
  const std::ptrdiff_t plane = static_cast<std::ptrdiff_t>(Ho) * Wo;
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        T* dst = col + ((static_cast<std::ptrdiff_t>(c) * k + ki) * k + kj) * plane;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ki;
          T* row = dst + static_cast<std::ptrdiff_t>(oy) * Wo;
          if (iy < 0 || iy >= H) {
            std::fill(row, row + Wo, T{0});
            continue;
          }
          const T* src = x + (static_cast<std::ptrdiff_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kj;
            row[ox] = (ix >= 0 && ix < W) ? src[ix] : T{0};
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* col, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* x) {
  const std::ptrdiff_t plane = static_cast<std::ptrdiff_t>(Ho) * Wo;
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const T* src = col + ((static_cast<std::ptrdiff_t>(c) * k + ki) * k + kj) * plane;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= H) continue;
          T* dst = x + (static_cast<std::ptrdiff_t>(c) * H + iy) * W;
          const T* row = src + static_cast<std::ptrdiff_t>(oy) * Wo;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kj;
            if (ix >= 0 && ix < W) dst[ix] += row[ox];
          }
        }
      }
    }
  }
}

struct ConvGeometry {
  int B, Cin, H, W, Cout, k, stride, pad, Ho, Wo;
  int K() const { return Cin * k * k; }
  int HWo() const { return Ho * Wo; }
  bool direct() const { return k == 1 && stride == 1 && pad == 0; }
};

template <class T>
ConvGeometry conv_geometry(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b, int stride, int pad) {
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(w.shape(), 4, "conv2d weight");
  ConvGeometry g{};
  g.B = static_cast<int>(x.dim(0));
  g.Cin = static_cast<int>(x.dim(1));
  g.H = static_cast<int>(x.dim(2));
  g.W = static_cast<int>(x.dim(3));
  g.Cout = static_cast<int>(w.dim(0));
  g.k = static_cast<int>(w.dim(2));
  g.stride = stride;
  g.pad = pad;
  if (w.dim(1) != g.Cin) throw ShapeError(dim_msg("conv2d", "weight dimension 1 (input channels)", w.dim(1), g.Cin));
  if (w.dim(3) != g.k) throw ShapeError(dim_msg("conv2d", "weight dimension 3 (kernel width)", w.dim(3), g.k));
  if (g.k % 2 == 0) throw ShapeError("conv2d: weight dimension 2 (kernel size " + std::to_string(g.k) + ") must be odd");
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (pad < 0) throw ShapeError("conv2d: padding must be >= 0");
  if (g.H + 2 * pad < g.k) throw ShapeError(dim_msg("conv2d", "input dimension 2 (height) plus padding", g.H + 2 * pad, g.k));
  if (g.W + 2 * pad < g.k) throw ShapeError(dim_msg("conv2d", "input dimension 3 (width) plus padding", g.W + 2 * pad, g.k));
  if (b) {
    require_rank(b->shape(), 1, "conv2d bias");
    if (b->dim(0) != g.Cout) throw ShapeError(dim_msg("conv2d", "bias dimension 0", b->dim(0), g.Cout));
  }
  g.Ho = (g.H + 2 * pad - g.k) / stride + 1;
  g.Wo = (g.W + 2 * pad - g.k) / stride + 1;
  return g;
}

template <class T>
T sigmoid_scalar(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

}  // namespace

// ---- convolutions ---------------------------------------------------------

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const std::optional<Var<T>>& bias, int stride, int padding) {
  const auto& xv = x.value();
  const auto& wv = weight.value();
  const auto g = conv_geometry(xv, wv, bias ? &bias->value() : nullptr, stride, padding);
  const int K = g.K(), HWo = g.HWo();
  const std::ptrdiff_t in_stride = static_cast<std::ptrdiff_t>(g.Cin) * g.H * g.W;
  const std::ptrdiff_t out_stride = static_cast<std::ptrdiff_t>(g.Cout) * HWo;

  Tensor<T> out(Shape{g.B, g.Cout, g.Ho, g.Wo});
  std::vector<T> col(g.direct() ? 0 : static_cast<std::size_t>(K) * HWo);
  for (int b = 0; b < g.B; ++b) {
    const T* xb = xv.ptr() + b * in_stride;
    const T* src = xb;
    if (!g.direct()) {
      im2col(xb, g.Cin, g.H, g.W, g.k, g.stride, g.pad, g.Ho, g.Wo, col.data());
      src = col.data();
    }
    T* ob = out.ptr() + b * out_stride;
    kernels::gemm<T>(Trans::No, Trans::No, g.Cout, HWo, K, wv.ptr(), K, src, HWo, ob, HWo, false);
    if (bias) {
      const T* bv = bias->value().ptr();
      for (int c = 0; c < g.Cout; ++c) {
        T* row = ob + static_cast<std::ptrdiff_t>(c) * HWo;
        for (int i = 0; i < HWo; ++i) row[i] += bv[c];
      }
    }
  }

  std::vector<Var<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  auto fn = [x, weight, bias, g, in_stride, out_stride](Graph<T>& gr, const Tensor<T>& gout) {
    const int K = g.K(), HWo = g.HWo();
    const auto& xv = gr.value(x);
    const auto& wv = gr.value(weight);
    const bool need_x = gr.requires_grad(x);
    const bool need_w = gr.requires_grad(weight);
    const bool need_b = bias && gr.requires_grad(*bias);
    T* dx = need_x ? gr.grad(x).ptr() : nullptr;
    T* dw = need_w ? gr.grad(weight).ptr() : nullptr;
    T* db = need_b ? gr.grad(*bias).ptr() : nullptr;
    std::vector<T> col, dcol;
    if (!g.direct()) {
      if (need_w) col.resize(static_cast<std::size_t>(K) * HWo);
      if (need_x) dcol.resize(static_cast<std::size_t>(K) * HWo);
    }
    for (int b = 0; b < g.B; ++b) {
      const T* go = gout.ptr() + b * out_stride;
      const T* xb = xv.ptr() + b * in_stride;
      if (need_w) {
        const T* src = xb;
        if (!g.direct()) {
          im2col(xb, g.Cin, g.H, g.W, g.k, g.stride, g.pad, g.Ho, g.Wo, col.data());
          src = col.data();
        }
        kernels::gemm<T>(Trans::No, Trans::Yes, g.Cout, K, HWo, go, HWo, src, HWo, dw, K, true);
      }
      if (need_x) {
        T* dxb = dx + b * in_stride;
        if (g.direct()) {
          kernels::gemm<T>(Trans::Yes, Trans::No, K, HWo, g.Cout, wv.ptr(), K, go, HWo, dxb, HWo, true);
        } else {
          kernels::gemm<T>(Trans::Yes, Trans::No, K, HWo, g.Cout, wv.ptr(), K, go, HWo, dcol.data(), HWo, false);
          col2im_add(dcol.data(), g.Cin, g.H, g.W, g.k, g.stride, g.pad, g.Ho, g.Wo, dxb);
        }
      }
      if (need_b) {
        for (int c = 0; c < g.Cout; ++c) {
          const T* row = go + static_cast<std::ptrdiff_t>(c) * HWo;
          T s{0};
          for (int i = 0; i < HWo; ++i) s += row[i];
          db[c] += s;
        }
      }
    }
  };
  return x.graph().record(std::move(out), inputs, std::move(fn));
}

template <class T>
Var<T> conv2d_depthwise(const Var<T>& x, const Var<T>& weight, int dilation, int padding) {
  const auto& xv = x.value();
  const auto& wv = weight.value();
  require_rank(xv.shape(), 4, "conv2d_depthwise input");
  require_rank(wv.shape(), 4, "conv2d_depthwise weight");
  const int B = static_cast<int>(xv.dim(0)), C = static_cast<int>(xv.dim(1));
  const int H = static_cast<int>(xv.dim(2)), W = static_cast<int>(xv.dim(3));
  const int k = static_cast<int>(wv.dim(2));
  if (wv.dim(0) != C) throw ShapeError(dim_msg("conv2d_depthwise", "weight dimension 0 (channels)", wv.dim(0), C));
  if (wv.dim(1) != 1) throw ShapeError(dim_msg("conv2d_depthwise", "weight dimension 1", wv.dim(1), 1));
  if (wv.dim(3) != k) throw ShapeError(dim_msg("conv2d_depthwise", "weight dimension 3 (kernel width)", wv.dim(3), k));
  if (k % 2 == 0) throw ShapeError("conv2d_depthwise: kernel size " + std::to_string(k) + " must be odd");
  if (dilation < 1) throw ShapeError("conv2d_depthwise: dilation must be >= 1, got " + std::to_string(dilation));
  if (padding != dilation * (k - 1) / 2)
    throw ShapeError(dim_msg("conv2d_depthwise", "padding", padding, dilation * (k - 1) / 2));

  const kernels::DepthwiseGeometry geo{H, W, k, dilation, padding};
  const std::ptrdiff_t plane = static_cast<std::ptrdiff_t>(H) * W;
  Tensor<T> out(xv.shape());
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const std::ptrdiff_t off = (static_cast<std::ptrdiff_t>(b) * C + c) * plane;
      kernels::depthwise_forward<T>(geo, xv.ptr() + off, wv.ptr() + static_cast<std::ptrdiff_t>(c) * k * k, out.ptr() + off);
    }

  auto fn = [x, weight, geo, B, C, k, plane](Graph<T>& g, const Tensor<T>& gout) {
    const bool need_x = g.requires_grad(x), need_w = g.requires_grad(weight);
    const auto& xv = g.value(x);
    const auto& wv = g.value(weight);
    T* dx = need_x ? g.grad(x).ptr() : nullptr;
    T* dw = need_w ? g.grad(weight).ptr() : nullptr;
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const std::ptrdiff_t off = (static_cast<std::ptrdiff_t>(b) * C + c) * plane;
        const std::ptrdiff_t woff = static_cast<std::ptrdiff_t>(c) * k * k;
        if (need_x) kernels::depthwise_backward_input<T>(geo, gout.ptr() + off, wv.ptr() + woff, dx + off);
        if (need_w) kernels::depthwise_backward_weight<T>(geo, gout.ptr() + off, xv.ptr() + off, dw + woff);
      }
  };
  return x.graph().record(std::move(out), {x, weight}, std::move(fn));
}

template <class T>
Var<T> conv2d_pointwise(const Var<T>& x, const Var<T>& weight, const std::optional<Var<T>>& bias) {
  require_rank(weight.value().shape(), 4, "conv2d_pointwise weight");
  if (weight.value().dim(2) != 1 || weight.value().dim(3) != 1)
    throw ShapeError(dim_msg("conv2d_pointwise", "weight dimension 2 (kernel size)", weight.value().dim(2), 1));
  return conv2d(x, weight, bias, 1, 0);
}

// ---- normalization and activations ---------------------------------------

template <class T>
Var<T> layer_norm_channels(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps) {
  const auto& xv = x.value();
  require_rank(xv.shape(), 4, "layer_norm_channels input");
  const int B = static_cast<int>(xv.dim(0)), C = static_cast<int>(xv.dim(1));
  const std::ptrdiff_t HW = xv.dim(2) * xv.dim(3);
  if (C < 1) throw ShapeError("layer_norm_channels: input dimension 1 (channels) must be >= 1");
  require_same_shape(gamma.value().shape(), Shape{C}, "layer_norm_channels gamma");
  require_same_shape(beta.value().shape(), Shape{C}, "layer_norm_channels beta");

  auto xhat = std::make_shared<Tensor<T>>(xv.shape());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(B * HW));
  Tensor<T> out(xv.shape());
  std::vector<T> mu(static_cast<std::size_t>(HW)), var(static_cast<std::size_t>(HW));
  const T* gv = gamma.value().ptr();
  const T* bv = beta.value().ptr();
  const T invC = T{1} / static_cast<T>(C);
  for (int b = 0; b < B; ++b) {
    const T* xb = xv.ptr() + static_cast<std::ptrdiff_t>(b) * C * HW;
    std::fill(mu.begin(), mu.end(), T{0});
    std::fill(var.begin(), var.end(), T{0});
    for (int c = 0; c < C; ++c)
      for (std::ptrdiff_t i = 0; i < HW; ++i) mu[i] += xb[c * HW + i];
    for (auto& m : mu) m *= invC;
    for (int c = 0; c < C; ++c)
      for (std::ptrdiff_t i = 0; i < HW; ++i) {
        const T d = xb[c * HW + i] - mu[i];
        var[i] += d * d;
      }
    T* is = inv_std->data() + b * HW;
    for (std::ptrdiff_t i = 0; i < HW; ++i) is[i] = T{1} / std::sqrt(var[i] * invC + static_cast<T>(eps));
    T* xh = xhat->ptr() + static_cast<std::ptrdiff_t>(b) * C * HW;
    T* ob = out.ptr() + static_cast<std::ptrdiff_t>(b) * C * HW;
    for (int c = 0; c < C; ++c)
      for (std::ptrdiff_t i = 0; i < HW; ++i) {
        const T h = (xb[c * HW + i] - mu[i]) * is[i];
        xh[c * HW + i] = h;
        ob[c * HW + i] = gv[c] * h + bv[c];
      }
  }

  auto fn = [x, gamma, beta, xhat, inv_std, B, C, HW](Graph<T>& g, const Tensor<T>& gout) {
    const bool need_x = g.requires_grad(x), need_g = g.requires_grad(gamma), need_b = g.requires_grad(beta);
    const T* gv = g.value(gamma).ptr();
    T* dgam = need_g ? g.grad(gamma).ptr() : nullptr;
    T* dbet = need_b ? g.grad(beta).ptr() : nullptr;
    T* dx = need_x ? g.grad(x).ptr() : nullptr;
    std::vector<T> m1(static_cast<std::size_t>(HW)), m2(static_cast<std::size_t>(HW));
    const T invC = T{1} / static_cast<T>(C);
    for (int b = 0; b < B; ++b) {
      const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(b) * C * HW;
      const T* go = gout.ptr() + off;
      const T* xh = xhat->ptr() + off;
      std::fill(m1.begin(), m1.end(), T{0});
      std::fill(m2.begin(), m2.end(), T{0});
      for (int c = 0; c < C; ++c) {
        T sg{0}, sb{0};
        for (std::ptrdiff_t i = 0; i < HW; ++i) {
          const T d = go[c * HW + i];
          const T h = xh[c * HW + i];
          sg += d * h;
          sb += d;
          const T dh = d * gv[c];
          m1[i] += dh;
          m2[i] += dh * h;
        }
        if (dgam) dgam[c] += sg;
        if (dbet) dbet[c] += sb;
      }
      if (!dx) continue;
      const T* is = inv_std->data() + b * HW;
      for (int c = 0; c < C; ++c)
        for (std::ptrdiff_t i = 0; i < HW; ++i) {
          const T dh = go[c * HW + i] * gv[c];
          dx[off + c * HW + i] += is[i] * (dh - m1[i] * invC - xh[c * HW + i] * m2[i] * invC);
        }
    }
  };
  return x.graph().record(std::move(out), {x, gamma, beta}, std::move(fn));
}

template <class T>
Var<T> relu(const Var<T>& x) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T{0} ? xv[i] : T{0};
  auto fn = [x](Graph<T>& g, const Tensor<T>& gout) {
    const auto& xv = g.value(x);
    auto& dx = g.grad(x);
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (xv[i] > T{0}) dx[i] += gout[i];
  };
  return x.graph().record(std::move(out), {x}, std::move(fn));
}

template <class T>
Var<T> gelu(const Var<T>& x) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  const T inv_sqrt2 = static_cast<T>(1.0 / std::numbers::sqrt2);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * T{0.5} * (T{1} + std::erf(xv[i] * inv_sqrt2));
  auto fn = [x](Graph<T>& g, const Tensor<T>& gout) {
    const auto& xv = g.value(x);
    auto& dx = g.grad(x);
    const T inv_sqrt2 = static_cast<T>(1.0 / std::numbers::sqrt2);
    const T inv_sqrt2pi = static_cast<T>(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
    for (std::size_t i = 0; i < dx.size(); ++i) {
      const T v = xv[i];
      const T cdf = T{0.5} * (T{1} + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T{-0.5} * v * v);
      dx[i] += gout[i] * (cdf + v * pdf);
    }
  };
  return x.graph().record(std::move(out), {x}, std::move(fn));
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(xv[i]);
  auto y = std::make_shared<Tensor<T>>(out);
  auto fn = [x, y](Graph<T>& g, const Tensor<T>& gout) {
    auto& dx = g.grad(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += gout[i] * (*y)[i] * (T{1} - (*y)[i]);
  };
  return x.graph().record(std::move(out), {x}, std::move(fn));
}

template <class T>
Var<T> softmax_temp(const Var<T>& v, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("softmax_temp: tau must be > 0");
  const auto& vv = v.value();
  if (vv.rank() < 1 || vv.dim(-1) < 1) throw ShapeError("softmax_temp: input needs a non-empty last dimension");
  const std::ptrdiff_t N = vv.dim(-1);
  const std::ptrdiff_t rows = static_cast<std::ptrdiff_t>(vv.size()) / N;
  const T inv_tau = static_cast<T>(1.0 / tau);
  Tensor<T> out(vv.shape());
  for (std::ptrdiff_t r = 0; r < rows; ++r) {
    const T* src = vv.ptr() + r * N;
    T* dst = out.ptr() + r * N;
    const T mx = *std::max_element(src, src + N);
    T s{0};
    for (std::ptrdiff_t i = 0; i < N; ++i) {
      dst[i] = std::exp((src[i] - mx) * inv_tau);
      s += dst[i];
    }
    for (std::ptrdiff_t i = 0; i < N; ++i) dst[i] /= s;
  }
  auto y = std::make_shared<Tensor<T>>(out);
  auto fn = [v, y, N, rows, inv_tau](Graph<T>& g, const Tensor<T>& gout) {
    auto& dv = g.grad(v);
    for (std::ptrdiff_t r = 0; r < rows; ++r) {
      const T* yr = y->ptr() + r * N;
      const T* gr = gout.ptr() + r * N;
      T dot{0};
      for (std::ptrdiff_t i = 0; i < N; ++i) dot += gr[i] * yr[i];
      T* d = dv.ptr() + r * N;
      for (std::ptrdiff_t i = 0; i < N; ++i) d[i] += inv_tau * yr[i] * (gr[i] - dot);
    }
  };
  return v.graph().record(std::move(out), {v}, std::move(fn));
}

template <class T>
Var<T> kl_div(const Var<T>& p, const Var<T>& q, double eps) {
  const auto& pv = p.value();
  const auto& qv = q.value();
  require_same_shape(pv.shape(), qv.shape(), "kl_div");
  const T e = static_cast<T>(eps);
  T total{0};
  for (std::size_t i = 0; i < pv.size(); ++i) total += pv[i] * (std::log(pv[i] + e) - std::log(qv[i] + e));
  auto fn = [p, q, e](Graph<T>& g, const Tensor<T>& gout) {
    const auto& pv = g.value(p);
    const auto& qv = g.value(q);
    const T go = gout[0];
    if (g.requires_grad(p)) {
      auto& dp = g.grad(p);
      for (std::size_t i = 0; i < dp.size(); ++i)
        dp[i] += go * (std::log(pv[i] + e) - std::log(qv[i] + e) + pv[i] / (pv[i] + e));
    }
    if (g.requires_grad(q)) {
      auto& dq = g.grad(q);
      for (std::size_t i = 0; i < dq.size(); ++i) dq[i] -= go * pv[i] / (qv[i] + e);
    }
  };
  return p.graph().record(Tensor<T>::scalar(total), {p, q}, std::move(fn));
}

// ---- structural ------------------------------------------------------------

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  auto fn = [x](Graph<T>& g, const Tensor<T>& gout) { add_into(g.grad(x), gout.data()); };
  return x.graph().record(std::move(out), {x}, std::move(fn));
}

template <class T>
Var<T> upsample_nearest2x(const Var<T>& x) {
  const auto& xv = x.value();
  require_rank(xv.shape(), 4, "upsample_nearest2x input");
  const std::ptrdiff_t planes = xv.dim(0) * xv.dim(1);
  const std::ptrdiff_t H = xv.dim(2), W = xv.dim(3);
  Tensor<T> out(Shape{xv.dim(0), xv.dim(1), 2 * H, 2 * W});
  for (std::ptrdiff_t p = 0; p < planes; ++p) {
    const T* src = xv.ptr() + p * H * W;
    T* dst = out.ptr() + p * 4 * H * W;
    for (std::ptrdiff_t y = 0; y < H; ++y) {
      T* r0 = dst + (2 * y) * 2 * W;
      for (std::ptrdiff_t x2 = 0; x2 < W; ++x2) r0[2 * x2] = r0[2 * x2 + 1] = src[y * W + x2];
      std::copy(r0, r0 + 2 * W, r0 + 2 * W);
    }
  }
  auto fn = [x, planes, H, W](Graph<T>& g, const Tensor<T>& gout) {
    T* dx = g.grad(x).ptr();
    for (std::ptrdiff_t p = 0; p < planes; ++p) {
      const T* src = gout.ptr() + p * 4 * H * W;
      for (std::ptrdiff_t y = 0; y < H; ++y) {
        const T* r0 = src + (2 * y) * 2 * W;
        const T* r1 = r0 + 2 * W;
        for (std::ptrdiff_t x2 = 0; x2 < W; ++x2)
          dx[p * H * W + y * W + x2] += r0[2 * x2] + r0[2 * x2 + 1] + r1[2 * x2] + r1[2 * x2 + 1];
      }
    }
  };
  return x.graph().record(std::move(out), {x}, std::move(fn));
}

template <class T>
Var<T> time_diff(const Var<T>& x) {
  const auto& xv = x.value();
  if (xv.rank() < 2) throw ShapeError("time_diff: input rank must be >= 2, got " + shape_str(xv.shape()));
  const std::ptrdiff_t B = xv.dim(0), Tn = xv.dim(1);
  if (Tn < 2) throw ShapeError(dim_msg("time_diff", "dimension 1 (time)", Tn, 2));
  const std::ptrdiff_t F = static_cast<std::ptrdiff_t>(xv.size()) / (B * Tn);
  Shape shape = xv.shape();
  shape[1] = Tn - 1;
  Tensor<T> out(shape);
  for (std::ptrdiff_t b = 0; b < B; ++b)
    for (std::ptrdiff_t t = 0; t + 1 < Tn; ++t) {
      const T* a = xv.ptr() + (b * Tn + t) * F;
      T* o = out.ptr() + (b * (Tn - 1) + t) * F;
      for (std::ptrdiff_t i = 0; i < F; ++i) o[i] = a[F + i] - a[i];
    }
  auto fn = [x, B, Tn, F](Graph<T>& g, const Tensor<T>& gout) {
    T* dx = g.grad(x).ptr();
    for (std::ptrdiff_t b = 0; b < B; ++b)
      for (std::ptrdiff_t t = 0; t + 1 < Tn; ++t) {
        const T* go = gout.ptr() + (b * (Tn - 1) + t) * F;
        T* d = dx + (b * Tn + t) * F;
        for (std::ptrdiff_t i = 0; i < F; ++i) {
          d[F + i] += go[i];
          d[i] -= go[i];
        }
      }
  };
  return x.graph().record(std::move(out), {x}, std::move(fn));
}

// ---- arithmetic ------------------------------------------------------------

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value().shape(), b.value().shape(), "add");
  Tensor<T> out = a.value();
  add_into(out, b.value().data());
  auto fn = [a, b](Graph<T>& g, const Tensor<T>& gout) {
    if (g.requires_grad(a)) add_into(g.grad(a), gout.data());
    if (g.requires_grad(b)) add_into(g.grad(b), gout.data());
  };
  return a.graph().record(std::move(out), {a, b}, std::move(fn));
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value().shape(), b.value().shape(), "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  auto fn = [a, b](Graph<T>& g, const Tensor<T>& gout) {
    const auto& av = g.value(a);
    const auto& bv = g.value(b);
    if (g.requires_grad(a)) {
      auto& da = g.grad(a);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += gout[i] * bv[i];
    }
    if (g.requires_grad(b)) {
      auto& db = g.grad(b);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += gout[i] * av[i];
    }
  };
  return a.graph().record(std::move(out), {a, b}, std::move(fn));
}

template <class T>
Var<T> add_scalar(const Var<T>& a, double s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v += static_cast<T>(s);
  auto fn = [a](Graph<T>& g, const Tensor<T>& gout) { add_into(g.grad(a), gout.data()); };
  return a.graph().record(std::move(out), {a}, std::move(fn));
}

template <class T>
Var<T> scale(const Var<T>& a, double s) {
  const T k = static_cast<T>(s);
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= k;
  auto fn = [a, k](Graph<T>& g, const Tensor<T>& gout) {
    auto& da = g.grad(a);
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += k * gout[i];
  };
  return a.graph().record(std::move(out), {a}, std::move(fn));
}

template <class T>
Var<T> mul_channel(const Var<T>& x, const Var<T>& gate) {
  const auto& xv = x.value();
  const auto& gv = gate.value();
  if (xv.rank() < 2) throw ShapeError("mul_channel: input rank must be >= 2");
  require_same_shape(gv.shape(), Shape{xv.dim(0), xv.dim(1)}, "mul_channel gate");
  const std::ptrdiff_t rows = xv.dim(0) * xv.dim(1);
  const std::ptrdiff_t inner = static_cast<std::ptrdiff_t>(xv.size()) / std::max<std::ptrdiff_t>(rows, 1);
  Tensor<T> out = xv;
  for (std::ptrdiff_t r = 0; r < rows; ++r) {
    T* o = out.ptr() + r * inner;
    for (std::ptrdiff_t i = 0; i < inner; ++i) o[i] *= gv[static_cast<std::size_t>(r)];
  }
  auto fn = [x, gate, rows, inner](Graph<T>& g, const Tensor<T>& gout) {
    const auto& xv = g.value(x);
    const auto& gv = g.value(gate);
    const bool need_x = g.requires_grad(x), need_g = g.requires_grad(gate);
    T* dx = need_x ? g.grad(x).ptr() : nullptr;
    T* dg = need_g ? g.grad(gate).ptr() : nullptr;
    for (std::ptrdiff_t r = 0; r < rows; ++r) {
      const T* go = gout.ptr() + r * inner;
      if (dx) {
        for (std::ptrdiff_t i = 0; i < inner; ++i) dx[r * inner + i] += go[i] * gv[static_cast<std::size_t>(r)];
      }
      if (dg) {
        T s{0};
        const T* xr = xv.ptr() + r * inner;
        for (std::ptrdiff_t i = 0; i < inner; ++i) s += go[i] * xr[i];
        dg[r] += s;
      }
    }
  };
  return x.graph().record(std::move(out), {x, gate}, std::move(fn));
}

template <class T>
Var<T> scale_samples(const Var<T>& x, std::span<const T> scales) {
  const auto& xv = x.value();
  if (xv.rank() < 1 || static_cast<std::size_t>(xv.dim(0)) != scales.size())
    throw ShapeError(dim_msg("scale_samples", "input dimension 0 (batch)", xv.rank() ? xv.dim(0) : 0,
                             static_cast<std::int64_t>(scales.size())));
  const std::ptrdiff_t inner = scales.empty() ? 0 : static_cast<std::ptrdiff_t>(xv.size() / scales.size());
  std::vector<T> s(scales.begin(), scales.end());
  Tensor<T> out = xv;
  for (std::size_t b = 0; b < s.size(); ++b)
    for (std::ptrdiff_t i = 0; i < inner; ++i) out[b * inner + i] *= s[b];
  auto fn = [x, s, inner](Graph<T>& g, const Tensor<T>& gout) {
    auto& dx = g.grad(x);
    for (std::size_t b = 0; b < s.size(); ++b) {
      if (s[b] == T{0}) continue;
      for (std::ptrdiff_t i = 0; i < inner; ++i) dx[b * inner + i] += s[b] * gout[b * inner + i];
    }
  };
  return x.graph().record(std::move(out), {x}, std::move(fn));
}

template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const std::optional<Var<T>>& bias) {
  const auto& xv = x.value();
  const auto& wv = weight.value();
  require_rank(xv.shape(), 2, "linear input");
  require_rank(wv.shape(), 2, "linear weight");
  const int B = static_cast<int>(xv.dim(0)), In = static_cast<int>(xv.dim(1)), Out = static_cast<int>(wv.dim(0));
  if (wv.dim(1) != In) throw ShapeError(dim_msg("linear", "weight dimension 1 (input features)", wv.dim(1), In));
  if (bias) require_same_shape(bias->value().shape(), Shape{Out}, "linear bias");
  Tensor<T> out(Shape{B, Out});
  kernels::gemm<T>(Trans::No, Trans::Yes, B, Out, In, xv.ptr(), In, wv.ptr(), In, out.ptr(), Out, false);
  if (bias) {
    const T* bv = bias->value().ptr();
    for (int b = 0; b < B; ++b)
      for (int o = 0; o < Out; ++o) out[static_cast<std::size_t>(b) * Out + o] += bv[o];
  }
  std::vector<Var<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  auto fn = [x, weight, bias, B, In, Out](Graph<T>& g, const Tensor<T>& gout) {
    if (g.requires_grad(x))
      kernels::gemm<T>(Trans::No, Trans::No, B, In, Out, gout.ptr(), Out, g.value(weight).ptr(), In, g.grad(x).ptr(), In,
                       true);
    if (g.requires_grad(weight))
      kernels::gemm<T>(Trans::Yes, Trans::No, Out, In, B, gout.ptr(), Out, g.value(x).ptr(), In, g.grad(weight).ptr(), In,
                       true);
    if (bias && g.requires_grad(*bias)) {
      T* db = g.grad(*bias).ptr();
      for (int b = 0; b < B; ++b)
        for (int o = 0; o < Out; ++o) db[o] += gout[static_cast<std::size_t>(b) * Out + o];
    }
  };
  return x.graph().record(std::move(out), inputs, std::move(fn));
}

template <class T>
Var<T> sum(const Var<T>& x) {
  T s{0};
  for (auto v : x.value().data()) s += v;
  auto fn = [x](Graph<T>& g, const Tensor<T>& gout) {
    for (auto& d : g.grad(x).data()) d += gout[0];
  };
  return x.graph().record(Tensor<T>::scalar(s), {x}, std::move(fn));
}

template <class T>
Var<T> mean(const Var<T>& x) {
  const auto n = x.value().size();
  if (n == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

// ---- sparsity-aware pooling ------------------------------------------------

template <class T>
T quantile_nearest_rank(std::span<const T> values, double q) {
  if (values.empty()) throw std::invalid_argument("quantile_nearest_rank: empty input");
  if (!(q > 0.0 && q <= 1.0)) throw std::invalid_argument("quantile_nearest_rank: q must be in (0, 1]");
  const auto n = static_cast<double>(values.size());
  double rank = q * n;
  // q*N that is an integer up to rounding must not be pushed to the next rank.
  const double nearest = std::round(rank);
  if (std::abs(rank - nearest) < 1e-9 * n) rank = nearest;
  auto idx = static_cast<std::ptrdiff_t>(std::ceil(rank)) - 1;
  idx = std::clamp<std::ptrdiff_t>(idx, 0, static_cast<std::ptrdiff_t>(values.size()) - 1);
  std::vector<T> sorted(values.begin(), values.end());
  std::nth_element(sorted.begin(), sorted.begin() + idx, sorted.end());
  return sorted[static_cast<std::size_t>(idx)];
}

template <class T>
ActivityMask<T> activity_mask(const Tensor<T>& u, double q) {
  require_rank(u.shape(), 4, "activity_mask input");
  const std::ptrdiff_t B = u.dim(0), D = u.dim(1), HW = u.dim(2) * u.dim(3);
  if (D < 1 || HW < 1) throw ShapeError("activity_mask: empty channel or spatial extent in " + shape_str(u.shape()));
  ActivityMask<T> r;
  r.mask.assign(static_cast<std::size_t>(B * HW), 0);
  r.threshold.resize(static_cast<std::size_t>(B));
  r.count.assign(static_cast<std::size_t>(B), 0);
  std::vector<T> m(static_cast<std::size_t>(HW));
  const T invD = T{1} / static_cast<T>(D);
  for (std::ptrdiff_t b = 0; b < B; ++b) {
    std::fill(m.begin(), m.end(), T{0});
    const T* ub = u.ptr() + b * D * HW;
    for (std::ptrdiff_t d = 0; d < D; ++d)
      for (std::ptrdiff_t i = 0; i < HW; ++i) m[i] += std::abs(ub[d * HW + i]);
    for (auto& v : m) v *= invD;
    const T delta = quantile_nearest_rank<T>(m, q);
    r.threshold[b] = delta;
    for (std::ptrdiff_t i = 0; i < HW; ++i) {
      if (m[i] >= delta) {
        r.mask[b * HW + i] = 1;
        ++r.count[b];
      }
    }
  }
  return r;
}

namespace {
thread_local MaskFreeze* active_freeze = nullptr;
}  // namespace

MaskFreeze::MaskFreeze() : previous_(active_freeze) { active_freeze = this; }
MaskFreeze::~MaskFreeze() { active_freeze = previous_; }

MaskFreeze* MaskFreeze::current() { return active_freeze; }

void MaskFreeze::begin_pass() {
  replaying_ = !masks_.empty();
  cursor_ = 0;
}

void MaskFreeze::record(const std::vector<std::uint8_t>& mask, const std::vector<std::int64_t>& count) {
  masks_.push_back(mask);
  counts_.push_back(count);
}

std::pair<const std::vector<std::uint8_t>*, const std::vector<std::int64_t>*> MaskFreeze::replay(
    std::size_t elements) {
  if (cursor_ >= masks_.size() || masks_[cursor_].size() != elements)
    throw std::logic_error("MaskFreeze: replayed pass does not match the recorded one");
  const std::size_t i = cursor_++;
  return {&masks_[i], &counts_[i]};
}

template <class T>
Var<T> activity_masked_pool(const Var<T>& u, double q, bool masked) {
  const auto& uv = u.value();
  require_rank(uv.shape(), 4, "activity_masked_pool input");
  const std::ptrdiff_t B = uv.dim(0), D = uv.dim(1), HW = uv.dim(2) * uv.dim(3);
  auto sel = std::make_shared<ActivityMask<T>>();
  if (masked && active_freeze && active_freeze->replaying()) {
    auto [mask, count] = active_freeze->replay(static_cast<std::size_t>(B * HW));
    sel->mask = *mask;
    sel->count = *count;
  } else if (masked) {
    *sel = activity_mask(uv, q);
    if (active_freeze) active_freeze->record(sel->mask, sel->count);
  } else {
    sel->mask.assign(static_cast<std::size_t>(B * HW), 1);
    sel->count.assign(static_cast<std::size_t>(B), HW);
  }
  const T eps = static_cast<T>(kLogEps);
  Tensor<T> out(Shape{B, D});
  for (std::ptrdiff_t b = 0; b < B; ++b) {
    const std::uint8_t* mk = sel->mask.data() + b * HW;
    const T denom = static_cast<T>(sel->count[b]) + eps;
    for (std::ptrdiff_t d = 0; d < D; ++d) {
      const T* row = uv.ptr() + (b * D + d) * HW;
      T s{0};
      for (std::ptrdiff_t i = 0; i < HW; ++i)
        if (mk[i]) s += row[i];
      out[static_cast<std::size_t>(b * D + d)] = s / denom;
    }
  }
  auto fn = [u, sel, B, D, HW, eps](Graph<T>& g, const Tensor<T>& gout) {
    T* du = g.grad(u).ptr();
    for (std::ptrdiff_t b = 0; b < B; ++b) {
      const std::uint8_t* mk = sel->mask.data() + b * HW;
      const T inv = T{1} / (static_cast<T>(sel->count[b]) + eps);
      for (std::ptrdiff_t d = 0; d < D; ++d) {
        const T gd = gout[static_cast<std::size_t>(b * D + d)] * inv;
        T* row = du + (b * D + d) * HW;
        for (std::ptrdiff_t i = 0; i < HW; ++i)
          if (mk[i]) row[i] += gd;
      }
    }
  };
  return u.graph().record(std::move(out), {u}, std::move(fn));
}

// ---- stochastic depth ------------------------------------------------------

template <class T>
Var<T> drop_path(const Var<T>& x, double rate, bool training, SeededRng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("drop_path: rate must be in [0, 1)");
  if (!training || rate == 0.0) return x;
  const auto B = static_cast<std::size_t>(x.value().dim(0));
  std::vector<T> scales(B);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  for (auto& s : scales) s = rng.uniform() >= rate ? keep_scale : T{0};
  return scale_samples<T>(x, scales);
}

#define ETIDE_INSTANTIATE_OPS(T)                                                                          \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const std::optional<Var<T>>&, int, int);          \
  template Var<T> conv2d_depthwise(const Var<T>&, const Var<T>&, int, int);                              \
  template Var<T> conv2d_pointwise(const Var<T>&, const Var<T>&, const std::optional<Var<T>>&);          \
  template Var<T> layer_norm_channels(const Var<T>&, const Var<T>&, const Var<T>&, double);              \
  template Var<T> relu(const Var<T>&);                                                                    \
  template Var<T> gelu(const Var<T>&);                                                                    \
  template Var<T> sigmoid(const Var<T>&);                                                                 \
  template Var<T> softmax_temp(const Var<T>&, double);                                                    \
  template Var<T> kl_div(const Var<T>&, const Var<T>&, double);                                           \
  template Var<T> reshape(const Var<T>&, Shape);                                                          \
  template Var<T> upsample_nearest2x(const Var<T>&);                                                      \
  template Var<T> time_diff(const Var<T>&);                                                               \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                      \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                      \
  template Var<T> add_scalar(const Var<T>&, double);                                                      \
  template Var<T> scale(const Var<T>&, double);                                                           \
  template Var<T> mul_channel(const Var<T>&, const Var<T>&);                                              \
  template Var<T> scale_samples(const Var<T>&, std::span<const T>);                                       \
  template Var<T> linear(const Var<T>&, const Var<T>&, const std::optional<Var<T>>&);                    \
  template Var<T> sum(const Var<T>&);                                                                     \
  template Var<T> mean(const Var<T>&);                                                                    \
  template T quantile_nearest_rank(std::span<const T>, double);                                           \
  template ActivityMask<T> activity_mask(const Tensor<T>&, double);                                       \
  template Var<T> activity_masked_pool(const Var<T>&, double, bool);                                      \
  template Var<T> drop_path(const Var<T>&, double, bool, SeededRng&);

ETIDE_INSTANTIATE_OPS(float)
ETIDE_INSTANTIATE_OPS(double)

}  // namespace etide
