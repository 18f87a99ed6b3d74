#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "etide/graph.hpp"
#include "etide/rng.hpp"

namespace etide {

/// Floors used inside logs and pooling denominators.
inline constexpr double kLogEps = 1e-8;
inline constexpr double kLayerNormEps = 1e-6;

// ---- convolutions ---------------------------------------------------------

/// Dense convolution. x[B,Cin,H,W], weight[Cout,Cin,k,k], bias[Cout].
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const std::optional<Var<T>>& bias, int stride, int padding);

/// Per-channel stride-1 convolution with dilation. weight[C,1,k,k]; k odd and
/// padding == dilation*(k-1)/2 so spatial size is preserved.
template <class T>
Var<T> conv2d_depthwise(const Var<T>& x, const Var<T>& weight, int dilation, int padding);

/// 1x1 convolution mixing channels at every pixel. weight[Cout,Cin,1,1].
template <class T>
Var<T> conv2d_pointwise(const Var<T>& x, const Var<T>& weight, const std::optional<Var<T>>& bias);

// ---- normalization and activations ---------------------------------------

/// Normalizes the C-vector at each (b,h,w) of x[B,C,H,W], then scales by gamma[C] and shifts by beta[C].
template <class T>
Var<T> layer_norm_channels(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps = kLayerNormEps);

template <class T>
Var<T> relu(const Var<T>& x);
/// Exact x * Phi(x).
template <class T>
Var<T> gelu(const Var<T>& x);
template <class T>
Var<T> sigmoid(const Var<T>& x);

/// Row-wise softmax(v / tau) over the last dimension.
template <class T>
Var<T> softmax_temp(const Var<T>& v, double tau);

/// Sum of p * (log(p + eps) - log(q + eps)) over every element; shapes must match.
/// With p, q holding several distributions as rows this is the sum of row KLs.
template <class T>
Var<T> kl_div(const Var<T>& p, const Var<T>& q, double eps = kLogEps);

// ---- structural ------------------------------------------------------------

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape);
/// Nearest-neighbour 2x upsampling of x[B,C,H,W].
template <class T>
Var<T> upsample_nearest2x(const Var<T>& x);
/// x[:, t+1] - x[:, t] along dimension 1 of a tensor of rank >= 2.
template <class T>
Var<T> time_diff(const Var<T>& x);

// ---- arithmetic ------------------------------------------------------------

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> add_scalar(const Var<T>& a, double s);
template <class T>
Var<T> scale(const Var<T>& a, double s);
/// x[B,D,...] * g[B,D] with g broadcast over the trailing dimensions.
template <class T>
Var<T> mul_channel(const Var<T>& x, const Var<T>& g);
/// Multiplies sample b of x[B,...] by scales[b]; scales are constants.
template <class T>
Var<T> scale_samples(const Var<T>& x, std::span<const T> scales);
/// y[B,out] = x[B,in] * weight[out,in]^T + bias[out].
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const std::optional<Var<T>>& bias);
template <class T>
Var<T> sum(const Var<T>& x);
template <class T>
Var<T> mean(const Var<T>& x);

// ---- sparsity-aware pooling ------------------------------------------------

/// Nearest-rank quantile: sorted[ceil(q*N) - 1]. Requires 0 < q <= 1 and N >= 1.
template <class T>
T quantile_nearest_rank(std::span<const T> values, double q);

/// Per-sample activity selection over u[B,D,H,W]: m = mean_d |u|, delta = quantile(m, q), mask = m >= delta.
template <class T>
struct ActivityMask {
  std::vector<std::uint8_t> mask;      // [B, H*W]
  std::vector<T> threshold;            // [B]
  std::vector<std::int64_t> count;     // [B]
};

template <class T>
ActivityMask<T> activity_mask(const Tensor<T>& u, double q);

/// Verification hook. While an instance is alive on this thread, the first
/// pass after begin_pass() records every activity mask; later passes replay
/// them in call order. Finite differences then see the mask held constant,
/// which is the function backward differentiates.
class MaskFreeze {
 public:
  MaskFreeze();
  ~MaskFreeze();
  MaskFreeze(const MaskFreeze&) = delete;
  MaskFreeze& operator=(const MaskFreeze&) = delete;

  void begin_pass();
  std::size_t recorded() const { return masks_.size(); }

  /// The freeze active on this thread, or null.
  static MaskFreeze* current();
  bool replaying() const { return replaying_; }
  void record(const std::vector<std::uint8_t>& mask, const std::vector<std::int64_t>& count);
  /// Next recorded mask; throws if the pass diverges from the recorded one.
  std::pair<const std::vector<std::uint8_t>*, const std::vector<std::int64_t>*> replay(std::size_t elements);

 private:
  MaskFreeze* previous_;
  std::vector<std::vector<std::uint8_t>> masks_;
  std::vector<std::vector<std::int64_t>> counts_;
  std::size_t cursor_ = 0;
  bool replaying_ = false;
};

/// Average of u[B,D,H,W] over the activity mask, giving [B,D]. The mask is a
/// constant in backward. With `masked` false every location is kept (plain
/// global average).
template <class T>
Var<T> activity_masked_pool(const Var<T>& u, double q, bool masked = true);

// ---- stochastic depth ------------------------------------------------------

/// Per-sample branch dropping: identity in eval mode or at rate 0; in training
/// each sample is zeroed with probability `rate`, survivors scaled by 1/(1-rate).
template <class T>
Var<T> drop_path(const Var<T>& x, double rate, bool training, SeededRng& rng);

}  // namespace etide
