#include "etide/metrics.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <vector>

namespace etide {

double otsu_threshold(std::span<const float> probs) {
  if (probs.empty()) return 0.5;
  std::array<std::int64_t, kOtsuBins> hist{};
  for (float p : probs) {
    const double c = std::clamp(static_cast<double>(p), 0.0, 1.0);
    hist[std::min(kOtsuBins - 1, static_cast<int>(std::floor(c * kOtsuBins)))]++;
  }
  // Class sums of (2b + 1), i.e. bin centres in units of 1/512, keep the
  // comparison exact: variance * N^2 * 512^2 = (n1 S0 - n0 S1)^2 / (n0 n1).
  const auto n = static_cast<std::int64_t>(probs.size());
  std::int64_t s_total = 0;
  for (int b = 0; b < kOtsuBins; ++b) s_total += hist[b] * (2 * b + 1);
  __int128 best_num = 0, best_den = 1;
  int best_k = 0;
  std::int64_t n0 = 0, s0 = 0;
  for (int k = 1; k < kOtsuBins; ++k) {
    n0 += hist[k - 1];
    s0 += hist[k - 1] * (2 * (k - 1) + 1);
    const std::int64_t n1 = n - n0;
    if (n0 == 0 || n1 == 0) continue;
    const __int128 diff = static_cast<__int128>(n1) * s0 - static_cast<__int128>(n0) * (s_total - s0);
    const __int128 num = diff * diff;
    const __int128 den = static_cast<__int128>(n0) * n1;
    // Exact cross-multiplication stays below 2^120 for frames up to 2^17 pixels.
    bool better;
    if (n <= (1 << 17)) {
      better = num * best_den > best_num * den;
    } else {
      better = static_cast<long double>(num) / static_cast<long double>(den) >
               static_cast<long double>(best_num) / static_cast<long double>(best_den);
    }
    if (better) {
      best_num = num;
      best_den = den;
      best_k = k;
    }
  }
  if (best_k == 0) return 0.5;
  return static_cast<double>(best_k) / kOtsuBins;
}

double otsu_threshold(const Tensor<float>& frame) { return otsu_threshold(std::span<const float>(frame.ptr(), frame.size())); }

namespace {

void require_sequence(const Shape& s, const char* what) {
  require_rank(s, 4, what);
  if (s[1] != 2) throw ShapeError(std::string(what) + ": dimension 1 (polarity) must be 2, got " + std::to_string(s[1]));
}

}  // namespace

Tensor<std::uint8_t> binarize(const Tensor<float>& probs) {
  require_sequence(probs.shape(), "binarize");
  const std::size_t plane = static_cast<std::size_t>(probs.dim(2) * probs.dim(3));
  Tensor<std::uint8_t> out(probs.shape());
  for (std::size_t f = 0; f * plane < probs.size(); ++f) {
    std::span<const float> frame(probs.ptr() + f * plane, plane);
    const float thr = static_cast<float>(otsu_threshold(frame));
    for (std::size_t i = 0; i < plane; ++i) out[f * plane + i] = frame[i] >= thr ? 1 : 0;
  }
  return out;
}

Tensor<std::uint8_t> binarize_fixed(const Tensor<float>& probs, double threshold) {
  Tensor<std::uint8_t> out(probs.shape());
  for (std::size_t i = 0; i < probs.size(); ++i) out[i] = probs[i] >= threshold ? 1 : 0;
  return out;
}

double OverlapCounts::iou() const {
  if (union_ == 0) return 1.0;
  return static_cast<double>(intersection) / static_cast<double>(union_);
}

double mse(std::span<const float> pred, std::span<const float> target) {
  if (pred.size() != target.size()) throw ShapeError("mse: size mismatch");
  if (pred.empty()) throw ShapeError("mse of empty input");
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - target[i];
    s += d * d;
  }
  return s / static_cast<double>(pred.size());
}

namespace {

std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> w(static_cast<std::size_t>(size));
  const int r = size / 2;
  double s = 0;
  for (int i = 0; i < size; ++i) {
    w[i] = std::exp(-0.5 * (i - r) * (i - r) / (sigma * sigma));
    s += w[i];
  }
  for (auto& v : w) v /= s;
  return w;
}

// Valid-mode separable filtering of an [H,W] image.
std::vector<double> filter_valid(const std::vector<double>& img, int H, int W, const std::vector<double>& w) {
  const int k = static_cast<int>(w.size());
  const int oh = H - k + 1, ow = W - k + 1;
  std::vector<double> tmp(static_cast<std::size_t>(H) * ow);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0;
      for (int j = 0; j < k; ++j) s += w[j] * img[static_cast<std::size_t>(y) * W + x + j];
      tmp[static_cast<std::size_t>(y) * ow + x] = s;
    }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0;
      for (int i = 0; i < k; ++i) s += w[i] * tmp[static_cast<std::size_t>(y + i) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = s;
    }
  return out;
}

}  // namespace

double ssim(std::span<const float> a, std::span<const float> b, int height, int width) {
  if (height < 1 || width < 1) throw ShapeError("ssim: empty frame");
  const auto n = static_cast<std::size_t>(height) * width;
  if (a.size() != n || b.size() != n) throw ShapeError("ssim: frame size does not match height*width");
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  int size = std::min({11, height, width});
  if (size % 2 == 0) --size;
  const auto w = gaussian_window(size, 1.5);

  std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = a[i];
    y[i] = b[i];
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto mx = filter_valid(x, height, width, w), my = filter_valid(y, height, width, w);
  const auto sxx = filter_valid(xx, height, width, w), syy = filter_valid(yy, height, width, w),
             sxy = filter_valid(xy, height, width, w);
  double total = 0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i];
    const double vy = syy[i] - my[i] * my[i];
    const double cov = sxy[i] - mx[i] * my[i];
    total += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(mx.size());
}

void MetricAccumulator::update(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& gt) {
  require_sequence(pred.shape(), "metric update prediction");
  require_same_shape(pred.shape(), gt.shape(), "metric update");
  const std::size_t plane = static_cast<std::size_t>(pred.dim(2) * pred.dim(3));
  const auto steps = static_cast<std::size_t>(pred.dim(0));
  for (std::size_t t = 0; t < steps; ++t) {
    const std::size_t on = (2 * t) * plane, off = (2 * t + 1) * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      const bool p_on = pred[on + i], p_off = pred[off + i], g_on = gt[on + i], g_off = gt[off + i];
      on_.intersection += p_on && g_on;
      on_.union_ += p_on || g_on;
      off_.intersection += p_off && g_off;
      off_.union_ += p_off || g_off;
      const bool pa = p_on || p_off, ga = g_on || g_off;
      agnostic_.intersection += pa && ga;
      agnostic_.union_ += pa || ga;
    }
  }
  frames_ += steps;
}

void MetricAccumulator::update_fidelity(const Tensor<float>& probs, const Tensor<std::uint8_t>& gt) {
  require_sequence(probs.shape(), "metric fidelity probabilities");
  require_same_shape(probs.shape(), gt.shape(), "metric fidelity");
  const Tensor<float> target = gt.cast<float>();
  se_sum_ += mse(probs.data(), target.data()) * static_cast<double>(probs.size());
  se_count_ += probs.size();
  const int H = static_cast<int>(probs.dim(2)), W = static_cast<int>(probs.dim(3));
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  for (std::size_t f = 0; f * plane < probs.size(); ++f) {
    ssim_sum_ += ssim({probs.ptr() + f * plane, plane}, {target.ptr() + f * plane, plane}, H, W);
    ++ssim_frames_;
  }
}

void MetricAccumulator::merge(const MetricAccumulator& o) {
  auto add = [](OverlapCounts& a, const OverlapCounts& b) {
    a.intersection += b.intersection;
    a.union_ += b.union_;
  };
  add(on_, o.on_);
  add(off_, o.off_);
  add(agnostic_, o.agnostic_);
  se_sum_ += o.se_sum_;
  se_count_ += o.se_count_;
  ssim_sum_ += o.ssim_sum_;
  ssim_frames_ += o.ssim_frames_;
  frames_ += o.frames_;
}

MetricReport MetricAccumulator::finalize() const {
  MetricReport r;
  r.iou_on = on_.iou();
  r.iou_off = off_.iou();
  r.miou = 0.5 * (r.iou_on + r.iou_off);
  r.aiou = agnostic_.iou();
  r.mse = se_count_ ? se_sum_ / static_cast<double>(se_count_) : 0.0;
  r.ssim = ssim_frames_ ? ssim_sum_ / static_cast<double>(ssim_frames_) : 0.0;
  r.frames = frames_;
  return r;
}

std::string MetricReport::record(const std::string& prefix) const {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%smse=%.6f %sssim=%.6f %siou_on=%.6f %siou_off=%.6f %smiou=%.6f %saiou=%.6f",
                prefix.c_str(), mse, prefix.c_str(), ssim, prefix.c_str(), iou_on, prefix.c_str(), iou_off, prefix.c_str(),
                miou, prefix.c_str(), aiou);
  return buf;
}

std::string MetricReport::table(const std::string& title) const {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "%s (%llu frames)\n"
                "  MSE     %.6f\n"
                "  SSIM    %.6f\n"
                "  IoU ON  %.4f\n"
                "  IoU OFF %.4f\n"
                "  mIoU    %.4f\n"
                "  aIoU    %.4f\n",
                title.c_str(), static_cast<unsigned long long>(frames), mse, ssim, iou_on, iou_off, miou, aiou);
  return buf;
}

}  // namespace etide
