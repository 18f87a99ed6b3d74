#pragma once

#include <cstdint>
#include <span>
#include <string>

#include "etide/tensor.hpp"

namespace etide {

inline constexpr int kOtsuBins = 256;

/// Between-class-variance threshold over a 256-bin histogram of values in
/// [0,1]. Candidates are the bin boundaries k/256, k = 1..255; ties go to the
/// lower boundary; inputs with no separable split give 0.5.
double otsu_threshold(std::span<const float> probs);
double otsu_threshold(const Tensor<float>& frame);

/// probs[T,2,H,W] -> {0,1}, thresholding every frame and channel at its own Otsu value (>=).
Tensor<std::uint8_t> binarize(const Tensor<float>& probs);
/// Same with one fixed threshold everywhere.
Tensor<std::uint8_t> binarize_fixed(const Tensor<float>& probs, double threshold);

struct OverlapCounts {
  std::uint64_t intersection = 0;
  std::uint64_t union_ = 0;
  /// 1 when both sides were empty everywhere.
  double iou() const;
};

double mse(std::span<const float> pred, std::span<const float> target);
/// Gaussian-window SSIM of two [H,W] frames with values in [0,1]. The 11x11
/// window shrinks to the largest odd size fitting smaller frames.
double ssim(std::span<const float> a, std::span<const float> b, int height, int width);

struct MetricReport {
  double iou_on = 0, iou_off = 0, miou = 0, aiou = 0, mse = 0, ssim = 0;
  std::uint64_t frames = 0;

  /// key=value pairs on one line, keys optionally prefixed.
  std::string record(const std::string& prefix = "") const;
  std::string table(const std::string& title) const;
};

class MetricAccumulator {
 public:
  /// pred and gt are [T,2,H,W] binary maps.
  void update(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& gt);
  /// Probability fidelity terms against the same ground truth.
  void update_fidelity(const Tensor<float>& probs, const Tensor<std::uint8_t>& gt);
  void merge(const MetricAccumulator& other);
  MetricReport finalize() const;

  const OverlapCounts& on() const { return on_; }
  const OverlapCounts& off() const { return off_; }
  const OverlapCounts& agnostic() const { return agnostic_; }

 private:
  OverlapCounts on_, off_, agnostic_;
  double se_sum_ = 0;
  std::uint64_t se_count_ = 0;
  double ssim_sum_ = 0;
  std::uint64_t ssim_frames_ = 0;
  std::uint64_t frames_ = 0;
};

}  // namespace etide
