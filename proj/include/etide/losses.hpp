#pragma once

#include <string>
#include <utility>

#include "etide/config.hpp"
#include "etide/graph.hpp"
#include "etide/ops.hpp"

namespace etide {

struct LossConfig {
  double alpha = 0.75;  // focal balance toward positives
  double gamma = 2.0;   // focusing exponent
  double lambda_on = 0.65;
  double lambda_off = 0.35;
  double alpha_ddr = 0.1;
  double tau = 1.0;
  double eps = kLogEps;
  /// Ablation switch: false weighs both polarities 0.5.
  bool polarity_weighting = true;

  /// (lambda_on, lambda_off) normalized to sum to one.
  std::pair<double, double> channel_weights() const;
  void validate() const;

  bool apply(const std::string& key, const std::string& value);
  void write(KeyValues& kv) const;

  bool operator==(const LossConfig&) const = default;
};

/// Focal term for one probability and a {0,1} label.
double focal_elem(double p_hat, int y, double alpha, double gamma, double eps = kLogEps);

/// Same term evaluated from a logit through stable sigmoid identities.
double focal_from_logit(double logit, int y, double alpha, double gamma, double eps = kLogEps);

/// Channel-weighted focal loss over logits[B,T,2,H,W]; mean over t, h, w and
/// batch. Targets must be 0 or 1.
template <class T>
Var<T> polarity_focal(const Var<T>& logits, const Tensor<T>& targets, const LossConfig& cfg);

/// KL between temperature softmaxes of consecutive-frame differences of
/// probs[B,T,2,H,W] and targets; averaged over frame pairs and batch.
template <class T>
Var<T> ddr_loss(const Var<T>& probs, const Tensor<T>& targets, double tau, double eps = kLogEps);

template <class T>
struct LossTerms {
  Var<T> focal;
  std::optional<Var<T>> ddr;  // absent when alpha_ddr == 0
  Var<T> total;
};

template <class T>
LossTerms<T> loss_terms(const Var<T>& logits, const Tensor<T>& targets, const LossConfig& cfg);

/// polarity_focal + alpha_ddr * ddr_loss(sigmoid(logits)).
template <class T>
Var<T> total_loss(const Var<T>& logits, const Tensor<T>& targets, const LossConfig& cfg);

}  // namespace etide
