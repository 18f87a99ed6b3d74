#include "etide/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace etide {

std::pair<double, double> LossConfig::channel_weights() const {
  if (!polarity_weighting) return {0.5, 0.5};
  const double s = lambda_on + lambda_off;
  return {lambda_on / s, lambda_off / s};
}

void LossConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("loss config: " + msg); };
  if (!(alpha > 0.0 && alpha < 1.0)) fail("alpha must be in (0, 1)");
  if (!(gamma >= 0.0)) fail("gamma must be >= 0");
  if (!(lambda_on >= 0.0 && lambda_off >= 0.0 && lambda_on + lambda_off > 0.0))
    fail("polarity weights must be non-negative and not both zero");
  if (!(alpha_ddr >= 0.0)) fail("alpha_ddr must be >= 0");
  if (!(tau > 0.0)) fail("tau must be > 0");
  if (!(eps > 0.0)) fail("eps must be > 0");
}

bool LossConfig::apply(const std::string& key, const std::string& value) {
  if (key == "focal_alpha") alpha = parse_double(key, value);
  else if (key == "focal_gamma") gamma = parse_double(key, value);
  else if (key == "lambda_on") lambda_on = parse_double(key, value);
  else if (key == "lambda_off") lambda_off = parse_double(key, value);
  else if (key == "alpha_ddr") alpha_ddr = parse_double(key, value);
  else if (key == "ddr_tau") tau = parse_double(key, value);
  else if (key == "log_eps") eps = parse_double(key, value);
  else if (key == "polarity_weighting") polarity_weighting = parse_bool(key, value);
  else return false;
  return true;
}

void LossConfig::write(KeyValues& kv) const {
  kv.set("focal_alpha", format_double(alpha));
  kv.set("focal_gamma", format_double(gamma));
  kv.set("lambda_on", format_double(lambda_on));
  kv.set("lambda_off", format_double(lambda_off));
  kv.set("alpha_ddr", format_double(alpha_ddr));
  kv.set("ddr_tau", format_double(tau));
  kv.set("log_eps", format_double(eps));
  kv.set("polarity_weighting", polarity_weighting ? "true" : "false");
}

double focal_elem(double p_hat, int y, double alpha, double gamma, double eps) {
  if (y == 1) return -alpha * std::pow(1.0 - p_hat, gamma) * std::log(p_hat + eps);
  return -(1.0 - alpha) * std::pow(p_hat, gamma) * std::log(1.0 - p_hat + eps);
}

namespace {

template <class T>
T sigmoid_of(T s) {
  if (s >= 0) return T{1} / (T{1} + std::exp(-s));
  const T e = std::exp(s);
  return e / (T{1} + e);
}

// Loss and d loss / d logit for one element; q = 1 - p evaluated as sigmoid(-s).
template <class T>
std::pair<T, T> focal_and_grad(T s, bool positive, T alpha, T gamma, T eps) {
  const T p = sigmoid_of(s);
  const T q = sigmoid_of(-s);
  if (positive) {
    const T qg = std::pow(q, gamma);
    const T lp = std::log(p + eps);
    const T loss = -alpha * qg * lp;
    const T grad = -alpha * (-gamma * qg * p * lp + qg * q * p / (p + eps));
    return {loss, grad};
  }
  const T pg = std::pow(p, gamma);
  const T lq = std::log(q + eps);
  const T loss = -(T{1} - alpha) * pg * lq;
  const T grad = -(T{1} - alpha) * (gamma * pg * q * lq - pg * p * q / (q + eps));
  return {loss, grad};
}

void require_forecast_shape(const Shape& s, const char* what) {
  require_rank(s, 5, what);
  if (s[2] != 2) throw ShapeError(std::string(what) + ": dimension 2 (polarity) must be 2, got " + std::to_string(s[2]));
}

}  // namespace

double focal_from_logit(double logit, int y, double alpha, double gamma, double eps) {
  return focal_and_grad<double>(logit, y == 1, alpha, gamma, eps).first;
}

template <class T>
Var<T> polarity_focal(const Var<T>& logits, const Tensor<T>& targets, const LossConfig& cfg) {
  cfg.validate();
  const auto& lv = logits.value();
  require_forecast_shape(lv.shape(), "polarity_focal logits");
  require_same_shape(lv.shape(), targets.shape(), "polarity_focal");
  const auto [w_on, w_off] = cfg.channel_weights();
  const std::size_t plane = static_cast<std::size_t>(lv.dim(3) * lv.dim(4));
  const double denom = static_cast<double>(lv.dim(0) * lv.dim(1)) * static_cast<double>(plane);
  const T alpha = static_cast<T>(cfg.alpha), gamma = static_cast<T>(cfg.gamma), eps = static_cast<T>(cfg.eps);

  auto grads = std::make_shared<Tensor<T>>(lv.shape());
  double total = 0.0;
  for (std::size_t i = 0; i < lv.size(); ++i) {
    const T y = targets[i];
    if (y != T{0} && y != T{1})
      throw std::invalid_argument("polarity_focal: target element " + std::to_string(i) + " is not 0 or 1");
    const double w = ((i / plane) % 2 == 0 ? w_on : w_off) / denom;
    const auto [loss, grad] = focal_and_grad<T>(lv[i], y == T{1}, alpha, gamma, eps);
    total += w * static_cast<double>(loss);
    (*grads)[i] = static_cast<T>(w * static_cast<double>(grad));
  }
  auto fn = [logits, grads](Graph<T>& g, const Tensor<T>& gout) {
    auto& d = g.grad(logits);
    const T go = gout[0];
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += go * (*grads)[i];
  };
  return logits.graph().record(Tensor<T>::scalar(static_cast<T>(total)), {logits}, std::move(fn));
}

template <class T>
Var<T> ddr_loss(const Var<T>& probs, const Tensor<T>& targets, double tau, double eps) {
  const auto& s = probs.value().shape();
  require_forecast_shape(s, "ddr_loss probs");
  require_same_shape(s, targets.shape(), "ddr_loss");
  if (s[1] < 2) throw std::invalid_argument("ddr_loss: needs at least 2 output frames, got " + std::to_string(s[1]));
  const std::int64_t pairs = s[0] * (s[1] - 1);
  const Shape rows{pairs, s[2] * s[3] * s[4]};

  auto& g = probs.graph();
  auto p = softmax_temp(reshape(time_diff(probs), rows), tau);
  Graph<T> scratch(false);
  auto target_dist = softmax_temp(reshape(time_diff(scratch.constant(targets)), rows), tau).value();
  auto q = g.constant(std::move(target_dist));
  return scale(kl_div(p, q, eps), 1.0 / static_cast<double>(pairs));
}

template <class T>
LossTerms<T> loss_terms(const Var<T>& logits, const Tensor<T>& targets, const LossConfig& cfg) {
  auto focal = polarity_focal(logits, targets, cfg);
  if (cfg.alpha_ddr == 0.0) return {focal, std::nullopt, focal};
  auto ddr = ddr_loss(sigmoid(logits), targets, cfg.tau, cfg.eps);
  return {focal, ddr, add(focal, scale(ddr, cfg.alpha_ddr))};
}

template <class T>
Var<T> total_loss(const Var<T>& logits, const Tensor<T>& targets, const LossConfig& cfg) {
  return loss_terms(logits, targets, cfg).total;
}

#define ETIDE_INSTANTIATE_LOSSES(T)                                                           \
  template Var<T> polarity_focal(const Var<T>&, const Tensor<T>&, const LossConfig&);        \
  template Var<T> ddr_loss(const Var<T>&, const Tensor<T>&, double, double);                 \
  template LossTerms<T> loss_terms(const Var<T>&, const Tensor<T>&, const LossConfig&);      \
  template Var<T> total_loss(const Var<T>&, const Tensor<T>&, const LossConfig&);

ETIDE_INSTANTIATE_LOSSES(float)
ETIDE_INSTANTIATE_LOSSES(double)

}  // namespace etide
