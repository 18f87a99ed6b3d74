#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "etide/config.hpp"
#include "etide/graph.hpp"
#include "etide/ops.hpp"
#include "etide/rng.hpp"

namespace etide {

/// Full hyperparameter record of the forecaster. Defaults are the reference
/// 10 -> 10 configuration at 128x128.
struct ModelConfig {
  int t_in = 10;
  int t_out = 10;
  int height = 128;
  int width = 128;
  int step_channels = 8;  // features per input step; packed width is t_in * step_channels
  int blocks = 4;
  int kernel = 3;  // encoder / decoder convolutions
  int mix_kernel1 = 5;
  int mix_kernel2 = 7;
  int mix_dilation = 3;
  double mask_quantile = 0.98;
  int gate_reduction = 16;
  int ffn_expansion = 2;
  double drop_path = 0.2;
  int stages = 2;  // stride-2 encoder convs, mirrored by 2x decoder upsamplings
  int encoder_width = 16;
  std::vector<int> decoder_widths = {192, 16};
  // Ablation switches.
  bool masked_pooling = true;           // false: plain global average for the gate
  bool multiplicative_residual = true;  // false: drop the (1 + U) factor

  int packed_channels() const { return t_in * step_channels; }
  int gate_hidden() const;
  int latent_height() const { return height >> stages; }
  int latent_width() const { return width >> stages; }

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;

  /// Applies one key; returns false if the key is not a model key.
  bool apply(const std::string& key, const std::string& value);
  void write(KeyValues& kv) const;
  static ModelConfig from(const KeyValues& kv);

  bool operator==(const ModelConfig&) const = default;
};

/// Closed-form parameter count implied by a configuration.
std::int64_t count_params(const ModelConfig& cfg);

template <class T>
struct ConvParams {
  Parameter<T> weight;
  Parameter<T> bias;
};

template <class T>
struct NormParams {
  Parameter<T> gamma;
  Parameter<T> beta;
};

/// conv -> channel layer norm -> gelu
template <class T>
struct ConvStage {
  ConvParams<T> conv;
  NormParams<T> norm;
};

template <class T>
struct TideBlockParams {
  NormParams<T> norm1;
  Parameter<T> mix1;  // depthwise [D,1,k1,k1], no bias
  Parameter<T> mix2;  // dilated depthwise [D,1,k2,k2], no bias
  ConvParams<T> proj; // pointwise D -> D
  Parameter<T> gate_w1, gate_b1, gate_w2, gate_b2;
  NormParams<T> norm2;
  ConvParams<T> ffn1;  // D -> e*D
  ConvParams<T> ffn2;  // e*D -> D
};

template <class T>
struct TideModel {
  ModelConfig config;
  std::vector<ConvStage<T>> encoder;
  std::vector<TideBlockParams<T>> blocks;
  std::vector<ConvStage<T>> decoder;
  ConvParams<T> head;

  /// Every parameter, in a fixed order. Pointers are invalidated by copying/moving the model.
  std::vector<Parameter<T>*> parameters();
  std::vector<const Parameter<T>*> parameters() const;
  void zero_grad();

  template <class U>
  TideModel<U> cast() const;
};

template <class T>
std::int64_t count_params(const TideModel<T>& model);

/// Deterministic per seed: fan-in scaled uniform conv/linear weights, zero
/// biases, unit norm gains.
template <class T>
TideModel<T> init_params(const ModelConfig& cfg, std::uint64_t seed);

/// Stochastic-depth behaviour for one forward pass.
struct DropControl {
  bool training = false;
  SeededRng* rng = nullptr;
  /// Zero every residual branch regardless of rate (test hook).
  bool force_drop = false;
};

/// Diagnostics captured from a TIDE core evaluation.
template <class T>
struct TideCoreTrace {
  Tensor<T> gate;                   // [B, D]
  std::vector<std::int64_t> mask_count;  // per sample
};

/// x[B,T_in,2,H,W] -> [B*T_in, C_s, H', W'], same weights for every step.
template <class T>
Var<T> encode(TideModel<T>& model, const Var<T>& x);
/// [B*T_in, C_s, H', W'] -> [B, T_in*C_s, H', W'].
template <class T>
Var<T> pack_time(const Var<T>& e, int t_in);
template <class T>
Var<T> unpack_time(const Var<T>& z, int t_in);
/// Mixing, activity-masked gate, and multiplicative residual on a normalized input.
template <class T>
Var<T> tide_core(const ModelConfig& cfg, TideBlockParams<T>& p, const Var<T>& un, TideCoreTrace<T>* trace = nullptr);
/// Pre-norm residual block: TIDE branch then FFN branch, each through drop-path.
template <class T>
Var<T> tide_block(const ModelConfig& cfg, TideBlockParams<T>& p, const Var<T>& u, const DropControl& drop,
                  TideCoreTrace<T>* trace = nullptr);
/// [B, D, H', W'] -> logits [B, T_out, 2, H, W].
template <class T>
Var<T> decode(TideModel<T>& model, const Var<T>& z);
/// Single pass, no recurrence: logits [B, T_out, 2, H, W].
template <class T>
Var<T> forward(TideModel<T>& model, const Var<T>& x, const DropControl& drop = {});

/// Eval-mode sigmoid probabilities for x[B,T_in,2,H,W].
Tensor<float> predict_probabilities(const TideModel<float>& model, const Tensor<float>& x);

// ---- checkpoints ---------------------------------------------------------

/// Named float tensors plus key=value metadata; the ETW1 container.
struct WeightFile {
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  KeyValues meta;
};

std::vector<std::uint8_t> encode_etw(const WeightFile& w);
WeightFile decode_etw(std::span<const std::uint8_t> bytes);
void write_etw(const std::filesystem::path& path, const WeightFile& w);
WeightFile read_etw(const std::filesystem::path& path);

void save_checkpoint(const std::filesystem::path& path, const TideModel<float>& model);
TideModel<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace etide
