#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "clipin/rng.hpp"
#include "clipin/tensor.hpp"

namespace clipin {

struct DimsConfig {
  std::size_t image_side = 16;
  std::size_t channels = 3;
  std::size_t vocab_size = 66;
  std::size_t max_text_len = 16;
  std::size_t image_hidden = 128;  // hidden width of the image MLP
  std::size_t d_enc = 64;
  std::size_t d_pre = 128;
  std::size_t d_cl = 64;
  std::size_t d_ncl = 1024;
  std::size_t predictor_bottleneck = 256;

  // "desk" (default), "paper-ratio" (1024/512/8192 heads) or "tiny" (every
  // width <= 16, for exhaustive gradient checks).
  static DimsConfig preset(const std::string& name);
  void validate() const;
  std::size_t pixels() const { return channels * image_side * image_side; }

  bool operator==(const DimsConfig&) const = default;
};

enum class Modality { Image, Text };

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]; undefined for bias-free layers

  Tensor forward(const Tensor& x) const;
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;

  Tensor forward(const Tensor& x) const;
};

struct ImageEncoder {  // flatten -> linear -> LN -> ReLU -> linear
  Linear fc1;
  LayerNormParams norm;
  Linear fc2;

  Tensor forward(const Tensor& images) const;
};

struct TextEncoder {  // embedding -> masked mean pool -> linear
  Tensor embedding;
  Linear proj;

  Tensor forward(const TokenBatch& tokens) const;
};

struct PreProjector {  // linear -> LN -> ReLU
  Linear fc;
  LayerNormParams norm;

  Tensor forward(const Tensor& x) const;
};

// Bottleneck MLP: linear -> LN -> ReLU -> linear. Used for the
// non-contrastive sub-projector and for all four predictors.
struct BottleneckMlp {
  Linear fc1;
  LayerNormParams norm;
  Linear fc2;

  Tensor forward(const Tensor& x) const;
};

struct OnlineParams {
  ImageEncoder image_encoder;
  TextEncoder text_encoder;
  PreProjector pre_image;
  PreProjector pre_text;
  // Separate contrastive pre-projectors, present only when pre-projectors
  // are not shared between the contrastive and non-contrastive heads.
  std::optional<PreProjector> pre_cl_image;
  std::optional<PreProjector> pre_cl_text;
  BottleneckMlp ncl_image;
  BottleneckMlp ncl_text;
  Linear cl_image;  // single linear layer, no bias
  Linear cl_text;
  BottleneckMlp inter_image;
  BottleneckMlp inter_text;
  BottleneckMlp intra_image;
  BottleneckMlp intra_text;
  Tensor log_tau;  // used only with a learnable temperature
  Tensor s_inter;  // lambda_inter = exp(-s_inter) in learnable weighting
  Tensor s_intra;
};

// Momentum mirror of the online encoders and projectors. No predictors and
// no contrastive projector live here.
struct TargetParams {
  ImageEncoder image_encoder;
  TextEncoder text_encoder;
  PreProjector pre_image;
  PreProjector pre_text;
  BottleneckMlp ncl_image;
  BottleneckMlp ncl_text;
};

struct ModelState {
  DimsConfig dims;
  bool shared_pre = true;
  OnlineParams online;
  TargetParams target;
  std::uint64_t step = 0;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool decay = false;  // eligible for weight decay
};

struct ModelOptions {
  bool share_pre_projectors = true;
  double initial_tau = 0.07;
};

ModelState init_model(const DimsConfig& dims, Rng& rng, const ModelOptions& options = {});

// Online branch outputs for one view. `ncl` is undefined when not requested.
struct OnlineFeatures {
  Tensor encoded;  // [B, d_enc]
  Tensor pre;      // [B, d_pre], shared pre-projector output
  Tensor ncl;      // [B, d_ncl]
};

OnlineFeatures encode_image_online(const ModelState& state, const Tensor& images,
                                   bool with_ncl = true);
OnlineFeatures encode_text_online(const ModelState& state, const TokenBatch& tokens,
                                  bool with_ncl = true);

// Target features, behind a stop-gradient boundary.
Tensor encode_image_target(const ModelState& state, const Tensor& images);
Tensor encode_text_target(const ModelState& state, const TokenBatch& tokens);

Tensor predict_inter(const ModelState& state, const Tensor& online_feat, Modality modality);
Tensor predict_intra(const ModelState& state, const Tensor& online_feat, Modality modality);

// Input of the contrastive projector for a view: the shared pre-projector
// output, or the dedicated contrastive pre-projector in the unshared ablation.
Tensor contrastive_input(const ModelState& state, const OnlineFeatures& feats, Modality modality);

std::pair<Tensor, Tensor> project_contrastive(const ModelState& state, const Tensor& pre_image,
                                              const Tensor& pre_text);

// target <- beta * target + (1 - beta) * online, for every target tensor.
void ema_update(ModelState& state, double beta);

std::vector<NamedTensor> online_parameters(const ModelState& state);
std::vector<NamedTensor> target_parameters(const ModelState& state);
// (target, online counterpart) pairs, in target_parameters() order.
std::vector<std::pair<Tensor, Tensor>> ema_pairs(const ModelState& state);

void zero_grads(const ModelState& state);

// Identity-augmentation image/text validation shared with callers.
void check_images(const DimsConfig& dims, const Tensor& images);
void check_tokens(const DimsConfig& dims, const TokenBatch& tokens);

}  // namespace clipin
