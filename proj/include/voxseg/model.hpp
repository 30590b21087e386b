// SPDX-License-Identifier: Apache-2.0
//
// CNN + Transformer segmentation network for 4-modality 3D MRI.
//
//   encoder     `encoder_stages` stages of [down conv (stages > 0), two 3x3x3
//               conv blocks, squeeze-and-excitation]; channels double per stage
//   bottleneck  1x1x1 projection to embed_dim, residual MLP positional
//               encoding on the 3D map, flatten, pre-norm Transformer blocks,
//               reshape, 1x1x1 projection back
//   decoder     encoder_stages - 1 stages of [transposed conv x2, concat skip,
//               two conv blocks]; 1x1x1 head to class logits
//
// The autoencoder used for self-pretraining shares the Encoder type (same
// parameter names and shapes) and decodes without skip connections.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace voxseg {

struct ModelConfig {
  int64_t in_channels = 4;
  int64_t num_classes = 4;
  int64_t base_channels = 16;
  int64_t encoder_stages = 5;
  int64_t se_reduction = 16;
  int64_t embed_dim = 512;
  int64_t tf_layers = 4;
  int64_t tf_heads = 8;
  int64_t mlp_ratio = 8;  // Transformer feed-forward width = mlp_ratio * embed_dim
  int64_t mlp_pe_blocks = 3;
  double dropout = 0.1;

  /// Throws ValidationError naming the offending field.
  void validate() const;
  /// Spatial dims must be multiples of this.
  int64_t size_divisor() const { return int64_t{1} << (encoder_stages - 1); }
  int64_t stage_channels(int64_t stage) const { return base_channels << stage; }

  /// Small configuration used in tests and desk-scale runs.
  static ModelConfig toy();
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Conv3d(3x3x3) -> GroupNorm -> ReLU.
class ConvBlockImpl : public torch::nn::Module {
 public:
  ConvBlockImpl(int64_t in, int64_t out, int64_t stride = 1);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv3d conv{nullptr};
  torch::nn::GroupNorm norm{nullptr};
};
TORCH_MODULE(ConvBlock);

/// Squeeze-and-excitation: channels gated by sigmoid(fc2(relu(fc1(avgpool(x))))).
class SEBlockImpl : public torch::nn::Module {
 public:
  SEBlockImpl(int64_t channels, int64_t reduction);

  /// Per-sample channel gates s in (0,1), shape [N, C].
  torch::Tensor gate(const torch::Tensor& x);
  /// x * s broadcast over the spatial axes.
  static torch::Tensor apply_gate(const torch::Tensor& x, const torch::Tensor& s);
  torch::Tensor forward(const torch::Tensor& x);

  int64_t hidden() const { return hidden_; }

  torch::nn::Linear fc1{nullptr};
  torch::nn::Linear fc2{nullptr};

 private:
  int64_t hidden_;
};
TORCH_MODULE(SEBlock);

/// output = MLP(x) + x, where MLP is `blocks` x [1x1x1 conv -> ReLU -> BatchNorm3d],
/// E -> E channels throughout. Works for any spatial size.
class MlpPositionalEncodingImpl : public torch::nn::Module {
 public:
  MlpPositionalEncodingImpl(int64_t embed_dim, int64_t blocks = 3);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::ModuleList convs;
  torch::nn::ModuleList norms;
};
TORCH_MODULE(MlpPositionalEncoding);

class TransformerBlockImpl : public torch::nn::Module {
 public:
  TransformerBlockImpl(int64_t dim, int64_t heads, int64_t mlp_dim, double dropout);
  /// tokens: [N, L, E]
  torch::Tensor forward(const torch::Tensor& tokens);

  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Linear qkv{nullptr}, proj{nullptr}, fc1{nullptr}, fc2{nullptr};
  torch::nn::Dropout drop{nullptr};

 private:
  int64_t heads_;
};
TORCH_MODULE(TransformerBlock);

class EncoderStageImpl : public torch::nn::Module {
 public:
  EncoderStageImpl(int64_t in, int64_t out, bool downsample, int64_t se_reduction);
  torch::Tensor forward(torch::Tensor x);

  ConvBlock down{nullptr};
  ConvBlock conv1{nullptr}, conv2{nullptr};
  SEBlock se{nullptr};
};
TORCH_MODULE(EncoderStage);

class EncoderImpl : public torch::nn::Module {
 public:
  explicit EncoderImpl(const ModelConfig& cfg);
  /// Output of every stage, shallowest first.
  std::vector<torch::Tensor> forward(torch::Tensor x);

  torch::nn::ModuleList stages;
};
TORCH_MODULE(Encoder);

class BottleneckImpl : public torch::nn::Module {
 public:
  explicit BottleneckImpl(const ModelConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv3d proj_in{nullptr}, proj_out{nullptr};
  MlpPositionalEncoding pos{nullptr};
  torch::nn::ModuleList blocks;
  torch::nn::LayerNorm norm{nullptr};
};
TORCH_MODULE(Bottleneck);

class DecoderStageImpl : public torch::nn::Module {
 public:
  DecoderStageImpl(int64_t in, int64_t out, bool with_skip);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& skip = {});

  torch::nn::ConvTranspose3d up{nullptr};
  ConvBlock conv1{nullptr}, conv2{nullptr};

 private:
  bool with_skip_;
};
TORCH_MODULE(DecoderStage);

class DecoderImpl : public torch::nn::Module {
 public:
  DecoderImpl(const ModelConfig& cfg, int64_t out_channels, bool with_skips);
  torch::Tensor forward(const std::vector<torch::Tensor>& features, torch::Tensor deepest);

  torch::nn::ModuleList stages;
  torch::nn::Conv3d head{nullptr};

 private:
  bool with_skips_;
};
TORCH_MODULE(Decoder);

class SegModelImpl : public torch::nn::Module {
 public:
  explicit SegModelImpl(const ModelConfig& cfg);
  /// x: [N, 4, D, H, W] -> logits [N, num_classes, D, H, W].
  torch::Tensor forward(const torch::Tensor& x);

  const ModelConfig& config() const { return cfg_; }

  Encoder encoder{nullptr};
  Bottleneck bottleneck{nullptr};
  Decoder decoder{nullptr};

 private:
  ModelConfig cfg_;
};
TORCH_MODULE(SegModel);

class AutoencoderModelImpl : public torch::nn::Module {
 public:
  explicit AutoencoderModelImpl(const ModelConfig& cfg);
  /// x: [N, 4, D, H, W] -> reconstruction of the same shape.
  torch::Tensor forward(const torch::Tensor& x);

  const ModelConfig& config() const { return cfg_; }

  Encoder encoder{nullptr};
  Decoder decoder{nullptr};

 private:
  ModelConfig cfg_;
};
TORCH_MODULE(AutoencoderModel);

/// Seeds the global torch generator, builds and initializes the model.
SegModel build_model(const ModelConfig& cfg, uint64_t seed = 0);
AutoencoderModel build_autoencoder(const ModelConfig& cfg, uint64_t seed = 0);

/// Throws ShapeError naming the first spatial axis not divisible by cfg.size_divisor().
void check_input_shape(const ModelConfig& cfg, const torch::Tensor& x);
torch::Tensor forward(SegModel& model, const torch::Tensor& x);

/// Copies every encoder parameter (and buffer) of `src` into `dst`.
/// Names and shapes must match one-to-one; throws ValidationError naming the
/// first mismatch. Bottleneck and decoder of `dst` are left untouched.
void transfer_encoder_weights(AutoencoderModel& src, SegModel& dst);
/// Same, from a name -> tensor table keyed "encoder.<...>".
void load_encoder_state(const std::vector<std::pair<std::string, torch::Tensor>>& state, SegModel& dst);

/// Names and tensors of all parameters and buffers of `module` under `prefix`.
std::vector<std::pair<std::string, torch::Tensor>> named_state(const torch::nn::Module& module,
                                                              const std::string& prefix = "");

}  // namespace voxseg
