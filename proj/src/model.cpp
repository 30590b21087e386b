// SPDX-License-Identifier: Apache-2.0
#include "voxseg/model.hpp"

#include <cmath>
#include <numeric>
#include <unordered_map>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "voxseg/error.hpp"

namespace voxseg {

namespace nn = torch::nn;

namespace {

void trunc_normal_(torch::Tensor w, double std) {
  torch::NoGradGuard guard;
  w.normal_(0.0, std);
  for (int pass = 0; pass < 64; ++pass) {
    auto outside = w.abs() > 2 * std;
    if (!outside.any().item<bool>()) return;
    w.masked_scatter_(outside, torch::randn_like(w).mul_(std).masked_select(outside));
  }
  w.clamp_(-2 * std, 2 * std);
}

// Identity whose backward hands on a contiguous gradient. The CPU BatchNorm3d
// backward returns wrong input gradients when its incoming gradient is
// channels-last strided (as produced by the token transposes) while its input
// is contiguous.
struct ContiguousGrad : public torch::autograd::Function<ContiguousGrad> {
  static torch::Tensor forward(torch::autograd::AutogradContext*, const torch::Tensor& x) { return x.clone(); }
  static torch::autograd::tensor_list backward(torch::autograd::AutogradContext*, torch::autograd::tensor_list grads) {
    return {grads[0].contiguous()};
  }
};

void he_normal_(torch::Tensor w) { nn::init::kaiming_normal_(w, 0.0, torch::kFanOut, torch::kReLU); }

void zero_if_defined(torch::Tensor t) {
  if (t.defined()) nn::init::zeros_(t);
}

}  // namespace

// ---------------------------------------------------------------------------
// ModelConfig

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ValidationError("model." + msg); };
  if (in_channels < 1) fail("in_channels must be >= 1");
  if (num_classes < 2) fail("num_classes must be >= 2");
  if (base_channels < 1) fail("base_channels must be >= 1");
  if (encoder_stages < 2) fail(fmt::format("encoder_stages must be >= 2, got {}", encoder_stages));
  if (encoder_stages > 8) fail("encoder_stages must be <= 8");
  if (se_reduction < 1) fail("se_reduction must be >= 1");
  if (embed_dim < 1 || tf_heads < 1 || embed_dim % tf_heads != 0)
    fail(fmt::format("embed_dim ({}) must be divisible by tf_heads ({})", embed_dim, tf_heads));
  if (tf_layers < 1) fail("tf_layers must be >= 1");
  if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
  if (mlp_pe_blocks != 3) fail(fmt::format("mlp_pe_blocks must be 3, got {}", mlp_pe_blocks));
  if (!(dropout >= 0 && dropout < 1)) fail("dropout must be in [0, 1)");
}

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.base_channels = 8;
  c.encoder_stages = 3;
  c.se_reduction = 4;
  c.embed_dim = 64;
  c.tf_layers = 2;
  c.tf_heads = 4;
  c.mlp_ratio = 2;
  return c;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"in_channels", c.in_channels},     {"num_classes", c.num_classes}, {"base_channels", c.base_channels},
       {"encoder_stages", c.encoder_stages}, {"se_reduction", c.se_reduction}, {"embed_dim", c.embed_dim},
       {"tf_layers", c.tf_layers},           {"tf_heads", c.tf_heads},       {"mlp_ratio", c.mlp_ratio},
       {"mlp_pe_blocks", c.mlp_pe_blocks},   {"dropout", c.dropout}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.in_channels = j.value("in_channels", c.in_channels);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.encoder_stages = j.value("encoder_stages", c.encoder_stages);
  c.se_reduction = j.value("se_reduction", c.se_reduction);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.tf_layers = j.value("tf_layers", c.tf_layers);
  c.tf_heads = j.value("tf_heads", c.tf_heads);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.mlp_pe_blocks = j.value("mlp_pe_blocks", c.mlp_pe_blocks);
  c.dropout = j.value("dropout", c.dropout);
}

// ---------------------------------------------------------------------------
// Blocks

ConvBlockImpl::ConvBlockImpl(int64_t in, int64_t out, int64_t stride) {
  conv = register_module("conv", nn::Conv3d(nn::Conv3dOptions(in, out, 3).stride(stride).padding(1).bias(false)));
  norm = register_module("norm", nn::GroupNorm(nn::GroupNormOptions(std::gcd<int64_t>(8, out), out)));
}

torch::Tensor ConvBlockImpl::forward(const torch::Tensor& x) { return torch::relu(norm(conv(x))); }

SEBlockImpl::SEBlockImpl(int64_t channels, int64_t reduction) : hidden_(std::max<int64_t>(channels / reduction, 1)) {
  fc1 = register_module("fc1", nn::Linear(channels, hidden_));
  fc2 = register_module("fc2", nn::Linear(hidden_, channels));
}

torch::Tensor SEBlockImpl::gate(const torch::Tensor& x) {
  auto squeezed = x.mean({2, 3, 4});
  return torch::sigmoid(fc2(torch::relu(fc1(squeezed))));
}

torch::Tensor SEBlockImpl::apply_gate(const torch::Tensor& x, const torch::Tensor& s) {
  return x * s.view({s.size(0), s.size(1), 1, 1, 1});
}

torch::Tensor SEBlockImpl::forward(const torch::Tensor& x) { return apply_gate(x, gate(x)); }

MlpPositionalEncodingImpl::MlpPositionalEncodingImpl(int64_t embed_dim, int64_t blocks) {
  for (int64_t i = 0; i < blocks; ++i) {
    convs->push_back(nn::Conv3d(nn::Conv3dOptions(embed_dim, embed_dim, 1)));
    norms->push_back(nn::BatchNorm3d(embed_dim));
  }
  register_module("convs", convs);
  register_module("norms", norms);
}

torch::Tensor MlpPositionalEncodingImpl::forward(const torch::Tensor& x) {
  auto y = x;
  for (size_t i = 0; i < convs->size(); ++i) {
    y = convs[i]->as<nn::Conv3d>()->forward(y);
    y = norms[i]->as<nn::BatchNorm3d>()->forward(torch::relu(y));
    if (y.requires_grad()) y = ContiguousGrad::apply(y);
  }
  return y + x;
}

TransformerBlockImpl::TransformerBlockImpl(int64_t dim, int64_t heads, int64_t mlp_dim, double dropout)
    : heads_(heads) {
  norm1 = register_module("norm1", nn::LayerNorm(nn::LayerNormOptions({dim})));
  qkv = register_module("qkv", nn::Linear(dim, 3 * dim));
  proj = register_module("proj", nn::Linear(dim, dim));
  norm2 = register_module("norm2", nn::LayerNorm(nn::LayerNormOptions({dim})));
  fc1 = register_module("fc1", nn::Linear(dim, mlp_dim));
  fc2 = register_module("fc2", nn::Linear(mlp_dim, dim));
  drop = register_module("drop", nn::Dropout(dropout));
}

torch::Tensor TransformerBlockImpl::forward(const torch::Tensor& tokens) {
  const auto n = tokens.size(0), len = tokens.size(1), dim = tokens.size(2);
  const auto head_dim = dim / heads_;
  auto qkv_out = qkv(norm1(tokens)).view({n, len, 3, heads_, head_dim}).permute({2, 0, 3, 1, 4});
  auto q = qkv_out[0], k = qkv_out[1], v = qkv_out[2];
  auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(head_dim)), -1);
  auto mixed = torch::matmul(attn, v).transpose(1, 2).reshape({n, len, dim});
  auto x = tokens + drop(proj(mixed));
  return x + drop(fc2(torch::gelu(fc1(norm2(x)))));
}

EncoderStageImpl::EncoderStageImpl(int64_t in, int64_t out, bool downsample, int64_t se_reduction) {
  if (downsample) down = register_module("down", ConvBlock(in, out, 2));
  conv1 = register_module("conv1", ConvBlock(downsample ? out : in, out));
  conv2 = register_module("conv2", ConvBlock(out, out));
  se = register_module("se", SEBlock(out, se_reduction));
}

torch::Tensor EncoderStageImpl::forward(torch::Tensor x) {
  if (down) x = down(x);
  return se(conv2(conv1(x)));
}

EncoderImpl::EncoderImpl(const ModelConfig& cfg) {
  for (int64_t s = 0; s < cfg.encoder_stages; ++s) {
    const int64_t in = s == 0 ? cfg.in_channels : cfg.stage_channels(s - 1);
    stages->push_back(EncoderStage(in, cfg.stage_channels(s), s > 0, cfg.se_reduction));
  }
  register_module("stages", stages);
}

std::vector<torch::Tensor> EncoderImpl::forward(torch::Tensor x) {
  std::vector<torch::Tensor> features;
  features.reserve(stages->size());
  for (auto& stage : *stages) {
    x = stage->as<EncoderStage>()->forward(x);
    features.push_back(x);
  }
  return features;
}

BottleneckImpl::BottleneckImpl(const ModelConfig& cfg) {
  const int64_t deep = cfg.stage_channels(cfg.encoder_stages - 1);
  proj_in = register_module("proj_in", nn::Conv3d(nn::Conv3dOptions(deep, cfg.embed_dim, 1)));
  pos = register_module("pos", MlpPositionalEncoding(cfg.embed_dim, cfg.mlp_pe_blocks));
  for (int64_t i = 0; i < cfg.tf_layers; ++i)
    blocks->push_back(TransformerBlock(cfg.embed_dim, cfg.tf_heads, cfg.mlp_ratio * cfg.embed_dim, cfg.dropout));
  register_module("blocks", blocks);
  norm = register_module("norm", nn::LayerNorm(nn::LayerNormOptions({cfg.embed_dim})));
  proj_out = register_module("proj_out", nn::Conv3d(nn::Conv3dOptions(cfg.embed_dim, deep, 1)));
}

torch::Tensor BottleneckImpl::forward(const torch::Tensor& x) {
  auto z = pos(proj_in(x));
  const auto n = z.size(0), e = z.size(1), d = z.size(2), h = z.size(3), w = z.size(4);
  auto tokens = z.flatten(2).transpose(1, 2);  // [N, L, E]
  for (auto& block : *blocks) tokens = block->as<TransformerBlock>()->forward(tokens);
  tokens = norm(tokens);
  return proj_out(tokens.transpose(1, 2).reshape({n, e, d, h, w}));
}

DecoderStageImpl::DecoderStageImpl(int64_t in, int64_t out, bool with_skip) : with_skip_(with_skip) {
  up = register_module("up", nn::ConvTranspose3d(nn::ConvTranspose3dOptions(in, out, 2).stride(2)));
  conv1 = register_module("conv1", ConvBlock(with_skip ? 2 * out : out, out));
  conv2 = register_module("conv2", ConvBlock(out, out));
}

torch::Tensor DecoderStageImpl::forward(const torch::Tensor& x, const torch::Tensor& skip) {
  auto y = up(x);
  if (with_skip_) y = torch::cat({y, skip}, 1);
  return conv2(conv1(y));
}

DecoderImpl::DecoderImpl(const ModelConfig& cfg, int64_t out_channels, bool with_skips) : with_skips_(with_skips) {
  for (int64_t s = cfg.encoder_stages - 1; s >= 1; --s)
    stages->push_back(DecoderStage(cfg.stage_channels(s), cfg.stage_channels(s - 1), with_skips));
  register_module("stages", stages);
  head = register_module("head", nn::Conv3d(nn::Conv3dOptions(cfg.base_channels, out_channels, 1)));
}

torch::Tensor DecoderImpl::forward(const std::vector<torch::Tensor>& features, torch::Tensor deepest) {
  auto y = std::move(deepest);
  const auto depth = static_cast<int64_t>(stages->size());
  for (int64_t j = 0; j < depth; ++j) {
    auto skip = with_skips_ ? features[depth - 1 - j] : torch::Tensor();
    y = stages[j]->as<DecoderStage>()->forward(y, skip);
  }
  return head(y);
}

// ---------------------------------------------------------------------------
// Models

SegModelImpl::SegModelImpl(const ModelConfig& cfg) : cfg_(cfg) {
  cfg.validate();
  encoder = register_module("encoder", Encoder(cfg));
  bottleneck = register_module("bottleneck", Bottleneck(cfg));
  decoder = register_module("decoder", Decoder(cfg, cfg.num_classes, true));
}

torch::Tensor SegModelImpl::forward(const torch::Tensor& x) {
  check_input_shape(cfg_, x);
  auto features = encoder(x);
  auto deep = bottleneck(features.back());
  return decoder(features, deep);
}

AutoencoderModelImpl::AutoencoderModelImpl(const ModelConfig& cfg) : cfg_(cfg) {
  cfg.validate();
  encoder = register_module("encoder", Encoder(cfg));
  decoder = register_module("decoder", Decoder(cfg, cfg.in_channels, false));
}

torch::Tensor AutoencoderModelImpl::forward(const torch::Tensor& x) {
  check_input_shape(cfg_, x);
  auto features = encoder(x);
  return decoder(features, features.back());
}

namespace {

void initialize(nn::Module& root) {
  torch::NoGradGuard guard;
  for (auto& m : root.modules(/*include_self=*/true)) {
    if (auto* c = m->as<nn::Conv3d>()) {
      he_normal_(c->weight);
      zero_if_defined(c->bias);
    } else if (auto* t = m->as<nn::ConvTranspose3d>()) {
      he_normal_(t->weight);
      zero_if_defined(t->bias);
    } else if (auto* b = m->as<TransformerBlock>()) {
      for (auto* lin : {&b->qkv, &b->proj, &b->fc1, &b->fc2}) {
        trunc_normal_((*lin)->weight, 0.02);
        zero_if_defined((*lin)->bias);
      }
    }
  }
  // The PE residual starts as the identity. Zeroing the last conv instead would put the
  // following ReLU exactly at its kink, where the gradient is 0, and the branch would never train.
  for (auto& m : root.modules(/*include_self=*/true)) {
    if (auto* pe = m->as<MlpPositionalEncoding>()) {
      auto last = pe->norms[pe->norms->size() - 1]->as<nn::BatchNorm3d>();
      last->weight.zero_();
      last->bias.zero_();
    }
  }
}

}  // namespace

SegModel build_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  torch::manual_seed(seed);
  SegModel model(cfg);
  initialize(*model);
  return model;
}

AutoencoderModel build_autoencoder(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  torch::manual_seed(seed);
  AutoencoderModel model(cfg);
  initialize(*model);
  return model;
}

void check_input_shape(const ModelConfig& cfg, const torch::Tensor& x) {
  if (x.dim() != 5)
    throw ShapeError(fmt::format("model input must be [N, C, D, H, W], got rank {}", x.dim()));
  if (x.size(1) != cfg.in_channels)
    throw ShapeError(fmt::format("model input has {} channels, expected {}", x.size(1), cfg.in_channels));
  static constexpr const char* kAxis[] = {"D", "H", "W"};
  const int64_t div = cfg.size_divisor();
  for (int a = 0; a < 3; ++a) {
    const int64_t n = x.size(2 + a);
    if (n < div || n % div != 0)
      throw ShapeError(fmt::format("spatial axis {} has size {}, not divisible by {} (2^(encoder_stages-1))", kAxis[a],
                                   n, div));
  }
}

torch::Tensor forward(SegModel& model, const torch::Tensor& x) { return model->forward(x); }

std::vector<std::pair<std::string, torch::Tensor>> named_state(const nn::Module& module, const std::string& prefix) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& p : module.named_parameters(true)) out.emplace_back(prefix + p.key(), p.value());
  for (const auto& b : module.named_buffers(true)) out.emplace_back(prefix + b.key(), b.value());
  return out;
}

void transfer_encoder_weights(AutoencoderModel& src, SegModel& dst) {
  load_encoder_state(named_state(*src->encoder, "encoder."), dst);
}

void load_encoder_state(const std::vector<std::pair<std::string, torch::Tensor>>& state, SegModel& dst) {
  auto targets = named_state(*dst->encoder, "encoder.");
  std::unordered_map<std::string, torch::Tensor> by_name;
  for (const auto& [name, t] : state) by_name.emplace(name, t);

  for (const auto& [name, t] : targets) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ValidationError(fmt::format("encoder parameter mismatch: '{}' missing in source", name));
    if (it->second.sizes() != t.sizes())
      throw ValidationError(fmt::format("encoder parameter mismatch: '{}' has shape [{}] in source, [{}] in target", name,
                                        fmt::join(it->second.sizes(), ","), fmt::join(t.sizes(), ",")));
  }
  if (by_name.size() != targets.size()) {
    for (const auto& [name, t] : state) {
      bool known = false;
      for (const auto& target : targets) known = known || target.first == name;
      if (!known) throw ValidationError(fmt::format("encoder parameter mismatch: '{}' unknown to target", name));
    }
  }
  torch::NoGradGuard guard;
  for (auto& [name, t] : targets) t.copy_(by_name.at(name));
}

}  // namespace voxseg
