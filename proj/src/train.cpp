// SPDX-License-Identifier: Apache-2.0
#include "voxseg/train.hpp"

#include <ATen/autocast_mode.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <deque>
#include <fstream>
#include <future>
#include <numeric>

#include <fmt/format.h>

#include "voxseg/error.hpp"
#include "voxseg/losses.hpp"

namespace voxseg {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config

std::string regime_name(Regime r) { return r == Regime::TransBTS ? "transbts" : "nnunet"; }

Regime parse_regime(const std::string& name) {
  if (name == "transbts") return Regime::TransBTS;
  if (name == "nnunet") return Regime::NnUNet;
  throw ValidationError(fmt::format("unknown regime '{}' (expected transbts or nnunet)", name));
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ValidationError(fmt::format("train.epochs must be >= 1, got {}", epochs));
  if (batch_size < 1) throw ValidationError("train.batch_size must be >= 1");
  if (!(lr > 0)) throw ValidationError("train.lr must be > 0");
  if (weight_decay < 0) throw ValidationError("train.weight_decay must be >= 0");
  if (max_steps < 0) throw ValidationError("train.max_steps must be >= 0");
  try {
    validate_loss_weights(w_dice, w_ce);
  } catch (const ValidationError& e) {
    throw ValidationError(std::string("train.loss_weights: ") + e.what());
  }
}

TrainConfig TrainConfig::for_regime(Regime regime) {
  TrainConfig c;
  c.regime = regime;
  if (regime == Regime::NnUNet) c.w_dice = c.w_ce = 0.5;
  return c;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"weight_decay", c.weight_decay},
       {"loss_weights", {c.w_dice, c.w_ce}},
       {"poly_power", c.poly_power},
       {"mixed_precision", c.mixed_precision},
       {"float64", c.float64},
       {"seed", c.seed},
       {"regime", regime_name(c.regime)},
       {"max_steps", c.max_steps}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  if (j.contains("loss_weights")) {
    auto w = j.at("loss_weights").get<std::vector<double>>();
    if (w.size() != 2) throw ValidationError("train.loss_weights must be [w_dice, w_ce]");
    c.w_dice = w[0];
    c.w_ce = w[1];
  }
  c.poly_power = j.value("poly_power", c.poly_power);
  c.mixed_precision = j.value("mixed_precision", c.mixed_precision);
  c.float64 = j.value("float64", c.float64);
  c.seed = j.value("seed", c.seed);
  if (j.contains("regime")) c.regime = parse_regime(j.at("regime").get<std::string>());
  c.max_steps = j.value("max_steps", c.max_steps);
}

void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = {{"epoch", r.epoch},     {"loss", r.loss}, {"dice_loss", r.dice_loss}, {"ce_loss", r.ce_loss},
       {"lr", r.lr},           {"seconds", r.seconds}, {"steps", r.steps}};
}

int workers_from_env() {
  const char* v = std::getenv("VOXSEG_NUM_WORKERS");
  if (!v || !*v) return 0;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 0) throw ValidationError(fmt::format("VOXSEG_NUM_WORKERS must be a nonnegative integer, got '{}'", v));
  return static_cast<int>(std::min<long>(n, 64));
}

double poly_lr(double base_lr, int64_t epoch, int64_t total_epochs, double power) {
  const double progress = static_cast<double>(epoch) / static_cast<double>(total_epochs);
  return base_lr * std::pow(std::max(0.0, 1.0 - progress), power);
}

// ---------------------------------------------------------------------------
// Optimizer

Adam::Adam(std::vector<torch::Tensor> params, double weight_decay, double beta1, double beta2, double eps)
    : params_(std::move(params)), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.push_back(torch::zeros_like(p));
    v_.push_back(torch::zeros_like(p));
  }
}

void Adam::zero_grad() {
  for (auto& p : params_)
    if (p.grad().defined()) p.mutable_grad().zero_();
}

void Adam::step(double lr) {
  torch::NoGradGuard guard;
  ++steps_;
  const double bias1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double bias2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.grad().defined()) continue;
    auto g = p.grad();
    if (weight_decay_ != 0) g = g + weight_decay_ * p;
    m_[i].mul_(beta1_).add_(g, 1.0 - beta1_);
    v_[i].mul_(beta2_).addcmul_(g, g, 1.0 - beta2_);
    auto denom = (v_[i] / bias2).sqrt_().add_(eps_);
    p.addcdiv_(m_[i], denom, -lr / bias1);
  }
}

void Adam::save(Checkpoint& ckpt) const {
  ckpt.manifest["optimizer"] = {{"type", "adam"}, {"steps", steps_}, {"count", params_.size()}};
  for (size_t i = 0; i < params_.size(); ++i) {
    ckpt.tensors.emplace_back(fmt::format("adam.m.{}", i), m_[i]);
    ckpt.tensors.emplace_back(fmt::format("adam.v.{}", i), v_[i]);
  }
}

void Adam::load(const Checkpoint& ckpt) {
  const auto& opt = ckpt.manifest.at("optimizer");
  if (opt.at("count").get<size_t>() != params_.size())
    throw ValidationError("checkpoint mismatch: optimizer state size differs from model");
  steps_ = opt.at("steps").get<int64_t>();
  torch::NoGradGuard guard;
  for (size_t i = 0; i < params_.size(); ++i) {
    auto m = ckpt.find(fmt::format("adam.m.{}", i));
    auto v = ckpt.find(fmt::format("adam.v.{}", i));
    if (!m.defined() || !v.defined() || m.sizes() != params_[i].sizes())
      throw ValidationError(fmt::format("checkpoint mismatch: optimizer slot {} missing or misshapen", i));
    m_[i].copy_(m);
    v_[i].copy_(v);
  }
}

LossScaler::LossScaler(double initial, double growth, double backoff, int64_t interval)
    : scale_(initial), growth_(growth), backoff_(backoff), interval_(interval) {}

bool LossScaler::unscale_and_check(std::span<const torch::Tensor> params) {
  torch::NoGradGuard guard;
  bool finite = true;
  for (const auto& p : params) {
    if (!p.grad().defined()) continue;
    auto g = p.grad();
    g.div_(scale_);
    if (!torch::isfinite(g).all().item<bool>()) finite = false;
  }
  if (!finite) {
    scale_ *= backoff_;
    clean_steps_ = 0;
    return false;
  }
  if (++clean_steps_ >= interval_) {
    scale_ *= growth_;
    clean_steps_ = 0;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Data

namespace {

struct Batch {
  torch::Tensor image;   // [B, 4, D, H, W]
  torch::Tensor target;  // [B, D, H, W] channel indices
};

// Per-sample rng keyed by (seed, epoch, position) so that batches do not depend
// on which worker produced them.
Rng sample_rng(uint64_t seed, int64_t epoch, int64_t position) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(epoch),
                    static_cast<uint32_t>(position), 0x5eedu};
  return Rng(seq);
}

std::vector<int64_t> epoch_order(uint64_t seed, int64_t epoch, int64_t n) {
  std::vector<int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  auto rng = sample_rng(seed, epoch, -1);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

class BatchLoader {
 public:
  BatchLoader(std::span<const Sample> data, const AugmentConfig& augment, uint64_t seed, int64_t epoch,
              int64_t batch_size, int workers)
      : data_(data), augment_(augment), seed_(seed), epoch_(epoch), batch_size_(batch_size), workers_(workers),
        order_(epoch_order(seed, epoch, static_cast<int64_t>(data.size()))) {}

  int64_t size() const { return (static_cast<int64_t>(order_.size()) + batch_size_ - 1) / batch_size_; }

  Batch get(int64_t b) {
    if (workers_ == 0) return make(b);
    while (next_ < size() && static_cast<int64_t>(pending_.size()) < workers_) {
      pending_.push_back(std::async(std::launch::async, [this, i = next_] { return make(i); }));
      ++next_;
    }
    auto batch = pending_.front().get();
    pending_.pop_front();
    (void)b;
    return batch;
  }

 private:
  Batch make(int64_t b) const {
    std::vector<torch::Tensor> images, targets;
    const int64_t n = static_cast<int64_t>(order_.size());
    for (int64_t pos = b * batch_size_; pos < std::min(n, (b + 1) * batch_size_); ++pos) {
      const auto& s = data_[order_[pos]];
      auto rng = sample_rng(seed_, epoch_, pos);
      auto [img, lab] = augment_sample(s.image, s.labels, augment_, rng);
      images.push_back(img.data());
      targets.push_back(lab.channel_indices());
    }
    return {torch::stack(images), torch::stack(targets)};
  }

  std::span<const Sample> data_;
  AugmentConfig augment_;
  uint64_t seed_;
  int64_t epoch_, batch_size_;
  int workers_;
  std::vector<int64_t> order_;
  std::deque<std::future<Batch>> pending_;
  int64_t next_ = 0;
};

std::vector<Sample> prepare(std::span<const Sample> dataset, Regime regime) {
  std::vector<Sample> out;
  out.reserve(dataset.size());
  for (const auto& s : dataset) {
    auto [img, lab] = preprocess_case(s.image, s.labels, regime);
    out.push_back({img, lab});
  }
  return out;
}

class AutocastScope {
 public:
  explicit AutocastScope(bool enabled) : enabled_(enabled) {
    if (!enabled_) return;
    at::autocast::set_autocast_dtype(at::kCPU, at::kBFloat16);
    at::autocast::set_autocast_enabled(at::kCPU, true);
    at::autocast::increment_nesting();
  }
  ~AutocastScope() {
    if (!enabled_) return;
    if (at::autocast::decrement_nesting() == 0) at::autocast::clear_cache();
    at::autocast::set_autocast_enabled(at::kCPU, false);
  }
  AutocastScope(const AutocastScope&) = delete;
  AutocastScope& operator=(const AutocastScope&) = delete;

 private:
  bool enabled_;
};

void check_regimes(const TrainConfig& cfg, const AugmentConfig& augment) {
  cfg.validate();
  augment.validate();
  if (cfg.regime != augment.regime)
    throw ValidationError(fmt::format("train.regime ({}) differs from augment.regime ({})", regime_name(cfg.regime),
                                      regime_name(augment.regime)));
}

void emit(const EpochRecord& rec, const TrainOptions& options, std::ofstream* file_log) {
  const std::string line = nlohmann::json(rec).dump();
  if (options.log) *options.log << line << '\n' << std::flush;
  if (file_log) *file_log << line << '\n' << std::flush;
}

torch::Tensor generator_state() {
  auto gen = at::detail::getDefaultCPUGenerator();
  std::lock_guard<std::mutex> lock(gen.mutex());
  return gen.get_state();
}

void set_generator_state(const torch::Tensor& state) {
  auto gen = at::detail::getDefaultCPUGenerator();
  std::lock_guard<std::mutex> lock(gen.mutex());
  gen.set_state(state);
}

}  // namespace

Checkpoint make_training_checkpoint(const SegModel& model, const Adam& optimizer, const TrainConfig& cfg,
                                    int64_t epoch, int64_t global_step) {
  auto ckpt = make_model_checkpoint(model, epoch);
  ckpt.manifest["train_config"] = cfg;
  ckpt.manifest["train_state"] = {{"epoch", epoch}, {"global_step", global_step}};
  optimizer.save(ckpt);
  ckpt.tensors.emplace_back("rng.torch", generator_state());
  return ckpt;
}

TrainResult train(const ModelConfig& model_cfg, const TrainConfig& cfg, const AugmentConfig& augment,
                  std::span<const Sample> dataset, const TrainOptions& options) {
  model_cfg.validate();
  check_regimes(cfg, augment);
  if (dataset.empty()) throw ValidationError("training dataset is empty");

  auto model = build_model(model_cfg, cfg.seed);
  const auto dtype = cfg.float64 ? torch::kFloat64 : torch::kFloat32;
  if (cfg.float64) model->to(torch::kFloat64);
  if (options.init_encoder) load_encoder_checkpoint(*options.init_encoder, model);

  auto params = model->parameters();
  Adam optimizer(params, cfg.weight_decay);
  LossScaler scaler;
  const bool amp = cfg.mixed_precision && !cfg.float64;

  int64_t start_epoch = 0, global_step = 0;
  if (options.resume) {
    auto ckpt = read_checkpoint(*options.resume);
    if (!ckpt.manifest.contains("train_state"))
      throw ValidationError(fmt::format("'{}' holds no training state", options.resume->string()));
    load_model_state(ckpt, model);
    optimizer.load(ckpt);
    start_epoch = ckpt.manifest["train_state"].at("epoch").get<int64_t>();
    global_step = ckpt.manifest["train_state"].at("global_step").get<int64_t>();
    if (auto rng = ckpt.find("rng.torch"); rng.defined()) set_generator_state(rng);
  }

  const auto prepared = prepare(dataset, cfg.regime);
  std::unique_ptr<std::ofstream> file_log;
  if (options.out_dir) {
    fs::create_directories(*options.out_dir);
    file_log = std::make_unique<std::ofstream>(*options.out_dir / "train_log.jsonl",
                                               start_epoch > 0 ? std::ios::app : std::ios::trunc);
  }

  TrainResult result;
  for (int64_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    if (cfg.max_steps > 0 && global_step >= cfg.max_steps) break;
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = poly_lr(cfg.lr, epoch, cfg.epochs, cfg.poly_power);
    BatchLoader loader(prepared, augment, cfg.seed, epoch, cfg.batch_size, options.num_workers);
    model->train();

    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.lr = lr;
    for (int64_t b = 0; b < loader.size(); ++b) {
      if (cfg.max_steps > 0 && global_step >= cfg.max_steps) break;
      auto batch = loader.get(b);
      optimizer.zero_grad();
      LossTerms terms;
      {
        AutocastScope autocast(amp);
        auto logits = model->forward(batch.image.to(dtype));
        terms = combined_loss(logits.to(dtype), batch.target, cfg.w_dice, cfg.w_ce);
      }
      const double loss = terms.total.item<double>();
      if (!std::isfinite(loss)) throw std::runtime_error(fmt::format("non-finite loss at step {}", global_step));
      if (amp) {
        (terms.total * scaler.scale()).backward();
        if (scaler.unscale_and_check(params)) optimizer.step(lr);
      } else {
        terms.total.backward();
        optimizer.step(lr);
      }
      ++global_step;
      ++rec.steps;
      rec.loss += loss;
      rec.dice_loss += terms.dice.item<double>();
      rec.ce_loss += terms.ce.item<double>();
    }
    if (rec.steps == 0) break;
    rec.loss /= rec.steps;
    rec.dice_loss /= rec.steps;
    rec.ce_loss /= rec.steps;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(rec);
    emit(rec, options, file_log.get());

    if (options.out_dir) {
      auto ckpt = make_training_checkpoint(model, optimizer, cfg, epoch + 1, global_step);
      write_checkpoint(*options.out_dir / fmt::format("checkpoint_epoch_{:04d}.ckpt", epoch + 1), ckpt);
      write_checkpoint(*options.out_dir / "model.ckpt", ckpt);
    }
  }
  model->eval();
  result.model = model;
  result.steps = global_step;
  return result;
}

PretrainResult pretrain(const ModelConfig& model_cfg, const TrainConfig& cfg, const AugmentConfig& augment,
                        std::span<const MultiModalVolume> images, const TrainOptions& options) {
  model_cfg.validate();
  check_regimes(cfg, augment);
  if (images.empty()) throw ValidationError("pretraining dataset is empty");

  auto model = build_autoencoder(model_cfg, cfg.seed);
  const auto dtype = cfg.float64 ? torch::kFloat64 : torch::kFloat32;
  if (cfg.float64) model->to(torch::kFloat64);
  Adam optimizer(model->parameters(), cfg.weight_decay);

  // Labels are unused; a blank volume rides along through the spatial transforms.
  std::vector<Sample> samples;
  for (const auto& img : images) {
    const auto [D, H, W] = img.shape();
    samples.push_back({img, LabelVolume(torch::zeros({D, H, W}, torch::kUInt8), img.spacing())});
  }
  const auto prepared = prepare(samples, cfg.regime);

  std::unique_ptr<std::ofstream> file_log;
  if (options.out_dir) {
    fs::create_directories(*options.out_dir);
    file_log = std::make_unique<std::ofstream>(*options.out_dir / "pretrain_log.jsonl", std::ios::trunc);
  }

  PretrainResult result;
  int64_t global_step = 0;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.max_steps > 0 && global_step >= cfg.max_steps) break;
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = poly_lr(cfg.lr, epoch, cfg.epochs, cfg.poly_power);
    BatchLoader loader(prepared, augment, cfg.seed, epoch, cfg.batch_size, options.num_workers);
    model->train();
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.lr = lr;
    for (int64_t b = 0; b < loader.size(); ++b) {
      if (cfg.max_steps > 0 && global_step >= cfg.max_steps) break;
      auto x = loader.get(b).image.to(dtype);
      optimizer.zero_grad();
      auto loss = reconstruction_loss(model->forward(x), x);
      loss.backward();
      optimizer.step(lr);
      ++global_step;
      ++rec.steps;
      rec.loss += loss.item<double>();
    }
    if (rec.steps == 0) break;
    rec.loss /= rec.steps;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(rec);
    emit(rec, options, file_log.get());
  }
  model->eval();
  result.encoder = make_encoder_checkpoint(model, static_cast<int64_t>(result.history.size()));
  result.model = model;
  if (options.out_dir) write_checkpoint(*options.out_dir / "encoder.ckpt", result.encoder);
  return result;
}

double soft_dice_score(SegModel& model, std::span<const Sample> cases, Regime regime) {
  torch::NoGradGuard guard;
  model->eval();
  const auto dtype = model->parameters().front().scalar_type();
  double total = 0;
  for (const auto& c : cases) {
    auto [img, lab] = preprocess_case(c.image, c.labels, regime);
    // Zero-pad each axis up to the model's size divisor, score the original extent.
    const auto shape = img.shape();
    const int64_t div = model->config().size_divisor();
    std::vector<int64_t> pad;
    for (int a = 2; a >= 0; --a) {
      pad.push_back(0);
      pad.push_back((div - shape[a] % div) % div);
    }
    auto x = torch::nn::functional::pad(img.data().unsqueeze(0), torch::nn::functional::PadFuncOptions(pad));
    auto logits = model->forward(x.to(dtype))
                      .narrow(2, 0, shape[0])
                      .narrow(3, 0, shape[1])
                      .narrow(4, 0, shape[2]);
    auto probs = torch::softmax(logits, 1);
    total += 1.0 - soft_dice_loss(probs, lab.channel_indices().unsqueeze(0)).item<double>();
  }
  return total / static_cast<double>(cases.size());
}

}  // namespace voxseg
