#include "percgan/percdisc.hpp"

#include <algorithm>
#include <cmath>

#include "percgan/errors.hpp"

namespace percgan {
namespace {

constexpr double kLeakySlope = 0.2;

torch::nn::Conv2d conv3x3(std::int64_t in, std::int64_t out, std::int64_t stride = 1) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

}  // namespace

std::string_view to_string(DiscriminatorMode mode) {
  switch (mode) {
    case DiscriminatorMode::Perceptual:
      return "perceptual";
    case DiscriminatorMode::Plain:
      return "plain";
    case DiscriminatorMode::RandomTrunk:
      return "random";
  }
  return "?";
}

DiscriminatorMode discriminator_mode_from_string(std::string_view name) {
  if (name == "perceptual") return DiscriminatorMode::Perceptual;
  if (name == "plain") return DiscriminatorMode::Plain;
  if (name == "random") return DiscriminatorMode::RandomTrunk;
  throw ConfigError("discriminator.mode: expected perceptual|plain|random, got '" + std::string(name) + "'");
}

ArchDescriptor DiscriminatorConfig::resolve_arch() const {
  if (!trunk_arch.empty()) return ArchDescriptor::from_file(trunk_arch);
  if (trunk_id == "vgg19") return vgg19_trunk();
  if (trunk_id == "compact7") return compact_trunk();
  throw ConfigError("discriminator.trunk: unknown built-in trunk '" + trunk_id + "'");
}

std::vector<std::size_t> high_resolution_patch_levels(std::size_t levels) {
  if (levels < 3) return {};
  return {levels - 2, levels - 1};
}

CombinerBlockImpl::CombinerBlockImpl(std::int64_t in_channels, std::int64_t out_channels)
    : in_channels_(in_channels), out_channels_(out_channels) {
  if (out_channels_ > 0) {
    first_ = register_module("conv1", conv3x3(in_channels_, out_channels_));
    second_ = register_module("conv2", conv3x3(out_channels_, out_channels_));
  }
}

torch::Tensor CombinerBlockImpl::forward(const torch::Tensor& h) {
  if (out_channels_ == 0) {
    return torch::zeros({h.size(0), 0, h.size(2) / 2, h.size(3) / 2}, h.options());
  }
  auto x = torch::leaky_relu(first_->forward(h), kLeakySlope);
  x = torch::avg_pool2d(x, 2, 2);
  return torch::leaky_relu(second_->forward(x), kLeakySlope);
}

MainHeadImpl::MainHeadImpl(std::int64_t in_channels, std::int64_t width) {
  conv1_ = register_module("conv1", conv3x3(in_channels, width));
  conv2_ = register_module("conv2", conv3x3(width, width, 2));
  fc_ = register_module("fc", torch::nn::Linear(width, 1));
}

torch::Tensor MainHeadImpl::forward(const torch::Tensor& h) {
  auto x = torch::leaky_relu(conv1_->forward(h), kLeakySlope);
  x = torch::leaky_relu(conv2_->forward(x), kLeakySlope);
  return fc_->forward(x.mean({2, 3})).squeeze(1);
}

PatchHeadImpl::PatchHeadImpl(std::size_t level, std::int64_t in_channels, std::int64_t width) : level_(level) {
  conv_ = register_module("conv", conv3x3(in_channels, width));
  proj_ = register_module("proj", torch::nn::Conv2d(torch::nn::Conv2dOptions(width, 1, 1)));
}

torch::Tensor PatchHeadImpl::forward(const torch::Tensor& h) {
  return proj_->forward(torch::leaky_relu(conv_->forward(h), kLeakySlope));
}

torch::Tensor multiscale_log_probability(const torch::Tensor& main_prob, const std::vector<PatchMap>& patches) {
  auto log_d = torch::log(main_prob);
  for (const auto& p : patches) log_d = log_d + torch::log(p.prob).flatten(1).sum(1);
  return log_d;
}

DiscriminatorOutput DiscriminatorOutput::from_scores(torch::Tensor main_score,
                                                     std::vector<std::pair<std::size_t, torch::Tensor>> patch_scores,
                                                     double epsilon) {
  DiscriminatorOutput out;
  out.epsilon = epsilon;
  out.main_score = std::move(main_score);
  out.main_prob = torch::sigmoid(out.main_score).clamp(epsilon, 1.0 - epsilon);
  for (auto& [level, score] : patch_scores) {
    auto prob = torch::sigmoid(score).clamp(epsilon, 1.0 - epsilon);
    out.patches.push_back({level, std::move(score), std::move(prob)});
  }
  out.log_d = multiscale_log_probability(out.main_prob, out.patches);
  return out;
}

DiscriminatorOutput DiscriminatorOutput::from_probabilities(
    const torch::Tensor& main_prob, const std::vector<std::pair<std::size_t, torch::Tensor>>& patch_probs, double epsilon) {
  DiscriminatorOutput out;
  out.epsilon = epsilon;
  out.main_prob = main_prob.clamp(epsilon, 1.0 - epsilon);
  out.main_score = torch::logit(out.main_prob);
  for (const auto& [level, prob] : patch_probs) {
    auto p = prob.clamp(epsilon, 1.0 - epsilon);
    out.patches.push_back({level, torch::logit(p), p});
  }
  out.log_d = multiscale_log_probability(out.main_prob, out.patches);
  return out;
}

torch::Tensor combine(const torch::Tensor& h_prev, const torch::Tensor& f_i, CombinerBlock& c, std::size_t level) {
  auto reduced = c->forward(h_prev);
  if (reduced.size(2) != f_i.size(2) || reduced.size(3) != f_i.size(3)) {
    throw ShapeError("level " + std::to_string(level) + ": combiner output is " + std::to_string(reduced.size(2)) + "x" +
                     std::to_string(reduced.size(3)) + " but f_" + std::to_string(level) + " is " +
                     std::to_string(f_i.size(2)) + "x" + std::to_string(f_i.size(3)));
  }
  return torch::cat({reduced, f_i}, 1);
}

PerceptualDiscriminatorImpl::PerceptualDiscriminatorImpl(const DiscriminatorConfig& cfg, ReferenceNet trunk)
    : cfg_(cfg), trunk_(std::move(trunk)) {
  if (cfg_.levels < 1) throw ConfigError("discriminator.levels must be >= 1");
  if (!(cfg_.epsilon > 0.0 && cfg_.epsilon < 0.5)) throw ConfigError("discriminator.epsilon must lie in (0, 0.5)");
  for (auto level : cfg_.patch_levels) {
    if (level < 1 || level > cfg_.levels) {
      throw ConfigError("discriminator.patch_levels: level " + std::to_string(level) + " is outside [1, " +
                        std::to_string(cfg_.levels) + "]");
    }
  }
  if (!cfg_.combiner_widths.empty() && cfg_.combiner_widths.size() != cfg_.levels - 1) {
    throw ConfigError("discriminator.combiner_widths: expected " + std::to_string(cfg_.levels - 1) + " entries, got " +
                      std::to_string(cfg_.combiner_widths.size()));
  }
  trunk_ = register_module("trunk", trunk_);
  const auto boundaries = default_boundaries(trunk_->arch(), cfg_.levels);
  partition_ = partition(trunk_, boundaries);

  // Structural spatial contract: every c_i halves, every b_i (i >= 1) halves.
  h_channels_.push_back(partition_.channels[0]);
  for (std::size_t i = 1; i < cfg_.levels; ++i) {
    const auto in = h_channels_.back();
    const auto width = cfg_.combiner_widths.empty() ? std::min<std::int64_t>(2 * in, 512) : cfg_.combiner_widths[i - 1];
    if (width < 0) throw ConfigError("discriminator.combiner_widths must be non-negative");
    if (partition_.downsampling[i] != 2) {
      throw ShapeError("level " + std::to_string(i + 1) + ": trunk block does not halve the spatial size");
    }
    combiners_.push_back(register_module("combiner" + std::to_string(i), CombinerBlock(in, width)));
    h_channels_.push_back(width + partition_.channels[i]);
  }
  main_head_ = register_module("main_head", MainHead(h_channels_.back(), cfg_.main_head_width));
  for (auto level : cfg_.patch_levels) {
    patch_heads_.push_back(register_module("patch_head" + std::to_string(level),
                                           PatchHead(level, h_channels_[level - 1], cfg_.patch_head_width)));
  }
}

DiscriminatorOutput PerceptualDiscriminatorImpl::forward(const torch::Tensor& images) {
  auto pyramid = extract_features(trunk_, partition_, trunk_->normalize(images));
  std::vector<torch::Tensor> h{pyramid.levels[0]};
  for (std::size_t i = 0; i < combiners_.size(); ++i) {
    h.push_back(combine(h.back(), pyramid.levels[i + 1], combiners_[i], i + 2));
  }
  std::vector<std::pair<std::size_t, torch::Tensor>> patch_scores;
  for (auto& head : patch_heads_) patch_scores.emplace_back(head->level(), head->forward(h[head->level() - 1]));
  auto out = DiscriminatorOutput::from_scores(main_head_->forward(h.back()), std::move(patch_scores), cfg_.epsilon);
  out.input_requires_grad = images.requires_grad();
  auto finite = torch::isfinite(out.main_score).all().item<bool>();
  for (const auto& p : out.patches) finite = finite && torch::isfinite(p.score).all().item<bool>();
  if (!finite) throw NumericError("non-finite discriminator score");
  return out;
}

bool PerceptualDiscriminatorImpl::is_trainable(const std::string& name) const {
  // Decided by ownership, not by requires_grad, which the trainer toggles.
  return name.rfind("trunk.", 0) != 0 || trunk_->trainable();
}

std::vector<torch::Tensor> PerceptualDiscriminatorImpl::trainable_parameters() const {
  std::vector<torch::Tensor> out;
  for (const auto& item : named_parameters()) {
    if (is_trainable(item.key())) out.push_back(item.value());
  }
  return out;
}

std::vector<std::string> PerceptualDiscriminatorImpl::trainable_parameter_names() const {
  std::vector<std::string> out;
  for (const auto& item : named_parameters()) {
    if (is_trainable(item.key())) out.push_back(item.key());
  }
  return out;
}

std::vector<std::string> PerceptualDiscriminatorImpl::frozen_parameter_names() const {
  std::vector<std::string> out;
  for (const auto& item : named_parameters()) {
    if (!is_trainable(item.key())) out.push_back(item.key());
  }
  return out;
}

std::int64_t PerceptualDiscriminatorImpl::trainable_parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : trainable_parameters()) n += p.numel();
  return n;
}

PerceptualDiscriminator build_perceptual_discriminator(const DiscriminatorConfig& cfg, const ReferenceNet& trunk) {
  torch::manual_seed(cfg.seed);
  switch (cfg.mode) {
    case DiscriminatorMode::Perceptual: {
      if (trunk->trainable()) throw ConfigError("perceptual mode requires a frozen reference trunk");
      auto prepared = cfg.surgery && !trunk->surgically_modified() ? apply_surgery(trunk) : trunk;
      return PerceptualDiscriminator(cfg, prepared);
    }
    case DiscriminatorMode::RandomTrunk:
    case DiscriminatorMode::Plain: {
      const bool trainable = cfg.mode == DiscriminatorMode::Plain;
      auto random = random_reference_net(trunk->arch(), cfg.seed ^ 0x7275'6e6b'0000'0001ULL, trainable,
                                         trunk->normalization());
      if (cfg.surgery && !random->surgically_modified()) random = apply_surgery(random);
      return PerceptualDiscriminator(cfg, random);
    }
  }
  throw ConfigError("unhandled discriminator mode");
}

PerceptualDiscriminator build_perceptual_discriminator(const DiscriminatorConfig& cfg) {
  const auto arch = cfg.resolve_arch();
  if (cfg.mode == DiscriminatorMode::Perceptual) {
    if (cfg.trunk_weights.empty()) throw ConfigError("discriminator.trunk_weights is required in perceptual mode");
    return build_perceptual_discriminator(cfg, load_reference_weights(cfg.trunk_weights, arch));
  }
  return build_perceptual_discriminator(cfg, random_reference_net(arch, cfg.seed));
}

DiscriminatorOutput discriminate(PerceptualDiscriminator& disc, const torch::Tensor& batch) { return disc->forward(batch); }

}  // namespace percgan
