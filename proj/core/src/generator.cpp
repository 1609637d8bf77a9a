#include "percgan/generator.hpp"

#include "percgan/errors.hpp"

namespace percgan {
namespace {

void push_norm(torch::nn::Sequential& seq, std::int64_t channels, NormKind norm) {
  if (norm == NormKind::Instance) seq->push_back(torch::nn::InstanceNorm2d(torch::nn::InstanceNorm2dOptions(channels)));
}

torch::nn::Conv2d conv(std::int64_t in, std::int64_t out, std::int64_t kernel, std::int64_t stride = 1,
                       std::int64_t padding = 0) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, kernel).stride(stride).padding(padding));
}

}  // namespace

std::string_view to_string(NormKind kind) { return kind == NormKind::Instance ? "instance" : "none"; }

NormKind norm_kind_from_string(std::string_view name) {
  if (name == "instance") return NormKind::Instance;
  if (name == "none") return NormKind::None;
  throw ConfigError("generator.norm: expected instance|none, got '" + std::string(name) + "'");
}

GeneratorConfig default_generator_config(std::int64_t resolution) {
  GeneratorConfig cfg;
  cfg.resolution = resolution;
  if (resolution >= 256) {
    cfg.downsampling = 3;
    cfg.residual_blocks = 9;
  }
  return cfg;
}

std::int64_t residual_trunk_receptive_field(const GeneratorConfig& cfg) {
  std::int64_t rf = 1;
  std::int64_t jump = 1;
  auto layer = [&](std::int64_t kernel, std::int64_t stride) {
    rf += (kernel - 1) * jump;
    jump *= stride;
  };
  layer(7, 1);
  for (std::int64_t i = 0; i < cfg.downsampling; ++i) layer(3, 2);
  for (std::int64_t i = 0; i < 2 * cfg.residual_blocks; ++i) layer(3, 1);
  return rf;
}

ResidualBlockImpl::ResidualBlockImpl(std::int64_t channels, NormKind norm) {
  torch::nn::Sequential body;
  body->push_back(torch::nn::ReflectionPad2d(1));
  body->push_back(conv(channels, channels, 3));
  push_norm(body, channels, norm);
  body->push_back(torch::nn::ReLU());
  body->push_back(torch::nn::ReflectionPad2d(1));
  body->push_back(conv(channels, channels, 3));
  push_norm(body, channels, norm);
  body_ = register_module("body", body);
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) { return x + body_->forward(x); }

GeneratorNetImpl::GeneratorNetImpl(const GeneratorConfig& cfg) : cfg_(cfg) {
  torch::nn::Sequential encoder;
  encoder->push_back(torch::nn::ReflectionPad2d(3));
  encoder->push_back(conv(cfg.channels, cfg.width, 7));
  push_norm(encoder, cfg.width, cfg.norm);
  encoder->push_back(torch::nn::ReLU());
  std::int64_t c = cfg.width;
  for (std::int64_t i = 0; i < cfg.downsampling; ++i) {
    encoder->push_back(conv(c, 2 * c, 3, 2, 1));
    push_norm(encoder, 2 * c, cfg.norm);
    encoder->push_back(torch::nn::ReLU());
    c *= 2;
  }
  encoder_ = register_module("encoder", encoder);

  torch::nn::Sequential residual;
  for (std::int64_t i = 0; i < cfg.residual_blocks; ++i) residual->push_back(ResidualBlock(c, cfg.norm));
  residual_ = register_module("residual", residual);

  torch::nn::Sequential decoder;
  for (std::int64_t i = 0; i < cfg.downsampling; ++i) {
    decoder->push_back(torch::nn::Upsample(
        torch::nn::UpsampleOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest)));
    decoder->push_back(conv(c, c / 2, 3, 1, 1));
    push_norm(decoder, c / 2, cfg.norm);
    decoder->push_back(torch::nn::ReLU());
    c /= 2;
  }
  decoder->push_back(torch::nn::ReflectionPad2d(3));
  decoder_ = register_module("decoder", decoder);
  output_ = register_module("output", conv(c, cfg.channels, 7));
}

torch::Tensor GeneratorNetImpl::encode(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != cfg_.channels) {
    throw ShapeError("generator expects N x " + std::to_string(cfg_.channels) + " x H x W input");
  }
  const std::int64_t divisor = std::int64_t{1} << cfg_.downsampling;
  if (x.size(2) % divisor != 0 || x.size(3) % divisor != 0) {
    throw ShapeError("generator input " + std::to_string(x.size(2)) + "x" + std::to_string(x.size(3)) +
                     " is not divisible by 2^M = " + std::to_string(divisor));
  }
  auto h = encoder_->forward(x);
  return cfg_.residual_blocks > 0 ? residual_->forward(h) : h;
}

torch::Tensor GeneratorNetImpl::forward(const torch::Tensor& x) {
  return torch::tanh(output_->forward(decoder_->forward(encode(x))));
}

std::int64_t GeneratorNetImpl::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : parameters()) n += p.numel();
  return n;
}

void GeneratorNetImpl::zero_output_layer() {
  torch::NoGradGuard no_grad;
  output_->weight.zero_();
  output_->bias.zero_();
}

GeneratorNet build_generator(const GeneratorConfig& cfg) {
  if (cfg.downsampling < 0) throw ConfigError("generator.downsampling must be >= 0");
  if (cfg.residual_blocks < 0) throw ConfigError("generator.residual_blocks must be >= 0");
  if (cfg.width < 1) throw ConfigError("generator.width must be >= 1");
  if (cfg.resolution < 1) throw ConfigError("generator.resolution must be >= 1");
  const std::int64_t divisor = std::int64_t{1} << cfg.downsampling;
  if (cfg.resolution % divisor != 0) {
    throw ConfigError("generator.downsampling: resolution " + std::to_string(cfg.resolution) +
                      " is not divisible by 2^M = " + std::to_string(divisor));
  }
  if (cfg.downsampling > 0 && cfg.resolution / divisor < 4) {
    throw ConfigError("generator.downsampling: M=" + std::to_string(cfg.downsampling) + " leaves a " +
                      std::to_string(cfg.resolution / divisor) + "x" + std::to_string(cfg.resolution / divisor) +
                      " bottleneck at resolution " + std::to_string(cfg.resolution) + " (minimum 4x4)");
  }
  return GeneratorNet(cfg);
}

torch::Tensor translate(GeneratorNet& g, const torch::Tensor& batch) { return g->forward(batch); }

}  // namespace percgan
