#pragma once

#include <cstdint>
#include <string>

#include <torch/torch.h>

namespace percgan {

enum class NormKind { Instance, None };

std::string_view to_string(NormKind kind);
NormKind norm_kind_from_string(std::string_view name);

struct GeneratorConfig {
  std::int64_t downsampling = 2;     // M
  std::int64_t residual_blocks = 6;  // N
  std::int64_t width = 64;
  NormKind norm = NormKind::Instance;
  std::int64_t resolution = 160;
  std::int64_t channels = 3;
};

/// Standard choices per working resolution: M=2, N=6 up to 160 px, M=3,
/// N=9 from 256 px.
GeneratorConfig default_generator_config(std::int64_t resolution);

/// Receptive field (pixels) of one output unit of the last residual block.
std::int64_t residual_trunk_receptive_field(const GeneratorConfig& cfg);

class ResidualBlockImpl : public torch::nn::Module {
 public:
  ResidualBlockImpl(std::int64_t channels, NormKind norm);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(ResidualBlock);

/// Downsample / residual / upsample transformer network. Output is tanh-bounded.
class GeneratorNetImpl : public torch::nn::Module {
 public:
  explicit GeneratorNetImpl(const GeneratorConfig& cfg);

  /// Throws ShapeError unless the spatial size is divisible by 2^M.
  torch::Tensor forward(const torch::Tensor& x);

  /// Output of the residual trunk (the bottleneck representation).
  torch::Tensor encode(const torch::Tensor& x);

  const GeneratorConfig& config() const { return cfg_; }
  std::int64_t parameter_count() const;

  /// Zeroes the final convolution so the output is tanh(0) = 0.
  void zero_output_layer();

 private:
  GeneratorConfig cfg_;
  torch::nn::Sequential encoder_{nullptr};
  torch::nn::Sequential residual_{nullptr};
  torch::nn::Sequential decoder_{nullptr};
  torch::nn::Conv2d output_{nullptr};
};
TORCH_MODULE(GeneratorNet);

/// Validates the config (bottleneck at least 4x4) and builds the network.
GeneratorNet build_generator(const GeneratorConfig& cfg);

torch::Tensor translate(GeneratorNet& g, const torch::Tensor& batch);

}  // namespace percgan
