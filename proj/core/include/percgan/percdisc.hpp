#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "percgan/refnet.hpp"

namespace percgan {

enum class DiscriminatorMode {
  Perceptual,   // frozen pretrained trunk
  Plain,        // same topology, trunk trainable and randomly initialized
  RandomTrunk,  // frozen randomly initialized trunk
};

std::string_view to_string(DiscriminatorMode mode);
DiscriminatorMode discriminator_mode_from_string(std::string_view name);

struct DiscriminatorConfig {
  DiscriminatorMode mode = DiscriminatorMode::Perceptual;
  /// Built-in descriptor name ("vgg19", "compact7") used when `trunk_arch` is empty.
  std::string trunk_id = "vgg19";
  std::filesystem::path trunk_arch;
  std::filesystem::path trunk_weights;
  bool surgery = true;
  std::size_t levels = 5;
  /// Output width of c_1..c_{K-1}; empty means min(2 * input width, 512).
  /// A zero entry disables that combiner.
  std::vector<std::int64_t> combiner_widths;
  /// 1-based levels j whose h_j feed a patch head.
  std::vector<std::size_t> patch_levels;
  std::int64_t main_head_width = 64;
  std::int64_t patch_head_width = 32;
  double epsilon = 1e-7;
  std::uint64_t seed = 0;

  ArchDescriptor resolve_arch() const;
};

/// Default patch-head levels {K-2, K-1} for high-resolution runs.
std::vector<std::size_t> high_resolution_patch_levels(std::size_t levels);

/// c_i: conv3x3 -> leaky ReLU -> mean-pool(2) -> conv3x3 -> leaky ReLU.
class CombinerBlockImpl : public torch::nn::Module {
 public:
  CombinerBlockImpl(std::int64_t in_channels, std::int64_t out_channels);
  torch::Tensor forward(const torch::Tensor& h);

  std::int64_t in_channels() const { return in_channels_; }
  std::int64_t out_channels() const { return out_channels_; }

 private:
  std::int64_t in_channels_;
  std::int64_t out_channels_;
  torch::nn::Conv2d first_{nullptr};
  torch::nn::Conv2d second_{nullptr};
};
TORCH_MODULE(CombinerBlock);

/// d_main: two 3x3 convs (the second strided), global mean, linear -> one raw score.
class MainHeadImpl : public torch::nn::Module {
 public:
  MainHeadImpl(std::int64_t in_channels, std::int64_t width);
  torch::Tensor forward(const torch::Tensor& h);

 private:
  torch::nn::Conv2d conv1_{nullptr};
  torch::nn::Conv2d conv2_{nullptr};
  torch::nn::Linear fc_{nullptr};
};
TORCH_MODULE(MainHead);

/// d_j: 3x3 conv + leaky ReLU, then a 1x1 projection to one raw score per location.
class PatchHeadImpl : public torch::nn::Module {
 public:
  PatchHeadImpl(std::size_t level, std::int64_t in_channels, std::int64_t width);
  torch::Tensor forward(const torch::Tensor& h);
  std::size_t level() const { return level_; }

 private:
  std::size_t level_;
  torch::nn::Conv2d conv_{nullptr};
  torch::nn::Conv2d proj_{nullptr};
};
TORCH_MODULE(PatchHead);

struct PatchMap {
  std::size_t level = 0;
  torch::Tensor score;  // N x 1 x W_j x W_j raw
  torch::Tensor prob;   // squashed, clamped to [eps, 1 - eps]
};

struct DiscriminatorOutput {
  torch::Tensor main_score;  // N raw scores (least-squares objectives use these)
  torch::Tensor main_prob;   // N, clamped to [eps, 1 - eps]
  std::vector<PatchMap> patches;
  /// log d_main + sum_j sum_p log d_{j,p}, per image.
  torch::Tensor log_d;
  double epsilon = 1e-7;
  /// Whether the discriminated batch was attached to an autograd graph.
  bool input_requires_grad = false;

  static DiscriminatorOutput from_scores(torch::Tensor main_score, std::vector<std::pair<std::size_t, torch::Tensor>> patch_scores,
                                         double epsilon);
  /// Builds an output with the given probabilities; scores are their logits.
  static DiscriminatorOutput from_probabilities(const torch::Tensor& main_prob,
                                                const std::vector<std::pair<std::size_t, torch::Tensor>>& patch_probs,
                                                double epsilon = 1e-7);
};

/// Recomputes log_d from probabilities.
torch::Tensor multiscale_log_probability(const torch::Tensor& main_prob, const std::vector<PatchMap>& patches);

/// h_i = stack[c(h_prev), f_i]. Throws ShapeError naming `level` when the
/// spatial sizes disagree.
torch::Tensor combine(const torch::Tensor& h_prev, const torch::Tensor& f_i, CombinerBlock& c, std::size_t level);

class PerceptualDiscriminatorImpl : public torch::nn::Module {
 public:
  PerceptualDiscriminatorImpl(const DiscriminatorConfig& cfg, ReferenceNet trunk);

  /// Images in the generator range [-1, 1]; trunk normalization is applied here.
  DiscriminatorOutput forward(const torch::Tensor& images);

  const DiscriminatorConfig& config() const { return cfg_; }
  const ReferenceNet& trunk() const { return trunk_; }
  const BlockPartition& blocks() const { return partition_; }
  std::size_t combiner_count() const { return combiners_.size(); }
  std::size_t patch_head_count() const { return patch_heads_.size(); }
  /// Channel count of h_i, 1-based.
  std::int64_t representation_channels(std::size_t level) const { return h_channels_.at(level - 1); }

  const std::vector<CombinerBlock>& combiners() const { return combiners_; }

  /// Combiners and heads, plus the trunk only in plain mode.
  std::vector<torch::Tensor> trainable_parameters() const;
  std::vector<std::string> trainable_parameter_names() const;
  std::vector<std::string> frozen_parameter_names() const;
  std::int64_t trainable_parameter_count() const;

 private:
  bool is_trainable(const std::string& name) const;

  DiscriminatorConfig cfg_;
  ReferenceNet trunk_;
  BlockPartition partition_;
  std::vector<std::int64_t> h_channels_;
  std::vector<CombinerBlock> combiners_;
  MainHead main_head_{nullptr};
  std::vector<PatchHead> patch_heads_;
};
TORCH_MODULE(PerceptualDiscriminator);

/// Wires trunk, combiners and heads. Perceptual mode applies the VGG*-style
/// surgery to `trunk` when cfg.surgery is set and it is not yet modified.
/// Plain and RandomTrunk modes ignore the weights of `trunk` and only reuse
/// its descriptor and normalization.
PerceptualDiscriminator build_perceptual_discriminator(const DiscriminatorConfig& cfg, const ReferenceNet& trunk);

/// Same, loading the trunk named by the config (weights required in perceptual mode).
PerceptualDiscriminator build_perceptual_discriminator(const DiscriminatorConfig& cfg);

DiscriminatorOutput discriminate(PerceptualDiscriminator& disc, const torch::Tensor& batch);

}  // namespace percgan
