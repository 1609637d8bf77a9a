#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <torch/torch.h>

namespace percgan {

enum class LayerKind { Conv, Relu, LeakyRelu, MaxPool, AvgPool };

std::string_view to_string(LayerKind kind);

/// One entry of a chain network. Convolutions use "same" padding.
struct LayerSpec {
  LayerKind kind = LayerKind::Conv;
  std::int64_t in_channels = 0;
  std::int64_t out_channels = 0;
  std::int64_t kernel = 0;
  std::int64_t stride = 1;
  double negative_slope = 0.0;

  bool halves_spatial() const;
  bool has_parameters() const { return kind == LayerKind::Conv; }
};

/// Layer sequence of a chain (branch-free) convolutional trunk.
///
/// Text form, one layer per line, '#' starts a comment:
///
///     source vgg19
///     conv 3 64 kernel=3 stride=1
///     relu
///     leaky_relu slope=0.2
///     maxpool kernel=2 stride=2
///     avgpool kernel=2 stride=2
struct ArchDescriptor {
  std::string source;
  std::vector<LayerSpec> layers;

  /// Throws LoadError naming the 1-based line on malformed input.
  static ArchDescriptor parse(std::string_view text, std::string_view origin = "<string>");
  static ArchDescriptor from_file(const std::filesystem::path& path);

  std::string to_text() const;
  void save(const std::filesystem::path& path) const;

  /// Checks chain channel continuity and the 2x2/stride-2 pool contract.
  void validate() const;

  /// Parameter-key prefix "block{i}.layer{j}" of every layer, where blocks
  /// split the chain right before each pool.
  std::vector<std::string> layer_keys() const;

  std::size_t conv_count() const;
};

/// The sixteen-convolution VGG-19 feature trunk (without the final pool).
ArchDescriptor vgg19_trunk();

/// Seven-convolution, three-pool VGG-style trunk used for desk-scale runs.
ArchDescriptor compact_trunk();

/// Per-channel input statistics of the trunk's pretraining data. Images in
/// [0, 1] are mapped to (x - mean) / scale.
struct Normalization {
  std::vector<float> mean{0.485F, 0.456F, 0.406F};
  std::vector<float> scale{0.229F, 0.224F, 0.225F};

  static Normalization imagenet() { return {}; }
  static Normalization symmetric() { return {{0.5F, 0.5F, 0.5F}, {0.5F, 0.5F, 0.5F}}; }
};

/// Frozen pretrained chain trunk. Parameters are registered as
/// "block{i}.layer{j}.weight|bias" and never receive optimizer updates
/// unless the net was explicitly built trainable (plain-discriminator
/// baseline only).
class ReferenceNetImpl : public torch::nn::Module {
 public:
  ReferenceNetImpl(ArchDescriptor arch, Normalization norm, bool surgically_modified = false, bool trainable = false);

  const ArchDescriptor& arch() const { return arch_; }
  const Normalization& normalization() const { return norm_; }
  bool surgically_modified() const { return surgically_modified_; }
  bool trainable() const { return trainable_; }

  /// Runs layers [begin, end) on x.
  torch::Tensor forward_range(const torch::Tensor& x, std::size_t begin, std::size_t end) const;

  /// Whole chain.
  torch::Tensor forward(const torch::Tensor& x) const { return forward_range(x, 0, arch_.layers.size()); }

  /// Maps generator-range images in [-1, 1] to trunk input statistics.
  torch::Tensor normalize(const torch::Tensor& images) const;

  /// Parameters keyed by their container names.
  std::map<std::string, torch::Tensor> weights() const;

  /// Weight and bias of conv layer `index` (undefined tensors for other layers).
  std::pair<torch::Tensor, torch::Tensor> conv_parameters(std::size_t index) const;

 private:
  ArchDescriptor arch_;
  Normalization norm_;
  bool surgically_modified_;
  bool trainable_;
  std::vector<torch::Tensor> conv_weight_;
  std::vector<torch::Tensor> conv_bias_;
  torch::Tensor mean_;
  torch::Tensor scale_;
};
TORCH_MODULE(ReferenceNet);

/// Sidecar manifest path for a weights container: "trunk.safetensors" ->
/// "trunk.manifest.json".
std::filesystem::path manifest_path_for(const std::filesystem::path& weights_path);

/// Loads a name-keyed weights container plus its manifest. Throws LoadError
/// naming a missing key, or ShapeError naming the layer and both shapes.
ReferenceNet load_reference_weights(const std::filesystem::path& weights_path, const ArchDescriptor& arch);

/// Writes the weights container and its manifest (shapes, normalization,
/// surgery record).
void save_reference_weights(const ReferenceNet& net, const std::filesystem::path& weights_path);

/// Fixed-seed Kaiming-uniform trunk. Frozen unless `trainable`.
ReferenceNet random_reference_net(const ArchDescriptor& arch, std::uint64_t seed, bool trainable = false,
                                  Normalization norm = Normalization::symmetric());

/// Max-pool -> mean-pool, rectifier -> leaky rectifier (slope 0.2).
/// Convolution weights are shared bit-for-bit. Throws SurgeryError if
/// `net` is already modified.
ReferenceNet apply_surgery(const ReferenceNet& net);

/// Descriptor-level half of the surgery.
ArchDescriptor surgically_modified(const ArchDescriptor& arch);

/// Contiguous blocks b_0..b_{K-1} covering a prefix of the trunk.
struct BlockPartition {
  std::vector<std::pair<std::size_t, std::size_t>> ranges;  // [begin, end) layer indices
  std::vector<std::int64_t> channels;                        // output channels C_i
  std::vector<std::int64_t> downsampling;                    // 1 for b_0, 2 afterwards

  std::size_t size() const { return ranges.size(); }
};

/// `boundaries` are the first layer index of each block; the first must be
/// 0 and every later one must sit on a spatial-halving layer. The last block
/// runs up to (not including) the next halving layer or the end of the chain.
BlockPartition partition(const ReferenceNet& net, std::span<const std::size_t> boundaries);

/// Boundaries splitting right before each of the first K-1 pools.
std::vector<std::size_t> default_boundaries(const ArchDescriptor& arch, std::size_t levels);

struct FeaturePyramid {
  std::vector<torch::Tensor> levels;  // f_1..f_K
  std::vector<std::int64_t> sizes;    // W_i
  std::vector<std::int64_t> channels; // C_i
};

/// f_1 = b_0(batch), f_i = b_{i-1}(f_{i-1}). `batch` must already carry the
/// trunk's input normalization. Gradients flow to the input.
FeaturePyramid extract_features(const ReferenceNet& net, const BlockPartition& part, const torch::Tensor& batch);

}  // namespace percgan
