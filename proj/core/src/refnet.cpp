#include "percgan/refnet.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "percgan/errors.hpp"
#include "percgan/tensor_io.hpp"

namespace percgan {
namespace {

constexpr double kSurgerySlope = 0.2;

std::string shape_string(c10::IntArrayRef sizes) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < sizes.size(); ++i) os << (i ? ", " : "") << sizes[i];
  os << ']';
  return os.str();
}

std::int64_t parse_int(std::string_view token, std::string_view origin, std::size_t line) {
  std::int64_t value = 0;
  const auto* end = token.data() + token.size();
  auto [ptr, ec] = std::from_chars(token.data(), end, value);
  if (ec != std::errc{} || ptr != end) {
    throw LoadError(std::string(origin) + ":" + std::to_string(line) + ": expected integer, got '" +
                    std::string(token) + "'");
  }
  return value;
}

torch::Tensor channel_tensor(const std::vector<float>& values) {
  return torch::tensor(values, torch::kFloat32).view({1, -1, 1, 1});
}

}  // namespace

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv:
      return "conv";
    case LayerKind::Relu:
      return "relu";
    case LayerKind::LeakyRelu:
      return "leaky_relu";
    case LayerKind::MaxPool:
      return "maxpool";
    case LayerKind::AvgPool:
      return "avgpool";
  }
  return "?";
}

bool LayerSpec::halves_spatial() const {
  if (kind == LayerKind::MaxPool || kind == LayerKind::AvgPool) return true;
  return kind == LayerKind::Conv && stride == 2;
}

ArchDescriptor ArchDescriptor::parse(std::string_view text, std::string_view origin) {
  ArchDescriptor desc;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& what) {
    return LoadError(std::string(origin) + ":" + std::to_string(line_no) + ": " + what);
  };
  while (std::getline(in, raw)) {
    ++line_no;
    if (auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
    std::istringstream tokens(raw);
    std::string kind;
    if (!(tokens >> kind)) continue;
    std::vector<std::string> positional;
    std::map<std::string, std::string> options;
    for (std::string tok; tokens >> tok;) {
      if (auto eq = tok.find('='); eq != std::string::npos) {
        options[tok.substr(0, eq)] = tok.substr(eq + 1);
      } else {
        positional.push_back(tok);
      }
    }
    auto option_int = [&](const std::string& key, std::int64_t fallback) {
      auto it = options.find(key);
      return it == options.end() ? fallback : parse_int(it->second, origin, line_no);
    };

    if (kind == "source") {
      if (positional.size() != 1) throw fail("'source' takes exactly one identifier");
      desc.source = positional.front();
      continue;
    }
    LayerSpec layer;
    if (kind == "conv") {
      if (positional.size() != 2) throw fail("'conv' needs <in_channels> <out_channels>");
      layer.kind = LayerKind::Conv;
      layer.in_channels = parse_int(positional[0], origin, line_no);
      layer.out_channels = parse_int(positional[1], origin, line_no);
      layer.kernel = option_int("kernel", 3);
      layer.stride = option_int("stride", 1);
      if (layer.in_channels <= 0 || layer.out_channels <= 0) throw fail("channel counts must be positive");
      if (layer.kernel <= 0 || layer.kernel % 2 == 0) throw fail("conv kernel must be odd and positive");
      if (layer.stride != 1 && layer.stride != 2) throw fail("conv stride must be 1 or 2");
    } else if (kind == "relu") {
      layer.kind = LayerKind::Relu;
    } else if (kind == "leaky_relu") {
      layer.kind = LayerKind::LeakyRelu;
      auto it = options.find("slope");
      try {
        layer.negative_slope = it == options.end() ? kSurgerySlope : std::stod(it->second);
      } catch (const std::exception&) {
        throw fail("bad slope '" + it->second + "'");
      }
    } else if (kind == "maxpool" || kind == "avgpool") {
      layer.kind = kind == "maxpool" ? LayerKind::MaxPool : LayerKind::AvgPool;
      layer.kernel = option_int("kernel", 2);
      layer.stride = option_int("stride", 2);
      if (layer.kernel != 2 || layer.stride != 2) throw fail("pool layers must use kernel=2 stride=2");
    } else {
      throw fail("unknown layer type '" + kind + "'");
    }
    desc.layers.push_back(layer);
  }
  if (desc.layers.empty()) throw LoadError(std::string(origin) + ": descriptor has no layers");
  if (desc.source.empty()) desc.source = std::string(origin);
  desc.validate();
  return desc;
}

ArchDescriptor ArchDescriptor::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open arch descriptor: " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse(buf.str(), path.string());
}

std::string ArchDescriptor::to_text() const {
  std::ostringstream os;
  os << "source " << source << '\n';
  for (const auto& l : layers) {
    os << to_string(l.kind);
    switch (l.kind) {
      case LayerKind::Conv:
        os << ' ' << l.in_channels << ' ' << l.out_channels << " kernel=" << l.kernel << " stride=" << l.stride;
        break;
      case LayerKind::LeakyRelu:
        os << " slope=" << l.negative_slope;
        break;
      case LayerKind::MaxPool:
      case LayerKind::AvgPool:
        os << " kernel=" << l.kernel << " stride=" << l.stride;
        break;
      case LayerKind::Relu:
        break;
    }
    os << '\n';
  }
  return os.str();
}

void ArchDescriptor::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << to_text();
}

void ArchDescriptor::validate() const {
  std::int64_t channels = -1;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if ((l.kind == LayerKind::MaxPool || l.kind == LayerKind::AvgPool) && (l.kernel != 2 || l.stride != 2)) {
      throw LoadError("layer " + std::to_string(i) + ": pool must halve spatial size (kernel 2, stride 2)");
    }
    if (l.kind != LayerKind::Conv) continue;
    if (channels >= 0 && l.in_channels != channels) {
      throw LoadError("layer " + std::to_string(i) + ": conv expects " + std::to_string(l.in_channels) +
                      " input channels but the chain provides " + std::to_string(channels));
    }
    channels = l.out_channels;
  }
}

std::vector<std::string> ArchDescriptor::layer_keys() const {
  std::vector<std::string> keys;
  keys.reserve(layers.size());
  std::size_t block = 0;
  std::size_t within = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const bool is_pool = layers[i].kind == LayerKind::MaxPool || layers[i].kind == LayerKind::AvgPool;
    if (is_pool && i > 0) {
      ++block;
      within = 0;
    }
    keys.push_back("block" + std::to_string(block) + ".layer" + std::to_string(within));
    ++within;
  }
  return keys;
}

std::size_t ArchDescriptor::conv_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.kind == LayerKind::Conv;
  return n;
}

ArchDescriptor vgg19_trunk() {
  ArchDescriptor d;
  d.source = "vgg19";
  const std::vector<std::pair<int, int>> stages{{64, 2}, {128, 2}, {256, 4}, {512, 4}, {512, 4}};
  std::int64_t in = 3;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    if (s > 0) d.layers.push_back({LayerKind::MaxPool, 0, 0, 2, 2, 0.0});
    for (int c = 0; c < stages[s].second; ++c) {
      d.layers.push_back({LayerKind::Conv, in, stages[s].first, 3, 1, 0.0});
      d.layers.push_back({LayerKind::Relu, 0, 0, 0, 1, 0.0});
      in = stages[s].first;
    }
  }
  return d;
}

ArchDescriptor compact_trunk() {
  ArchDescriptor d;
  d.source = "compact7";
  auto conv = [&](std::int64_t in, std::int64_t out) {
    d.layers.push_back({LayerKind::Conv, in, out, 3, 1, 0.0});
    d.layers.push_back({LayerKind::Relu, 0, 0, 0, 1, 0.0});
  };
  auto pool = [&] { d.layers.push_back({LayerKind::MaxPool, 0, 0, 2, 2, 0.0}); };
  conv(3, 16);
  conv(16, 16);
  pool();
  conv(16, 32);
  conv(32, 32);
  pool();
  conv(32, 64);
  conv(64, 64);
  pool();
  conv(64, 64);
  return d;
}

ArchDescriptor surgically_modified(const ArchDescriptor& arch) {
  ArchDescriptor out = arch;
  for (auto& l : out.layers) {
    if (l.kind == LayerKind::MaxPool) {
      l.kind = LayerKind::AvgPool;
    } else if (l.kind == LayerKind::Relu) {
      l.kind = LayerKind::LeakyRelu;
      l.negative_slope = kSurgerySlope;
    }
  }
  return out;
}

ReferenceNetImpl::ReferenceNetImpl(ArchDescriptor arch, Normalization norm, bool surgically_modified, bool trainable)
    : arch_(std::move(arch)), norm_(std::move(norm)), surgically_modified_(surgically_modified), trainable_(trainable) {
  arch_.validate();
  if (norm_.mean.size() != 3 || norm_.scale.size() != 3) {
    throw LoadError("normalization statistics must have 3 channels");
  }
  const auto keys = arch_.layer_keys();
  std::map<std::string, std::shared_ptr<torch::nn::Module>> blocks;
  conv_weight_.resize(arch_.layers.size());
  conv_bias_.resize(arch_.layers.size());
  for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
    const auto& l = arch_.layers[i];
    if (!l.has_parameters()) continue;
    const auto dot = keys[i].find('.');
    const auto block_name = keys[i].substr(0, dot);
    auto& block = blocks[block_name];
    if (!block) block = register_module(block_name, std::make_shared<torch::nn::Module>());
    auto layer = block->register_module(keys[i].substr(dot + 1), std::make_shared<torch::nn::Module>());
    conv_weight_[i] = layer->register_parameter(
        "weight", torch::zeros({l.out_channels, l.in_channels, l.kernel, l.kernel}), trainable_);
    conv_bias_[i] = layer->register_parameter("bias", torch::zeros({l.out_channels}), trainable_);
  }
  mean_ = register_buffer("norm_mean", channel_tensor(norm_.mean));
  scale_ = register_buffer("norm_scale", channel_tensor(norm_.scale));
}

torch::Tensor ReferenceNetImpl::forward_range(const torch::Tensor& x, std::size_t begin, std::size_t end) const {
  TORCH_CHECK(begin <= end && end <= arch_.layers.size(), "layer range out of bounds");
  torch::Tensor h = x;
  for (std::size_t i = begin; i < end; ++i) {
    const auto& l = arch_.layers[i];
    switch (l.kind) {
      case LayerKind::Conv:
        h = torch::conv2d(h, conv_weight_[i], conv_bias_[i], l.stride, l.kernel / 2);
        break;
      case LayerKind::Relu:
        h = torch::relu(h);
        break;
      case LayerKind::LeakyRelu:
        h = torch::leaky_relu(h, l.negative_slope);
        break;
      case LayerKind::MaxPool:
        h = torch::max_pool2d(h, 2, 2);
        break;
      case LayerKind::AvgPool:
        h = torch::avg_pool2d(h, 2, 2);
        break;
    }
  }
  return h;
}

torch::Tensor ReferenceNetImpl::normalize(const torch::Tensor& images) const {
  auto mean = mean_.to(images.dtype());
  auto scale = scale_.to(images.dtype());
  return ((images + 1.0) * 0.5 - mean) / scale;
}

std::map<std::string, torch::Tensor> ReferenceNetImpl::weights() const {
  std::map<std::string, torch::Tensor> out;
  for (const auto& item : named_parameters()) out.emplace(item.key(), item.value());
  return out;
}

std::pair<torch::Tensor, torch::Tensor> ReferenceNetImpl::conv_parameters(std::size_t index) const {
  return {conv_weight_.at(index), conv_bias_.at(index)};
}

std::filesystem::path manifest_path_for(const std::filesystem::path& weights_path) {
  auto p = weights_path;
  p.replace_extension(".manifest.json");
  return p;
}

ReferenceNet load_reference_weights(const std::filesystem::path& weights_path, const ArchDescriptor& arch) {
  const auto manifest_path = manifest_path_for(weights_path);
  std::ifstream mf(manifest_path);
  if (!mf) throw LoadError("missing weights manifest: " + manifest_path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mf);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }

  Normalization norm;
  try {
    norm.mean = manifest.at("normalization.mean").get<std::vector<float>>();
    norm.scale = manifest.at("normalization.scale").get<std::vector<float>>();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("manifest " + manifest_path.string() + " lacks normalization statistics: " + e.what());
  }
  const bool manifest_surgery = manifest.value(nlohmann::json::json_pointer("/surgery/applied"), false);

  ArchDescriptor effective = arch;
  bool has_original_layers = false;
  for (const auto& l : arch.layers) has_original_layers |= l.kind == LayerKind::MaxPool || l.kind == LayerKind::Relu;
  if (manifest_surgery && has_original_layers) effective = surgically_modified(arch);

  const auto file = read_tensor_file(weights_path);
  ReferenceNet net(effective, norm, manifest_surgery);
  torch::NoGradGuard no_grad;
  for (auto& item : net->named_parameters()) {
    const auto& key = item.key();
    auto& param = item.value();
    auto it = file.tensors.find(key);
    if (it == file.tensors.end()) throw LoadError("weights file " + weights_path.string() + " is missing key '" + key + "'");
    if (it->second.sizes() != param.sizes()) {
      throw ShapeError("layer '" + key + "': descriptor expects " + shape_string(param.sizes()) + ", weights file has " +
                       shape_string(it->second.sizes()));
    }
    param.copy_(it->second.to(param.dtype()));
  }
  return net;
}

void save_reference_weights(const ReferenceNet& net, const std::filesystem::path& weights_path) {
  TensorFile file;
  nlohmann::ordered_json shapes = nlohmann::ordered_json::object();
  for (const auto& [key, param] : net->weights()) {
    file.tensors.emplace(key, param);
    shapes[key] = param.sizes().vec();
  }
  file.metadata["source"] = net->arch().source;
  write_tensor_file(weights_path, file);

  nlohmann::ordered_json manifest;
  manifest["source"] = net->arch().source;
  manifest["tensors"] = shapes;
  manifest["normalization.mean"] = net->normalization().mean;
  manifest["normalization.scale"] = net->normalization().scale;
  nlohmann::ordered_json replacements = nlohmann::ordered_json::array();
  if (net->surgically_modified()) {
    for (std::size_t i = 0; i < net->arch().layers.size(); ++i) {
      const auto kind = net->arch().layers[i].kind;
      if (kind == LayerKind::AvgPool) replacements.push_back({{"layer", i}, {"from", "maxpool"}, {"to", "avgpool"}});
      if (kind == LayerKind::LeakyRelu) {
        replacements.push_back({{"layer", i}, {"from", "relu"}, {"to", "leaky_relu"}, {"slope", kSurgerySlope}});
      }
    }
  }
  manifest["surgery"] = {{"applied", net->surgically_modified()}, {"replacements", replacements}};
  std::ofstream out(manifest_path_for(weights_path));
  if (!out) throw IoError("cannot write manifest next to " + weights_path.string());
  out << manifest.dump(2) << '\n';
}

ReferenceNet random_reference_net(const ArchDescriptor& arch, std::uint64_t seed, bool trainable, Normalization norm) {
  ReferenceNet net(arch, std::move(norm), false, trainable);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  torch::NoGradGuard no_grad;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    if (!arch.layers[i].has_parameters()) continue;
    auto [w, b] = net->conv_parameters(i);
    const auto fan_in = static_cast<double>(w.size(1) * w.size(2) * w.size(3));
    // Kaiming-uniform for rectifier chains.
    const double bound = std::sqrt(6.0 / fan_in);
    w.uniform_(-bound, bound, gen);
    b.zero_();
  }
  return net;
}

ReferenceNet apply_surgery(const ReferenceNet& net) {
  if (net->surgically_modified()) throw SurgeryError("reference net '" + net->arch().source + "' is already modified");
  ReferenceNet out(surgically_modified(net->arch()), net->normalization(), true, net->trainable());
  torch::NoGradGuard no_grad;
  auto src = net->weights();
  for (auto& [key, param] : out->weights()) param.copy_(src.at(key));
  return out;
}

BlockPartition partition(const ReferenceNet& net, std::span<const std::size_t> boundaries) {
  const auto& layers = net->arch().layers;
  if (boundaries.empty()) throw PartitionError("partition needs at least one block boundary");
  if (boundaries.front() != 0) throw PartitionError("first block must start at layer 0, got " + std::to_string(boundaries.front()));
  for (std::size_t i = 1; i < boundaries.size(); ++i) {
    if (boundaries[i] <= boundaries[i - 1]) throw PartitionError("block boundaries must be strictly increasing");
    if (boundaries[i] >= layers.size()) {
      throw PartitionError("block boundary " + std::to_string(boundaries[i]) + " is past the end of the trunk");
    }
    if (!layers[boundaries[i]].halves_spatial()) {
      throw PartitionError("block boundary at layer " + std::to_string(boundaries[i]) +
                           " does not start with a spatial-halving layer");
    }
  }

  BlockPartition part;
  std::int64_t channels = 0;
  for (std::size_t i = 0; i < boundaries.size(); ++i) {
    const std::size_t begin = boundaries[i];
    std::size_t end = layers.size();
    if (i + 1 < boundaries.size()) {
      end = boundaries[i + 1];
    } else {
      for (std::size_t j = begin + 1; j < layers.size(); ++j) {
        if (layers[j].halves_spatial()) {
          end = j;
          break;
        }
      }
    }
    int halvings = 0;
    for (std::size_t j = begin; j < end; ++j) {
      halvings += layers[j].halves_spatial();
      if (layers[j].kind == LayerKind::Conv) channels = layers[j].out_channels;
    }
    const int expected = i == 0 ? 0 : 1;
    if (halvings != expected) {
      throw PartitionError("block " + std::to_string(i) + " (layers " + std::to_string(begin) + ".." +
                           std::to_string(end) + ") contains " + std::to_string(halvings) +
                           " spatial-halving layers, expected " + std::to_string(expected));
    }
    if (channels == 0) {
      throw PartitionError("block " + std::to_string(i) + " produces features before any convolution");
    }
    part.ranges.emplace_back(begin, end);
    part.channels.push_back(channels);
    part.downsampling.push_back(i == 0 ? 1 : 2);
  }
  return part;
}

std::vector<std::size_t> default_boundaries(const ArchDescriptor& arch, std::size_t levels) {
  std::vector<std::size_t> out{0};
  for (std::size_t i = 1; i < arch.layers.size() && out.size() < levels; ++i) {
    if (arch.layers[i].halves_spatial()) out.push_back(i);
  }
  if (out.size() != levels) {
    throw PartitionError("trunk '" + arch.source + "' supports at most " + std::to_string(out.size()) +
                         " levels, requested " + std::to_string(levels));
  }
  return out;
}

FeaturePyramid extract_features(const ReferenceNet& net, const BlockPartition& part, const torch::Tensor& batch) {
  if (batch.dim() != 4) throw ShapeError("expected an N x C x W x W batch, got " + shape_string(batch.sizes()));
  const auto width = batch.size(3);
  if (batch.size(2) != width) throw ShapeError("expected square images, got " + shape_string(batch.sizes()));
  const std::int64_t divisor = std::int64_t{1} << (part.size() - 1);
  if (width % divisor != 0) {
    throw ShapeError("input size " + std::to_string(width) + " is not divisible by 2^(K-1) = " + std::to_string(divisor));
  }
  FeaturePyramid pyr;
  torch::Tensor h = batch;
  for (std::size_t i = 0; i < part.size(); ++i) {
    h = net->forward_range(h, part.ranges[i].first, part.ranges[i].second);
    if (!torch::isfinite(h).all().item<bool>()) {
      throw NumericError("non-finite activation in trunk block " + std::to_string(i));
    }
    pyr.sizes.push_back(h.size(3));
    pyr.channels.push_back(h.size(1));
    pyr.levels.push_back(h);
  }
  return pyr;
}

}  // namespace percgan
