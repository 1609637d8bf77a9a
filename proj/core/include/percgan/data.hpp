#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

namespace percgan {

enum class Domain { X, Y };

std::string_view to_string(Domain d);

struct PreprocessSpec {
  std::int64_t crop = 0;     // central crop side; 0 = largest central square
  std::int64_t resize = 32;  // output side after cropping
  bool hflip = false;        // random horizontal flips in next_batch
  bool strict = false;       // abort (instead of skip) on undecodable files
};

/// Decodes one raster file (format sniffed by OpenCV) into a 3 x W x W float
/// tensor in [-1, 1]. Throws IoError on failure.
torch::Tensor decode_image(const std::filesystem::path& path, const PreprocessSpec& spec);

/// Writes a 3 x H x W tensor in [-1, 1] as an 8-bit image; format by extension.
void write_image(const std::filesystem::path& path, const torch::Tensor& image);

bool has_image_extension(const std::filesystem::path& path);

/// Unaligned image collection of one domain. Either backed by files
/// (decoded on access) or by an in-memory N x 3 x W x W tensor.
class DomainDataset {
 public:
  static DomainDataset from_files(Domain domain, std::vector<std::filesystem::path> files, PreprocessSpec spec);
  static DomainDataset from_tensor(Domain domain, torch::Tensor images);

  Domain domain() const { return domain_; }
  std::size_t size() const;
  std::int64_t resolution() const { return resolution_; }
  const PreprocessSpec& spec() const { return spec_; }
  const std::vector<std::filesystem::path>& files() const { return files_; }
  bool in_memory() const { return images_.defined(); }

  /// Image i, or nullopt when the file cannot be decoded and the spec is
  /// not strict (a warning is printed). Strict mode throws IoError.
  std::optional<torch::Tensor> image(std::size_t index) const;

  /// All decodable images stacked; skips undecodable ones unless strict.
  torch::Tensor stacked() const;

 private:
  Domain domain_ = Domain::X;
  std::vector<std::filesystem::path> files_;
  torch::Tensor images_;
  PreprocessSpec spec_;
  std::int64_t resolution_ = 0;
};

/// Lists the images in `dir` and checks that a sample decodes.
DomainDataset load_domain(const std::filesystem::path& dir, Domain domain, const PreprocessSpec& spec);

/// Seeded sampler: reshuffles at every epoch, so draws are with replacement
/// across epochs and deterministic for a fixed seed.
class BatchIterator {
 public:
  struct State {
    std::uint64_t seed = 0;
    std::uint64_t epoch = 0;
    std::uint64_t position = 0;
    std::uint64_t draws = 0;
  };

  BatchIterator(const DomainDataset& ds, std::uint64_t seed);

  torch::Tensor next(std::int64_t n);

  State state() const { return state_; }
  void restore(const State& s);

 private:
  void reshuffle();
  std::size_t next_index();

  const DomainDataset* ds_;
  State state_;
  std::vector<std::size_t> order_;
};

torch::Tensor next_batch(const DomainDataset& ds, std::int64_t n, BatchIterator& it);

enum class ToyTask { Shapes, Tint };

ToyTask toy_task_from_string(std::string_view name);
std::string_view to_string(ToyTask task);

/// Two procedurally generated, unaligned domains. Shapes: filled squares (X)
/// vs filled circles (Y) on textured backgrounds. Tint: warm (X) vs cool (Y)
/// versions of independently drawn procedural scenes.
std::pair<DomainDataset, DomainDataset> synth_toy_domains(ToyTask task, std::int64_t count, std::int64_t resolution,
                                                          std::uint64_t seed);

/// Four-way labelled shape images (square, circle, triangle, cross) used to
/// pretrain the compact reference trunk.
std::pair<torch::Tensor, torch::Tensor> synth_shape_classes(std::int64_t per_class, std::int64_t resolution,
                                                            std::uint64_t seed);

/// Writes `<root>/domainX/*.png` and `<root>/domainY/*.png`.
void write_domain_pair(const std::filesystem::path& root, const DomainDataset& x, const DomainDataset& y);

void write_domain(const std::filesystem::path& dir, const DomainDataset& ds);

}  // namespace percgan
