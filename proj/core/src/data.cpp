#include "percgan/data.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numbers>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "percgan/errors.hpp"

namespace percgan {
namespace {

using torch::indexing::Slice;

constexpr std::size_t kValidationSample = 8;

torch::Tensor uniform(at::Generator& gen, std::vector<std::int64_t> shape, double lo = 0.0, double hi = 1.0) {
  return torch::rand(shape, gen) * (hi - lo) + lo;
}

std::pair<torch::Tensor, torch::Tensor> pixel_grid(std::int64_t w) {
  auto coords = torch::arange(w, torch::kFloat32) + 0.5;
  auto grids = torch::meshgrid({coords, coords}, "ij");
  return {grids[0], grids[1]};  // ys, xs
}

// Linear color ramp at a random angle plus a low-frequency sinusoidal texture.
torch::Tensor textured_background(at::Generator& gen, std::int64_t n, std::int64_t w) {
  auto c0 = uniform(gen, {n, 3, 1, 1}, -0.8, 0.8);
  auto c1 = uniform(gen, {n, 3, 1, 1}, -0.8, 0.8);
  auto angle = uniform(gen, {n, 1, 1, 1}, 0.0, 2.0 * std::numbers::pi);
  auto unit = torch::linspace(0.0, 1.0, w);
  auto grids = torch::meshgrid({unit, unit}, "ij");
  const auto& ys = grids[0];
  const auto& xs = grids[1];
  auto t = xs * torch::cos(angle) + ys * torch::sin(angle);
  auto lo = t.amin({2, 3}, true);
  auto hi = t.amax({2, 3}, true);
  t = (t - lo) / (hi - lo + 1e-6);
  auto fx = uniform(gen, {n, 1, 1, 1}, 1.0, 4.0);
  auto fy = uniform(gen, {n, 1, 1, 1}, 1.0, 4.0);
  auto phase = uniform(gen, {n, 1, 1, 1}, 0.0, 2.0 * std::numbers::pi);
  auto texture = 0.12 * torch::sin(2.0 * std::numbers::pi * (fx * xs + fy * ys) + phase);
  return c0 * (1.0 - t) + c1 * t + texture;
}

enum class Shape { Square, Circle, Triangle, Cross };

torch::Tensor shape_images(at::Generator& gen, std::int64_t n, std::int64_t w, Shape shape) {
  auto img = textured_background(gen, n, w);
  auto [ys, xs] = pixel_grid(w);
  const double wd = static_cast<double>(w);
  auto r = uniform(gen, {n, 1, 1}, 0.16 * wd, 0.34 * wd);
  auto cx = wd / 2.0 + uniform(gen, {n, 1, 1}, -1.0, 1.0) * (wd / 2.0 - r - 1.0);
  auto cy = wd / 2.0 + uniform(gen, {n, 1, 1}, -1.0, 1.0) * (wd / 2.0 - r - 1.0);
  auto dx = xs - cx;
  auto dy = ys - cy;
  torch::Tensor mask;
  switch (shape) {
    case Shape::Square:
      mask = (dx.abs() <= r) & (dy.abs() <= r);
      break;
    case Shape::Circle:
      // Radius scaled so circle and square cover similar areas.
      mask = (dx * dx + dy * dy) <= (1.13 * r).pow(2);
      break;
    case Shape::Triangle:
      mask = (dy <= r) & (dy >= -r) & (dx.abs() <= (dy + r) / 2.0);
      break;
    case Shape::Cross:
      mask = ((dx.abs() <= 0.35 * r) & (dy.abs() <= r)) | ((dy.abs() <= 0.35 * r) & (dx.abs() <= r));
      break;
  }
  auto color = uniform(gen, {n, 3, 1, 1}, -1.0, 1.0).expand({n, 3, w, w});
  return torch::where(mask.unsqueeze(1), color, img).clamp(-1.0, 1.0);
}

torch::Tensor tinted_scenes(at::Generator& gen, std::int64_t n, std::int64_t w, bool warm) {
  auto img = textured_background(gen, n, w);
  auto [ys, xs] = pixel_grid(w);
  const double wd = static_cast<double>(w);
  for (int blob = 0; blob < 3; ++blob) {
    auto cx = uniform(gen, {n, 1, 1, 1}, 0.0, wd);
    auto cy = uniform(gen, {n, 1, 1, 1}, 0.0, wd);
    auto sigma = uniform(gen, {n, 1, 1, 1}, 0.08 * wd, 0.2 * wd);
    auto color = uniform(gen, {n, 3, 1, 1}, -0.8, 0.8);
    auto weight = torch::exp(-((xs - cx).pow(2) + (ys - cy).pow(2)) / (2.0 * sigma * sigma));
    img = img * (1.0 - weight) + color * weight;
  }
  auto shift = torch::tensor({0.3F, 0.05F, -0.3F}).view({1, 3, 1, 1});
  return (warm ? img + shift : img - shift).clamp(-1.0, 1.0);
}

void warn(const std::string& msg) { std::cerr << "[percgan] warning: " << msg << '\n'; }

}  // namespace

std::string_view to_string(Domain d) { return d == Domain::X ? "X" : "Y"; }

bool has_image_extension(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp" || ext == ".ppm" || ext == ".tif" ||
         ext == ".tiff" || ext == ".webp";
}

torch::Tensor decode_image(const std::filesystem::path& path, const PreprocessSpec& spec) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw IoError("cannot decode image: " + path.string());
  const int side = std::min(bgr.rows, bgr.cols);
  const int crop = spec.crop > 0 ? static_cast<int>(spec.crop) : side;
  if (crop > side) {
    throw IoError("crop " + std::to_string(crop) + " exceeds image size " + std::to_string(bgr.cols) + "x" +
                  std::to_string(bgr.rows) + ": " + path.string());
  }
  cv::Mat square = bgr(cv::Rect((bgr.cols - crop) / 2, (bgr.rows - crop) / 2, crop, crop));
  cv::Mat resized;
  const int target = static_cast<int>(spec.resize);
  if (crop != target) {
    cv::resize(square, resized, cv::Size(target, target), 0, 0, crop > target ? cv::INTER_AREA : cv::INTER_LINEAR);
  } else {
    resized = square.clone();
  }
  cv::Mat rgb;
  cv::cvtColor(resized, rgb, cv::COLOR_BGR2RGB);
  auto t = torch::from_blob(rgb.data, {target, target, 3}, torch::kUInt8).clone();
  return t.permute({2, 0, 1}).to(torch::kFloat32).div(127.5).sub(1.0).contiguous();
}

void write_image(const std::filesystem::path& path, const torch::Tensor& image) {
  if (image.dim() != 3 || image.size(0) != 3) throw ShapeError("write_image expects a 3 x H x W tensor");
  auto hwc = image.detach()
                 .to(torch::kCPU, torch::kFloat32)
                 .clamp(-1.0, 1.0)
                 .add(1.0)
                 .mul(127.5)
                 .round()
                 .to(torch::kUInt8)
                 .permute({1, 2, 0})
                 .contiguous();
  cv::Mat rgb(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), CV_8UC3, hwc.data_ptr());
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  if (!cv::imwrite(path.string(), bgr)) throw IoError("cannot write image: " + path.string());
}

DomainDataset DomainDataset::from_files(Domain domain, std::vector<std::filesystem::path> files, PreprocessSpec spec) {
  if (files.empty()) throw IoError("domain " + std::string(to_string(domain)) + " has no images");
  DomainDataset ds;
  ds.domain_ = domain;
  ds.files_ = std::move(files);
  ds.spec_ = spec;
  ds.resolution_ = spec.resize;
  return ds;
}

DomainDataset DomainDataset::from_tensor(Domain domain, torch::Tensor images) {
  if (images.dim() != 4 || images.size(0) < 1 || images.size(1) != 3 || images.size(2) != images.size(3)) {
    throw ShapeError("in-memory dataset expects N x 3 x W x W images with N >= 1");
  }
  DomainDataset ds;
  ds.domain_ = domain;
  ds.images_ = images.contiguous();
  ds.resolution_ = images.size(3);
  ds.spec_.resize = ds.resolution_;
  return ds;
}

std::size_t DomainDataset::size() const {
  return images_.defined() ? static_cast<std::size_t>(images_.size(0)) : files_.size();
}

std::optional<torch::Tensor> DomainDataset::image(std::size_t index) const {
  if (images_.defined()) return images_[static_cast<std::int64_t>(index)];
  try {
    return decode_image(files_.at(index), spec_);
  } catch (const IoError& e) {
    if (spec_.strict) throw;
    warn(std::string(e.what()) + " (skipped)");
    return std::nullopt;
  }
}

torch::Tensor DomainDataset::stacked() const {
  if (images_.defined()) return images_;
  std::vector<torch::Tensor> out;
  out.reserve(files_.size());
  for (std::size_t i = 0; i < files_.size(); ++i) {
    if (auto img = image(i)) out.push_back(*img);
  }
  if (out.empty()) throw IoError("no decodable images in domain " + std::string(to_string(domain_)));
  return torch::stack(out);
}

DomainDataset load_domain(const std::filesystem::path& dir, Domain domain, const PreprocessSpec& spec) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && has_image_extension(entry.path())) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no images found in " + dir.string());
  auto ds = DomainDataset::from_files(domain, std::move(files), spec);
  std::size_t decodable = 0;
  const std::size_t sample = std::min(kValidationSample, ds.size());
  for (std::size_t i = 0; i < sample; ++i) {
    // Spread the sample over the listing.
    decodable += ds.image(i * ds.size() / sample).has_value();
  }
  if (decodable == 0) throw IoError("no decodable images among the sampled files in " + dir.string());
  return ds;
}

BatchIterator::BatchIterator(const DomainDataset& ds, std::uint64_t seed) : ds_(&ds) {
  state_.seed = seed;
  reshuffle();
}

void BatchIterator::reshuffle() {
  order_.resize(ds_->size());
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  std::seed_seq seq{static_cast<std::uint32_t>(state_.seed), static_cast<std::uint32_t>(state_.seed >> 32),
                    static_cast<std::uint32_t>(state_.epoch), static_cast<std::uint32_t>(state_.epoch >> 32)};
  std::mt19937_64 rng(seq);
  std::shuffle(order_.begin(), order_.end(), rng);
}

void BatchIterator::restore(const State& s) {
  state_ = s;
  reshuffle();
}

std::size_t BatchIterator::next_index() {
  if (state_.position >= order_.size()) {
    ++state_.epoch;
    state_.position = 0;
    reshuffle();
  }
  return order_[state_.position++];
}

torch::Tensor BatchIterator::next(std::int64_t n) {
  if (n < 1) throw ConfigError("batch size must be >= 1");
  std::vector<torch::Tensor> batch;
  batch.reserve(static_cast<std::size_t>(n));
  std::size_t misses = 0;
  while (static_cast<std::int64_t>(batch.size()) < n) {
    auto img = ds_->image(next_index());
    if (!img) {
      if (++misses > 4 * ds_->size() + 16) throw IoError("too many undecodable images in dataset");
      continue;
    }
    auto t = *img;
    if (ds_->spec().hflip) {
      std::mt19937_64 flip_rng(state_.seed ^ (0x9e3779b97f4a7c15ULL * (state_.draws + 1)));
      if (flip_rng() & 1U) t = t.flip({2});
    }
    ++state_.draws;
    batch.push_back(t);
  }
  return torch::stack(batch);
}

torch::Tensor next_batch(const DomainDataset& ds, std::int64_t n, BatchIterator& it) {
  (void)ds;
  return it.next(n);
}

ToyTask toy_task_from_string(std::string_view name) {
  if (name == "shapes") return ToyTask::Shapes;
  if (name == "tint") return ToyTask::Tint;
  throw ConfigError("data.toy_task: unknown toy task '" + std::string(name) + "' (expected shapes|tint)");
}

std::string_view to_string(ToyTask task) { return task == ToyTask::Shapes ? "shapes" : "tint"; }

std::pair<DomainDataset, DomainDataset> synth_toy_domains(ToyTask task, std::int64_t count, std::int64_t resolution,
                                                          std::uint64_t seed) {
  if (resolution != 16 && resolution != 32 && resolution != 64) {
    throw ConfigError("data.resolution: toy domains support 16, 32 or 64, got " + std::to_string(resolution));
  }
  if (count < 100) throw ConfigError("data.toy_count must be >= 100, got " + std::to_string(count));
  // Independent streams per domain: nothing pairs an X image with a Y image.
  auto gen_x = at::make_generator<at::CPUGeneratorImpl>(seed * 2 + 1);
  auto gen_y = at::make_generator<at::CPUGeneratorImpl>(seed * 2 + 2);
  torch::Tensor x;
  torch::Tensor y;
  if (task == ToyTask::Shapes) {
    x = shape_images(gen_x, count, resolution, Shape::Square);
    y = shape_images(gen_y, count, resolution, Shape::Circle);
  } else {
    x = tinted_scenes(gen_x, count, resolution, true);
    y = tinted_scenes(gen_y, count, resolution, false);
  }
  return {DomainDataset::from_tensor(Domain::X, x), DomainDataset::from_tensor(Domain::Y, y)};
}

std::pair<torch::Tensor, torch::Tensor> synth_shape_classes(std::int64_t per_class, std::int64_t resolution,
                                                            std::uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  std::vector<torch::Tensor> images;
  for (auto shape : {Shape::Square, Shape::Circle, Shape::Triangle, Shape::Cross}) {
    images.push_back(shape_images(gen, per_class, resolution, shape));
  }
  auto labels = torch::arange(4, torch::kInt64).repeat_interleave(per_class);
  return {torch::cat(images), labels};
}

void write_domain(const std::filesystem::path& dir, const DomainDataset& ds) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto img = ds.image(i);
    if (!img) continue;
    char name[32];
    std::snprintf(name, sizeof(name), "%s_%05zu.png", std::string(to_string(ds.domain())).c_str(), i);
    write_image(dir / name, *img);
  }
}

void write_domain_pair(const std::filesystem::path& root, const DomainDataset& x, const DomainDataset& y) {
  write_domain(root / "domainX", x);
  write_domain(root / "domainY", y);
}

}  // namespace percgan
