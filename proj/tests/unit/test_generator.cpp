#include <random>

#include <gtest/gtest.h>

#include "percgan/errors.hpp"
#include "percgan/generator.hpp"

using namespace percgan;

namespace {

GeneratorConfig small(std::int64_t m, std::int64_t n, std::int64_t res = 32, std::int64_t width = 4) {
  GeneratorConfig cfg;
  cfg.downsampling = m;
  cfg.residual_blocks = n;
  cfg.width = width;
  cfg.resolution = res;
  return cfg;
}

// Extent of the input region that influences the centre unit of the bottleneck.
std::int64_t measured_receptive_field(const GeneratorConfig& cfg, std::uint64_t seed) {
  torch::manual_seed(seed);
  auto g = build_generator(cfg);
  g->to(torch::kFloat64);
  auto x = torch::randn({1, 3, cfg.resolution, cfg.resolution}, torch::dtype(torch::kFloat64).requires_grad(true));
  auto h = g->encode(x);
  const auto c = h.size(2) / 2;
  h.index({0, torch::indexing::Slice(), c, c}).sum().backward();
  auto mask = x.grad().abs().sum({0, 1}) > 0;
  auto rows = mask.any(1).nonzero();
  return rows.max().item<std::int64_t>() - rows.min().item<std::int64_t>() + 1;
}

}  // namespace

TEST(Generator, StandardConfigAt160) {
  auto cfg = default_generator_config(160);
  EXPECT_EQ(cfg.downsampling, 2);
  EXPECT_EQ(cfg.residual_blocks, 6);
  EXPECT_EQ(cfg.width, 64);
  auto g = build_generator(cfg);
  torch::NoGradGuard no_grad;
  auto x = torch::rand({1, 3, 160, 160}) * 2 - 1;
  EXPECT_EQ(g->encode(x).sizes(), (c10::IntArrayRef{1, 256, 40, 40}));
  EXPECT_EQ(g->forward(x).sizes(), (c10::IntArrayRef{1, 3, 160, 160}));
}

TEST(Generator, StandardConfigAt256) {
  auto cfg = default_generator_config(256);
  EXPECT_EQ(cfg.downsampling, 3);
  EXPECT_EQ(cfg.residual_blocks, 9);
}

TEST(Generator, NoDownsamplingNoResidualBlocks) {
  auto g = build_generator(small(0, 0, 16));
  torch::NoGradGuard no_grad;
  auto x = torch::rand({2, 3, 16, 16}) * 2 - 1;
  EXPECT_EQ(g->encode(x).sizes(), (c10::IntArrayRef{2, 4, 16, 16}));
  EXPECT_EQ(g->forward(x).sizes(), x.sizes());
}

TEST(Generator, BottleneckTooSmall) {
  try {
    build_generator(small(3, 1, 16));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("generator.downsampling"), std::string::npos) << e.what();
  }
  EXPECT_THROW(build_generator(small(2, 1, 30)), ConfigError);
  EXPECT_THROW(build_generator(small(-1, 1, 32)), ConfigError);
}

TEST(Generator, ZeroedOutputLayerGivesZeroImage) {
  auto g = build_generator(small(1, 2));
  g->zero_output_layer();
  torch::NoGradGuard no_grad;
  auto y = g->forward(torch::rand({2, 3, 32, 32}) * 2 - 1);
  EXPECT_EQ(y.abs().max().item<float>(), 0.0F);
}

TEST(Generator, OutputShapeAndRangeOverRandomSizes) {
  std::mt19937 rng(4);
  torch::NoGradGuard no_grad;
  for (int trial = 0; trial < 8; ++trial) {
    const std::int64_t m = rng() % 3;
    const std::int64_t side = (std::int64_t{4} << m) * (1 + rng() % 3);
    auto g = build_generator(small(m, 1 + rng() % 2, side));
    auto y = g->forward(torch::randn({1 + static_cast<std::int64_t>(rng() % 3), 3, side, side}) * 3);
    EXPECT_EQ(y.size(2), side);
    EXPECT_EQ(y.size(3), side);
    EXPECT_LE(y.abs().max().item<float>(), 1.0F);
  }
}

TEST(Generator, RejectsIndivisibleInput) {
  auto g = build_generator(small(2, 1));
  EXPECT_THROW(g->forward(torch::zeros({1, 3, 30, 30})), ShapeError);
  EXPECT_THROW(g->forward(torch::zeros({1, 1, 32, 32})), ShapeError);
}

TEST(Generator, InstanceNormCanBeDisabled) {
  auto with = build_generator(small(1, 1));
  auto cfg = small(1, 1);
  cfg.norm = NormKind::None;
  auto without = build_generator(cfg);
  EXPECT_EQ(with->parameter_count(), without->parameter_count());  // affine-free norm
  EXPECT_EQ(norm_kind_from_string("none"), NormKind::None);
  EXPECT_THROW(norm_kind_from_string("batch"), ConfigError);
}

TEST(Generator, ParameterGradientMatchesFiniteDifferencesDouble) {
  torch::manual_seed(6);
  auto g = build_generator(small(1, 1, 8, 2));
  g->to(torch::kFloat64);
  auto x = torch::rand({1, 3, 8, 8}, torch::kFloat64) * 2 - 1;
  auto target = torch::rand({1, 3, 8, 8}, torch::kFloat64) * 2 - 1;
  auto loss_fn = [&] { return (g->forward(x) - target).pow(2).mean(); };
  g->zero_grad();
  loss_fn().backward();
  std::mt19937 rng(1);
  int good = 0;
  int total = 0;
  const double h = 1e-6;
  for (auto& p : g->parameters()) {
    for (int s = 0; s < 3; ++s) {
      const auto idx = static_cast<std::int64_t>(rng() % p.numel());
      const double analytic = p.grad().view(-1)[idx].item<double>();
      double fd = 0.0;
      {
        torch::NoGradGuard no_grad;
        const double orig = p.view(-1)[idx].item<double>();
        p.view(-1)[idx] = orig + h;
        const double up = loss_fn().item<double>();
        p.view(-1)[idx] = orig - h;
        const double down = loss_fn().item<double>();
        p.view(-1)[idx] = orig;
        fd = (up - down) / (2 * h);
      }
      const double rel = std::abs(fd - analytic) / std::max({std::abs(fd), std::abs(analytic), 1e-10});
      // Biases feeding instance norm have an exactly zero gradient.
      good += rel <= 1e-5 || std::abs(fd - analytic) <= 1e-9;
      ++total;
    }
  }
  EXPECT_GE(good, total * 95 / 100) << good << " of " << total;
}

TEST(Generator, ReceptiveFieldFormulaAndMonotonicity) {
  EXPECT_EQ(residual_trunk_receptive_field(small(0, 0)), 7);
  EXPECT_EQ(residual_trunk_receptive_field(small(0, 1)), 11);
  EXPECT_EQ(residual_trunk_receptive_field(small(1, 0)), 9);
  std::int64_t prev = 0;
  for (std::int64_t n = 0; n < 8; ++n) {
    const auto rf = residual_trunk_receptive_field(small(2, n));
    EXPECT_GT(rf, prev);
    prev = rf;
  }
  prev = 0;
  for (std::int64_t m = 0; m < 4; ++m) {
    const auto rf = residual_trunk_receptive_field(small(m, 3));
    EXPECT_GT(rf, prev);
    prev = rf;
  }
}

TEST(Generator, ReceptiveFieldMatchesGradientFootprint) {
  for (auto cfg : {small(0, 1, 32), small(0, 2, 32), small(1, 1, 48)}) {
    cfg.norm = NormKind::None;
    std::int64_t widest = 0;
    for (std::uint64_t seed = 0; seed < 3; ++seed) widest = std::max(widest, measured_receptive_field(cfg, seed));
    EXPECT_LE(widest, residual_trunk_receptive_field(cfg));
    EXPECT_GE(widest, residual_trunk_receptive_field(cfg) - 1) << "M=" << cfg.downsampling;
  }
}
