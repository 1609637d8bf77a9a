#include <set>

#include <gtest/gtest.h>

#include "percgan/errors.hpp"
#include "percgan/percdisc.hpp"
#include "support.hpp"

using namespace percgan;

namespace {

DiscriminatorConfig compact_config(std::size_t levels = 4, std::vector<std::size_t> patches = {}) {
  DiscriminatorConfig cfg;
  cfg.trunk_id = "compact7";
  cfg.levels = levels;
  cfg.patch_levels = std::move(patches);
  cfg.combiner_widths = {};
  cfg.main_head_width = 16;
  cfg.patch_head_width = 8;
  cfg.seed = 3;
  return cfg;
}

PerceptualDiscriminator compact_disc(std::size_t levels = 4, std::vector<std::size_t> patches = {}) {
  return build_perceptual_discriminator(compact_config(levels, std::move(patches)),
                                        random_reference_net(compact_trunk(), 17));
}

std::map<std::string, torch::Tensor> params_of(const torch::nn::Module& m) {
  std::map<std::string, torch::Tensor> out;
  for (const auto& item : m.named_parameters()) out[item.key()] = item.value();
  return out;
}

torch::Tensor conv(const torch::Tensor& x, const std::map<std::string, torch::Tensor>& p, const std::string& name,
                   int stride = 1) {
  const auto& w = p.at(name + ".weight");
  return torch::conv2d(x, w, p.at(name + ".bias"), stride, w.size(2) / 2);
}

torch::Tensor lrelu(const torch::Tensor& x) { return torch::leaky_relu(x, 0.2); }

struct Reference {
  torch::Tensor main;
  std::map<std::size_t, torch::Tensor> patches;
};

// Straight-line re-implementation: walks the modified trunk layer by layer,
// cuts f_i right before each pool, then combiners and heads with raw ops.
Reference straight_line(const ArchDescriptor& arch, const Normalization& norm,
                        const std::map<std::string, torch::Tensor>& p, std::size_t levels,
                        const std::vector<std::size_t>& patch_levels, const torch::Tensor& images) {
  auto mean = torch::tensor(norm.mean).view({1, 3, 1, 1});
  auto scale = torch::tensor(norm.scale).view({1, 3, 1, 1});
  auto x = ((images + 1) / 2 - mean) / scale;
  const auto keys = arch.layer_keys();
  std::vector<torch::Tensor> f;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const auto& l = arch.layers[i];
    if (l.kind == LayerKind::MaxPool || l.kind == LayerKind::AvgPool) {
      f.push_back(x);
      if (f.size() == levels) break;
    }
    switch (l.kind) {
      case LayerKind::Conv: x = conv(x, p, "trunk." + keys[i]); break;
      case LayerKind::Relu: x = torch::relu(x); break;
      case LayerKind::LeakyRelu: x = torch::leaky_relu(x, l.negative_slope); break;
      case LayerKind::MaxPool: x = torch::max_pool2d(x, 2, 2); break;
      case LayerKind::AvgPool: x = torch::avg_pool2d(x, 2, 2); break;
    }
  }
  if (f.size() < levels) f.push_back(x);

  std::vector<torch::Tensor> h{f[0]};
  for (std::size_t i = 1; i < levels; ++i) {
    const std::string c = "combiner" + std::to_string(i);
    auto r = lrelu(conv(h.back(), p, c + ".conv1"));
    r = torch::avg_pool2d(r, 2, 2);
    r = lrelu(conv(r, p, c + ".conv2"));
    h.push_back(torch::cat({r, f[i]}, 1));
  }
  Reference out;
  auto m = lrelu(conv(h.back(), p, "main_head.conv1"));
  m = lrelu(conv(m, p, "main_head.conv2", 2));
  out.main = torch::linear(m.mean({2, 3}), p.at("main_head.fc.weight"), p.at("main_head.fc.bias")).squeeze(1);
  for (auto j : patch_levels) {
    const std::string n = "patch_head" + std::to_string(j);
    out.patches[j] = conv(lrelu(conv(h[j - 1], p, n + ".conv")), p, n + ".proj");
  }
  return out;
}

}  // namespace

TEST(Combine, ChannelArithmetic) {
  CombinerBlock c(8, 12);
  auto h = combine(torch::randn({2, 8, 16, 16}), torch::randn({2, 5, 8, 8}), c, 2);
  EXPECT_EQ(h.sizes(), (c10::IntArrayRef{2, 17, 8, 8}));
}

TEST(Combine, ZeroWidthCombinerKeepsOnlyFeatures) {
  CombinerBlock c(8, 0);
  auto f = torch::randn({2, 5, 8, 8});
  auto h = combine(torch::randn({2, 8, 16, 16}), f, c, 2);
  EXPECT_EQ(h.size(1), 5);
  EXPECT_TRUE(torch::equal(h, f));
}

TEST(Combine, SpatialMismatchNamesLevel) {
  CombinerBlock c(8, 4);
  try {
    combine(torch::randn({1, 8, 8, 8}), torch::randn({1, 5, 8, 8}), c, 3);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("level 3"), std::string::npos) << e.what();
  }
}

TEST(DiscriminatorOutput, LogDExamples) {
  // Main head only, d_main = 0.5 -> log 0.5.
  auto a = DiscriminatorOutput::from_probabilities(torch::full({1}, 0.5, torch::kFloat64), {});
  EXPECT_NEAR(a.log_d.item<double>(), std::log(0.5), 1e-12);
  // Plus a 2x2 patch map at 0.5: five terms.
  auto b = DiscriminatorOutput::from_probabilities(torch::full({1}, 0.5, torch::kFloat64),
                                                   {{1, torch::full({1, 1, 2, 2}, 0.5, torch::kFloat64)}});
  EXPECT_NEAR(b.log_d.item<double>(), 5 * std::log(0.5), 1e-12);
  // Probabilities are clamped away from 0 and 1.
  auto c = DiscriminatorOutput::from_probabilities(torch::zeros({1}, torch::kFloat64), {}, 1e-7);
  EXPECT_NEAR(c.log_d.item<double>(), std::log(1e-7), 1e-9);
  EXPECT_TRUE(std::isfinite(c.main_score.item<double>()));
}

TEST(PerceptualDiscriminator, MatchesStraightLineReference) {
  torch::NoGradGuard no_grad;
  auto disc = compact_disc(4, {2, 3});
  torch::manual_seed(8);
  auto images = torch::rand({3, 3, 32, 32}) * 2 - 1;
  auto out = disc->forward(images);
  auto ref = straight_line(disc->trunk()->arch(), disc->trunk()->normalization(), params_of(*disc), 4, {2, 3}, images);
  EXPECT_TRUE(torch::allclose(out.main_score, ref.main, 1e-5, 1e-5)) << out.main_score << ref.main;
  ASSERT_EQ(out.patches.size(), 2u);
  for (const auto& pm : out.patches) {
    EXPECT_TRUE(torch::allclose(pm.score, ref.patches.at(pm.level), 1e-5, 1e-5)) << "patch level " << pm.level;
  }
}

TEST(PerceptualDiscriminator, Vgg19FiveLevelCounts) {
  auto cfg = DiscriminatorConfig{};
  cfg.levels = 5;
  cfg.patch_levels = {3, 4};
  auto disc = build_perceptual_discriminator(cfg, random_reference_net(vgg19_trunk(), 1, false, Normalization::imagenet()));
  EXPECT_EQ(disc->combiner_count(), 4u);
  EXPECT_EQ(disc->patch_head_count(), 2u);
  // Oracle: h_1 = f_1; widths default to min(2 * C(h_{i-1}), 512); C(h_i) = width + C(f_i).
  const std::vector<std::int64_t> f{64, 128, 256, 512, 512};
  std::int64_t prev = f[0];
  EXPECT_EQ(disc->representation_channels(1), prev);
  for (std::size_t i = 1; i < 5; ++i) {
    const auto width = std::min<std::int64_t>(2 * prev, 512);
    EXPECT_EQ(disc->combiners()[i - 1]->out_channels(), width);
    prev = width + f[i];
    EXPECT_EQ(disc->representation_channels(i + 1), prev) << "level " << i + 1;
  }
  EXPECT_EQ(disc->representation_channels(5), 1024);
}

TEST(PerceptualDiscriminator, OutputShapes) {
  torch::NoGradGuard no_grad;
  auto disc = compact_disc(4, {2, 3});
  auto out = disc->forward(torch::zeros({2, 3, 32, 32}));
  EXPECT_EQ(out.main_score.sizes(), (c10::IntArrayRef{2}));
  EXPECT_EQ(out.log_d.sizes(), (c10::IntArrayRef{2}));
  EXPECT_EQ(out.patches[0].score.sizes(), (c10::IntArrayRef{2, 1, 16, 16}));
  EXPECT_EQ(out.patches[1].score.sizes(), (c10::IntArrayRef{2, 1, 8, 8}));
  EXPECT_TRUE((out.main_prob > 0).all().item<bool>());
  EXPECT_TRUE((out.main_prob < 1).all().item<bool>());
}

TEST(PerceptualDiscriminator, LogDIsSumOfHeadLogs) {
  torch::NoGradGuard no_grad;
  auto disc = compact_disc(4, {2, 3});
  auto out = disc->forward(torch::rand({2, 3, 32, 32}) * 2 - 1);
  auto expected = torch::log(out.main_prob);
  for (const auto& pm : out.patches) expected = expected + torch::log(pm.prob).sum({1, 2, 3});
  EXPECT_TRUE(torch::allclose(out.log_d, expected, 1e-5, 1e-4));
}

TEST(PerceptualDiscriminator, PatchLevelOutOfRange) {
  EXPECT_THROW(compact_disc(4, {5}), ConfigError);
  EXPECT_THROW(compact_disc(4, {0}), ConfigError);
}

TEST(PerceptualDiscriminator, WrongCombinerWidthCount) {
  auto cfg = compact_config(4);
  cfg.combiner_widths = {8, 8};
  EXPECT_THROW(build_perceptual_discriminator(cfg, random_reference_net(compact_trunk(), 1)), ConfigError);
}

TEST(PerceptualDiscriminator, IndivisibleInput) {
  auto disc = compact_disc(4);
  EXPECT_THROW(disc->forward(torch::zeros({1, 3, 36, 36})), ShapeError);
}

TEST(PerceptualDiscriminator, SurgeryAppliedInPerceptualMode) {
  auto disc = compact_disc(4);
  EXPECT_TRUE(disc->trunk()->surgically_modified());
  auto cfg = compact_config(4);
  cfg.surgery = false;
  auto plain = build_perceptual_discriminator(cfg, random_reference_net(compact_trunk(), 17));
  EXPECT_FALSE(plain->trunk()->surgically_modified());
}

TEST(PerceptualDiscriminator, ParameterPartition) {
  auto disc = compact_disc(4, {2});
  auto trainable = disc->trainable_parameter_names();
  auto frozen = disc->frozen_parameter_names();
  std::set<std::string> all;
  for (const auto& item : disc->named_parameters()) all.insert(item.key());
  std::set<std::string> joined(trainable.begin(), trainable.end());
  for (const auto& n : frozen) EXPECT_TRUE(joined.insert(n).second) << n << " is in both sets";
  EXPECT_EQ(joined, all);
  ASSERT_EQ(frozen.size(), 14u);  // 7 convs, weight + bias
  for (const auto& n : frozen) EXPECT_EQ(n.rfind("trunk.", 0), 0u) << n;
  for (const auto& n : trainable) EXPECT_NE(n.rfind("trunk.", 0), 0u) << n;
}

TEST(PerceptualDiscriminator, OptimizerStepLeavesTrunkUntouched) {
  auto disc = compact_disc(4, {3});
  std::map<std::string, torch::Tensor> before;
  for (const auto& [k, v] : params_of(*disc)) before[k] = v.detach().clone();
  torch::optim::Adam opt(disc->trainable_parameters(), torch::optim::AdamOptions(1e-2));
  for (int i = 0; i < 3; ++i) {
    opt.zero_grad();
    auto out = disc->forward(torch::rand({2, 3, 32, 32}) * 2 - 1);
    (out.main_score.sum() + out.patches[0].score.sum()).backward();
    opt.step();
  }
  for (const auto& [k, v] : params_of(*disc)) {
    if (k.rfind("trunk.", 0) == 0) {
      EXPECT_TRUE(torch::equal(v, before[k])) << k;
      EXPECT_FALSE(v.grad().defined()) << k;
    }
  }
  EXPECT_FALSE(torch::equal(params_of(*disc).at("combiner1.conv1.weight"), before["combiner1.conv1.weight"]));
}

TEST(PerceptualDiscriminator, GradientReachesImages) {
  auto disc = compact_disc(4);
  auto images = (torch::rand({1, 3, 32, 32}) * 2 - 1).requires_grad_(true);
  auto out = disc->forward(images);
  EXPECT_TRUE(out.input_requires_grad);
  out.main_score.sum().backward();
  EXPECT_GT(images.grad().abs().sum().item<float>(), 0.0F);
}

TEST(PerceptualDiscriminator, PlainModeTrainsRandomTrunk) {
  auto cfg = compact_config(4);
  cfg.mode = DiscriminatorMode::Plain;
  auto pretrained = random_reference_net(compact_trunk(), 17);
  auto disc = build_perceptual_discriminator(cfg, pretrained);
  EXPECT_TRUE(disc->frozen_parameter_names().empty());
  EXPECT_TRUE(disc->trunk()->trainable());
  EXPECT_FALSE(torch::equal(disc->trunk()->weights().at("block0.layer0.weight"),
                            pretrained->weights().at("block0.layer0.weight")));
  EXPECT_GT(disc->trainable_parameter_count(), compact_disc(4)->trainable_parameter_count());
}

TEST(PerceptualDiscriminator, RandomTrunkModeIsFrozen) {
  auto cfg = compact_config(4);
  cfg.mode = DiscriminatorMode::RandomTrunk;
  auto pretrained = random_reference_net(compact_trunk(), 17);
  auto disc = build_perceptual_discriminator(cfg, pretrained);
  EXPECT_EQ(disc->frozen_parameter_names().size(), 14u);
  EXPECT_FALSE(torch::equal(disc->trunk()->weights().at("block0.layer0.weight"),
                            pretrained->weights().at("block0.layer0.weight")));
}

TEST(PerceptualDiscriminator, PerceptualModeRejectsTrainableTrunk) {
  EXPECT_THROW(build_perceptual_discriminator(compact_config(), random_reference_net(compact_trunk(), 1, true)),
               ConfigError);
}

TEST(PerceptualDiscriminator, BatchElementsAreIndependent) {
  torch::NoGradGuard no_grad;
  auto disc = compact_disc(4, {2});
  auto images = torch::rand({3, 3, 32, 32}) * 2 - 1;
  auto joint = disc->forward(images);
  for (int i = 0; i < 3; ++i) {
    auto single = disc->forward(images.slice(0, i, i + 1));
    EXPECT_NEAR(single.main_score.item<float>(), joint.main_score[i].item<float>(), 1e-5);
    EXPECT_TRUE(torch::allclose(single.patches[0].score[0], joint.patches[0].score[i], 1e-5, 1e-5));
  }
}

TEST(PerceptualDiscriminator, SameSeedSameInit) {
  auto a = compact_disc(4);
  auto b = compact_disc(4);
  auto pa = params_of(*a);
  for (const auto& [k, v] : params_of(*b)) EXPECT_TRUE(torch::equal(v, pa.at(k))) << k;
}

TEST(DiscriminatorMode, Names) {
  EXPECT_EQ(discriminator_mode_from_string("plain"), DiscriminatorMode::Plain);
  EXPECT_EQ(discriminator_mode_from_string("random"), DiscriminatorMode::RandomTrunk);
  EXPECT_THROW(discriminator_mode_from_string("other"), ConfigError);
  EXPECT_EQ(high_resolution_patch_levels(5), (std::vector<std::size_t>{3, 4}));
}
