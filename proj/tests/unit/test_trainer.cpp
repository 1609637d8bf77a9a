#include <fstream>
#include <set>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "percgan/errors.hpp"
#include "percgan/tensor_io.hpp"
#include "percgan/trainer.hpp"
#include "support.hpp"

using namespace percgan;
using percgan::testing::TempDir;

namespace {

const char* kTiny = R"([data]
source = toy
resolution = 16
toy_count = 100

[generator]
downsampling = 1
residual_blocks = 1
width = 4
norm = none

[discriminator]
trunk = compact7
levels = 3
combiner_widths = 8, 8
main_head_width = 8
patch_head_width = 4
patch_levels = 2

[losses]
formulation = lsgan
lambda_id = 5
lambda_cyc = 10

[train]
mode = cycle
batch_size = 2
pretrain_batch_size = 4
pretrain_steps = 5
adversarial_steps = 6
log_every = 2
checkpoint_every = 3
)";

FrameworkConfig tiny(const std::vector<std::string>& overrides = {}) { return parse_config(kTiny, overrides); }

ReferenceNet tiny_trunk() { return random_reference_net(compact_trunk(), 31); }

std::map<std::string, torch::Tensor> snapshot(const torch::nn::Module& m) {
  std::map<std::string, torch::Tensor> out;
  for (const auto& p : m.named_parameters()) out[p.key()] = p.value().detach().clone();
  return out;
}

bool same(const std::map<std::string, torch::Tensor>& a, const torch::nn::Module& m) {
  for (const auto& p : m.named_parameters()) {
    if (!torch::equal(a.at(p.key()), p.value())) return false;
  }
  return true;
}

struct Batches {
  std::vector<torch::Tensor> x;
  std::vector<torch::Tensor> y;
};

Batches fixed_batches(int n, std::int64_t b = 2) {
  auto [dx, dy] = synth_toy_domains(ToyTask::Shapes, 100, 16, 3);
  BatchIterator ix(dx, 1);
  BatchIterator iy(dy, 2);
  Batches out;
  for (int i = 0; i < n; ++i) {
    out.x.push_back(ix.next(b));
    out.y.push_back(iy.next(b));
  }
  return out;
}

std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

}  // namespace

TEST(TrainStep, FreezingContractSingle) {
  auto cfg = tiny({"train.mode=single"});
  auto s = init_train_state(cfg, tiny_trunk());
  EXPECT_FALSE(s.g_yx);
  EXPECT_FALSE(s.d_x);
  const auto trunk_before = s.d_y->trunk()->weights();
  std::map<std::string, torch::Tensor> trunk_copy;
  for (const auto& [k, v] : trunk_before) trunk_copy[k] = v.clone();
  auto g_before = snapshot(*s.g_xy);
  auto d_before = snapshot(*s.d_y);
  auto b = fixed_batches(3);
  for (int i = 0; i < 3; ++i) train_step(s, b.x[i], b.y[i], cfg.train);
  EXPECT_EQ(s.step, 3);
  for (const auto& [k, v] : s.d_y->trunk()->weights()) EXPECT_TRUE(torch::equal(v, trunk_copy.at(k))) << k;
  for (const auto& name : s.d_y->trainable_parameter_names()) {
    EXPECT_FALSE(torch::equal(s.d_y->named_parameters()[name], d_before.at(name))) << name;
  }
  for (const auto& p : s.g_xy->named_parameters()) EXPECT_FALSE(torch::equal(p.value(), g_before.at(p.key()))) << p.key();
}

TEST(TrainStep, FrozenTrunkAcrossCycleSteps) {
  auto cfg = tiny();
  auto s = init_train_state(cfg, tiny_trunk());
  std::map<std::string, std::string> digests;
  for (const auto& [k, v] : s.d_x->trunk()->weights()) digests[k] = tensor_digest(v);
  auto b = fixed_batches(4);
  for (int i = 0; i < 4; ++i) train_step(s, b.x[i], b.y[i], cfg.train);
  for (const auto& d : s.discriminators()) {
    for (const auto& [k, v] : d->trunk()->weights()) EXPECT_EQ(tensor_digest(v), digests.at(k)) << k;
  }
}

TEST(TrainStep, EqualSeedsGiveIdenticalReports) {
  auto cfg = tiny();
  auto b = fixed_batches(4);
  auto a = init_train_state(cfg, tiny_trunk());
  auto c = init_train_state(cfg, tiny_trunk());
  for (int i = 0; i < 4; ++i) {
    auto ra = train_step(a, b.x[i], b.y[i], cfg.train);
    auto rc = train_step(c, b.x[i], b.y[i], cfg.train);
    EXPECT_EQ(ra.terms, rc.terms) << "step " << i;
    EXPECT_EQ(ra.total_generator, rc.total_generator);
  }
  auto sa = snapshot(*a.g_yx);
  EXPECT_TRUE(same(sa, *c.g_yx));
}

TEST(TrainStep, HugeIdentityWeightPullsTowardIdentity) {
  auto cfg = tiny({"train.mode=single", "losses.lambda_id=1e6"});
  auto s = init_train_state(cfg, tiny_trunk());
  auto b = fixed_batches(100);
  auto probe = torch::cat(b.y).slice(0, 0, 16);
  auto l1 = [&] {
    torch::NoGradGuard no_grad;
    return reconstruction_loss(probe, s.g_xy->forward(probe)).item<double>();
  };
  const double before = l1();
  double mid = 0.0;
  for (int i = 0; i < 100; ++i) {
    train_step(s, b.x[i], b.y[i], cfg.train);
    if (i == 49) mid = l1();
  }
  const double after = l1();
  EXPECT_LT(mid, before);
  EXPECT_LT(after, mid);
}

TEST(TrainStep, ZeroCycleWeightLeavesAdversarialPlusIdentity) {
  auto cfg = tiny({"losses.lambda_cyc=0"});
  auto s = init_train_state(cfg, tiny_trunk());
  auto b = fixed_batches(2);
  for (int i = 0; i < 2; ++i) {
    auto r = train_step(s, b.x[i], b.y[i], cfg.train);
    EXPECT_GT(r.term("cycle_fwd"), 0.0);
    EXPECT_EQ(r.total_generator, r.term("adv_G") + cfg.train.lambda_id * r.term("identity"));
  }
}

TEST(TrainStep, NonFiniteInputAborts) {
  auto cfg = tiny();
  auto s = init_train_state(cfg, tiny_trunk());
  auto b = fixed_batches(1);
  auto bad = b.x[0].clone();
  bad[0][0][0][0] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(train_step(s, bad, b.y[0], cfg.train), NumericError);
}

TEST(TrainState, OptimizerGroupsAreExclusive) {
  auto s = init_train_state(tiny(), tiny_trunk());
  std::set<const void*> g_ids;
  std::set<const void*> d_ids;
  for (const auto& group : s.opt_g->param_groups())
    for (const auto& p : group.params()) EXPECT_TRUE(g_ids.insert(p.unsafeGetTensorImpl()).second);
  for (const auto& group : s.opt_d->param_groups())
    for (const auto& p : group.params()) EXPECT_TRUE(d_ids.insert(p.unsafeGetTensorImpl()).second);
  std::size_t trainable = 0;
  for (const auto& g : s.generators()) {
    for (const auto& p : g->parameters()) {
      ++trainable;
      EXPECT_TRUE(g_ids.count(p.unsafeGetTensorImpl()));
      EXPECT_FALSE(d_ids.count(p.unsafeGetTensorImpl()));
    }
  }
  for (const auto& d : s.discriminators()) {
    for (const auto& p : d->trainable_parameters()) {
      ++trainable;
      EXPECT_TRUE(d_ids.count(p.unsafeGetTensorImpl()));
      EXPECT_FALSE(g_ids.count(p.unsafeGetTensorImpl()));
    }
    for (const auto& p : d->trunk()->parameters()) {
      EXPECT_FALSE(d_ids.count(p.unsafeGetTensorImpl()));
      EXPECT_FALSE(g_ids.count(p.unsafeGetTensorImpl()));
    }
  }
  EXPECT_EQ(g_ids.size() + d_ids.size(), trainable);
}

TEST(Pretrain, ZeroStepsRejected) {
  auto cfg = tiny({"train.pretrain_steps=0"});
  auto s = init_train_state(cfg, tiny_trunk());
  auto [x, y] = synth_toy_domains(ToyTask::Shapes, 100, 16, 1);
  EXPECT_THROW(pretrain_generator(s.g_xy, x, y, cfg.train, 0), ConfigError);
}

TEST(Pretrain, RepeatedImageRunningLossFallsMonotonically) {
  auto cfg = tiny({"train.pretrain_steps=300"});
  auto s = init_train_state(cfg, tiny_trunk());
  auto one = DomainDataset::from_tensor(Domain::X, synth_toy_domains(ToyTask::Shapes, 100, 16, 4).first.stacked().slice(0, 0, 1));
  auto other = DomainDataset::from_tensor(Domain::Y, one.stacked());
  auto report = pretrain_generator(s.g_xy, one, other, cfg.train, 0);
  ASSERT_EQ(report.losses.size(), 300u);
  std::vector<double> ema;
  double running = 0.0;
  for (std::size_t i = 0; i < report.losses.size(); ++i) {
    running = i == 0 ? report.losses[i] : 0.98 * running + 0.02 * report.losses[i];
    ema.push_back(running);
  }
  for (std::size_t i = 25; i < ema.size(); i += 25) EXPECT_LE(ema[i], ema[i - 25]) << "step " << i;
  EXPECT_NEAR(report.running_loss, ema.back(), 1e-12);
  EXPECT_LT(report.final_loss, 0.25 * report.losses.front());
}

TEST(Pretrain, ToyAutoencoderReconstructs) {
  // Desk-scale setting of the toy configs: 32 px, width 12, M=1, N=3, 2000 steps.
  auto cfg = parse_config(kTiny, {"data.resolution=32", "generator.width=12", "generator.residual_blocks=3",
                                  "train.pretrain_steps=2000", "train.pretrain_batch_size=8", "discriminator.levels=4",
                                  "discriminator.combiner_widths=8,8,8"});
  torch::manual_seed(3);
  auto g = build_generator(cfg.generator);
  auto [x, y] = synth_toy_domains(ToyTask::Shapes, 2000, 32, 7);
  auto report = pretrain_generator(g, x, y, cfg.train, 5);
  EXPECT_LE(report.running_loss, 0.05);
  auto [hx, hy] = synth_toy_domains(ToyTask::Shapes, 100, 32, 99);
  auto held_out = torch::cat({hx.stacked(), hy.stacked()});
  const double l1 = reconstruction_loss(held_out, translate_all(g, held_out)).item<double>();
  EXPECT_LE(l1, 0.05);
  RecordProperty("held_out_l1", std::to_string(l1));

  // Two copies of a pretrained autoencoder compose to near-identity: cycle terms start near 0.
  auto s = init_train_state(cfg, random_reference_net(compact_trunk(), 31));
  {
    torch::NoGradGuard no_grad;
    auto src = g->named_parameters();
    for (auto& gen : s.generators())
      for (auto& p : gen->named_parameters()) p.value().copy_(src[p.key()]);
  }
  auto r = train_step(s, hx.stacked().slice(0, 0, 4), hy.stacked().slice(0, 0, 4), cfg.train);
  EXPECT_LT(r.term("cycle_fwd"), 0.1);
  EXPECT_LT(r.term("cycle_bwd"), 0.1);
}

TEST(Checkpoint, RoundTripIsBitIdentical) {
  TempDir dir;
  auto cfg = tiny();
  auto s = init_train_state(cfg, tiny_trunk());
  auto b = fixed_batches(4);
  for (int i = 0; i < 2; ++i) train_step(s, b.x[i], b.y[i], cfg.train);
  save_checkpoint(s, dir / "c.safetensors");
  auto t = load_checkpoint(dir / "c.safetensors", cfg, false, tiny_trunk());
  EXPECT_EQ(t.step, 2);
  EXPECT_EQ(t.running, s.running);
  {
    torch::NoGradGuard no_grad;
    EXPECT_TRUE(torch::equal(s.g_xy->forward(b.x[3]), t.g_xy->forward(b.x[3])));
    EXPECT_TRUE(torch::equal(s.g_yx->forward(b.y[3]), t.g_yx->forward(b.y[3])));
    EXPECT_TRUE(torch::equal(s.d_x->forward(b.x[3]).main_score, t.d_x->forward(b.x[3]).main_score));
  }
  // Optimizer moments came along: the next step matches exactly.
  auto rs = train_step(s, b.x[2], b.y[2], cfg.train);
  auto rt = train_step(t, b.x[2], b.y[2], cfg.train);
  EXPECT_EQ(rs.terms, rt.terms);
  EXPECT_TRUE(same(snapshot(*s.g_xy), *t.g_xy));

  auto gens = load_generators(dir / "c.safetensors");
  EXPECT_EQ(gens.step, 2);
  ASSERT_TRUE(gens.g_yx);
  EXPECT_EQ(gens.config_hash, config_hash(cfg));
}

TEST(Checkpoint, WidthMismatchNamesParameter) {
  TempDir dir;
  auto s = init_train_state(tiny(), tiny_trunk());
  save_checkpoint(s, dir / "c.safetensors");
  try {
    load_checkpoint(dir / "c.safetensors", tiny({"generator.width=6"}), true, tiny_trunk());
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("g_xy.encoder"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4, 3, 7, 7]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[6, 3, 7, 7]"), std::string::npos) << msg;
  }
}

TEST(Checkpoint, ConfigHashMismatchRefusedUnlessOverridden) {
  TempDir dir;
  auto s = init_train_state(tiny(), tiny_trunk());
  save_checkpoint(s, dir / "c.safetensors");
  auto changed = tiny({"losses.lambda_id=2"});
  EXPECT_THROW(load_checkpoint(dir / "c.safetensors", changed, false, tiny_trunk()), ConfigError);
  auto t = load_checkpoint(dir / "c.safetensors", changed, true, tiny_trunk());
  EXPECT_EQ(t.config_hash, config_hash(changed));
  EXPECT_NE(t.config_text.find("lambda_id = 2"), std::string::npos);
  EXPECT_TRUE(same(snapshot(*s.g_xy), *t.g_xy));
  EXPECT_THROW(load_checkpoint(dir / "c.safetensors", tiny({"train.mode=single"}), true, tiny_trunk()), ConfigError);
}

TEST(Checkpoint, DifferentTrunkRefused) {
  TempDir dir;
  auto s = init_train_state(tiny(), tiny_trunk());
  save_checkpoint(s, dir / "c.safetensors");
  EXPECT_THROW(load_checkpoint(dir / "c.safetensors", tiny(), false, random_reference_net(compact_trunk(), 32)),
               LoadError);
}

TEST(Checkpoint, CorruptContainer) {
  TempDir dir;
  std::ofstream(dir / "c.safetensors") << "\x10\x00\x00\x00\x00\x00\x00\x00{not json at all";
  EXPECT_THROW(load_checkpoint(dir / "c.safetensors", tiny(), false, tiny_trunk()), LoadError);
  TensorFile other;
  other.tensors["w"] = torch::ones({1});
  write_tensor_file(dir / "w.safetensors", other);
  EXPECT_THROW(load_generators(dir / "w.safetensors"), LoadError);
}

TEST(RunTraining, WritesLogsAndCheckpoints) {
  TempDir dir;
  auto cfg = tiny();
  auto [x, y] = load_datasets(cfg.data);
  RunOptions opts;
  opts.out_dir = dir.path();
  opts.quiet = true;
  opts.trunk = tiny_trunk();
  auto s = run_training(cfg, x, y, opts);
  EXPECT_EQ(s.step, 6);
  EXPECT_EQ(s.pretrain_steps, 5);
  for (int step : {0, 3, 6}) EXPECT_TRUE(std::filesystem::exists(checkpoint_path(dir / "checkpoints", step))) << step;
  EXPECT_EQ(latest_checkpoint(dir / "checkpoints"), checkpoint_path(dir / "checkpoints", 6));
  auto lines = read_lines(dir / "train_log.jsonl");
  int pretrain = 0;
  std::vector<std::int64_t> adv_steps;
  for (const auto& line : lines) {
    auto j = nlohmann::json::parse(line);
    if (j["phase"] == "pretrain") {
      ++pretrain;
      EXPECT_TRUE(j.contains("recon"));
    } else {
      adv_steps.push_back(j["step"]);
      for (const char* k : {"adv_D", "adv_G", "identity", "cycle_fwd", "cycle_bwd", "total_G", "running"})
        EXPECT_TRUE(j.contains(k)) << k;
    }
  }
  EXPECT_EQ(pretrain, 2 * 3);  // steps 2, 4 and the last, per generator
  EXPECT_EQ(adv_steps, (std::vector<std::int64_t>{1, 2, 4, 6}));
}

TEST(RunTraining, ResumeContinuesExactly) {
  TempDir a;
  TempDir b;
  auto cfg = tiny();
  auto [x, y] = load_datasets(cfg.data);
  RunOptions opts;
  opts.quiet = true;
  opts.trunk = tiny_trunk();
  opts.out_dir = a.path();
  auto full = run_training(cfg, x, y, opts);

  opts.out_dir = b.path();
  opts.resume = checkpoint_path(a / "checkpoints", 3);
  auto resumed = run_training(cfg, x, y, opts);
  EXPECT_EQ(resumed.step, 6);
  EXPECT_TRUE(same(snapshot(*full.g_xy), *resumed.g_xy));
  EXPECT_TRUE(same(snapshot(*full.d_y), *resumed.d_y));
  auto full_lines = read_lines(a / "train_log.jsonl");
  auto resumed_lines = read_lines(b / "train_log.jsonl");
  ASSERT_EQ(resumed_lines.size(), 2u);  // steps 4 and 6
  EXPECT_EQ(resumed_lines.back(), full_lines.back());
}

TEST(RunTraining, EqualSeedsGiveIdenticalLogs) {
  TempDir a;
  TempDir b;
  auto cfg = tiny();
  auto [x, y] = load_datasets(cfg.data);
  RunOptions opts;
  opts.quiet = true;
  opts.trunk = tiny_trunk();
  opts.out_dir = a.path();
  run_training(cfg, x, y, opts);
  opts.out_dir = b.path();
  run_training(cfg, x, y, opts);
  EXPECT_EQ(read_lines(a / "train_log.jsonl"), read_lines(b / "train_log.jsonl"));
}
