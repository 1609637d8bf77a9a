#include <benchmark/benchmark.h>
#include <torch/torch.h>

#include "percgan/generator.hpp"
#include "percgan/percdisc.hpp"
#include "percgan/trainer.hpp"

using namespace percgan;

namespace {

void BM_DiscriminatorForward(benchmark::State& state) {
  torch::NoGradGuard no_grad;
  torch::set_num_threads(1);
  const auto side = state.range(0);
  DiscriminatorConfig cfg;
  cfg.trunk_id = "compact7";
  cfg.levels = 4;
  cfg.combiner_widths = {16, 32, 64};
  cfg.main_head_width = 32;
  auto disc = build_perceptual_discriminator(cfg, random_reference_net(compact_trunk(), 1));
  auto batch = torch::rand({4, 3, side, side}) * 2 - 1;
  for (auto _ : state) benchmark::DoNotOptimize(disc->forward(batch).log_d);
  state.SetItemsProcessed(state.iterations() * 4);
}
BENCHMARK(BM_DiscriminatorForward)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_GeneratorForward(benchmark::State& state) {
  torch::NoGradGuard no_grad;
  torch::set_num_threads(1);
  GeneratorConfig cfg;
  cfg.downsampling = 1;
  cfg.residual_blocks = 3;
  cfg.width = 12;
  cfg.norm = NormKind::None;
  cfg.resolution = state.range(0);
  auto g = build_generator(cfg);
  auto batch = torch::rand({4, 3, cfg.resolution, cfg.resolution}) * 2 - 1;
  for (auto _ : state) benchmark::DoNotOptimize(g->forward(batch));
  state.SetItemsProcessed(state.iterations() * 4);
}
BENCHMARK(BM_GeneratorForward)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_CycleTrainStep(benchmark::State& state) {
  torch::set_num_threads(1);
  auto cfg = parse_config(R"([data]
resolution = 32
[generator]
downsampling = 1
residual_blocks = 3
width = 12
norm = none
[discriminator]
trunk = compact7
levels = 4
combiner_widths = 16, 32, 64
main_head_width = 32
[losses]
formulation = lsgan
lambda_id = 5
lambda_cyc = 10
[train]
mode = cycle
batch_size = 4
)");
  auto ts = init_train_state(cfg, random_reference_net(compact_trunk(), 1));
  auto x = torch::rand({4, 3, 32, 32}) * 2 - 1;
  auto y = torch::rand({4, 3, 32, 32}) * 2 - 1;
  for (auto _ : state) benchmark::DoNotOptimize(train_step(ts, x, y, cfg.train).total_generator);
}
BENCHMARK(BM_CycleTrainStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
