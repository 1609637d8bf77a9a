#include "percgan/trunkfit.hpp"

#include "percgan/data.hpp"
#include "percgan/errors.hpp"

namespace percgan {

TrunkFitResult fit_reference_trunk(const ArchDescriptor& arch, const TrunkFitConfig& cfg) {
  if (cfg.steps < 1) throw ConfigError("trunk pretraining needs at least one step");
  const std::int64_t per_class = cfg.batch_size / 4;
  if (per_class < 1) throw ConfigError("trunk pretraining batch size must be >= 4");
  arch.validate();

  auto net = random_reference_net(arch, cfg.seed, /*trainable=*/true, Normalization::symmetric());
  torch::manual_seed(cfg.seed);
  std::int64_t out_channels = 0;
  for (const auto& l : arch.layers) {
    if (l.has_parameters()) out_channels = l.out_channels;
  }
  torch::nn::Linear head(out_channels, 4);
  std::vector<torch::Tensor> params = net->parameters();
  for (const auto& p : head->parameters()) params.push_back(p);
  torch::optim::Adam opt(params, torch::optim::AdamOptions(cfg.lr));

  auto logits = [&](const torch::Tensor& x) { return head->forward(net->forward(net->normalize(x)).mean({2, 3})); };

  TrunkFitResult result;
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    auto [x, y] = synth_shape_classes(per_class, cfg.resolution, cfg.seed * 1000003ULL + step);
    auto loss = torch::cross_entropy_loss(logits(x), y);
    opt.zero_grad();
    loss.backward();
    opt.step();
    result.final_loss = loss.item<double>();
  }
  {
    torch::NoGradGuard no_grad;
    auto [x, y] = synth_shape_classes(100, cfg.resolution, cfg.seed * 1000003ULL + cfg.steps + 17);
    result.holdout_accuracy = (logits(x).argmax(1) == y).to(torch::kFloat32).mean().item<double>();
  }

  ReferenceNet frozen(arch, Normalization::symmetric(), false, false);
  torch::NoGradGuard no_grad;
  auto trained = net->weights();
  for (auto& [key, param] : frozen->weights()) param.copy_(trained.at(key));
  result.net = frozen;
  return result;
}

}  // namespace percgan
