#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "percgan/config.hpp"
#include "percgan/data.hpp"
#include "percgan/generator.hpp"
#include "percgan/objectives.hpp"
#include "percgan/percdisc.hpp"

namespace percgan {

inline constexpr const char* kLibraryVersion = "percgan 0.1.0";

/// Everything a training run mutates. In single mode only g_xy and d_y
/// exist; d_y judges domain Y (the target of g_xy), d_x judges X.
struct TrainState {
  TrainMode mode = TrainMode::Cycle;
  std::int64_t step = 0;           // adversarial steps taken
  std::int64_t pretrain_steps = 0; // autoencoder steps taken per generator
  GeneratorNet g_xy{nullptr};
  GeneratorNet g_yx{nullptr};
  PerceptualDiscriminator d_y{nullptr};
  PerceptualDiscriminator d_x{nullptr};
  std::shared_ptr<torch::optim::Adam> opt_g;
  std::shared_ptr<torch::optim::Adam> opt_d;
  std::map<std::string, double> running;  // exponential moving averages of LossReport terms
  BatchIterator::State cursor_x;
  BatchIterator::State cursor_y;
  std::string config_text;
  std::string config_hash;

  std::vector<GeneratorNet> generators() const;
  std::vector<PerceptualDiscriminator> discriminators() const;
};

/// Builds fresh models and adversarial optimizers from the config. The
/// frozen trunk is loaded from discriminator.trunk_weights unless `trunk`
/// is given.
TrainState init_train_state(const FrameworkConfig& cfg, const std::optional<ReferenceNet>& trunk = std::nullopt);

struct PretrainReport {
  std::int64_t steps = 0;
  double final_loss = 0.0;
  double running_loss = 0.0;
  std::vector<double> losses;
};

/// Autoencoder pretraining on the union of both domains (each batch mixes
/// the two halves). Throws ConfigError for zero steps and NumericError on a
/// non-finite loss.
PretrainReport pretrain_generator(GeneratorNet& g, const DomainDataset& x, const DomainDataset& y,
                                  const TrainingConfig& cfg, std::uint64_t seed);

/// Pretrains every generator of the state and records the step count.
std::vector<PretrainReport> pretrain_generators(TrainState& state, const DomainDataset& x, const DomainDataset& y,
                                                const TrainingConfig& cfg);

/// One discriminator update then one generator update (adversarial + identity).
LossReport train_step_single(TrainState& state, const torch::Tensor& batch_x, const torch::Tensor& batch_y,
                             const TrainingConfig& cfg);

/// Both discriminators, then both generators with adversarial, cycle and identity terms.
LossReport train_step_cycle(TrainState& state, const torch::Tensor& batch_x, const torch::Tensor& batch_y,
                            const TrainingConfig& cfg);

LossReport train_step(TrainState& state, const torch::Tensor& batch_x, const torch::Tensor& batch_y,
                      const TrainingConfig& cfg);

/// Name-keyed parameters of all models and Adam moments, step counters,
/// cursors, config text/hash and library version. Frozen trunk parameters
/// are not stored.
void save_checkpoint(const TrainState& state, const std::filesystem::path& path);

/// Rebuilds the state for `cfg` and restores the checkpoint. A config hash
/// differing from the checkpoint's is refused unless `override_config`.
TrainState load_checkpoint(const std::filesystem::path& path, const FrameworkConfig& cfg, bool override_config = false,
                           const std::optional<ReferenceNet>& trunk = std::nullopt);

/// Config stored inside a checkpoint.
FrameworkConfig checkpoint_config(const std::filesystem::path& path);

struct TrainedGenerators {
  FrameworkConfig config;
  std::string config_hash;
  std::int64_t step = 0;
  GeneratorNet g_xy{nullptr};
  GeneratorNet g_yx{nullptr};  // null for single-mode checkpoints
};

/// Generators only; needs neither trunk weights nor data.
TrainedGenerators load_generators(const std::filesystem::path& path);

/// step_0000100.safetensors etc. plus a "latest" file naming the newest one.
std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::int64_t step);
std::filesystem::path latest_checkpoint(const std::filesystem::path& dir);

struct RunOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume;
  bool override_config = false;
  bool quiet = false;
  std::optional<ReferenceNet> trunk;
};

/// Pretraining (when not yet done) followed by adversarial training, with a
/// JSONL loss log in out_dir/train_log.jsonl and checkpoints in
/// out_dir/checkpoints. A non-finite loss aborts with NumericError naming
/// the term and the last written checkpoint.
TrainState run_training(const FrameworkConfig& cfg, const DomainDataset& x, const DomainDataset& y,
                        const RunOptions& opts);

/// Datasets described by the [data] section.
std::pair<DomainDataset, DomainDataset> load_datasets(const DataConfig& cfg);

/// Translates a stack of images in chunks without building a graph.
torch::Tensor translate_all(GeneratorNet& g, const torch::Tensor& images, std::int64_t chunk = 100);

}  // namespace percgan
