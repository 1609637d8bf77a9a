#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "percgan/data.hpp"
#include "percgan/evalkit.hpp"
#include "percgan/generator.hpp"
#include "percgan/objectives.hpp"
#include "percgan/percdisc.hpp"

namespace percgan {

enum class TrainMode { Single, Cycle };

std::string_view to_string(TrainMode mode);
TrainMode train_mode_from_string(std::string_view name);

struct DataConfig {
  std::string source = "toy";  // toy | folder
  std::filesystem::path root;  // folder source: <root>/domainX, <root>/domainY
  ToyTask toy_task = ToyTask::Shapes;
  std::int64_t toy_count = 2000;
  std::int64_t resolution = 32;
  std::int64_t crop = 0;
  bool hflip = false;
  bool strict = false;
  std::uint64_t seed = 7;

  PreprocessSpec preprocess() const { return {crop, resolution, hflip, strict}; }
};

struct TrainingConfig {
  TrainMode mode = TrainMode::Cycle;
  AdversarialFormulation formulation;
  double lambda_id = 5.0;
  double lambda_cyc = 10.0;
  std::string optimizer = "adam";
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double pretrain_lr = 1e-3;
  double pretrain_beta1 = 0.9;
  std::int64_t batch_size = 1;
  std::int64_t pretrain_batch_size = 8;
  std::int64_t pretrain_steps = 2000;
  std::int64_t adversarial_steps = 5000;
  std::uint64_t seed = 0;
  std::int64_t log_every = 50;
  std::int64_t checkpoint_every = 1000;
};

struct EvalConfig {
  C2STConfig c2st;
  std::filesystem::path attribute_classifier;
  std::int64_t target_class = 1;
  std::int64_t sample_count = 1000;
  std::uint64_t seed = 11;
};

/// Every field of the framework, addressable as "section.key" in the INI
/// file and through `--set section.key=value` overrides.
struct FrameworkConfig {
  DataConfig data;
  GeneratorConfig generator;
  DiscriminatorConfig discriminator;
  TrainingConfig train;
  EvalConfig eval;
};

/// Parses INI text. Relative paths are resolved against `base_dir`.
/// Throws ConfigError naming the offending "section.key".
FrameworkConfig parse_config(const std::string& text, const std::vector<std::string>& overrides = {},
                             const std::filesystem::path& base_dir = {});

FrameworkConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

/// Cross-field checks (divisibility, ranges, mode requirements).
void validate(const FrameworkConfig& cfg);

/// All fields materialized, fixed order; parse_config(canonical_text(c)) == c.
std::string canonical_text(const FrameworkConfig& cfg);

/// SHA-256 of canonical_text.
std::string config_hash(const FrameworkConfig& cfg);

}  // namespace percgan
