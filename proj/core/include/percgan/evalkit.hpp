#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace percgan {

/// Training protocol of the small evaluation classifiers. Hashed into every
/// result so metrics from different protocols are never mixed silently.
struct ClassifierSpec {
  std::int64_t width = 16;
  std::int64_t epochs = 10;
  std::int64_t batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;

  std::string describe() const;
  std::string hash() const;
};

/// conv3(3,w) lrelu conv3(w,w) lrelu avgpool | conv3(w,2w) lrelu avgpool |
/// conv3(2w,4w) lrelu | global max | linear -> outputs.
class SmallConvNetImpl : public torch::nn::Module {
 public:
  SmallConvNetImpl(std::int64_t width, std::int64_t outputs);
  torch::Tensor forward(const torch::Tensor& x);
  void zero_head();
  std::int64_t outputs() const { return outputs_; }

 private:
  std::int64_t outputs_;
  torch::nn::Sequential features_{nullptr};
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(SmallConvNet);

struct C2STConfig {
  ClassifierSpec classifier;
  std::int64_t min_per_side = 200;
};

struct C2STResult {
  double log_loss = 0.0;  // natural-log cross-entropy on the held-out split
  double accuracy = 0.0;
  std::int64_t train_size = 0;
  std::int64_t test_size = 0;
  std::string classifier_hash;
};

/// Classifier two-sample test. Each side is shuffled and split 50/50; a fresh
/// classifier learns real (1) vs fake (0) on the first halves and is scored
/// on the second. Higher log-loss means the sets are harder to tell apart.
C2STResult c2st(const torch::Tensor& real, const torch::Tensor& fake, const C2STConfig& cfg = {});

/// Frozen softmax classifier over toy attributes (domain membership).
class AttributeClassifier {
 public:
  AttributeClassifier(std::int64_t num_classes, ClassifierSpec spec);

  /// Fits on labelled images (labels in [0, num_classes)).
  static AttributeClassifier train(const torch::Tensor& images, const torch::Tensor& labels, std::int64_t num_classes,
                                   const ClassifierSpec& spec = {});

  /// Untrained classifier with a zeroed head: every image gets uniform probabilities.
  static AttributeClassifier uniform(std::int64_t num_classes, const ClassifierSpec& spec = {});

  void save(const std::filesystem::path& path) const;
  static AttributeClassifier load(const std::filesystem::path& path);

  std::int64_t num_classes() const { return num_classes_; }
  const ClassifierSpec& spec() const { return spec_; }

  /// N x num_classes log-probabilities.
  torch::Tensor log_probabilities(const torch::Tensor& images) const;

 private:
  std::int64_t num_classes_;
  ClassifierSpec spec_;
  SmallConvNet net_;
};

struct AttributeScore {
  double mean_nll = 0.0;
  std::int64_t count = 0;
};

/// Mean -log p(target | image). Throws ConfigError for an unknown class id.
AttributeScore attribute_logloss(const AttributeClassifier& clf, const torch::Tensor& images, std::int64_t target);

struct MetricRecord {
  std::string name;
  double value = 0.0;
  std::string config_hash;
  std::string timestamp;  // ISO-8601 UTC
  nlohmann::ordered_json details = nlohmann::ordered_json::object();
};

MetricRecord make_record(const std::string& name, const C2STResult& r, const std::string& config_hash);
MetricRecord make_record(const std::string& name, const AttributeScore& s, const std::string& config_hash);

/// One JSON object per line. An empty collection yields an empty file.
void export_metrics(const std::vector<MetricRecord>& records, const std::filesystem::path& path);
std::vector<MetricRecord> read_metrics(const std::filesystem::path& path);

/// Two-row grid: inputs on top, outputs below. Both N x 3 x H x W.
torch::Tensor montage(const torch::Tensor& inputs, const torch::Tensor& outputs);
void write_montage(const torch::Tensor& inputs, const torch::Tensor& outputs, const std::filesystem::path& path);

std::string utc_timestamp();

}  // namespace percgan
