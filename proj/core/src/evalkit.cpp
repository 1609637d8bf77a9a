#include "percgan/evalkit.hpp"

#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <sstream>

#include "percgan/data.hpp"
#include "percgan/errors.hpp"
#include "percgan/tensor_io.hpp"

namespace percgan {
namespace {

constexpr std::int64_t kEvalChunk = 256;

torch::nn::Conv2d conv3(std::int64_t in, std::int64_t out) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1));
}

torch::nn::LeakyReLU lrelu() { return torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)); }

torch::nn::AvgPool2d pool() { return torch::nn::AvgPool2d(torch::nn::AvgPool2dOptions(2)); }

torch::Tensor chunked_forward(SmallConvNet& net, const torch::Tensor& images) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> parts;
  for (std::int64_t i = 0; i < images.size(0); i += kEvalChunk) {
    parts.push_back(net->forward(images.slice(0, i, std::min(i + kEvalChunk, images.size(0)))));
  }
  return torch::cat(parts);
}

// Mini-batch Adam over (images, targets) with a seeded per-epoch shuffle.
template <typename LossFn>
void fit(SmallConvNet& net, const torch::Tensor& images, const torch::Tensor& targets, const ClassifierSpec& spec,
         LossFn loss_fn) {
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(spec.lr));
  auto gen = at::make_generator<at::CPUGeneratorImpl>(spec.seed + 1);
  const std::int64_t n = images.size(0);
  net->train();
  for (std::int64_t epoch = 0; epoch < spec.epochs; ++epoch) {
    auto perm = torch::randperm(n, gen, torch::kInt64);
    for (std::int64_t i = 0; i < n; i += spec.batch_size) {
      auto idx = perm.slice(0, i, std::min(i + spec.batch_size, n));
      auto loss = loss_fn(net->forward(images.index_select(0, idx)), targets.index_select(0, idx));
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
  }
  net->eval();
}

void require_images(const torch::Tensor& t, const char* what) {
  if (t.dim() != 4 || t.size(1) != 3) throw ShapeError(std::string(what) + ": expected N x 3 x H x W images");
}

}  // namespace

std::string ClassifierSpec::describe() const {
  std::ostringstream os;
  os << "smallconv width=" << width << " epochs=" << epochs << " batch=" << batch_size << " lr=" << lr
     << " seed=" << seed << " pool=max split=0.5";
  return os.str();
}

std::string ClassifierSpec::hash() const { return sha256_hex(describe()).substr(0, 16); }

SmallConvNetImpl::SmallConvNetImpl(std::int64_t width, std::int64_t outputs) : outputs_(outputs) {
  if (width < 1 || outputs < 1) throw ConfigError("classifier width and output count must be >= 1");
  torch::nn::Sequential f;
  f->push_back(conv3(3, width));
  f->push_back(lrelu());
  f->push_back(conv3(width, width));
  f->push_back(lrelu());
  f->push_back(pool());
  f->push_back(conv3(width, 2 * width));
  f->push_back(lrelu());
  f->push_back(pool());
  f->push_back(conv3(2 * width, 4 * width));
  f->push_back(lrelu());
  features_ = register_module("features", f);
  head_ = register_module("head", torch::nn::Linear(4 * width, outputs));
}

torch::Tensor SmallConvNetImpl::forward(const torch::Tensor& x) {
  // Global max: average pooling cannot localize a small shape difference.
  return head_->forward(features_->forward(x).amax({2, 3}));
}

void SmallConvNetImpl::zero_head() {
  torch::NoGradGuard no_grad;
  head_->weight.zero_();
  head_->bias.zero_();
}

C2STResult c2st(const torch::Tensor& real, const torch::Tensor& fake, const C2STConfig& cfg) {
  require_images(real, "c2st real set");
  require_images(fake, "c2st fake set");
  if (real.sizes().slice(1) != fake.sizes().slice(1)) throw ShapeError("c2st: real and fake image shapes differ");
  if (real.size(0) < cfg.min_per_side || fake.size(0) < cfg.min_per_side) {
    throw ConfigError("c2st needs at least " + std::to_string(cfg.min_per_side) + " images per side, got " +
                      std::to_string(real.size(0)) + " real and " + std::to_string(fake.size(0)) + " fake");
  }
  const auto& spec = cfg.classifier;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(spec.seed);
  auto r = real.detach().to(torch::kFloat32).index_select(0, torch::randperm(real.size(0), gen, torch::kInt64));
  auto f = fake.detach().to(torch::kFloat32).index_select(0, torch::randperm(fake.size(0), gen, torch::kInt64));
  const std::int64_t nr = r.size(0) / 2;
  const std::int64_t nf = f.size(0) / 2;
  auto x_train = torch::cat({r.slice(0, 0, nr), f.slice(0, 0, nf)});
  auto y_train = torch::cat({torch::ones({nr}), torch::zeros({nf})});
  auto x_test = torch::cat({r.slice(0, nr), f.slice(0, nf)});
  auto y_test = torch::cat({torch::ones({r.size(0) - nr}), torch::zeros({f.size(0) - nf})});

  torch::manual_seed(spec.seed);
  SmallConvNet net(spec.width, 1);
  fit(net, x_train, y_train, spec, [](const torch::Tensor& logits, const torch::Tensor& y) {
    return torch::binary_cross_entropy_with_logits(logits.squeeze(1), y);
  });
  auto scores = chunked_forward(net, x_test).squeeze(1);
  C2STResult out;
  out.log_loss = torch::binary_cross_entropy_with_logits(scores, y_test).item<double>();
  out.accuracy = (scores.gt(0).to(torch::kFloat32) == y_test).to(torch::kFloat32).mean().item<double>();
  out.train_size = x_train.size(0);
  out.test_size = x_test.size(0);
  out.classifier_hash = spec.hash();
  return out;
}

AttributeClassifier::AttributeClassifier(std::int64_t num_classes, ClassifierSpec spec)
    : num_classes_(num_classes), spec_(spec), net_(spec.width, num_classes) {
  if (num_classes < 2) throw ConfigError("attribute classifier needs at least 2 classes");
}

AttributeClassifier AttributeClassifier::train(const torch::Tensor& images, const torch::Tensor& labels,
                                               std::int64_t num_classes, const ClassifierSpec& spec) {
  require_images(images, "attribute training set");
  if (labels.dim() != 1 || labels.size(0) != images.size(0)) throw ShapeError("one label per training image required");
  if (labels.min().item<std::int64_t>() < 0 || labels.max().item<std::int64_t>() >= num_classes) {
    throw ConfigError("attribute labels must lie in [0, " + std::to_string(num_classes) + ")");
  }
  torch::manual_seed(spec.seed);
  AttributeClassifier clf(num_classes, spec);
  fit(clf.net_, images.to(torch::kFloat32), labels.to(torch::kInt64), spec,
      [](const torch::Tensor& logits, const torch::Tensor& y) { return torch::cross_entropy_loss(logits, y); });
  return clf;
}

AttributeClassifier AttributeClassifier::uniform(std::int64_t num_classes, const ClassifierSpec& spec) {
  torch::manual_seed(spec.seed);
  AttributeClassifier clf(num_classes, spec);
  clf.net_->zero_head();
  clf.net_->eval();
  return clf;
}

void AttributeClassifier::save(const std::filesystem::path& path) const {
  TensorFile file;
  for (const auto& p : net_->named_parameters()) file.tensors[p.key()] = p.value().detach();
  nlohmann::ordered_json spec{{"width", spec_.width},
                              {"epochs", spec_.epochs},
                              {"batch_size", spec_.batch_size},
                              {"lr", spec_.lr},
                              {"seed", spec_.seed}};
  file.metadata["kind"] = "attribute_classifier";
  file.metadata["num_classes"] = std::to_string(num_classes_);
  file.metadata["spec"] = spec.dump();
  write_tensor_file(path, file);
}

AttributeClassifier AttributeClassifier::load(const std::filesystem::path& path) {
  auto file = read_tensor_file(path);
  if (file.metadata["kind"] != "attribute_classifier") {
    throw LoadError(path.string() + " is not an attribute classifier container");
  }
  ClassifierSpec spec;
  std::int64_t classes = 0;
  try {
    auto j = nlohmann::json::parse(file.metadata.at("spec"));
    spec.width = j.at("width");
    spec.epochs = j.at("epochs");
    spec.batch_size = j.at("batch_size");
    spec.lr = j.at("lr");
    spec.seed = j.at("seed");
    classes = std::stoll(file.metadata.at("num_classes"));
  } catch (const std::exception& e) {
    throw LoadError(path.string() + ": bad classifier metadata (" + e.what() + ")");
  }
  AttributeClassifier clf(classes, spec);
  torch::NoGradGuard no_grad;
  for (auto& p : clf.net_->named_parameters()) {
    auto it = file.tensors.find(p.key());
    if (it == file.tensors.end()) throw LoadError(path.string() + ": missing key " + p.key());
    if (it->second.sizes() != p.value().sizes()) throw ShapeError(path.string() + ": shape mismatch for " + p.key());
    p.value().copy_(it->second);
  }
  clf.net_->eval();
  return clf;
}

torch::Tensor AttributeClassifier::log_probabilities(const torch::Tensor& images) const {
  require_images(images, "attribute classifier input");
  auto net = net_;
  return torch::log_softmax(chunked_forward(net, images.to(torch::kFloat32)), 1);
}

AttributeScore attribute_logloss(const AttributeClassifier& clf, const torch::Tensor& images, std::int64_t target) {
  if (target < 0 || target >= clf.num_classes()) {
    throw ConfigError("class id " + std::to_string(target) + " unknown to a " + std::to_string(clf.num_classes()) +
                      "-class attribute classifier");
  }
  if (images.size(0) < 1) throw ShapeError("attribute_logloss needs at least one image");
  auto lp = clf.log_probabilities(images);
  return {-lp.select(1, target).mean().item<double>(), images.size(0)};
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

MetricRecord make_record(const std::string& name, const C2STResult& r, const std::string& config_hash) {
  MetricRecord rec{name, r.log_loss, config_hash, utc_timestamp()};
  rec.details = {{"accuracy", r.accuracy},
                 {"train_size", r.train_size},
                 {"test_size", r.test_size},
                 {"classifier_hash", r.classifier_hash}};
  return rec;
}

MetricRecord make_record(const std::string& name, const AttributeScore& s, const std::string& config_hash) {
  MetricRecord rec{name, s.mean_nll, config_hash, utc_timestamp()};
  rec.details = {{"count", s.count}};
  return rec;
}

void export_metrics(const std::vector<MetricRecord>& records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open metrics file for writing: " + path.string());
  for (const auto& r : records) {
    nlohmann::ordered_json j{{"name", r.name}, {"value", r.value}, {"config_hash", r.config_hash},
                             {"timestamp", r.timestamp}};
    if (!r.details.empty()) j["details"] = r.details;
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<MetricRecord> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics file: " + path.string());
  std::vector<MetricRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::ordered_json::parse(line);
      MetricRecord r{j.at("name"), j.at("value"), j.at("config_hash"), j.at("timestamp")};
      if (j.contains("details")) r.details = j["details"];
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw LoadError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

torch::Tensor montage(const torch::Tensor& inputs, const torch::Tensor& outputs) {
  require_images(inputs, "montage inputs");
  if (inputs.sizes() != outputs.sizes()) throw ShapeError("montage: inputs and outputs must have equal shapes");
  auto row = [](const torch::Tensor& t) { return torch::cat(t.detach().to(torch::kFloat32).unbind(0), 2); };
  return torch::cat({row(inputs), row(outputs)}, 1);
}

void write_montage(const torch::Tensor& inputs, const torch::Tensor& outputs, const std::filesystem::path& path) {
  write_image(path, montage(inputs, outputs));
}

}  // namespace percgan
