// percgan: prepare-refnet -> train -> translate -> evaluate, plus toy-scale helpers.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "percgan/config.hpp"
#include "percgan/data.hpp"
#include "percgan/errors.hpp"
#include "percgan/evalkit.hpp"
#include "percgan/refnet.hpp"
#include "percgan/trainer.hpp"
#include "percgan/trunkfit.hpp"

namespace fs = std::filesystem;
using namespace percgan;

namespace {

enum ExitCode { kOk = 0, kConfigFailure = 2, kRuntimeFailure = 3, kNumericFailure = 4 };

void select_device() {
  const char* env = std::getenv("PERCGAN_DEVICE");
  const std::string device = env ? env : "cpu";
  if (device != "cpu") {
    throw ConfigError("PERCGAN_DEVICE=" + device + ": this build supports only 'cpu'");
  }
}

// Output locations are never overwritten without --force.
void claim_output(const fs::path& p, bool force, bool directory) {
  if (fs::exists(p)) {
    const bool empty_dir = fs::is_directory(p) && fs::is_empty(p);
    if (!empty_dir && !force) throw ConfigError(p.string() + " already exists (pass --force to overwrite)");
    if (!empty_dir && directory) fs::remove_all(p);
  }
  if (directory) {
    fs::create_directories(p);
  } else if (p.has_parent_path()) {
    fs::create_directories(p.parent_path());
  }
}

void write_json(const fs::path& p, const nlohmann::ordered_json& j) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

ArchDescriptor arch_from_flag(const std::string& value) {
  if (value == "vgg19") return vgg19_trunk();
  if (value == "compact7") return compact_trunk();
  return ArchDescriptor::from_file(value);
}

std::vector<fs::path> image_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && has_image_extension(e.path())) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw IoError("no images in " + dir.string());
  return out;
}

torch::Tensor load_images(const fs::path& dir, std::int64_t resolution) {
  PreprocessSpec spec;
  spec.resize = resolution;
  spec.strict = true;
  return load_domain(dir, Domain::X, spec).stacked();
}

GeneratorNet pick_generator(TrainedGenerators& t, const std::string& direction) {
  if (direction == "xy") return t.g_xy;
  if (!t.g_yx) throw ConfigError("--direction yx: checkpoint holds a single-direction run without a reverse generator");
  return t.g_yx;
}

struct PrepareArgs {
  std::string weights, arch, surgery = "on", out;
  bool force = false;
};

int cmd_prepare_refnet(const PrepareArgs& a) {
  const auto arch = arch_from_flag(a.arch);
  auto net = load_reference_weights(a.weights, arch);
  if (a.surgery == "on" && !net->surgically_modified()) net = apply_surgery(net);
  claim_output(a.out, a.force, false);
  save_reference_weights(net, a.out);
  std::cout << "wrote " << a.out << " and " << manifest_path_for(a.out).string() << " (" << arch.conv_count()
            << " conv layers, surgery " << (net->surgically_modified() ? "applied" : "off") << ")\n";
  return kOk;
}

struct TrainArgs {
  std::string config, out, resume;
  std::vector<std::string> sets;
  bool force = false;
  bool override_config = false;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  const auto cfg = load_config(a.config, a.sets);
  fs::path resume;
  if (!a.resume.empty()) {
    resume = fs::is_directory(a.resume) ? latest_checkpoint(a.resume) : fs::path(a.resume);
    if (!fs::exists(resume)) throw IoError("checkpoint not found: " + resume.string());
  } else {
    claim_output(a.out, a.force, true);
  }
  fs::create_directories(a.out);
  nlohmann::ordered_json manifest{{"command", "train"},
                                  {"config_file", fs::absolute(a.config).string()},
                                  {"overrides", a.sets},
                                  {"resume", resume.string()},
                                  {"config_hash", config_hash(cfg)},
                                  {"config", canonical_text(cfg)},
                                  {"version", kLibraryVersion},
                                  {"output_dir", fs::absolute(a.out).string()},
                                  {"started", utc_timestamp()}};
  write_json(fs::path(a.out) / "run_manifest.json", manifest);

  auto [x, y] = load_datasets(cfg.data);
  RunOptions opts;
  opts.out_dir = a.out;
  if (!resume.empty()) opts.resume = resume;
  opts.override_config = a.override_config;
  opts.quiet = a.quiet;
  auto state = run_training(cfg, x, y, opts);

  manifest["finished"] = utc_timestamp();
  manifest["final_step"] = state.step;
  manifest["final_checkpoint"] = latest_checkpoint(fs::path(a.out) / "checkpoints").string();
  write_json(fs::path(a.out) / "run_manifest.json", manifest);
  std::cout << "training finished at step " << state.step << "; checkpoint "
            << manifest["final_checkpoint"].get<std::string>() << '\n';
  return kOk;
}

struct TranslateArgs {
  std::string checkpoint, input, output, direction = "xy";
  bool force = false;
};

int cmd_translate(const TranslateArgs& a) {
  auto trained = load_generators(a.checkpoint);
  auto g = pick_generator(trained, a.direction);
  const auto files = image_files(a.input);
  claim_output(a.output, a.force, true);
  PreprocessSpec spec;
  spec.resize = trained.config.data.resolution;
  spec.crop = trained.config.data.crop;
  spec.strict = true;
  torch::NoGradGuard no_grad;
  for (const auto& f : files) {
    auto img = decode_image(f, spec);
    write_image(fs::path(a.output) / f.filename(), g->forward(img.unsqueeze(0))[0]);
  }
  std::cout << "translated " << files.size() << " images into " << a.output << '\n';
  return kOk;
}

struct EvaluateArgs {
  std::string checkpoint, real, source, metric = "c2st", out, direction = "xy", attr_classifier, montage;
  std::vector<std::string> sets;
  bool force = false;
};

int cmd_evaluate(const EvaluateArgs& a) {
  auto trained = load_generators(a.checkpoint);
  auto cfg = trained.config;
  if (!a.sets.empty()) cfg = parse_config(canonical_text(cfg), a.sets);
  const bool want_c2st = a.metric == "c2st" || a.metric == "both";
  const bool want_attr = a.metric == "attr" || a.metric == "both";
  fs::path clf_path = a.attr_classifier.empty() ? cfg.eval.attribute_classifier : fs::path(a.attr_classifier);
  if (want_attr && (clf_path.empty() || !fs::exists(clf_path))) {
    throw ConfigError("attr metric needs a pretrained attribute classifier; run `percgan train-attr` first and pass "
                      "--attr-classifier or set eval.attribute_classifier");
  }
  claim_output(a.out, a.force, false);

  auto g = pick_generator(trained, a.direction);
  const auto res = cfg.data.resolution;
  auto source = load_images(a.source, res);
  auto translated = translate_all(g, source);
  std::vector<MetricRecord> records;
  if (want_c2st) {
    auto real = load_images(a.real, res);
    auto r = c2st(real, translated, cfg.eval.c2st);
    records.push_back(make_record("c2st_logloss", r, trained.config_hash));
    std::cout << "c2st log-loss " << r.log_loss << " accuracy " << r.accuracy << '\n';
  }
  if (want_attr) {
    auto clf = AttributeClassifier::load(clf_path);
    const std::int64_t target = a.direction == "xy" ? cfg.eval.target_class : 1 - cfg.eval.target_class;
    auto s = attribute_logloss(clf, translated, target);
    records.push_back(make_record("attribute_logloss", s, trained.config_hash));
    std::cout << "attribute log-loss " << s.mean_nll << " over " << s.count << " images\n";
  }
  export_metrics(records, a.out);
  if (!a.montage.empty()) {
    const auto n = std::min<std::int64_t>(8, source.size(0));
    write_montage(source.slice(0, 0, n), translated.slice(0, 0, n), a.montage);
  }
  return kOk;
}

struct SynthArgs {
  std::string task = "shapes", out;
  std::int64_t count = 2000, resolution = 32;
  std::uint64_t seed = 7;
  bool force = false;
};

int cmd_synth_toy(const SynthArgs& a) {
  auto [x, y] = synth_toy_domains(toy_task_from_string(a.task), a.count, a.resolution, a.seed);
  claim_output(a.out, a.force, true);
  write_domain_pair(a.out, x, y);
  std::cout << "wrote " << x.size() << " + " << y.size() << " images under " << a.out << '\n';
  return kOk;
}

struct TrunkArgs {
  std::string arch = "compact7", out;
  TrunkFitConfig fit;
  bool force = false;
};

int cmd_train_trunk(const TrunkArgs& a) {
  auto arch = arch_from_flag(a.arch);
  claim_output(a.out, a.force, false);
  auto result = fit_reference_trunk(arch, a.fit);
  save_reference_weights(result.net, a.out);
  std::cout << "trunk hold-out accuracy " << result.holdout_accuracy << ", wrote " << a.out << '\n';
  return kOk;
}

struct AttrArgs {
  std::string config, data, out;
  std::vector<std::string> sets;
  std::int64_t resolution = 32;
  ClassifierSpec spec;
  bool force = false;
};

int cmd_train_attr(const AttrArgs& a) {
  torch::Tensor x, y;
  if (!a.config.empty()) {
    const auto cfg = load_config(a.config, a.sets);
    auto [dx, dy] = load_datasets(cfg.data);
    x = dx.stacked();
    y = dy.stacked();
  } else if (!a.data.empty()) {
    x = load_images(fs::path(a.data) / "domainX", a.resolution);
    y = load_images(fs::path(a.data) / "domainY", a.resolution);
  } else {
    throw ConfigError("train-attr needs --config or --data");
  }
  claim_output(a.out, a.force, false);
  auto labels = torch::cat({torch::zeros({x.size(0)}, torch::kInt64), torch::ones({y.size(0)}, torch::kInt64)});
  auto clf = AttributeClassifier::train(torch::cat({x, y}), labels, 2, a.spec);
  clf.save(a.out);
  std::cout << "wrote attribute classifier (X=0, Y=1) to " << a.out << '\n';
  return kOk;
}

int cmd_export_arch(const std::string& trunk, const std::string& out) {
  arch_from_flag(trunk).save(out);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Perceptual-discriminator GAN training for unaligned image translation"};
  app.require_subcommand(1);

  PrepareArgs prep;
  auto* c_prep = app.add_subcommand("prepare-refnet", "Load trunk weights, optionally apply surgery, re-emit");
  c_prep->add_option("--weights", prep.weights, "Weights container")->required();
  c_prep->add_option("--arch", prep.arch, "Arch file, or built-in vgg19|compact7")->required();
  c_prep->add_option("--surgery", prep.surgery, "Replace max-pool/ReLU by avg-pool/leaky ReLU")
      ->check(CLI::IsMember({"on", "off"}));
  c_prep->add_option("--out", prep.out, "Output weights container")->required();
  c_prep->add_flag("--force", prep.force, "Overwrite existing output");

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "Pretrain generators, then adversarial training");
  c_train->add_option("--config", train.config, "INI config file")->required();
  c_train->add_option("--out", train.out, "Run directory")->required();
  c_train->add_option("--set", train.sets, "Override: section.key=value");
  c_train->add_option("--resume", train.resume, "Checkpoint file or checkpoints directory");
  c_train->add_flag("--override-config", train.override_config, "Resume even if the config hash changed");
  c_train->add_flag("--force", train.force, "Replace an existing run directory");
  c_train->add_flag("--quiet", train.quiet, "No progress on stderr");

  TranslateArgs tr;
  auto* c_tr = app.add_subcommand("translate", "Translate a folder of images");
  c_tr->add_option("--checkpoint", tr.checkpoint)->required();
  c_tr->add_option("--input", tr.input)->required();
  c_tr->add_option("--output", tr.output)->required();
  c_tr->add_option("--direction", tr.direction)->check(CLI::IsMember({"xy", "yx"}));
  c_tr->add_flag("--force", tr.force);

  EvaluateArgs ev;
  auto* c_ev = app.add_subcommand("evaluate", "Translate --source and score it against --real");
  c_ev->add_option("--checkpoint", ev.checkpoint)->required();
  c_ev->add_option("--real", ev.real, "Target-domain images");
  c_ev->add_option("--source", ev.source, "Source-domain images to translate")->required();
  c_ev->add_option("--metric", ev.metric)->check(CLI::IsMember({"c2st", "attr", "both"}));
  c_ev->add_option("--out", ev.out, "Metrics file (JSON lines)")->required();
  c_ev->add_option("--direction", ev.direction)->check(CLI::IsMember({"xy", "yx"}));
  c_ev->add_option("--attr-classifier", ev.attr_classifier);
  c_ev->add_option("--montage", ev.montage, "Also write an input/output grid image");
  c_ev->add_option("--set", ev.sets, "Override eval fields: section.key=value");
  c_ev->add_flag("--force", ev.force);

  SynthArgs syn;
  auto* c_syn = app.add_subcommand("synth-toy", "Write procedural toy domains as <out>/domainX, <out>/domainY");
  c_syn->add_option("--task", syn.task)->check(CLI::IsMember({"shapes", "tint"}));
  c_syn->add_option("--count", syn.count);
  c_syn->add_option("--resolution", syn.resolution);
  c_syn->add_option("--seed", syn.seed);
  c_syn->add_option("--out", syn.out)->required();
  c_syn->add_flag("--force", syn.force);

  TrunkArgs trunk;
  auto* c_trunk = app.add_subcommand("train-trunk", "Pretrain a small trunk on procedural shape classes");
  c_trunk->add_option("--arch", trunk.arch);
  c_trunk->add_option("--steps", trunk.fit.steps);
  c_trunk->add_option("--resolution", trunk.fit.resolution);
  c_trunk->add_option("--seed", trunk.fit.seed);
  c_trunk->add_option("--out", trunk.out)->required();
  c_trunk->add_flag("--force", trunk.force);

  AttrArgs attr;
  auto* c_attr = app.add_subcommand("train-attr", "Train the toy attribute (domain) classifier");
  c_attr->add_option("--config", attr.config, "Use the [data] section of this config");
  c_attr->add_option("--set", attr.sets);
  c_attr->add_option("--data", attr.data, "Or a folder with domainX/ and domainY/");
  c_attr->add_option("--resolution", attr.resolution);
  c_attr->add_option("--epochs", attr.spec.epochs);
  c_attr->add_option("--seed", attr.spec.seed);
  c_attr->add_option("--out", attr.out)->required();
  c_attr->add_flag("--force", attr.force);

  std::string arch_trunk, arch_out;
  auto* c_arch = app.add_subcommand("export-arch", "Write a built-in trunk descriptor as text");
  c_arch->add_option("--trunk", arch_trunk)->required()->check(CLI::IsMember({"vgg19", "compact7"}));
  c_arch->add_option("--out", arch_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigFailure;
  }

  try {
    select_device();
    torch::set_num_threads(1);
    if (*c_prep) return cmd_prepare_refnet(prep);
    if (*c_train) return cmd_train(train);
    if (*c_tr) return cmd_translate(tr);
    if (*c_ev) {
      if ((ev.metric == "c2st" || ev.metric == "both") && ev.real.empty()) {
        throw ConfigError("--real is required for the c2st metric");
      }
      return cmd_evaluate(ev);
    }
    if (*c_syn) return cmd_synth_toy(syn);
    if (*c_trunk) return cmd_train_trunk(trunk);
    if (*c_attr) return cmd_train_attr(attr);
    if (*c_arch) return cmd_export_arch(arch_trunk, arch_out);
  } catch (const NumericError& e) {
    std::cerr << "error (numeric divergence): " << e.what() << '\n';
    return kNumericFailure;
  } catch (const ConfigError& e) {
    std::cerr << "error (config): " << e.what() << '\n';
    return kConfigFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeFailure;
  }
  return kOk;
}
