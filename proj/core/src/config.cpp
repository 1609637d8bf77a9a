#include "percgan/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "percgan/errors.hpp"
#include "percgan/tensor_io.hpp"

namespace percgan {
namespace {

namespace pt = boost::property_tree;

struct Field {
  std::string section;
  std::string key;
  bool required;
  std::function<void(FrameworkConfig&, const std::string&, const std::filesystem::path&)> set;
  std::function<std::string(const FrameworkConfig&)> get;

  std::string name() const { return section + "." + key; }
};

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad(const std::string& field, const std::string& expected, const std::string& got) {
  throw ConfigError(field + ": expected " + expected + ", got '" + got + "'");
}

template <typename T>
T parse_int(const std::string& field, const std::string& v) {
  T out{};
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) bad(field, "an integer", v);
  return out;
}

double parse_double(const std::string& field, const std::string& v) {
  double out = 0.0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) bad(field, "a number", v);
  return out;
}

bool parse_bool(const std::string& field, const std::string& v) {
  if (v == "true" || v == "on" || v == "yes" || v == "1") return true;
  if (v == "false" || v == "off" || v == "no" || v == "0") return false;
  bad(field, "true|false", v);
}

template <typename T>
std::vector<T> parse_list(const std::string& field, const std::string& v) {
  std::vector<T> out;
  if (v.empty() || v == "none" || v == "default") return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_int<T>(field, trim(item)));
  return out;
}

std::string fmt(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

template <typename T>
std::string fmt_list(const std::vector<T>& v, const char* empty) {
  if (v.empty()) return empty;
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::filesystem::path resolve(const std::string& v, const std::filesystem::path& base) {
  if (v.empty()) return {};
  std::filesystem::path p(v);
  if (p.is_relative() && !base.empty()) p = base / p;
  return p.lexically_normal();
}

#define PG_INT(SEC, KEY, MEMBER, TYPE)                                                                           \
  Field {                                                                                                        \
    SEC, KEY, false,                                                                                             \
        [](FrameworkConfig& c, const std::string& v, const std::filesystem::path&) {                             \
          c.MEMBER = parse_int<TYPE>(SEC "." KEY, v);                                                            \
        },                                                                                                       \
        [](const FrameworkConfig& c) { return std::to_string(c.MEMBER); }                                        \
  }
#define PG_REAL(SEC, KEY, MEMBER, REQUIRED)                                                                      \
  Field {                                                                                                        \
    SEC, KEY, REQUIRED,                                                                                          \
        [](FrameworkConfig& c, const std::string& v, const std::filesystem::path&) {                             \
          c.MEMBER = parse_double(SEC "." KEY, v);                                                               \
        },                                                                                                       \
        [](const FrameworkConfig& c) { return fmt(c.MEMBER); }                                                   \
  }
#define PG_BOOL(SEC, KEY, MEMBER)                                                                                \
  Field {                                                                                                        \
    SEC, KEY, false,                                                                                             \
        [](FrameworkConfig& c, const std::string& v, const std::filesystem::path&) {                             \
          c.MEMBER = parse_bool(SEC "." KEY, v);                                                                 \
        },                                                                                                       \
        [](const FrameworkConfig& c) { return std::string(c.MEMBER ? "true" : "false"); }                        \
  }
#define PG_PATH(SEC, KEY, MEMBER)                                                                                \
  Field {                                                                                                        \
    SEC, KEY, false,                                                                                             \
        [](FrameworkConfig& c, const std::string& v, const std::filesystem::path& base) {                        \
          c.MEMBER = resolve(v, base);                                                                           \
        },                                                                                                       \
        [](const FrameworkConfig& c) { return c.MEMBER.string(); }                                               \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      Field{"data", "source", false,
            [](FrameworkConfig& c, const std::string& v, const std::filesystem::path&) {
              if (v != "toy" && v != "folder") bad("data.source", "toy|folder", v);
              c.data.source = v;
            },
            [](const FrameworkConfig& c) { return c.data.source; }},
      PG_PATH("data", "root", data.root),
      Field{"data", "toy_task", false,
            [](FrameworkConfig& c, const std::string& v, const std::filesystem::path&) {
              c.data.toy_task = toy_task_from_string(v);
            },
            [](const FrameworkConfig& c) { return std::string(to_string(c.data.toy_task)); }},
      PG_INT("data", "toy_count", data.toy_count, std::int64_t),
      PG_INT("data", "resolution", data.resolution, std::int64_t),
      PG_INT("data", "crop", data.crop, std::int64_t),
      PG_BOOL("data", "hflip", data.hflip),
      PG_BOOL("data", "strict", data.strict),
      PG_INT("data", "seed", data.seed, std::uint64_t),

      PG_INT("generator", "downsampling", generator.downsampling, std::int64_t),
      PG_INT("generator", "residual_blocks", generator.residual_blocks, std::int64_t),
      PG_INT("generator", "width", generator.width, std::int64_t),
      Field{"generator", "norm", false,
            [](FrameworkConfig& c, const std::string& v, const std::filesystem::path&) {
              c.generator.norm = norm_kind_from_string(v);
            },
            [](const FrameworkConfig& c) { return std::string(to_string(c.generator.norm)); }},

      Field{"discriminator", "mode", false,
            [](FrameworkConfig& c, const std::string& v, const std::filesystem::path&) {
              c.discriminator.mode = discriminator_mode_from_string(v);
            },
            [](const FrameworkConfig& c) { return std::string(to_string(c.discriminator.mode)); }},
      Field{"discriminator", "trunk", false,
            [](FrameworkConfig& c, const std::string& v, const std::filesystem::path&) { c.discriminator.trunk_id = v; },
            [](const FrameworkConfig& c) { return c.discriminator.trunk_id; }},
      PG_PATH("discriminator", "trunk_arch", discriminator.trunk_arch),
      PG_PATH("discriminator", "trunk_weights", discriminator.trunk_weights),
      PG_BOOL("discriminator", "surgery", discriminator.surgery),
      PG_INT("discriminator", "levels", discriminator.levels, std::size_t),
      Field{"discriminator", "combiner_widths", false,
            [](FrameworkConfig& c, const std::string& v, const std::filesystem::path&) {
              c.discriminator.combiner_widths = parse_list<std::int64_t>("discriminator.combiner_widths", v);
            },
            [](const FrameworkConfig& c) { return fmt_list(c.discriminator.combiner_widths, "default"); }},
      Field{"discriminator", "patch_levels", false,
            [](FrameworkConfig& c, const std::string& v, const std::filesystem::path&) {
              // Applied after "levels" (table order), so high_res can expand.
              c.discriminator.patch_levels = v == "high_res" ? high_resolution_patch_levels(c.discriminator.levels)
                                                             : parse_list<std::size_t>("discriminator.patch_levels", v);
            },
            [](const FrameworkConfig& c) { return fmt_list(c.discriminator.patch_levels, "none"); }},
      PG_INT("discriminator", "main_head_width", discriminator.main_head_width, std::int64_t),
      PG_INT("discriminator", "patch_head_width", discriminator.patch_head_width, std::int64_t),
      PG_REAL("discriminator", "epsilon", discriminator.epsilon, false),
      PG_INT("discriminator", "seed", discriminator.seed, std::uint64_t),

      Field{"losses", "formulation", false,
            [](FrameworkConfig& c, const std::string& v, const std::filesystem::path&) {
              c.train.formulation.kind = adversarial_kind_from_string(v);
            },
            [](const FrameworkConfig& c) { return std::string(to_string(c.train.formulation.kind)); }},
      PG_REAL("losses", "lambda_id", train.lambda_id, true),
      PG_REAL("losses", "lambda_cyc", train.lambda_cyc, false),
      PG_REAL("losses", "ls_fake_target", train.formulation.fake_target, false),
      PG_REAL("losses", "ls_real_target", train.formulation.real_target, false),
      PG_REAL("losses", "ls_generator_target", train.formulation.generator_target, false),

      Field{"train", "mode", false,
            [](FrameworkConfig& c, const std::string& v, const std::filesystem::path&) {
              c.train.mode = train_mode_from_string(v);
            },
            [](const FrameworkConfig& c) { return std::string(to_string(c.train.mode)); }},
      Field{"train", "optimizer", false,
            [](FrameworkConfig& c, const std::string& v, const std::filesystem::path&) {
              if (v != "adam") bad("train.optimizer", "adam", v);
              c.train.optimizer = v;
            },
            [](const FrameworkConfig& c) { return c.train.optimizer; }},
      PG_REAL("train", "lr", train.lr, false),
      PG_REAL("train", "beta1", train.beta1, false),
      PG_REAL("train", "beta2", train.beta2, false),
      PG_REAL("train", "pretrain_lr", train.pretrain_lr, false),
      PG_REAL("train", "pretrain_beta1", train.pretrain_beta1, false),
      PG_INT("train", "batch_size", train.batch_size, std::int64_t),
      PG_INT("train", "pretrain_batch_size", train.pretrain_batch_size, std::int64_t),
      PG_INT("train", "pretrain_steps", train.pretrain_steps, std::int64_t),
      PG_INT("train", "adversarial_steps", train.adversarial_steps, std::int64_t),
      PG_INT("train", "seed", train.seed, std::uint64_t),
      PG_INT("train", "log_every", train.log_every, std::int64_t),
      PG_INT("train", "checkpoint_every", train.checkpoint_every, std::int64_t),

      PG_INT("eval", "c2st_width", eval.c2st.classifier.width, std::int64_t),
      PG_INT("eval", "c2st_epochs", eval.c2st.classifier.epochs, std::int64_t),
      PG_INT("eval", "c2st_batch_size", eval.c2st.classifier.batch_size, std::int64_t),
      PG_REAL("eval", "c2st_lr", eval.c2st.classifier.lr, false),
      PG_INT("eval", "c2st_seed", eval.c2st.classifier.seed, std::uint64_t),
      PG_INT("eval", "c2st_min_per_side", eval.c2st.min_per_side, std::int64_t),
      PG_PATH("eval", "attribute_classifier", eval.attribute_classifier),
      PG_INT("eval", "target_class", eval.target_class, std::int64_t),
      PG_INT("eval", "sample_count", eval.sample_count, std::int64_t),
      PG_INT("eval", "seed", eval.seed, std::uint64_t),
  };
  return table;
}

void apply_override(pt::ptree& tree, const std::string& spec) {
  const auto eq = spec.find('=');
  const auto dot = spec.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
    throw ConfigError("override '" + spec + "' must look like section.key=value");
  }
  const auto section = trim(spec.substr(0, dot));
  const auto key = trim(spec.substr(dot + 1, eq - dot - 1));
  tree.put_child(pt::ptree::path_type(section + "/" + key, '/'), pt::ptree(trim(spec.substr(eq + 1))));
}

}  // namespace

std::string_view to_string(TrainMode mode) { return mode == TrainMode::Single ? "single" : "cycle"; }

TrainMode train_mode_from_string(std::string_view name) {
  if (name == "single") return TrainMode::Single;
  if (name == "cycle") return TrainMode::Cycle;
  throw ConfigError("train.mode: expected single|cycle, got '" + std::string(name) + "'");
}

FrameworkConfig parse_config(const std::string& text, const std::vector<std::string>& overrides,
                             const std::filesystem::path& base_dir) {
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config line " + std::to_string(e.line()) + ": " + e.message());
  }
  for (const auto& o : overrides) apply_override(tree, o);

  std::set<std::string> known;
  for (const auto& f : fields()) known.insert(f.name());
  for (const auto& [section, body] : tree) {
    if (!body.data().empty()) throw ConfigError(section + ": top-level keys are not allowed; use [section] headers");
    for (const auto& [key, value] : body) {
      if (!known.count(section + "." + key)) throw ConfigError(section + "." + key + ": unknown config field");
    }
  }

  FrameworkConfig cfg;
  for (const auto& f : fields()) {
    auto value = tree.get_optional<std::string>(pt::ptree::path_type(f.section + "/" + f.key, '/'));
    if (!value) {
      if (f.required) throw ConfigError(f.name() + ": required field is missing");
      continue;
    }
    f.set(cfg, trim(*value), base_dir);
  }
  cfg.generator.resolution = cfg.data.resolution;
  validate(cfg);
  return cfg;
}

FrameworkConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), overrides, std::filesystem::absolute(path).parent_path());
}

void validate(const FrameworkConfig& c) {
  auto require = [](bool ok, const std::string& field, const std::string& what) {
    if (!ok) throw ConfigError(field + ": " + what);
  };
  require(c.data.resolution >= 8, "data.resolution", "must be >= 8");
  require(c.data.crop >= 0, "data.crop", "must be >= 0");
  if (c.data.source == "toy") {
    require(c.data.toy_count >= 100, "data.toy_count", "must be >= 100");
    require(c.data.resolution == 16 || c.data.resolution == 32 || c.data.resolution == 64, "data.resolution",
            "toy domains support 16, 32 or 64");
  } else {
    require(!c.data.root.empty(), "data.root", "required for the folder source");
  }
  require(c.generator.downsampling >= 0, "generator.downsampling", "must be >= 0");
  require(c.generator.residual_blocks >= 0, "generator.residual_blocks", "must be >= 0");
  require(c.generator.width >= 1, "generator.width", "must be >= 1");
  const std::int64_t gdiv = std::int64_t{1} << c.generator.downsampling;
  require(c.data.resolution % gdiv == 0, "generator.downsampling",
          "data.resolution must be divisible by 2^downsampling");
  require(c.generator.downsampling == 0 || c.data.resolution / gdiv >= 4, "generator.downsampling",
          "bottleneck would be smaller than 4x4");

  require(c.discriminator.levels >= 1, "discriminator.levels", "must be >= 1");
  const std::int64_t ddiv = std::int64_t{1} << (c.discriminator.levels - 1);
  require(c.data.resolution % ddiv == 0, "discriminator.levels",
          "data.resolution must be divisible by 2^(levels-1)");
  for (auto level : c.discriminator.patch_levels) {
    require(level >= 1 && level <= c.discriminator.levels, "discriminator.patch_levels",
            "level " + std::to_string(level) + " outside [1, " + std::to_string(c.discriminator.levels) + "]");
  }
  require(c.discriminator.combiner_widths.empty() ||
              c.discriminator.combiner_widths.size() + 1 == c.discriminator.levels,
          "discriminator.combiner_widths", "needs levels-1 entries");
  require(c.discriminator.main_head_width >= 1, "discriminator.main_head_width", "must be >= 1");
  require(c.discriminator.patch_head_width >= 1, "discriminator.patch_head_width", "must be >= 1");
  require(c.discriminator.epsilon > 0.0 && c.discriminator.epsilon < 0.5, "discriminator.epsilon",
          "must lie in (0, 0.5)");

  require(c.train.lambda_id >= 0.0, "losses.lambda_id", "must be >= 0");
  require(c.train.lambda_cyc >= 0.0, "losses.lambda_cyc", "must be >= 0");
  require(c.train.lr > 0.0, "train.lr", "must be > 0");
  require(c.train.pretrain_lr > 0.0, "train.pretrain_lr", "must be > 0");
  require(c.train.beta1 >= 0.0 && c.train.beta1 < 1.0, "train.beta1", "must lie in [0, 1)");
  require(c.train.beta2 >= 0.0 && c.train.beta2 < 1.0, "train.beta2", "must lie in [0, 1)");
  require(c.train.pretrain_beta1 >= 0.0 && c.train.pretrain_beta1 < 1.0, "train.pretrain_beta1",
          "must lie in [0, 1)");
  require(c.train.batch_size >= 1, "train.batch_size", "must be >= 1");
  require(c.train.pretrain_batch_size >= 1, "train.pretrain_batch_size", "must be >= 1");
  require(c.train.pretrain_steps >= 0, "train.pretrain_steps", "must be >= 0");
  require(c.train.adversarial_steps >= 0, "train.adversarial_steps", "must be >= 0");
  require(c.train.log_every >= 1, "train.log_every", "must be >= 1");
  require(c.train.checkpoint_every >= 1, "train.checkpoint_every", "must be >= 1");

  require(c.eval.c2st.classifier.width >= 1, "eval.c2st_width", "must be >= 1");
  require(c.eval.c2st.classifier.epochs >= 1, "eval.c2st_epochs", "must be >= 1");
  require(c.eval.c2st.classifier.batch_size >= 1, "eval.c2st_batch_size", "must be >= 1");
  require(c.eval.c2st.min_per_side >= 2, "eval.c2st_min_per_side", "must be >= 2");
  require(c.eval.sample_count >= 1, "eval.sample_count", "must be >= 1");
  require(c.eval.target_class >= 0, "eval.target_class", "must be >= 0");
}

std::string canonical_text(const FrameworkConfig& cfg) {
  std::ostringstream os;
  std::string section;
  for (const auto& f : fields()) {
    if (f.section != section) {
      if (!section.empty()) os << '\n';
      section = f.section;
      os << '[' << section << "]\n";
    }
    os << f.key << " = " << f.get(cfg) << '\n';
  }
  return os.str();
}

std::string config_hash(const FrameworkConfig& cfg) { return sha256_hex(canonical_text(cfg)); }

}  // namespace percgan
