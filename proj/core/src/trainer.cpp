#include "percgan/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iostream>

#include <nlohmann/json.hpp>

#include "percgan/errors.hpp"
#include "percgan/tensor_io.hpp"

namespace percgan {
namespace {

constexpr double kRunningDecay = 0.98;
constexpr const char* kCheckpointFormat = "percgan-checkpoint-1";

using Named = std::vector<std::pair<std::string, torch::Tensor>>;

Named generator_parameters(const TrainState& s) {
  Named out;
  auto add = [&](const GeneratorNet& g, const std::string& prefix) {
    if (!g) return;
    for (const auto& p : g->named_parameters()) out.emplace_back(prefix + "." + p.key(), p.value());
  };
  add(s.g_xy, "g_xy");
  add(s.g_yx, "g_yx");
  return out;
}

Named discriminator_parameters(const TrainState& s) {
  Named out;
  auto add = [&](const PerceptualDiscriminator& d, const std::string& prefix) {
    if (!d) return;
    auto names = d->trainable_parameter_names();
    auto params = d->named_parameters();
    for (const auto& name : names) out.emplace_back(prefix + "." + name, params[name]);
  };
  add(s.d_y, "d_y");
  add(s.d_x, "d_x");
  return out;
}

std::vector<torch::Tensor> tensors_of(const Named& named) {
  std::vector<torch::Tensor> out;
  out.reserve(named.size());
  for (const auto& [_, t] : named) out.push_back(t);
  return out;
}

void make_optimizers(TrainState& s, const TrainingConfig& cfg) {
  auto opts = torch::optim::AdamOptions(cfg.lr).betas({cfg.beta1, cfg.beta2}).weight_decay(0.0);
  s.opt_g = std::make_shared<torch::optim::Adam>(tensors_of(generator_parameters(s)), opts);
  s.opt_d = std::make_shared<torch::optim::Adam>(tensors_of(discriminator_parameters(s)), opts);
}

void set_requires_grad(const std::vector<PerceptualDiscriminator>& ds, bool on) {
  for (const auto& d : ds) {
    for (auto& p : d->trainable_parameters()) p.requires_grad_(on);
  }
}

// The other party of the alternating update must not have received gradient.
void require_no_gradient(const Named& params, const char* phase) {
  for (const auto& [name, p] : params) {
    const auto& g = p.grad();
    if (g.defined() && g.abs().max().item<double>() != 0.0) {
      throw Error(std::string(phase) + " leaked gradient into " + name);
    }
  }
}

double finite_value(const torch::Tensor& t, const std::string& term, std::int64_t step) {
  const double v = t.item<double>();
  if (!std::isfinite(v)) throw NumericError("non-finite " + term + " loss at step " + std::to_string(step));
  return v;
}

void update_running(TrainState& s, const LossReport& r) {
  auto upd = [&](const std::string& k, double v) {
    auto it = s.running.find(k);
    if (it == s.running.end()) {
      s.running[k] = v;
    } else {
      it->second = kRunningDecay * it->second + (1.0 - kRunningDecay) * v;
    }
  };
  for (const auto& [k, v] : r.terms) upd(k, v);
  upd("total_G", r.total_generator);
  upd("total_D", r.total_discriminator);
}

torch::Tensor mean_abs(const torch::Tensor& a, const torch::Tensor& b) { return reconstruction_loss(a, b); }

std::string trunk_digest(const TrainState& s) {
  std::string all;
  for (const auto& [k, t] : s.d_y->trunk()->weights()) all += k + ":" + tensor_digest(t) + ";";
  return sha256_hex(all);
}

nlohmann::json cursor_json(const BatchIterator::State& c) {
  return {{"seed", c.seed}, {"epoch", c.epoch}, {"position", c.position}, {"draws", c.draws}};
}

BatchIterator::State cursor_from_json(const nlohmann::json& j) {
  BatchIterator::State c;
  c.seed = j.at("seed");
  c.epoch = j.at("epoch");
  c.position = j.at("position");
  c.draws = j.at("draws");
  return c;
}

void store_adam(const torch::optim::Adam& opt, const Named& params, const std::string& prefix, TensorFile& file) {
  const auto& state = opt.state();
  for (const auto& [name, p] : params) {
    auto it = state.find(p.unsafeGetTensorImpl());
    if (it == state.end()) continue;
    const auto& st = static_cast<const torch::optim::AdamParamState&>(*it->second);
    file.tensors[prefix + "." + name + ".exp_avg"] = st.exp_avg();
    file.tensors[prefix + "." + name + ".exp_avg_sq"] = st.exp_avg_sq();
    file.tensors[prefix + "." + name + ".step"] = torch::tensor({st.step()}, torch::kInt64);
  }
}

void restore_adam(torch::optim::Adam& opt, const Named& params, const std::string& prefix, const TensorFile& file) {
  for (const auto& [name, p] : params) {
    auto avg = file.tensors.find(prefix + "." + name + ".exp_avg");
    if (avg == file.tensors.end()) continue;  // parameter never stepped
    auto sq = file.tensors.find(prefix + "." + name + ".exp_avg_sq");
    auto step = file.tensors.find(prefix + "." + name + ".step");
    if (sq == file.tensors.end() || step == file.tensors.end()) {
      throw LoadError("incomplete optimizer state for " + name);
    }
    if (avg->second.sizes() != p.sizes()) throw ShapeError("optimizer state shape mismatch for " + name);
    auto st = std::make_unique<torch::optim::AdamParamState>();
    st->step(step->second.item<std::int64_t>());
    st->exp_avg(avg->second.clone());
    st->exp_avg_sq(sq->second.clone());
    opt.state()[p.unsafeGetTensorImpl()] = std::move(st);
  }
}

void copy_parameters(const Named& params, const TensorFile& file, const std::filesystem::path& path) {
  torch::NoGradGuard no_grad;
  for (const auto& [name, p] : params) {
    auto it = file.tensors.find(name);
    if (it == file.tensors.end()) throw LoadError(path.string() + ": missing key " + name);
    if (it->second.sizes() != p.sizes()) {
      std::ostringstream os;
      os << path.string() << ": shape mismatch for " << name << ": checkpoint " << it->second.sizes() << " vs model "
         << p.sizes();
      throw ShapeError(os.str());
    }
    p.copy_(it->second);
  }
}

std::string meta(const TensorFile& f, const std::string& key, const std::filesystem::path& path) {
  auto it = f.metadata.find(key);
  if (it == f.metadata.end()) throw LoadError(path.string() + ": checkpoint metadata lacks '" + key + "'");
  return it->second;
}

TensorFile read_checkpoint(const std::filesystem::path& path) {
  auto file = read_tensor_file(path);
  if (file.metadata["format"] != kCheckpointFormat) throw LoadError(path.string() + " is not a training checkpoint");
  return file;
}

}  // namespace

std::vector<GeneratorNet> TrainState::generators() const {
  std::vector<GeneratorNet> out{g_xy};
  if (g_yx) out.push_back(g_yx);
  return out;
}

std::vector<PerceptualDiscriminator> TrainState::discriminators() const {
  std::vector<PerceptualDiscriminator> out{d_y};
  if (d_x) out.push_back(d_x);
  return out;
}

TrainState init_train_state(const FrameworkConfig& cfg, const std::optional<ReferenceNet>& trunk) {
  TrainState s;
  s.mode = cfg.train.mode;
  s.config_text = canonical_text(cfg);
  s.config_hash = sha256_hex(s.config_text);
  torch::manual_seed(cfg.train.seed);
  s.g_xy = build_generator(cfg.generator);
  if (s.mode == TrainMode::Cycle) s.g_yx = build_generator(cfg.generator);

  const auto& dc = cfg.discriminator;
  ReferenceNet base{nullptr};
  if (trunk) {
    base = *trunk;
  } else if (dc.mode == DiscriminatorMode::Perceptual) {
    if (dc.trunk_weights.empty()) throw ConfigError("discriminator.trunk_weights is required in perceptual mode");
    base = load_reference_weights(dc.trunk_weights, dc.resolve_arch());
  } else {
    base = random_reference_net(dc.resolve_arch(), dc.seed);
  }
  s.d_y = build_perceptual_discriminator(dc, base);
  if (s.mode == TrainMode::Cycle) {
    auto dx_cfg = dc;
    dx_cfg.seed = dc.seed + 1;
    s.d_x = build_perceptual_discriminator(dx_cfg, base);
  }
  make_optimizers(s, cfg.train);
  return s;
}

PretrainReport pretrain_generator(GeneratorNet& g, const DomainDataset& x, const DomainDataset& y,
                                  const TrainingConfig& cfg, std::uint64_t seed) {
  if (cfg.pretrain_steps <= 0) throw ConfigError("train.pretrain_steps must be > 0 for generator pretraining");
  torch::optim::Adam opt(g->parameters(),
                         torch::optim::AdamOptions(cfg.pretrain_lr).betas({cfg.pretrain_beta1, cfg.beta2}));
  BatchIterator it_x(x, seed * 2 + 1);
  BatchIterator it_y(y, seed * 2 + 2);
  PretrainReport report;
  const std::int64_t b = cfg.pretrain_batch_size;
  for (std::int64_t step = 0; step < cfg.pretrain_steps; ++step) {
    // Union of both domains: half of every batch from each (odd sizes alternate).
    const std::int64_t nx = (b + (step & 1)) / 2;
    const std::int64_t ny = b - nx;
    std::vector<torch::Tensor> parts;
    if (nx > 0) parts.push_back(it_x.next(nx));
    if (ny > 0) parts.push_back(it_y.next(ny));
    auto batch = torch::cat(parts);
    auto loss = reconstruction_loss(batch, g->forward(batch));
    const double v = loss.item<double>();
    if (!std::isfinite(v)) {
      throw NumericError("non-finite reconstruction loss at pretraining step " + std::to_string(step));
    }
    opt.zero_grad();
    loss.backward();
    opt.step();
    report.running_loss = step == 0 ? v : kRunningDecay * report.running_loss + (1.0 - kRunningDecay) * v;
    report.final_loss = v;
    report.losses.push_back(v);
  }
  report.steps = cfg.pretrain_steps;
  return report;
}

std::vector<PretrainReport> pretrain_generators(TrainState& state, const DomainDataset& x, const DomainDataset& y,
                                                const TrainingConfig& cfg) {
  std::vector<PretrainReport> out;
  std::uint64_t k = 0;
  for (auto& g : state.generators()) out.push_back(pretrain_generator(g, x, y, cfg, cfg.seed * 16 + 5 + k++));
  state.pretrain_steps = cfg.pretrain_steps;
  return out;
}

LossReport train_step_single(TrainState& s, const torch::Tensor& bx, const torch::Tensor& by,
                             const TrainingConfig& cfg) {
  if (!s.g_xy || !s.d_y) throw Error("train_step_single: state has no generator/discriminator");
  const auto gen_params = generator_parameters(s);
  const auto disc_params = discriminator_parameters(s);
  const std::int64_t step = s.step;

  auto fake_y = s.g_xy->forward(bx);

  s.opt_g->zero_grad();
  s.opt_d->zero_grad();
  auto loss_d = adv_discriminator_loss(s.d_y->forward(by), s.d_y->forward(fake_y.detach()), cfg.formulation);
  const double adv_d = finite_value(loss_d, "adv_D", step);
  loss_d.backward();
  require_no_gradient(gen_params, "discriminator update");
  s.opt_d->step();

  set_requires_grad(s.discriminators(), false);
  s.opt_d->zero_grad();
  auto adv_g_t = adv_generator_loss(s.d_y->forward(fake_y), cfg.formulation);
  auto id_t = mean_abs(by, s.g_xy->forward(by));
  const double adv_g = finite_value(adv_g_t, "adv_G", step);
  const double id = finite_value(id_t, "identity", step);
  auto total = adv_g_t + cfg.lambda_id * id_t;
  total.backward();
  set_requires_grad(s.discriminators(), true);
  require_no_gradient(disc_params, "generator update");
  s.opt_g->step();

  LossReport r;
  r.lambda_id = cfg.lambda_id;
  r.lambda_cyc = cfg.lambda_cyc;
  r.terms = {{"adv_D", adv_d}, {"adv_G", adv_g}, {"identity", id}, {"cycle_fwd", 0.0}, {"cycle_bwd", 0.0}};
  r.total_generator = adv_g + cfg.lambda_id * id;
  r.total_discriminator = adv_d;
  ++s.step;
  update_running(s, r);
  return r;
}

LossReport train_step_cycle(TrainState& s, const torch::Tensor& bx, const torch::Tensor& by,
                            const TrainingConfig& cfg) {
  if (!s.g_xy || !s.g_yx || !s.d_x || !s.d_y) throw Error("train_step_cycle: state lacks cycle-mode models");
  const auto gen_params = generator_parameters(s);
  const auto disc_params = discriminator_parameters(s);
  const std::int64_t step = s.step;

  auto fake_y = s.g_xy->forward(bx);
  auto fake_x = s.g_yx->forward(by);

  s.opt_g->zero_grad();
  s.opt_d->zero_grad();
  auto loss_dy = adv_discriminator_loss(s.d_y->forward(by), s.d_y->forward(fake_y.detach()), cfg.formulation);
  auto loss_dx = adv_discriminator_loss(s.d_x->forward(bx), s.d_x->forward(fake_x.detach()), cfg.formulation);
  auto loss_d = loss_dy + loss_dx;
  const double adv_d = finite_value(loss_d, "adv_D", step);
  loss_d.backward();
  require_no_gradient(gen_params, "discriminator update");
  s.opt_d->step();

  set_requires_grad(s.discriminators(), false);
  s.opt_d->zero_grad();
  auto adv_g_t = adv_generator_loss(s.d_y->forward(fake_y), cfg.formulation) +
                 adv_generator_loss(s.d_x->forward(fake_x), cfg.formulation);
  auto cyc_f_t = mean_abs(bx, s.g_yx->forward(fake_y));
  auto cyc_b_t = mean_abs(by, s.g_xy->forward(fake_x));
  // Identity term: each generator on its own target domain.
  auto id_t = mean_abs(by, s.g_xy->forward(by)) + mean_abs(bx, s.g_yx->forward(bx));
  const double adv_g = finite_value(adv_g_t, "adv_G", step);
  const double cyc_f = finite_value(cyc_f_t, "cycle_fwd", step);
  const double cyc_b = finite_value(cyc_b_t, "cycle_bwd", step);
  const double id = finite_value(id_t, "identity", step);
  auto total = adv_g_t + cfg.lambda_cyc * (cyc_f_t + cyc_b_t) + cfg.lambda_id * id_t;
  total.backward();
  set_requires_grad(s.discriminators(), true);
  require_no_gradient(disc_params, "generator update");
  s.opt_g->step();

  LossReport r;
  r.lambda_id = cfg.lambda_id;
  r.lambda_cyc = cfg.lambda_cyc;
  r.terms = {{"adv_D", adv_d}, {"adv_G", adv_g}, {"identity", id}, {"cycle_fwd", cyc_f}, {"cycle_bwd", cyc_b}};
  r.total_generator = adv_g + cfg.lambda_cyc * (cyc_f + cyc_b) + cfg.lambda_id * id;
  r.total_discriminator = adv_d;
  ++s.step;
  update_running(s, r);
  return r;
}

LossReport train_step(TrainState& state, const torch::Tensor& bx, const torch::Tensor& by,
                      const TrainingConfig& cfg) {
  return state.mode == TrainMode::Single ? train_step_single(state, bx, by, cfg)
                                         : train_step_cycle(state, bx, by, cfg);
}

void save_checkpoint(const TrainState& s, const std::filesystem::path& path) {
  TensorFile file;
  const auto gen = generator_parameters(s);
  const auto disc = discriminator_parameters(s);
  for (const auto& [name, t] : gen) file.tensors[name] = t.detach();
  for (const auto& [name, t] : disc) file.tensors[name] = t.detach();
  store_adam(*s.opt_g, gen, "opt_g", file);
  store_adam(*s.opt_d, disc, "opt_d", file);
  nlohmann::json running(s.running);
  file.metadata = {{"format", kCheckpointFormat},
                   {"version", kLibraryVersion},
                   {"mode", std::string(to_string(s.mode))},
                   {"step", std::to_string(s.step)},
                   {"pretrain_steps", std::to_string(s.pretrain_steps)},
                   {"config", s.config_text},
                   {"config_hash", s.config_hash},
                   {"trunk_digest", trunk_digest(s)},
                   {"cursor_x", cursor_json(s.cursor_x).dump()},
                   {"cursor_y", cursor_json(s.cursor_y).dump()},
                   {"running", running.dump()}};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Write-then-rename so an interrupted save never leaves a torn container.
  auto tmp = path;
  tmp += ".tmp";
  write_tensor_file(tmp, file);
  std::filesystem::rename(tmp, path);
}

TrainState load_checkpoint(const std::filesystem::path& path, const FrameworkConfig& cfg, bool override_config,
                           const std::optional<ReferenceNet>& trunk) {
  auto file = read_checkpoint(path);
  const auto stored_hash = meta(file, "config_hash", path);
  const auto wanted_hash = config_hash(cfg);
  if (stored_hash != wanted_hash && !override_config) {
    throw ConfigError("checkpoint " + path.string() + " was written with config " + stored_hash.substr(0, 12) +
                      ", current config is " + wanted_hash.substr(0, 12) + " (use the override flag to load anyway)");
  }
  if (meta(file, "mode", path) != to_string(cfg.train.mode)) {
    throw ConfigError("train.mode: checkpoint holds a " + meta(file, "mode", path) + "-mode run");
  }
  auto s = init_train_state(cfg, trunk);
  if (meta(file, "trunk_digest", path) != trunk_digest(s) && !override_config) {
    throw LoadError("reference trunk weights differ from the ones used to write " + path.string());
  }
  const auto gen = generator_parameters(s);
  const auto disc = discriminator_parameters(s);
  copy_parameters(gen, file, path);
  copy_parameters(disc, file, path);
  restore_adam(*s.opt_g, gen, "opt_g", file);
  restore_adam(*s.opt_d, disc, "opt_d", file);
  try {
    s.step = std::stoll(meta(file, "step", path));
    s.pretrain_steps = std::stoll(meta(file, "pretrain_steps", path));
    s.cursor_x = cursor_from_json(nlohmann::json::parse(meta(file, "cursor_x", path)));
    s.cursor_y = cursor_from_json(nlohmann::json::parse(meta(file, "cursor_y", path)));
    s.running = nlohmann::json::parse(meta(file, "running", path)).get<std::map<std::string, double>>();
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw LoadError(path.string() + ": malformed checkpoint metadata (" + e.what() + ")");
  }
  return s;
}

FrameworkConfig checkpoint_config(const std::filesystem::path& path) {
  auto file = read_checkpoint(path);
  return parse_config(meta(file, "config", path));
}

TrainedGenerators load_generators(const std::filesystem::path& path) {
  auto file = read_checkpoint(path);
  TrainedGenerators out;
  out.config = parse_config(meta(file, "config", path));
  out.config_hash = meta(file, "config_hash", path);
  out.step = std::stoll(meta(file, "step", path));
  TrainState shell;
  shell.g_xy = build_generator(out.config.generator);
  if (meta(file, "mode", path) == "cycle") shell.g_yx = build_generator(out.config.generator);
  copy_parameters(generator_parameters(shell), file, path);
  out.g_xy = shell.g_xy;
  out.g_yx = shell.g_yx;
  for (auto& g : shell.generators()) g->eval();
  return out;
}

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::int64_t step) {
  char name[48];
  std::snprintf(name, sizeof(name), "step_%07lld.safetensors", static_cast<long long>(step));
  return dir / name;
}

std::filesystem::path latest_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "latest");
  std::string name;
  if (!in || !std::getline(in, name) || name.empty()) throw IoError("no 'latest' pointer in " + dir.string());
  return dir / name;
}

std::pair<DomainDataset, DomainDataset> load_datasets(const DataConfig& cfg) {
  if (cfg.source == "toy") return synth_toy_domains(cfg.toy_task, cfg.toy_count, cfg.resolution, cfg.seed);
  return {load_domain(cfg.root / "domainX", Domain::X, cfg.preprocess()),
          load_domain(cfg.root / "domainY", Domain::Y, cfg.preprocess())};
}

torch::Tensor translate_all(GeneratorNet& g, const torch::Tensor& images, std::int64_t chunk) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> parts;
  for (std::int64_t i = 0; i < images.size(0); i += chunk) {
    parts.push_back(g->forward(images.slice(0, i, std::min(i + chunk, images.size(0)))));
  }
  return torch::cat(parts);
}

TrainState run_training(const FrameworkConfig& cfg, const DomainDataset& x, const DomainDataset& y,
                        const RunOptions& opts) {
  const auto ckpt_dir = opts.out_dir / "checkpoints";
  std::filesystem::create_directories(ckpt_dir);
  TrainState s = opts.resume ? load_checkpoint(*opts.resume, cfg, opts.override_config, opts.trunk)
                             : init_train_state(cfg, opts.trunk);
  if (opts.resume && opts.override_config) {
    s.config_text = canonical_text(cfg);
    s.config_hash = config_hash(cfg);
  }
  std::ofstream log(opts.out_dir / "train_log.jsonl", std::ios::app);
  if (!log) throw IoError("cannot open training log in " + opts.out_dir.string());
  std::optional<std::filesystem::path> last_checkpoint = opts.resume;

  auto checkpoint = [&] {
    const auto path = checkpoint_path(ckpt_dir, s.step);
    save_checkpoint(s, path);
    std::ofstream(ckpt_dir / "latest", std::ios::trunc) << path.filename().string() << '\n';
    last_checkpoint = path;
  };
  auto fail = [&](const NumericError& e) -> NumericError {
    return NumericError(std::string(e.what()) + "; last checkpoint: " +
                        (last_checkpoint ? last_checkpoint->string() : std::string("none")));
  };

  if (cfg.train.pretrain_steps > 0 && s.pretrain_steps < cfg.train.pretrain_steps) {
    std::vector<PretrainReport> reports;
    try {
      reports = pretrain_generators(s, x, y, cfg.train);
    } catch (const NumericError& e) {
      throw fail(e);
    }
    const char* names[] = {"g_xy", "g_yx"};
    for (std::size_t k = 0; k < reports.size(); ++k) {
      for (std::size_t i = 0; i < reports[k].losses.size(); ++i) {
        const auto step = static_cast<std::int64_t>(i) + 1;
        if (step % cfg.train.log_every != 0 && step != reports[k].steps) continue;
        nlohmann::ordered_json j{{"phase", "pretrain"}, {"generator", names[k]}, {"step", step},
                                 {"recon", reports[k].losses[i]}};
        log << j.dump() << '\n';
      }
      if (!opts.quiet) {
        std::cerr << "pretrained " << names[k] << ": recon " << reports[k].final_loss << " (running "
                  << reports[k].running_loss << ")\n";
      }
    }
    log.flush();
    checkpoint();
  }

  BatchIterator it_x(x, cfg.train.seed * 2 + 101);
  BatchIterator it_y(y, cfg.train.seed * 2 + 102);
  if (s.step > 0) {
    it_x.restore(s.cursor_x);
    it_y.restore(s.cursor_y);
  }
  bool saved_last = false;
  while (s.step < cfg.train.adversarial_steps) {
    auto bx = it_x.next(cfg.train.batch_size);
    auto by = it_y.next(cfg.train.batch_size);
    LossReport r;
    try {
      r = train_step(s, bx, by, cfg.train);
    } catch (const NumericError& e) {
      throw fail(e);
    }
    s.cursor_x = it_x.state();
    s.cursor_y = it_y.state();
    saved_last = false;
    if (s.step % cfg.train.log_every == 0 || s.step == 1) {
      auto j = r.to_json(s.step);
      j["phase"] = "adversarial";
      nlohmann::ordered_json run;
      for (const auto& [k, v] : s.running) run[k] = v;
      j["running"] = run;
      log << j.dump() << '\n';
      log.flush();
      if (!opts.quiet) std::cerr << j.dump() << '\n';
    }
    if (s.step % cfg.train.checkpoint_every == 0) {
      checkpoint();
      saved_last = true;
    }
  }
  if (!saved_last && (!last_checkpoint || s.step > 0)) checkpoint();
  return s;
}

}  // namespace percgan
