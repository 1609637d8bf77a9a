#include "percgan/objectives.hpp"

#include <cmath>

#include "percgan/errors.hpp"

namespace percgan {
namespace {

void require_finite(const DiscriminatorOutput& out, const char* which) {
  bool finite = torch::isfinite(out.main_score).all().item<bool>();
  for (const auto& p : out.patches) finite = finite && torch::isfinite(p.score).all().item<bool>();
  if (!finite) throw NumericError(std::string("non-finite discriminator scores on the ") + which + " batch");
}

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) {
    std::ostringstream os;
    os << what << ": shape mismatch " << a.sizes() << " vs " << b.sizes();
    throw ShapeError(os.str());
  }
}

// log sigma(s) clamped to the [eps, 1 - eps] probability band.
torch::Tensor log_prob(const torch::Tensor& score, double eps) {
  return torch::log_sigmoid(score).clamp(std::log(eps), std::log1p(-eps));
}

// Per-sample sum over heads of the (location-averaged) log-probability of
// "real" (real_side = true) or "fake".
torch::Tensor head_log_likelihood(const DiscriminatorOutput& out, bool real_side) {
  const double eps = out.epsilon;
  auto term = [&](const torch::Tensor& s) { return log_prob(real_side ? s : -s, eps); };
  auto total = term(out.main_score);
  for (const auto& p : out.patches) total = total + term(p.score).flatten(1).mean(1);
  return total;
}

torch::Tensor mean_squared_to(const DiscriminatorOutput& out, double target) {
  auto total = (out.main_score - target).pow(2).mean();
  for (const auto& p : out.patches) total = total + (p.score - target).pow(2).mean();
  return total / static_cast<double>(1 + out.patches.size());
}

}  // namespace

std::string_view to_string(AdversarialKind kind) {
  return kind == AdversarialKind::NonSaturating ? "nonsaturating" : "lsgan";
}

AdversarialKind adversarial_kind_from_string(std::string_view name) {
  if (name == "nonsaturating" || name == "ns") return AdversarialKind::NonSaturating;
  if (name == "lsgan" || name == "least_squares") return AdversarialKind::LeastSquares;
  throw ConfigError("losses.formulation: expected nonsaturating|lsgan, got '" + std::string(name) + "'");
}

torch::Tensor adv_discriminator_loss(const DiscriminatorOutput& real, const DiscriminatorOutput& fake,
                                     const AdversarialFormulation& f) {
  if (fake.input_requires_grad) {
    throw Error("adv_discriminator_loss: fake batch must be detached from the generator graph");
  }
  require_finite(real, "real");
  require_finite(fake, "fake");
  if (f.kind == AdversarialKind::NonSaturating) {
    return -(head_log_likelihood(real, true) + head_log_likelihood(fake, false)).mean();
  }
  return 0.5 * (mean_squared_to(real, f.real_target) + mean_squared_to(fake, f.fake_target));
}

torch::Tensor adv_generator_loss(const DiscriminatorOutput& fake, const AdversarialFormulation& f) {
  require_finite(fake, "fake");
  if (f.kind == AdversarialKind::NonSaturating) return -head_log_likelihood(fake, true).mean();
  return 0.5 * mean_squared_to(fake, f.generator_target);
}

torch::Tensor identity_loss(const torch::Tensor& y, const torch::Tensor& g_y, double weight) {
  require_same_shape(y, g_y, "identity_loss");
  return weight * (y - g_y).abs().mean();
}

torch::Tensor cycle_loss(const torch::Tensor& x, const torch::Tensor& x_cycled, double weight) {
  require_same_shape(x, x_cycled, "cycle_loss");
  return weight * (x - x_cycled).abs().mean();
}

torch::Tensor reconstruction_loss(const torch::Tensor& x, const torch::Tensor& g_x) {
  require_same_shape(x, g_x, "reconstruction_loss");
  return (x - g_x).abs().mean();
}

double LossReport::term(const std::string& name) const {
  auto it = terms.find(name);
  return it == terms.end() ? 0.0 : it->second;
}

nlohmann::ordered_json LossReport::to_json(std::int64_t step) const {
  nlohmann::ordered_json j;
  j["step"] = step;
  for (const auto& [k, v] : terms) j[k] = v;
  j["total_G"] = total_generator;
  j["total_D"] = total_discriminator;
  j["lambda_id"] = lambda_id;
  j["lambda_cyc"] = lambda_cyc;
  return j;
}

}  // namespace percgan
