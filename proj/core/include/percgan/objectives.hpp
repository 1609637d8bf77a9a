#pragma once

#include <map>
#include <string>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "percgan/percdisc.hpp"

namespace percgan {

enum class AdversarialKind { NonSaturating, LeastSquares };

std::string_view to_string(AdversarialKind kind);
AdversarialKind adversarial_kind_from_string(std::string_view name);

struct AdversarialFormulation {
  AdversarialKind kind = AdversarialKind::NonSaturating;
  // Least-squares targets: fake a, real b, generator c.
  double fake_target = 0.0;
  double real_target = 1.0;
  double generator_target = 1.0;
};

// Non-saturating objectives work on per-head log-probabilities: the main
// head's term plus, for every patch head, the mean over its locations.
// Least-squares objectives average the squared residuals of every head
// (over batch and locations) and then across heads.

/// Discriminator side of the minimax game. `fake` must come from a detached
/// generator output; NumericError on non-finite scores.
torch::Tensor adv_discriminator_loss(const DiscriminatorOutput& real, const DiscriminatorOutput& fake,
                                     const AdversarialFormulation& f);

/// Generator side: -log D(fake) or 1/2 (s_fake - c)^2.
torch::Tensor adv_generator_loss(const DiscriminatorOutput& fake, const AdversarialFormulation& f);

/// weight * mean |y - G(y)|; the minimization form of the identity term.
torch::Tensor identity_loss(const torch::Tensor& y, const torch::Tensor& g_y, double weight);

/// weight * mean |x - G_yx(G_xy(x))|.
torch::Tensor cycle_loss(const torch::Tensor& x, const torch::Tensor& x_cycled, double weight);

/// mean |x - G(x)|, unweighted.
torch::Tensor reconstruction_loss(const torch::Tensor& x, const torch::Tensor& g_x);

struct LossReport {
  std::map<std::string, double> terms;  // adv_D, adv_G, identity, cycle_fwd, cycle_bwd, recon
  double total_generator = 0.0;
  double total_discriminator = 0.0;
  double lambda_id = 0.0;
  double lambda_cyc = 0.0;

  double term(const std::string& name) const;
  nlohmann::ordered_json to_json(std::int64_t step) const;
};

}  // namespace percgan
