#ifndef EPN_EBM_LOSSES_HPP
#define EPN_EBM_LOSSES_HPP

#include <vector>

#include "epn/energy.hpp"

namespace epn {

/// A scalar loss node plus every forward pass that fed it. Losses that
/// evaluate the network more than once produce one binding per pass;
/// parameter gradients are the sum over bindings.
struct LossGraph {
  Var loss;
  std::vector<TapeBinding> binds;
};

/// Sums d loss / d parameter over all bindings of a loss graph.
std::vector<Matrix> loss_gradients(const Tape& tape, const Network& net,
                                   const LossGraph& g);

/// Contrastive-divergence surrogate: mean E(data + noise) - mean E(negatives).
/// Negatives come from persistent SGLD chains seeded from `buffer`; final
/// chain states are pushed back. Gaussian noise with variance data_noise_var
/// is added to the positive batch. Throws if any |E| exceeds 1e8.
LossGraph cd_loss(Tape& tape, const EnergyFn& e, const Matrix& data,
                  ReplayBuffer& buffer, const SgldConfig& cfg,
                  double data_noise_var, Rng& rng);

/// Deterministic core of cd_loss with the negatives supplied directly;
/// used when the sampler is to be held fixed.
LossGraph cd_loss_given_negatives(Tape& tape, const EnergyFn& e,
                                  const Matrix& data, const Matrix& negatives);

/// Sliced score matching, variance-reduced form: per sample,
/// v^T (grad_x psi) v + 0.5 ||psi||^2 with psi = -grad_x E and Rademacher v.
/// The Hessian-vector product is a central finite difference of psi along v
/// with step hvp_epsilon.
LossGraph ssm_loss(Tape& tape, const EnergyFn& e, const Matrix& data,
                   int n_projections, double hvp_epsilon, Rng& rng);

/// mean max(0, E(id) - m_in)^2 + mean max(0, m_out - E(ood))^2.
LossGraph energy_margin_loss(Tape& tape, const EnergyFn& e,
                             const Matrix& id_batch, const Matrix& ood_batch,
                             double m_in, double m_out);

/// Conditional noise-contrastive estimation with Gaussian noise N(x, sigma^2 I),
/// one noise draw per data point: mean softplus(-(E(y) - E(x))).
LossGraph cnce_loss(Tape& tape, const EnergyFn& e, const Matrix& data,
                    double sigma, Rng& rng);

/// -mean H(p(y|x)) over samples; minimizing it pushes predictions uniform.
LossGraph max_entropy_penalty(Tape& tape, const Network& classifier,
                              const Matrix& samples);

}  // namespace epn

#endif  // EPN_EBM_LOSSES_HPP
