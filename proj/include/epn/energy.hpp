#ifndef EPN_ENERGY_HPP
#define EPN_ENERGY_HPP

#include <functional>
#include <utility>
#include <vector>

#include "epn/network.hpp"

namespace epn {

/// -logsumexp(logits): the unnormalized marginal log-density is -E.
double marginal_energy(const Vector& logits);

enum class EnergyMode {
  kScalar,    // network has a single output, E = -output
  kMarginal,  // E = -logsumexp over class logits
};

/// Energy adapter over a Network; differentiable w.r.t. inputs and parameters.
class EnergyFn {
 public:
  EnergyFn(const Network* net, EnergyMode mode) : net_(net), mode_(mode) {}

  const Network& net() const { return *net_; }
  EnergyMode mode() const { return mode_; }

  /// Per-row energy (N x 1) from logits already on the tape.
  Var energy_from_logits(Tape& tape, Var logits) const;

  /// Records forward + energy; returns (energy Nx1, binding).
  std::pair<Var, TapeBinding> energy(Tape& tape, const Matrix& x,
                                     bool input_needs_grad = false) const;

  /// Energies without gradient tracking.
  Vector energy_value(const Matrix& x) const;

  /// Per-row gradient of the energy w.r.t. the inputs (N x D).
  Matrix input_grad(const Matrix& x) const;

  /// Score psi = -grad_x E as a tape node differentiable w.r.t. parameters.
  /// Built as a structured backprop pass with detached activation masks
  /// (exact a.e. for piecewise-linear activations).
  std::pair<Var, TapeBinding> score_on_tape(Tape& tape, const Matrix& x) const;

 private:
  const Network* net_;
  EnergyMode mode_;
};

enum class BaseSampler { kUniformBox, kStandardNormal };

/// Persistent pool of SGLD chain states. Draws are uniform over the pool;
/// each draw is replaced by a fresh base sample with probability reinit_prob.
class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t capacity, int dim, double reinit_prob,
               BaseSampler base = BaseSampler::kUniformBox);

  /// Sets the uniform-box base sampler to the data bounding box expanded by
  /// `expand` on each side (fraction of the box extent).
  void fit_box(const Matrix& data, double expand = 0.1);

  Matrix draw(int n, Rng& rng);
  void push(const Matrix& states);

  std::size_t size() const { return pool_.size(); }
  std::size_t capacity() const { return capacity_; }
  double reinit_prob() const { return reinit_prob_; }
  Vector box_lo() const { return lo_; }
  Vector box_hi() const { return hi_; }

 private:
  RowVector base_sample(Rng& rng) const;

  std::size_t capacity_;
  int dim_;
  double reinit_prob_;
  BaseSampler base_;
  Vector lo_, hi_;
  std::vector<RowVector> pool_;
  std::size_t next_overwrite_ = 0;
};

struct SgldConfig {
  double step_size = 0.01;  // alpha in the Langevin update
  int steps = 20;
  double noise_scale = 1.0;  // 0 gives plain gradient descent (test hook)
  double grad_clip = 1e3;    // per-row L2 clip on the log-density gradient
};

/// K Langevin steps x <- x + (a^2/2) grad_x log p~ + a z. Model parameters
/// are never mutated. Throws on non-finite states, reporting the step index.
Matrix sgld_sample(const EnergyFn& e, Matrix x0, const SgldConfig& cfg, Rng& rng);

/// Same dynamics with a caller-supplied grad_x log p~ (per-row).
using LogDensityGrad = std::function<Matrix(const Matrix&)>;
Matrix sgld_sample(const LogDensityGrad& grad_log_p, Matrix x0,
                   const SgldConfig& cfg, Rng& rng);

/// Langevin sampling toward low predictive entropy of a classifier:
/// x <- x - (a/2) dH/dx + N(0, a).
Matrix entropy_sgld(const Network& classifier, Matrix x0, const SgldConfig& cfg,
                    Rng& rng);

/// Evaluates E(beta * x) along a ray; betas must be positive ascending.
std::vector<std::pair<double, double>> energy_along_ray(
    const EnergyFn& e, const RowVector& x, const std::vector<double>& betas);

}  // namespace epn

#endif  // EPN_ENERGY_HPP
