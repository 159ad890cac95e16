#include "epn/energy.hpp"

#include <cmath>
#include <stdexcept>

namespace epn {

double marginal_energy(const Vector& logits) { return -logsumexp(logits); }

Var EnergyFn::energy_from_logits(Tape& tape, Var logits) const {
  if (mode_ == EnergyMode::kMarginal) {
    return tape.scale(tape.row_logsumexp(logits), -1.0);
  }
  if (tape.value(logits).cols() != 1) {
    throw std::invalid_argument("scalar energy requires a single-output network");
  }
  return tape.scale(logits, -1.0);
}

std::pair<Var, TapeBinding> EnergyFn::energy(Tape& tape, const Matrix& x,
                                             bool input_needs_grad) const {
  TapeBinding bind = net_->forward(tape, x, /*training=*/false, nullptr,
                                   input_needs_grad);
  return {energy_from_logits(tape, bind.logits), bind};
}

Vector EnergyFn::energy_value(const Matrix& x) const {
  Tape tape;
  return tape.value(energy(tape, x).first).col(0);
}

Matrix EnergyFn::input_grad(const Matrix& x) const {
  Tape tape;
  auto [e, bind] = energy(tape, x, /*input_needs_grad=*/true);
  tape.backward(tape.sum(e));
  return tape.grad(bind.input);
}

std::pair<Var, TapeBinding> EnergyFn::score_on_tape(Tape& tape,
                                                    const Matrix& x) const {
  // psi = -grad_x E. Backprop through the layer stack is replayed as tape
  // operations so the result stays differentiable w.r.t. the weights.
  // Piecewise-linear activation masks enter as constants (their parameter
  // derivative is zero almost everywhere); the tanh derivative 1 - h^2
  // stays on the tape since it varies with the parameters.
  const auto& layers = net_->layers();
  TapeBinding bind;
  bind.input = tape.constant(x);
  Var h = bind.input;
  std::vector<Var> derivs;  // per layer, activation derivative (invalid if 1)
  std::vector<Var> eff_weights;
  const std::size_t last = layers.size() - 1;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const DenseLayer& layer = layers[l];
    Var w = tape.leaf(layer.weight);
    Var b = tape.leaf(layer.bias);
    bind.weights.push_back(w);
    bind.biases.push_back(b);
    Var w_eff = (l == last && net_->final_mode() == FinalLayerMode::kNegExp)
                    ? tape.neg_exp(w)
                    : w;
    eff_weights.push_back(w_eff);
    Var pre = tape.add_rowvec(tape.matmul(h, w_eff), b);
    switch (layer.act) {
      case Activation::kRelu:
        derivs.push_back(tape.constant(tape.value(pre).unaryExpr(
            [](double v) { return v > 0.0 ? 1.0 : 0.0; })));
        h = tape.relu(pre);
        break;
      case Activation::kLeakyRelu:
        derivs.push_back(tape.constant(tape.value(pre).unaryExpr(
            [](double v) { return v > 0.0 ? 1.0 : 0.01; })));
        h = tape.leaky_relu(pre, 0.01);
        break;
      case Activation::kTanh:
        h = tape.tanh(pre);
        derivs.push_back(tape.add_scalar(tape.scale(tape.square(h), -1.0), 1.0));
        break;
      case Activation::kNone:
        derivs.push_back(Var{});
        h = pre;
        break;
    }
  }
  bind.logits = h;
  // Seed of the backprop: d(-E)/d(logits).
  Var delta;
  if (mode_ == EnergyMode::kMarginal) {
    delta = tape.row_softmax(bind.logits);
  } else {
    const Matrix& lv = tape.value(bind.logits);
    delta = tape.constant(Matrix::Ones(lv.rows(), 1));
  }
  for (std::size_t l = layers.size(); l-- > 0;) {
    if (derivs[l].valid()) delta = tape.hadamard(delta, derivs[l]);
    delta = tape.matmul_transposed(delta, eff_weights[l]);
  }
  return {delta, bind};
}

ReplayBuffer::ReplayBuffer(std::size_t capacity, int dim, double reinit_prob,
                           BaseSampler base)
    : capacity_(capacity), dim_(dim), reinit_prob_(reinit_prob), base_(base) {
  if (capacity_ == 0) throw std::invalid_argument("ReplayBuffer: capacity must be > 0");
  if (reinit_prob_ < 0.0 || reinit_prob_ > 1.0) {
    throw std::invalid_argument("ReplayBuffer: reinit_prob must be in [0,1]");
  }
  lo_ = Vector::Constant(dim_, -1.0);
  hi_ = Vector::Constant(dim_, 1.0);
}

void ReplayBuffer::fit_box(const Matrix& data, double expand) {
  lo_ = data.colwise().minCoeff();
  hi_ = data.colwise().maxCoeff();
  const Vector pad = (hi_ - lo_) * expand;
  lo_ -= pad;
  hi_ += pad;
}

RowVector ReplayBuffer::base_sample(Rng& rng) const {
  RowVector s(dim_);
  if (base_ == BaseSampler::kUniformBox) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int j = 0; j < dim_; ++j) s[j] = lo_[j] + (hi_[j] - lo_[j]) * u(rng);
  } else {
    std::normal_distribution<double> n(0.0, 1.0);
    for (int j = 0; j < dim_; ++j) s[j] = n(rng);
  }
  return s;
}

Matrix ReplayBuffer::draw(int n, Rng& rng) {
  Matrix out(n, dim_);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < n; ++i) {
    if (pool_.empty() || u(rng) < reinit_prob_) {
      out.row(i) = base_sample(rng);
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, pool_.size() - 1);
      out.row(i) = pool_[pick(rng)];
    }
  }
  return out;
}

void ReplayBuffer::push(const Matrix& states) {
  for (Eigen::Index i = 0; i < states.rows(); ++i) {
    if (pool_.size() < capacity_) {
      pool_.emplace_back(states.row(i));
    } else {
      // Overwrite round-robin so the pool stays bounded and fresh.
      pool_[next_overwrite_ % capacity_] = states.row(i);
      ++next_overwrite_;
    }
  }
}

namespace {

void clip_rows(Matrix& g, double max_norm) {
  for (Eigen::Index i = 0; i < g.rows(); ++i) {
    const double n = g.row(i).norm();
    if (n > max_norm) g.row(i) *= max_norm / n;
  }
}

Matrix gaussian_like(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix z(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) z(i, j) = n(rng);
  }
  return z;
}

}  // namespace

Matrix sgld_sample(const EnergyFn& e, Matrix x0, const SgldConfig& cfg, Rng& rng) {
  return sgld_sample([&e](const Matrix& x) { return Matrix(-e.input_grad(x)); },
                     std::move(x0), cfg, rng);
}

Matrix sgld_sample(const LogDensityGrad& grad_log_p, Matrix x0,
                   const SgldConfig& cfg, Rng& rng) {
  if (!(cfg.step_size > 0.0)) throw std::invalid_argument("sgld: step_size must be > 0");
  require_finite(x0, "sgld initial state");
  const double a = cfg.step_size;
  Matrix x = std::move(x0);
  for (int k = 0; k < cfg.steps; ++k) {
    Matrix g = grad_log_p(x);
    clip_rows(g, cfg.grad_clip);
    x += (a * a / 2.0) * g;
    if (cfg.noise_scale != 0.0) {
      x += cfg.noise_scale * a * gaussian_like(x.rows(), x.cols(), rng);
    }
    if (!x.allFinite()) {
      throw std::runtime_error("sgld: non-finite state at step " + std::to_string(k));
    }
  }
  return x;
}

Matrix entropy_sgld(const Network& classifier, Matrix x0, const SgldConfig& cfg,
                    Rng& rng) {
  if (!(cfg.step_size > 0.0)) throw std::invalid_argument("entropy_sgld: step_size must be > 0");
  require_finite(x0, "entropy_sgld initial state");
  const double a = cfg.step_size;
  const double noise_std = std::sqrt(a);
  Matrix x = std::move(x0);
  for (int k = 0; k < cfg.steps; ++k) {
    Tape tape;
    TapeBinding bind = classifier.forward(tape, x, false, nullptr, true);
    // H(p) = logsumexp(f) - sum_c p_c f_c, numerically stable.
    Var p = tape.row_softmax(bind.logits);
    Var h = tape.sub(tape.row_logsumexp(bind.logits),
                     tape.row_sum(tape.hadamard(p, bind.logits)));
    tape.backward(tape.sum(h));
    Matrix g = tape.grad(bind.input);
    clip_rows(g, cfg.grad_clip);
    x -= (a / 2.0) * g;
    if (cfg.noise_scale != 0.0) {
      x += cfg.noise_scale * noise_std * gaussian_like(x.rows(), x.cols(), rng);
    }
    if (!x.allFinite()) {
      throw std::runtime_error("entropy_sgld: non-finite state at step " +
                               std::to_string(k));
    }
  }
  return x;
}

std::vector<std::pair<double, double>> energy_along_ray(
    const EnergyFn& e, const RowVector& x, const std::vector<double>& betas) {
  if (x.norm() == 0.0) throw std::invalid_argument("energy_along_ray: zero input");
  for (std::size_t i = 0; i < betas.size(); ++i) {
    if (!(betas[i] > 0.0) || (i > 0 && betas[i] <= betas[i - 1])) {
      throw std::invalid_argument("energy_along_ray: betas must be positive ascending");
    }
  }
  std::vector<std::pair<double, double>> out;
  out.reserve(betas.size());
  for (double b : betas) {
    Matrix row = b * x;
    out.emplace_back(b, e.energy_value(row)[0]);
  }
  return out;
}

}  // namespace epn
