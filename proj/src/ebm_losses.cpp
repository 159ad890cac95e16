#include "epn/ebm_losses.hpp"

#include <cmath>
#include <stdexcept>

namespace epn {

namespace {

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix z(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) z(i, j) = n(rng);
  }
  return z;
}

void check_energy_bounded(const Tape& tape, Var e, const char* what) {
  const Matrix& v = tape.value(e);
  if (!v.allFinite() || v.cwiseAbs().maxCoeff() > 1e8) {
    throw std::runtime_error(std::string("divergent energies in ") + what);
  }
}

/// Predictive-entropy node: H(softmax(logits)) per row, numerically stable.
Var predictive_entropy_rows(Tape& tape, Var logits) {
  Var p = tape.row_softmax(logits);
  return tape.sub(tape.row_logsumexp(logits),
                  tape.row_sum(tape.hadamard(p, logits)));
}

}  // namespace

std::vector<Matrix> loss_gradients(const Tape& tape, const Network& net,
                                   const LossGraph& g) {
  if (g.binds.empty()) throw std::invalid_argument("loss_gradients: no bindings");
  std::vector<Matrix> total = net.gradients(tape, g.binds[0]);
  for (std::size_t b = 1; b < g.binds.size(); ++b) {
    std::vector<Matrix> part = net.gradients(tape, g.binds[b]);
    for (std::size_t i = 0; i < total.size(); ++i) total[i] += part[i];
  }
  return total;
}

LossGraph cd_loss_given_negatives(Tape& tape, const EnergyFn& e,
                                  const Matrix& data, const Matrix& negatives) {
  if (data.rows() == 0) throw std::invalid_argument("cd_loss: empty data");
  auto [e_pos, bind_pos] = e.energy(tape, data);
  auto [e_neg, bind_neg] = e.energy(tape, negatives);
  check_energy_bounded(tape, e_pos, "cd_loss (data)");
  check_energy_bounded(tape, e_neg, "cd_loss (negatives)");
  Var loss = tape.sub(tape.mean(e_pos), tape.mean(e_neg));
  return {loss, {bind_pos, bind_neg}};
}

LossGraph cd_loss(Tape& tape, const EnergyFn& e, const Matrix& data,
                  ReplayBuffer& buffer, const SgldConfig& cfg,
                  double data_noise_var, Rng& rng) {
  if (data.rows() == 0) throw std::invalid_argument("cd_loss: empty data");
  Matrix noisy = data;
  if (data_noise_var > 0.0) {
    noisy += std::sqrt(data_noise_var) * gaussian(data.rows(), data.cols(), rng);
  }
  Matrix x0 = buffer.draw(static_cast<int>(data.rows()), rng);
  Matrix negatives = sgld_sample(e, std::move(x0), cfg, rng);
  buffer.push(negatives);
  return cd_loss_given_negatives(tape, e, noisy, negatives);
}

LossGraph ssm_loss(Tape& tape, const EnergyFn& e, const Matrix& data,
                   int n_projections, double hvp_epsilon, Rng& rng) {
  if (data.rows() == 0) throw std::invalid_argument("ssm_loss: empty data");
  if (n_projections < 1) throw std::invalid_argument("ssm_loss: n_projections must be >= 1");
  if (!(hvp_epsilon > 0.0)) throw std::invalid_argument("ssm_loss: hvp_epsilon must be > 0");

  LossGraph g;
  auto [psi, bind0] = e.score_on_tape(tape, data);
  if (!tape.value(psi).allFinite()) {
    throw std::runtime_error("ssm_loss: non-finite score");
  }
  g.binds.push_back(bind0);
  // Exact (variance-reduced) norm term.
  Var norm_term = tape.mean(tape.scale(tape.row_sum(tape.square(psi)), 0.5));

  std::bernoulli_distribution coin(0.5);
  Var hvp_sum;  // accumulated mean over projections
  for (int k = 0; k < n_projections; ++k) {
    Matrix v(data.rows(), data.cols());
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
      for (Eigen::Index j = 0; j < v.cols(); ++j) v(i, j) = coin(rng) ? 1.0 : -1.0;
    }
    auto [psi_p, bind_p] = e.score_on_tape(tape, data + hvp_epsilon * v);
    auto [psi_m, bind_m] = e.score_on_tape(tape, data - hvp_epsilon * v);
    g.binds.push_back(bind_p);
    g.binds.push_back(bind_m);
    Var diff = tape.scale(tape.sub(psi_p, psi_m), 1.0 / (2.0 * hvp_epsilon));
    Var proj = tape.mean(tape.row_sum(tape.mul_mask(diff, v)));
    hvp_sum = k == 0 ? proj : tape.add(hvp_sum, proj);
  }
  Var hvp_mean = tape.scale(hvp_sum, 1.0 / n_projections);
  g.loss = tape.add(hvp_mean, norm_term);
  return g;
}

LossGraph energy_margin_loss(Tape& tape, const EnergyFn& e,
                             const Matrix& id_batch, const Matrix& ood_batch,
                             double m_in, double m_out) {
  if (id_batch.rows() == 0 || ood_batch.rows() == 0) {
    throw std::invalid_argument("energy_margin_loss: empty batch");
  }
  auto [e_id, bind_id] = e.energy(tape, id_batch);
  auto [e_ood, bind_ood] = e.energy(tape, ood_batch);
  Var in_term = tape.mean(tape.square(tape.relu(tape.add_scalar(e_id, -m_in))));
  Var out_term = tape.mean(
      tape.square(tape.relu(tape.add_scalar(tape.scale(e_ood, -1.0), m_out))));
  return {tape.add(in_term, out_term), {bind_id, bind_ood}};
}

LossGraph cnce_loss(Tape& tape, const EnergyFn& e, const Matrix& data,
                    double sigma, Rng& rng) {
  if (!(sigma > 0.0)) throw std::invalid_argument("cnce_loss: sigma must be > 0");
  if (data.rows() == 0) throw std::invalid_argument("cnce_loss: empty data");
  Matrix noise = data + sigma * gaussian(data.rows(), data.cols(), rng);
  auto [e_x, bind_x] = e.energy(tape, data);
  auto [e_y, bind_y] = e.energy(tape, noise);
  Var loss = tape.mean(tape.softplus(tape.sub(e_x, e_y)));
  return {loss, {bind_x, bind_y}};
}

LossGraph max_entropy_penalty(Tape& tape, const Network& classifier,
                              const Matrix& samples) {
  if (samples.rows() == 0) throw std::invalid_argument("max_entropy_penalty: empty batch");
  TapeBinding bind = classifier.forward(tape, samples);
  Var h = predictive_entropy_rows(tape, bind.logits);
  return {tape.scale(tape.mean(h), -1.0), {bind}};
}

}  // namespace epn
