#include "epn/dirichlet.hpp"

#include <cmath>
#include <stdexcept>

namespace epn {

namespace {

double log_beta(const Eigen::VectorXd& a) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) s += log_gamma(a[i]);
  return s - log_gamma(a.sum());
}

}  // namespace

DirichletParams::DirichletParams(Eigen::VectorXd alpha) : alpha_(std::move(alpha)) {
  if (alpha_.size() < 2) {
    throw std::invalid_argument("DirichletParams: need at least 2 components");
  }
  if (!(alpha_.array() > 0.0).all()) {
    throw std::invalid_argument("DirichletParams: all concentrations must be > 0");
  }
}

double kl_dirichlet(const DirichletParams& p, const DirichletParams& q) {
  if (p.size() != q.size()) {
    throw std::invalid_argument("kl_dirichlet: length mismatch");
  }
  const Eigen::VectorXd& a = p.alpha();
  const Eigen::VectorXd& b = q.alpha();
  const double a0 = a.sum();
  double kl = log_gamma(a0) - log_gamma(b.sum());
  const double psi_a0 = digamma(a0);
  for (Eigen::Index c = 0; c < a.size(); ++c) {
    kl += log_gamma(b[c]) - log_gamma(a[c]) +
          (a[c] - b[c]) * (digamma(a[c]) - psi_a0);
  }
  return kl;
}

double differential_entropy(const DirichletParams& d) {
  const Eigen::VectorXd& a = d.alpha();
  const double a0 = a.sum();
  const double c = static_cast<double>(a.size());
  double h = log_beta(a) + (a0 - c) * digamma(a0);
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    h -= (a[i] - 1.0) * digamma(a[i]);
  }
  return h;
}

Eigen::VectorXd predictive_mean(const DirichletParams& d) {
  return d.alpha() / d.precision();
}

double expected_entropy(const DirichletParams& d) {
  const Eigen::VectorXd& a = d.alpha();
  const double a0 = a.sum();
  const double psi_a0p1 = digamma(a0 + 1.0);
  double h = 0.0;
  for (Eigen::Index c = 0; c < a.size(); ++c) {
    h += (a[c] / a0) * (psi_a0p1 - digamma(a[c] + 1.0));
  }
  return h;
}

double categorical_entropy(const Eigen::VectorXd& probs) {
  double h = 0.0;
  for (Eigen::Index c = 0; c < probs.size(); ++c) {
    if (probs[c] > 0.0) h -= probs[c] * std::log(probs[c]);
  }
  return h;
}

double mutual_information(const DirichletParams& d) {
  const double mi = categorical_entropy(predictive_mean(d)) - expected_entropy(d);
  return mi < 0.0 ? 0.0 : mi;
}

DirichletParams bayesian_update(const DirichletParams& prior,
                                const Eigen::VectorXd& pseudo_counts) {
  if (prior.size() != pseudo_counts.size()) {
    throw std::invalid_argument("bayesian_update: length mismatch");
  }
  if ((pseudo_counts.array() < 0.0).any()) {
    throw std::invalid_argument("bayesian_update: pseudo-counts must be >= 0");
  }
  return DirichletParams(prior.alpha() + pseudo_counts);
}

EpnTarget epn_target(const Eigen::VectorXd& logits, int y) {
  if (y < 0 || y >= logits.size()) {
    throw std::out_of_range("epn_target: class index out of range");
  }
  if (!logits.allFinite()) {
    throw std::invalid_argument("epn_target: logits must be finite");
  }
  const double density = logits.array().exp().sum();
  Eigen::VectorXd beta = Eigen::VectorXd::Ones(logits.size());
  beta[y] = static_cast<double>(logits.size()) + density;
  return EpnTarget{std::move(beta), y};
}

double epn_kl_expanded(const Eigen::VectorXd& logits, int y) {
  // KL(Dir(beta) || Dir(alpha)) with alpha = 1 + exp(logits) and the
  // one-hot-dominant target above, written out in terms of logits.
  const EpnTarget tgt = epn_target(logits, y);
  const Eigen::VectorXd alpha = 1.0 + logits.array().exp();
  const double a0 = alpha.sum();
  const double by = tgt.beta[y];
  const double b0 = tgt.beta.sum();
  const double psi_b0 = digamma(b0);
  double kl = log_gamma(b0) - log_gamma(by) - log_gamma(a0);
  for (Eigen::Index c = 0; c < alpha.size(); ++c) {
    kl += log_gamma(alpha[c]);
    if (c == y) {
      kl += (by - alpha[c]) * (digamma(by) - psi_b0);
    } else {
      kl += (1.0 - alpha[c]) * (digamma(1.0) - psi_b0);
    }
  }
  return kl;
}

double kl_dirichlet_forward_expanded(const Eigen::VectorXd& logits, int y) {
  const EpnTarget tgt = epn_target(logits, y);
  const Eigen::VectorXd alpha = 1.0 + logits.array().exp();
  const double a0 = alpha.sum();
  const double psi_a0 = digamma(a0);
  double kl = log_gamma(a0) - log_gamma(tgt.beta.sum());
  for (Eigen::Index c = 0; c < alpha.size(); ++c) {
    kl += log_gamma(tgt.beta[c]) - log_gamma(alpha[c]) +
          (alpha[c] - tgt.beta[c]) * (digamma(alpha[c]) - psi_a0);
  }
  return kl;
}

}  // namespace epn
