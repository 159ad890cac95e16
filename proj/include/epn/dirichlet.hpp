#ifndef EPN_DIRICHLET_HPP
#define EPN_DIRICHLET_HPP

#include <Eigen/Dense>

#include "epn/special.hpp"

namespace epn {

/// Concentration vector of a Dirichlet distribution; every entry > 0, C >= 2.
class DirichletParams {
 public:
  explicit DirichletParams(Eigen::VectorXd alpha);

  const Eigen::VectorXd& alpha() const { return alpha_; }
  Eigen::Index size() const { return alpha_.size(); }
  double precision() const { return alpha_.sum(); }

 private:
  Eigen::VectorXd alpha_;
};

/// Target concentrations for the evidential classification objective:
/// beta_c = 1 for c != y and beta_y = C + sum(exp(logits)).
struct EpnTarget {
  Eigen::VectorXd beta;
  int target_class;
};

/// KL(Dir(p) || Dir(q)), closed form. >= 0, zero iff p == q.
double kl_dirichlet(const DirichletParams& p, const DirichletParams& q);

/// log B(alpha) + (a0 - C) psi(a0) - sum (a_c - 1) psi(a_c).
double differential_entropy(const DirichletParams& d);

/// alpha / alpha_0.
Eigen::VectorXd predictive_mean(const DirichletParams& d);

/// Expected categorical entropy under the Dirichlet:
/// sum_c (a_c/a0) (psi(a0+1) - psi(a_c+1)). In [0, ln C].
double expected_entropy(const DirichletParams& d);

/// Entropy of the predictive mean minus expected entropy, clamped at 0.
double mutual_information(const DirichletParams& d);

/// Shannon entropy of a probability vector (nats).
double categorical_entropy(const Eigen::VectorXd& probs);

/// alpha = prior + pseudo_counts (componentwise).
DirichletParams bayesian_update(const DirichletParams& prior,
                                const Eigen::VectorXd& pseudo_counts);

/// Builds the target of the uncertainty cross-entropy objective.
EpnTarget epn_target(const Eigen::VectorXd& logits, int y);

/// Reverse KL of predicted Dir(1 + exp(logits)) from the target, expanded
/// in terms of logits. Matches kl_dirichlet on composed arguments.
double epn_kl_expanded(const Eigen::VectorXd& logits, int y);

/// Forward-KL diagnostic variant with arguments swapped; not used in training.
double kl_dirichlet_forward_expanded(const Eigen::VectorXd& logits, int y);

}  // namespace epn

#endif  // EPN_DIRICHLET_HPP
