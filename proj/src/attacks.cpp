#include "epn/attacks.hpp"

#include <cmath>
#include <stdexcept>

#include "epn/models.hpp"

namespace epn {

namespace {

Matrix ce_input_grad(const Network& net, const Matrix& x, const std::vector<int>& labels) {
  Tape tape;
  TapeBinding bind = net.forward(tape, x, false, nullptr, /*input_needs_grad=*/true);
  tape.backward(ce_loss(tape, bind.logits, labels));
  return tape.grad(bind.input);
}

Matrix ascent_direction(const Matrix& grad, AttackNorm norm, int* zero_rows) {
  Matrix dir = Matrix::Zero(grad.rows(), grad.cols());
  int zeros = 0;
  for (Eigen::Index i = 0; i < grad.rows(); ++i) {
    if (norm == AttackNorm::kLinf) {
      dir.row(i) = grad.row(i).unaryExpr([](double g) {
        return g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0);
      });
      if (grad.row(i).cwiseAbs().maxCoeff() == 0.0) ++zeros;
    } else {
      const double n = grad.row(i).norm();
      if (n == 0.0) {
        ++zeros;
      } else {
        dir.row(i) = grad.row(i) / n;
      }
    }
  }
  if (zero_rows) *zero_rows = zeros;
  return dir;
}

void project_ball(Matrix& x, const Matrix& origin, double eps, AttackNorm norm) {
  if (norm == AttackNorm::kLinf) {
    x = x.array().max(origin.array() - eps).min(origin.array() + eps).matrix();
  } else {
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      RowVector delta = x.row(i) - origin.row(i);
      const double n = delta.norm();
      if (n > eps) x.row(i) = origin.row(i) + delta * (eps / n);
    }
  }
}

}  // namespace

Matrix fgm_attack(const Network& net, const Matrix& x, const std::vector<int>& labels,
                  double eps, AttackNorm norm, int* zero_grad_rows) {
  if (eps < 0.0) throw std::invalid_argument("fgm_attack: eps must be >= 0");
  if (eps == 0.0) {
    if (zero_grad_rows) *zero_grad_rows = 0;
    return x;
  }
  const Matrix grad = ce_input_grad(net, x, labels);
  return x + eps * ascent_direction(grad, norm, zero_grad_rows);
}

Matrix pgd_attack(const Network& net, const Matrix& x, const std::vector<int>& labels,
                  double eps, double step, int n_steps, AttackNorm norm) {
  if (eps < 0.0) throw std::invalid_argument("pgd_attack: eps must be >= 0");
  if (!(step > 0.0)) throw std::invalid_argument("pgd_attack: step must be > 0");
  if (n_steps < 1) throw std::invalid_argument("pgd_attack: n_steps must be >= 1");
  if (eps == 0.0) return x;
  Matrix adv = x;
  for (int k = 0; k < n_steps; ++k) {
    const Matrix grad = ce_input_grad(net, adv, labels);
    adv += step * ascent_direction(grad, norm, nullptr);
    project_ball(adv, x, eps, norm);
  }
  return adv;
}

}  // namespace epn
