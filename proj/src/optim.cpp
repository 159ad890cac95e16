#include "epn/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace epn {

double AdamState::effective_lr_at(long t) const {
  if (warmup_steps <= 0) return lr;
  const double frac = static_cast<double>(t) / static_cast<double>(warmup_steps);
  return lr * std::min(1.0, frac);
}

void adam_step(const std::vector<Matrix*>& params,
               const std::vector<Matrix>& grads, AdamState& state) {
  if (params.size() != grads.size()) {
    throw std::invalid_argument("adam_step: params/grads size mismatch");
  }
  if (state.m.empty()) {
    for (const Matrix* p : params) {
      state.m.push_back(Matrix::Zero(p->rows(), p->cols()));
      state.v.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
  }
  state.step += 1;
  const long t = state.step;
  const double lr_t = state.effective_lr_at(t);
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& p = *params[i];
    const Matrix& g = grads[i];
    require_finite(g, "adam gradient");
    if (g.rows() != p.rows() || g.cols() != p.cols()) {
      throw std::invalid_argument("adam_step: gradient shape mismatch");
    }
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = (state.beta2 * state.v[i].array() +
                  (1.0 - state.beta2) * g.array().square()).matrix();
    const Matrix m_hat = state.m[i] / bc1;
    const Matrix v_hat = state.v[i] / bc2;
    p.array() -= lr_t * m_hat.array() / (v_hat.array().sqrt() + state.eps);
  }
}

}  // namespace epn
