#ifndef EPN_ATTACKS_HPP
#define EPN_ATTACKS_HPP

#include "epn/network.hpp"

namespace epn {

enum class AttackNorm { kL2, kLinf };

/// Single-step fast gradient attack on the cross-entropy loss.
/// linf: x + eps * sign(grad); l2: x + eps * grad / ||grad|| per row.
/// Rows with zero gradient are returned unchanged; their count is written to
/// `zero_grad_rows` when given.
Matrix fgm_attack(const Network& net, const Matrix& x, const std::vector<int>& labels,
                  double eps, AttackNorm norm, int* zero_grad_rows = nullptr);

/// Iterated signed / normalized gradient ascent, projected onto the eps-ball
/// around the clean input after every step.
Matrix pgd_attack(const Network& net, const Matrix& x, const std::vector<int>& labels,
                  double eps, double step, int n_steps, AttackNorm norm);

}  // namespace epn

#endif  // EPN_ATTACKS_HPP
