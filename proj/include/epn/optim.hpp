#ifndef EPN_OPTIM_HPP
#define EPN_OPTIM_HPP

#include <vector>

#include "epn/tape.hpp"

namespace epn {

/// Adam with linear learning-rate warm-up: lr(t) = base * min(1, t / warmup).
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int warmup_steps = 0;
  long step = 0;
  std::vector<Matrix> m;  // first moments, lazily shaped
  std::vector<Matrix> v;  // second moments

  double effective_lr_at(long t) const;
};

/// One Adam update in place. Throws on non-finite gradients or shape mismatch.
void adam_step(const std::vector<Matrix*>& params,
               const std::vector<Matrix>& grads, AdamState& state);

}  // namespace epn

#endif  // EPN_OPTIM_HPP
