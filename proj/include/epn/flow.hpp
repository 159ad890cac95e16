#ifndef EPN_FLOW_HPP
#define EPN_FLOW_HPP

#include <iosfwd>

#include "epn/ebm_losses.hpp"
#include "epn/network.hpp"

namespace epn {

/// One affine coupling step. Coordinates with mask 1 pass through unchanged
/// and condition the transform of the rest: y = m.x + (1-m).(x.exp(s) + t),
/// with (s, t) produced by the conditioner from the masked coordinates and
/// s bounded to (-3, 3) through a scaled tanh. The Jacobian is triangular,
/// so the log-determinant is the sum of s over transformed coordinates.
struct CouplingLayer {
  Vector mask;          // length D, entries 0 or 1
  Network conditioner;  // D -> 2D, columns [s_raw | t]
};

/// Stack of coupling layers over a standard-normal base distribution.
/// forward() maps latent to data; inverse() maps data to latent.
class CouplingFlow {
 public:
  /// Alternating even/odd masks; conditioners are 2-hidden-layer ReLU MLPs
  /// of the given width with a zeroed final layer, so the initial flow is
  /// the identity.
  static CouplingFlow build(int dim, int n_layers, int hidden_width, Rng& rng);

  int dim() const { return dim_; }
  std::size_t depth() const { return layers_.size(); }

  Matrix forward(const Matrix& z) const;

  /// Latent pre-images; if log_det is given it receives the per-row
  /// log |det d z / d x|.
  Matrix inverse(const Matrix& x, Vector* log_det = nullptr) const;

  /// log p(x) = log N(inverse(x); 0, I) + log |det d z / d x| per row.
  Vector log_prob(const Matrix& x) const;

  /// -mean log p over the batch, with one binding per coupling layer.
  LossGraph nll_loss(Tape& tape, const Matrix& batch) const;

  /// All conditioner parameters, layer by layer.
  std::vector<Matrix*> parameters();

  /// Gradients matching parameters() order, from an nll_loss graph.
  std::vector<Matrix> gradients(const Tape& tape, const LossGraph& g) const;

  void save(std::ostream& os) const;
  static CouplingFlow load(std::istream& is);

  const std::vector<CouplingLayer>& layers() const { return layers_; }

 private:
  int dim_ = 0;
  std::vector<CouplingLayer> layers_;
};

}  // namespace epn

#endif  // EPN_FLOW_HPP
