#ifndef EPN_NETWORK_HPP
#define EPN_NETWORK_HPP

#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include "epn/tape.hpp"

namespace epn {

using Rng = std::mt19937_64;

enum class Activation { kRelu, kLeakyRelu, kTanh, kNone };

/// Final-layer parameterization. In kNegExp mode the stored final-layer
/// matrix V yields an effective weight -exp(V), so every effective weight
/// is strictly negative, and the preceding activation is forced to ReLU.
enum class FinalLayerMode { kFree, kNegExp };

struct DenseLayer {
  Matrix weight;  // in x out
  Matrix bias;    // 1 x out
  Activation act = Activation::kNone;
};

/// Handles to this network's parameter leaves on a Tape, filled by forward().
struct TapeBinding {
  std::vector<Var> weights;
  std::vector<Var> biases;
  Var input;
  Var logits;
};

/// An MLP with optional inverted dropout and an optional constrained
/// (componentwise-negative) final layer.
class Network {
 public:
  Network() = default;

  /// Hidden layers use `act`; final layer is linear (or -exp constrained).
  /// Kaiming-uniform fan-in initialization.
  static Network mlp(int in_dim, const std::vector<int>& hidden, int out_dim,
                     Activation act, FinalLayerMode mode, double dropout_rate,
                     Rng& rng);

  /// Records the forward pass on `tape` and returns the bindings.
  /// Dropout masks are sampled from `rng` only when `training` is true.
  /// Set `input_needs_grad` to request gradients w.r.t. the batch.
  TapeBinding forward(Tape& tape, const Matrix& batch, bool training = false,
                      Rng* rng = nullptr, bool input_needs_grad = false) const;

  /// Forward pass whose input is an existing tape node (no dropout);
  /// lets other graphs feed this network's conditioning path.
  TapeBinding forward_from(Tape& tape, Var input) const;

  /// Inference convenience: logits without recording gradients.
  Matrix forward_value(const Matrix& batch) const;

  /// Activations of the last hidden layer (inference, no dropout).
  Matrix penultimate(const Matrix& batch) const;

  /// Weights and biases interleaved, matching gradients() ordering.
  std::vector<Matrix*> parameters();
  std::vector<const Matrix*> parameters() const;

  /// Collects d loss / d parameter from a tape after backward().
  std::vector<Matrix> gradients(const Tape& tape, const TapeBinding& b) const;

  int input_dim() const;
  int output_dim() const;
  int penultimate_dim() const;
  std::size_t layer_count() const { return layers_.size(); }
  FinalLayerMode final_mode() const { return final_mode_; }
  double dropout_rate() const { return dropout_rate_; }
  void set_dropout_rate(double p);

  /// Versioned text checkpoint; doubles as hexfloat, round-trips bit-exact.
  void save(std::ostream& os) const;
  static Network load(std::istream& is);

  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& layers() { return layers_; }

 private:
  std::vector<DenseLayer> layers_;
  FinalLayerMode final_mode_ = FinalLayerMode::kFree;
  double dropout_rate_ = 0.0;
};

}  // namespace epn

#endif  // EPN_NETWORK_HPP
