#ifndef EPN_TAPE_HPP
#define EPN_TAPE_HPP

#include <Eigen/Dense>
#include <functional>
#include <stdexcept>
#include <vector>

namespace epn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Handle to a node on a Tape. Default-constructed handles are detached.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Define-by-run reverse-mode autodiff over dense double matrices.
///
/// Nodes are appended in topological order; backward() walks the tape in
/// reverse once and accumulates gradients into every reachable node.
/// A tape is built per batch and discarded afterwards.
class Tape {
 public:
  Var leaf(Matrix value, bool needs_grad = true);
  Var constant(Matrix value) { return leaf(std::move(value), false); }

  const Matrix& value(Var v) const { return node(v).value; }
  const Matrix& grad(Var v) const;

  /// Runs one backward pass from a scalar (1x1) loss node.
  /// Throws if called on a detached node, a non-scalar node, or twice.
  void backward(Var loss);

  // --- arithmetic ---
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var hadamard(Var a, Var b);
  Var matmul(Var a, Var b);
  Var matmul_transposed(Var a, Var b);  // a * b^T
  Var scale(Var a, double s);
  Var add_scalar(Var a, double s);
  Var add_rowvec(Var a, Var bias);      // a: NxC, bias: 1xC broadcast over rows
  Var mul_mask(Var a, const Matrix& m); // elementwise product with a constant

  // --- elementwise nonlinearities ---
  Var relu(Var a);
  Var leaky_relu(Var a, double slope);
  Var tanh(Var a);
  Var exp(Var a);
  Var neg_exp(Var a); // -exp(a)
  Var log(Var a);
  Var square(Var a);
  Var softplus(Var a);
  Var lgamma_op(Var a);   // d/dx = digamma
  Var digamma_op(Var a);  // d/dx = trigamma

  // --- reductions and row-wise ops ---
  Var sum(Var a);                // -> 1x1
  Var mean(Var a);               // -> 1x1
  Var row_sum(Var a);            // NxC -> Nx1
  Var row_logsumexp(Var a);      // NxC -> Nx1, max-shifted
  Var row_softmax(Var a);        // NxC -> NxC
  Var pick(Var a, const std::vector<int>& cols); // NxC -> Nx1, a(i, cols[i])

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    std::function<void(Tape&, const Node&)> back; // empty for leaves/constants
  };

  Node& node(Var v);
  const Node& node(Var v) const;
  Var push(Matrix value, bool needs_grad,
           std::function<void(Tape&, const Node&)> back);
  void accumulate(Var v, const Matrix& g);
  bool tracked(Var v) const { return v.valid() && node(v).needs_grad; }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

/// Numerically stable logsumexp of a non-empty vector.
double logsumexp(const Vector& v);

/// Softmax of a non-empty vector; shift-invariant, sums to 1.
Vector softmax(const Vector& v);

/// Throws std::runtime_error naming `what` if m contains NaN or Inf.
void require_finite(const Matrix& m, const char* what);

}  // namespace epn

#endif  // EPN_TAPE_HPP
