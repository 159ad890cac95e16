#include "epn/tape.hpp"

#include "epn/special.hpp"

namespace epn {

void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) {
    throw std::runtime_error(std::string("non-finite values in ") + what);
  }
}

double logsumexp(const Vector& v) {
  if (v.size() == 0) throw std::invalid_argument("logsumexp: empty vector");
  const double m = v.maxCoeff();
  return m + std::log((v.array() - m).exp().sum());
}

Vector softmax(const Vector& v) {
  if (v.size() == 0) throw std::invalid_argument("softmax: empty vector");
  Vector e = (v.array() - v.maxCoeff()).exp();
  return e / e.sum();
}

Tape::Node& Tape::node(Var v) {
  if (!v.valid() || v.id >= static_cast<int>(nodes_.size())) {
    throw std::invalid_argument("tape: detached or foreign node");
  }
  return nodes_[static_cast<std::size_t>(v.id)];
}

const Tape::Node& Tape::node(Var v) const {
  return const_cast<Tape*>(this)->node(v);
}

Var Tape::push(Matrix value, bool needs_grad,
               std::function<void(Tape&, const Node&)> back) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::leaf(Matrix value, bool needs_grad) {
  return push(std::move(value), needs_grad, {});
}

const Matrix& Tape::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad.size() == 0) {
    throw std::runtime_error("tape: gradient not populated for node");
  }
  return n.grad;
}

void Tape::accumulate(Var v, const Matrix& g) {
  Node& n = node(v);
  if (!n.needs_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void Tape::backward(Var loss) {
  if (consumed_) throw std::runtime_error("tape: second backward on consumed graph");
  Node& top = node(loss);
  if (!top.needs_grad) {
    throw std::invalid_argument("tape: backward from a detached node");
  }
  if (top.value.rows() != 1 || top.value.cols() != 1) {
    throw std::invalid_argument("tape: backward requires a scalar node");
  }
  consumed_ = true;
  top.grad = Matrix::Ones(1, 1);
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.back && n.needs_grad && n.grad.size() != 0) n.back(*this, n);
  }
  // Leaves reachable from the loss but with zero contribution still get zeros.
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.needs_grad && n.grad.size() == 0) {
      n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    }
  }
}

Var Tape::add(Var a, Var b) {
  Matrix v = value(a) + value(b);
  bool ng = tracked(a) || tracked(b);
  return push(std::move(v), ng, [a, b](Tape& t, const Node& n) {
    t.accumulate(a, n.grad);
    t.accumulate(b, n.grad);
  });
}

Var Tape::sub(Var a, Var b) {
  Matrix v = value(a) - value(b);
  bool ng = tracked(a) || tracked(b);
  return push(std::move(v), ng, [a, b](Tape& t, const Node& n) {
    t.accumulate(a, n.grad);
    t.accumulate(b, -n.grad);
  });
}

Var Tape::hadamard(Var a, Var b) {
  Matrix v = value(a).cwiseProduct(value(b));
  bool ng = tracked(a) || tracked(b);
  return push(std::move(v), ng, [a, b](Tape& t, const Node& n) {
    t.accumulate(a, n.grad.cwiseProduct(t.value(b)));
    t.accumulate(b, n.grad.cwiseProduct(t.value(a)));
  });
}

Var Tape::matmul(Var a, Var b) {
  Matrix v = value(a) * value(b);
  bool ng = tracked(a) || tracked(b);
  return push(std::move(v), ng, [a, b](Tape& t, const Node& n) {
    t.accumulate(a, n.grad * t.value(b).transpose());
    t.accumulate(b, t.value(a).transpose() * n.grad);
  });
}

Var Tape::matmul_transposed(Var a, Var b) {
  Matrix v = value(a) * value(b).transpose();
  bool ng = tracked(a) || tracked(b);
  return push(std::move(v), ng, [a, b](Tape& t, const Node& n) {
    t.accumulate(a, n.grad * t.value(b));
    t.accumulate(b, n.grad.transpose() * t.value(a));
  });
}

Var Tape::scale(Var a, double s) {
  Matrix v = value(a) * s;
  return push(std::move(v), tracked(a), [a, s](Tape& t, const Node& n) {
    t.accumulate(a, n.grad * s);
  });
}

Var Tape::add_scalar(Var a, double s) {
  Matrix v = (value(a).array() + s).matrix();
  return push(std::move(v), tracked(a), [a](Tape& t, const Node& n) {
    t.accumulate(a, n.grad);
  });
}

Var Tape::add_rowvec(Var a, Var bias) {
  if (value(bias).rows() != 1 || value(bias).cols() != value(a).cols()) {
    throw std::invalid_argument("add_rowvec: bias must be 1 x cols(a)");
  }
  Matrix v = value(a).rowwise() + RowVector(value(bias).row(0));
  bool ng = tracked(a) || tracked(bias);
  return push(std::move(v), ng, [a, bias](Tape& t, const Node& n) {
    t.accumulate(a, n.grad);
    t.accumulate(bias, n.grad.colwise().sum());
  });
}

Var Tape::mul_mask(Var a, const Matrix& m) {
  Matrix mask = m;
  Matrix v = value(a).cwiseProduct(mask);
  return push(std::move(v), tracked(a), [a, mask](Tape& t, const Node& n) {
    t.accumulate(a, n.grad.cwiseProduct(mask));
  });
}

Var Tape::relu(Var a) {
  Matrix v = value(a).cwiseMax(0.0);
  return push(std::move(v), tracked(a), [a](Tape& t, const Node& n) {
    Matrix mask = t.value(a).unaryExpr(
        [](double x) { return x > 0.0 ? 1.0 : 0.0; });
    t.accumulate(a, n.grad.cwiseProduct(mask));
  });
}

Var Tape::leaky_relu(Var a, double slope) {
  Matrix v = value(a).unaryExpr(
      [slope](double x) { return x > 0.0 ? x : slope * x; });
  return push(std::move(v), tracked(a), [a, slope](Tape& t, const Node& n) {
    Matrix mask = t.value(a).unaryExpr(
        [slope](double x) { return x > 0.0 ? 1.0 : slope; });
    t.accumulate(a, n.grad.cwiseProduct(mask));
  });
}

Var Tape::tanh(Var a) {
  Matrix v = value(a).array().tanh().matrix();
  Var out = push(std::move(v), tracked(a), {});
  node(out).back = [a, out](Tape& t, const Node& n) {
    Matrix d = (1.0 - t.value(out).array().square()).matrix();
    t.accumulate(a, n.grad.cwiseProduct(d));
  };
  return out;
}

Var Tape::exp(Var a) {
  Matrix v = value(a).array().exp().matrix();
  Var out = push(std::move(v), tracked(a), {});
  node(out).back = [a, out](Tape& t, const Node& n) {
    t.accumulate(a, n.grad.cwiseProduct(t.value(out)));
  };
  return out;
}

Var Tape::neg_exp(Var a) {
  Matrix v = (-value(a).array().exp()).matrix();
  Var out = push(std::move(v), tracked(a), {});
  node(out).back = [a, out](Tape& t, const Node& n) {
    t.accumulate(a, n.grad.cwiseProduct(t.value(out)));
  };
  return out;
}

Var Tape::log(Var a) {
  Matrix v = value(a).array().log().matrix();
  return push(std::move(v), tracked(a), [a](Tape& t, const Node& n) {
    t.accumulate(a, n.grad.cwiseQuotient(t.value(a)));
  });
}

Var Tape::square(Var a) {
  Matrix v = value(a).array().square().matrix();
  return push(std::move(v), tracked(a), [a](Tape& t, const Node& n) {
    t.accumulate(a, 2.0 * n.grad.cwiseProduct(t.value(a)));
  });
}

Var Tape::softplus(Var a) {
  // log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
  Matrix v = value(a).unaryExpr([](double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
  });
  return push(std::move(v), tracked(a), [a](Tape& t, const Node& n) {
    Matrix sig = t.value(a).unaryExpr(
        [](double x) { return 1.0 / (1.0 + std::exp(-x)); });
    t.accumulate(a, n.grad.cwiseProduct(sig));
  });
}

Var Tape::lgamma_op(Var a) {
  Matrix v = value(a).unaryExpr([](double x) { return log_gamma(x); });
  return push(std::move(v), tracked(a), [a](Tape& t, const Node& n) {
    Matrix d = t.value(a).unaryExpr([](double x) { return digamma(x); });
    t.accumulate(a, n.grad.cwiseProduct(d));
  });
}

Var Tape::digamma_op(Var a) {
  Matrix v = value(a).unaryExpr([](double x) { return digamma(x); });
  return push(std::move(v), tracked(a), [a](Tape& t, const Node& n) {
    Matrix d = t.value(a).unaryExpr([](double x) { return trigamma(x); });
    t.accumulate(a, n.grad.cwiseProduct(d));
  });
}

Var Tape::sum(Var a) {
  Matrix v(1, 1);
  v(0, 0) = value(a).sum();
  return push(std::move(v), tracked(a), [a](Tape& t, const Node& n) {
    const Matrix& x = t.value(a);
    t.accumulate(a, Matrix::Constant(x.rows(), x.cols(), n.grad(0, 0)));
  });
}

Var Tape::mean(Var a) {
  const double inv = 1.0 / static_cast<double>(value(a).size());
  Matrix v(1, 1);
  v(0, 0) = value(a).sum() * inv;
  return push(std::move(v), tracked(a), [a, inv](Tape& t, const Node& n) {
    const Matrix& x = t.value(a);
    t.accumulate(a, Matrix::Constant(x.rows(), x.cols(), n.grad(0, 0) * inv));
  });
}

Var Tape::row_sum(Var a) {
  Matrix v = value(a).rowwise().sum();
  return push(std::move(v), tracked(a), [a](Tape& t, const Node& n) {
    t.accumulate(a, n.grad * RowVector::Ones(t.value(a).cols()));
  });
}

Var Tape::row_logsumexp(Var a) {
  const Matrix& x = value(a);
  Vector mx = x.rowwise().maxCoeff();
  Matrix shifted = x.colwise() - mx;
  Vector lse = (mx.array() + shifted.array().exp().rowwise().sum().log()).matrix();
  Var out = push(Matrix(lse), tracked(a), {});
  node(out).back = [a, out](Tape& t, const Node& n) {
    const Matrix& x = t.value(a);
    Vector l = t.value(out).col(0);
    Matrix p = (x.colwise() - l).array().exp().matrix();
    Matrix g = (p.array().colwise() * n.grad.col(0).array()).matrix();
    t.accumulate(a, g);
  };
  return out;
}

Var Tape::row_softmax(Var a) {
  const Matrix& x = value(a);
  Vector mx = x.rowwise().maxCoeff();
  Matrix e = (x.colwise() - mx).array().exp().matrix();
  Matrix p = (e.array().colwise() / e.rowwise().sum().array()).matrix();
  Var out = push(std::move(p), tracked(a), {});
  node(out).back = [a, out](Tape& t, const Node& n) {
    const Matrix& p = t.value(out);
    Vector dot = (n.grad.cwiseProduct(p)).rowwise().sum();
    Matrix g = p.cwiseProduct((n.grad.colwise() - dot).eval());
    t.accumulate(a, g);
  };
  return out;
}

Var Tape::pick(Var a, const std::vector<int>& cols) {
  const Matrix& x = value(a);
  if (static_cast<Eigen::Index>(cols.size()) != x.rows()) {
    throw std::invalid_argument("pick: one column index per row required");
  }
  Matrix v(x.rows(), 1);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    int c = cols[static_cast<std::size_t>(i)];
    if (c < 0 || c >= x.cols()) throw std::out_of_range("pick: column index out of range");
    v(i, 0) = x(i, c);
  }
  std::vector<int> idx = cols;
  return push(std::move(v), tracked(a), [a, idx](Tape& t, const Node& n) {
    const Matrix& x = t.value(a);
    Matrix g = Matrix::Zero(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      g(i, idx[static_cast<std::size_t>(i)]) = n.grad(i, 0);
    }
    t.accumulate(a, g);
  });
}

}  // namespace epn
