#include "epn/network.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

namespace epn {

namespace {

Matrix kaiming_uniform(int in_dim, int out_dim, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in_dim));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix w(in_dim, out_dim);
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = dist(rng);
  }
  return w;
}

const char* act_name(Activation a) {
  switch (a) {
    case Activation::kRelu: return "relu";
    case Activation::kLeakyRelu: return "leaky_relu";
    case Activation::kTanh: return "tanh";
    case Activation::kNone: return "none";
  }
  return "none";
}

Activation act_from_name(const std::string& s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "leaky_relu") return Activation::kLeakyRelu;
  if (s == "tanh") return Activation::kTanh;
  if (s == "none") return Activation::kNone;
  throw std::runtime_error("checkpoint: unknown activation '" + s + "'");
}

void write_matrix(std::ostream& os, const Matrix& m) {
  os << m.rows() << ' ' << m.cols() << '\n' << std::hexfloat;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      os << m(i, j) << (j + 1 == m.cols() ? '\n' : ' ');
    }
  }
  os << std::defaultfloat;
}

Matrix read_matrix(std::istream& is) {
  Eigen::Index rows = 0, cols = 0;
  is >> rows >> cols;
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) {
      std::string tok;
      is >> tok;
      m(i, j) = std::strtod(tok.c_str(), nullptr);
    }
  }
  if (!is) throw std::runtime_error("checkpoint: truncated matrix block");
  return m;
}

}  // namespace

Network Network::mlp(int in_dim, const std::vector<int>& hidden, int out_dim,
                     Activation act, FinalLayerMode mode, double dropout_rate,
                     Rng& rng) {
  if (in_dim < 1 || out_dim < 1) {
    throw std::invalid_argument("mlp: dimensions must be positive");
  }
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
    throw std::invalid_argument("mlp: dropout_rate must be in [0, 1)");
  }
  Network net;
  net.final_mode_ = mode;
  net.dropout_rate_ = dropout_rate;
  int prev = in_dim;
  const Activation hidden_act = mode == FinalLayerMode::kNegExp ? Activation::kRelu : act;
  for (int h : hidden) {
    net.layers_.push_back({kaiming_uniform(prev, h, rng), Matrix::Zero(1, h), hidden_act});
    prev = h;
  }
  Matrix final_w = kaiming_uniform(prev, out_dim, rng);
  if (mode == FinalLayerMode::kNegExp) {
    // Stored parameter V; effective weight is -exp(V). Initialize so the
    // effective magnitudes match the usual scale.
    final_w = final_w.unaryExpr([](double w) { return std::log(std::abs(w) + 1e-3); });
  }
  net.layers_.push_back({std::move(final_w), Matrix::Zero(1, out_dim), Activation::kNone});
  return net;
}

TapeBinding Network::forward(Tape& tape, const Matrix& batch, bool training,
                             Rng* rng, bool input_needs_grad) const {
  if (layers_.empty()) throw std::runtime_error("forward: empty network");
  if (batch.cols() != layers_.front().weight.rows()) {
    throw std::invalid_argument("forward: batch width does not match input width");
  }
  if (training && dropout_rate_ > 0.0 && rng == nullptr) {
    throw std::invalid_argument("forward: training with dropout requires an rng");
  }
  TapeBinding bind;
  bind.input = tape.leaf(batch, input_needs_grad);
  Var h = bind.input;
  const std::size_t last = layers_.size() - 1;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const DenseLayer& layer = layers_[l];
    Var w = tape.leaf(layer.weight);
    Var b = tape.leaf(layer.bias);
    bind.weights.push_back(w);
    bind.biases.push_back(b);
    Var w_eff = (l == last && final_mode_ == FinalLayerMode::kNegExp)
                    ? tape.neg_exp(w)
                    : w;
    h = tape.add_rowvec(tape.matmul(h, w_eff), b);
    switch (layer.act) {
      case Activation::kRelu: h = tape.relu(h); break;
      case Activation::kLeakyRelu: h = tape.leaky_relu(h, 0.01); break;
      case Activation::kTanh: h = tape.tanh(h); break;
      case Activation::kNone: break;
    }
    if (l != last && training && dropout_rate_ > 0.0) {
      // Inverted dropout: keep with probability 1-p, scale by 1/(1-p).
      const double keep = 1.0 - dropout_rate_;
      std::bernoulli_distribution coin(keep);
      Matrix mask(tape.value(h).rows(), tape.value(h).cols());
      for (Eigen::Index i = 0; i < mask.rows(); ++i) {
        for (Eigen::Index j = 0; j < mask.cols(); ++j) {
          mask(i, j) = coin(*rng) ? 1.0 / keep : 0.0;
        }
      }
      h = tape.mul_mask(h, mask);
    }
  }
  bind.logits = h;
  require_finite(tape.value(h), "network logits");
  return bind;
}

TapeBinding Network::forward_from(Tape& tape, Var input) const {
  if (layers_.empty()) throw std::runtime_error("forward_from: empty network");
  TapeBinding bind;
  bind.input = input;
  Var h = input;
  const std::size_t last = layers_.size() - 1;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const DenseLayer& layer = layers_[l];
    Var w = tape.leaf(layer.weight);
    Var b = tape.leaf(layer.bias);
    bind.weights.push_back(w);
    bind.biases.push_back(b);
    Var w_eff = (l == last && final_mode_ == FinalLayerMode::kNegExp)
                    ? tape.neg_exp(w)
                    : w;
    h = tape.add_rowvec(tape.matmul(h, w_eff), b);
    switch (layer.act) {
      case Activation::kRelu: h = tape.relu(h); break;
      case Activation::kLeakyRelu: h = tape.leaky_relu(h, 0.01); break;
      case Activation::kTanh: h = tape.tanh(h); break;
      case Activation::kNone: break;
    }
  }
  bind.logits = h;
  return bind;
}

Matrix Network::forward_value(const Matrix& batch) const {
  Tape tape;
  return tape.value(forward(tape, batch).logits);
}

Matrix Network::penultimate(const Matrix& batch) const {
  if (layers_.size() < 2) {
    throw std::runtime_error("penultimate: network has no hidden layers");
  }
  Matrix h = batch;
  for (std::size_t l = 0; l + 1 < layers_.size(); ++l) {
    const DenseLayer& layer = layers_[l];
    h = (h * layer.weight).rowwise() + RowVector(layer.bias.row(0));
    switch (layer.act) {
      case Activation::kRelu: h = h.cwiseMax(0.0); break;
      case Activation::kLeakyRelu:
        h = h.unaryExpr([](double x) { return x > 0.0 ? x : 0.01 * x; });
        break;
      case Activation::kTanh: h = h.array().tanh().matrix(); break;
      case Activation::kNone: break;
    }
  }
  return h;
}

std::vector<Matrix*> Network::parameters() {
  std::vector<Matrix*> out;
  for (DenseLayer& l : layers_) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  return out;
}

std::vector<const Matrix*> Network::parameters() const {
  std::vector<const Matrix*> out;
  for (const DenseLayer& l : layers_) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  return out;
}

std::vector<Matrix> Network::gradients(const Tape& tape, const TapeBinding& b) const {
  std::vector<Matrix> grads;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    grads.push_back(tape.grad(b.weights[l]));
    grads.push_back(tape.grad(b.biases[l]));
  }
  return grads;
}

int Network::input_dim() const {
  return static_cast<int>(layers_.front().weight.rows());
}

int Network::output_dim() const {
  return static_cast<int>(layers_.back().weight.cols());
}

int Network::penultimate_dim() const {
  return static_cast<int>(layers_.back().weight.rows());
}

void Network::set_dropout_rate(double p) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout_rate must be in [0,1)");
  dropout_rate_ = p;
}

void Network::save(std::ostream& os) const {
  os << "epn-network v1\n";
  os << "final_mode " << (final_mode_ == FinalLayerMode::kNegExp ? "negexp" : "free") << '\n';
  os << "dropout " << std::hexfloat << dropout_rate_ << std::defaultfloat << '\n';
  os << "layers " << layers_.size() << '\n';
  for (const DenseLayer& l : layers_) {
    os << "activation " << act_name(l.act) << '\n';
    write_matrix(os, l.weight);
    write_matrix(os, l.bias);
  }
}

Network Network::load(std::istream& is) {
  std::string magic, version;
  is >> magic >> version;
  if (magic != "epn-network" || version != "v1") {
    throw std::runtime_error("checkpoint: unrecognized network header");
  }
  Network net;
  std::string key, val;
  is >> key >> val;
  if (key != "final_mode") throw std::runtime_error("checkpoint: expected final_mode");
  net.final_mode_ = val == "negexp" ? FinalLayerMode::kNegExp : FinalLayerMode::kFree;
  is >> key >> val;
  if (key != "dropout") throw std::runtime_error("checkpoint: expected dropout");
  net.dropout_rate_ = std::strtod(val.c_str(), nullptr);
  std::size_t n = 0;
  is >> key >> n;
  if (key != "layers") throw std::runtime_error("checkpoint: expected layers");
  for (std::size_t l = 0; l < n; ++l) {
    is >> key >> val;
    if (key != "activation") throw std::runtime_error("checkpoint: expected activation");
    DenseLayer layer;
    layer.act = act_from_name(val);
    layer.weight = read_matrix(is);
    layer.bias = read_matrix(is);
    net.layers_.push_back(std::move(layer));
  }
  return net;
}

}  // namespace epn
