#include "epn/flow.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace epn {

namespace {

constexpr double kLogTwoPi = 1.8378770664093453;
constexpr double kScaleBound = 3.0;

Matrix replicate_rows(const Vector& v, Eigen::Index rows) {
  return v.transpose().replicate(rows, 1);
}

/// (s, t) at value level from the masked input.
void conditioner_values(const CouplingLayer& layer, const Matrix& masked,
                        Matrix& s, Matrix& t) {
  const Matrix out = layer.conditioner.forward_value(masked);
  const Eigen::Index d = masked.cols();
  s = (kScaleBound * out.leftCols(d).array().tanh()).matrix();
  t = out.rightCols(d);
}

}  // namespace

CouplingFlow CouplingFlow::build(int dim, int n_layers, int hidden_width,
                                 Rng& rng) {
  if (dim < 2) throw std::invalid_argument("flow: dimension must be >= 2");
  if (n_layers < 1) throw std::invalid_argument("flow: need at least one layer");
  CouplingFlow flow;
  flow.dim_ = dim;
  for (int l = 0; l < n_layers; ++l) {
    CouplingLayer layer;
    layer.mask = Vector::Zero(dim);
    for (int j = 0; j < dim; ++j) {
      if (j % 2 == l % 2) layer.mask[j] = 1.0;
    }
    layer.conditioner =
        Network::mlp(dim, {hidden_width, hidden_width}, 2 * dim,
                     Activation::kRelu, FinalLayerMode::kFree, 0.0, rng);
    // Zero the output layer so the fresh flow is the identity map.
    layer.conditioner.layers().back().weight.setZero();
    layer.conditioner.layers().back().bias.setZero();
    flow.layers_.push_back(std::move(layer));
  }
  return flow;
}

Matrix CouplingFlow::forward(const Matrix& z) const {
  if (z.cols() != dim_) throw std::invalid_argument("flow forward: dimension mismatch");
  Matrix x = z;
  for (const CouplingLayer& layer : layers_) {
    const Matrix m = replicate_rows(layer.mask, x.rows());
    const Matrix keep = x.cwiseProduct(m);
    Matrix s, t;
    conditioner_values(layer, keep, s, t);
    const Matrix moved = (x.array() * s.array().exp() + t.array()).matrix();
    x = keep + moved.cwiseProduct(Matrix::Ones(x.rows(), dim_) - m);
  }
  return x;
}

Matrix CouplingFlow::inverse(const Matrix& x, Vector* log_det) const {
  if (x.cols() != dim_) throw std::invalid_argument("flow inverse: dimension mismatch");
  Matrix z = x;
  Vector ld = Vector::Zero(x.rows());
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
    const Matrix m = replicate_rows(it->mask, z.rows());
    const Matrix inv_m = Matrix::Ones(z.rows(), dim_) - m;
    const Matrix keep = z.cwiseProduct(m);
    Matrix s, t;
    conditioner_values(*it, keep, s, t);
    const Matrix moved = ((z - t).array() * (-s).array().exp()).matrix();
    z = keep + moved.cwiseProduct(inv_m);
    ld -= s.cwiseProduct(inv_m).rowwise().sum();
  }
  if (log_det) *log_det = ld;
  return z;
}

Vector CouplingFlow::log_prob(const Matrix& x) const {
  Vector ld;
  const Matrix z = inverse(x, &ld);
  const Vector base = -0.5 * z.array().square().rowwise().sum() -
                      0.5 * dim_ * kLogTwoPi;
  return base + ld;
}

LossGraph CouplingFlow::nll_loss(Tape& tape, const Matrix& batch) const {
  if (batch.rows() == 0) throw std::invalid_argument("flow nll: empty batch");
  if (batch.cols() != dim_) throw std::invalid_argument("flow nll: dimension mismatch");
  const Eigen::Index n = batch.rows();

  // Column selectors splitting the conditioner output into (s_raw, t).
  Matrix sel_s = Matrix::Zero(2 * dim_, dim_);
  Matrix sel_t = Matrix::Zero(2 * dim_, dim_);
  for (int j = 0; j < dim_; ++j) {
    sel_s(j, j) = 1.0;
    sel_t(dim_ + j, j) = 1.0;
  }
  Var vsel_s = tape.constant(sel_s);
  Var vsel_t = tape.constant(sel_t);

  LossGraph g;
  g.binds.resize(layers_.size());
  Var y = tape.constant(batch);
  Var log_det;  // accumulated N x 1
  for (std::size_t l = layers_.size(); l-- > 0;) {
    const CouplingLayer& layer = layers_[l];
    const Matrix m = replicate_rows(layer.mask, n);
    const Matrix inv_m = Matrix::Ones(n, dim_) - m;
    Var keep = tape.mul_mask(y, m);
    TapeBinding bind = layer.conditioner.forward_from(tape, keep);
    g.binds[l] = bind;
    Var s = tape.scale(tape.tanh(tape.matmul(bind.logits, vsel_s)), kScaleBound);
    Var t = tape.matmul(bind.logits, vsel_t);
    Var moved = tape.hadamard(tape.sub(y, t), tape.exp(tape.scale(s, -1.0)));
    y = tape.add(keep, tape.mul_mask(moved, inv_m));
    Var ld = tape.row_sum(tape.mul_mask(tape.scale(s, -1.0), inv_m));
    log_det = log_det.valid() ? tape.add(log_det, ld) : ld;
  }
  Var base = tape.add_scalar(tape.scale(tape.row_sum(tape.square(y)), -0.5),
                             -0.5 * dim_ * kLogTwoPi);
  Var log_p = tape.add(base, log_det);
  g.loss = tape.scale(tape.mean(log_p), -1.0);
  return g;
}

std::vector<Matrix*> CouplingFlow::parameters() {
  std::vector<Matrix*> out;
  for (CouplingLayer& layer : layers_) {
    for (Matrix* p : layer.conditioner.parameters()) out.push_back(p);
  }
  return out;
}

std::vector<Matrix> CouplingFlow::gradients(const Tape& tape,
                                            const LossGraph& g) const {
  if (g.binds.size() != layers_.size()) {
    throw std::invalid_argument("flow gradients: binding count mismatch");
  }
  std::vector<Matrix> out;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    std::vector<Matrix> part = layers_[l].conditioner.gradients(tape, g.binds[l]);
    for (Matrix& m : part) out.push_back(std::move(m));
  }
  return out;
}

void CouplingFlow::save(std::ostream& os) const {
  os << "epn-flow v1\n" << dim_ << ' ' << layers_.size() << '\n';
  for (const CouplingLayer& layer : layers_) {
    os << "mask";
    for (int j = 0; j < dim_; ++j) os << ' ' << (layer.mask[j] > 0.5 ? 1 : 0);
    os << '\n';
    layer.conditioner.save(os);
  }
}

CouplingFlow CouplingFlow::load(std::istream& is) {
  std::string magic, version;
  is >> magic >> version;
  if (magic != "epn-flow" || version != "v1") {
    throw std::runtime_error("checkpoint: unrecognized flow header");
  }
  CouplingFlow flow;
  std::size_t n_layers = 0;
  is >> flow.dim_ >> n_layers;
  for (std::size_t l = 0; l < n_layers; ++l) {
    std::string key;
    is >> key;
    if (key != "mask") throw std::runtime_error("checkpoint: expected mask");
    CouplingLayer layer;
    layer.mask = Vector::Zero(flow.dim_);
    for (int j = 0; j < flow.dim_; ++j) {
      int bit = 0;
      is >> bit;
      layer.mask[j] = bit ? 1.0 : 0.0;
    }
    layer.conditioner = Network::load(is);
    flow.layers_.push_back(std::move(layer));
  }
  if (!is) throw std::runtime_error("checkpoint: truncated flow");
  return flow;
}

}  // namespace epn
