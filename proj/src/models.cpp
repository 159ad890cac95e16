#include "epn/models.hpp"

#include <cmath>
#include <iostream>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace epn {

ModelKind model_kind_from_name(const std::string& name) {
  if (name == "ce") return ModelKind::kCe;
  if (name == "dpn") return ModelKind::kDpn;
  if (name == "jem") return ModelKind::kJem;
  if (name == "epn_m") return ModelKind::kEpnM;
  if (name == "energy_ood") return ModelKind::kEnergyOod;
  if (name == "oe") return ModelKind::kOe;
  if (name == "ensemble") return ModelKind::kEnsemble;
  if (name == "mc_dropout") return ModelKind::kMcDropout;
  if (name == "coupling_flow") return ModelKind::kCouplingFlow;
  throw std::invalid_argument("unknown model kind '" + name + "'");
}

const char* model_kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::kCe: return "ce";
    case ModelKind::kDpn: return "dpn";
    case ModelKind::kJem: return "jem";
    case ModelKind::kEpnM: return "epn_m";
    case ModelKind::kEnergyOod: return "energy_ood";
    case ModelKind::kOe: return "oe";
    case ModelKind::kEnsemble: return "ensemble";
    case ModelKind::kMcDropout: return "mc_dropout";
    case ModelKind::kCouplingFlow: return "coupling_flow";
  }
  return "ce";
}

Var ce_loss(Tape& tape, Var logits, const std::vector<int>& labels) {
  const Matrix& lv = tape.value(logits);
  if (static_cast<Eigen::Index>(labels.size()) != lv.rows()) {
    throw std::invalid_argument("ce_loss: label count does not match batch");
  }
  for (int y : labels) {
    if (y < 0 || y >= lv.cols()) throw std::out_of_range("ce_loss: label out of range");
  }
  return tape.mean(tape.sub(tape.row_logsumexp(logits), tape.pick(logits, labels)));
}

namespace {

/// Per-row KL(Dir(target row) || Dir(alpha)) with the target held constant.
/// alpha and alpha0 = row_sum(alpha) are tape nodes.
Var kl_rows_const_target(Tape& tape, const Matrix& target, Var alpha, Var alpha0) {
  const Eigen::Index n = target.rows();
  const Eigen::Index c = target.cols();
  Matrix w(n, c);
  Matrix cst(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double p0 = target.row(i).sum();
    double fixed = log_gamma(p0);
    double cross = 0.0;
    for (Eigen::Index j = 0; j < c; ++j) {
      const double p = target(i, j);
      w(i, j) = digamma(p) - digamma(p0);
      fixed -= log_gamma(p);
      cross += p * w(i, j);
    }
    cst(i, 0) = fixed + cross;
  }
  Var variable = tape.sub(tape.row_sum(tape.lgamma_op(alpha)), tape.lgamma_op(alpha0));
  variable = tape.sub(variable, tape.row_sum(tape.mul_mask(alpha, w)));
  return tape.add(variable, tape.constant(cst));
}

Var kl_to_predicted_from_logits(Tape& tape, Var logits, const Matrix& target,
                                double alpha_offset) {
  Var alpha = tape.exp(logits);
  if (alpha_offset != 0.0) alpha = tape.add_scalar(alpha, alpha_offset);
  Var alpha0 = tape.row_sum(alpha);
  return kl_rows_const_target(tape, target, alpha, alpha0);
}

}  // namespace

Var dpn_loss(Tape& tape, Var logits_id, const std::vector<int>& labels,
             Var logits_ood, double beta_y) {
  if (!(beta_y > 0.0)) throw std::invalid_argument("dpn_loss: beta_y must be > 0");
  const Matrix& lv = tape.value(logits_id);
  Matrix target_id = Matrix::Ones(lv.rows(), lv.cols());
  for (Eigen::Index i = 0; i < lv.rows(); ++i) {
    target_id(i, labels.at(static_cast<std::size_t>(i))) += beta_y;
  }
  Var id_term = tape.mean(kl_to_predicted_from_logits(tape, logits_id, target_id, 0.0));
  const Matrix& ov = tape.value(logits_ood);
  Matrix target_ood = Matrix::Ones(ov.rows(), ov.cols());
  Var ood_term = tape.mean(kl_to_predicted_from_logits(tape, logits_ood, target_ood, 0.0));
  return tape.add(id_term, ood_term);
}

Var epn_kl_term(Tape& tape, Var logits, const std::vector<int>& labels) {
  const Matrix& lv = tape.value(logits);
  const Eigen::Index c = lv.cols();
  Matrix target = Matrix::Ones(lv.rows(), c);
  for (Eigen::Index i = 0; i < lv.rows(); ++i) {
    // Target evidence from detached logits: all classes 1, the label class
    // absorbs the full unnormalized density C + sum exp(f).
    target(i, labels.at(static_cast<std::size_t>(i))) =
        static_cast<double>(c) + lv.row(i).array().exp().sum();
  }
  return tape.mean(kl_to_predicted_from_logits(tape, logits, target, 1.0));
}

Var dirichlet_entropy_term(Tape& tape, Var logits) {
  const Eigen::Index c = tape.value(logits).cols();
  Var alpha = tape.exp(logits);
  Var alpha0 = tape.row_sum(alpha);
  Var log_b = tape.sub(tape.row_sum(tape.lgamma_op(alpha)), tape.lgamma_op(alpha0));
  Var mid = tape.hadamard(tape.add_scalar(alpha0, -static_cast<double>(c)),
                          tape.digamma_op(alpha0));
  Var tail = tape.row_sum(
      tape.hadamard(tape.add_scalar(alpha, -1.0), tape.digamma_op(alpha)));
  return tape.mean(tape.sub(tape.add(log_b, mid), tail));
}

Var oe_loss(Tape& tape, Var logits_ood) {
  const Eigen::Index c = tape.value(logits_ood).cols();
  Var ce_to_uniform = tape.sub(tape.row_logsumexp(logits_ood),
                               tape.scale(tape.row_sum(logits_ood), 1.0 / c));
  return tape.add_scalar(tape.mean(ce_to_uniform), -std::log(static_cast<double>(c)));
}

namespace {

double stable_softplus(double a) {
  if (a > 30.0) return a;
  if (a < -30.0) return std::exp(a);
  return std::log1p(std::exp(a));
}

}  // namespace

Matrix evidential_probs(const Matrix& logits, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  Matrix log_num = logits.unaryExpr(
      [temperature](double f) { return stable_softplus(f / temperature); });
  Matrix probs(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double denom = logsumexp(log_num.row(i).transpose());
    probs.row(i) = (log_num.row(i).array() - denom).exp();
  }
  return probs;
}

double evidential_nll(const Matrix& logits, const std::vector<int>& labels,
                      double temperature) {
  const Matrix probs = evidential_probs(logits, temperature);
  double nll = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    nll -= std::log(std::max(probs(i, labels.at(static_cast<std::size_t>(i))), 1e-300));
  }
  return nll / static_cast<double>(logits.rows());
}

double temperature_fit(const Matrix& logits_val, const std::vector<int>& labels_val) {
  if (logits_val.rows() == 0) throw std::invalid_argument("temperature_fit: empty validation set");
  const double spread = (logits_val.rowwise().maxCoeff() - logits_val.rowwise().minCoeff()).maxCoeff();
  if (spread < 1e-12) {
    std::cerr << "temperature_fit: degenerate logits, keeping T = 1\n";
    return 1.0;
  }
  auto nll = [&](double t) { return evidential_nll(logits_val, labels_val, t); };
  double best_t = 1.0;
  double best = nll(1.0);
  const double lo = std::log(0.05), hi = std::log(50.0);
  const int grid = 120;
  for (int i = 0; i <= grid; ++i) {
    const double t = std::exp(lo + (hi - lo) * i / grid);
    const double v = nll(t);
    if (v < best) { best = v; best_t = t; }
  }
  // Golden-section refinement around the grid minimum, in log space.
  double a = std::log(best_t) - (hi - lo) / grid;
  double b = std::log(best_t) + (hi - lo) / grid;
  const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
  double x1 = b - phi * (b - a), x2 = a + phi * (b - a);
  double f1 = nll(std::exp(x1)), f2 = nll(std::exp(x2));
  for (int it = 0; it < 60; ++it) {
    if (f1 < f2) {
      b = x2; x2 = x1; f2 = f1;
      x1 = b - phi * (b - a); f1 = nll(std::exp(x1));
    } else {
      a = x1; x1 = x2; f1 = f2;
      x2 = a + phi * (b - a); f2 = nll(std::exp(x2));
    }
  }
  const double refined = std::exp(0.5 * (a + b));
  if (nll(refined) < best) return refined;
  return best_t;
}

namespace {

Matrix softmax_rows(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    p.row(i) = softmax(logits.row(i).transpose()).transpose();
  }
  return p;
}

PredictiveStats stats_from_probs(const std::vector<Matrix>& prob_sets) {
  const Eigen::Index n = prob_sets[0].rows(), c = prob_sets[0].cols();
  PredictiveStats out;
  out.mean_probs = Matrix::Zero(n, c);
  for (const Matrix& p : prob_sets) out.mean_probs += p;
  out.mean_probs /= static_cast<double>(prob_sets.size());
  out.var_probs = Matrix::Zero(n, c);
  for (const Matrix& p : prob_sets) {
    out.var_probs += (p - out.mean_probs).array().square().matrix();
  }
  out.var_probs /= static_cast<double>(prob_sets.size());
  out.spread = out.var_probs.rowwise().sum();
  return out;
}

}  // namespace

PredictiveStats ensemble_predict(const std::vector<Network>& members,
                                 const Matrix& x) {
  if (members.empty()) throw std::invalid_argument("ensemble_predict: empty ensemble");
  std::vector<Matrix> probs;
  probs.reserve(members.size());
  for (const Network& m : members) probs.push_back(softmax_rows(m.forward_value(x)));
  return stats_from_probs(probs);
}

PredictiveStats mc_dropout_predict(const Network& net, const Matrix& x,
                                   int t_passes, Rng& rng) {
  if (t_passes < 1) throw std::invalid_argument("mc_dropout_predict: t_passes must be >= 1");
  std::vector<Matrix> probs;
  probs.reserve(static_cast<std::size_t>(t_passes));
  for (int t = 0; t < t_passes; ++t) {
    Tape tape;
    TapeBinding bind = net.forward(tape, x, /*training=*/true, &rng);
    probs.push_back(softmax_rows(tape.value(bind.logits)));
  }
  return stats_from_probs(probs);
}

// --- ModelBundle ---

ModelBundle ModelBundle::create(const ModelConfig& config, Rng& rng) {
  ModelBundle b;
  b.config_ = config;
  if (config.kind == ModelKind::kCouplingFlow) {
    b.flow_ = CouplingFlow::build(config.in_dim, config.flow_depth,
                                  config.flow_width, rng);
    AdamState st;
    st.lr = config.lr;
    st.warmup_steps = config.warmup_steps;
    b.adam_.push_back(st);
    return b;
  }
  double dropout = config.dropout_rate;
  if (config.kind == ModelKind::kMcDropout && dropout == 0.0) dropout = 0.3;
  const int members = config.kind == ModelKind::kEnsemble ? config.ensemble_size : 1;
  if (members < 1) throw std::invalid_argument("ensemble_size must be >= 1");
  for (int m = 0; m < members; ++m) {
    b.members_.push_back(Network::mlp(config.in_dim, config.hidden, config.out_dim,
                                      config.activation, config.final_mode,
                                      dropout, rng));
    AdamState st;
    st.lr = config.lr;
    st.warmup_steps = config.warmup_steps;
    b.adam_.push_back(st);
  }
  if (config.kind == ModelKind::kJem || config.kind == ModelKind::kEpnM) {
    b.buffer_.emplace(config.buffer_capacity, config.in_dim, config.buffer_reinit);
  }
  return b;
}

void ModelBundle::fit_buffer(const Matrix& train_features) {
  if (buffer_) buffer_->fit_box(train_features);
}

const CouplingFlow& ModelBundle::flow() const {
  if (!flow_) throw std::runtime_error("model has no flow");
  return *flow_;
}

CouplingFlow& ModelBundle::flow() {
  if (!flow_) throw std::runtime_error("model has no flow");
  return *flow_;
}

bool ModelBundle::has_energy() const { return !members_.empty(); }

EnergyFn ModelBundle::energy_fn() const {
  if (members_.empty()) throw std::runtime_error("model has no energy network");
  const EnergyMode mode =
      members_[0].output_dim() == 1 ? EnergyMode::kScalar : EnergyMode::kMarginal;
  return EnergyFn(&members_[0], mode);
}

namespace {

double grad_norm_of(const std::vector<Matrix>& grads) {
  double sq = 0.0;
  for (const Matrix& g : grads) sq += g.squaredNorm();
  return std::sqrt(sq);
}

void require_ood(const Matrix& ood, const char* kind) {
  if (ood.rows() == 0) {
    throw std::invalid_argument(std::string(kind) + " training requires an OOD batch");
  }
}

}  // namespace

TrainStepStats ModelBundle::train_step(const Matrix& x, const std::vector<int>& labels,
                                       const Matrix& ood, Rng& rng) {
  TrainStepStats stats;
  ++step_;

  if (config_.kind == ModelKind::kCouplingFlow) {
    Tape tape;
    LossGraph g = flow_->nll_loss(tape, x);
    tape.backward(g.loss);
    std::vector<Matrix> grads = flow_->gradients(tape, g);
    adam_step(flow_->parameters(), grads, adam_[0]);
    stats.loss = stats.density_term = tape.value(g.loss)(0, 0);
    stats.grad_norm = grad_norm_of(grads);
    return stats;
  }

  if (config_.kind == ModelKind::kEnsemble) {
    double total = 0.0, gnorm = 0.0;
    for (std::size_t m = 0; m < members_.size(); ++m) {
      Tape tape;
      TapeBinding bind = members_[m].forward(tape, x);
      Var loss = ce_loss(tape, bind.logits, labels);
      tape.backward(loss);
      std::vector<Matrix> grads = members_[m].gradients(tape, bind);
      adam_step(members_[m].parameters(), grads, adam_[m]);
      total += tape.value(loss)(0, 0);
      gnorm += grad_norm_of(grads);
    }
    stats.loss = stats.class_term = total / static_cast<double>(members_.size());
    stats.grad_norm = gnorm / static_cast<double>(members_.size());
    return stats;
  }

  Network& net = members_[0];
  Tape tape;
  Var loss;
  std::vector<TapeBinding> binds;

  switch (config_.kind) {
    case ModelKind::kCe: {
      TapeBinding bind = net.forward(tape, x);
      binds.push_back(bind);
      loss = ce_loss(tape, bind.logits, labels);
      stats.class_term = tape.value(loss)(0, 0);
      break;
    }
    case ModelKind::kMcDropout: {
      TapeBinding bind = net.forward(tape, x, /*training=*/true, &rng);
      binds.push_back(bind);
      loss = ce_loss(tape, bind.logits, labels);
      stats.class_term = tape.value(loss)(0, 0);
      break;
    }
    case ModelKind::kDpn: {
      require_ood(ood, "dpn");
      TapeBinding bid = net.forward(tape, x);
      TapeBinding bood = net.forward(tape, ood);
      binds.push_back(bid);
      binds.push_back(bood);
      loss = dpn_loss(tape, bid.logits, labels, bood.logits, config_.weights.dpn_beta_y);
      stats.class_term = tape.value(loss)(0, 0);
      break;
    }
    case ModelKind::kOe: {
      require_ood(ood, "oe");
      TapeBinding bid = net.forward(tape, x);
      TapeBinding bood = net.forward(tape, ood);
      binds.push_back(bid);
      binds.push_back(bood);
      Var ce = ce_loss(tape, bid.logits, labels);
      Var oe = oe_loss(tape, bood.logits);
      stats.class_term = tape.value(ce)(0, 0);
      stats.reg_term = tape.value(oe)(0, 0);
      loss = tape.add(ce, tape.scale(oe, config_.weights.lambda_oe));
      break;
    }
    case ModelKind::kEnergyOod: {
      require_ood(ood, "energy_ood");
      TapeBinding bid = net.forward(tape, x);
      binds.push_back(bid);
      Var ce = ce_loss(tape, bid.logits, labels);
      EnergyFn e(&net, EnergyMode::kMarginal);
      LossGraph margin = energy_margin_loss(tape, e, x, ood, -23.0, -5.0);
      for (const TapeBinding& b : margin.binds) binds.push_back(b);
      stats.class_term = tape.value(ce)(0, 0);
      stats.density_term = tape.value(margin.loss)(0, 0);
      loss = tape.add(ce, tape.scale(margin.loss, config_.weights.lambda_margin));
      break;
    }
    case ModelKind::kJem: {
      EnergyFn e(&net, EnergyMode::kMarginal);
      LossGraph cd = cd_loss(tape, e, x, *buffer_, config_.sgld,
                             config_.data_noise_var, rng);
      for (const TapeBinding& b : cd.binds) binds.push_back(b);
      TapeBinding bind = net.forward(tape, x);
      binds.push_back(bind);
      Var ce = ce_loss(tape, bind.logits, labels);
      stats.density_term = tape.value(cd.loss)(0, 0);
      stats.class_term = tape.value(ce)(0, 0);
      loss = tape.add(cd.loss, tape.scale(ce, config_.weights.gamma));
      break;
    }
    case ModelKind::kEpnM: {
      EnergyFn e(&net, EnergyMode::kMarginal);
      Var acc;
      if (config_.weights.gamma > 0.0) {
        LossGraph cd = cd_loss(tape, e, x, *buffer_, config_.sgld,
                               config_.data_noise_var, rng);
        for (const TapeBinding& b : cd.binds) binds.push_back(b);
        stats.density_term = tape.value(cd.loss)(0, 0);
        acc = tape.scale(cd.loss, config_.weights.gamma);
      }
      TapeBinding bind;
      if (config_.weights.lambda_kl > 0.0 || config_.weights.lambda_ent > 0.0) {
        bind = net.forward(tape, x);
        binds.push_back(bind);
      }
      if (config_.weights.lambda_kl > 0.0) {
        Var kl = epn_kl_term(tape, bind.logits, labels);
        stats.class_term = tape.value(kl)(0, 0);
        Var term = tape.scale(kl, config_.weights.lambda_kl);
        acc = acc.valid() ? tape.add(acc, term) : term;
      }
      if (config_.weights.lambda_ent > 0.0) {
        Var ent = dirichlet_entropy_term(tape, bind.logits);
        stats.reg_term = tape.value(ent)(0, 0);
        Var term = tape.scale(ent, config_.weights.lambda_ent);
        acc = acc.valid() ? tape.add(acc, term) : term;
      }
      if (!acc.valid()) throw std::runtime_error("epn_m: all loss terms disabled");
      loss = acc;
      break;
    }
    default:
      throw std::logic_error("train_step: unhandled kind");
  }

  tape.backward(loss);
  LossGraph g;
  g.loss = loss;
  g.binds = binds;
  std::vector<Matrix> grads = loss_gradients(tape, net, g);
  adam_step(net.parameters(), grads, adam_[0]);
  stats.loss = tape.value(loss)(0, 0);
  stats.grad_norm = grad_norm_of(grads);
  if (!std::isfinite(stats.loss)) throw std::runtime_error("train_step: non-finite loss");
  return stats;
}

Matrix ModelBundle::predict_probs(const Matrix& x) const {
  if (config_.kind == ModelKind::kEnsemble) {
    return ensemble_predict(members_, x).mean_probs;
  }
  if (members_.empty()) throw std::runtime_error("predict_probs: flow-only model");
  return softmax_rows(members_[0].forward_value(x));
}

Matrix ModelBundle::predict_evidential(const Matrix& x, double temperature) const {
  if (members_.empty()) throw std::runtime_error("predict_evidential: flow-only model");
  return evidential_probs(members_[0].forward_value(x), temperature);
}

void ModelBundle::save(std::ostream& os) const {
  os << "epn-bundle v1\n";
  os << "kind " << model_kind_name(config_.kind) << '\n';
  os << "members " << members_.size() << '\n';
  for (const Network& m : members_) m.save(os);
  os << "flow " << (flow_ ? 1 : 0) << '\n';
  if (flow_) flow_->save(os);
}

ModelBundle ModelBundle::load(std::istream& is) {
  std::string magic, version, key, val;
  is >> magic >> version;
  if (magic != "epn-bundle" || version != "v1") {
    throw std::runtime_error("checkpoint: unrecognized bundle header");
  }
  is >> key >> val;
  if (key != "kind") throw std::runtime_error("checkpoint: expected kind");
  ModelBundle b;
  b.config_.kind = model_kind_from_name(val);
  std::size_t members = 0;
  is >> key >> members;
  if (key != "members") throw std::runtime_error("checkpoint: expected members");
  for (std::size_t m = 0; m < members; ++m) b.members_.push_back(Network::load(is));
  int has_flow = 0;
  is >> key >> has_flow;
  if (key != "flow") throw std::runtime_error("checkpoint: expected flow");
  if (has_flow) b.flow_ = CouplingFlow::load(is);
  if (!b.members_.empty()) {
    b.config_.in_dim = b.members_[0].input_dim();
    b.config_.out_dim = b.members_[0].output_dim();
  } else if (b.flow_) {
    b.config_.in_dim = b.flow_->dim();
  }
  return b;
}

}  // namespace epn
