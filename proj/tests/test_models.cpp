#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "epn/models.hpp"
#include "test_util.hpp"

using namespace epn;
using test::max_grad_rel_err;
using test::random_matrix;

namespace {

std::vector<int> cyclic_labels(int n, int c) {
  std::vector<int> y(n);
  for (int i = 0; i < n; ++i) y[i] = i % c;
  return y;
}

double mean_kl_to_predicted(const Matrix& target, const Matrix& logits,
                            double alpha_offset) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const Vector alpha =
        (logits.row(i).transpose().array().exp() + alpha_offset).matrix();
    total += kl_dirichlet(DirichletParams(target.row(i).transpose()),
                          DirichletParams(alpha));
  }
  return total / static_cast<double>(logits.rows());
}

}  // namespace

TEST_CASE("model kind names round trip") {
  for (ModelKind k : {ModelKind::kCe, ModelKind::kDpn, ModelKind::kJem,
                      ModelKind::kEpnM, ModelKind::kEnergyOod, ModelKind::kOe,
                      ModelKind::kEnsemble, ModelKind::kMcDropout,
                      ModelKind::kCouplingFlow}) {
    CHECK(model_kind_from_name(model_kind_name(k)) == k);
  }
  CHECK_THROWS(model_kind_from_name("bogus"));
}

TEST_CASE("cross entropy matches the direct formula and finite differences") {
  Rng rng(60);
  Network net = Network::mlp(2, {6}, 3, Activation::kRelu, FinalLayerMode::kFree, 0.0, rng);
  const Matrix x = random_matrix(5, 2, rng);
  const auto labels = cyclic_labels(5, 3);

  const Matrix logits = net.forward_value(x);
  double expect = 0.0;
  for (int i = 0; i < 5; ++i) {
    expect += logsumexp(logits.row(i).transpose()) - logits(i, labels[i]);
  }
  expect /= 5.0;

  Tape tape;
  TapeBinding bind = net.forward(tape, x);
  Var loss = ce_loss(tape, bind.logits, labels);
  CHECK(tape.value(loss)(0, 0) == doctest::Approx(expect).epsilon(1e-12));

  CHECK_THROWS(ce_loss(tape, bind.logits, cyclic_labels(4, 3)));
  CHECK_THROWS(ce_loss(tape, bind.logits, {0, 1, 2, 3, 0}));

  auto value = [&]() {
    Tape t;
    TapeBinding b = net.forward(t, x);
    return t.value(ce_loss(t, b.logits, labels))(0, 0);
  };
  tape.backward(loss);
  CHECK(max_grad_rel_err(net.parameters(), net.gradients(tape, bind), value) < 1e-4);
}

TEST_CASE("evidential target loss matches the Dirichlet KL composition") {
  Rng rng(61);
  Network net = Network::mlp(2, {8}, 4, Activation::kRelu, FinalLayerMode::kFree, 0.0, rng);
  const Matrix x = random_matrix(6, 2, rng);
  const auto labels = cyclic_labels(6, 4);
  const Matrix logits = net.forward_value(x);

  // Independent oracle through the closed-form Dirichlet KL.
  Matrix target = Matrix::Ones(6, 4);
  for (int i = 0; i < 6; ++i) {
    target(i, labels[i]) = 4.0 + logits.row(i).array().exp().sum();
  }
  const double expect = mean_kl_to_predicted(target, logits, 1.0);

  Tape tape;
  TapeBinding bind = net.forward(tape, x);
  Var loss = epn_kl_term(tape, bind.logits, labels);
  CHECK(tape.value(loss)(0, 0) == doctest::Approx(expect).epsilon(1e-9));

  // The target is built from detached logits, so the finite-difference
  // reference must hold it fixed at the base point.
  auto value = [&]() {
    return mean_kl_to_predicted(target, net.forward_value(x), 1.0);
  };
  tape.backward(loss);
  CHECK(max_grad_rel_err(net.parameters(), net.gradients(tape, bind), value) < 1e-4);
}

TEST_CASE("dpn loss composes sharp and flat Dirichlet targets") {
  Rng rng(62);
  Network net = Network::mlp(2, {8}, 3, Activation::kRelu, FinalLayerMode::kFree, 0.0, rng);
  const Matrix x = random_matrix(4, 2, rng);
  const Matrix ood = random_matrix(3, 2, rng);
  const auto labels = cyclic_labels(4, 3);

  const Matrix lid = net.forward_value(x);
  const Matrix lood = net.forward_value(ood);
  Matrix target_id = Matrix::Ones(4, 3);
  for (int i = 0; i < 4; ++i) target_id(i, labels[i]) += 100.0;
  const double expect = mean_kl_to_predicted(target_id, lid, 0.0) +
                        mean_kl_to_predicted(Matrix::Ones(3, 3), lood, 0.0);

  Tape tape;
  TapeBinding bid = net.forward(tape, x);
  TapeBinding bood = net.forward(tape, ood);
  Var loss = dpn_loss(tape, bid.logits, labels, bood.logits, 100.0);
  CHECK(tape.value(loss)(0, 0) == doctest::Approx(expect).epsilon(1e-9));
  CHECK_THROWS(dpn_loss(tape, bid.logits, labels, bood.logits, -1.0));

  auto value = [&]() {
    return mean_kl_to_predicted(target_id, net.forward_value(x), 0.0) +
           mean_kl_to_predicted(Matrix::Ones(3, 3), net.forward_value(ood), 0.0);
  };
  tape.backward(loss);
  LossGraph g{loss, {bid, bood}};
  CHECK(max_grad_rel_err(net.parameters(), loss_gradients(tape, net, g), value) < 1e-4);
}

TEST_CASE("dirichlet entropy term matches the closed form per row") {
  Rng rng(63);
  Network net = Network::mlp(2, {8}, 3, Activation::kRelu, FinalLayerMode::kFree, 0.0, rng);
  const Matrix x = random_matrix(5, 2, rng);
  const Matrix logits = net.forward_value(x);
  double expect = 0.0;
  for (int i = 0; i < 5; ++i) {
    expect += differential_entropy(
        DirichletParams(logits.row(i).transpose().array().exp().matrix()));
  }
  expect /= 5.0;

  Tape tape;
  TapeBinding bind = net.forward(tape, x);
  Var loss = dirichlet_entropy_term(tape, bind.logits);
  CHECK(tape.value(loss)(0, 0) == doctest::Approx(expect).epsilon(1e-9));

  auto value = [&]() {
    Tape t;
    TapeBinding b = net.forward(t, x);
    return t.value(dirichlet_entropy_term(t, b.logits))(0, 0);
  };
  tape.backward(loss);
  CHECK(max_grad_rel_err(net.parameters(), net.gradients(tape, bind), value) < 1e-4);
}

TEST_CASE("outlier exposure is zero at uniform and positive elsewhere") {
  Tape t1;
  Var uniform = t1.constant(Matrix::Constant(3, 4, 1.7));
  // Constant rows are uniform after softmax regardless of the constant.
  CHECK(t1.value(oe_loss(t1, uniform))(0, 0) == doctest::Approx(0.0).epsilon(1e-12));

  Rng rng(64);
  Network net = Network::mlp(2, {6}, 3, Activation::kRelu, FinalLayerMode::kFree, 0.0, rng);
  const Matrix x = random_matrix(5, 2, rng);
  const Matrix logits = net.forward_value(x);
  double expect = 0.0;
  for (int i = 0; i < 5; ++i) {
    expect += logsumexp(logits.row(i).transpose()) - logits.row(i).mean();
  }
  expect = expect / 5.0 - std::log(3.0);
  CHECK(expect > 0.0);

  Tape tape;
  TapeBinding bind = net.forward(tape, x);
  Var loss = oe_loss(tape, bind.logits);
  CHECK(tape.value(loss)(0, 0) == doctest::Approx(expect).epsilon(1e-12));

  auto value = [&]() {
    Tape t;
    TapeBinding b = net.forward(t, x);
    return t.value(oe_loss(t, b.logits))(0, 0);
  };
  tape.backward(loss);
  CHECK(max_grad_rel_err(net.parameters(), net.gradients(tape, bind), value) < 1e-4);
}

TEST_CASE("evidential probabilities are stable and correctly shaped") {
  Matrix logits(2, 3);
  logits << 0.0, 1.0, -1.0, 1000.0, 999.0, -1000.0;
  const Matrix p = evidential_probs(logits, 1.0);
  for (int i = 0; i < 2; ++i) CHECK(p.row(i).sum() == doctest::Approx(1.0));
  // Moderate row: direct (1 + exp(f)) normalization.
  Vector num(3);
  num << 2.0, 1.0 + std::exp(1.0), 1.0 + std::exp(-1.0);
  for (int j = 0; j < 3; ++j) {
    CHECK(p(0, j) == doctest::Approx(num[j] / num.sum()).epsilon(1e-12));
  }
  // Huge logits must not overflow; the largest class dominates.
  CHECK(p.row(1).allFinite());
  CHECK(p(1, 0) > 0.7);
  CHECK(p(1, 2) < 1e-100);

  // Temperature divides the logits before the softplus.
  const Matrix warm = evidential_probs(logits, 4.0);
  Matrix quarter = logits / 4.0;
  CHECK((warm - evidential_probs(quarter, 1.0)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK_THROWS(evidential_probs(logits, 0.0));
}

TEST_CASE("evidential nll matches the direct computation") {
  Matrix logits(2, 2);
  logits << 2.0, 0.0, -1.0, 3.0;
  const Matrix p = evidential_probs(logits, 1.0);
  const double expect = -(std::log(p(0, 0)) + std::log(p(1, 1))) / 2.0;
  CHECK(evidential_nll(logits, {0, 1}, 1.0) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("temperature fitting recovers a known miscalibration") {
  Rng rng(65);
  const int n = 4000, c = 3;
  Matrix base = random_matrix(n, c, rng, 2.0);
  // Labels drawn from the evidential predictive at T = 1, so `base` is
  // calibrated by construction.
  std::vector<int> labels(n);
  const Matrix p = evidential_probs(base, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < n; ++i) {
    double r = u(rng), acc = 0.0;
    labels[i] = c - 1;
    for (int j = 0; j < c; ++j) {
      acc += p(i, j);
      if (r <= acc) { labels[i] = j; break; }
    }
  }

  const double t_cal = temperature_fit(base, labels);
  CHECK(evidential_nll(base, labels, t_cal) <= evidential_nll(base, labels, 1.0) + 1e-12);
  CHECK(t_cal == doctest::Approx(1.0).epsilon(0.25));

  // Overconfident logits (x10) should be cooled by roughly that factor.
  const double t_hot = temperature_fit(Matrix(10.0 * base), labels);
  CHECK(t_hot == doctest::Approx(10.0).epsilon(0.2));
  CHECK(evidential_nll(10.0 * base, labels, t_hot) <=
        evidential_nll(10.0 * base, labels, 1.0) + 1e-12);

  // Degenerate logits fall back to T = 1.
  CHECK(temperature_fit(Matrix::Constant(10, 3, 0.4), cyclic_labels(10, 3)) == 1.0);
}

TEST_CASE("ensemble statistics") {
  Rng rng(66);
  Network net = Network::mlp(2, {6}, 3, Activation::kRelu, FinalLayerMode::kFree, 0.0, rng);
  const Matrix x = random_matrix(4, 2, rng);
  // Identical members agree exactly: zero variance and spread.
  PredictiveStats same = ensemble_predict({net, net, net}, x);
  CHECK(same.var_probs.cwiseAbs().maxCoeff() < 1e-30);
  CHECK(same.spread.cwiseAbs().maxCoeff() < 1e-30);
  const Matrix probs = same.mean_probs;
  for (int i = 0; i < 4; ++i) CHECK(probs.row(i).sum() == doctest::Approx(1.0));

  // Two disagreeing members produce nonzero spread.
  Network other = Network::mlp(2, {6}, 3, Activation::kRelu, FinalLayerMode::kFree, 0.0, rng);
  PredictiveStats mixed = ensemble_predict({net, other}, x);
  CHECK(mixed.spread.maxCoeff() > 0.0);
  CHECK_THROWS(ensemble_predict({}, x));
}

TEST_CASE("mc dropout statistics") {
  Rng rng(67);
  Network plain = Network::mlp(2, {6}, 3, Activation::kRelu, FinalLayerMode::kFree, 0.0, rng);
  const Matrix x = random_matrix(3, 2, rng);
  // No dropout: every pass is deterministic.
  PredictiveStats det = mc_dropout_predict(plain, x, 8, rng);
  CHECK(det.var_probs.cwiseAbs().maxCoeff() < 1e-30);

  Network drop = Network::mlp(2, {16, 16}, 3, Activation::kRelu, FinalLayerMode::kFree, 0.4, rng);
  PredictiveStats sto = mc_dropout_predict(drop, x, 16, rng);
  CHECK(sto.spread.maxCoeff() > 0.0);
  for (int i = 0; i < 3; ++i) CHECK(sto.mean_probs.row(i).sum() == doctest::Approx(1.0));
  CHECK_THROWS(mc_dropout_predict(plain, x, 0, rng));
}

namespace {

CouplingFlow perturbed_flow(int dim, Rng& rng) {
  CouplingFlow flow = CouplingFlow::build(dim, 6, 16, rng);
  std::normal_distribution<double> n(0.0, 0.3);
  for (Matrix* p : flow.parameters()) {
    for (Eigen::Index i = 0; i < p->rows(); ++i) {
      for (Eigen::Index j = 0; j < p->cols(); ++j) (*p)(i, j) += n(rng);
    }
  }
  return flow;
}

}  // namespace

TEST_CASE("coupling flow starts as the identity map") {
  Rng rng(68);
  CouplingFlow flow = CouplingFlow::build(2, 8, 16, rng);
  const Matrix z = random_matrix(10, 2, rng);
  CHECK((flow.forward(z) - z).cwiseAbs().maxCoeff() < 1e-12);
  Vector ld;
  CHECK((flow.inverse(z, &ld) - z).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(ld.cwiseAbs().maxCoeff() < 1e-12);
  // Identity flow scores with the standard normal density.
  const Vector lp = flow.log_prob(z);
  for (int i = 0; i < 10; ++i) {
    const double expect = -0.5 * z.row(i).squaredNorm() - std::log(2.0 * M_PI);
    CHECK(lp[i] == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("coupling flow inverts its forward map") {
  Rng rng(69);
  for (int dim : {2, 3, 5}) {
    CouplingFlow flow = perturbed_flow(dim, rng);
    const Matrix z = random_matrix(20, dim, rng);
    const Matrix x = flow.forward(z);
    CHECK((x - z).cwiseAbs().maxCoeff() > 1e-3);  // genuinely non-identity
    CHECK((flow.inverse(x) - z).cwiseAbs().maxCoeff() < 1e-8);
    const Matrix y = random_matrix(20, dim, rng);
    CHECK((flow.forward(flow.inverse(y)) - y).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("coupling flow log-determinant matches a numeric Jacobian") {
  Rng rng(70);
  CouplingFlow flow = perturbed_flow(2, rng);
  const double h = 1e-6;
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix x = random_matrix(1, 2, rng);
    Vector ld;
    flow.inverse(x, &ld);
    Eigen::Matrix2d jac;
    for (int j = 0; j < 2; ++j) {
      Matrix up = x, down = x;
      up(0, j) += h;
      down(0, j) -= h;
      jac.col(j) = (flow.inverse(up) - flow.inverse(down)).row(0).transpose() / (2.0 * h);
    }
    // Finite differences can straddle conditioner ReLU kinks, so the
    // comparison is only moderately tight.
    CHECK(ld[0] == doctest::Approx(std::log(std::abs(jac.determinant()))).epsilon(2e-3));
  }
}

TEST_CASE("flow nll equals the negated mean log-probability") {
  Rng rng(71);
  CouplingFlow flow = perturbed_flow(2, rng);
  const Matrix batch = random_matrix(12, 2, rng);
  Tape tape;
  LossGraph g = flow.nll_loss(tape, batch);
  CHECK(tape.value(g.loss)(0, 0) ==
        doctest::Approx(-flow.log_prob(batch).mean()).epsilon(1e-10));

  auto value = [&]() { return -flow.log_prob(batch).mean(); };
  tape.backward(g.loss);
  CHECK(max_grad_rel_err(flow.parameters(), flow.gradients(tape, g), value, 1e-5) < 1e-4);
}

TEST_CASE("flow training reduces the nll of a shifted gaussian") {
  Rng rng(72);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix data(512, 2);
  for (int i = 0; i < 512; ++i) {
    data(i, 0) = 3.0 + 0.5 * n(rng);
    data(i, 1) = -1.0 + 0.5 * n(rng);
  }
  ModelConfig cfg;
  cfg.kind = ModelKind::kCouplingFlow;
  cfg.in_dim = 2;
  cfg.flow_depth = 4;
  cfg.flow_width = 16;
  cfg.lr = 1e-2;
  cfg.warmup_steps = 0;
  ModelBundle bundle = ModelBundle::create(cfg, rng);
  const double before = -bundle.flow().log_prob(data).mean();
  for (int step = 0; step < 150; ++step) bundle.train_step(data, {}, Matrix(), rng);
  const double after = -bundle.flow().log_prob(data).mean();
  CHECK(after < before - 1.0);
}

TEST_CASE("bundles train a step for every kind") {
  Rng rng(73);
  const Matrix x = random_matrix(16, 2, rng);
  const Matrix ood = random_matrix(16, 2, rng, 3.0);
  const auto labels = cyclic_labels(16, 3);
  for (ModelKind kind : {ModelKind::kCe, ModelKind::kDpn, ModelKind::kJem,
                         ModelKind::kEpnM, ModelKind::kEnergyOod, ModelKind::kOe,
                         ModelKind::kEnsemble, ModelKind::kMcDropout}) {
    ModelConfig cfg;
    cfg.kind = kind;
    cfg.in_dim = 2;
    cfg.out_dim = 3;
    cfg.hidden = {16, 16};
    cfg.warmup_steps = 0;
    cfg.sgld.steps = 2;
    cfg.ensemble_size = 2;
    ModelBundle bundle = ModelBundle::create(cfg, rng);
    bundle.fit_buffer(x);
    TrainStepStats stats = bundle.train_step(x, labels, ood, rng);
    CHECK(std::isfinite(stats.loss));
    CHECK(stats.grad_norm > 0.0);
    const Matrix probs = bundle.predict_probs(x);
    CHECK(probs.rows() == 16);
    for (int i = 0; i < 16; ++i) CHECK(probs.row(i).sum() == doctest::Approx(1.0));
  }
}

TEST_CASE("outlier-dependent kinds demand an ood batch") {
  Rng rng(74);
  const Matrix x = random_matrix(8, 2, rng);
  const auto labels = cyclic_labels(8, 3);
  for (ModelKind kind : {ModelKind::kDpn, ModelKind::kOe, ModelKind::kEnergyOod}) {
    ModelConfig cfg;
    cfg.kind = kind;
    cfg.hidden = {8};
    cfg.warmup_steps = 0;
    ModelBundle bundle = ModelBundle::create(cfg, rng);
    CHECK_THROWS(bundle.train_step(x, labels, Matrix(), rng));
  }
}

TEST_CASE("training steps lower the ce loss") {
  Rng rng(75);
  Matrix x(20, 2);
  std::vector<int> labels(20);
  std::normal_distribution<double> n(0.0, 0.3);
  for (int i = 0; i < 20; ++i) {
    const int y = i % 2;
    x(i, 0) = (y == 0 ? -1.5 : 1.5) + n(rng);
    x(i, 1) = n(rng);
    labels[i] = y;
  }
  ModelConfig cfg;
  cfg.kind = ModelKind::kCe;
  cfg.out_dim = 2;
  cfg.hidden = {16};
  cfg.lr = 5e-2;
  cfg.warmup_steps = 0;
  ModelBundle bundle = ModelBundle::create(cfg, rng);
  const double first = bundle.train_step(x, labels, Matrix(), rng).loss;
  double last = first;
  for (int s = 0; s < 60; ++s) last = bundle.train_step(x, labels, Matrix(), rng).loss;
  CHECK(last < 0.2 * first + 1e-3);
}

TEST_CASE("bundle checkpoints round trip") {
  Rng rng(76);
  const Matrix x = random_matrix(6, 2, rng);

  ModelConfig cfg;
  cfg.kind = ModelKind::kEnsemble;
  cfg.hidden = {8};
  cfg.ensemble_size = 3;
  cfg.warmup_steps = 0;
  ModelBundle bundle = ModelBundle::create(cfg, rng);
  std::stringstream ss;
  bundle.save(ss);
  ModelBundle loaded = ModelBundle::load(ss);
  CHECK(loaded.kind() == ModelKind::kEnsemble);
  CHECK(loaded.members().size() == 3);
  CHECK((loaded.predict_probs(x) - bundle.predict_probs(x)).cwiseAbs().maxCoeff() == 0.0);

  ModelConfig fcfg;
  fcfg.kind = ModelKind::kCouplingFlow;
  fcfg.flow_depth = 4;
  fcfg.flow_width = 8;
  ModelBundle fbundle = ModelBundle::create(fcfg, rng);
  std::stringstream fs;
  fbundle.save(fs);
  ModelBundle floaded = ModelBundle::load(fs);
  CHECK(floaded.has_flow());
  CHECK((floaded.flow().log_prob(x) - fbundle.flow().log_prob(x)).cwiseAbs().maxCoeff() == 0.0);

  std::stringstream bad("nonsense v9");
  CHECK_THROWS(ModelBundle::load(bad));
}

TEST_CASE("energy adapter selection follows the head width") {
  Rng rng(77);
  ModelConfig cfg;
  cfg.kind = ModelKind::kCe;
  cfg.out_dim = 3;
  cfg.hidden = {8};
  ModelBundle multi = ModelBundle::create(cfg, rng);
  CHECK(multi.energy_fn().mode() == EnergyMode::kMarginal);
  cfg.out_dim = 1;
  ModelBundle single = ModelBundle::create(cfg, rng);
  CHECK(single.energy_fn().mode() == EnergyMode::kScalar);
}
