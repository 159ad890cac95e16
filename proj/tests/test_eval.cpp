#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "epn/attacks.hpp"
#include "epn/metrics.hpp"
#include "test_util.hpp"

using namespace epn;
using test::random_matrix;

namespace {

/// Reference average precision by explicit threshold sweep: for every
/// distinct score value classify `score >= t` as positive, then integrate
/// precision over recall steps. Quadratic, but independent of the
/// production implementation.
double auc_pr_brute(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::set<double, std::greater<double>> thresholds(scores.begin(), scores.end());
  double total_pos = 0.0;
  for (int y : labels) total_pos += y;
  double ap = 0.0, prev_recall = 0.0;
  for (double t : thresholds) {
    double tp = 0.0, fp = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i] >= t) (labels[i] == 1 ? tp : fp) += 1.0;
    }
    const double recall = tp / total_pos;
    if (recall > prev_recall) {
      ap += (recall - prev_recall) * (tp / (tp + fp));
      prev_recall = recall;
    }
  }
  return ap;
}

ModelBundle make_bundle(ModelKind kind, Rng& rng, int out_dim = 3) {
  ModelConfig cfg;
  cfg.kind = kind;
  cfg.in_dim = 2;
  cfg.out_dim = out_dim;
  cfg.hidden = {8};
  cfg.ensemble_size = 3;
  return ModelBundle::create(cfg, rng);
}

}  // namespace

TEST_CASE("average precision on worked examples") {
  // Ranked 1,0,1,0: AP = 1 * 0.5 + (2/3) * 0.5.
  CHECK(auc_pr({0.9, 0.8, 0.7, 0.6}, {1, 0, 1, 0}) ==
        doctest::Approx(0.5 + 1.0 / 3.0).epsilon(1e-12));
  // Perfect separation.
  CHECK(auc_pr({3.0, 2.0, 1.0, 0.5}, {1, 1, 0, 0}) == doctest::Approx(1.0));
  // Both positives rank below both negatives: 1/3 * 0.5 + 1/2 * 0.5.
  CHECK(auc_pr({3.0, 2.0, 1.0, 0.5}, {0, 0, 1, 1}) == doctest::Approx(5.0 / 12.0));
  // All scores tied: one group, precision equals prevalence.
  CHECK(auc_pr({1.0, 1.0, 1.0, 1.0}, {1, 0, 0, 0}) == doctest::Approx(0.25));

  CHECK_THROWS(auc_pr({1.0, 2.0}, {1, 1}));
  CHECK_THROWS(auc_pr({1.0, 2.0}, {0, 0}));
  CHECK_THROWS(auc_pr({1.0, 2.0}, {1, 2}));
  CHECK_THROWS(auc_pr({1.0}, {1, 0}));
  CHECK_THROWS(auc_pr({}, {}));
}

TEST_CASE("average precision agrees with the threshold-sweep reference") {
  Rng rng(80);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::bernoulli_distribution coin(0.4);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 5 + trial % 40;
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    int pos = 0;
    for (int i = 0; i < n; ++i) {
      // Coarse quantization forces frequent score ties.
      scores[i] = std::round(u(rng) * 8.0) / 8.0;
      labels[i] = coin(rng) ? 1 : 0;
      pos += labels[i];
    }
    if (pos == 0 || pos == n) { --trial; continue; }
    CHECK(auc_pr(scores, labels) ==
          doctest::Approx(auc_pr_brute(scores, labels)).epsilon(1e-12));
  }
}

TEST_CASE("average precision properties") {
  Rng rng(81);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int n = 10000;
  std::vector<double> scores(n);
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) {
    scores[i] = u(rng);
    labels[i] = i % 2;
  }
  // Random scores: AP concentrates at the positive prevalence.
  CHECK(auc_pr(scores, labels) == doctest::Approx(0.5).epsilon(0.04));

  // Invariance under strictly increasing transforms.
  std::vector<double> warped(n);
  for (int i = 0; i < n; ++i) warped[i] = std::exp(3.0 * scores[i]) - 7.0;
  CHECK(auc_pr(warped, labels) == doctest::Approx(auc_pr(scores, labels)).epsilon(1e-12));
}

TEST_CASE("calibration curve and ece on a worked example") {
  const std::vector<double> conf = {0.9, 0.8, 0.55, 0.2};
  const std::vector<int> correct = {1, 0, 1, 0};
  const auto bins = calibration_curve(conf, correct, 2);
  REQUIRE(bins.size() == 2);
  CHECK(bins[0].count == 1);
  CHECK(bins[0].mean_confidence == doctest::Approx(0.2));
  CHECK(bins[0].accuracy == doctest::Approx(0.0));
  CHECK(bins[1].count == 3);
  CHECK(bins[1].mean_confidence == doctest::Approx(0.75));
  CHECK(bins[1].accuracy == doctest::Approx(2.0 / 3.0));

  const double expect = 0.25 * 0.2 + 0.75 * std::abs(0.75 - 2.0 / 3.0);
  CHECK(ece(conf, correct, 2) == doctest::Approx(expect).epsilon(1e-12));

  // Empty bins are NaN in the curve and contribute nothing to the ece.
  const auto sparse = calibration_curve({0.95, 0.9}, {1, 1}, 10);
  CHECK(std::isnan(sparse[0].mean_confidence));
  CHECK(std::isnan(sparse[0].accuracy));
  CHECK(sparse[9].count == 2);
  CHECK(ece({0.95, 0.9}, {1, 1}, 10) == doctest::Approx(std::abs(0.925 - 1.0)));

  CHECK_THROWS(calibration_curve({0.5}, {1, 0}, 2));
  CHECK_THROWS(calibration_curve({1.5}, {1}, 2));
  CHECK_THROWS(calibration_curve({0.5}, {1}, 0));

  // Perfectly calibrated bins give zero ece.
  CHECK(ece({0.75, 0.75, 0.75, 0.75}, {1, 1, 1, 0}, 1) == doctest::Approx(0.0));
}

TEST_CASE("threshold classifier splits on strict comparison") {
  const auto pred = ood_threshold_classifier({0.1, 0.5, 0.9}, 0.5);
  CHECK(pred == std::vector<int>({0, 0, 1}));
}

TEST_CASE("score names round trip") {
  for (ScoreName s : {ScoreName::kMsp, ScoreName::kPredEntropy, ScoreName::kDiffEntropy,
                      ScoreName::kEnergy, ScoreName::kUnnormDensity, ScoreName::kMutualInfo,
                      ScoreName::kEnsembleVariance, ScoreName::kFlowLogp}) {
    CHECK(score_name_from_string(score_name_string(s)) == s);
  }
  CHECK_THROWS(score_name_from_string("nope"));
}

TEST_CASE("scores match direct formulas from the logits") {
  Rng rng(82);
  ModelBundle bundle = make_bundle(ModelKind::kCe, rng);
  const Matrix x = random_matrix(4, 2, rng);
  const Matrix logits = bundle.net().forward_value(x);

  const auto msp = score(bundle, x, ScoreName::kMsp, rng);
  const auto ent = score(bundle, x, ScoreName::kPredEntropy, rng);
  const auto dent = score(bundle, x, ScoreName::kDiffEntropy, rng);
  const auto energy = score(bundle, x, ScoreName::kEnergy, rng);
  const auto dens = score(bundle, x, ScoreName::kUnnormDensity, rng);
  const auto mi = score(bundle, x, ScoreName::kMutualInfo, rng);
  for (int i = 0; i < 4; ++i) {
    const Vector row = logits.row(i).transpose();
    const Vector p = softmax(row);
    CHECK(msp[i] == doctest::Approx(p.maxCoeff()).epsilon(1e-12));
    CHECK(ent[i] == doctest::Approx(-categorical_entropy(p)).epsilon(1e-12));
    const Vector alpha = (row.array().exp() + 1.0).matrix();
    CHECK(dent[i] ==
          doctest::Approx(-differential_entropy(DirichletParams(alpha))).epsilon(1e-9));
    CHECK(mi[i] ==
          doctest::Approx(-mutual_information(DirichletParams(alpha))).epsilon(1e-9));
    CHECK(energy[i] == doctest::Approx(logsumexp(row)).epsilon(1e-12));
    CHECK(dens[i] == doctest::Approx(std::exp(logsumexp(row))).epsilon(1e-12));
  }

  // The prior-network head drops the +1 evidence offset.
  ModelBundle dpn = make_bundle(ModelKind::kDpn, rng);
  const Matrix dlogits = dpn.net().forward_value(x);
  const auto ddent = score(dpn, x, ScoreName::kDiffEntropy, rng);
  for (int i = 0; i < 4; ++i) {
    const Vector alpha = dlogits.row(i).transpose().array().exp().matrix();
    CHECK(ddent[i] ==
          doctest::Approx(-differential_entropy(DirichletParams(alpha))).epsilon(1e-9));
  }
}

TEST_CASE("scores are oriented so higher means more in-distribution") {
  Rng rng(83);
  ModelBundle bundle = make_bundle(ModelKind::kCe, rng);
  // Zero weights and a biased head give the same fixed logits everywhere.
  for (Matrix* p : bundle.net().parameters()) p->setZero();
  const Matrix x = random_matrix(1, 2, rng);

  auto one = [&](ScoreName s) { return score(bundle, x, s, rng)[0]; };
  std::vector<double> confident, uniform;
  for (ScoreName s : {ScoreName::kMsp, ScoreName::kPredEntropy,
                      ScoreName::kDiffEntropy, ScoreName::kEnergy,
                      ScoreName::kUnnormDensity, ScoreName::kMutualInfo}) {
    uniform.push_back(one(s));
  }
  bundle.net().layers().back().bias(0, 0) = 8.0;
  for (ScoreName s : {ScoreName::kMsp, ScoreName::kPredEntropy,
                      ScoreName::kDiffEntropy, ScoreName::kEnergy,
                      ScoreName::kUnnormDensity, ScoreName::kMutualInfo}) {
    confident.push_back(one(s));
  }
  for (std::size_t i = 0; i < confident.size(); ++i) {
    CHECK(confident[i] > uniform[i]);
  }
}

TEST_CASE("scores reject unsupported model kinds") {
  Rng rng(84);
  ModelBundle ce = make_bundle(ModelKind::kCe, rng);
  const Matrix x = random_matrix(2, 2, rng);
  CHECK_THROWS_AS((void)score(ce, x, ScoreName::kEnsembleVariance, rng), std::invalid_argument);
  CHECK_THROWS_AS((void)score(ce, x, ScoreName::kFlowLogp, rng), std::invalid_argument);

  ModelConfig fcfg;
  fcfg.kind = ModelKind::kCouplingFlow;
  fcfg.flow_depth = 4;
  fcfg.flow_width = 8;
  ModelBundle flow = ModelBundle::create(fcfg, rng);
  CHECK_THROWS_AS((void)score(flow, x, ScoreName::kMsp, rng), std::invalid_argument);
  CHECK_THROWS_AS((void)score(flow, x, ScoreName::kEnergy, rng), std::invalid_argument);
  const auto lp = score(flow, x, ScoreName::kFlowLogp, rng);
  CHECK(lp[0] == doctest::Approx(flow.flow().log_prob(x)[0]));

  ModelBundle ens = make_bundle(ModelKind::kEnsemble, rng);
  const auto var = score(ens, x, ScoreName::kEnsembleVariance, rng);
  CHECK(var[0] <= 0.0);  // negated spread
}

TEST_CASE("accuracy and confidence extraction") {
  Matrix probs(3, 2);
  probs << 0.9, 0.1, 0.3, 0.7, 0.5001, 0.4999;
  CHECK(accuracy(probs, {0, 1, 1}) == doctest::Approx(2.0 / 3.0));
  CHECK_THROWS(accuracy(probs, {0, 1}));

  std::vector<double> conf;
  std::vector<int> correct;
  confidences_and_correctness(probs, {0, 0, 0}, conf, correct);
  CHECK(conf[0] == doctest::Approx(0.9));
  CHECK(conf[1] == doctest::Approx(0.7));
  CHECK(correct == std::vector<int>({1, 0, 1}));
}

namespace {

Network trained_classifier(Matrix& x, std::vector<int>& labels, Rng& rng) {
  std::normal_distribution<double> n(0.0, 0.3);
  x = Matrix(40, 2);
  labels.resize(40);
  for (int i = 0; i < 40; ++i) {
    const int y = i % 2;
    x(i, 0) = (y == 0 ? -2.0 : 2.0) + n(rng);
    x(i, 1) = n(rng);
    labels[i] = y;
  }
  Network net = Network::mlp(2, {16}, 2, Activation::kRelu, FinalLayerMode::kFree, 0.0, rng);
  AdamState adam;
  adam.lr = 5e-2;
  for (int step = 0; step < 80; ++step) {
    Tape tape;
    TapeBinding bind = net.forward(tape, x);
    Var loss = ce_loss(tape, bind.logits, labels);
    tape.backward(loss);
    adam_step(net.parameters(), net.gradients(tape, bind), adam);
  }
  return net;
}

double net_accuracy(const Network& net, const Matrix& x, const std::vector<int>& labels) {
  const Matrix logits = net.forward_value(x);
  std::size_t hit = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index arg = 0;
    logits.row(i).maxCoeff(&arg);
    if (arg == labels[static_cast<std::size_t>(i)]) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

}  // namespace

TEST_CASE("fast gradient attack geometry") {
  Rng rng(85);
  Matrix x;
  std::vector<int> labels;
  Network net = trained_classifier(x, labels, rng);

  // eps = 0 is the identity for both norms.
  CHECK(fgm_attack(net, x, labels, 0.0, AttackNorm::kLinf) == x);
  CHECK(fgm_attack(net, x, labels, 0.0, AttackNorm::kL2) == x);

  const double eps = 0.3;
  const Matrix linf = fgm_attack(net, x, labels, eps, AttackNorm::kLinf);
  CHECK((linf - x).cwiseAbs().maxCoeff() == doctest::Approx(eps).epsilon(1e-12));
  CHECK((linf - x).cwiseAbs().maxCoeff() <= eps + 1e-12);

  const Matrix l2 = fgm_attack(net, x, labels, eps, AttackNorm::kL2);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double norm = (l2.row(i) - x.row(i)).norm();
    CHECK((norm == doctest::Approx(eps).epsilon(1e-9) || norm == 0.0));
  }

  // A constant network has zero input gradient everywhere.
  Network flat = net;
  for (Matrix* p : flat.parameters()) p->setZero();
  int untouched = 0;
  const Matrix still = fgm_attack(flat, x, labels, eps, AttackNorm::kLinf, &untouched);
  CHECK(still == x);
  CHECK(untouched == static_cast<int>(x.rows()));
}

TEST_CASE("projected gradient attack stays in the ball and extends fgm") {
  Rng rng(86);
  Matrix x;
  std::vector<int> labels;
  Network net = trained_classifier(x, labels, rng);
  const double eps = 0.25;

  // One full-step iteration reproduces the single-step attack.
  const Matrix pgd1_linf = pgd_attack(net, x, labels, eps, eps, 1, AttackNorm::kLinf);
  CHECK((pgd1_linf - fgm_attack(net, x, labels, eps, AttackNorm::kLinf))
            .cwiseAbs().maxCoeff() < 1e-12);
  const Matrix pgd1_l2 = pgd_attack(net, x, labels, eps, eps, 1, AttackNorm::kL2);
  CHECK((pgd1_l2 - fgm_attack(net, x, labels, eps, AttackNorm::kL2))
            .cwiseAbs().maxCoeff() < 1e-12);

  const Matrix linf = pgd_attack(net, x, labels, eps, eps / 4.0, 40, AttackNorm::kLinf);
  CHECK((linf - x).cwiseAbs().maxCoeff() <= eps + 1e-12);
  const Matrix l2 = pgd_attack(net, x, labels, eps, eps / 4.0, 40, AttackNorm::kL2);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    CHECK((l2.row(i) - x.row(i)).norm() <= eps + 1e-9);
  }
  CHECK_THROWS(pgd_attack(net, x, labels, -0.1, 0.1, 5, AttackNorm::kLinf));
}

TEST_CASE("attacks reduce the accuracy of a trained classifier") {
  Rng rng(87);
  Matrix x;
  std::vector<int> labels;
  Network net = trained_classifier(x, labels, rng);
  CHECK(net_accuracy(net, x, labels) == doctest::Approx(1.0));

  const Matrix adv = pgd_attack(net, x, labels, 2.5, 0.625, 40, AttackNorm::kLinf);
  CHECK(net_accuracy(net, adv, labels) < 0.5);
  // Stronger attacks cannot help the clean accuracy.
  const Matrix weak = fgm_attack(net, x, labels, 0.5, AttackNorm::kL2);
  CHECK(net_accuracy(net, weak, labels) <= 1.0);
}
