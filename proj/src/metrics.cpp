#include "epn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace epn {

double auc_pr(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size() || scores.empty()) {
    throw std::invalid_argument("auc_pr: size mismatch or empty input");
  }
  std::size_t total_pos = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw std::invalid_argument("auc_pr: labels must be 0/1");
    total_pos += static_cast<std::size_t>(y);
  }
  if (total_pos == 0 || total_pos == labels.size()) {
    throw std::invalid_argument("auc_pr: need both classes");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  double ap = 0.0;
  std::size_t tp = 0, fp = 0, i = 0;
  while (i < order.size()) {
    // One threshold group per distinct score value.
    std::size_t j = i, group_pos = 0, group_neg = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      if (labels[order[j]] == 1) ++group_pos; else ++group_neg;
      ++j;
    }
    tp += group_pos;
    fp += group_neg;
    if (group_pos > 0) {
      const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
      const double delta_recall = static_cast<double>(group_pos) / static_cast<double>(total_pos);
      ap += precision * delta_recall;
    }
    i = j;
  }
  return ap;
}

std::vector<CalibrationBin> calibration_curve(const std::vector<double>& confidences,
                                              const std::vector<int>& correctness,
                                              int n_bins) {
  if (confidences.empty() || confidences.size() != correctness.size()) {
    throw std::invalid_argument("calibration_curve: size mismatch or empty input");
  }
  if (n_bins < 1) throw std::invalid_argument("calibration_curve: n_bins must be >= 1");
  std::vector<CalibrationBin> bins(static_cast<std::size_t>(n_bins));
  std::vector<double> conf_sum(bins.size(), 0.0);
  std::vector<double> correct_sum(bins.size(), 0.0);
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    const double c = confidences[i];
    if (c < 0.0 || c > 1.0) throw std::invalid_argument("calibration_curve: confidence outside [0,1]");
    auto b = static_cast<std::size_t>(std::min<int>(n_bins - 1,
        static_cast<int>(c * n_bins)));
    bins[b].count += 1;
    conf_sum[b] += c;
    correct_sum[b] += correctness[i] ? 1.0 : 0.0;
  }
  for (std::size_t b = 0; b < bins.size(); ++b) {
    if (bins[b].count == 0) {
      bins[b].mean_confidence = std::numeric_limits<double>::quiet_NaN();
      bins[b].accuracy = std::numeric_limits<double>::quiet_NaN();
    } else {
      bins[b].mean_confidence = conf_sum[b] / static_cast<double>(bins[b].count);
      bins[b].accuracy = correct_sum[b] / static_cast<double>(bins[b].count);
    }
  }
  return bins;
}

double ece(const std::vector<double>& confidences,
           const std::vector<int>& correctness, int n_bins) {
  const std::vector<CalibrationBin> bins = calibration_curve(confidences, correctness, n_bins);
  const double n = static_cast<double>(confidences.size());
  double total = 0.0;
  for (const CalibrationBin& b : bins) {
    if (b.count == 0) continue;
    total += (static_cast<double>(b.count) / n) * std::abs(b.accuracy - b.mean_confidence);
  }
  return total;
}

std::vector<int> ood_threshold_classifier(const std::vector<double>& scores,
                                          double tau) {
  std::vector<int> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = scores[i] > tau ? 1 : 0;
  return out;
}

ScoreName score_name_from_string(const std::string& name) {
  if (name == "msp") return ScoreName::kMsp;
  if (name == "pred_entropy") return ScoreName::kPredEntropy;
  if (name == "diff_entropy") return ScoreName::kDiffEntropy;
  if (name == "energy") return ScoreName::kEnergy;
  if (name == "unnorm_density") return ScoreName::kUnnormDensity;
  if (name == "mutual_info") return ScoreName::kMutualInfo;
  if (name == "ensemble_variance") return ScoreName::kEnsembleVariance;
  if (name == "flow_logp") return ScoreName::kFlowLogp;
  throw std::invalid_argument("unknown score name '" + name + "'");
}

const char* score_name_string(ScoreName name) {
  switch (name) {
    case ScoreName::kMsp: return "msp";
    case ScoreName::kPredEntropy: return "pred_entropy";
    case ScoreName::kDiffEntropy: return "diff_entropy";
    case ScoreName::kEnergy: return "energy";
    case ScoreName::kUnnormDensity: return "unnorm_density";
    case ScoreName::kMutualInfo: return "mutual_info";
    case ScoreName::kEnsembleVariance: return "ensemble_variance";
    case ScoreName::kFlowLogp: return "flow_logp";
  }
  return "msp";
}

namespace {

constexpr int kMcScorePasses = 100;

Matrix probs_for(const ModelBundle& model, const Matrix& x, Rng& rng) {
  if (model.kind() == ModelKind::kMcDropout) {
    return mc_dropout_predict(model.net(), x, kMcScorePasses, rng).mean_probs;
  }
  return model.predict_probs(x);
}

/// Predicted Dirichlet concentrations per row: exp(logits) for the prior
/// network, 1 + exp(logits) for the evidential update.
Matrix concentrations_for(const ModelBundle& model, const Matrix& x) {
  Matrix logits = model.net().forward_value(x);
  Matrix alpha = logits.array().exp().matrix();
  if (model.kind() != ModelKind::kDpn) alpha.array() += 1.0;
  return alpha;
}

bool dirichlet_kind(ModelKind k) {
  return k == ModelKind::kDpn || k == ModelKind::kEpnM || k == ModelKind::kJem ||
         k == ModelKind::kCe || k == ModelKind::kEnergyOod || k == ModelKind::kOe;
}

}  // namespace

std::vector<double> score(const ModelBundle& model, const Matrix& x,
                          ScoreName name, Rng& rng) {
  const auto n = static_cast<std::size_t>(x.rows());
  std::vector<double> out(n);
  const ModelKind kind = model.kind();

  auto unsupported = [&]() -> std::vector<double> {
    throw std::invalid_argument(std::string("score '") + score_name_string(name) +
                                "' is not supported by model kind '" +
                                model_kind_name(kind) + "'");
  };

  switch (name) {
    case ScoreName::kMsp: {
      if (kind == ModelKind::kCouplingFlow) return unsupported();
      const Matrix probs = probs_for(model, x, rng);
      for (std::size_t i = 0; i < n; ++i) {
        out[i] = probs.row(static_cast<Eigen::Index>(i)).maxCoeff();
      }
      return out;
    }
    case ScoreName::kPredEntropy: {
      if (kind == ModelKind::kCouplingFlow) return unsupported();
      const Matrix probs = probs_for(model, x, rng);
      for (std::size_t i = 0; i < n; ++i) {
        out[i] = -categorical_entropy(probs.row(static_cast<Eigen::Index>(i)).transpose());
      }
      return out;
    }
    case ScoreName::kDiffEntropy: {
      if (!dirichlet_kind(kind)) return unsupported();
      const Matrix alpha = concentrations_for(model, x);
      for (std::size_t i = 0; i < n; ++i) {
        DirichletParams d(alpha.row(static_cast<Eigen::Index>(i)).transpose());
        out[i] = -differential_entropy(d);
      }
      return out;
    }
    case ScoreName::kEnergy:
    case ScoreName::kUnnormDensity: {
      if (!model.has_energy()) return unsupported();
      const EnergyFn e = model.energy_fn();
      const Vector energy = e.energy_value(x);
      for (std::size_t i = 0; i < n; ++i) {
        const double neg_e = -energy[static_cast<Eigen::Index>(i)];
        out[i] = name == ScoreName::kEnergy ? neg_e : std::exp(std::min(neg_e, 700.0));
      }
      return out;
    }
    case ScoreName::kMutualInfo: {
      if (!dirichlet_kind(kind)) return unsupported();
      const Matrix alpha = concentrations_for(model, x);
      for (std::size_t i = 0; i < n; ++i) {
        DirichletParams d(alpha.row(static_cast<Eigen::Index>(i)).transpose());
        out[i] = -mutual_information(d);
      }
      return out;
    }
    case ScoreName::kEnsembleVariance: {
      PredictiveStats stats;
      if (kind == ModelKind::kEnsemble) {
        stats = ensemble_predict(model.members(), x);
      } else if (kind == ModelKind::kMcDropout) {
        stats = mc_dropout_predict(model.net(), x, kMcScorePasses, rng);
      } else {
        return unsupported();
      }
      for (std::size_t i = 0; i < n; ++i) {
        out[i] = -stats.spread[static_cast<Eigen::Index>(i)];
      }
      return out;
    }
    case ScoreName::kFlowLogp: {
      if (!model.has_flow()) return unsupported();
      const Vector lp = model.flow().log_prob(x);
      for (std::size_t i = 0; i < n; ++i) out[i] = lp[static_cast<Eigen::Index>(i)];
      return out;
    }
  }
  return unsupported();
}

double accuracy(const Matrix& probs, const std::vector<int>& labels) {
  if (static_cast<std::size_t>(probs.rows()) != labels.size() || labels.empty()) {
    throw std::invalid_argument("accuracy: size mismatch or empty input");
  }
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    Eigen::Index argmax = 0;
    probs.row(i).maxCoeff(&argmax);
    if (argmax == labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

void confidences_and_correctness(const Matrix& probs, const std::vector<int>& labels,
                                 std::vector<double>& conf, std::vector<int>& correct) {
  conf.resize(static_cast<std::size_t>(probs.rows()));
  correct.resize(conf.size());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    Eigen::Index argmax = 0;
    conf[static_cast<std::size_t>(i)] = probs.row(i).maxCoeff(&argmax);
    correct[static_cast<std::size_t>(i)] =
        argmax == labels[static_cast<std::size_t>(i)] ? 1 : 0;
  }
}

}  // namespace epn
