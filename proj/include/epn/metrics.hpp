#ifndef EPN_METRICS_HPP
#define EPN_METRICS_HPP

#include <string>
#include <vector>

#include "epn/models.hpp"

namespace epn {

/// Average precision with descending-score sweep; samples with equal scores
/// enter as one threshold group. Labels: 1 = in-distribution (positive).
double auc_pr(const std::vector<double>& scores, const std::vector<int>& labels);

struct CalibrationBin {
  double mean_confidence = 0.0;  // NaN when the bin is empty
  double accuracy = 0.0;         // NaN when the bin is empty
  std::size_t count = 0;
};

std::vector<CalibrationBin> calibration_curve(const std::vector<double>& confidences,
                                              const std::vector<int>& correctness,
                                              int n_bins);

/// Expected calibration error over equal-width bins; empty bins contribute 0.
double ece(const std::vector<double>& confidences,
           const std::vector<int>& correctness, int n_bins = 15);

/// 1 where score > tau (scores oriented higher = more ID), else 0.
std::vector<int> ood_threshold_classifier(const std::vector<double>& scores,
                                          double tau);

enum class ScoreName {
  kMsp,
  kPredEntropy,
  kDiffEntropy,
  kEnergy,
  kUnnormDensity,
  kMutualInfo,
  kEnsembleVariance,
  kFlowLogp,
};

ScoreName score_name_from_string(const std::string& name);
const char* score_name_string(ScoreName name);

/// Per-row OOD score, orientation normalized so that HIGHER means MORE
/// in-distribution (entropy- and variance-like scores are negated).
/// `rng` drives the stochastic passes of MC-dropout scoring.
std::vector<double> score(const ModelBundle& model, const Matrix& x,
                          ScoreName name, Rng& rng);

/// Fraction of argmax predictions matching the labels.
double accuracy(const Matrix& probs, const std::vector<int>& labels);

/// Max-probability confidences and 0/1 correctness for calibration metrics.
void confidences_and_correctness(const Matrix& probs, const std::vector<int>& labels,
                                 std::vector<double>& conf, std::vector<int>& correct);

}  // namespace epn

#endif  // EPN_METRICS_HPP
