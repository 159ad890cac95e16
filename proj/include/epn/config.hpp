#ifndef EPN_CONFIG_HPP
#define EPN_CONFIG_HPP

#include <string>
#include <vector>

#include "epn/models.hpp"

namespace epn {

struct DatasetConfig {
  std::string generator = "three_gaussians";  // or "csv"
  std::string csv_path;
  std::string label_column = "label";
  int n_per_class = 1500;
  bool overlap = false;
  double val_fraction = 0.1;
  double test_fraction = 0.2;
  bool standardize = false;
  std::vector<int> holdout = {};
};

struct OodConfig {
  std::vector<std::string> sets = {"noise", "constant", "oodomain"};
  int n_samples = 1000;
  double oodomain_scale = 255.0;
};

struct TrainConfig {
  int steps = 2000;
  int batch_size = 64;
  double lr = 1e-3;
  int warmup_steps = 2500;
  int log_every = 50;
};

struct EvalConfig {
  std::vector<std::string> scores = {"msp", "energy"};
  int ece_bins = 15;
  std::string model_selection = "accuracy";  // or "ood_aucpr"
};

/// Full experiment description; defaults mirror the training recipes the
/// library is built around. Parsing rejects unknown keys.
struct ExperimentConfig {
  DatasetConfig dataset;
  OodConfig ood;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  std::vector<unsigned long long> seeds = {1, 2, 3, 4, 5};
  std::string out_dir = "runs";

  static ExperimentConfig defaults();
  static ExperimentConfig from_json_text(const std::string& text);
  static ExperimentConfig from_file(const std::string& path);
  std::string to_json_text() const;
  /// Stable hash of the serialized config, for provenance lines in reports.
  std::string hash() const;
};

}  // namespace epn

#endif  // EPN_CONFIG_HPP
