#ifndef EPN_RUNNER_HPP
#define EPN_RUNNER_HPP

#include <map>
#include <ostream>

#include "epn/attacks.hpp"
#include "epn/config.hpp"
#include "epn/data.hpp"
#include "epn/metrics.hpp"

namespace epn {

/// Thrown when a run diverges (non-finite losses or energies); exit code 2.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Thrown on file-system failures; exit code 3.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ExperimentData {
  LabeledDataset train;
  LabeledDataset val;
  LabeledDataset test;
  std::map<std::string, Matrix> ood_sets;
};

/// Builds the per-seed dataset and OOD sets described by the config.
/// Deterministic in (config, seed).
ExperimentData make_data(const ExperimentConfig& config, unsigned long long seed);

/// Derives an independent RNG stream from (master seed, stream index).
Rng derive_rng(unsigned long long seed, unsigned long long stream);

/// Checkpoint path for one seed under the config's output directory.
std::string checkpoint_path(const ExperimentConfig& config, unsigned long long seed);

// Commands. Each writes its outputs under config.out_dir and throws
// std::invalid_argument (validation), DivergenceError, or IoError.
void cmd_train(const ExperimentConfig& config);
void cmd_eval_ood(const ExperimentConfig& config);
void cmd_diagnose_ray(const ExperimentConfig& config, int n_directions,
                      const std::vector<double>& betas);
void cmd_grid_density(const ExperimentConfig& config, double lo, double hi,
                      int resolution);
void cmd_attack(const ExperimentConfig& config, const std::string& attack,
                const std::vector<double>& eps_list, const std::string& norm);
void cmd_calibrate(const ExperimentConfig& config);
void cmd_embed_density(const ExperimentConfig& config);
void cmd_gen_data(const ExperimentConfig& config);
void cmd_print_defaults(std::ostream& os);

}  // namespace epn

#endif  // EPN_RUNNER_HPP
