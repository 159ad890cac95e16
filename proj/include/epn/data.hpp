#ifndef EPN_DATA_HPP
#define EPN_DATA_HPP

#include <optional>
#include <string>
#include <vector>

#include "epn/network.hpp"

namespace epn {

/// Per-feature affine record so normalized data can be mapped back exactly.
struct Normalization {
  RowVector mean;
  RowVector std;  // entries clamped away from zero before division
};

struct LabeledDataset {
  Matrix features;          // N x D
  std::vector<int> labels;  // in [0, class_count)
  int class_count = 0;
  std::string name;
  std::optional<Normalization> normalization;

  Eigen::Index size() const { return features.rows(); }
  Eigen::Index dim() const { return features.cols(); }
  void validate() const;
};

/// Three isotropic Gaussian blobs at radius-2 means (scaled by 0.5 in
/// overlap mode), sigma 0.2, two features, three classes.
LabeledDataset gen_three_gaussians(int n_per_class, bool overlap, Rng& rng);

/// Half standard normal rows, half uniform in [-1,1], shuffled together.
Matrix gen_noise_ood(int n, int d, Rng& rng);

/// Each row is one scalar from U(-1,1) repeated across all features.
Matrix gen_constant_ood(int n, int d, Rng& rng);

/// Input data with normalization deliberately skipped and scaled far outside
/// the training range.
Matrix gen_oodomain(const Matrix& id_data, double scale = 255.0);

struct HoldoutSplit {
  LabeledDataset id;  // remaining classes, labels compacted order-preserving
  Matrix ood;         // features of the held-out classes
};

HoldoutSplit holdout_classes(const LabeledDataset& ds, const std::vector<int>& classes);

/// Numeric CSV with a header row. The label column is selected by name; its
/// distinct values are mapped to classes 0..C-1 in ascending order. Malformed
/// rows are reported with their line number.
LabeledDataset load_csv(const std::string& path, const std::string& label_column);

struct SplitResult {
  LabeledDataset train;
  LabeledDataset val;
  LabeledDataset test;
};

/// Deterministic stratified split; fractions apply per class.
SplitResult split(const LabeledDataset& ds, double val_fraction,
                  double test_fraction, Rng& rng);

/// Standardizes features in place using the dataset's own statistics and
/// stores the record; returns the record.
Normalization standardize(LabeledDataset& ds);

/// Applies an existing record (train statistics) to other features.
Matrix apply_normalization(const Matrix& features, const Normalization& norm);
Matrix invert_normalization(const Matrix& features, const Normalization& norm);

/// Additive Gaussian noise of std 0.05 * level on standardized features;
/// level 0 is the identity.
Matrix severity_shift(const Matrix& features, int level, Rng& rng);

}  // namespace epn

#endif  // EPN_DATA_HPP
