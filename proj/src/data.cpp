#include "epn/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace epn {

void LabeledDataset::validate() const {
  if (features.rows() != static_cast<Eigen::Index>(labels.size())) {
    throw std::invalid_argument("dataset: label count does not match rows");
  }
  for (int y : labels) {
    if (y < 0 || y >= class_count) {
      throw std::invalid_argument("dataset: label outside [0, class_count)");
    }
  }
}

LabeledDataset gen_three_gaussians(int n_per_class, bool overlap, Rng& rng) {
  if (n_per_class < 1) throw std::invalid_argument("gen_three_gaussians: n_per_class must be >= 1");
  const double r = overlap ? 0.5 : 1.0;
  const double s3 = std::sqrt(3.0);
  const double means[3][2] = {{0.0, 2.0 * r}, {s3 * r, -1.0 * r}, {-s3 * r, -1.0 * r}};
  const double sigma = 0.2;
  LabeledDataset ds;
  ds.name = overlap ? "three_gaussians_overlap" : "three_gaussians";
  ds.class_count = 3;
  ds.features.resize(3 * n_per_class, 2);
  ds.labels.resize(static_cast<std::size_t>(3 * n_per_class));
  std::normal_distribution<double> noise(0.0, sigma);
  Eigen::Index row = 0;
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < n_per_class; ++i, ++row) {
      ds.features(row, 0) = means[c][0] + noise(rng);
      ds.features(row, 1) = means[c][1] + noise(rng);
      ds.labels[static_cast<std::size_t>(row)] = c;
    }
  }
  return ds;
}

Matrix gen_noise_ood(int n, int d, Rng& rng) {
  if (n < 1 || d < 1) throw std::invalid_argument("gen_noise_ood: n, d must be >= 1");
  Matrix out(n, d);
  const int n_gauss = (n + 1) / 2;
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) {
      out(i, j) = i < n_gauss ? gauss(rng) : unif(rng);
    }
  }
  // Shuffle rows so the two halves are interleaved.
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  Matrix shuffled(n, d);
  for (int i = 0; i < n; ++i) shuffled.row(i) = out.row(order[static_cast<std::size_t>(i)]);
  return shuffled;
}

Matrix gen_constant_ood(int n, int d, Rng& rng) {
  if (n < 1 || d < 1) throw std::invalid_argument("gen_constant_ood: n, d must be >= 1");
  Matrix out(n, d);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  for (int i = 0; i < n; ++i) out.row(i).setConstant(unif(rng));
  return out;
}

Matrix gen_oodomain(const Matrix& id_data, double scale) {
  if (!(scale > 0.0)) throw std::invalid_argument("gen_oodomain: scale must be > 0");
  return id_data * scale;
}

HoldoutSplit holdout_classes(const LabeledDataset& ds, const std::vector<int>& classes) {
  if (classes.empty()) throw std::invalid_argument("holdout_classes: empty class set");
  std::vector held(static_cast<std::size_t>(ds.class_count), false);
  for (int c : classes) {
    if (c < 0 || c >= ds.class_count) throw std::invalid_argument("holdout_classes: class out of range");
    held[static_cast<std::size_t>(c)] = true;
  }
  // Order-preserving relabeling of the remaining classes.
  std::vector<int> relabel(static_cast<std::size_t>(ds.class_count), -1);
  int next = 0;
  for (int c = 0; c < ds.class_count; ++c) {
    if (!held[static_cast<std::size_t>(c)]) relabel[static_cast<std::size_t>(c)] = next++;
  }
  if (next == 0) throw std::invalid_argument("holdout_classes: cannot hold out every class");

  std::vector<Eigen::Index> id_rows, ood_rows;
  for (Eigen::Index i = 0; i < ds.size(); ++i) {
    if (held[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])]) {
      ood_rows.push_back(i);
    } else {
      id_rows.push_back(i);
    }
  }
  HoldoutSplit out;
  out.id.name = ds.name + "_id";
  out.id.class_count = next;
  out.id.normalization = ds.normalization;
  out.id.features.resize(static_cast<Eigen::Index>(id_rows.size()), ds.dim());
  out.id.labels.resize(id_rows.size());
  for (std::size_t i = 0; i < id_rows.size(); ++i) {
    out.id.features.row(static_cast<Eigen::Index>(i)) = ds.features.row(id_rows[i]);
    out.id.labels[i] = relabel[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(id_rows[i])])];
  }
  out.ood.resize(static_cast<Eigen::Index>(ood_rows.size()), ds.dim());
  for (std::size_t i = 0; i < ood_rows.size(); ++i) {
    out.ood.row(static_cast<Eigen::Index>(i)) = ds.features.row(ood_rows[i]);
  }
  return out;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

double parse_number(const std::string& tok, int line_no) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(tok, &pos);
  } catch (const std::exception&) {
    throw std::runtime_error("csv: non-numeric field '" + tok + "' at line " +
                             std::to_string(line_no));
  }
  while (pos < tok.size() && std::isspace(static_cast<unsigned char>(tok[pos]))) ++pos;
  if (pos != tok.size()) {
    throw std::runtime_error("csv: non-numeric field '" + tok + "' at line " +
                             std::to_string(line_no));
  }
  return v;
}

}  // namespace

LabeledDataset load_csv(const std::string& path, const std::string& label_column) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("csv: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("csv: missing header row");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::vector<std::string> header = split_csv_line(line);
  int label_idx = -1;
  for (std::size_t j = 0; j < header.size(); ++j) {
    if (header[j] == label_column) label_idx = static_cast<int>(j);
  }
  if (label_idx < 0) {
    throw std::runtime_error("csv: label column '" + label_column + "' not found");
  }

  std::vector<std::vector<double>> rows;
  std::vector<double> raw_labels;
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> fields = split_csv_line(line);
    if (fields.size() != header.size()) {
      throw std::runtime_error("csv: wrong field count at line " + std::to_string(line_no));
    }
    std::vector<double> row;
    for (std::size_t j = 0; j < fields.size(); ++j) {
      const double v = parse_number(fields[j], line_no);
      if (static_cast<int>(j) == label_idx) {
        raw_labels.push_back(v);
      } else {
        row.push_back(v);
      }
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw std::runtime_error("csv: no data rows");

  // Distinct label values in ascending order become classes 0..C-1.
  std::map<double, int> classes;
  for (double v : raw_labels) classes.emplace(v, 0);
  int next = 0;
  for (auto& [value, id] : classes) id = next++;

  LabeledDataset ds;
  ds.name = path;
  ds.class_count = next;
  ds.features.resize(static_cast<Eigen::Index>(rows.size()),
                     static_cast<Eigen::Index>(rows[0].size()));
  ds.labels.resize(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) {
      ds.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
    ds.labels[i] = classes.at(raw_labels[i]);
  }
  return ds;
}

SplitResult split(const LabeledDataset& ds, double val_fraction,
                  double test_fraction, Rng& rng) {
  if (val_fraction < 0.0 || test_fraction < 0.0 || val_fraction + test_fraction >= 1.0) {
    throw std::invalid_argument("split: fractions must be nonnegative and sum below 1");
  }
  ds.validate();
  std::vector<std::vector<Eigen::Index>> by_class(static_cast<std::size_t>(ds.class_count));
  for (Eigen::Index i = 0; i < ds.size(); ++i) {
    by_class[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])].push_back(i);
  }
  std::vector<Eigen::Index> train_rows, val_rows, test_rows;
  for (auto& rows : by_class) {
    std::shuffle(rows.begin(), rows.end(), rng);
    const auto n = rows.size();
    const auto n_val = static_cast<std::size_t>(std::lround(val_fraction * static_cast<double>(n)));
    const auto n_test = static_cast<std::size_t>(std::lround(test_fraction * static_cast<double>(n)));
    for (std::size_t i = 0; i < n; ++i) {
      if (i < n_val) val_rows.push_back(rows[i]);
      else if (i < n_val + n_test) test_rows.push_back(rows[i]);
      else train_rows.push_back(rows[i]);
    }
  }
  auto take = [&](const std::vector<Eigen::Index>& idx, const char* suffix) {
    LabeledDataset part;
    part.name = ds.name + suffix;
    part.class_count = ds.class_count;
    part.normalization = ds.normalization;
    part.features.resize(static_cast<Eigen::Index>(idx.size()), ds.dim());
    part.labels.resize(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      part.features.row(static_cast<Eigen::Index>(i)) = ds.features.row(idx[i]);
      part.labels[i] = ds.labels[static_cast<std::size_t>(idx[i])];
    }
    return part;
  };
  return {take(train_rows, "_train"), take(val_rows, "_val"), take(test_rows, "_test")};
}

Normalization standardize(LabeledDataset& ds) {
  if (ds.size() == 0) throw std::invalid_argument("standardize: empty dataset");
  Normalization norm;
  norm.mean = ds.features.colwise().mean();
  RowVector var = (ds.features.rowwise() - norm.mean).array().square().colwise().mean();
  norm.std = var.array().sqrt().max(1e-12).matrix();
  ds.features = apply_normalization(ds.features, norm);
  ds.normalization = norm;
  return norm;
}

Matrix apply_normalization(const Matrix& features, const Normalization& norm) {
  return ((features.rowwise() - norm.mean).array().rowwise() / norm.std.array()).matrix();
}

Matrix invert_normalization(const Matrix& features, const Normalization& norm) {
  return ((features.array().rowwise() * norm.std.array()).matrix().rowwise() + norm.mean);
}

Matrix severity_shift(const Matrix& features, int level, Rng& rng) {
  if (level < 0 || level > 5) throw std::invalid_argument("severity_shift: level must be in [0,5]");
  if (level == 0) return features;
  std::normal_distribution<double> noise(0.0, 0.05 * level);
  Matrix out = features;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    for (Eigen::Index j = 0; j < out.cols(); ++j) out(i, j) += noise(rng);
  }
  return out;
}

}  // namespace epn
