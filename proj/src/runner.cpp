#include "epn/runner.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

namespace epn {

namespace {

using Json = nlohmann::ordered_json;

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void ensure_out_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir + "': " + ec.message());
}

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write '" + path + "'");
  return os;
}

Matrix sample_batch(const Matrix& features, int batch_size, Rng& rng,
                    std::vector<int>* labels_out,
                    const std::vector<int>& labels) {
  std::uniform_int_distribution<Eigen::Index> pick(0, features.rows() - 1);
  Matrix batch(batch_size, features.cols());
  if (labels_out) labels_out->resize(static_cast<std::size_t>(batch_size));
  for (int i = 0; i < batch_size; ++i) {
    const Eigen::Index r = pick(rng);
    batch.row(i) = features.row(r);
    if (labels_out) (*labels_out)[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(r)];
  }
  return batch;
}

/// Auxiliary outliers for DPN / OE / EnergyOOD training: uniform over the
/// training bounding box expanded by 10% per side.
Matrix uniform_box_batch(const Matrix& train_features, int n, Rng& rng) {
  RowVector lo = train_features.colwise().minCoeff();
  RowVector hi = train_features.colwise().maxCoeff();
  const RowVector pad = (hi - lo) * 0.1;
  lo -= pad;
  hi += pad;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix out(n, train_features.cols());
  for (int i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < out.cols(); ++j) {
      out(i, j) = lo[j] + (hi[j] - lo[j]) * u(rng);
    }
  }
  return out;
}

bool needs_aux_ood(ModelKind k) {
  return k == ModelKind::kDpn || k == ModelKind::kOe || k == ModelKind::kEnergyOod;
}

ModelBundle load_bundle(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open checkpoint '" + path + "'");
  return ModelBundle::load(is);
}

void write_csv_matrix(std::ostream& os, const Matrix& features,
                      const std::vector<int>* labels) {
  for (Eigen::Index j = 0; j < features.cols(); ++j) {
    os << 'f' << j << (j + 1 < features.cols() ? "," : "");
  }
  if (labels) os << ",label";
  os << '\n';
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    for (Eigen::Index j = 0; j < features.cols(); ++j) {
      os << fmt(features(i, j)) << (j + 1 < features.cols() ? "," : "");
    }
    if (labels) os << ',' << (*labels)[static_cast<std::size_t>(i)];
    os << '\n';
  }
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

Rng derive_rng(unsigned long long seed, unsigned long long stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

std::string checkpoint_path(const ExperimentConfig& config, unsigned long long seed) {
  return config.out_dir + "/" + model_kind_name(config.model.kind) + "_seed" +
         std::to_string(seed) + ".ckpt";
}

ExperimentData make_data(const ExperimentConfig& config, unsigned long long seed) {
  ExperimentData data;
  LabeledDataset full;
  if (config.dataset.generator == "three_gaussians") {
    Rng rng = derive_rng(seed, 0);
    full = gen_three_gaussians(config.dataset.n_per_class, config.dataset.overlap, rng);
  } else if (config.dataset.generator == "csv") {
    if (config.dataset.csv_path.empty()) {
      throw std::invalid_argument("config: csv generator requires dataset.csv_path");
    }
    full = load_csv(config.dataset.csv_path, config.dataset.label_column);
  } else {
    throw std::invalid_argument("config: unknown dataset generator '" +
                                config.dataset.generator + "'");
  }

  Matrix holdout_ood;
  if (!config.dataset.holdout.empty()) {
    HoldoutSplit hs = holdout_classes(full, config.dataset.holdout);
    full = std::move(hs.id);
    holdout_ood = std::move(hs.ood);
  }

  Rng split_rng = derive_rng(seed, 1);
  SplitResult parts = split(full, config.dataset.val_fraction,
                            config.dataset.test_fraction, split_rng);
  data.train = std::move(parts.train);
  data.val = std::move(parts.val);
  data.test = std::move(parts.test);

  // The out-of-domain set is built from raw-range data before normalization.
  Matrix oodomain_base = data.test.features;

  if (config.dataset.standardize) {
    const Normalization norm = standardize(data.train);
    data.val.features = apply_normalization(data.val.features, norm);
    data.val.normalization = norm;
    data.test.features = apply_normalization(data.test.features, norm);
    data.test.normalization = norm;
    if (holdout_ood.rows() > 0) holdout_ood = apply_normalization(holdout_ood, norm);
  }

  Rng ood_rng = derive_rng(seed, 2);
  const int d = static_cast<int>(data.train.dim());
  for (const std::string& name : config.ood.sets) {
    if (name == "noise") {
      data.ood_sets[name] = gen_noise_ood(config.ood.n_samples, d, ood_rng);
    } else if (name == "constant") {
      data.ood_sets[name] = gen_constant_ood(config.ood.n_samples, d, ood_rng);
    } else if (name == "oodomain") {
      data.ood_sets[name] = gen_oodomain(oodomain_base, config.ood.oodomain_scale);
    } else if (name == "holdout") {
      if (holdout_ood.rows() == 0) {
        throw std::invalid_argument("config: 'holdout' OOD set requires dataset.holdout classes");
      }
      data.ood_sets[name] = holdout_ood;
    } else {
      throw std::invalid_argument("config: unknown OOD set '" + name + "'");
    }
  }
  return data;
}

void cmd_train(const ExperimentConfig& config) {
  ensure_out_dir(config.out_dir);
  std::size_t failures = 0;
  Json summary;
  summary["config_hash"] = config.hash();
  summary["seeds"] = Json::array();

  for (unsigned long long seed : config.seeds) {
    Json entry;
    entry["seed"] = seed;
    try {
      const ExperimentData data = make_data(config, seed);
      ModelConfig mc = config.model;
      mc.in_dim = static_cast<int>(data.train.dim());
      mc.out_dim = data.train.class_count;
      mc.lr = config.train.lr;
      mc.warmup_steps = config.train.warmup_steps;
      Rng init_rng = derive_rng(seed, 3);
      ModelBundle bundle = ModelBundle::create(mc, init_rng);
      bundle.fit_buffer(data.train.features);

      Rng train_rng = derive_rng(seed, 4);
      std::ofstream log = open_out(config.out_dir + "/" +
                                   std::string(model_kind_name(mc.kind)) + "_seed" +
                                   std::to_string(seed) + "_train.jsonl");
      for (int step = 1; step <= config.train.steps; ++step) {
        std::vector<int> batch_labels;
        Matrix batch = sample_batch(data.train.features, config.train.batch_size,
                                    train_rng, &batch_labels, data.train.labels);
        Matrix ood;
        if (needs_aux_ood(mc.kind)) {
          ood = uniform_box_batch(data.train.features, config.train.batch_size, train_rng);
        }
        TrainStepStats stats;
        try {
          stats = bundle.train_step(batch, batch_labels, ood, train_rng);
        } catch (const std::runtime_error& e) {
          throw DivergenceError("seed " + std::to_string(seed) + " diverged at step " +
                                std::to_string(step) + ": " + e.what());
        }
        if (step % config.train.log_every == 0 || step == config.train.steps) {
          Json line;
          line["step"] = step;
          line["loss"] = stats.loss;
          line["density_term"] = stats.density_term;
          line["class_term"] = stats.class_term;
          line["reg_term"] = stats.reg_term;
          line["grad_norm"] = stats.grad_norm;
          log << line.dump() << '\n';
        }
      }
      std::ofstream ckpt = open_out(checkpoint_path(config, seed));
      bundle.save(ckpt);
      entry["status"] = "ok";
    } catch (const IoError&) {
      throw;
    } catch (const std::invalid_argument&) {
      throw;
    } catch (const std::exception& e) {
      entry["status"] = "failed";
      entry["error"] = e.what();
      ++failures;
      std::cerr << "train: " << e.what() << '\n';
    }
    summary["seeds"].push_back(entry);
  }

  open_out(config.out_dir + "/" + std::string(model_kind_name(config.model.kind)) +
           "_train_summary.json")
      << summary.dump(2) << '\n';
  if (failures == config.seeds.size()) {
    throw DivergenceError("all seeds diverged");
  }
}

void cmd_eval_ood(const ExperimentConfig& config) {
  ensure_out_dir(config.out_dir);
  const std::string kind = model_kind_name(config.model.kind);
  std::ofstream table = open_out(config.out_dir + "/" + kind + "_eval_ood.csv");
  table << "seed,ood_set,score,auc_pr\n";
  std::ofstream metrics = open_out(config.out_dir + "/" + kind + "_metrics.csv");
  metrics << "seed,accuracy,ece\n";

  std::map<std::string, std::vector<double>> aucs;  // "ood_set/score" -> per seed
  std::vector<double> accs, eces;

  for (unsigned long long seed : config.seeds) {
    const ExperimentData data = make_data(config, seed);
    ModelBundle bundle = load_bundle(checkpoint_path(config, seed));
    Rng score_rng = derive_rng(seed, 7);

    if (bundle.kind() != ModelKind::kCouplingFlow) {
      const Matrix probs = bundle.predict_probs(data.test.features);
      const double acc = accuracy(probs, data.test.labels);
      std::vector<double> conf;
      std::vector<int> correct;
      confidences_and_correctness(probs, data.test.labels, conf, correct);
      const double e = ece(conf, correct, config.eval.ece_bins);
      accs.push_back(acc);
      eces.push_back(e);
      metrics << seed << ',' << fmt(acc) << ',' << fmt(e) << '\n';
    }

    for (const std::string& score_str : config.eval.scores) {
      const ScoreName name = score_name_from_string(score_str);
      const std::vector<double> id_scores = score(bundle, data.test.features, name, score_rng);
      for (const auto& [ood_name, ood_set] : data.ood_sets) {
        const std::vector<double> ood_scores = score(bundle, ood_set, name, score_rng);
        std::vector<double> all = id_scores;
        all.insert(all.end(), ood_scores.begin(), ood_scores.end());
        std::vector<int> labels(id_scores.size(), 1);
        labels.insert(labels.end(), ood_scores.size(), 0);
        const double auc = auc_pr(all, labels);
        table << seed << ',' << ood_name << ',' << score_str << ',' << fmt(auc) << '\n';
        aucs[ood_name + "/" + score_str].push_back(auc);
      }
    }
  }

  Json report;
  report["config_hash"] = config.hash();
  report["model"] = kind;
  if (!accs.empty()) {
    report["accuracy_mean"] = mean_of(accs);
    report["accuracy_std"] = std_of(accs);
    report["ece_mean"] = mean_of(eces);
    report["ece_std"] = std_of(eces);
  }
  report["auc_pr"] = Json::object();
  for (const auto& [key, values] : aucs) {
    table << "mean," << key.substr(0, key.find('/')) << ','
          << key.substr(key.find('/') + 1) << ',' << fmt(mean_of(values)) << '\n';
    table << "std," << key.substr(0, key.find('/')) << ','
          << key.substr(key.find('/') + 1) << ',' << fmt(std_of(values)) << '\n';
    report["auc_pr"][key] = {{"mean", mean_of(values)}, {"std", std_of(values)}};
  }
  open_out(config.out_dir + "/" + kind + "_report.json") << report.dump(2) << '\n';
}

void cmd_diagnose_ray(const ExperimentConfig& config, int n_directions,
                      const std::vector<double>& betas) {
  if (n_directions < 1) throw std::invalid_argument("diagnose-ray: need at least one direction");
  if (betas.empty()) throw std::invalid_argument("diagnose-ray: empty beta grid");
  ensure_out_dir(config.out_dir);
  ModelBundle bundle = load_bundle(checkpoint_path(config, config.seeds.front()));
  if (!bundle.has_energy()) {
    throw std::invalid_argument("diagnose-ray: model kind has no energy function");
  }
  const EnergyFn e = bundle.energy_fn();
  const int d = bundle.net().input_dim();

  std::ofstream os = open_out(config.out_dir + "/ray_diagnostics.csv");
  os << "direction,beta,energy,unnorm_density,verdict\n";
  Rng rng = derive_rng(config.seeds.front(), 6);
  for (int k = 0; k < n_directions; ++k) {
    RowVector dir(d);
    if (d == 2) {
      const double angle = 2.0 * M_PI * k / n_directions;
      dir << std::cos(angle), std::sin(angle);
    } else {
      std::normal_distribution<double> gauss(0.0, 1.0);
      for (int j = 0; j < d; ++j) dir[j] = gauss(rng);
      dir /= dir.norm();
    }
    const auto curve = energy_along_ray(e, dir, betas);
    const bool increasing = curve.back().second > curve.front().second;
    for (const auto& [beta, energy] : curve) {
      os << k << ',' << fmt(beta) << ',' << fmt(energy) << ','
         << fmt(std::exp(std::min(-energy, 700.0))) << ','
         << (increasing ? "increasing" : "not_increasing") << '\n';
    }
  }
}

void cmd_grid_density(const ExperimentConfig& config, double lo, double hi,
                      int resolution) {
  if (resolution < 2) throw std::invalid_argument("grid-density: resolution must be >= 2");
  if (!(hi > lo)) throw std::invalid_argument("grid-density: bounds must satisfy lo < hi");
  ensure_out_dir(config.out_dir);
  ModelBundle bundle = load_bundle(checkpoint_path(config, config.seeds.front()));
  if (!bundle.has_energy() || bundle.net().input_dim() != 2) {
    throw std::invalid_argument("grid-density: requires a 2-input classifier model");
  }
  std::ofstream os = open_out(config.out_dir + "/grid_density.csv");
  os << "x1,x2,energy,unnorm_density,confidence,diff_entropy\n";
  for (int i = 0; i < resolution; ++i) {
    for (int j = 0; j < resolution; ++j) {
      Matrix x(1, 2);
      x(0, 0) = lo + (hi - lo) * i / (resolution - 1);
      x(0, 1) = lo + (hi - lo) * j / (resolution - 1);
      const Matrix logits = bundle.net().forward_value(x);
      const double energy = marginal_energy(logits.row(0).transpose());
      const Vector probs = softmax(logits.row(0).transpose());
      DirichletParams dir((logits.row(0).transpose().array().exp() + 1.0).matrix());
      os << fmt(x(0, 0)) << ',' << fmt(x(0, 1)) << ',' << fmt(energy) << ','
         << fmt(std::exp(std::min(-energy, 700.0))) << ',' << fmt(probs.maxCoeff())
         << ',' << fmt(differential_entropy(dir)) << '\n';
    }
  }
}

void cmd_attack(const ExperimentConfig& config, const std::string& attack,
                const std::vector<double>& eps_list, const std::string& norm_str) {
  if (attack != "fgm" && attack != "pgd") {
    throw std::invalid_argument("attack: must be 'fgm' or 'pgd'");
  }
  if (eps_list.empty()) throw std::invalid_argument("attack: empty eps list");
  AttackNorm norm;
  if (norm_str == "l2") norm = AttackNorm::kL2;
  else if (norm_str == "linf") norm = AttackNorm::kLinf;
  else throw std::invalid_argument("attack: norm must be 'l2' or 'linf'");

  ensure_out_dir(config.out_dir);
  const unsigned long long seed = config.seeds.front();
  const ExperimentData data = make_data(config, seed);
  ModelBundle bundle = load_bundle(checkpoint_path(config, seed));
  if (bundle.kind() == ModelKind::kCouplingFlow) {
    throw std::invalid_argument("attack: flow-only model has no classifier to attack");
  }

  std::ofstream os = open_out(config.out_dir + "/attack_" + attack + ".csv");
  os << "eps,accuracy_under_attack,score,auc_pr\n";
  Rng score_rng = derive_rng(seed, 8);
  for (double eps : eps_list) {
    Matrix adv;
    if (attack == "fgm") {
      adv = fgm_attack(bundle.net(), data.test.features, data.test.labels, eps, norm);
    } else {
      adv = pgd_attack(bundle.net(), data.test.features, data.test.labels, eps,
                       eps / 4.0, 40, norm);
    }
    const double acc = accuracy(bundle.predict_probs(adv), data.test.labels);
    for (const std::string& score_str : config.eval.scores) {
      const ScoreName name = score_name_from_string(score_str);
      std::vector<double> clean = score(bundle, data.test.features, name, score_rng);
      const std::vector<double> attacked = score(bundle, adv, name, score_rng);
      std::vector<int> labels(clean.size(), 1);
      clean.insert(clean.end(), attacked.begin(), attacked.end());
      labels.insert(labels.end(), attacked.size(), 0);
      os << fmt(eps) << ',' << fmt(acc) << ',' << score_str << ','
         << fmt(auc_pr(clean, labels)) << '\n';
    }
  }
}

void cmd_calibrate(const ExperimentConfig& config) {
  ensure_out_dir(config.out_dir);
  const unsigned long long seed = config.seeds.front();
  const ExperimentData data = make_data(config, seed);
  if (data.val.size() == 0) throw std::invalid_argument("calibrate: empty validation split");
  ModelBundle bundle = load_bundle(checkpoint_path(config, seed));
  if (bundle.kind() == ModelKind::kCouplingFlow) {
    throw std::invalid_argument("calibrate: flow-only model has no classifier");
  }
  const Matrix logits_val = bundle.net().forward_value(data.val.features);
  const double t = temperature_fit(logits_val, data.val.labels);

  auto metrics_at = [&](double temp, double& nll, double& e) {
    nll = evidential_nll(logits_val, data.val.labels, temp);
    const Matrix probs = evidential_probs(logits_val, temp);
    std::vector<double> conf;
    std::vector<int> correct;
    confidences_and_correctness(probs, data.val.labels, conf, correct);
    e = ece(conf, correct, config.eval.ece_bins);
  };
  double nll_before, ece_before, nll_after, ece_after;
  metrics_at(1.0, nll_before, ece_before);
  metrics_at(t, nll_after, ece_after);

  Json report;
  report["config_hash"] = config.hash();
  report["temperature"] = t;
  report["nll_before"] = nll_before;
  report["nll_after"] = nll_after;
  report["ece_before"] = ece_before;
  report["ece_after"] = ece_after;
  open_out(config.out_dir + "/calibration.json") << report.dump(2) << '\n';

  const Matrix probs = evidential_probs(logits_val, t);
  std::vector<double> conf;
  std::vector<int> correct;
  confidences_and_correctness(probs, data.val.labels, conf, correct);
  const auto bins = calibration_curve(conf, correct, config.eval.ece_bins);
  std::ofstream os = open_out(config.out_dir + "/calibration_curve.csv");
  os << "bin,mean_confidence,accuracy,count\n";
  for (std::size_t b = 0; b < bins.size(); ++b) {
    os << b << ',';
    if (bins[b].count == 0) {
      os << "NA,NA,0\n";
    } else {
      os << fmt(bins[b].mean_confidence) << ',' << fmt(bins[b].accuracy) << ','
         << bins[b].count << '\n';
    }
  }
}

void cmd_embed_density(const ExperimentConfig& config) {
  ensure_out_dir(config.out_dir);
  const unsigned long long seed = config.seeds.front();
  const ExperimentData data = make_data(config, seed);
  ModelBundle bundle = load_bundle(checkpoint_path(config, seed));
  if (bundle.kind() == ModelKind::kCouplingFlow) {
    throw std::invalid_argument("embed-density: requires a classifier checkpoint");
  }
  if (bundle.net().layer_count() < 2) {
    throw std::invalid_argument("embed-density: classifier has no hidden layers");
  }

  auto train_scalar_ebm = [&](const Matrix& train_x, unsigned long long stream) {
    Rng rng = derive_rng(seed, stream);
    Network net = Network::mlp(static_cast<int>(train_x.cols()), {64, 64}, 1,
                               Activation::kRelu, FinalLayerMode::kFree, 0.0, rng);
    EnergyFn e(&net, EnergyMode::kScalar);
    ReplayBuffer buffer(config.model.buffer_capacity, static_cast<int>(train_x.cols()),
                        config.model.buffer_reinit);
    buffer.fit_box(train_x);
    AdamState adam;
    adam.lr = config.train.lr;
    adam.warmup_steps = config.train.warmup_steps;
    for (int step = 1; step <= config.train.steps; ++step) {
      Matrix batch = sample_batch(train_x, config.train.batch_size, rng, nullptr, {});
      Tape tape;
      LossGraph g = cd_loss(tape, e, batch, buffer, config.model.sgld,
                            config.model.data_noise_var, rng);
      tape.backward(g.loss);
      adam_step(net.parameters(), loss_gradients(tape, net, g), adam);
    }
    return net;
  };

  const Matrix embed_train = bundle.net().penultimate(data.train.features);
  Network embed_net = train_scalar_ebm(embed_train, 10);
  Network raw_net = train_scalar_ebm(data.train.features, 11);

  std::ofstream os = open_out(config.out_dir + "/embed_density.csv");
  os << "space,ood_set,auc_pr\n";
  Json report;
  report["config_hash"] = config.hash();
  report["embedding_dim"] = bundle.net().penultimate_dim();
  for (const auto& [ood_name, ood_set] : data.ood_sets) {
    const auto eval_space = [&](const Network& net, const Matrix& id_x, const Matrix& ood_x) {
      EnergyFn e(&net, EnergyMode::kScalar);
      const Vector id_e = e.energy_value(id_x);
      const Vector ood_e = e.energy_value(ood_x);
      std::vector<double> scores;
      std::vector<int> labels;
      for (Eigen::Index i = 0; i < id_e.size(); ++i) {
        scores.push_back(-id_e[i]);
        labels.push_back(1);
      }
      for (Eigen::Index i = 0; i < ood_e.size(); ++i) {
        scores.push_back(-ood_e[i]);
        labels.push_back(0);
      }
      return auc_pr(scores, labels);
    };
    const double auc_embed = eval_space(embed_net,
                                        bundle.net().penultimate(data.test.features),
                                        bundle.net().penultimate(ood_set));
    const double auc_raw = eval_space(raw_net, data.test.features, ood_set);
    os << "embedding," << ood_name << ',' << fmt(auc_embed) << '\n';
    os << "raw," << ood_name << ',' << fmt(auc_raw) << '\n';
    report["auc_pr"][ood_name] = {{"embedding", auc_embed}, {"raw", auc_raw}};
  }
  open_out(config.out_dir + "/embed_density.json") << report.dump(2) << '\n';
}

void cmd_gen_data(const ExperimentConfig& config) {
  ensure_out_dir(config.out_dir);
  const unsigned long long seed = config.seeds.front();
  const ExperimentData data = make_data(config, seed);
  auto dump = [&](const std::string& name, const Matrix& x, const std::vector<int>* y) {
    std::ofstream os = open_out(config.out_dir + "/" + name + ".csv");
    write_csv_matrix(os, x, y);
  };
  dump("train", data.train.features, &data.train.labels);
  dump("val", data.val.features, &data.val.labels);
  dump("test", data.test.features, &data.test.labels);
  for (const auto& [name, x] : data.ood_sets) dump("ood_" + name, x, nullptr);
}

void cmd_print_defaults(std::ostream& os) {
  os << ExperimentConfig::defaults().to_json_text();
}

}  // namespace epn
