#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "epn/runner.hpp"

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir;
  long long seed_override = -1;
  int threads = 1;
};

void add_common(CLI::App* cmd, CommonOpts& opts, bool config_required = true) {
  auto* c = cmd->add_option("--config", opts.config_path, "experiment config file (JSON)");
  if (config_required) c->required();
  cmd->add_option("--seed-override", opts.seed_override, "replace the config's seed list with one seed");
  cmd->add_option("--out", opts.out_dir, "output directory (overrides config)");
  cmd->add_option("--threads", opts.threads, "worker threads for linear algebra");
}

epn::ExperimentConfig resolve(const CommonOpts& opts) {
  epn::ExperimentConfig config = epn::ExperimentConfig::defaults();
  if (!opts.config_path.empty()) {
    if (!std::ifstream(opts.config_path)) {
      throw epn::IoError("cannot open config '" + opts.config_path + "'");
    }
    config = epn::ExperimentConfig::from_file(opts.config_path);
  }
  if (opts.seed_override >= 0) {
    config.seeds = {static_cast<unsigned long long>(opts.seed_override)};
  }
  if (!opts.out_dir.empty()) config.out_dir = opts.out_dir;
  Eigen::setNbThreads(opts.threads);
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"energy-prior networks: training and OOD evaluation"};
  app.require_subcommand(1);

  CommonOpts train_opts, eval_opts, ray_opts, grid_opts, attack_opts;
  CommonOpts calib_opts, embed_opts, gen_opts;

  auto* train = app.add_subcommand("train", "train one model per seed");
  add_common(train, train_opts);

  auto* eval_ood = app.add_subcommand("eval-ood", "OOD detection report over seeds and scores");
  add_common(eval_ood, eval_opts);

  auto* ray = app.add_subcommand("diagnose-ray", "energy along rays of increasing norm");
  add_common(ray, ray_opts);
  int n_directions = 8;
  std::vector<double> betas = {1, 2, 5, 10, 20, 50, 100};
  ray->add_option("--directions", n_directions, "number of ray directions");
  ray->add_option("--betas", betas, "ascending positive scale factors");

  auto* grid = app.add_subcommand("grid-density", "2-D grid of energy/confidence values");
  add_common(grid, grid_opts);
  double lo = -10.0, hi = 10.0;
  int resolution = 100;
  grid->add_option("--lo", lo, "lower grid bound (both axes)");
  grid->add_option("--hi", hi, "upper grid bound (both axes)");
  grid->add_option("--resolution", resolution, "grid points per axis");

  auto* attack = app.add_subcommand("attack", "adversarially perturbed ID data as an OOD set");
  add_common(attack, attack_opts);
  std::string attack_kind = "pgd", attack_norm = "linf";
  std::vector<double> eps_list = {0.1, 0.3};
  attack->add_option("--attack", attack_kind, "fgm or pgd");
  attack->add_option("--eps", eps_list, "perturbation budgets");
  attack->add_option("--norm", attack_norm, "l2 or linf");

  auto* calibrate = app.add_subcommand("calibrate", "temperature scaling on the validation split");
  add_common(calibrate, calib_opts);

  auto* embed = app.add_subcommand("embed-density", "scalar energy model on penultimate activations");
  add_common(embed, embed_opts);

  auto* gen = app.add_subcommand("gen-data", "export the configured datasets as CSV");
  add_common(gen, gen_opts);

  auto* defaults = app.add_subcommand("print-defaults", "dump the full default config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (train->parsed()) epn::cmd_train(resolve(train_opts));
    if (eval_ood->parsed()) epn::cmd_eval_ood(resolve(eval_opts));
    if (ray->parsed()) epn::cmd_diagnose_ray(resolve(ray_opts), n_directions, betas);
    if (grid->parsed()) epn::cmd_grid_density(resolve(grid_opts), lo, hi, resolution);
    if (attack->parsed()) epn::cmd_attack(resolve(attack_opts), attack_kind, eps_list, attack_norm);
    if (calibrate->parsed()) epn::cmd_calibrate(resolve(calib_opts));
    if (embed->parsed()) epn::cmd_embed_density(resolve(embed_opts));
    if (gen->parsed()) epn::cmd_gen_data(resolve(gen_opts));
    if (defaults->parsed()) epn::cmd_print_defaults(std::cout);
  } catch (const epn::IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return 3;
  } catch (const epn::DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid configuration: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
