#ifndef EPN_MODELS_HPP
#define EPN_MODELS_HPP

#include <iosfwd>
#include <optional>
#include <string>

#include "epn/dirichlet.hpp"
#include "epn/ebm_losses.hpp"
#include "epn/flow.hpp"
#include "epn/optim.hpp"

namespace epn {

enum class ModelKind {
  kCe,
  kDpn,
  kJem,
  kEpnM,
  kEnergyOod,
  kOe,
  kEnsemble,
  kMcDropout,
  kCouplingFlow,
};

ModelKind model_kind_from_name(const std::string& name);
const char* model_kind_name(ModelKind kind);

struct LossWeights {
  double gamma = 1.0;         // CE weight in the joint objective
  double lambda_kl = 1.0;     // evidential classification term
  double lambda_ent = 1e-4;   // Dirichlet-entropy smoothness term
  double lambda_margin = 0.1; // energy margin term
  double lambda_oe = 0.5;     // outlier-exposure term
  double dpn_beta_y = 100.0;  // target concentration at the label
};

// --- loss building blocks (each records onto the given tape) ---

/// Mean negative log softmax probability of the true class.
Var ce_loss(Tape& tape, Var logits, const std::vector<int>& labels);

/// Reverse KL from Dir(target) to the predicted Dir(exp logits):
/// sharp target (1, .., 1 + beta_y at the label) on ID plus flat Dir(1..1)
/// target on OOD, both unit-weighted.
Var dpn_loss(Tape& tape, Var logits_id, const std::vector<int>& labels,
             Var logits_ood, double beta_y);

/// mean KL(Dir(beta from detached logits) || Dir(1 + exp logits)).
Var epn_kl_term(Tape& tape, Var logits, const std::vector<int>& labels);

/// mean differential entropy of Dir(exp logits).
Var dirichlet_entropy_term(Tape& tape, Var logits);

/// Cross-entropy of OOD predictions against the uniform distribution,
/// shifted so that uniform logits give exactly 0.
Var oe_loss(Tape& tape, Var logits_ood);

// --- calibrated / stochastic prediction ---

/// Evidential predictive probabilities with temperature T:
/// p_c = (1 + exp(f_c / T)) / sum_k (1 + exp(f_k / T)), overflow-safe.
Matrix evidential_probs(const Matrix& logits, double temperature);

/// Temperature minimizing the validation NLL of evidential_probs via a
/// log-grid plus golden-section refinement; T = 1 on degenerate logits.
double temperature_fit(const Matrix& logits_val, const std::vector<int>& labels_val);

double evidential_nll(const Matrix& logits, const std::vector<int>& labels,
                      double temperature);

struct PredictiveStats {
  Matrix mean_probs;  // N x C
  Matrix var_probs;   // N x C across members / passes
  Vector spread;      // per-row sum of class variances
};

PredictiveStats ensemble_predict(const std::vector<Network>& members,
                                 const Matrix& x);

PredictiveStats mc_dropout_predict(const Network& net, const Matrix& x,
                                   int t_passes, Rng& rng);

// --- trainable bundle ---

struct ModelConfig {
  ModelKind kind = ModelKind::kCe;
  int in_dim = 2;
  int out_dim = 3;
  std::vector<int> hidden = {100, 100, 100, 100, 100};
  Activation activation = Activation::kRelu;
  FinalLayerMode final_mode = FinalLayerMode::kFree;
  double dropout_rate = 0.0;
  int ensemble_size = 5;
  LossWeights weights;
  SgldConfig sgld;
  double data_noise_var = 0.1;
  std::size_t buffer_capacity = 10000;
  double buffer_reinit = 0.05;
  double lr = 1e-3;
  int warmup_steps = 2500;
  int flow_depth = 8;
  int flow_width = 64;
};

struct TrainStepStats {
  double loss = 0.0;
  double density_term = 0.0;
  double class_term = 0.0;
  double reg_term = 0.0;
  double grad_norm = 0.0;
};

/// One model plus everything needed to train and score it.
class ModelBundle {
 public:
  static ModelBundle create(const ModelConfig& config, Rng& rng);

  /// One optimizer step. `ood` may be empty for kinds that ignore it;
  /// kinds that need auxiliary outliers (dpn, oe, energy_ood) throw if it
  /// is missing.
  TrainStepStats train_step(const Matrix& x, const std::vector<int>& labels,
                            const Matrix& ood, Rng& rng);

  /// Fits the replay-buffer base sampler to the training data range.
  void fit_buffer(const Matrix& train_features);

  const ModelConfig& config() const { return config_; }
  ModelKind kind() const { return config_.kind; }
  const Network& net() const { return members_.at(0); }
  Network& net() { return members_.at(0); }
  const std::vector<Network>& members() const { return members_; }
  const CouplingFlow& flow() const;
  CouplingFlow& flow();
  bool has_flow() const { return flow_.has_value(); }
  bool has_energy() const;
  EnergyFn energy_fn() const;

  /// Deterministic class probabilities (softmax; ensemble mean for kEnsemble).
  Matrix predict_probs(const Matrix& x) const;
  /// Evidential probabilities (1 + exp(f)) normalized; single-net kinds only.
  Matrix predict_evidential(const Matrix& x, double temperature = 1.0) const;

  void save(std::ostream& os) const;
  static ModelBundle load(std::istream& is);

 private:
  ModelConfig config_;
  std::vector<Network> members_;
  std::optional<CouplingFlow> flow_;
  std::optional<ReplayBuffer> buffer_;
  std::vector<AdamState> adam_;
  long step_ = 0;
};

}  // namespace epn

#endif  // EPN_MODELS_HPP
