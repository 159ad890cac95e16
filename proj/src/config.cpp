#include "epn/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace epn {

namespace {

using Json = nlohmann::ordered_json;

Json to_json(const ExperimentConfig& c) {
  Json j;
  j["dataset"] = {
      {"generator", c.dataset.generator},
      {"csv_path", c.dataset.csv_path},
      {"label_column", c.dataset.label_column},
      {"n_per_class", c.dataset.n_per_class},
      {"overlap", c.dataset.overlap},
      {"val_fraction", c.dataset.val_fraction},
      {"test_fraction", c.dataset.test_fraction},
      {"standardize", c.dataset.standardize},
      {"holdout", c.dataset.holdout},
  };
  j["ood"] = {
      {"sets", c.ood.sets},
      {"n_samples", c.ood.n_samples},
      {"oodomain_scale", c.ood.oodomain_scale},
  };
  j["model"] = {
      {"kind", model_kind_name(c.model.kind)},
      {"hidden", c.model.hidden},
      {"final_mode", c.model.final_mode == FinalLayerMode::kNegExp ? "negexp" : "free"},
      {"dropout_rate", c.model.dropout_rate},
      {"ensemble_size", c.model.ensemble_size},
      {"flow_depth", c.model.flow_depth},
      {"flow_width", c.model.flow_width},
      {"weights",
       {
           {"gamma", c.model.weights.gamma},
           {"lambda_kl", c.model.weights.lambda_kl},
           {"lambda_ent", c.model.weights.lambda_ent},
           {"lambda_margin", c.model.weights.lambda_margin},
           {"lambda_oe", c.model.weights.lambda_oe},
           {"dpn_beta_y", c.model.weights.dpn_beta_y},
       }},
      {"sgld",
       {
           {"step_size", c.model.sgld.step_size},
           {"steps", c.model.sgld.steps},
           {"noise_scale", c.model.sgld.noise_scale},
           {"grad_clip", c.model.sgld.grad_clip},
       }},
      {"data_noise_var", c.model.data_noise_var},
      {"buffer_capacity", c.model.buffer_capacity},
      {"buffer_reinit", c.model.buffer_reinit},
  };
  j["train"] = {
      {"steps", c.train.steps},
      {"batch_size", c.train.batch_size},
      {"lr", c.train.lr},
      {"warmup_steps", c.train.warmup_steps},
      {"log_every", c.train.log_every},
  };
  j["eval"] = {
      {"scores", c.eval.scores},
      {"ece_bins", c.eval.ece_bins},
      {"model_selection", c.eval.model_selection},
  };
  j["seeds"] = c.seeds;
  j["out_dir"] = c.out_dir;
  return j;
}

void reject_unknown_keys(const Json& user, const Json& schema, const std::string& path) {
  if (!user.is_object()) return;
  for (const auto& [key, value] : user.items()) {
    if (!schema.contains(key)) {
      throw std::invalid_argument("config: unknown key '" + path + key + "'");
    }
    if (value.is_object()) reject_unknown_keys(value, schema.at(key), path + key + ".");
  }
}

template <typename T>
void read(const Json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

ExperimentConfig from_json(const Json& j) {
  ExperimentConfig c = ExperimentConfig::defaults();
  reject_unknown_keys(j, to_json(c), "");

  if (j.contains("dataset")) {
    const Json& d = j.at("dataset");
    read(d, "generator", c.dataset.generator);
    read(d, "csv_path", c.dataset.csv_path);
    read(d, "label_column", c.dataset.label_column);
    read(d, "n_per_class", c.dataset.n_per_class);
    read(d, "overlap", c.dataset.overlap);
    read(d, "val_fraction", c.dataset.val_fraction);
    read(d, "test_fraction", c.dataset.test_fraction);
    read(d, "standardize", c.dataset.standardize);
    read(d, "holdout", c.dataset.holdout);
  }
  if (j.contains("ood")) {
    const Json& d = j.at("ood");
    read(d, "sets", c.ood.sets);
    read(d, "n_samples", c.ood.n_samples);
    read(d, "oodomain_scale", c.ood.oodomain_scale);
  }
  if (j.contains("model")) {
    const Json& m = j.at("model");
    if (m.contains("kind")) c.model.kind = model_kind_from_name(m.at("kind").get<std::string>());
    read(m, "hidden", c.model.hidden);
    if (m.contains("final_mode")) {
      const std::string mode = m.at("final_mode").get<std::string>();
      if (mode == "negexp") c.model.final_mode = FinalLayerMode::kNegExp;
      else if (mode == "free") c.model.final_mode = FinalLayerMode::kFree;
      else throw std::invalid_argument("config: final_mode must be 'free' or 'negexp'");
    }
    read(m, "dropout_rate", c.model.dropout_rate);
    read(m, "ensemble_size", c.model.ensemble_size);
    read(m, "flow_depth", c.model.flow_depth);
    read(m, "flow_width", c.model.flow_width);
    if (m.contains("weights")) {
      const Json& w = m.at("weights");
      read(w, "gamma", c.model.weights.gamma);
      read(w, "lambda_kl", c.model.weights.lambda_kl);
      read(w, "lambda_ent", c.model.weights.lambda_ent);
      read(w, "lambda_margin", c.model.weights.lambda_margin);
      read(w, "lambda_oe", c.model.weights.lambda_oe);
      read(w, "dpn_beta_y", c.model.weights.dpn_beta_y);
    }
    if (m.contains("sgld")) {
      const Json& s = m.at("sgld");
      read(s, "step_size", c.model.sgld.step_size);
      read(s, "steps", c.model.sgld.steps);
      read(s, "noise_scale", c.model.sgld.noise_scale);
      read(s, "grad_clip", c.model.sgld.grad_clip);
    }
    read(m, "data_noise_var", c.model.data_noise_var);
    read(m, "buffer_capacity", c.model.buffer_capacity);
    read(m, "buffer_reinit", c.model.buffer_reinit);
  }
  if (j.contains("train")) {
    const Json& t = j.at("train");
    read(t, "steps", c.train.steps);
    read(t, "batch_size", c.train.batch_size);
    read(t, "lr", c.train.lr);
    read(t, "warmup_steps", c.train.warmup_steps);
    read(t, "log_every", c.train.log_every);
  }
  if (j.contains("eval")) {
    const Json& e = j.at("eval");
    read(e, "scores", c.eval.scores);
    read(e, "ece_bins", c.eval.ece_bins);
    read(e, "model_selection", c.eval.model_selection);
    if (c.eval.model_selection != "accuracy" && c.eval.model_selection != "ood_aucpr") {
      throw std::invalid_argument("config: model_selection must be 'accuracy' or 'ood_aucpr'");
    }
  }
  read(j, "seeds", c.seeds);
  read(j, "out_dir", c.out_dir);

  if (c.seeds.empty()) throw std::invalid_argument("config: seeds must be non-empty");
  // Keep the optimizer settings visible to the bundle builder.
  c.model.lr = c.train.lr;
  c.model.warmup_steps = c.train.warmup_steps;
  return c;
}

}  // namespace

ExperimentConfig ExperimentConfig::defaults() { return ExperimentConfig{}; }

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const std::exception& e) {
    throw std::invalid_argument(std::string("config: parse error: ") + e.what());
  }
  return from_json(j);
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return from_json_text(ss.str());
}

std::string ExperimentConfig::to_json_text() const {
  return to_json(*this).dump(2) + "\n";
}

std::string ExperimentConfig::hash() const {
  // FNV-1a over the canonical serialization.
  const std::string text = to_json_text();
  unsigned long long h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", h);
  return std::string(buf);
}

}  // namespace epn
