#pragma once

#include <cstdint>
#include <fstream>
#include <string>

#include <json.hpp>

#include "duet/error.hpp"
#include "duet/eval.hpp"
#include "duet/generator.hpp"
#include "duet/transfer.hpp"

namespace duet {

// Flat key-value run configuration. Defaults are the reference full-scale
// training setup: 512-d hidden states, Adam at 4e-4, alpha = 0.5, tau = 0.5,
// 20-epoch G pretraining, 30-epoch D pretraining, answer length cap 8.
// Unknown keys are rejected.
struct RunConfig {
  // model
  std::size_t embed = 300;
  std::size_t hidden = 512;

  // training
  double lr = 4e-4;
  std::size_t batch_size = 16;
  std::size_t g_pretrain_epochs = 20;
  std::size_t d_pretrain_epochs = 30;
  std::size_t transfer_epochs = 5;
  double alpha = 0.5;
  double tau = 0.5;
  double lambda = 0.002;
  std::size_t n_negatives = 0;  // 0 = every non-gt candidate
  std::size_t max_answer_len = 8;
  double val_fraction = 0.1;
  double max_grad_norm = 0.0;
  std::string mode = "transfer";
  std::uint64_t seed = 1;

  // vocabulary
  std::size_t min_count = 5;

  // evaluation
  std::string score_norm = "mean";     // mean | sum log-likelihood
  std::string tie_policy = "favor_gt";  // favor_gt | pessimistic
  std::string eval_model = "g";         // g | d
  std::string eval_split = "val";       // val | train | all

  // synthetic data
  std::size_t synth_dialogs = 200;
  std::size_t synth_vocab = 50;
  std::size_t synth_k = 4;
  std::size_t synth_candidates = 20;
  std::size_t synth_rounds = 6;

  // generation
  std::size_t samples = 3;
  std::size_t generate_dialog = 0;

  // paths
  std::string dialogs;
  std::string features;
  std::string vocab;
  std::string init_g;
  std::string init_d;

  void apply(const nlohmann::json& object) {
    if (!object.is_object()) throw ContractError("config must be a JSON object");
    for (const auto& [key, value] : object.items()) apply_one(key, value);
  }

  // `--set key=value`: the value is parsed as a JSON scalar when possible,
  // otherwise taken as a string.
  void set_kv(const std::string& key, const std::string& raw) {
    nlohmann::json v;
    try {
      v = nlohmann::json::parse(raw);
      if (!v.is_number() && !v.is_boolean()) v = raw;
    } catch (const nlohmann::json::exception&) {
      v = raw;
    }
    apply_one(key, v);
  }

  void load_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config " + path);
    nlohmann::json j;
    try {
      is >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ": " + e.what());
    }
    apply(j);
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"embed", embed},
                          {"hidden", hidden},
                          {"lr", lr},
                          {"batch_size", batch_size},
                          {"g_pretrain_epochs", g_pretrain_epochs},
                          {"d_pretrain_epochs", d_pretrain_epochs},
                          {"transfer_epochs", transfer_epochs},
                          {"alpha", alpha},
                          {"tau", tau},
                          {"lambda", lambda},
                          {"n_negatives", n_negatives},
                          {"max_answer_len", max_answer_len},
                          {"val_fraction", val_fraction},
                          {"max_grad_norm", max_grad_norm},
                          {"mode", mode},
                          {"seed", seed},
                          {"min_count", min_count},
                          {"score_norm", score_norm},
                          {"tie_policy", tie_policy},
                          {"eval_model", eval_model},
                          {"eval_split", eval_split},
                          {"synth_dialogs", synth_dialogs},
                          {"synth_vocab", synth_vocab},
                          {"synth_k", synth_k},
                          {"synth_candidates", synth_candidates},
                          {"synth_rounds", synth_rounds},
                          {"samples", samples},
                          {"generate_dialog", generate_dialog},
                          {"dialogs", dialogs},
                          {"features", features},
                          {"vocab", vocab},
                          {"init_g", init_g},
                          {"init_d", init_d}};
  }

  TransferConfig transfer_config() const {
    TransferConfig t;
    t.alpha = alpha;
    t.g_pretrain_epochs = g_pretrain_epochs;
    t.d_pretrain_epochs = d_pretrain_epochs;
    t.transfer_epochs = transfer_epochs;
    t.mode = transfer_mode_from(mode);
    t.tau = tau;
    t.lr = lr;
    t.batch_size = batch_size;
    t.seed = seed;
    t.lambda = lambda;
    t.n_negatives = n_negatives;
    t.max_answer_len = max_answer_len;
    t.val_fraction = val_fraction;
    t.max_grad_norm = max_grad_norm;
    t.score_norm = parse_score_norm();
    t.tie_policy = parse_tie_policy();
    return t;
  }

  ScoreNorm parse_score_norm() const {
    if (score_norm == "mean") return ScoreNorm::MeanLogLikelihood;
    if (score_norm == "sum") return ScoreNorm::SumLogLikelihood;
    throw ContractError("score_norm must be mean or sum, got \"" + score_norm + "\"");
  }

  TiePolicy parse_tie_policy() const {
    if (tie_policy == "favor_gt") return TiePolicy::FavorGroundTruth;
    if (tie_policy == "pessimistic") return TiePolicy::PessimisticGroundTruth;
    throw ContractError("tie_policy must be favor_gt or pessimistic, got \"" + tie_policy + "\"");
  }

 private:
  static double as_double(const nlohmann::json& v, const std::string& key) {
    if (v.is_number()) return v.get<double>();
    if (v.is_string()) {
      try {
        return std::stod(v.get<std::string>());
      } catch (...) {
      }
    }
    throw ContractError("config key \"" + key + "\" needs a number");
  }

  static std::size_t as_size(const nlohmann::json& v, const std::string& key) {
    const double d = as_double(v, key);
    if (d < 0 || d != static_cast<double>(static_cast<std::size_t>(d)))
      throw ContractError("config key \"" + key + "\" needs a non-negative integer");
    return static_cast<std::size_t>(d);
  }

  static std::string as_string(const nlohmann::json& v, const std::string& key) {
    if (v.is_string()) return v.get<std::string>();
    throw ContractError("config key \"" + key + "\" needs a string");
  }

  void apply_one(const std::string& key, const nlohmann::json& v) {
    if (key == "embed") embed = as_size(v, key);
    else if (key == "hidden") hidden = as_size(v, key);
    else if (key == "lr") lr = as_double(v, key);
    else if (key == "batch_size") batch_size = as_size(v, key);
    else if (key == "g_pretrain_epochs") g_pretrain_epochs = as_size(v, key);
    else if (key == "d_pretrain_epochs") d_pretrain_epochs = as_size(v, key);
    else if (key == "transfer_epochs") transfer_epochs = as_size(v, key);
    else if (key == "alpha") alpha = as_double(v, key);
    else if (key == "tau") tau = as_double(v, key);
    else if (key == "lambda") lambda = as_double(v, key);
    else if (key == "n_negatives") n_negatives = as_size(v, key);
    else if (key == "max_answer_len") max_answer_len = as_size(v, key);
    else if (key == "val_fraction") val_fraction = as_double(v, key);
    else if (key == "max_grad_norm") max_grad_norm = as_double(v, key);
    else if (key == "mode") mode = as_string(v, key);
    else if (key == "seed") seed = static_cast<std::uint64_t>(as_double(v, key));
    else if (key == "min_count") min_count = as_size(v, key);
    else if (key == "score_norm") score_norm = as_string(v, key);
    else if (key == "tie_policy") tie_policy = as_string(v, key);
    else if (key == "eval_model") eval_model = as_string(v, key);
    else if (key == "eval_split") eval_split = as_string(v, key);
    else if (key == "synth_dialogs") synth_dialogs = as_size(v, key);
    else if (key == "synth_vocab") synth_vocab = as_size(v, key);
    else if (key == "synth_k") synth_k = as_size(v, key);
    else if (key == "synth_candidates") synth_candidates = as_size(v, key);
    else if (key == "synth_rounds") synth_rounds = as_size(v, key);
    else if (key == "samples") samples = as_size(v, key);
    else if (key == "generate_dialog") generate_dialog = as_size(v, key);
    else if (key == "dialogs") dialogs = as_string(v, key);
    else if (key == "features") features = as_string(v, key);
    else if (key == "vocab") vocab = as_string(v, key);
    else if (key == "init_g") init_g = as_string(v, key);
    else if (key == "init_d") init_d = as_string(v, key);
    else throw ContractError("unknown config key \"" + key + "\"");
  }
};

}  // namespace duet
