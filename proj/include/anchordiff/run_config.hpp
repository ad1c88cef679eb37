#pragma once

// One flat JSON document carrying every experiment knob. Parsing is
// strict (unknown keys rejected), serialization round-trips losslessly,
// and a stable content hash ties checkpoints and reports back to the
// exact configuration that produced them.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "anchordiff/anchors.hpp"
#include "anchordiff/corpus.hpp"
#include "anchordiff/diffusion.hpp"
#include "anchordiff/moclip.hpp"
#include "anchordiff/rng.hpp"

namespace anchordiff {

struct RunConfig {
  // corpus generation
  int clip_count = 320;
  int min_frames = 32;
  int max_frames = 96;
  double fps = 20.0;

  // motion-text encoder
  int moclip_d_model = 64;
  int moclip_d_out = 64;
  int moclip_layers = 2;
  int moclip_heads = 2;
  double moclip_tau = 0.07;
  int moclip_stage1_steps = 2000;
  int moclip_stage2_steps = 1000;
  int moclip_batch = 16;
  double moclip_lr = 1e-3;

  // denoiser backbone
  int base_channels = 32;
  std::vector<int> channel_mults = {1, 2, 2};
  int heads = 2;
  int d_emb = 64;
  std::string tap = "down3";

  // diffusion training
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::string predict = "eps";
  bool dal = true;
  double lambda_fre = 0.1;
  double lambda_tem = 0.5;
  int k = 64;
  std::string strategy = "dynamic";
  std::int64_t n_decay = 0;  // 0: decay over the planned step count
  int steps = 2000;
  int batch = 16;
  int window = 64;
  double lr = 2e-4;
  double cond_drop = 0.1;
  int anchor_hidden = 128;

  // sampling
  double omega = 2.5;
  int sample_steps = 50;
  int sample_frames = 64;

  std::uint64_t seed = 1;
};

// Short strategy names are the config vocabulary; the verbose enum
// names are accepted on input for convenience.
inline WeightingStrategy parse_strategy(const std::string& s) {
  if (s == "dynamic") return WeightingStrategy::dynamic_cosine;
  if (s == "static") return WeightingStrategy::static_fixed;
  if (s == "learnable") return WeightingStrategy::learnable_global;
  return weighting_strategy_from_name(s);
}

inline std::string strategy_config_name(WeightingStrategy w) {
  switch (w) {
    case WeightingStrategy::dynamic_cosine: return "dynamic";
    case WeightingStrategy::static_fixed: return "static";
    case WeightingStrategy::learnable_global: return "learnable";
  }
  throw std::invalid_argument("unknown weighting strategy");
}

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["clip_count"] = c.clip_count;
  j["min_frames"] = c.min_frames;
  j["max_frames"] = c.max_frames;
  j["fps"] = c.fps;
  j["moclip_d_model"] = c.moclip_d_model;
  j["moclip_d_out"] = c.moclip_d_out;
  j["moclip_layers"] = c.moclip_layers;
  j["moclip_heads"] = c.moclip_heads;
  j["moclip_tau"] = c.moclip_tau;
  j["moclip_stage1_steps"] = c.moclip_stage1_steps;
  j["moclip_stage2_steps"] = c.moclip_stage2_steps;
  j["moclip_batch"] = c.moclip_batch;
  j["moclip_lr"] = c.moclip_lr;
  j["base_channels"] = c.base_channels;
  j["channel_mults"] = c.channel_mults;
  j["heads"] = c.heads;
  j["d_emb"] = c.d_emb;
  j["tap"] = c.tap;
  j["T"] = c.T;
  j["beta_start"] = c.beta_start;
  j["beta_end"] = c.beta_end;
  j["predict"] = c.predict;
  j["dal"] = c.dal;
  j["lambda_fre"] = c.lambda_fre;
  j["lambda_tem"] = c.lambda_tem;
  j["k"] = c.k;
  j["strategy"] = c.strategy;
  j["n_decay"] = c.n_decay;
  j["steps"] = c.steps;
  j["batch"] = c.batch;
  j["window"] = c.window;
  j["lr"] = c.lr;
  j["cond_drop"] = c.cond_drop;
  j["anchor_hidden"] = c.anchor_hidden;
  j["omega"] = c.omega;
  j["sample_steps"] = c.sample_steps;
  j["sample_frames"] = c.sample_frames;
  j["seed"] = c.seed;
  return j;
}

namespace detail {

inline int config_int(const nlohmann::json& v, const std::string& key) {
  if (!v.is_number_integer())
    throw std::invalid_argument("run config: field '" + key + "' must be an integer");
  return v.get<int>();
}

inline std::int64_t config_i64(const nlohmann::json& v, const std::string& key) {
  if (!v.is_number_integer())
    throw std::invalid_argument("run config: field '" + key + "' must be an integer");
  return v.get<std::int64_t>();
}

inline std::uint64_t config_u64(const nlohmann::json& v, const std::string& key) {
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() &&
                                 v.get<std::int64_t>() < 0))
    throw std::invalid_argument("run config: field '" + key + "' must be a non-negative integer");
  return v.get<std::uint64_t>();
}

inline double config_double(const nlohmann::json& v, const std::string& key) {
  if (!v.is_number())
    throw std::invalid_argument("run config: field '" + key + "' must be a number");
  return v.get<double>();
}

inline bool config_bool(const nlohmann::json& v, const std::string& key) {
  if (!v.is_boolean())
    throw std::invalid_argument("run config: field '" + key + "' must be a boolean");
  return v.get<bool>();
}

inline std::string config_string(const nlohmann::json& v, const std::string& key) {
  if (!v.is_string())
    throw std::invalid_argument("run config: field '" + key + "' must be a string");
  return v.get<std::string>();
}

inline std::vector<int> config_int_list(const nlohmann::json& v, const std::string& key) {
  if (!v.is_array())
    throw std::invalid_argument("run config: field '" + key + "' must be an integer array");
  std::vector<int> out;
  for (const auto& e : v) out.push_back(config_int(e, key));
  return out;
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("run config: expected a JSON object");
  RunConfig c;
  for (const auto& [key, v] : j.items()) {
    using namespace detail;
    if (key == "clip_count") c.clip_count = config_int(v, key);
    else if (key == "min_frames") c.min_frames = config_int(v, key);
    else if (key == "max_frames") c.max_frames = config_int(v, key);
    else if (key == "fps") c.fps = config_double(v, key);
    else if (key == "moclip_d_model") c.moclip_d_model = config_int(v, key);
    else if (key == "moclip_d_out") c.moclip_d_out = config_int(v, key);
    else if (key == "moclip_layers") c.moclip_layers = config_int(v, key);
    else if (key == "moclip_heads") c.moclip_heads = config_int(v, key);
    else if (key == "moclip_tau") c.moclip_tau = config_double(v, key);
    else if (key == "moclip_stage1_steps") c.moclip_stage1_steps = config_int(v, key);
    else if (key == "moclip_stage2_steps") c.moclip_stage2_steps = config_int(v, key);
    else if (key == "moclip_batch") c.moclip_batch = config_int(v, key);
    else if (key == "moclip_lr") c.moclip_lr = config_double(v, key);
    else if (key == "base_channels") c.base_channels = config_int(v, key);
    else if (key == "channel_mults") c.channel_mults = config_int_list(v, key);
    else if (key == "heads") c.heads = config_int(v, key);
    else if (key == "d_emb") c.d_emb = config_int(v, key);
    else if (key == "tap") c.tap = config_string(v, key);
    else if (key == "T") c.T = config_int(v, key);
    else if (key == "beta_start") c.beta_start = config_double(v, key);
    else if (key == "beta_end") c.beta_end = config_double(v, key);
    else if (key == "predict") c.predict = config_string(v, key);
    else if (key == "dal") c.dal = config_bool(v, key);
    else if (key == "lambda_fre") c.lambda_fre = config_double(v, key);
    else if (key == "lambda_tem") c.lambda_tem = config_double(v, key);
    else if (key == "k") c.k = config_int(v, key);
    else if (key == "strategy") c.strategy = config_string(v, key);
    else if (key == "n_decay") c.n_decay = config_i64(v, key);
    else if (key == "steps") c.steps = config_int(v, key);
    else if (key == "batch") c.batch = config_int(v, key);
    else if (key == "window") c.window = config_int(v, key);
    else if (key == "lr") c.lr = config_double(v, key);
    else if (key == "cond_drop") c.cond_drop = config_double(v, key);
    else if (key == "anchor_hidden") c.anchor_hidden = config_int(v, key);
    else if (key == "omega") c.omega = config_double(v, key);
    else if (key == "sample_steps") c.sample_steps = config_int(v, key);
    else if (key == "sample_frames") c.sample_frames = config_int(v, key);
    else if (key == "seed") c.seed = config_u64(v, key);
    else throw std::invalid_argument("run config: unknown field '" + key + "'");
  }
  return c;
}

inline RunConfig parse_run_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument(std::string("run config: invalid JSON: ") + e.what());
  }
  return run_config_from_json(j);
}

inline std::string dump_run_config(const RunConfig& c) {
  return run_config_to_json(c).dump(2) + "\n";
}

// Hash of the compact canonical dump (nlohmann sorts keys), so two
// configs share a hash exactly when every field matches.
inline std::string config_hash_hex(const RunConfig& c) {
  const std::string canon = run_config_to_json(c).dump();
  const std::uint64_t h = fnv1a64(canon);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---- materializing module configs ----

inline CorpusConfig corpus_config(const RunConfig& c) {
  CorpusConfig out;
  out.clip_count = c.clip_count;
  out.min_frames = c.min_frames;
  out.max_frames = c.max_frames;
  out.fps = static_cast<float>(c.fps);
  out.seed = c.seed;
  return out;
}

inline MoClipConfig moclip_config(const RunConfig& c) {
  MoClipConfig out;
  out.d_model = c.moclip_d_model;
  out.d_out = c.moclip_d_out;
  out.layers = c.moclip_layers;
  out.heads = c.moclip_heads;
  out.tau_init = c.moclip_tau;
  return out;
}

inline MoClipTrainConfig moclip_train_config(const RunConfig& c) {
  MoClipTrainConfig out;
  out.stage1_steps = c.moclip_stage1_steps;
  out.stage2_steps = c.moclip_stage2_steps;
  out.batch = c.moclip_batch;
  out.window = c.window;
  out.lr = c.moclip_lr;
  out.seed = c.seed;
  return out;
}

inline TrainerOptions trainer_options(const RunConfig& c) {
  TrainerOptions out;
  out.denoiser.base_channels = c.base_channels;
  out.denoiser.mults = c.channel_mults;
  out.denoiser.heads = c.heads;
  out.denoiser.d_emb = c.d_emb;
  out.denoiser.d_c = c.moclip_d_model;  // cross-attention reads encoder token features
  out.denoiser.tap = tap_site_from_name(c.tap);
  out.T = c.T;
  out.beta_start = c.beta_start;
  out.beta_end = c.beta_end;
  out.predict = predict_target_from_name(c.predict);
  out.dal = c.dal;
  out.lambda_fre = c.lambda_fre;
  out.lambda_tem = c.lambda_tem;
  out.k = c.k;
  out.strategy = parse_strategy(c.strategy);
  out.n_decay = c.n_decay;
  out.steps = c.steps;
  out.batch = c.batch;
  out.window = c.window;
  out.lr = c.lr;
  out.cond_drop = c.cond_drop;
  out.anchor_hidden = c.anchor_hidden;
  out.seed = c.seed;
  return out;
}

inline SampleOptions sample_options(const RunConfig& c) {
  SampleOptions out;
  out.frames = c.sample_frames;
  out.steps = c.sample_steps;
  out.omega = c.omega;
  out.predict = predict_target_from_name(c.predict);
  out.seed = c.seed;
  return out;
}

inline void validate_run_config(const RunConfig& c) {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("run config: ") + what);
  };
  need(c.clip_count >= 4, "clip_count must be at least 4");
  need(c.min_frames >= 2, "min_frames must be at least 2");
  need(c.max_frames >= c.min_frames, "max_frames must not undercut min_frames");
  need(c.fps > 0.0, "fps must be positive");
  need(c.moclip_heads >= 1 && c.moclip_d_model % c.moclip_heads == 0,
       "moclip_d_model must divide evenly across moclip_heads");
  need(c.moclip_d_out >= 1 && c.moclip_layers >= 1, "encoder sizes must be positive");
  need(c.moclip_tau > 0.0, "moclip_tau must be positive");
  need(c.moclip_stage1_steps >= 0 && c.moclip_stage2_steps >= 0 && c.moclip_batch >= 2,
       "encoder training sizes are out of range");
  need(c.moclip_lr > 0.0 && c.lr > 0.0, "learning rates must be positive");
  need(c.T >= 1, "T must be at least 1");
  need(c.beta_start > 0.0 && c.beta_start <= c.beta_end && c.beta_end < 1.0,
       "beta endpoints must satisfy 0 < beta_start <= beta_end < 1");
  need(c.lambda_fre >= 0.0 && c.lambda_tem >= 0.0, "lambdas must be non-negative");
  need(c.k >= 1, "k must be at least 1");
  need(c.n_decay >= 0, "n_decay must be non-negative");
  need(c.steps >= 1 && c.batch >= 1 && c.window >= 2, "training sizes are out of range");
  need(c.cond_drop >= 0.0 && c.cond_drop <= 1.0, "cond_drop must lie in [0, 1]");
  need(c.anchor_hidden >= 1, "anchor_hidden must be positive");
  need(c.sample_steps >= 1 && c.sample_frames >= 1, "sampling sizes are out of range");
  if (parse_strategy(c.strategy) == WeightingStrategy::learnable_global)
    need(c.dal && c.lambda_fre > 0.0 && c.lambda_tem > 0.0,
         "learnable weighting needs dal on and positive initial lambdas");
  // round-trips through the enum parsers; throws on unknown names
  trainer_options(c).denoiser.validate();
  make_schedule(2, c.beta_start, c.beta_end);
}

}  // namespace anchordiff
