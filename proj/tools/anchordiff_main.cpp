// Command-line workbench tying the modules together: corpus generation,
// encoder and denoiser training, sampling, evaluation, and report
// generation. Every command resolves one flat config (file plus flag
// overrides, flags win), writes artifacts into a locked run directory,
// and prints one JSON result line on stdout; failures print an error
// JSON and exit nonzero. Progress goes to stderr.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "anchordiff/corpus.hpp"
#include "anchordiff/dct.hpp"
#include "anchordiff/diffusion.hpp"
#include "anchordiff/grad_probe.hpp"
#include "anchordiff/metrics.hpp"
#include "anchordiff/moclip.hpp"
#include "anchordiff/run_config.hpp"
#include "anchordiff/rundir.hpp"

namespace anchordiff {
namespace {

namespace fs = std::filesystem;

void emit_result(const nlohmann::json& j) { std::cout << j.dump() << "\n"; }

void note(const std::string& s) { std::cerr << s << "\n"; }

// ---- config resolution: file first, explicit flags win ----

struct ConfigFlags {
  std::optional<int> clip_count, min_frames, max_frames;
  std::optional<double> fps;
  std::optional<int> moclip_d_model, moclip_d_out, moclip_layers, moclip_heads;
  std::optional<double> moclip_tau;
  std::optional<int> moclip_stage1_steps, moclip_stage2_steps, moclip_batch;
  std::optional<double> moclip_lr;
  std::optional<int> base_channels;
  std::vector<int> channel_mults;
  CLI::Option* channel_mults_opt = nullptr;
  std::optional<int> heads, d_emb;
  std::optional<std::string> tap;
  std::optional<int> T;
  std::optional<double> beta_start, beta_end;
  std::optional<std::string> predict;
  std::optional<bool> dal;
  std::optional<double> lambda_fre, lambda_tem;
  std::optional<int> k;
  std::optional<std::string> strategy;
  std::optional<std::int64_t> n_decay;
  std::optional<int> steps, batch, window;
  std::optional<double> lr, cond_drop;
  std::optional<int> anchor_hidden;
  std::optional<double> omega;
  std::optional<int> sample_steps, sample_frames;
  std::optional<std::uint64_t> seed;

  void apply(RunConfig& c) const {
    if (clip_count) c.clip_count = *clip_count;
    if (min_frames) c.min_frames = *min_frames;
    if (max_frames) c.max_frames = *max_frames;
    if (fps) c.fps = *fps;
    if (moclip_d_model) c.moclip_d_model = *moclip_d_model;
    if (moclip_d_out) c.moclip_d_out = *moclip_d_out;
    if (moclip_layers) c.moclip_layers = *moclip_layers;
    if (moclip_heads) c.moclip_heads = *moclip_heads;
    if (moclip_tau) c.moclip_tau = *moclip_tau;
    if (moclip_stage1_steps) c.moclip_stage1_steps = *moclip_stage1_steps;
    if (moclip_stage2_steps) c.moclip_stage2_steps = *moclip_stage2_steps;
    if (moclip_batch) c.moclip_batch = *moclip_batch;
    if (moclip_lr) c.moclip_lr = *moclip_lr;
    if (base_channels) c.base_channels = *base_channels;
    if (channel_mults_opt && channel_mults_opt->count() > 0) c.channel_mults = channel_mults;
    if (heads) c.heads = *heads;
    if (d_emb) c.d_emb = *d_emb;
    if (tap) c.tap = *tap;
    if (T) c.T = *T;
    if (beta_start) c.beta_start = *beta_start;
    if (beta_end) c.beta_end = *beta_end;
    if (predict) c.predict = *predict;
    if (dal) c.dal = *dal;
    if (lambda_fre) c.lambda_fre = *lambda_fre;
    if (lambda_tem) c.lambda_tem = *lambda_tem;
    if (k) c.k = *k;
    if (strategy) c.strategy = *strategy;
    if (n_decay) c.n_decay = *n_decay;
    if (steps) c.steps = *steps;
    if (batch) c.batch = *batch;
    if (window) c.window = *window;
    if (lr) c.lr = *lr;
    if (cond_drop) c.cond_drop = *cond_drop;
    if (anchor_hidden) c.anchor_hidden = *anchor_hidden;
    if (omega) c.omega = *omega;
    if (sample_steps) c.sample_steps = *sample_steps;
    if (sample_frames) c.sample_frames = *sample_frames;
    if (seed) c.seed = *seed;
  }
};

void add_config_flags(CLI::App* cmd, ConfigFlags& f) {
  cmd->add_option("--clip-count", f.clip_count, "number of corpus clips");
  cmd->add_option("--min-frames", f.min_frames, "shortest clip length");
  cmd->add_option("--max-frames", f.max_frames, "longest clip length");
  cmd->add_option("--fps", f.fps, "corpus frame rate");
  cmd->add_option("--moclip-d-model", f.moclip_d_model, "encoder model width");
  cmd->add_option("--moclip-d-out", f.moclip_d_out, "encoder embedding width");
  cmd->add_option("--moclip-layers", f.moclip_layers, "encoder transformer layers");
  cmd->add_option("--moclip-heads", f.moclip_heads, "encoder attention heads");
  cmd->add_option("--moclip-tau", f.moclip_tau, "initial contrastive temperature");
  cmd->add_option("--moclip-stage1-steps", f.moclip_stage1_steps,
                  "encoder stage-1 steps (text tower frozen)");
  cmd->add_option("--moclip-stage2-steps", f.moclip_stage2_steps, "encoder stage-2 steps");
  cmd->add_option("--moclip-batch", f.moclip_batch, "encoder batch size");
  cmd->add_option("--moclip-lr", f.moclip_lr, "encoder learning rate");
  cmd->add_option("--base-channels", f.base_channels, "denoiser base width");
  f.channel_mults_opt =
      cmd->add_option("--channel-mults", f.channel_mults, "denoiser width multipliers")
          ->delimiter(',');
  cmd->add_option("--heads", f.heads, "denoiser attention heads");
  cmd->add_option("--d-emb", f.d_emb, "timestep embedding width");
  cmd->add_option("--tap", f.tap, "anchor tap site (down1|down2|down3|bottleneck)");
  cmd->add_option("--T", f.T, "diffusion timesteps");
  cmd->add_option("--beta-start", f.beta_start, "first noise schedule beta");
  cmd->add_option("--beta-end", f.beta_end, "last noise schedule beta");
  cmd->add_option("--predict", f.predict, "prediction target (eps|x0)");
  cmd->add_option("--dal", f.dal, "anchor losses on or off (true|false)");
  cmd->add_option("--lambda-fre", f.lambda_fre, "frequency anchor weight");
  cmd->add_option("--lambda-tem", f.lambda_tem, "temporal anchor weight");
  cmd->add_option("--k", f.k, "retained DCT coefficients");
  cmd->add_option("--strategy", f.strategy, "anchor weighting (dynamic|static|learnable)");
  cmd->add_option("--n-decay", f.n_decay, "anchor decay horizon in steps (0: use --steps)");
  cmd->add_option("--steps", f.steps, "denoiser training steps");
  cmd->add_option("--batch", f.batch, "denoiser batch size");
  cmd->add_option("--window", f.window, "training crop length in frames");
  cmd->add_option("--lr", f.lr, "denoiser learning rate");
  cmd->add_option("--cond-drop", f.cond_drop, "conditioning drop probability");
  cmd->add_option("--anchor-hidden", f.anchor_hidden, "anchor head hidden width");
  cmd->add_option("--omega", f.omega, "guidance scale");
  cmd->add_option("--sample-steps", f.sample_steps, "sampler steps");
  cmd->add_option("--sample-frames", f.sample_frames, "sampled clip length in frames");
  cmd->add_option("--seed", f.seed, "root seed");
}

RunConfig resolve_config(const std::string& config_path, const ConfigFlags& flags) {
  RunConfig cfg;
  if (!config_path.empty()) {
    try {
      cfg = read_run_config(config_path);
    } catch (const RunError&) {
      throw;
    } catch (const std::exception& e) {
      throw RunError("invalid_config", std::string(config_path) + ": " + e.what());
    }
  }
  flags.apply(cfg);
  try {
    validate_run_config(cfg);
  } catch (const std::invalid_argument& e) {
    throw RunError("invalid_config", e.what());
  }
  return cfg;
}

// ---- shared pieces ----

struct EncoderBundle {
  ParamStore<float> store;
  std::unique_ptr<MoClip<float>> model;
  nlohmann::json meta;
};

std::unique_ptr<EncoderBundle> make_encoder(const RunConfig& cfg) {
  auto b = std::make_unique<EncoderBundle>();
  Rng rng = Rng::stream(cfg.seed, "moclip");
  b->model = std::make_unique<MoClip<float>>(b->store, moclip_config(cfg), rng);
  return b;
}

std::unique_ptr<EncoderBundle> load_encoder(const RunConfig& cfg, const fs::path& ckpt,
                                            const std::string& corpus_hash) {
  if (!fs::exists(ckpt / "meta.json"))
    throw RunError("missing_input", "no encoder checkpoint at " + ckpt.string());
  auto b = make_encoder(cfg);
  try {
    b->meta = load_checkpoint(ckpt, b->store);
  } catch (const std::exception& e) {
    throw RunError("config_mismatch",
                   std::string("encoder checkpoint does not fit this config: ") + e.what());
  }
  if (b->meta.value("kind", "") != "moclip")
    throw RunError("config_mismatch", ckpt.string() + " is not an encoder checkpoint");
  if (b->meta.value("corpus_hash", "") != corpus_hash)
    throw RunError("config_mismatch", "encoder checkpoint was trained on a different corpus");
  return b;
}

Corpus load_corpus_checked(const std::string& dir) {
  if (dir.empty()) throw RunError("invalid_config", "--corpus is required");
  if (!fs::exists(fs::path(dir) / "manifest.json"))
    throw RunError("missing_input", "no corpus at " + dir);
  return load_corpus(dir);
}

std::vector<std::size_t> split_ids(const Corpus& corpus, const std::string& name) {
  if (name == "all") {
    std::vector<std::size_t> out(corpus.clips.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = i;
    return out;
  }
  if (name == "train") return corpus.split_indices(Split::train);
  if (name == "val") return corpus.split_indices(Split::val);
  if (name == "test") return corpus.split_indices(Split::test);
  throw RunError("invalid_config", "unknown split '" + name + "'");
}

std::vector<MotionClip> normalized_copies(const Corpus& corpus,
                                          const std::vector<std::size_t>& ids) {
  std::vector<MotionClip> out;
  out.reserve(ids.size());
  for (std::size_t i : ids) {
    MotionClip c = corpus.clips[i];
    corpus.stats.apply(c);
    out.push_back(std::move(c));
  }
  return out;
}

FeatureSet embed_motion_clips(const MoClip<float>& model,
                              const std::vector<const MotionClip*>& normalized) {
  NoGradGuard ng;
  FeatureSet out;
  for (std::size_t at = 0; at < normalized.size(); at += 16) {
    const std::size_t end = std::min(at + 16, normalized.size());
    std::vector<const MotionClip*> chunk(normalized.begin() + static_cast<std::ptrdiff_t>(at),
                                         normalized.begin() + static_cast<std::ptrdiff_t>(end));
    FeatureSet part =
        features_from_tensor(model.encode_motion(MotionBatch<float>::from_clips(chunk)));
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

FeatureSet embed_caption_tokens(const MoClip<float>& model,
                                const std::vector<std::vector<int>>& captions) {
  NoGradGuard ng;
  FeatureSet out;
  for (std::size_t at = 0; at < captions.size(); at += 16) {
    const std::size_t end = std::min(at + 16, captions.size());
    std::vector<std::vector<int>> chunk(captions.begin() + static_cast<std::ptrdiff_t>(at),
                                        captions.begin() + static_cast<std::ptrdiff_t>(end));
    FeatureSet part =
        features_from_tensor(model.encode_text(TokenBatch<float>::from_captions(chunk)));
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

nlohmann::json mean_std(const std::vector<double>& xs) {
  double m = 0.0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  double v = 0.0;
  for (double x : xs) v += (x - m) * (x - m);
  v = xs.size() > 1 ? v / static_cast<double>(xs.size() - 1) : 0.0;
  return {{"mean", m}, {"std", std::sqrt(v)}};
}

// ---- gen-data ----

struct GenDataOpts {
  std::string config_path;
  std::string run;
  ConfigFlags flags;
};

void run_gen_data(const GenDataOpts& o) {
  RunConfig cfg = resolve_config(o.config_path, o.flags);
  RunDir rd = RunDir::open(o.run);
  write_text_file(rd.file("config.json"), dump_run_config(cfg));
  note("building corpus of " + std::to_string(cfg.clip_count) + " clips");
  Corpus corpus = build_corpus(corpus_config(cfg));
  save_corpus(rd.file("corpus"), corpus);
  nlohmann::json res;
  res["command"] = "gen-data";
  res["corpus"] = rd.file("corpus").string();
  res["corpus_hash"] = corpus_hash_hex(rd.file("corpus"));
  res["clips"] = corpus.clips.size();
  res["config_hash"] = config_hash_hex(cfg);
  emit_result(res);
}

// ---- moclip-train ----

struct MoClipTrainOpts {
  std::string config_path;
  std::string run;
  std::string corpus_dir;
  ConfigFlags flags;
};

void run_moclip_train(const MoClipTrainOpts& o) {
  RunConfig cfg = resolve_config(o.config_path, o.flags);
  RunDir rd = RunDir::open(o.run);
  write_text_file(rd.file("config.json"), dump_run_config(cfg));
  Corpus corpus = load_corpus_checked(o.corpus_dir);
  const std::string chash = corpus_hash_hex(o.corpus_dir);

  auto enc = make_encoder(cfg);
  note("training encoder: " + std::to_string(cfg.moclip_stage1_steps) + " + " +
       std::to_string(cfg.moclip_stage2_steps) + " steps");
  std::vector<MoClipTrainRow> log;
  train_moclip(enc->store, *enc->model, corpus, moclip_train_config(cfg), &log);

  {
    std::ofstream os(rd.file("moclip_train.csv"));
    if (!os) throw RunError("io_error", "cannot write " + rd.file("moclip_train.csv").string());
    os << moclip_csv_header() << "\n";
    for (const auto& row : log) os << moclip_row_csv(row) << "\n";
  }

  // held-out retrieval over the full val pool
  nlohmann::json retrieval;
  auto val_ids = corpus.split_indices(Split::val);
  if (val_ids.empty()) val_ids = corpus.split_indices(Split::test);
  if (!val_ids.empty()) {
    std::vector<MotionClip> clips = normalized_copies(corpus, val_ids);
    std::vector<const MotionClip*> ptrs;
    for (const auto& c : clips) ptrs.push_back(&c);
    std::vector<std::vector<int>> caps;
    for (std::size_t i : val_ids) caps.push_back(corpus.records[i].caption);
    RetrievalReport rep = retrieval_topk(embed_motion_clips(*enc->model, ptrs),
                                         embed_caption_tokens(*enc->model, caps), caps, {1, 2, 3});
    retrieval["pool"] = val_ids.size();
    retrieval["top1"] = rep.topk[1];
    retrieval["top2"] = rep.topk[2];
    retrieval["top3"] = rep.topk[3];
    retrieval["duplicate_captions"] = rep.duplicate_captions;
  }

  nlohmann::json extra;
  extra["kind"] = "moclip";
  extra["config_hash"] = config_hash_hex(cfg);
  extra["corpus_hash"] = chash;
  save_checkpoint(rd.file("moclip.lmp1"), enc->store, extra);

  nlohmann::json res;
  res["command"] = "moclip-train";
  res["checkpoint"] = rd.file("moclip.lmp1").string();
  res["rows"] = log.size();
  res["final_loss"] = log.empty() ? 0.0 : log.back().loss;
  res["tau"] = log.empty() ? cfg.moclip_tau : log.back().tau;
  res["retrieval"] = retrieval;
  res["params_hash"] = params_hash_hex(enc->store);
  res["config_hash"] = config_hash_hex(cfg);
  res["corpus_hash"] = chash;
  emit_result(res);
}

// ---- train ----

struct TrainOpts {
  std::string config_path;
  std::string run;
  std::string corpus_dir;
  std::string moclip_ckpt;
  bool probe = false;
  int probe_flush = 100;
  ConfigFlags flags;
};

void run_train(const TrainOpts& o) {
  RunConfig cfg = resolve_config(o.config_path, o.flags);
  RunDir rd = RunDir::open(o.run);
  write_text_file(rd.file("config.json"), dump_run_config(cfg));
  Corpus corpus = load_corpus_checked(o.corpus_dir);
  const std::string chash = corpus_hash_hex(o.corpus_dir);
  auto enc = load_encoder(cfg, o.moclip_ckpt, chash);

  DiffusionTrainer<float> trainer(corpus, *enc->model, trainer_options(cfg));

  std::ofstream log(rd.file("train.csv"));
  if (!log) throw RunError("io_error", "cannot write " + rd.file("train.csv").string());
  log << train_csv_header() << "\n";
  std::ofstream probe_log;
  if (o.probe) {
    probe_log.open(rd.file("gradprobe.csv"));
    if (!probe_log)
      throw RunError("io_error", "cannot write " + rd.file("gradprobe.csv").string());
    probe_log << probe_csv_header() << "\n";
  }
  GradProbe probe;
  std::int64_t probe_rows = 0;
  const int flush_every = std::max(1, o.probe_flush);

  // the probe hook runs mid-step with gradients live; the returned record
  // carries the final wall-clock time, so CSV rows are written from it
  DiffusionTrainer<float>::ProbeHook hook = nullptr;
  if (o.probe) {
    hook = [&](const TrainStepRecord& rec, const ParamStore<float>& store) {
      for (const ProbeRow& r : probe.observe(rec.step, rec.t, store)) {
        probe_log << probe_row_csv(r) << "\n";
        ++probe_rows;
      }
    };
  }
  note("training denoiser for " + std::to_string(cfg.steps) + " steps");
  for (int i = 0; i < cfg.steps; ++i) {
    const TrainStepRecord rec = trainer.step(hook);
    log << train_row_csv(rec) << "\n";
    if (rec.step % flush_every == 0) {
      log.flush();
      if (o.probe) probe_log.flush();
    }
    if (rec.step % 100 == 0 || rec.step == cfg.steps)
      note("step " + std::to_string(rec.step) + "  total " + std::to_string(rec.total));
  }
  const double val = trainer.validation_ddpm();

  nlohmann::json extra;
  extra["kind"] = "train";
  extra["config_hash"] = config_hash_hex(cfg);
  extra["corpus_hash"] = chash;
  extra["steps"] = trainer.steps_done();
  extra["val_ddpm"] = val;
  save_checkpoint(rd.file("train.lmp1"), trainer.store(), extra);

  nlohmann::json res;
  res["command"] = "train";
  res["checkpoint"] = rd.file("train.lmp1").string();
  res["steps"] = trainer.steps_done();
  res["val_ddpm"] = val;
  res["probe_rows"] = probe_rows;
  res["params_hash"] = params_hash_hex(trainer.store());
  res["config_hash"] = config_hash_hex(cfg);
  res["corpus_hash"] = chash;
  emit_result(res);
}

// loads a denoiser checkpoint into a trainer shell so sampling and
// evaluation see exactly the trained parameter registry
nlohmann::json load_train_checkpoint(DiffusionTrainer<float>& trainer, const fs::path& ckpt,
                                     const std::string& corpus_hash) {
  if (!fs::exists(ckpt / "meta.json"))
    throw RunError("missing_input", "no denoiser checkpoint at " + ckpt.string());
  nlohmann::json meta;
  try {
    meta = load_checkpoint(ckpt, trainer.store());
  } catch (const std::exception& e) {
    throw RunError("config_mismatch",
                   std::string("denoiser checkpoint does not fit this config: ") + e.what());
  }
  if (meta.value("kind", "") != "train")
    throw RunError("config_mismatch", ckpt.string() + " is not a denoiser checkpoint");
  if (meta.value("corpus_hash", "") != corpus_hash)
    throw RunError("config_mismatch", "denoiser checkpoint was trained on a different corpus");
  return meta;
}

// ---- sample ----

struct SampleCmdOpts {
  std::string config_path;
  std::string run;
  std::string corpus_dir;
  std::string ckpt;
  std::string moclip_ckpt;
  std::string caption;
  std::string tag = "sample";
  ConfigFlags flags;
};

void run_sample(const SampleCmdOpts& o) {
  RunConfig cfg = resolve_config(o.config_path, o.flags);
  if (o.caption.empty()) throw RunError("invalid_config", "--caption is required");
  RunDir rd = RunDir::open(o.run);
  write_text_file(rd.file("config.json"), dump_run_config(cfg));
  Corpus corpus = load_corpus_checked(o.corpus_dir);
  const std::string chash = corpus_hash_hex(o.corpus_dir);
  auto enc = load_encoder(cfg, o.moclip_ckpt, chash);
  DiffusionTrainer<float> trainer(corpus, *enc->model, trainer_options(cfg));
  load_train_checkpoint(trainer, o.ckpt, chash);

  SampleOptions sopt = sample_options(cfg);
  note("sampling " + std::to_string(sopt.frames) + " frames for \"" + o.caption + "\"");
  MotionClip clip = sample_motion(trainer.denoiser(), *enc->model, trainer.schedule(),
                                  corpus.stats, o.caption,
                                  static_cast<int>(std::lround(corpus.fps)), sopt);

  fs::create_directories(rd.file("samples"));
  const fs::path clip_path = rd.file("samples/" + o.tag + ".lmb1");
  {
    std::ofstream os(clip_path, std::ios::binary);
    if (!os) throw RunError("io_error", "cannot write " + clip_path.string());
    write_lmb1(os, clip);
    if (!os) throw RunError("io_error", "failed writing " + clip_path.string());
  }
  nlohmann::json side;
  side["caption"] = o.caption;
  side["seed"] = sopt.seed;
  side["omega"] = sopt.omega;
  side["steps"] = sopt.steps;
  side["frames"] = clip.frames;
  side["fps"] = corpus.fps;
  side["predict"] = cfg.predict;
  side["config_hash"] = config_hash_hex(cfg);
  side["corpus_hash"] = chash;
  side["checkpoint_hash"] = params_hash_hex(trainer.store());
  const fs::path side_path = rd.file("samples/" + o.tag + ".json");
  write_text_file(side_path, side.dump(2) + "\n");

  nlohmann::json res;
  res["command"] = "sample";
  res["clip"] = clip_path.string();
  res["sidecar"] = side_path.string();
  res["frames"] = clip.frames;
  emit_result(res);
}

// ---- eval ----

struct EvalOpts {
  std::string config_path;
  std::string run;
  std::string corpus_dir;
  std::string ckpt;
  std::string moclip_ckpt;
  int gen_clips = 32;
  int pool = 32;
  int pairs = 300;
  int mm_prompts = 1;
  int repeats = 1;
  ConfigFlags flags;
};

void run_eval(const EvalOpts& o) {
  RunConfig cfg = resolve_config(o.config_path, o.flags);
  RunDir rd = RunDir::open(o.run);
  write_text_file(rd.file("config.json"), dump_run_config(cfg));
  Corpus corpus = load_corpus_checked(o.corpus_dir);
  const std::string chash = corpus_hash_hex(o.corpus_dir);
  auto enc = load_encoder(cfg, o.moclip_ckpt, chash);
  DiffusionTrainer<float> trainer(corpus, *enc->model, trainer_options(cfg));
  nlohmann::json meta = load_train_checkpoint(trainer, o.ckpt, chash);
  if (meta.value("config_hash", "") != config_hash_hex(cfg))
    throw RunError("config_mismatch",
                   "checkpoint was trained under a different config; evaluate with that config");

  auto ids = corpus.split_indices(Split::test);
  if (ids.size() < 2) ids = corpus.split_indices(Split::val);
  if (ids.size() < 2)
    throw RunError("invalid_config", "corpus has no held-out clips to evaluate against");

  std::vector<MotionClip> real_clips = normalized_copies(corpus, ids);
  std::vector<const MotionClip*> real_ptrs;
  for (const auto& c : real_clips) real_ptrs.push_back(&c);
  FeatureSet real = embed_motion_clips(*enc->model, real_ptrs);

  // generated pool: captions cycle through the held-out clips, one
  // derived sampling seed per clip
  const int n_gen = std::max(2, o.gen_clips);
  std::uint64_t sample_index = 0;
  SampleOptions sopt = sample_options(cfg);
  const int fps = static_cast<int>(std::lround(corpus.fps));
  auto draw_sample = [&](const std::vector<int>& caption_tokens) {
    sopt.seed = cfg.seed + 1000003ULL * (++sample_index);
    return sample_motion(trainer.denoiser(), *enc->model, trainer.schedule(), corpus.stats,
                         caption_text(caption_tokens), fps, sopt);
  };

  std::vector<std::size_t> gen_src;
  std::vector<MotionClip> gen_clips;
  std::vector<std::vector<int>> gen_caps;
  for (int i = 0; i < n_gen; ++i) {
    const std::size_t src = ids[static_cast<std::size_t>(i) % ids.size()];
    gen_src.push_back(src);
    gen_caps.push_back(corpus.records[src].caption);
    gen_clips.push_back(draw_sample(corpus.records[src].caption));
    if ((i + 1) % 4 == 0 || i + 1 == n_gen)
      note("sampled " + std::to_string(i + 1) + "/" + std::to_string(n_gen));
  }
  for (auto& c : gen_clips) corpus.stats.apply(c);
  std::vector<const MotionClip*> gen_ptrs;
  for (const auto& c : gen_clips) gen_ptrs.push_back(&c);
  FeatureSet gen = embed_motion_clips(*enc->model, gen_ptrs);
  FeatureSet caps = embed_caption_tokens(*enc->model, gen_caps);

  const double fid_v = fid(real, gen);
  const double mm = mm_dist(gen, caps);

  Rng eval_rng = Rng::stream(cfg.seed, "eval");
  const std::size_t pool = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, o.pool)),
                                                 caps.size());
  std::vector<double> top1s, top2s, top3s, divs;
  for (int r = 0; r < std::max(1, o.repeats); ++r) {
    RPrecision rp = r_precision(gen, caps, pool, eval_rng);
    top1s.push_back(rp.top1);
    top2s.push_back(rp.top2);
    top3s.push_back(rp.top3);
    divs.push_back(diversity(gen, static_cast<std::size_t>(std::max(1, o.pairs)), eval_rng));
  }

  nlohmann::json mm_json;
  if (o.mm_prompts > 0) {
    std::vector<FeatureSet> per_prompt;
    for (int p = 0; p < o.mm_prompts; ++p) {
      const std::size_t src = ids[static_cast<std::size_t>(p) % ids.size()];
      std::vector<MotionClip> group;
      for (std::size_t g = 0; g < kMultimodalitySamples; ++g)
        group.push_back(draw_sample(corpus.records[src].caption));
      for (auto& c : group) corpus.stats.apply(c);
      std::vector<const MotionClip*> ptrs;
      for (const auto& c : group) ptrs.push_back(&c);
      per_prompt.push_back(embed_motion_clips(*enc->model, ptrs));
      note("multimodality prompt " + std::to_string(p + 1) + "/" + std::to_string(o.mm_prompts));
    }
    mm_json = multimodality(per_prompt);
  }

  nlohmann::json report;
  report["command"] = "eval";
  report["fid"] = fid_v;
  report["mm_dist"] = mm;
  report["r_precision"] = {{"top1", mean_std(top1s)}, {"top2", mean_std(top2s)},
                           {"top3", mean_std(top3s)}};
  report["diversity"] = mean_std(divs);
  report["multimodality"] = mm_json;
  report["counts"] = {{"real", real.size()},        {"generated", gen.size()},
                      {"pool", pool},               {"pairs", std::max(1, o.pairs)},
                      {"mm_prompts", o.mm_prompts}, {"repeats", std::max(1, o.repeats)}};
  report["seed"] = cfg.seed;
  report["config_hash"] = config_hash_hex(cfg);
  report["corpus_hash"] = chash;
  report["checkpoint_hash"] = params_hash_hex(trainer.store());
  write_text_file(rd.file("eval.json"), report.dump(2) + "\n");
  emit_result(report);
}

// ---- gradprobe-report ----

struct ProbeReportOpts {
  std::string run;
  std::string probe_csv;
};

void run_probe_report(const ProbeReportOpts& o) {
  RunDir rd = RunDir::open(o.run);
  const fs::path src = o.probe_csv.empty() ? rd.file("gradprobe.csv") : fs::path(o.probe_csv);
  std::ifstream is(src);
  if (!is) throw RunError("missing_input", "cannot open " + src.string());
  std::vector<ProbeRow> rows;
  try {
    rows = parse_probe_csv(is);
  } catch (const std::exception& e) {
    throw RunError("io_error", src.string() + ": " + e.what());
  }
  const std::vector<ProbeSummary> sums = summarize_probe(rows);

  const fs::path out = rd.file("gradprobe_summary.csv");
  {
    std::ofstream os(out);
    if (!os) throw RunError("io_error", "cannot write " + out.string());
    os << "t_bucket,layer,path,block,observations,mean_grad_l2,vanishing_fraction\n";
    os.precision(17);
    for (const auto& s : sums)
      os << s.t_bucket << ',' << s.layer << ',' << probe_path_name(s.path) << ',' << s.block
         << ',' << s.observations << ',' << s.mean_grad_l2 << ',' << s.vanishing_fraction
         << "\n";
  }

  nlohmann::json res;
  res["command"] = "gradprobe-report";
  res["rows"] = rows.size();
  res["blocks"] = sums.size();
  res["summary"] = out.string();
  try {
    res["down_path_health"] = down_path_health(rows);
  } catch (const std::exception&) {
    res["down_path_health"] = nullptr;
  }
  emit_result(res);
}

// ---- dct-analyze ----

struct DctAnalyzeOpts {
  std::string config_path;
  std::string run;
  std::string corpus_dir;
  std::string split = "train";
  ConfigFlags flags;
};

void run_dct_analyze(const DctAnalyzeOpts& o) {
  RunConfig cfg = resolve_config(o.config_path, o.flags);
  RunDir rd = RunDir::open(o.run);
  write_text_file(rd.file("config.json"), dump_run_config(cfg));
  Corpus corpus = load_corpus_checked(o.corpus_dir);
  const std::vector<std::size_t> ids = split_ids(corpus, o.split);
  if (ids.empty()) throw RunError("invalid_config", "split '" + o.split + "' is empty");

  std::vector<FrameMatrixView> views;
  for (std::size_t i : ids)
    views.push_back({corpus.clips[i].data.data(), corpus.clips[i].frames,
                     corpus.clips[i].dims});
  const EnergySummary es = energy_spectrum(views);

  const fs::path out = rd.file("dct_energy.csv");
  {
    std::ofstream os(out);
    if (!os) throw RunError("io_error", "cannot write " + out.string());
    os << dct_csv_header() << "\n";
    os.precision(17);
    for (std::size_t i = 0; i < es.mean_abs.size(); ++i)
      os << i << ',' << es.mean_abs[i] << ',' << es.cum_ratio[i] << "\n";
  }

  nlohmann::json res;
  res["command"] = "dct-analyze";
  res["csv"] = out.string();
  res["rows"] = es.mean_abs.size();
  res["clips"] = ids.size();
  res["k"] = cfg.k;
  res["retained_at_k"] = es.retained(cfg.k);
  emit_result(res);
}

}  // namespace
}  // namespace anchordiff

int main(int argc, char** argv) {
  using namespace anchordiff;
  CLI::App app{"text-to-motion diffusion workbench"};
  app.require_subcommand(1);
  // repeated flags keep the last value, so overrides can be appended
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  GenDataOpts gen;
  CLI::App* c_gen = app.add_subcommand("gen-data", "generate the synthetic caption-motion corpus");
  c_gen->add_option("--config", gen.config_path, "JSON config file");
  c_gen->add_option("--run", gen.run, "run directory name")->required();
  add_config_flags(c_gen, gen.flags);
  c_gen->callback([&] { run_gen_data(gen); });

  MoClipTrainOpts mc;
  CLI::App* c_mc = app.add_subcommand("moclip-train", "train the motion-text encoder");
  c_mc->add_option("--config", mc.config_path, "JSON config file");
  c_mc->add_option("--run", mc.run, "run directory name")->required();
  c_mc->add_option("--corpus", mc.corpus_dir, "corpus directory")->required();
  add_config_flags(c_mc, mc.flags);
  c_mc->callback([&] { run_moclip_train(mc); });

  TrainOpts tr;
  CLI::App* c_tr = app.add_subcommand("train", "train the anchored diffusion denoiser");
  c_tr->add_option("--config", tr.config_path, "JSON config file");
  c_tr->add_option("--run", tr.run, "run directory name")->required();
  c_tr->add_option("--corpus", tr.corpus_dir, "corpus directory")->required();
  c_tr->add_option("--moclip", tr.moclip_ckpt, "encoder checkpoint directory")->required();
  c_tr->add_flag("--probe", tr.probe, "record per-block gradient norms");
  c_tr->add_option("--probe-flush", tr.probe_flush, "flush logs every N steps");
  add_config_flags(c_tr, tr.flags);
  c_tr->callback([&] { run_train(tr); });

  SampleCmdOpts sa;
  CLI::App* c_sa = app.add_subcommand("sample", "sample a motion clip from a caption");
  c_sa->add_option("--config", sa.config_path, "JSON config file");
  c_sa->add_option("--run", sa.run, "run directory name")->required();
  c_sa->add_option("--corpus", sa.corpus_dir, "corpus directory")->required();
  c_sa->add_option("--checkpoint", sa.ckpt, "denoiser checkpoint directory")->required();
  c_sa->add_option("--moclip", sa.moclip_ckpt, "encoder checkpoint directory")->required();
  c_sa->add_option("--caption", sa.caption, "caption text")->required();
  c_sa->add_option("--tag", sa.tag, "output name inside samples/");
  add_config_flags(c_sa, sa.flags);
  c_sa->callback([&] { run_sample(sa); });

  EvalOpts ev;
  CLI::App* c_ev = app.add_subcommand("eval", "score a checkpoint on embedding-space metrics");
  c_ev->add_option("--config", ev.config_path, "JSON config file");
  c_ev->add_option("--run", ev.run, "run directory name")->required();
  c_ev->add_option("--corpus", ev.corpus_dir, "corpus directory")->required();
  c_ev->add_option("--checkpoint", ev.ckpt, "denoiser checkpoint directory")->required();
  c_ev->add_option("--moclip", ev.moclip_ckpt, "encoder checkpoint directory")->required();
  c_ev->add_option("--gen-clips", ev.gen_clips, "generated pool size");
  c_ev->add_option("--pool", ev.pool, "retrieval pool size");
  c_ev->add_option("--pairs", ev.pairs, "diversity pair draws");
  c_ev->add_option("--mm-prompts", ev.mm_prompts, "multimodality prompts (0 skips)");
  c_ev->add_option("--repeats", ev.repeats, "repetitions for seeded metrics");
  add_config_flags(c_ev, ev.flags);
  c_ev->callback([&] { run_eval(ev); });

  ProbeReportOpts pr;
  CLI::App* c_pr = app.add_subcommand("gradprobe-report", "summarize recorded gradient norms");
  c_pr->add_option("--run", pr.run, "run directory name")->required();
  c_pr->add_option("--probe-csv", pr.probe_csv, "probe CSV (default: run's gradprobe.csv)");
  c_pr->callback([&] { run_probe_report(pr); });

  DctAnalyzeOpts da;
  CLI::App* c_da = app.add_subcommand("dct-analyze", "frequency energy profile of a corpus");
  c_da->add_option("--config", da.config_path, "JSON config file");
  c_da->add_option("--run", da.run, "run directory name")->required();
  c_da->add_option("--corpus", da.corpus_dir, "corpus directory")->required();
  c_da->add_option("--split", da.split, "clip split (train|val|test|all)");
  add_config_flags(c_da, da.flags);
  c_da->callback([&] { run_dct_analyze(da); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() != 0) std::cout << error_json("usage", e.what()) << "\n";
    return app.exit(e);
  } catch (const RunError& e) {
    std::cout << error_json(e.code, e.what()) << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cout << error_json("error", e.what()) << "\n";
    return 1;
  }
  return 0;
}
