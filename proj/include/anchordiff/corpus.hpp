#pragma once

// Synthetic motion corpus: template signal generators, corpus assembly,
// train/val/test splitting, per-dimension normalization statistics, and the
// on-disk layout (manifest.json + clips.lmb).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "anchordiff/motion.hpp"
#include "anchordiff/rng.hpp"

namespace anchordiff {

enum class Split { train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split split_from_name(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw std::invalid_argument("corpus: unknown split '" + s + "'");
}

struct ClipRecord {
  std::string id;
  std::uint64_t offset = 0;  // byte offset of the LMB1 record in clips.lmb
  int frames = 0;
  int dims = 0;
  std::vector<int> caption;    // token ids including [bos]/[eos]
  std::vector<int> templates;  // ordered template ids
  Split split = Split::train;
};

struct NormStats {
  std::vector<double> mean, stdev;

  void apply(MotionClip& clip) const {
    for (int t = 0; t < clip.frames; ++t) {
      for (int d = 0; d < clip.dims; ++d) {
        clip.at(t, d) = (clip.at(t, d) - mean[static_cast<std::size_t>(d)]) /
                        stdev[static_cast<std::size_t>(d)];
      }
    }
  }

  void invert(MotionClip& clip) const {
    for (int t = 0; t < clip.frames; ++t) {
      for (int d = 0; d < clip.dims; ++d) {
        clip.at(t, d) = clip.at(t, d) * stdev[static_cast<std::size_t>(d)] +
                        mean[static_cast<std::size_t>(d)];
      }
    }
  }
};

struct Corpus {
  MotionFrameLayout layout;
  std::uint64_t seed = 0;
  float fps = 20.0f;
  std::vector<double> ratios = {0.8, 0.15, 0.05};
  std::vector<ClipRecord> records;
  std::vector<MotionClip> clips;  // parallel to records, raw (unnormalized)
  NormStats stats;                // computed on the train split

  std::vector<std::size_t> split_indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (records[i].split == s) out.push_back(i);
    }
    return out;
  }
};

struct CorpusConfig {
  int clip_count = 320;  // 0.8/0.15/0.05 split -> 256 train clips
  int min_frames = 32;
  int max_frames = 96;
  float fps = 20.0f;
  std::uint64_t seed = 0;
  std::vector<double> ratios = {0.8, 0.15, 0.05};
};

namespace detail {

// Rest pose joint positions: chest, head, left hand, right hand.
inline const double kJointBase[4][3] = {
    {0.0, 1.2, 0.0}, {0.0, 1.6, 0.0}, {-0.4, 1.1, 0.0}, {0.4, 1.1, 0.0}};

// Fills frames [t0, t1) of `clip` with one template's signal. `phase` varies
// per clip so clips of the same template are not identical.
inline void render_template(MotionClip& clip, const MotionFrameLayout& layout,
                            MotionTemplate tpl, int t0, int t1, double phase) {
  const double pi = 3.14159265358979323846;
  const double fps = static_cast<double>(clip.fps);
  const int J = layout.joints;
  for (int t = t0; t < t1; ++t) {
    const double tau = static_cast<double>(t) / fps;
    double* f = clip.data.data() + static_cast<std::size_t>(t) * clip.dims;
    double root_ang = 0.0, vx = 0.0, vz = 0.0, height = 0.9;
    double contacts[4] = {1.0, 1.0, 1.0, 1.0};
    double freq = 1.0, amp = 0.0;
    switch (tpl) {
      case MotionTemplate::walk: {
        freq = 1.0;
        amp = 0.25;
        vx = 0.9;
        vz = 0.05 * std::sin(2 * pi * 0.5 * tau + phase);
        const double gait = std::sin(2 * pi * freq * tau + phase);
        contacts[0] = contacts[1] = gait >= 0 ? 1.0 : 0.0;
        contacts[2] = contacts[3] = gait >= 0 ? 0.0 : 1.0;
        break;
      }
      case MotionTemplate::run: {
        freq = 2.2;
        amp = 0.45;
        vx = 2.4;
        const double gait = std::sin(2 * pi * freq * tau + phase);
        const bool flight = std::abs(gait) > 0.85;
        contacts[0] = contacts[1] = (!flight && gait >= 0) ? 1.0 : 0.0;
        contacts[2] = contacts[3] = (!flight && gait < 0) ? 1.0 : 0.0;
        height = 0.92 + 0.04 * std::cos(2 * pi * 2 * freq * tau + phase);
        break;
      }
      case MotionTemplate::jump: {
        freq = 0.9;
        amp = 0.3;
        const double cycle = std::sin(2 * pi * freq * tau + phase);
        const double air = std::max(0.0, cycle);
        height = 0.9 + 0.5 * air * air;
        const bool grounded = air < 0.15;
        for (double& c : contacts) c = grounded ? 1.0 : 0.0;
        break;
      }
      case MotionTemplate::wave: {
        freq = 5.5;
        amp = 0.0;  // handled per joint below
        break;
      }
      case MotionTemplate::spin: {
        freq = 0.5;
        amp = 0.2;
        root_ang = 1.8;
        const double gait = std::sin(2 * pi * freq * tau + phase);
        contacts[0] = contacts[1] = gait >= 0 ? 1.0 : 0.0;
        contacts[2] = contacts[3] = gait >= 0 ? 0.0 : 1.0;
        break;
      }
      case MotionTemplate::crouch: {
        freq = 0.4;
        amp = 0.1;
        height = 0.9 - 0.35 * 0.5 * (1.0 - std::cos(2 * pi * freq * tau + phase));
        break;
      }
    }
    f[layout.root_ang_offset()] = root_ang;
    f[layout.root_lin_offset()] = vx;
    f[layout.root_lin_offset() + 1] = vz;
    f[layout.root_height_offset()] = height;
    for (int j = 0; j < J; ++j) {
      const double jphase = phase + 0.7 * j + (j % 2 ? pi : 0.0);
      double amp_j = amp;
      double freq_j = freq;
      if (tpl == MotionTemplate::wave) {
        // arms (joints 2, 3) oscillate fast; the rest barely moves
        amp_j = (j >= 2) ? 0.5 : 0.03;
        freq_j = 5.5;
      }
      const double osc = amp_j * std::sin(2 * pi * freq_j * tau + jphase);
      const double d_osc = amp_j * 2 * pi * freq_j * std::cos(2 * pi * freq_j * tau + jphase);
      double* jp = f + layout.jpos_offset() + 3 * j;
      jp[0] = kJointBase[j][0] + osc;
      jp[1] = kJointBase[j][1] + 0.5 * osc + (height - 0.9);
      jp[2] = kJointBase[j][2] + 0.2 * osc;
      double* jv = f + layout.jvel_offset() + 3 * j;
      jv[0] = d_osc;
      jv[1] = 0.5 * d_osc;
      jv[2] = 0.2 * d_osc;
      double* jr = f + layout.jrot_offset() + 6 * j;
      const double slow = 0.3 * std::sin(2 * pi * 0.5 * freq_j * tau + jphase);
      jr[0] = 1.0 - 0.1 * slow;
      jr[1] = slow;
      jr[2] = 0.0;
      jr[3] = -slow;
      jr[4] = 1.0 - 0.1 * slow;
      jr[5] = 0.1 * slow;
    }
    for (int c = 0; c < layout.contacts_size(); ++c) {
      f[layout.contacts_offset() + c] = contacts[c];
    }
  }
}

}  // namespace detail

// Deterministic: the same config yields byte-identical clips and manifest.
inline Corpus generate_corpus(const CorpusConfig& cfg) {
  if (cfg.clip_count < 1) throw std::invalid_argument("corpus: clip_count must be >= 1");
  if (cfg.min_frames < 2 || cfg.max_frames < cfg.min_frames) {
    throw std::invalid_argument("corpus: bad frame range");
  }
  if (cfg.ratios.size() != 3) throw std::invalid_argument("corpus: need 3 split ratios");

  Corpus corpus;
  corpus.seed = cfg.seed;
  corpus.fps = cfg.fps;
  corpus.ratios = cfg.ratios;
  const int dims = corpus.layout.dims();

  Rng corpus_stream = Rng::stream(cfg.seed, "corpus");
  for (int i = 0; i < cfg.clip_count; ++i) {
    Rng rng = corpus_stream.substream(static_cast<std::uint64_t>(i));
    const int frames = static_cast<int>(rng.uniform_int(cfg.min_frames, cfg.max_frames));
    const int n_seg = static_cast<int>(rng.uniform_int(1, 3));
    std::vector<int> pool(kTemplateCount);
    std::iota(pool.begin(), pool.end(), 0);
    rng.shuffle(pool);
    std::vector<int> templates(pool.begin(), pool.begin() + n_seg);

    char name[32];
    std::snprintf(name, sizeof(name), "clip_%04d", i);
    MotionClip clip = MotionClip::empty(name, frames, dims, cfg.fps);
    const double phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    for (int s = 0; s < n_seg; ++s) {
      const int t0 = s * frames / n_seg;
      const int t1 = (s + 1) * frames / n_seg;
      detail::render_template(clip, corpus.layout,
                              static_cast<MotionTemplate>(templates[s]), t0, t1, phase);
    }
    // observation noise on everything except the binary contact flags
    const int contact0 = corpus.layout.contacts_offset();
    for (int t = 0; t < frames; ++t) {
      for (int d = 0; d < dims; ++d) {
        if (d >= contact0 && d < contact0 + corpus.layout.contacts_size()) continue;
        clip.at(t, d) += 0.02 * rng.normal();
      }
    }

    ClipRecord rec;
    rec.id = clip.id;
    rec.frames = frames;
    rec.dims = dims;
    rec.templates = templates;
    rec.caption = encode_caption(templates, rng);
    corpus.records.push_back(std::move(rec));
    corpus.clips.push_back(std::move(clip));
  }
  return corpus;
}

// Shuffles clip indices and assigns floor(n * ratio) to each split, with the
// remainder going to train.
inline void assign_splits(Corpus& corpus, std::uint64_t seed) {
  const std::size_t n = corpus.records.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng::stream(seed, "split");
  rng.shuffle(order);
  const auto n_val = static_cast<std::size_t>(std::floor(corpus.ratios[1] * static_cast<double>(n)));
  const auto n_test = static_cast<std::size_t>(std::floor(corpus.ratios[2] * static_cast<double>(n)));
  const std::size_t n_train = n - n_val - n_test;
  for (std::size_t i = 0; i < n; ++i) {
    Split s = i < n_train ? Split::train
              : i < n_train + n_val ? Split::val
                                    : Split::test;
    corpus.records[order[i]].split = s;
  }
}

// Population mean/std per dimension over train-split frames only. Dimensions
// with (near) zero variance get unit divisors so normalization just centers
// them.
inline NormStats compute_norm_stats(const Corpus& corpus) {
  const int dims = corpus.layout.dims();
  NormStats st;
  st.mean.assign(static_cast<std::size_t>(dims), 0.0);
  st.stdev.assign(static_cast<std::size_t>(dims), 0.0);
  std::int64_t frames = 0;
  for (std::size_t i = 0; i < corpus.records.size(); ++i) {
    if (corpus.records[i].split != Split::train) continue;
    const auto& clip = corpus.clips[i];
    frames += clip.frames;
    for (int t = 0; t < clip.frames; ++t) {
      for (int d = 0; d < dims; ++d) st.mean[static_cast<std::size_t>(d)] += clip.at(t, d);
    }
  }
  if (frames == 0) throw std::runtime_error("corpus: train split is empty");
  for (auto& m : st.mean) m /= static_cast<double>(frames);
  for (std::size_t i = 0; i < corpus.records.size(); ++i) {
    if (corpus.records[i].split != Split::train) continue;
    const auto& clip = corpus.clips[i];
    for (int t = 0; t < clip.frames; ++t) {
      for (int d = 0; d < dims; ++d) {
        const double dev = clip.at(t, d) - st.mean[static_cast<std::size_t>(d)];
        st.stdev[static_cast<std::size_t>(d)] += dev * dev;
      }
    }
  }
  for (auto& s : st.stdev) {
    s = std::sqrt(s / static_cast<double>(frames));
    if (s < 1e-12) s = 1.0;
  }
  return st;
}

// ---- on-disk layout: manifest.json + clips.lmb ----

inline void save_corpus(const std::filesystem::path& dir, const Corpus& corpus) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream blob(dir / "clips.lmb", std::ios::binary);
  if (!blob) throw std::runtime_error("corpus: cannot write " + (dir / "clips.lmb").string());

  nlohmann::json manifest;
  manifest["format"] = "anchordiff-corpus-v1";
  manifest["seed"] = corpus.seed;
  manifest["fps"] = corpus.fps;
  manifest["layout"] = {{"joints", corpus.layout.joints}, {"dims", corpus.layout.dims()}};
  manifest["ratios"] = corpus.ratios;
  manifest["vocab"] = caption_vocab();
  manifest["stats"] = {{"mean", corpus.stats.mean}, {"std", corpus.stats.stdev}};
  nlohmann::json clips = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < corpus.records.size(); ++i) {
    const auto& rec = corpus.records[i];
    const auto& clip = corpus.clips[i];
    clips.push_back({{"id", rec.id},
                     {"offset", offset},
                     {"frames", rec.frames},
                     {"dims", rec.dims},
                     {"split", split_name(rec.split)},
                     {"caption", rec.caption},
                     {"templates", rec.templates}});
    write_lmb1(blob, clip);
    offset += 12 + static_cast<std::uint64_t>(clip.frames) * clip.dims * 4;
  }
  manifest["clips"] = clips;
  std::ofstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("corpus: cannot write " + (dir / "manifest.json").string());
  mf << manifest.dump(2) << "\n";
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("corpus: cannot open " + (dir / "manifest.json").string());
  nlohmann::json manifest = nlohmann::json::parse(mf);
  if (manifest.value("format", "") != "anchordiff-corpus-v1") {
    throw std::runtime_error("corpus: unknown manifest format");
  }
  Corpus corpus;
  corpus.seed = manifest.at("seed").get<std::uint64_t>();
  corpus.fps = manifest.at("fps").get<float>();
  corpus.layout.joints = manifest.at("layout").at("joints").get<int>();
  corpus.ratios = manifest.at("ratios").get<std::vector<double>>();
  corpus.stats.mean = manifest.at("stats").at("mean").get<std::vector<double>>();
  corpus.stats.stdev = manifest.at("stats").at("std").get<std::vector<double>>();
  const auto vocab = manifest.at("vocab").get<std::vector<std::string>>();
  if (vocab != caption_vocab()) {
    throw std::runtime_error("corpus: vocabulary does not match this build");
  }

  std::ifstream blob(dir / "clips.lmb", std::ios::binary);
  if (!blob) throw std::runtime_error("corpus: cannot open " + (dir / "clips.lmb").string());
  for (const auto& j : manifest.at("clips")) {
    ClipRecord rec;
    rec.id = j.at("id").get<std::string>();
    rec.offset = j.at("offset").get<std::uint64_t>();
    rec.frames = j.at("frames").get<int>();
    rec.dims = j.at("dims").get<int>();
    rec.split = split_from_name(j.at("split").get<std::string>());
    rec.caption = j.at("caption").get<std::vector<int>>();
    rec.templates = j.at("templates").get<std::vector<int>>();
    blob.seekg(static_cast<std::streamoff>(rec.offset));
    MotionClip clip = read_lmb1(blob);
    if (clip.frames != rec.frames || clip.dims != rec.dims) {
      throw std::runtime_error("corpus: blob does not match manifest for " + rec.id);
    }
    clip.id = rec.id;
    clip.fps = corpus.fps;
    corpus.records.push_back(std::move(rec));
    corpus.clips.push_back(std::move(clip));
  }
  return corpus;
}

// Fingerprint of the corpus files, for reproducibility checks.
inline std::string corpus_hash_hex(const std::filesystem::path& dir) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const char* name : {"manifest.json", "clips.lmb"}) {
    std::ifstream f(dir / name, std::ios::binary);
    if (!f) throw std::runtime_error(std::string("corpus: cannot hash missing ") + name);
    char buf[4096];
    while (f.read(buf, sizeof(buf)) || f.gcount() > 0) {
      h = fnv1a64_bytes(buf, static_cast<std::size_t>(f.gcount()), h);
    }
  }
  char out[17];
  std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
  return std::string(out);
}

// gen-data pipeline: generate, split, compute train statistics.
inline Corpus build_corpus(const CorpusConfig& cfg) {
  Corpus corpus = generate_corpus(cfg);
  assign_splits(corpus, cfg.seed);
  corpus.stats = compute_norm_stats(corpus);
  return corpus;
}

}  // namespace anchordiff
