#pragma once

// Motion clip container, per-frame feature layout, caption vocabulary, and
// the LMB1 clip blob format. Clip data lives in double precision in memory;
// files store float32.

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "anchordiff/rng.hpp"

namespace anchordiff {

// Per-frame features, in order: root yaw angular velocity (1), root linear
// velocity in the ground plane (2), root height (1), joint positions (3J),
// joint velocities (3J), joint rotations in 6d form (6J), foot contacts (4).
struct MotionFrameLayout {
  int joints = 4;

  int root_ang_offset() const { return 0; }
  int root_lin_offset() const { return 1; }
  int root_height_offset() const { return 3; }
  int jpos_offset() const { return 4; }
  int jvel_offset() const { return 4 + 3 * joints; }
  int jrot_offset() const { return 4 + 6 * joints; }
  int contacts_offset() const { return 4 + 12 * joints; }
  int contacts_size() const { return 4; }
  int dims() const { return 8 + 12 * joints; }
};

struct MotionClip {
  std::string id;
  float fps = 20.0f;
  int frames = 0;
  int dims = 0;
  std::vector<double> data;  // row-major (frames x dims)

  double& at(int t, int d) { return data[static_cast<std::size_t>(t) * dims + d]; }
  double at(int t, int d) const { return data[static_cast<std::size_t>(t) * dims + d]; }

  static MotionClip empty(std::string id, int frames, int dims, float fps) {
    MotionClip c;
    c.id = std::move(id);
    c.fps = fps;
    c.frames = frames;
    c.dims = dims;
    c.data.assign(static_cast<std::size_t>(frames) * dims, 0.0);
    return c;
  }
};

// ---- LMB1 blob format ----
// magic "LMB1", u32 frames, u32 dims, float32 row-major values. All fields
// little-endian.

inline void write_lmb1(std::ostream& os, const MotionClip& clip) {
  os.write("LMB1", 4);
  const std::uint32_t frames = static_cast<std::uint32_t>(clip.frames);
  const std::uint32_t dims = static_cast<std::uint32_t>(clip.dims);
  os.write(reinterpret_cast<const char*>(&frames), 4);
  os.write(reinterpret_cast<const char*>(&dims), 4);
  for (double v : clip.data) {
    float f = static_cast<float>(v);
    os.write(reinterpret_cast<const char*>(&f), 4);
  }
  if (!os) throw std::runtime_error("lmb1: write failed");
}

inline MotionClip read_lmb1(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "LMB1", 4) != 0) {
    throw std::runtime_error("lmb1: bad magic");
  }
  std::uint32_t frames = 0, dims = 0;
  is.read(reinterpret_cast<char*>(&frames), 4);
  is.read(reinterpret_cast<char*>(&dims), 4);
  if (!is || frames == 0 || dims == 0) throw std::runtime_error("lmb1: bad header");
  MotionClip clip;
  clip.frames = static_cast<int>(frames);
  clip.dims = static_cast<int>(dims);
  clip.data.resize(static_cast<std::size_t>(frames) * dims);
  for (auto& v : clip.data) {
    float f;
    is.read(reinterpret_cast<char*>(&f), 4);
    v = static_cast<double>(f);
  }
  if (!is) throw std::runtime_error("lmb1: truncated payload");
  return clip;
}

// ---- action templates and captions ----

enum class MotionTemplate { walk, run, jump, wave, spin, crouch };
inline constexpr int kTemplateCount = 6;

inline const char* template_name(MotionTemplate t) {
  switch (t) {
    case MotionTemplate::walk: return "walk";
    case MotionTemplate::run: return "run";
    case MotionTemplate::jump: return "jump";
    case MotionTemplate::wave: return "wave";
    case MotionTemplate::spin: return "spin";
    case MotionTemplate::crouch: return "crouch";
  }
  return "?";
}

inline constexpr int kPadToken = 0;
inline constexpr int kBosToken = 1;
inline constexpr int kEosToken = 2;
inline constexpr int kVerbTokenBase = 12;  // token id = base + template index

// Fixed 32-token vocabulary. Verb tokens form a contiguous block starting at
// kVerbTokenBase, so a caption decodes back to its template sequence by
// scanning for them.
inline const std::vector<std::string>& caption_vocab() {
  static const std::vector<std::string> vocab = {
      "[pad]",  "[bos]",   "[eos]",  "a",        "person", "the",
      "then",   "and",     "while",  "slowly",   "quickly", "smoothly",
      "walks",  "runs",    "jumps",  "waves",    "spins",   "crouches",
      "forward", "in",     "place",  "arms",     "steps",   "motion",
      "turns",  "moves",   "holds",  "low",      "high",    "fast",
      "once",   "twice"};
  return vocab;
}

inline int vocab_id(const std::string& word) {
  static const std::unordered_map<std::string, int> index = [] {
    std::unordered_map<std::string, int> m;
    const auto& v = caption_vocab();
    for (std::size_t i = 0; i < v.size(); ++i) m[v[i]] = static_cast<int>(i);
    return m;
  }();
  auto it = index.find(word);
  if (it == index.end()) {
    throw std::invalid_argument("caption: unknown word '" + word + "'");
  }
  return it->second;
}

// Caption for an ordered template sequence:
//   [bos] a person <verb> (adv)? (then <verb> (adv)?)* [eos]
// Adverbs are optional flavour drawn from the clip's stream; decoding reads
// only the verb tokens, so encode -> decode is exact for any draw.
inline std::vector<int> encode_caption(const std::vector<int>& templates, Rng& rng) {
  if (templates.empty()) throw std::invalid_argument("caption: no templates");
  static const int adverbs[3] = {vocab_id("slowly"), vocab_id("quickly"),
                                 vocab_id("smoothly")};
  std::vector<int> out = {kBosToken, vocab_id("a"), vocab_id("person")};
  for (std::size_t i = 0; i < templates.size(); ++i) {
    if (templates[i] < 0 || templates[i] >= kTemplateCount) {
      throw std::invalid_argument("caption: bad template id");
    }
    if (i > 0) out.push_back(vocab_id("then"));
    out.push_back(kVerbTokenBase + templates[i]);
    if (rng.bernoulli(0.35)) {
      out.push_back(adverbs[rng.uniform_int(0, 2)]);
    }
  }
  out.push_back(kEosToken);
  return out;
}

inline std::vector<int> decode_caption_templates(const std::vector<int>& tokens) {
  std::vector<int> templates;
  for (int t : tokens) {
    if (t >= kVerbTokenBase && t < kVerbTokenBase + kTemplateCount) {
      templates.push_back(t - kVerbTokenBase);
    }
  }
  return templates;
}

inline std::string caption_text(const std::vector<int>& tokens) {
  const auto& vocab = caption_vocab();
  std::ostringstream os;
  bool first = true;
  for (int t : tokens) {
    if (t == kBosToken || t == kEosToken || t == kPadToken) continue;
    if (t < 0 || t >= static_cast<int>(vocab.size())) {
      throw std::invalid_argument("caption: token id out of range");
    }
    os << (first ? "" : " ") << vocab[static_cast<std::size_t>(t)];
    first = false;
  }
  return os.str();
}

// Tokenize free text (lower-case words separated by whitespace) and wrap it
// in [bos]/[eos]. Unknown words are an error listing the failing word.
inline std::vector<int> tokenize_caption(const std::string& text) {
  std::vector<int> out = {kBosToken};
  std::istringstream is(text);
  std::string word;
  while (is >> word) out.push_back(vocab_id(word));
  out.push_back(kEosToken);
  if (out.size() == 2) throw std::invalid_argument("caption: empty text");
  return out;
}

}  // namespace anchordiff
