#pragma once

// Contrastive text-motion embedding model: a motion transformer tower and a
// text transformer tower projected into one joint space, trained with a
// symmetric InfoNCE loss and a learnable temperature. The frozen model later
// serves two roles in the diffusion stack: its text tower conditions the
// denoiser, and its motion tower supplies temporal anchor targets.
//
// Both towers are padding-invariant down to the bit: masked attention
// weights underflow to exact zeros and pooling divides by true lengths.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "anchordiff/corpus.hpp"
#include "anchordiff/module.hpp"
#include "anchordiff/motion.hpp"
#include "anchordiff/rng.hpp"
#include "anchordiff/tensor.hpp"

namespace anchordiff {

struct MoClipConfig {
  int motion_dims = 56;
  int vocab = 32;
  int d_model = 64;  // token width; the denoiser conditions on these tokens
  int d_out = 64;    // joint embedding width
  int layers = 2;
  int heads = 2;
  int ffn_mult = 2;
  double tau_init = 0.07;
};

// ---- padded batches ----

template <typename S>
struct MotionBatch {
  int B = 0, T = 0, dims = 0;
  Tensor<S> x;          // (B, T, dims), zero-filled past each clip's length
  Tensor<S> attn_mask;  // (B, 1, 1, T) additive: 0 on real frames, -1e30 on pads
  Tensor<S> pool_mask;  // (B, T, 1) multiplicative 0/1
  Tensor<S> inv_len;    // (B, 1, 1) reciprocal frame counts

  // Clips are expected to be normalized already.
  static MotionBatch from_clips(const std::vector<const MotionClip*>& clips) {
    if (clips.empty()) throw std::invalid_argument("motion batch: empty");
    MotionBatch b;
    b.B = static_cast<int>(clips.size());
    b.dims = clips[0]->dims;
    for (const auto* c : clips) {
      if (c->dims != b.dims) throw std::invalid_argument("motion batch: dim mismatch");
      b.T = std::max(b.T, c->frames);
    }
    std::vector<S> x(static_cast<std::size_t>(b.B) * b.T * b.dims, S(0));
    std::vector<S> amask(static_cast<std::size_t>(b.B) * b.T, S(0));
    std::vector<S> pmask(static_cast<std::size_t>(b.B) * b.T, S(0));
    std::vector<S> inv(static_cast<std::size_t>(b.B));
    for (int i = 0; i < b.B; ++i) {
      const auto* c = clips[static_cast<std::size_t>(i)];
      for (int t = 0; t < c->frames; ++t) {
        for (int d = 0; d < b.dims; ++d) {
          x[(static_cast<std::size_t>(i) * b.T + t) * b.dims + d] = static_cast<S>(c->at(t, d));
        }
        pmask[static_cast<std::size_t>(i) * b.T + t] = S(1);
      }
      for (int t = c->frames; t < b.T; ++t) {
        amask[static_cast<std::size_t>(i) * b.T + t] = static_cast<S>(kAttnMask);
      }
      inv[static_cast<std::size_t>(i)] = static_cast<S>(1.0 / static_cast<double>(c->frames));
    }
    b.x = Tensor<S>::constant({b.B, b.T, b.dims}, std::move(x));
    b.attn_mask = Tensor<S>::constant({b.B, 1, 1, b.T}, std::move(amask));
    b.pool_mask = Tensor<S>::constant({b.B, b.T, 1}, std::move(pmask));
    b.inv_len = Tensor<S>::constant({b.B, 1, 1}, std::move(inv));
    return b;
  }
};

template <typename S>
struct TokenBatch {
  int B = 0, L = 0;
  std::vector<int> ids;  // (B * L), right-padded with [pad]
  Tensor<S> attn_mask;
  Tensor<S> pool_mask;
  Tensor<S> inv_len;

  static TokenBatch from_captions(const std::vector<std::vector<int>>& captions) {
    if (captions.empty()) throw std::invalid_argument("token batch: empty");
    TokenBatch b;
    b.B = static_cast<int>(captions.size());
    for (const auto& c : captions) {
      if (c.empty()) throw std::invalid_argument("token batch: empty caption");
      b.L = std::max(b.L, static_cast<int>(c.size()));
    }
    b.ids.assign(static_cast<std::size_t>(b.B) * b.L, kPadToken);
    std::vector<S> amask(static_cast<std::size_t>(b.B) * b.L, S(0));
    std::vector<S> pmask(static_cast<std::size_t>(b.B) * b.L, S(0));
    std::vector<S> inv(static_cast<std::size_t>(b.B));
    for (int i = 0; i < b.B; ++i) {
      const auto& c = captions[static_cast<std::size_t>(i)];
      for (std::size_t t = 0; t < c.size(); ++t) {
        b.ids[static_cast<std::size_t>(i) * b.L + t] = c[t];
        pmask[static_cast<std::size_t>(i) * b.L + t] = S(1);
      }
      for (int t = static_cast<int>(c.size()); t < b.L; ++t) {
        amask[static_cast<std::size_t>(i) * b.L + t] = static_cast<S>(kAttnMask);
      }
      inv[static_cast<std::size_t>(i)] = static_cast<S>(1.0 / static_cast<double>(c.size()));
    }
    b.attn_mask = Tensor<S>::constant({b.B, 1, 1, b.L}, std::move(amask));
    b.pool_mask = Tensor<S>::constant({b.B, b.L, 1}, std::move(pmask));
    b.inv_len = Tensor<S>::constant({b.B, 1, 1}, std::move(inv));
    return b;
  }
};

// ---- building blocks ----

template <typename S>
struct TransformerBlock {
  LayerNormParams<S> ln1, ln2;
  MultiheadAttention<S> attn;
  Linear<S> ff1, ff2;

  TransformerBlock() = default;
  TransformerBlock(ParamStore<S>& store, const std::string& prefix, int d, int heads,
                   int ffn_mult, Rng& rng) {
    ln1 = LayerNormParams<S>(store, prefix + ".ln1", d);
    attn = MultiheadAttention<S>(store, prefix + ".attn", d, d, d, heads, rng);
    ln2 = LayerNormParams<S>(store, prefix + ".ln2", d);
    ff1 = Linear<S>(store, prefix + ".ff1", d, d * ffn_mult, rng);
    ff2 = Linear<S>(store, prefix + ".ff2", d * ffn_mult, d, rng);
  }

  Tensor<S> operator()(Tensor<S> x, const Tensor<S>& mask) const {
    Tensor<S> h = ln1(x);
    x = add(x, attn(h, h, mask));
    return add(x, ff2(gelu(ff1(ln2(x)))));
  }
};

template <typename S>
Tensor<S> positional_table(int T, int d) {
  std::vector<S> pe(static_cast<std::size_t>(T) * d);
  for (int t = 0; t < T; ++t) {
    auto row = sinusoidal_embedding<S>(static_cast<double>(t), d);
    std::copy(row.begin(), row.end(), pe.begin() + static_cast<std::size_t>(t) * d);
  }
  return Tensor<S>::constant({T, d}, std::move(pe));
}

template <typename S>
Tensor<S> l2_normalize_rows(const Tensor<S>& x) {
  Tensor<S> norm = sqrt(add_scalar(sum_axis(square(x), x.ndim() - 1), S(1e-24)));
  return div(x, norm);
}

// Masked temporal average pooling: zero the pads, sum, multiply by 1/len.
template <typename S>
Tensor<S> masked_mean_pool(const Tensor<S>& x, const Tensor<S>& pool_mask,
                           const Tensor<S>& inv_len) {
  Tensor<S> summed = sum_axis(mul(x, pool_mask), 1);  // (B, 1, D)
  Tensor<S> pooled = mul(summed, inv_len);
  return reshape(pooled, {x.dim(0), x.dim(2)});
}

// ---- the model ----

template <typename S>
class MoClip {
 public:
  MoClip(ParamStore<S>& store, const MoClipConfig& cfg, Rng& rng) : cfg_(cfg) {
    store.begin_group("moclip");
    motion_proj_ = Linear<S>(store, "moclip.motion.proj", cfg.motion_dims, cfg.d_model, rng);
    for (int l = 0; l < cfg.layers; ++l) {
      motion_blocks_.emplace_back(store, "moclip.motion.block" + std::to_string(l),
                                  cfg.d_model, cfg.heads, cfg.ffn_mult, rng);
    }
    motion_out_ = Linear<S>(store, "moclip.motion.out", cfg.d_model, cfg.d_out, rng);

    text_embed_ = store.add("moclip.text.embed", {cfg.vocab, cfg.d_model},
                            kaiming_uniform<S>(static_cast<std::int64_t>(cfg.vocab) * cfg.d_model,
                                               cfg.d_model, rng));
    for (int l = 0; l < cfg.layers; ++l) {
      text_blocks_.emplace_back(store, "moclip.text.block" + std::to_string(l),
                                cfg.d_model, cfg.heads, cfg.ffn_mult, rng);
    }
    text_out_ = Linear<S>(store, "moclip.text.out", cfg.d_model, cfg.d_out, rng);

    log_tau_ = store.add("moclip.tau", {1}, {static_cast<S>(std::log(cfg.tau_init))});
    store.begin_group("");
  }

  const MoClipConfig& config() const { return cfg_; }
  Tensor<S> tau() const { return exp(log_tau_); }

  // (B, d_out), unit rows.
  Tensor<S> encode_motion(const MotionBatch<S>& batch) const {
    Tensor<S> h = add(motion_proj_(batch.x), positional_table<S>(batch.T, cfg_.d_model));
    for (const auto& block : motion_blocks_) h = block(h, batch.attn_mask);
    Tensor<S> pooled = masked_mean_pool(h, batch.pool_mask, batch.inv_len);
    return l2_normalize_rows(motion_out_(pooled));
  }

  // Contextual token features for conditioning: (B, L, d_model).
  Tensor<S> text_token_features(const TokenBatch<S>& batch) const {
    Tensor<S> h = add(embedding(text_embed_, batch.ids, {batch.B, batch.L}),
                      positional_table<S>(batch.L, cfg_.d_model));
    for (const auto& block : text_blocks_) h = block(h, batch.attn_mask);
    return h;
  }

  // (B, d_out), unit rows.
  Tensor<S> encode_text(const TokenBatch<S>& batch) const {
    Tensor<S> h = text_token_features(batch);
    Tensor<S> pooled = masked_mean_pool(h, batch.pool_mask, batch.inv_len);
    return l2_normalize_rows(text_out_(pooled));
  }

  std::string last_text_block_prefix() const {
    return "moclip.text.block" + std::to_string(cfg_.layers - 1);
  }

 private:
  MoClipConfig cfg_;
  Linear<S> motion_proj_, motion_out_, text_out_;
  std::vector<TransformerBlock<S>> motion_blocks_, text_blocks_;
  Tensor<S> text_embed_;
  Tensor<S> log_tau_;
};

// Symmetric InfoNCE over in-batch pairs: 0.5 * (motion->text + text->motion)
// cross entropy on cosine logits scaled by 1/tau.
template <typename S>
Tensor<S> contrastive_loss(const Tensor<S>& motion_emb, const Tensor<S>& text_emb,
                           const Tensor<S>& tau) {
  const int B = motion_emb.dim(0);
  if (text_emb.dim(0) != B) throw std::invalid_argument("contrastive: batch mismatch");
  Tensor<S> logits = div(matmul(motion_emb, transpose_last_two(text_emb)), tau);
  std::vector<S> eye(static_cast<std::size_t>(B) * B, S(0));
  for (int i = 0; i < B; ++i) eye[static_cast<std::size_t>(i) * B + i] = S(1);
  Tensor<S> diag = Tensor<S>::constant({B, B}, std::move(eye));
  Tensor<S> m2t = sum_all(mul(log_softmax_lastdim(logits), diag));
  Tensor<S> t2m = sum_all(mul(log_softmax_lastdim(transpose_last_two(logits)), diag));
  return mul_scalar(add(m2t, t2m), S(-0.5 / B));
}

// ---- retrieval ----

struct RetrievalReport {
  std::map<int, double> topk;
  bool duplicate_captions = false;
};

// Ranks every caption in the pool against each motion embedding by cosine
// similarity (embeddings are unit rows, so the dot product). Ties break
// deterministically toward the lower caption index.
inline RetrievalReport retrieval_topk(const std::vector<std::vector<double>>& motion,
                                      const std::vector<std::vector<double>>& text,
                                      const std::vector<std::vector<int>>& captions,
                                      const std::vector<int>& ks) {
  const std::size_t n = motion.size();
  if (text.size() != n || captions.size() != n || n == 0) {
    throw std::invalid_argument("retrieval: pool size mismatch");
  }
  RetrievalReport report;
  for (std::size_t i = 0; i < n && !report.duplicate_captions; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (captions[i] == captions[j]) {
        report.duplicate_captions = true;
        break;
      }
    }
  }
  for (int k : ks) report.topk[k] = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double true_sim = 0.0;
    for (std::size_t d = 0; d < motion[i].size(); ++d) true_sim += motion[i][d] * text[i][d];
    // rank = number of captions strictly better, or tied with lower index
    std::size_t rank = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double sim = 0.0;
      for (std::size_t d = 0; d < motion[i].size(); ++d) sim += motion[i][d] * text[j][d];
      if (sim > true_sim || (sim == true_sim && j < i)) ++rank;
    }
    for (int k : ks) {
      if (rank < static_cast<std::size_t>(k)) report.topk[k] += 1.0;
    }
  }
  for (int k : ks) report.topk[k] /= static_cast<double>(n);
  return report;
}

// ---- two-stage training ----

struct MoClipTrainConfig {
  int stage1_steps = 2000;  // text tower frozen
  int stage2_steps = 1000;  // last text layers unfrozen, lr / 10
  int batch = 16;
  int window = 64;  // motion crop length during training
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

struct MoClipTrainRow {
  int step = 0;
  int stage = 1;
  double loss = 0.0;
  double tau = 0.0;
};

// Trains in place on the corpus train split. Text tower parameters are
// frozen in stage 1; stage 2 unfreezes the final text block and projection
// and drops the learning rate tenfold.
template <typename S>
void train_moclip(ParamStore<S>& store, MoClip<S>& model, const Corpus& corpus,
                  const MoClipTrainConfig& cfg, std::vector<MoClipTrainRow>* log = nullptr) {
  const auto train_ids = corpus.split_indices(Split::train);
  if (train_ids.size() < static_cast<std::size_t>(cfg.batch)) {
    throw std::runtime_error("moclip: train split smaller than batch");
  }
  Rng rng = Rng::stream(cfg.seed, "moclip-train");

  auto run_stage = [&](int stage, int steps, double lr) {
    Adam<S> opt({lr, 0.9, 0.999, 1e-8});
    std::vector<std::size_t> order(train_ids);
    for (int step = 0; step < steps; ++step) {
      // sample a batch of distinct clips
      for (int i = 0; i < cfg.batch; ++i) {
        const auto j = static_cast<std::size_t>(
            rng.uniform_int(static_cast<std::int64_t>(i),
                            static_cast<std::int64_t>(order.size()) - 1));
        std::swap(order[static_cast<std::size_t>(i)], order[j]);
      }
      std::vector<MotionClip> windows;
      std::vector<std::vector<int>> captions;
      windows.reserve(static_cast<std::size_t>(cfg.batch));
      for (int i = 0; i < cfg.batch; ++i) {
        const std::size_t idx = order[static_cast<std::size_t>(i)];
        const MotionClip& clip = corpus.clips[idx];
        int start = 0, len = clip.frames;
        if (clip.frames > cfg.window) {
          start = static_cast<int>(rng.uniform_int(0, clip.frames - cfg.window));
          len = cfg.window;
        }
        MotionClip w = MotionClip::empty(clip.id, len, clip.dims, clip.fps);
        for (int t = 0; t < len; ++t) {
          for (int d = 0; d < clip.dims; ++d) w.at(t, d) = clip.at(start + t, d);
        }
        corpus.stats.apply(w);
        windows.push_back(std::move(w));
        captions.push_back(corpus.records[idx].caption);
      }
      std::vector<const MotionClip*> ptrs;
      for (const auto& w : windows) ptrs.push_back(&w);
      auto mb = MotionBatch<S>::from_clips(ptrs);
      auto tb = TokenBatch<S>::from_captions(captions);

      store.zero_grads();
      Tensor<S> loss = contrastive_loss(model.encode_motion(mb), model.encode_text(tb),
                                        model.tau());
      loss.backward();
      opt.step(store);
      if (log) {
        log->push_back({step, stage, static_cast<double>(loss.item()),
                        static_cast<double>(model.tau().item())});
      }
    }
  };

  store.set_trainable("moclip.text.", false);
  run_stage(1, cfg.stage1_steps, cfg.lr);
  store.set_trainable(model.last_text_block_prefix(), true);
  store.set_trainable("moclip.text.out", true);
  run_stage(2, cfg.stage2_steps, cfg.lr / 10.0);
  store.set_trainable("moclip.text.", true);
}

// Embeds whole clips (no cropping) one at a time; returns plain rows for
// retrieval and metric code.
template <typename S>
std::vector<std::vector<double>> embed_clips(const MoClip<S>& model, const Corpus& corpus,
                                             const std::vector<std::size_t>& ids) {
  NoGradGuard guard;
  std::vector<std::vector<double>> out;
  for (std::size_t idx : ids) {
    MotionClip clip = corpus.clips[idx];
    corpus.stats.apply(clip);
    auto batch = MotionBatch<S>::from_clips({&clip});
    Tensor<S> emb = model.encode_motion(batch);
    std::vector<double> row(emb.data().size());
    for (std::size_t i = 0; i < row.size(); ++i) row[i] = static_cast<double>(emb.data()[i]);
    out.push_back(std::move(row));
  }
  return out;
}

template <typename S>
std::vector<std::vector<double>> embed_captions(const MoClip<S>& model, const Corpus& corpus,
                                                const std::vector<std::size_t>& ids) {
  NoGradGuard guard;
  std::vector<std::vector<double>> out;
  for (std::size_t idx : ids) {
    auto batch = TokenBatch<S>::from_captions({corpus.records[idx].caption});
    Tensor<S> emb = model.encode_text(batch);
    std::vector<double> row(emb.data().size());
    for (std::size_t i = 0; i < row.size(); ++i) row[i] = static_cast<double>(emb.data()[i]);
    out.push_back(std::move(row));
  }
  return out;
}

}  // namespace anchordiff
