// Stage 2: unified recognition. Encoder output flows through a two-layer
// adaptor into a small frozen decoder-only LM carrying LoRA adapters; the
// training objective is next-token cross-entropy over transcript+EOS plus a
// lambda-weighted auxiliary CTC loss on the encoder output with its own
// small vocabulary. Modality dropout picks the instruction prompt and, for
// audio-only, the injection-free SFM bypass.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "uasr/autodiff.hpp"
#include "uasr/checkpoint.hpp"
#include "uasr/corruption.hpp"
#include "uasr/ctc.hpp"
#include "uasr/distill.hpp"
#include "uasr/encoders.hpp"
#include "uasr/injection.hpp"
#include "uasr/matrix.hpp"
#include "uasr/nn.hpp"
#include "uasr/rng.hpp"
#include "uasr/synthcorpus.hpp"

namespace uasr {

inline const char* prompt_text(ModalityMode mode) {
  switch (mode) {
    case ModalityMode::AudioOnly: return "Transcribe the audio.";
    case ModalityMode::VideoOnly: return "Transcribe the video.";
    case ModalityMode::AudioVisual: return "Transcribe the audio and video.";
  }
  throw ConfigError("bad modality mode enum");
}

// LM token inventory: corpus characters, any extra characters the prompt
// templates need, then BOS/EOS/PAD.
struct LmVocab {
  std::string chars;  // id -> char for text tokens
  int bos = 0, eos = 0, pad = 0;

  static LmVocab build(const std::string& char_vocab) {
    LmVocab v;
    v.chars = char_vocab;
    for (ModalityMode m :
         {ModalityMode::AudioOnly, ModalityMode::VideoOnly, ModalityMode::AudioVisual})
      for (const char* p = prompt_text(m); *p; ++p)
        if (v.chars.find(*p) == std::string::npos) v.chars.push_back(*p);
    v.bos = static_cast<int>(v.chars.size());
    v.eos = v.bos + 1;
    v.pad = v.bos + 2;
    return v;
  }

  int size() const { return static_cast<int>(chars.size()) + 3; }

  int id_of(char c) const {
    std::size_t pos = chars.find(c);
    if (pos == std::string::npos)
      throw DataError(std::string("lm vocab: unknown character '") + c + "'");
    return static_cast<int>(pos);
  }

  std::vector<int> encode(const std::string& s) const {
    std::vector<int> out;
    out.reserve(s.size());
    for (char c : s) out.push_back(id_of(c));
    return out;
  }

  // Text tokens only; specials are dropped.
  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids)
      if (id >= 0 && id < static_cast<int>(chars.size())) out.push_back(chars[id]);
    return out;
  }
};

struct LmConfig {
  std::size_t n_blocks = 4;
  std::size_t d_lm = 128;
  std::size_t n_heads = 4;
  std::size_t d_ffn = 256;
  std::uint64_t init_seed = 0;

  void validate() const {
    if (n_blocks < 1) throw ConfigError("recognizer: lm n_blocks must be >= 1");
    if (d_lm % n_heads != 0)
      throw ConfigError("recognizer: d_lm must be divisible by n_heads");
  }
};

// Causal pre-LN block.
struct LmBlock {
  LayerNorm ln1, ln2;
  Mha attn;
  Ffn ffn;

  void init(const std::string& name, std::size_t d, std::size_t heads, std::size_t d_ffn,
            Rng& rng) {
    ln1.init(name + ".ln1", "lm_base", d);
    ln2.init(name + ".ln2", "lm_base", d);
    attn.init(name + ".attn", "lm_base", d, d, d, d, heads, rng);
    ffn.init(name + ".ffn", "lm_base", d, d_ffn, rng);
  }

  Var apply(Tape& t, Var x) {
    Var n1 = ln1.apply(t, x);
    Var h = t.add(x, attn.apply(t, n1, n1, nullptr, /*causal=*/true));
    return t.add(h, ffn.apply(t, ln2.apply(t, h)));
  }

  void params(std::vector<Parameter*>& out) {
    ln1.params(out);
    ln2.params(out);
    attn.params(out);
    ffn.params(out);
  }
};

struct DecoderLM {
  LmConfig cfg;
  LmVocab vocab;
  Parameter tok_embed;  // [vocab x d_lm]
  std::vector<LmBlock> blocks;
  LayerNorm final_ln;
  Linear out_proj;  // [d_lm x vocab]
  // LoRA pairs live here so their Parameter addresses stay stable; the
  // Linear hooks point into this storage.
  std::vector<std::unique_ptr<LoraPair>> lora;

  void init(const LmConfig& c, const LmVocab& v) {
    cfg = c;
    cfg.validate();
    vocab = v;
    Rng rng(derive_seed(cfg.init_seed, "lm"));
    tok_embed.name = "lm.tok_embed";
    tok_embed.stage = "lm_base";
    // Embedding scale matches the unit-amplitude position signal added in
    // forward(); much smaller embeddings leave content invisible next to
    // position after the first layer norm.
    tok_embed.value = random_normal(vocab.size(), cfg.d_lm, rng, 1.0);
    blocks.resize(cfg.n_blocks);
    for (std::size_t i = 0; i < cfg.n_blocks; ++i)
      blocks[i].init("lm.block" + std::to_string(i), cfg.d_lm, cfg.n_heads, cfg.d_ffn, rng);
    final_ln.init("lm.final_ln", "lm_base", cfg.d_lm);
    out_proj.init("lm.out_proj", "lm_base", cfg.d_lm, vocab.size(), rng);
  }

  void freeze_base() {
    std::vector<Parameter*> ps;
    base_params(ps);
    for (Parameter* p : ps) p->frozen = true;
  }

  // Attaches zero-initialized low-rank adapters to every block's q/k/v/o
  // map and the output projection. Base outputs are unchanged until the
  // adapters train away from zero.
  void attach_lora(std::size_t rank, double alpha, Rng& rng) {
    lora.clear();
    auto hook = [&](Linear& lin, const std::string& name) {
      auto pair = std::make_unique<LoraPair>();
      pair->init(name, lin.in_dim(), lin.out_dim(), rank, alpha, rng);
      lin.lora = pair.get();
      lora.push_back(std::move(pair));
    };
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      std::string base = "lm.block" + std::to_string(i) + ".attn";
      hook(blocks[i].attn.wq, base + ".wq");
      hook(blocks[i].attn.wk, base + ".wk");
      hook(blocks[i].attn.wv, base + ".wv");
      hook(blocks[i].attn.wo, base + ".wo");
    }
    hook(out_proj, "lm.out_proj");
  }

  // Logits per position for an already-assembled embedding sequence.
  Var forward(Tape& t, Var embeddings) {
    const Matrix& e = t.val(embeddings);
    if (e.rows() < 1) throw ShapeError("lm: empty sequence");
    if (e.cols() != cfg.d_lm) throw ShapeError("lm: embedding dim mismatch " + e.shape_str());
    Var h = t.add(embeddings, t.constant(sinusoid_positions(e.rows(), cfg.d_lm)));
    for (auto& b : blocks) h = b.apply(t, h);
    return out_proj.apply(t, final_ln.apply(t, h));
  }

  void base_params(std::vector<Parameter*>& out) {
    out.push_back(&tok_embed);
    for (auto& b : blocks) b.params(out);
    final_ln.params(out);
    out_proj.params(out);
  }

  void lora_params(std::vector<Parameter*>& out) {
    for (auto& p : lora) p->params(out);
  }
};

// Rowwise D -> D_lm map between encoder and LM.
struct Adaptor {
  Linear l1, l2;

  void init(std::size_t d_in, std::size_t d_out, Rng& rng) {
    l1.init("adaptor.l1", "adaptor", d_in, d_out, rng);
    l2.init("adaptor.l2", "adaptor", d_out, d_out, rng);
  }

  Var apply(Tape& t, Var h) { return l2.apply(t, t.gelu(l1.apply(t, h))); }

  void params(std::vector<Parameter*>& out) {
    l1.params(out);
    l2.params(out);
  }
};

struct CtcHead {
  Linear proj;

  void init(std::size_t d_model, std::size_t ctc_vocab, Rng& rng) {
    proj.init("ctc_head.proj", "ctc_head", d_model, ctc_vocab, rng);
  }

  Var apply(Tape& t, Var h_o) { return proj.apply(t, h_o); }

  void params(std::vector<Parameter*>& out) { proj.params(out); }
};

struct AssembledSequence {
  Var embeddings;               // [S x d_lm]
  std::vector<int> ce_targets;  // per position: next-token id, -1 = no loss
  std::size_t bos_pos = 0;
  std::size_t length = 0;
};

// Sequence layout: prompt characters, continuous av tokens, BOS, transcript
// characters (absent when decoding). CE supervises exactly the transcript
// tokens plus EOS, via next-token targets anchored from the BOS position.
inline AssembledSequence assemble_sequence(Tape& t, DecoderLM& lm, ModalityMode mode,
                                           Var av_tokens,
                                           const std::vector<int>& transcript_ids) {
  const LmVocab& v = lm.vocab;
  std::vector<int> prompt_ids = v.encode(prompt_text(mode));
  Var emb_table = t.param(lm.tok_embed);
  std::vector<Var> parts;
  parts.push_back(t.gather_rows(emb_table, prompt_ids));
  parts.push_back(av_tokens);
  parts.push_back(t.gather_rows(emb_table, {v.bos}));
  if (!transcript_ids.empty()) parts.push_back(t.gather_rows(emb_table, transcript_ids));
  AssembledSequence out;
  out.embeddings = t.concat_rows(parts);
  out.length = t.val(out.embeddings).rows();
  out.bos_pos = prompt_ids.size() + t.val(av_tokens).rows();
  out.ce_targets.assign(out.length, -1);
  for (std::size_t i = 0; i < transcript_ids.size(); ++i)
    out.ce_targets[out.bos_pos + i] = transcript_ids[i];
  if (!transcript_ids.empty())
    out.ce_targets[out.bos_pos + transcript_ids.size()] = v.eos;
  return out;
}

// Mean next-token negative log-likelihood over positions whose target id is
// >= 0. Fused value+gradient node (softmax minus one-hot, averaged).
inline Var nll_next_token(Tape& t, Var logits, std::vector<int> targets) {
  const Matrix& z = t.val(logits);
  if (targets.size() != z.rows()) throw ShapeError("nll_next_token: targets length mismatch");
  std::size_t count = 0;
  double total = 0.0;
  for (std::size_t p = 0; p < z.rows(); ++p) {
    int y = targets[p];
    if (y < 0) continue;
    if (static_cast<std::size_t>(y) >= z.cols())
      throw DataError("nll_next_token: target id outside vocabulary");
    double mx = z(p, 0);
    for (std::size_t c = 1; c < z.cols(); ++c) mx = std::max(mx, z(p, c));
    double denom = 0.0;
    for (std::size_t c = 0; c < z.cols(); ++c) denom += std::exp(z(p, c) - mx);
    total += -(z(p, static_cast<std::size_t>(y)) - mx - std::log(denom));
    ++count;
  }
  if (count == 0) throw ShapeError("nll_next_token: no supervised position");
  Matrix out(1, 1);
  out(0, 0) = total / static_cast<double>(count);
  bool needs = t.needs_grad(logits);
  return TapeOpAccess::push(
      t, std::move(out), needs, [logits, targets = std::move(targets), count](Tape& tp) mutable {
        Var self = TapeOpAccess::current(tp);
        if (!tp.needs_grad(logits)) return;
        double g = tp.grad(self)(0, 0) / static_cast<double>(count);
        const Matrix& z = tp.val(logits);
        Matrix& gz = tp.grad(logits);
        for (std::size_t p = 0; p < z.rows(); ++p) {
          int y = targets[p];
          if (y < 0) continue;
          double mx = z(p, 0);
          for (std::size_t c = 1; c < z.cols(); ++c) mx = std::max(mx, z(p, c));
          double denom = 0.0;
          for (std::size_t c = 0; c < z.cols(); ++c) denom += std::exp(z(p, c) - mx);
          for (std::size_t c = 0; c < z.cols(); ++c) {
            double soft = std::exp(z(p, c) - mx) / denom;
            gz(p, c) += g * (soft - (static_cast<int>(c) == y ? 1.0 : 0.0));
          }
        }
      });
}

inline double total_loss(double ce, double ctc, bool ctc_feasible, double lambda) {
  if (lambda < 0.0) throw ConfigError("total_loss: lambda must be >= 0");
  return ctc_feasible ? ce + lambda * ctc : ce;
}

struct FinetuneConfig {
  std::size_t total_updates = 2000;
  double peak_lr = 2e-4;
  double warmup_frac = 1.0 / 3.0;
  double hold_frac = 0.0;
  double decay_frac = 2.0 / 3.0;
  double decay_floor = 0.01;
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;
  double lambda = 0.25;
  std::size_t lora_rank = 16;
  double lora_alpha = 16.0;
  std::size_t checkpoint_every = 0;

  void validate() const {
    if (total_updates < 1) throw ConfigError("recognizer: total_updates must be >= 1");
    if (batch_size < 1) throw ConfigError("recognizer: batch_size must be >= 1");
    if (peak_lr <= 0.0) throw ConfigError("recognizer: peak_lr must be positive");
    if (warmup_frac < 0.0 || hold_frac < 0.0 || decay_frac < 0.0 ||
        std::abs(warmup_frac + hold_frac + decay_frac - 1.0) > 1e-9)
      throw ConfigError("recognizer: warmup/hold/decay fractions must be >= 0 and sum to 1");
    if (decay_floor <= 0.0 || decay_floor > 1.0)
      throw ConfigError("recognizer: decay_floor must lie in (0, 1]");
    if (lambda < 0.0) throw ConfigError("recognizer: lambda must be >= 0");
    if (lora_rank < 1) throw ConfigError("recognizer: lora_rank must be >= 1");
  }
};

inline double lr_schedule(std::size_t step, const FinetuneConfig& cfg) {
  cfg.validate();
  PretrainConfig shim;
  shim.total_updates = cfg.total_updates;
  shim.peak_lr = cfg.peak_lr;
  shim.warmup_frac = cfg.warmup_frac;
  shim.hold_frac = cfg.hold_frac;
  shim.decay_frac = cfg.decay_frac;
  shim.decay_floor = cfg.decay_floor;
  return lr_schedule(step, shim);
}

// The full stage-2 model. Objects must stay at their init-time address:
// optimizer state and LoRA hooks key off Parameter pointers.
struct RecognizerModel {
  Sfm sfm;
  VisualEncoder venc;
  SfmAv sfmav;
  Adaptor adaptor;
  DecoderLM lm;
  CtcHead ctc_head;
  std::string char_vocab;
  std::size_t frame_ratio = 2;

  void init(const EncoderConfig& enc_cfg, const InjectionConfig& inj_cfg, const LmConfig& lm_cfg,
            const FinetuneConfig& fin_cfg, const std::string& vocab, std::size_t ratio) {
    char_vocab = vocab;
    frame_ratio = ratio;
    sfm.init(enc_cfg);
    venc.init(enc_cfg);
    sfmav.init(&sfm, inj_cfg, ratio);
    Rng rng(derive_seed(lm_cfg.init_seed, "recognizer"));
    adaptor.init(enc_cfg.d_model, lm_cfg.d_lm, rng);
    lm.init(lm_cfg, LmVocab::build(vocab));
    lm.freeze_base();
    lm.attach_lora(fin_cfg.lora_rank, fin_cfg.lora_alpha, rng);
    ctc_head.init(enc_cfg.d_model, vocab.size() + 1, rng);
  }

  // Encoder output H^o for a mode. AudioOnly bypasses the injection path
  // entirely (plain SFM forward); VideoOnly zeroes the audio features.
  Var encode(Tape& t, ModalityMode mode, const Matrix& audio, const Matrix& video) {
    if (mode == ModalityMode::AudioOnly) {
      return sfm.forward_vars(t, t.constant(audio)).back();
    }
    Matrix a = mode == ModalityMode::VideoOnly ? Matrix::zeros(audio.rows(), audio.cols())
                                               : audio;
    return sfmav.forward(t, std::move(a), venc.encode(video));
  }

  void trainables(std::vector<Parameter*>& out) {
    sfmav.params(out);
    adaptor.params(out);
    lm.lora_params(out);
    ctc_head.params(out);
  }

  void all_params(std::vector<Parameter*>& out) {
    sfm.params(out);
    venc.params(out);
    sfmav.params(out);
    adaptor.params(out);
    lm.base_params(out);
    lm.lora_params(out);
    ctc_head.params(out);
  }
};

struct FinetuneStepResult {
  double ce = 0.0;     // mean CE over used utterances
  double ctc = 0.0;    // mean CTC over feasible utterances (0 when none)
  double total = 0.0;  // optimized objective
  double lr = 0.0;
  std::size_t n_video = 0, n_audio = 0, n_av = 0;
  std::size_t ctc_skipped = 0;
};

inline FinetuneStepResult finetune_step(RecognizerModel& model,
                                        const std::vector<const Utterance*>& batch,
                                        const FinetuneConfig& cfg, const CorruptionConfig& corr,
                                        std::size_t step, Adam& opt) {
  FinetuneStepResult res;
  res.lr = lr_schedule(step, cfg);
  std::vector<Parameter*> train;
  model.trainables(train);
  zero_grads(train);
  Tape t;
  std::vector<Var> per_utt;
  double ce_sum = 0.0, ctc_sum = 0.0;
  std::size_t ctc_n = 0;
  std::uint64_t step_seed = derive_seed(cfg.seed, "finetune_step_" + std::to_string(step));
  for (std::size_t bi = 0; bi < batch.size(); ++bi) {
    const Utterance& u = *batch[bi];
    Rng rng(derive_seed(step_seed, bi));
    ModalityMode mode = sample_mode_finetune(corr.p_prime_v, corr.p_prime_a, rng);
    switch (mode) {
      case ModalityMode::VideoOnly: ++res.n_video; break;
      case ModalityMode::AudioOnly: ++res.n_audio; break;
      case ModalityMode::AudioVisual: ++res.n_av; break;
    }
    Var h_o = model.encode(t, mode, u.audio, u.video);
    Var av_tokens = model.adaptor.apply(t, h_o);
    std::vector<int> transcript_ids = model.lm.vocab.encode(u.transcript);
    AssembledSequence seq = assemble_sequence(t, model.lm, mode, av_tokens, transcript_ids);
    Var logits = model.lm.forward(t, seq.embeddings);
    Var ce = nll_next_token(t, logits, seq.ce_targets);
    ce_sum += t.val(ce)(0, 0);
    Var utt_loss = ce;
    std::vector<int> ctc_ids = ctc_targets(u.transcript, model.char_vocab);
    if (cfg.lambda > 0.0 &&
        ctc_min_frames(ctc_ids) <= t.val(h_o).rows()) {
      Var frame_logits = model.ctc_head.apply(t, h_o);
      // The alignment marginal is a total over the sequence; per-target-token
      // it is on the cross-entropy's scale, so lambda weighs comparable terms.
      Var ctc = t.scale(ctc_loss_op(t, frame_logits, ctc_ids),
                        1.0 / static_cast<double>(ctc_ids.size()));
      ctc_sum += t.val(ctc)(0, 0);
      ++ctc_n;
      utt_loss = t.add(ce, t.scale(ctc, cfg.lambda));
    } else if (cfg.lambda > 0.0) {
      ++res.ctc_skipped;
    }
    per_utt.push_back(utt_loss);
  }
  if (per_utt.empty()) throw DataError("finetune_step: empty batch");
  Var loss = per_utt[0];
  for (std::size_t i = 1; i < per_utt.size(); ++i) loss = t.add(loss, per_utt[i]);
  loss = t.scale(loss, 1.0 / static_cast<double>(per_utt.size()));
  res.total = t.val(loss)(0, 0);
  res.ce = ce_sum / static_cast<double>(per_utt.size());
  res.ctc = ctc_n == 0 ? 0.0 : ctc_sum / static_cast<double>(ctc_n);
  t.backward(loss);
  opt.step(train, res.lr);
  return res;
}

struct FinetuneRunResult {
  std::vector<double> totals;
  std::string checkpoint_path;
};

inline FinetuneRunResult run_finetune(RecognizerModel& model, const std::vector<Utterance>& utts,
                                      const FinetuneConfig& cfg, const CorruptionConfig& corr,
                                      const std::string& out_dir) {
  cfg.validate();
  corr.validate();
  if (utts.empty()) throw DataError("finetune: empty corpus");
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  std::ofstream csv(fs::path(out_dir) / "finetune_loss.csv", std::ios::trunc);
  csv << "step,ce,ctc,total,lr,mode_counts\n";
  Adam opt;
  std::vector<Parameter*> all;
  model.all_params(all);
  FinetuneRunResult run;
  std::size_t cursor = 0;
  for (std::size_t step = 1; step <= cfg.total_updates; ++step) {
    std::vector<const Utterance*> batch;
    for (std::size_t j = 0; j < cfg.batch_size; ++j)
      batch.push_back(&utts[(cursor + j) % utts.size()]);
    cursor = (cursor + cfg.batch_size) % utts.size();
    FinetuneStepResult sr = finetune_step(model, batch, cfg, corr, step, opt);
    run.totals.push_back(sr.total);
    csv << step << ',' << sr.ce << ',' << sr.ctc << ',' << sr.total << ',' << sr.lr << ','
        << "v:" << sr.n_video << ";a:" << sr.n_audio << ";av:" << sr.n_av << '\n';
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 &&
        step != cfg.total_updates) {
      save_checkpoint((fs::path(out_dir) / ("stage2_step" + std::to_string(step) + ".ckpt"))
                          .string(), all);
    }
  }
  run.checkpoint_path = (fs::path(out_dir) / "stage2.ckpt").string();
  save_checkpoint(run.checkpoint_path, all);
  return run;
}

struct DecodeOutput {
  std::vector<int> ids;  // generated token ids, EOS excluded
  std::string text;
  bool truncated = false;
};

// Tape-free forward pieces for decoding. Same arithmetic as the tape ops
// (erf gelu, population-variance layer norm, max-subtracted softmax); caches
// make each generated token cost one attention row instead of a fresh
// forward over the whole sequence.
namespace lmdec {

inline Matrix ln_rows(const Matrix& x, const LayerNorm& ln) {
  std::size_t R = x.rows(), C = x.cols();
  Matrix out(R, C);
  for (std::size_t r = 0; r < R; ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < C; ++c) mean += x(r, c);
    mean /= static_cast<double>(C);
    double var = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      double d = x(r, c) - mean;
      var += d * d;
    }
    var /= static_cast<double>(C);
    double inv = 1.0 / std::sqrt(var + ln.eps);
    for (std::size_t c = 0; c < C; ++c)
      out(r, c) = (x(r, c) - mean) * inv * ln.gamma.value(0, c) + ln.beta.value(0, c);
  }
  return out;
}

inline Matrix gelu_rows(Matrix x) {
  for (auto& v : x.raw()) v = v * 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
  return x;
}

// Per-block key/value rows seen so far. Buffers are preallocated to the
// final length; `used` counts the valid leading rows.
struct KvState {
  std::vector<Matrix> k, v;
  std::size_t used = 0;

  void init(std::size_t n_blocks, std::size_t capacity, std::size_t d) {
    k.assign(n_blocks, Matrix(capacity, d));
    v.assign(n_blocks, Matrix(capacity, d));
    used = 0;
  }
};

// Runs `emb` (new rows, token embedding plus position already summed) through
// the blocks, extending the caches; returns the logits row for the last new
// position. Rows within the chunk attend causally.
inline Matrix advance(DecoderLM& lm, KvState& st, const Matrix& emb) {
  std::size_t n = emb.rows(), d = lm.cfg.d_lm;
  std::size_t heads = lm.cfg.n_heads, dh = d / heads;
  double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  if (st.used + n > st.k.front().rows()) throw ShapeError("decode: kv cache overflow");
  Matrix x = emb;
  for (std::size_t b = 0; b < lm.blocks.size(); ++b) {
    LmBlock& blk = lm.blocks[b];
    Matrix n1 = ln_rows(x, blk.ln1);
    Matrix q = blk.attn.wq.apply_eager(n1);
    Matrix kn = blk.attn.wk.apply_eager(n1);
    Matrix vn = blk.attn.wv.apply_eager(n1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) {
        st.k[b](st.used + i, c) = kn(i, c);
        st.v[b](st.used + i, c) = vn(i, c);
      }
    Matrix ctx(n, d);
    std::vector<double> w;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t len = st.used + i + 1;
      for (std::size_t h = 0; h < heads; ++h) {
        w.assign(len, 0.0);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < len; ++j) {
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c)
            dot += q(i, h * dh + c) * st.k[b](j, h * dh + c);
          w[j] = dot * inv_scale;
          mx = std::max(mx, w[j]);
        }
        double denom = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
          w[j] = std::exp(w[j] - mx);
          denom += w[j];
        }
        for (std::size_t c = 0; c < dh; ++c) {
          double acc = 0.0;
          for (std::size_t j = 0; j < len; ++j) acc += w[j] * st.v[b](j, h * dh + c);
          ctx(i, h * dh + c) = acc / denom;
        }
      }
    }
    Matrix h = add(x, blk.attn.wo.apply_eager(ctx));
    x = add(h, blk.ffn.down.apply_eager(gelu_rows(blk.ffn.up.apply_eager(ln_rows(h, blk.ln2)))));
  }
  st.used += n;
  Matrix last(1, d);
  for (std::size_t c = 0; c < d; ++c) last(0, c) = x(n - 1, c);
  return lm.out_proj.apply_eager(ln_rows(last, lm.final_ln));
}

}  // namespace lmdec

// Greedy decoding: assemble the prefix (prompt, av tokens, BOS), then
// repeatedly take the argmax next token (ties resolved to the lowest id)
// until EOS or max_len tokens. The encoder and adaptor run once; the LM
// runs incrementally over cached keys and values.
inline DecodeOutput greedy_decode(RecognizerModel& model, ModalityMode mode, const Matrix& audio,
                                  const Matrix& video, std::size_t max_len) {
  if (max_len < 1) throw ConfigError("greedy_decode: max_len must be >= 1");
  Matrix av;
  {
    Tape t;
    Var h_o = model.encode(t, mode, audio, video);
    av = t.val(model.adaptor.apply(t, h_o));
  }
  DecoderLM& lm = model.lm;
  std::size_t d = lm.cfg.d_lm;
  std::vector<int> prompt_ids = lm.vocab.encode(prompt_text(mode));
  std::size_t prefix = prompt_ids.size() + av.rows() + 1;
  Matrix pos = sinusoid_positions(prefix + max_len, d);
  Matrix emb(prefix, d);
  std::size_t row = 0;
  for (int id : prompt_ids) {
    for (std::size_t c = 0; c < d; ++c) emb(row, c) = lm.tok_embed.value(id, c) + pos(row, c);
    ++row;
  }
  for (std::size_t i = 0; i < av.rows(); ++i) {
    for (std::size_t c = 0; c < d; ++c) emb(row, c) = av(i, c) + pos(row, c);
    ++row;
  }
  for (std::size_t c = 0; c < d; ++c)
    emb(row, c) = lm.tok_embed.value(lm.vocab.bos, c) + pos(row, c);

  lmdec::KvState st;
  st.init(lm.blocks.size(), prefix + max_len, d);
  Matrix logits = lmdec::advance(lm, st, emb);
  DecodeOutput out;
  std::vector<int> generated;
  for (std::size_t it = 0; it < max_len; ++it) {
    int best = 0;
    for (std::size_t c = 1; c < logits.cols(); ++c)
      if (logits(0, c) > logits(0, best)) best = static_cast<int>(c);
    if (best == lm.vocab.eos) {
      out.ids = generated;
      out.text = lm.vocab.decode(generated);
      return out;
    }
    generated.push_back(best);
    if (it + 1 == max_len) break;
    Matrix step(1, d);
    for (std::size_t c = 0; c < d; ++c)
      step(0, c) = lm.tok_embed.value(best, c) + pos(prefix + it, c);
    logits = lmdec::advance(lm, st, step);
  }
  out.ids = generated;
  out.text = lm.vocab.decode(generated);
  out.truncated = true;
  return out;
}

// Teacher-forced next-character training of the base LM on plain text; used
// once to give the committed frozen LM nonzero language knowledge.
inline std::vector<double> train_char_lm(DecoderLM& lm, const std::vector<std::string>& texts,
                                         std::size_t steps, double lr, std::uint64_t seed) {
  if (texts.empty()) throw DataError("train_char_lm: no texts");
  std::vector<Parameter*> ps;
  lm.base_params(ps);
  for (Parameter* p : ps)
    if (p->frozen) throw ConfigError("train_char_lm: base LM is already frozen");
  Adam opt;
  Rng rng(derive_seed(seed, "char_lm"));
  std::vector<double> losses;
  for (std::size_t step = 0; step < steps; ++step) {
    zero_grads(ps);
    Tape t;
    const std::string& text = texts[rng.randint(texts.size())];
    std::vector<int> ids;
    ids.push_back(lm.vocab.bos);
    for (int id : lm.vocab.encode(text)) ids.push_back(id);
    std::vector<int> targets(ids.size(), -1);
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) targets[i] = ids[i + 1];
    targets.back() = lm.vocab.eos;
    Var emb = t.gather_rows(t.param(lm.tok_embed), ids);
    Var logits = lm.forward(t, emb);
    Var loss = nll_next_token(t, logits, targets);
    losses.push_back(t.val(loss)(0, 0));
    t.backward(loss);
    opt.step(ps, lr);
  }
  return losses;
}

}  // namespace uasr
