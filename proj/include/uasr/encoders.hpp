// Frozen toy speech foundation model (pre-LN transformer blocks exposing
// per-block hidden states), frozen visual encoder, and the teacher-target
// construction (averaged instance-normalized last-k block outputs).
//
// All forwards run on a Tape, including the gradient-free teacher path, so
// every consumer sees one arithmetic pipeline; identity checks between the
// plain and injected forward paths can then demand exact equality.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "uasr/autodiff.hpp"
#include "uasr/errors.hpp"
#include "uasr/matrix.hpp"
#include "uasr/nn.hpp"
#include "uasr/rng.hpp"

namespace uasr {

struct EncoderConfig {
  std::size_t audio_dim = 24;
  std::size_t video_dim = 16;
  std::size_t n_blocks = 4;  // L
  std::size_t d_model = 64;  // D
  std::size_t n_heads = 4;
  std::size_t d_ffn = 128;
  std::size_t d_visual = 32;        // D_v
  std::size_t d_visual_hidden = 32;
  std::size_t k = 2;  // teacher aggregates the last k blocks
  std::uint64_t init_seed = 0;

  void validate() const {
    if (n_blocks < 2) throw ConfigError("encoders: n_blocks must be >= 2");
    if (d_model % n_heads != 0)
      throw ConfigError("encoders: d_model must be divisible by n_heads");
    if (k < 1 || k > n_blocks) throw ConfigError("encoders: k must lie in [1, n_blocks]");
    if (audio_dim == 0 || video_dim == 0 || d_visual == 0)
      throw ConfigError("encoders: zero dimension");
  }
};

struct LayerOutputs {
  std::vector<Matrix> states;  // H^1..H^L, each [T x D]
};

// Pre-LN block: x + SelfAttn(LN(x)), then + FFN(LN(.)).
struct SfmBlock {
  LayerNorm ln1, ln2;
  Mha attn;
  Ffn ffn;

  void init(const std::string& name, std::size_t d, std::size_t heads, std::size_t d_ffn,
            Rng& rng) {
    ln1.init(name + ".ln1", "sfm", d);
    ln2.init(name + ".ln2", "sfm", d);
    attn.init(name + ".attn", "sfm", d, d, d, d, heads, rng);
    ffn.init(name + ".ffn", "sfm", d, d_ffn, rng);
  }

  Var apply(Tape& t, Var x) {
    Var n1 = ln1.apply(t, x);
    Var h = t.add(x, attn.apply(t, n1, n1));
    return t.add(h, ffn.apply(t, ln2.apply(t, h)));
  }

  void params(std::vector<Parameter*>& out) {
    ln1.params(out);
    ln2.params(out);
    attn.params(out);
    ffn.params(out);
  }
};

struct Sfm {
  EncoderConfig cfg;
  Linear in_proj;
  std::vector<SfmBlock> blocks;

  void init(const EncoderConfig& c) {
    cfg = c;
    cfg.validate();
    Rng rng(derive_seed(cfg.init_seed, "sfm"));
    in_proj.init("sfm.in_proj", "sfm", cfg.audio_dim, cfg.d_model, rng);
    blocks.resize(cfg.n_blocks);
    for (std::size_t i = 0; i < cfg.n_blocks; ++i)
      blocks[i].init("sfm.block" + std::to_string(i), cfg.d_model, cfg.n_heads, cfg.d_ffn, rng);
    freeze();
  }

  void freeze() {
    std::vector<Parameter*> ps;
    params(ps);
    for (Parameter* p : ps) p->frozen = true;
  }

  // Input projection plus absolute sinusoidal positions.
  Var embed(Tape& t, Var audio) {
    if (t.val(audio).rows() == 0) throw ShapeError("sfm: zero-length audio");
    if (t.val(audio).cols() != cfg.audio_dim)
      throw ShapeError("sfm: audio dim " + t.val(audio).shape_str() + ", expected cols " +
                       std::to_string(cfg.audio_dim));
    Var h = in_proj.apply(t, audio);
    Var pos = t.constant(sinusoid_positions(t.val(audio).rows(), cfg.d_model));
    return t.add(h, pos);
  }

  // Per-block states H^1..H^L on the caller's tape.
  std::vector<Var> forward_vars(Tape& t, Var audio) {
    Var h = embed(t, audio);
    std::vector<Var> states;
    states.reserve(blocks.size());
    for (auto& b : blocks) {
      h = b.apply(t, h);
      states.push_back(h);
    }
    return states;
  }

  LayerOutputs forward(const Matrix& audio) {
    Tape t;
    std::vector<Var> vars = forward_vars(t, t.constant(audio));
    LayerOutputs out;
    for (Var v : vars) out.states.push_back(t.val(v));
    return out;
  }

  void params(std::vector<Parameter*>& out) {
    in_proj.params(out);
    for (auto& b : blocks) b.params(out);
  }
};

// Frozen rowwise two-layer MLP: video [T_v x video_dim] -> H_v [T_v x D_v].
struct VisualEncoder {
  EncoderConfig cfg;
  Linear l1, l2;

  void init(const EncoderConfig& c) {
    cfg = c;
    Rng rng(derive_seed(cfg.init_seed, "visual_encoder"));
    l1.init("venc.l1", "visual_encoder", cfg.video_dim, cfg.d_visual_hidden, rng);
    l2.init("venc.l2", "visual_encoder", cfg.d_visual_hidden, cfg.d_visual, rng);
    std::vector<Parameter*> ps;
    params(ps);
    for (Parameter* p : ps) p->frozen = true;
  }

  Matrix encode(const Matrix& video) const {
    if (video.rows() == 0) throw ShapeError("visual encoder: zero-length video");
    if (video.cols() != cfg.video_dim)
      throw ShapeError("visual encoder: video dim " + video.shape_str() + ", expected cols " +
                       std::to_string(cfg.video_dim));
    Matrix h = l1.apply_eager(video);
    for (auto& v : h.raw()) v = v * 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
    return l2.apply_eager(h);
  }

  void params(std::vector<Parameter*>& out) {
    l1.params(out);
    l2.params(out);
  }
};

// Per feature dimension over the time axis: subtract mean, divide by
// sqrt(variance + eps). Non-affine.
inline Matrix instance_norm(const Matrix& h, double eps = 1e-5) {
  if (h.rows() < 1) throw ShapeError("instance_norm: empty input");
  Matrix out(h.rows(), h.cols());
  double n = static_cast<double>(h.rows());
  for (std::size_t d = 0; d < h.cols(); ++d) {
    double mean = 0.0;
    for (std::size_t t = 0; t < h.rows(); ++t) mean += h(t, d);
    mean /= n;
    double var = 0.0;
    for (std::size_t t = 0; t < h.rows(); ++t) {
      double diff = h(t, d) - mean;
      var += diff * diff;
    }
    var /= n;
    double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t t = 0; t < h.rows(); ++t) out(t, d) = (h(t, d) - mean) * inv;
  }
  return out;
}

struct TeacherTarget {
  Matrix target;  // H^T [T x D]
  std::size_t k = 0;
};

// H^T = (1/k) * sum over the last k blocks of instance_norm(H^i).
inline TeacherTarget teacher_target(const LayerOutputs& outputs, std::size_t k) {
  std::size_t l = outputs.states.size();
  if (k < 1 || k > l)
    throw ConfigError("teacher_target: k = " + std::to_string(k) + " outside [1, " +
                      std::to_string(l) + "]");
  TeacherTarget out;
  out.k = k;
  out.target = Matrix(outputs.states[0].rows(), outputs.states[0].cols());
  for (std::size_t i = l - k; i < l; ++i) {
    Matrix in = instance_norm(outputs.states[i]);
    out.target.map() += in.map();
  }
  out.target.map() /= static_cast<double>(k);
  return out;
}

}  // namespace uasr
