// Visual injection: per-block gated cross-attention (audio queries, visual
// keys/values) with a relative-position logit bias, plus a gated FFN, both
// residual. Gates start at zero, so a freshly initialized SFM-AV reproduces
// the frozen SFM output bit for bit.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "uasr/autodiff.hpp"
#include "uasr/encoders.hpp"
#include "uasr/errors.hpp"
#include "uasr/matrix.hpp"
#include "uasr/nn.hpp"
#include "uasr/rng.hpp"

namespace uasr {

struct InjectionConfig {
  std::size_t n_heads = 4;
  std::size_t d_attn = 32;
  std::size_t d_ffn = 32;
  std::size_t relpos_dim = 16;          // sinusoidal embedding width (even)
  double relpos_min_period_s = 0.02;    // shortest period in the ladder
  double relpos_max_period_s = 4.0;     // longest period (~max utterance)
  double audio_fps = 50.0;              // f_a
  double video_fps = 25.0;              // f_v
  std::uint64_t init_seed = 0;

  void validate() const {
    if (n_heads < 1) throw ConfigError("injection: n_heads must be >= 1");
    if (d_attn % n_heads != 0)
      throw ConfigError("injection: d_attn must be divisible by n_heads");
    if (relpos_dim < 2 || relpos_dim % 2 != 0)
      throw ConfigError("injection: relpos_dim must be even and >= 2");
    if (relpos_min_period_s <= 0.0 || relpos_max_period_s <= relpos_min_period_s)
      throw ConfigError("injection: need 0 < relpos_min_period_s < relpos_max_period_s");
    if (audio_fps <= 0.0 || video_fps <= 0.0)
      throw ConfigError("injection: frame rates must be positive");
  }
};

// Signed time delta between audio frame m and video frame n, in seconds.
// Written over the common denominator so aligned index shifts cancel
// exactly in floating point.
inline double relpos_delta_t(std::size_t m, std::size_t n, double f_a, double f_v) {
  return (static_cast<double>(m) * f_v - static_cast<double>(n) * f_a) / (f_a * f_v);
}

// Sinusoidal embedding of delta-t with a geometric period ladder: pair j
// uses period min * (max/min)^(j/(J-1)); row layout [sin, cos] per pair.
// Rows are ordered m-major: row m*T_v + n describes the (m, n) pair.
inline Matrix relpos_table(std::size_t t_a, std::size_t t_v, const InjectionConfig& cfg) {
  std::size_t pairs = cfg.relpos_dim / 2;
  Matrix out(t_a * t_v, cfg.relpos_dim);
  std::vector<double> omega(pairs);
  for (std::size_t j = 0; j < pairs; ++j) {
    double frac = pairs == 1 ? 0.0 : static_cast<double>(j) / static_cast<double>(pairs - 1);
    double period = cfg.relpos_min_period_s *
                    std::pow(cfg.relpos_max_period_s / cfg.relpos_min_period_s, frac);
    omega[j] = 2.0 * M_PI / period;
  }
  for (std::size_t m = 0; m < t_a; ++m) {
    for (std::size_t n = 0; n < t_v; ++n) {
      double dt = relpos_delta_t(m, n, cfg.audio_fps, cfg.video_fps);
      std::size_t row = m * t_v + n;
      for (std::size_t j = 0; j < pairs; ++j) {
        out(row, 2 * j) = std::sin(omega[j] * dt);
        out(row, 2 * j + 1) = std::cos(omega[j] * dt);
      }
    }
  }
  return out;
}

// Eager bias for tests and oracles: one [T x T_v] matrix per head, entry
// (m, n) = embedding(delta_t(m, n)) dot proj[:, head].
inline std::vector<Matrix> relpos_bias(std::size_t t_a, std::size_t t_v,
                                       const InjectionConfig& cfg, const Matrix& proj) {
  if (proj.rows() != cfg.relpos_dim || proj.cols() != cfg.n_heads)
    throw ShapeError("relpos_bias: projection must be [relpos_dim x n_heads]");
  Matrix table = relpos_table(t_a, t_v, cfg);
  Matrix flat = matmul(table, proj);  // [T*T_v x n_heads]
  std::vector<Matrix> out;
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    Matrix b(t_a, t_v);
    for (std::size_t m = 0; m < t_a; ++m)
      for (std::size_t n = 0; n < t_v; ++n) b(m, n) = flat(m * t_v + n, h);
    out.push_back(std::move(b));
  }
  return out;
}

// One injection module: H_mid = tanh(g) * MHA(H_a, H_v, H_v, bias) + H_a;
// H_av = tanh(g') * FFN(H_mid) + H_mid.
struct InjectionBlock {
  Mha attn;
  Ffn ffn;
  Parameter gate_attn;    // g, 1x1, zero-init
  Parameter gate_ffn;     // g', 1x1, zero-init
  Parameter relpos_proj;  // [relpos_dim x n_heads]

  void init(const std::string& name, std::size_t d_model, std::size_t d_visual,
            const InjectionConfig& cfg, Rng& rng) {
    attn.init(name + ".attn", "injection", d_model, d_visual, cfg.d_attn, d_model, cfg.n_heads,
              rng);
    ffn.init(name + ".ffn", "injection", d_model, cfg.d_ffn, rng);
    gate_attn.name = name + ".gate_attn";
    gate_attn.stage = "injection";
    gate_attn.value = Matrix::zeros(1, 1);
    gate_ffn.name = name + ".gate_ffn";
    gate_ffn.stage = "injection";
    gate_ffn.value = Matrix::zeros(1, 1);
    relpos_proj.name = name + ".relpos_proj";
    relpos_proj.stage = "injection";
    double bound = 1.0 / std::sqrt(static_cast<double>(cfg.relpos_dim));
    relpos_proj.value = Matrix(cfg.relpos_dim, cfg.n_heads);
    for (auto& v : relpos_proj.value.raw()) v = rng.uniform(-bound, bound);
  }

  // head_bias entries come from this block's relpos projection (built by
  // the caller so the table constant can be shared across blocks).
  Var apply(Tape& t, Var h_a, Var h_v, const std::vector<Var>& head_bias) {
    Var mha_out = attn.apply(t, h_a, h_v, &head_bias);
    Var g1 = t.tanh_op(t.param(gate_attn));
    Var h_mid = t.add(t.scalar_mul(mha_out, g1), h_a);
    Var ffn_out = ffn.apply(t, h_mid);
    Var g2 = t.tanh_op(t.param(gate_ffn));
    return t.add(t.scalar_mul(ffn_out, g2), h_mid);
  }

  void params(std::vector<Parameter*>& out) {
    attn.params(out);
    ffn.params(out);
    out.push_back(&gate_attn);
    out.push_back(&gate_ffn);
    out.push_back(&relpos_proj);
  }
};

// The frozen SFM with one injection module in front of every block.
// `inject_calls` counts injection-module applications, letting tests assert
// that bypass paths never touch these parameters.
struct SfmAv {
  Sfm* sfm = nullptr;
  InjectionConfig cfg;
  std::size_t frame_ratio = 2;  // audio frames per video frame
  std::vector<InjectionBlock> blocks;
  mutable std::size_t inject_calls = 0;

  void init(Sfm* base, const InjectionConfig& c, std::size_t ratio) {
    sfm = base;
    cfg = c;
    cfg.validate();
    if (ratio < 1) throw ConfigError("sfmav: frame_ratio must be >= 1");
    frame_ratio = ratio;
    Rng rng(derive_seed(cfg.init_seed, "injection"));
    blocks.resize(sfm->blocks.size());
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].init("inject.block" + std::to_string(i), sfm->cfg.d_model, sfm->cfg.d_visual,
                     cfg, rng);
  }

  // Truncates the longer modality so T = frame_ratio * T_v holds exactly.
  static void align_lengths(Matrix& audio, Matrix& h_v, std::size_t ratio) {
    if (audio.rows() == 0 || h_v.rows() == 0) throw ShapeError("sfmav: empty sequence");
    std::size_t t_v = std::min(h_v.rows(), audio.rows() / ratio);
    if (t_v == 0) throw ShapeError("sfmav: audio shorter than one video frame");
    std::size_t t_a = t_v * ratio;
    if (h_v.rows() != t_v) {
      Matrix v(t_v, h_v.cols());
      for (std::size_t r = 0; r < t_v; ++r)
        for (std::size_t c = 0; c < h_v.cols(); ++c) v(r, c) = h_v(r, c);
      h_v = std::move(v);
    }
    if (audio.rows() != t_a) {
      Matrix a(t_a, audio.cols());
      for (std::size_t r = 0; r < t_a; ++r)
        for (std::size_t c = 0; c < audio.cols(); ++c) a(r, c) = audio(r, c);
      audio = std::move(a);
    }
  }

  // Audio features (possibly zeroed/masked) + precomputed visual states in,
  // final hidden state H^o out. states, when given, collects the per-block
  // outputs.
  Var forward(Tape& t, Matrix audio, Matrix h_v, std::vector<Var>* states = nullptr) {
    align_lengths(audio, h_v, frame_ratio);
    std::size_t t_a = audio.rows(), t_v = h_v.rows();
    Var hv = t.constant(std::move(h_v));
    Var h = sfm->embed(t, t.constant(std::move(audio)));
    Var table = t.constant(relpos_table(t_a, t_v, cfg));
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      Var flat = t.matmul(table, t.param(blocks[i].relpos_proj));
      std::vector<Var> head_bias;
      head_bias.reserve(cfg.n_heads);
      for (std::size_t hh = 0; hh < cfg.n_heads; ++hh)
        head_bias.push_back(t.reshape(t.slice_cols(flat, hh, hh + 1), t_a, t_v));
      ++inject_calls;
      h = blocks[i].apply(t, h, hv, head_bias);
      h = sfm->blocks[i].apply(t, h);
      if (states) states->push_back(h);
    }
    return h;
  }

  // Trainable set of this composition: the injection modules only.
  void params(std::vector<Parameter*>& out) {
    for (auto& b : blocks) b.params(out);
  }
};

}  // namespace uasr
