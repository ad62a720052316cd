// Stage 1: visual-injection pretraining. Corrupted-input student forward
// through SFM-AV, clean-audio teacher targets from the frozen SFM, and a
// per-frame L1-minus-cosine distillation loss behind a learnable projection
// that is discarded after this stage.
#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "uasr/autodiff.hpp"
#include "uasr/checkpoint.hpp"
#include "uasr/corruption.hpp"
#include "uasr/encoders.hpp"
#include "uasr/injection.hpp"
#include "uasr/matrix.hpp"
#include "uasr/nn.hpp"
#include "uasr/rng.hpp"
#include "uasr/synthcorpus.hpp"

namespace uasr {

struct PretrainConfig {
  std::size_t total_updates = 500;
  double peak_lr = 5e-4;
  double warmup_frac = 0.05;
  double hold_frac = 0.85;
  double decay_frac = 0.10;
  double decay_floor = 0.01;  // final lr = peak * decay_floor
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;
  std::size_t k = 2;  // teacher block count
  std::size_t checkpoint_every = 0;  // 0 = final checkpoint only

  void validate() const {
    if (total_updates < 1) throw ConfigError("distill: total_updates must be >= 1");
    if (batch_size < 1) throw ConfigError("distill: batch_size must be >= 1");
    if (peak_lr <= 0.0) throw ConfigError("distill: peak_lr must be positive");
    if (warmup_frac < 0.0 || hold_frac < 0.0 || decay_frac < 0.0 ||
        std::abs(warmup_frac + hold_frac + decay_frac - 1.0) > 1e-9)
      throw ConfigError("distill: warmup/hold/decay fractions must be >= 0 and sum to 1");
    if (decay_floor <= 0.0 || decay_floor > 1.0)
      throw ConfigError("distill: decay_floor must lie in (0, 1]");
  }
};

// Linear warmup to peak, hold, then exponential decay to peak*decay_floor
// at the final step.
inline double lr_schedule(std::size_t step, const PretrainConfig& cfg) {
  cfg.validate();
  if (step > cfg.total_updates) throw ConfigError("lr_schedule: step beyond total_updates");
  double total = static_cast<double>(cfg.total_updates);
  double warm_end = cfg.warmup_frac * total;
  double hold_end = (cfg.warmup_frac + cfg.hold_frac) * total;
  double s = static_cast<double>(step);
  if (s <= warm_end) return warm_end == 0.0 ? cfg.peak_lr : cfg.peak_lr * s / warm_end;
  if (s <= hold_end || hold_end >= total) return cfg.peak_lr;
  double frac = (s - hold_end) / (total - hold_end);
  return cfg.peak_lr * std::pow(cfg.decay_floor, frac);
}

inline constexpr double kCosEps = 1e-8;

// Eager per-sequence loss: (1/T) * sum_i ( ||pred_i - target_i||_1
// - cos(pred_i, target_i) ), cosine denominator clamped at eps from below.
inline double distill_loss(const Matrix& pred, const Matrix& target, double eps = kCosEps) {
  check_same_shape(pred, target, "distill_loss");
  if (pred.rows() < 1) throw ShapeError("distill_loss: need T >= 1");
  double total = 0.0;
  for (std::size_t i = 0; i < pred.rows(); ++i) {
    double l1 = 0.0, dot = 0.0, np = 0.0, ny = 0.0;
    for (std::size_t j = 0; j < pred.cols(); ++j) {
      double p = pred(i, j), y = target(i, j);
      l1 += std::abs(p - y);
      dot += p * y;
      np += p * p;
      ny += y * y;
    }
    if (l1 == 0.0) {
      // Identical rows: the cosine is 1 by definition (0 for zero rows), and
      // evaluating dot/denom here would only add sqrt rounding noise.
      total += np > 0.0 ? -1.0 : 0.0;
      continue;
    }
    double denom = std::max(std::sqrt(np) * std::sqrt(ny), eps);
    total += l1 - dot / denom;
  }
  return total / static_cast<double>(pred.rows());
}

inline double distill_loss(const Matrix& h_o, const Matrix& target, const Matrix& w,
                           double eps = kCosEps) {
  return distill_loss(matmul(h_o, w), target, eps);
}

// Tape node for the loss against a constant teacher target.
inline Var distill_pair_loss(Tape& t, Var pred, Matrix target, double eps = kCosEps) {
  const Matrix& p = t.val(pred);
  check_same_shape(p, target, "distill_pair_loss");
  Matrix out(1, 1);
  out(0, 0) = distill_loss(p, target, eps);
  bool needs = t.needs_grad(pred);
  return TapeOpAccess::push(
      t, std::move(out), needs, [pred, target = std::move(target), eps](Tape& tp) mutable {
        Var self = TapeOpAccess::current(tp);
        if (!tp.needs_grad(pred)) return;
        double g = tp.grad(self)(0, 0);
        const Matrix& p = tp.val(pred);
        Matrix& gp = tp.grad(pred);
        double inv_t = 1.0 / static_cast<double>(p.rows());
        for (std::size_t i = 0; i < p.rows(); ++i) {
          double dot = 0.0, np = 0.0, ny = 0.0;
          for (std::size_t j = 0; j < p.cols(); ++j) {
            dot += p(i, j) * target(i, j);
            np += p(i, j) * p(i, j);
            ny += target(i, j) * target(i, j);
          }
          double norm_p = std::sqrt(np), norm_y = std::sqrt(ny);
          double denom_raw = norm_p * norm_y;
          bool clamped = denom_raw <= eps;
          double denom = clamped ? eps : denom_raw;
          double cos_v = dot / denom;
          for (std::size_t j = 0; j < p.cols(); ++j) {
            double d = p(i, j) - target(i, j);
            double sign = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
            double dcos;
            if (clamped) {
              dcos = target(i, j) / denom;
            } else {
              dcos = target(i, j) / denom - cos_v * p(i, j) / np;
            }
            gp(i, j) += g * inv_t * (sign - dcos);
          }
        }
      });
}

inline Var distill_loss_op(Tape& t, Var h_o, Matrix target, Parameter& w,
                           double eps = kCosEps) {
  return distill_pair_loss(t, t.matmul(h_o, t.param(w)), std::move(target), eps);
}

// Everything stage 1 touches: the frozen encoders, the injection modules,
// and the distillation projection.
struct DistillModel {
  Sfm sfm;
  VisualEncoder venc;
  SfmAv sfmav;
  Parameter w;  // DistillProjection, identity-init, stage-1 only
  std::size_t frame_ratio = 2;

  void init(const EncoderConfig& enc_cfg, const InjectionConfig& inj_cfg, std::size_t ratio) {
    sfm.init(enc_cfg);
    venc.init(enc_cfg);
    sfmav.init(&sfm, inj_cfg, ratio);
    frame_ratio = ratio;
    w.name = "distill.w";
    w.stage = "distill";
    w.value = Matrix::identity(enc_cfg.d_model);
  }

  void trainables(std::vector<Parameter*>& out) {
    sfmav.params(out);
    out.push_back(&w);
  }

  void all_params(std::vector<Parameter*>& out) {
    sfm.params(out);
    venc.params(out);
    sfmav.params(out);
    out.push_back(&w);
  }
};

// Per-utterance student corruption for one pretrain step. Exposed so tests
// can replay the exact corruption sequence.
struct CorruptedInputs {
  Matrix audio;    // noised/masked (or zeroed) audio features
  Matrix video;    // masked video features
  ModalityMode mode = ModalityMode::AudioVisual;
};

inline CorruptedInputs corrupt_pretrain(const Matrix& audio, const Matrix& video,
                                        const CorruptionConfig& corr, Rng& rng) {
  CorruptedInputs out;
  out.audio = audio;
  if (corr.noise_prob > 0.0 && rng.uniform() < corr.noise_prob) {
    NoiseKind kind = static_cast<NoiseKind>(rng.randint(3));
    double snr = corr.snr_grid_db[rng.randint(corr.snr_grid_db.size())];
    NoiseSignal noise = generate_noise(kind, audio.rows(), audio.cols(), rng.raw());
    out.audio = mix_at_snr(out.audio, noise, snr, &rng);
  }
  out.mode = sample_mode_pretrain(corr.p_v, rng);
  if (out.mode == ModalityMode::VideoOnly) {
    out.audio = Matrix::zeros(audio.rows(), audio.cols());
  } else {
    out.audio = span_mask(out.audio, corr.audio_mask_ratio, corr.audio_span_len, rng).first;
  }
  out.video = span_mask(video, corr.video_mask_ratio, corr.video_span_len, rng).first;
  return out;
}

struct StepResult {
  double loss = 0.0;
  double lr = 0.0;
  std::size_t used = 0;  // utterances contributing (T >= 2 filter)
};

// One optimizer update over a batch: teacher targets from clean audio,
// student forward on corrupted inputs, mean distillation loss, Adam step on
// the injection modules and W only.
inline StepResult pretrain_step(DistillModel& model, const std::vector<const Utterance*>& batch,
                                const PretrainConfig& cfg, const CorruptionConfig& corr,
                                std::size_t step, Adam& opt) {
  StepResult res;
  res.lr = lr_schedule(step, cfg);
  std::vector<Parameter*> train;
  model.trainables(train);
  zero_grads(train);
  Tape t;
  std::vector<Var> losses;
  std::uint64_t step_seed = derive_seed(cfg.seed, "pretrain_step_" + std::to_string(step));
  for (std::size_t bi = 0; bi < batch.size(); ++bi) {
    const Utterance& u = *batch[bi];
    if (u.audio.rows() < 2) continue;  // skip degenerate utterances
    Matrix clean_audio = u.audio;
    Matrix video = u.video;
    SfmAv::align_lengths(clean_audio, video, model.frame_ratio);
    TeacherTarget teacher = teacher_target(model.sfm.forward(clean_audio), cfg.k);
    Rng rng(derive_seed(step_seed, bi));
    CorruptedInputs student = corrupt_pretrain(clean_audio, video, corr, rng);
    Matrix h_v = model.venc.encode(student.video);
    Var h_o = model.sfmav.forward(t, student.audio, h_v);
    losses.push_back(distill_loss_op(t, h_o, std::move(teacher.target), model.w));
    ++res.used;
  }
  if (losses.empty()) throw DataError("pretrain_step: no usable utterance in batch");
  Var loss = losses[0];
  for (std::size_t i = 1; i < losses.size(); ++i) loss = t.add(loss, losses[i]);
  loss = t.scale(loss, 1.0 / static_cast<double>(losses.size()));
  res.loss = t.val(loss)(0, 0);
  t.backward(loss);
  opt.step(train, res.lr);
  return res;
}

struct PretrainRunResult {
  std::vector<double> losses;  // one entry per update
  std::string checkpoint_path;
};

// Full stage-1 loop: deterministic batch cycling, CSV loss curve
// (step,loss,lr), checkpoints holding every parameter of the model.
inline PretrainRunResult run_pretrain(DistillModel& model, const std::vector<Utterance>& utts,
                                      const PretrainConfig& cfg, const CorruptionConfig& corr,
                                      const std::string& out_dir) {
  cfg.validate();
  corr.validate();
  if (utts.empty()) throw DataError("pretrain: empty corpus");
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  std::ofstream csv(fs::path(out_dir) / "pretrain_loss.csv", std::ios::trunc);
  csv << "step,loss,lr\n";
  Adam opt;
  std::vector<Parameter*> all;
  model.all_params(all);
  PretrainRunResult run;
  std::size_t cursor = 0;
  for (std::size_t step = 1; step <= cfg.total_updates; ++step) {
    std::vector<const Utterance*> batch;
    for (std::size_t j = 0; j < cfg.batch_size; ++j)
      batch.push_back(&utts[(cursor + j) % utts.size()]);
    cursor = (cursor + cfg.batch_size) % utts.size();
    StepResult sr = pretrain_step(model, batch, cfg, corr, step, opt);
    run.losses.push_back(sr.loss);
    csv << step << ',' << sr.loss << ',' << sr.lr << '\n';
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 &&
        step != cfg.total_updates) {
      save_checkpoint((fs::path(out_dir) / ("stage1_step" + std::to_string(step) + ".ckpt"))
                          .string(), all);
    }
  }
  run.checkpoint_path = (fs::path(out_dir) / "stage1.ckpt").string();
  save_checkpoint(run.checkpoint_path, all);
  return run;
}

}  // namespace uasr
