// Input corruption for both training stages: SNR-controlled noise mixing,
// span masking, and modality dropout sampling.
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

#include "uasr/errors.hpp"
#include "uasr/matrix.hpp"
#include "uasr/rng.hpp"
#include "uasr/synthcorpus.hpp"

namespace uasr {

enum class ModalityMode { VideoOnly, AudioOnly, AudioVisual };

inline std::string modality_mode_name(ModalityMode m) {
  switch (m) {
    case ModalityMode::VideoOnly: return "video_only";
    case ModalityMode::AudioOnly: return "audio_only";
    case ModalityMode::AudioVisual: return "audio_visual";
  }
  throw ConfigError("bad modality mode enum");
}

struct CorruptionConfig {
  double audio_mask_ratio = 0.80;
  double video_mask_ratio = 0.30;
  std::size_t audio_span_len = 10;
  std::size_t video_span_len = 5;
  double p_v = 0.5;        // pretrain: video-only probability
  double p_prime_v = 0.5;  // finetune: video-only probability
  double p_prime_a = 0.25; // finetune: audio-only probability
  std::vector<double> snr_grid_db = {-10.0, -5.0, 0.0, 5.0, 10.0};
  double noise_prob = 0.75;

  void validate() const {
    auto in01 = [](double x) { return x >= 0.0 && x <= 1.0; };
    if (!in01(audio_mask_ratio) || !in01(video_mask_ratio))
      throw ConfigError("corruption: mask ratios must lie in [0, 1]");
    if (audio_span_len < 1 || video_span_len < 1)
      throw ConfigError("corruption: span lengths must be >= 1");
    if (!in01(p_v)) throw ConfigError("corruption: p_v must lie in [0, 1]");
    if (!in01(p_prime_v) || !in01(p_prime_a) || p_prime_v + p_prime_a > 1.0)
      throw ConfigError("corruption: need p_prime_v, p_prime_a >= 0 with sum <= 1");
    if (!in01(noise_prob)) throw ConfigError("corruption: noise_prob must lie in [0, 1]");
    if (snr_grid_db.empty()) throw ConfigError("corruption: snr_grid_db must be non-empty");
  }
};

// Sentinel for the no-noise path.
inline constexpr double kSnrInf = std::numeric_limits<double>::infinity();

// A^N = clean + alpha * noise with alpha chosen so the mixed-in noise power
// sits snr_db below the clean power (powers are mean squares over all
// entries). Noise shorter than the clean signal is tiled; longer noise is
// cropped, at a random offset when an rng is supplied.
inline Matrix mix_at_snr(const Matrix& clean, const NoiseSignal& noise, double snr_db,
                         Rng* rng = nullptr) {
  if (snr_db == kSnrInf) return clean;
  if (clean.empty()) throw ShapeError("mix_at_snr: empty clean signal");
  if (noise.samples.cols() != clean.cols())
    throw ShapeError("mix_at_snr: feature dim mismatch " + clean.shape_str() + " vs " +
                     noise.samples.shape_str());
  if (noise.samples.rows() == 0) throw DataError("mix_at_snr: empty noise signal");
  std::size_t t = clean.rows();
  std::size_t nt = noise.samples.rows();
  std::size_t offset = 0;
  if (rng != nullptr && nt > t) offset = rng->randint(nt - t + 1);
  Matrix fitted(t, clean.cols());
  for (std::size_t r = 0; r < t; ++r) {
    std::size_t src = (offset + r) % nt;
    for (std::size_t c = 0; c < clean.cols(); ++c) fitted(r, c) = noise.samples(src, c);
  }
  double p_clean = mean_square(clean);
  double p_noise = mean_square(fitted);
  if (p_clean <= 0.0) throw DataError("mix_at_snr: zero-power clean signal, SNR undefined");
  if (p_noise <= 0.0) throw DataError("mix_at_snr: zero-power noise signal");
  double alpha = std::sqrt(p_clean / (p_noise * std::pow(10.0, snr_db / 10.0)));
  Matrix out = clean;
  out.map() += alpha * fitted.map();
  return out;
}

inline double measured_snr_db(const Matrix& clean, const Matrix& mixed) {
  Matrix residual = sub(mixed, clean);
  return 10.0 * std::log10(mean_square(clean) / mean_square(residual));
}

// Zeroes uniformly-placed spans (overlap allowed, clipped at the end) until
// the masked fraction reaches target_ratio or 10*N attempts have been made.
// Returns the masked copy and the realized boolean mask.
inline std::pair<Matrix, std::vector<std::uint8_t>> span_mask(const Matrix& seq,
                                                              double target_ratio,
                                                              std::size_t span_len, Rng& rng) {
  if (target_ratio < 0.0 || target_ratio > 1.0)
    throw ConfigError("span_mask: target_ratio must lie in [0, 1]");
  if (span_len < 1) throw ConfigError("span_mask: span_len must be >= 1");
  std::size_t n = seq.rows();
  Matrix out = seq;
  std::vector<std::uint8_t> mask(n, 0);
  if (target_ratio <= 0.0 || n == 0) return {std::move(out), std::move(mask)};
  std::size_t masked = 0;
  std::size_t iters = 0;
  const std::size_t cap = 10 * n;
  while (static_cast<double>(masked) < target_ratio * static_cast<double>(n) && iters < cap) {
    ++iters;
    std::size_t start = rng.randint(n);
    std::size_t end = std::min(n, start + span_len);
    for (std::size_t r = start; r < end; ++r) {
      if (!mask[r]) {
        mask[r] = 1;
        ++masked;
      }
      for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) = 0.0;
    }
  }
  return {std::move(out), std::move(mask)};
}

// Pretrain variant: VideoOnly w.p. p_v, else AudioVisual (AudioOnly never).
inline ModalityMode sample_mode_pretrain(double p_v, Rng& rng) {
  if (p_v < 0.0 || p_v > 1.0) throw ConfigError("sample_mode_pretrain: p_v must lie in [0, 1]");
  return rng.uniform() < p_v ? ModalityMode::VideoOnly : ModalityMode::AudioVisual;
}

// Finetune variant: VideoOnly w.p. p'_v, AudioOnly w.p. p'_a, else
// AudioVisual. One uniform draw keeps the sequence reproducible.
inline ModalityMode sample_mode_finetune(double p_prime_v, double p_prime_a, Rng& rng) {
  if (p_prime_v < 0.0 || p_prime_a < 0.0 || p_prime_v + p_prime_a > 1.0)
    throw ConfigError("sample_mode_finetune: need p'_v, p'_a >= 0 with sum <= 1");
  double u = rng.uniform();
  if (u < p_prime_v) return ModalityMode::VideoOnly;
  if (u < p_prime_v + p_prime_a) return ModalityMode::AudioOnly;
  return ModalityMode::AudioVisual;
}

}  // namespace uasr
