// Noise mixing, span masking, and modality dropout: hand-computed cases,
// re-measured SNR, realized mask statistics, and sampling frequencies.
#include <catch2/catch_amalgamated.hpp>

#include "uasr/corruption.hpp"

using namespace uasr;

TEST_CASE("equal-power mixing at 0 dB uses unit gain") {
  Matrix clean(4, 3, 1.0);
  NoiseSignal noise;
  noise.samples = Matrix(4, 3);
  for (std::size_t i = 0; i < noise.samples.size(); ++i)
    noise.samples.raw()[i] = i % 2 == 0 ? 1.0 : -1.0;
  Matrix mixed = mix_at_snr(clean, noise, 0.0);
  Matrix expected = add(clean, noise.samples);
  CHECK(max_abs_diff(mixed, expected) == 0.0);
  CHECK(max_abs_diff(clean, Matrix(4, 3, 1.0)) == 0.0);
}

TEST_CASE("infinite SNR returns the clean signal unchanged") {
  Rng rng(1);
  Matrix clean = random_normal(6, 4, rng);
  NoiseSignal noise = generate_noise(NoiseKind::white, 6, 4, 2);
  Matrix mixed = mix_at_snr(clean, noise, kSnrInf);
  CHECK(max_abs_diff(mixed, clean) == 0.0);
}

TEST_CASE("re-measured SNR matches the request across the grid") {
  Rng rng(3);
  Matrix clean = random_normal(120, 8, rng);
  for (double snr : {-10.0, -5.0, 0.0, 5.0, 10.0}) {
    for (NoiseKind kind : {NoiseKind::white, NoiseKind::tonal, NoiseKind::babble}) {
      NoiseSignal noise = generate_noise(kind, 120, 8, 17 + static_cast<int>(kind));
      Matrix mixed = mix_at_snr(clean, noise, snr);
      CHECK(std::abs(measured_snr_db(clean, mixed) - snr) < 1e-9);
    }
  }
}

TEST_CASE("noise is tiled or cropped to the clean length") {
  Rng rng(4);
  Matrix clean = random_normal(50, 3, rng);
  NoiseSignal short_noise = generate_noise(NoiseKind::white, 7, 3, 5);
  Matrix m1 = mix_at_snr(clean, short_noise, 0.0);
  CHECK(m1.rows() == 50);
  // Tiling repeats rows with period 7.
  Matrix residual = sub(m1, clean);
  for (std::size_t r = 0; r + 7 < 50; ++r)
    for (std::size_t c = 0; c < 3; ++c)
      CHECK(residual(r, c) == Catch::Approx(residual(r + 7, c)).margin(1e-12));

  NoiseSignal long_noise = generate_noise(NoiseKind::white, 500, 3, 6);
  Rng crop_rng(9);
  Matrix m2 = mix_at_snr(clean, long_noise, 0.0, &crop_rng);
  CHECK(m2.rows() == 50);
  CHECK(std::abs(measured_snr_db(clean, m2)) < 1e-9);
}

TEST_CASE("degenerate mixing inputs are rejected") {
  NoiseSignal noise = generate_noise(NoiseKind::white, 8, 3, 7);
  Matrix zero(8, 3);
  CHECK_THROWS_AS(mix_at_snr(zero, noise, 0.0), DataError);
  NoiseSignal silent;
  silent.samples = Matrix(8, 3);
  Matrix clean(8, 3, 1.0);
  CHECK_THROWS_AS(mix_at_snr(clean, silent, 0.0), DataError);
  NoiseSignal narrow;
  narrow.samples = Matrix(8, 2, 1.0);
  CHECK_THROWS_AS(mix_at_snr(clean, narrow, 0.0), ShapeError);
}

TEST_CASE("span masking zeroes marked rows and leaves the rest untouched") {
  Rng data_rng(8);
  Matrix seq = random_normal(60, 5, data_rng);
  Rng rng(9);
  auto [masked, mask] = span_mask(seq, 0.5, 4, rng);
  REQUIRE(mask.size() == 60);
  std::size_t n_masked = 0;
  for (std::size_t r = 0; r < 60; ++r) {
    if (mask[r]) {
      ++n_masked;
      for (std::size_t c = 0; c < 5; ++c) CHECK(masked(r, c) == 0.0);
    } else {
      for (std::size_t c = 0; c < 5; ++c) CHECK(masked(r, c) == seq(r, c));
    }
  }
  CHECK(n_masked >= 30);
}

TEST_CASE("span masking edge ratios") {
  Rng data_rng(10);
  Matrix seq = random_normal(20, 3, data_rng);
  Rng rng(11);
  auto [noop, mask0] = span_mask(seq, 0.0, 5, rng);
  CHECK(max_abs_diff(noop, seq) == 0.0);
  for (auto b : mask0) CHECK(b == 0);
  auto [all, mask1] = span_mask(seq, 1.0, 5, rng);
  for (auto b : mask1) CHECK(b == 1);
  CHECK(mean_square(all) == 0.0);
}

TEST_CASE("realized mask ratio concentrates near the target") {
  Rng data_rng(12);
  Matrix seq = random_normal(1000, 2, data_rng);
  Rng rng(13);
  double total_ratio = 0.0;
  const int trials = 100;
  for (int i = 0; i < trials; ++i) {
    auto [masked, mask] = span_mask(seq, 0.8, 10, rng);
    std::size_t count = 0;
    for (auto b : mask) count += b;
    double ratio = static_cast<double>(count) / 1000.0;
    CHECK(ratio >= 0.8);
    total_ratio += ratio;
  }
  double mean_ratio = total_ratio / trials;
  INFO("mean realized ratio " << mean_ratio);
  CHECK(mean_ratio >= 0.80);
  CHECK(mean_ratio <= 0.84);
}

TEST_CASE("span masking is deterministic in the rng seed") {
  Rng data_rng(14);
  Matrix seq = random_normal(64, 4, data_rng);
  Rng r1(77), r2(77);
  auto a = span_mask(seq, 0.4, 5, r1);
  auto b = span_mask(seq, 0.4, 5, r2);
  CHECK(max_abs_diff(a.first, b.first) == 0.0);
  CHECK(a.second == b.second);
}

TEST_CASE("pretrain modality sampling matches its probability") {
  Rng rng(15);
  const int n = 10000;
  int video = 0;
  for (int i = 0; i < n; ++i)
    video += sample_mode_pretrain(0.5, rng) == ModalityMode::VideoOnly ? 1 : 0;
  double freq = static_cast<double>(video) / n;
  CHECK(freq > 0.48);
  CHECK(freq < 0.52);

  Rng rng0(16);
  for (int i = 0; i < 100; ++i)
    CHECK(sample_mode_pretrain(0.0, rng0) == ModalityMode::AudioVisual);
  Rng rng1(17);
  for (int i = 0; i < 100; ++i)
    CHECK(sample_mode_pretrain(1.0, rng1) == ModalityMode::VideoOnly);
}

TEST_CASE("finetune modality sampling matches its probabilities") {
  Rng rng(18);
  const int n = 20000;
  int v = 0, a = 0, av = 0;
  for (int i = 0; i < n; ++i) {
    switch (sample_mode_finetune(0.5, 0.25, rng)) {
      case ModalityMode::VideoOnly: ++v; break;
      case ModalityMode::AudioOnly: ++a; break;
      case ModalityMode::AudioVisual: ++av; break;
    }
  }
  CHECK(std::abs(v / static_cast<double>(n) - 0.50) < 0.02);
  CHECK(std::abs(a / static_cast<double>(n) - 0.25) < 0.02);
  CHECK(std::abs(av / static_cast<double>(n) - 0.25) < 0.02);

  CHECK_THROWS_AS([] {
    Rng r(1);
    sample_mode_finetune(0.6, 0.6, r);
  }(), ConfigError);
}

TEST_CASE("corruption config validation") {
  CorruptionConfig c;
  c.validate();
  c.audio_mask_ratio = 1.2;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = CorruptionConfig{};
  c.snr_grid_db.clear();
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = CorruptionConfig{};
  c.audio_span_len = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = CorruptionConfig{};
  c.p_prime_v = 0.8;
  c.p_prime_a = 0.3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}
