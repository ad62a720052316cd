// Frozen backbone: forward determinism, golden checksums of the committed
// initialization, instance normalization cases, and teacher target
// construction.
#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "uasr/encoders.hpp"
#include "uasr/kv.hpp"

using namespace uasr;

namespace {

EncoderConfig small_cfg() {
  EncoderConfig c;
  c.audio_dim = 6;
  c.video_dim = 4;
  c.n_blocks = 3;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ffn = 24;
  c.d_visual = 8;
  c.d_visual_hidden = 8;
  c.k = 2;
  c.init_seed = 5;
  return c;
}

Matrix probe_input(std::size_t rows, std::size_t cols, const char* tag) {
  Rng rng(derive_seed(97, tag));
  return random_normal(rows, cols, rng);
}

std::pair<double, double> sums_of(const Matrix& m) {
  double sum = 0.0, abs_sum = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    sum += m.raw()[i];
    abs_sum += std::abs(m.raw()[i]);
  }
  return {sum, abs_sum};
}

}  // namespace

TEST_CASE("sfm forward is deterministic and length-preserving") {
  Sfm sfm;
  sfm.init(small_cfg());
  Matrix audio = probe_input(9, 6, "sfm_det");
  LayerOutputs a = sfm.forward(audio);
  LayerOutputs b = sfm.forward(audio);
  REQUIRE(a.states.size() == 3);
  for (std::size_t i = 0; i < a.states.size(); ++i) {
    CHECK(a.states[i].rows() == 9);
    CHECK(a.states[i].cols() == 16);
    CHECK(max_abs_diff(a.states[i], b.states[i]) == 0.0);
  }
}

TEST_CASE("sfm rejects empty or mis-sized audio") {
  Sfm sfm;
  sfm.init(small_cfg());
  CHECK_THROWS_AS(sfm.forward(Matrix(0, 6)), ShapeError);
  CHECK_THROWS_AS(sfm.forward(Matrix(4, 5)), ShapeError);
}

TEST_CASE("all backbone parameters are frozen at init") {
  Sfm sfm;
  sfm.init(small_cfg());
  VisualEncoder venc;
  venc.init(small_cfg());
  std::vector<Parameter*> ps;
  sfm.params(ps);
  venc.params(ps);
  REQUIRE(!ps.empty());
  for (Parameter* p : ps) CHECK(p->frozen);
}

TEST_CASE("committed backbone matches its golden checksums") {
  KvMap golden = parse_kv_file(std::string(UASR_SOURCE_DIR) + "/assets/goldens.txt");
  EncoderConfig cfg;  // committed assets use the default configuration
  Sfm sfm;
  sfm.init(cfg);
  Matrix audio = probe_input(12, cfg.audio_dim, "golden_audio");
  LayerOutputs out = sfm.forward(audio);
  REQUIRE(out.states.size() == cfg.n_blocks);
  for (std::size_t i = 0; i < out.states.size(); ++i) {
    auto [sum, abs_sum] = sums_of(out.states[i]);
    std::string key = "sfm_block" + std::to_string(i);
    REQUIRE(golden.count(key + "_sum") == 1);
    CHECK(sum == Catch::Approx(std::stod(golden.at(key + "_sum"))).margin(1e-9));
    CHECK(abs_sum == Catch::Approx(std::stod(golden.at(key + "_abs"))).margin(1e-9));
  }
  VisualEncoder venc;
  venc.init(cfg);
  Matrix video = probe_input(6, cfg.video_dim, "golden_video");
  auto [vsum, vabs] = sums_of(venc.encode(video));
  CHECK(vsum == Catch::Approx(std::stod(golden.at("visual_sum"))).margin(1e-9));
  CHECK(vabs == Catch::Approx(std::stod(golden.at("visual_abs"))).margin(1e-9));
}

TEST_CASE("visual encoder shape and determinism") {
  VisualEncoder venc;
  venc.init(small_cfg());
  Matrix video = probe_input(7, 4, "venc");
  Matrix h1 = venc.encode(video);
  Matrix h2 = venc.encode(video);
  CHECK(h1.rows() == 7);
  CHECK(h1.cols() == 8);
  CHECK(max_abs_diff(h1, h2) == 0.0);
  CHECK_THROWS_AS(venc.encode(Matrix(0, 4)), ShapeError);
  CHECK_THROWS_AS(venc.encode(Matrix(3, 5)), ShapeError);
}

TEST_CASE("instance norm hand cases") {
  Matrix two(2, 1);
  two(0, 0) = 1.0;
  two(1, 0) = 3.0;
  Matrix n = instance_norm(two);
  CHECK(n(0, 0) == Catch::Approx(-1.0).margin(1e-3));
  CHECK(n(1, 0) == Catch::Approx(1.0).margin(1e-3));

  Matrix constant(5, 3, 2.5);
  Matrix cn = instance_norm(constant);
  CHECK(mean_square(cn) == 0.0);
}

TEST_CASE("instance norm standardizes each feature dimension") {
  Rng rng(21);
  Matrix h = random_normal(50, 6, rng);
  for (std::size_t d = 0; d < 6; ++d)
    for (std::size_t r = 0; r < 50; ++r) h(r, d) = h(r, d) * (1.0 + d) + 3.0 * d;
  Matrix n = instance_norm(h);
  for (std::size_t d = 0; d < 6; ++d) {
    double mean = 0.0, sq = 0.0;
    for (std::size_t r = 0; r < 50; ++r) {
      mean += n(r, d);
      sq += n(r, d) * n(r, d);
    }
    mean /= 50.0;
    sq /= 50.0;
    CHECK(std::abs(mean) < 1e-9);
    CHECK(std::abs(sq - mean * mean - 1.0) < 1e-2);
  }
  // Applying it twice changes nothing beyond the epsilon regularizer.
  CHECK(max_abs_diff(instance_norm(n), n) < 1e-3);
}

TEST_CASE("teacher target averages normalized top layers") {
  Sfm sfm;
  sfm.init(small_cfg());
  Matrix audio = probe_input(8, 6, "teacher");
  LayerOutputs out = sfm.forward(audio);

  TeacherTarget t1 = teacher_target(out, 1);
  CHECK(max_abs_diff(t1.target, instance_norm(out.states.back())) == 0.0);

  TeacherTarget t2 = teacher_target(out, 2);
  Matrix manual = scale(add(instance_norm(out.states[1]), instance_norm(out.states[2])), 0.5);
  CHECK(max_abs_diff(t2.target, manual) < 1e-12);

  CHECK_THROWS_AS(teacher_target(out, 0), ConfigError);
  CHECK_THROWS_AS(teacher_target(out, 4), ConfigError);
}

TEST_CASE("teacher target is scale invariant") {
  Sfm sfm;
  sfm.init(small_cfg());
  Matrix audio = probe_input(8, 6, "teacher_scale");
  LayerOutputs out = sfm.forward(audio);
  LayerOutputs scaled;
  for (const Matrix& s : out.states) scaled.states.push_back(scale(s, 3.0));
  Matrix a = teacher_target(out, 2).target;
  Matrix b = teacher_target(scaled, 2).target;
  // The normalizer's epsilon keeps this from being exact; without any
  // normalization the difference would be on the order of the values.
  CHECK(max_abs_diff(a, b) < 1e-3);
}

TEST_CASE("encoder config validation") {
  EncoderConfig c = small_cfg();
  c.n_blocks = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_cfg();
  c.d_model = 15;  // not divisible by heads
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_cfg();
  c.k = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_cfg();
  c.k = c.n_blocks + 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}
