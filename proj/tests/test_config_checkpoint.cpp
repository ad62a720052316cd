// The key=value parser, run-config binding with defaults and overrides, the
// checkpoint container round trip, and stage hashing.
#include <catch2/catch_amalgamated.hpp>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "uasr/checkpoint.hpp"
#include "uasr/config.hpp"

using namespace uasr;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

Parameter make_param(const std::string& name, const std::string& stage, std::size_t r,
                     std::size_t c, double fill, bool frozen = false) {
  Parameter p;
  p.name = name;
  p.stage = stage;
  p.frozen = frozen;
  p.value = Matrix(r, c);
  for (std::size_t i = 0; i < p.value.size(); ++i)
    p.value.raw()[i] = fill + 0.01 * static_cast<double>(i);
  return p;
}

}  // namespace

TEST_CASE("kv parser handles comments, quoting, and escapes") {
  KvMap kv = parse_kv_text("# leading comment\n"
                           "\n"
                           "plain = 7\n"
                           "  spaced.key   =   hello world  # trailing comment\n"
                           "quoted = \" padded \"\n"
                           "escaped = \"a \\\"b\\\" \\\\ c\"\n"
                           "empty =\n",
                           "test");
  CHECK(kv.size() == 5);
  CHECK(kv.at("plain") == "7");
  CHECK(kv.at("spaced.key") == "hello world");
  CHECK(kv.at("quoted") == " padded ");
  CHECK(kv.at("escaped") == "a \"b\" \\ c");
  CHECK(kv.at("empty").empty());
}

TEST_CASE("kv parser reports origin and line for malformed input") {
  auto message_of = [](const std::string& text) {
    try {
      parse_kv_text(text, "cfg");
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  CHECK(message_of("ok = 1\nbroken line\n").find("cfg:2") != std::string::npos);
  CHECK(message_of(" = 3\n").find("empty key") != std::string::npos);
  CHECK(message_of("q = \"open\n").find("unterminated") != std::string::npos);
  CHECK(message_of("q = \"x\" junk\n").find("trailing") != std::string::npos);
  CHECK(message_of("a = 1\na = 2\n").find("duplicate key 'a'") != std::string::npos);
  CHECK_THROWS_AS(parse_kv_file("/nonexistent/uasr.cfg"), ConfigError);
}

TEST_CASE("kv value formatting round-trips through the parser") {
  for (const std::string& v :
       {std::string(""), std::string(" padded "), std::string("a#b"), std::string("say \"hi\""),
        std::string("back\\slash"), std::string("plain"), std::string("\"leading quote")}) {
    KvMap kv = parse_kv_text("k = " + format_kv_value(v) + "\n", "rt");
    INFO("value '" << v << "' formatted as '" << format_kv_value(v) << "'");
    CHECK(kv.at("k") == v);
  }
}

TEST_CASE("default run config pins the recipe constants") {
  RunConfig c = RunConfig::defaults();
  CHECK(c.seed == 1234);

  CHECK(c.corpus.n_utterances == 32);
  CHECK(c.corpus.min_len == 24);
  CHECK(c.corpus.max_len == 48);
  CHECK(c.corpus.char_vocab == "abcdefghijklmnopqrstuvwxyz ");
  CHECK(c.corpus.frame_ratio == 2);

  CHECK(c.corruption.audio_mask_ratio == 0.80);
  CHECK(c.corruption.video_mask_ratio == 0.30);
  CHECK(c.corruption.audio_span_len == 10);
  CHECK(c.corruption.video_span_len == 5);
  CHECK(c.corruption.p_v == 0.5);
  CHECK(c.corruption.p_prime_v == 0.5);
  CHECK(c.corruption.p_prime_a == 0.25);
  CHECK(c.corruption.snr_grid_db == std::vector<double>{-10.0, -5.0, 0.0, 5.0, 10.0});

  CHECK(c.encoders.k == 2);
  CHECK(c.distill.total_updates == 500);
  CHECK(c.distill.peak_lr == 5e-4);
  CHECK(c.distill.warmup_frac == 0.05);
  CHECK(c.distill.hold_frac == 0.85);
  CHECK(c.distill.decay_frac == 0.10);
  CHECK(c.distill.decay_floor == 0.01);
  CHECK(c.distill.k == 2);

  CHECK(c.recognizer.total_updates == 2000);
  CHECK(c.recognizer.peak_lr == 2e-4);
  CHECK(c.recognizer.warmup_frac == Catch::Approx(1.0 / 3.0));
  CHECK(c.recognizer.hold_frac == 0.0);
  CHECK(c.recognizer.decay_frac == Catch::Approx(2.0 / 3.0));
  CHECK(c.recognizer.lambda == 0.25);
  CHECK(c.recognizer.lora_rank == 16);
  CHECK(c.recognizer.lora_alpha == 16.0);

  CHECK(c.lm.n_blocks == 4);
  CHECK(c.lm.d_lm == 128);

  CHECK(c.eval.modes == "vsr,asr,avsr");
  CHECK(c.frozen_checkpoint == "assets/frozen_default.ckpt");
  CHECK(c.test_manifest == c.train_manifest);
}

TEST_CASE("config overrides bind onto the right fields") {
  KvMap kv = {{"seed", "9"},
              {"corpus.n_utterances", "5"},
              {"corpus.audio_dim", "10"},
              {"corpus.frame_ratio", "4"},
              {"recognizer.lambda", "0.5"},
              {"recognizer.lora_rank", "4"},
              {"corruption.snr_grid_db", "0, 5"},
              {"paths.train_manifest", "x/manifest.tsv"}};
  RunConfig c = RunConfig::from_kv(kv, "test");
  CHECK(c.seed == 9);
  CHECK(c.corpus.n_utterances == 5);
  CHECK(c.corpus.seed == 9);
  CHECK(c.distill.seed == 9);
  CHECK(c.recognizer.seed == 9);
  CHECK(c.encoders.audio_dim == 10);
  CHECK(c.injection.video_fps == Catch::Approx(50.0 / 4.0));
  CHECK(c.recognizer.lambda == 0.5);
  CHECK(c.recognizer.lora_alpha == 4.0);
  CHECK(c.corruption.snr_grid_db == std::vector<double>{0.0, 5.0});
  CHECK(c.train_manifest == "x/manifest.tsv");
  CHECK(c.test_manifest == "x/manifest.tsv");

  KvMap split = {{"paths.train_manifest", "a.tsv"}, {"paths.test_manifest", "b.tsv"}};
  RunConfig c2 = RunConfig::from_kv(split, "test");
  CHECK(c2.train_manifest == "a.tsv");
  CHECK(c2.test_manifest == "b.tsv");
}

TEST_CASE("config binding rejects unknown keys and bad values") {
  CHECK_THROWS_MATCHES(RunConfig::from_kv({{"trainer.lr", "1"}}, "t"), ConfigError,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("unknown key 'trainer.lr'")));
  CHECK_THROWS_MATCHES(RunConfig::from_kv({{"recognizer.lambda", "fast"}}, "t"), ConfigError,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("not a number")));
  CHECK_THROWS_MATCHES(RunConfig::from_kv({{"corpus.n_utterances", "-3"}}, "t"), ConfigError,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("not an unsigned integer")));
  CHECK_THROWS_AS(RunConfig::from_kv({{"corruption.snr_grid_db", ","}}, "t"), ConfigError);
  // Values that parse but violate module constraints.
  CHECK_THROWS_AS(RunConfig::from_kv({{"corpus.min_len", "60"}}, "t"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_kv({{"corruption.p_v", "1.5"}}, "t"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_kv({{"recognizer.peak_lr", "0"}}, "t"), ConfigError);
}

TEST_CASE("run config loads from a file and the seed override reseeds stages") {
  fs::path path = fs::temp_directory_path() / "uasr_cfg_test.cfg";
  {
    std::ofstream os(path, std::ios::trunc);
    os << "# test config\nseed = 77\ncorpus.n_utterances = 4\n";
  }
  RunConfig c = RunConfig::load(path.string());
  CHECK(c.seed == 77);
  CHECK(c.corpus.n_utterances == 4);
  CHECK(c.raw.at("seed") == "77");

  std::string fp_before = config_fingerprint(c.raw);
  c.override_seed(31);
  CHECK(c.seed == 31);
  CHECK(c.corpus.seed == 31);
  CHECK(c.distill.seed == 31);
  CHECK(c.recognizer.seed == 31);
  CHECK(c.raw.at("seed") == "31");
  CHECK(config_fingerprint(c.raw) != fp_before);
}

TEST_CASE("eval mode and noise lists parse with whitespace") {
  RunConfig c = RunConfig::defaults();
  c.eval.modes = " asr , vsr ";
  std::vector<ModalityMode> modes = c.eval_modes();
  REQUIRE(modes.size() == 2);
  CHECK(modes[0] == ModalityMode::AudioOnly);
  CHECK(modes[1] == ModalityMode::VideoOnly);
  c.eval.modes = " , ";
  CHECK_THROWS_AS(c.eval_modes(), ConfigError);
  c.eval.noise_kinds = "babble";
  REQUIRE(c.eval_noise_kinds().size() == 1);
  CHECK(c.eval_noise_kinds()[0] == NoiseKind::babble);
  c.eval.noise_kinds = "pink";
  CHECK_THROWS_AS(c.eval_noise_kinds(), ConfigError);
}

TEST_CASE("checkpoint round trip preserves values, stages, and flags") {
  Parameter a = make_param("alpha.w", "stage_a", 3, 2, 0.5, true);
  Parameter b = make_param("beta.w", "stage_b", 1, 4, -1.0);
  Parameter g = make_param("gamma.g", "stage_b", 1, 1, 2.0);
  std::vector<Parameter*> params = {&a, &b, &g};

  fs::path path = fs::temp_directory_path() / "uasr_ckpt_test.ckpt";
  save_checkpoint(path.string(), params);

  Checkpoint ck = load_checkpoint(path.string());
  REQUIRE(ck.size() == 3);
  CHECK(ck.at("alpha.w").stage == "stage_a");
  CHECK(ck.at("alpha.w").frozen);
  CHECK_FALSE(ck.at("beta.w").frozen);
  CHECK(max_abs_diff(ck.at("alpha.w").value, a.value) == 0.0);
  CHECK(max_abs_diff(ck.at("gamma.g").value, g.value) == 0.0);

  // Byte-identical re-save.
  fs::path path2 = fs::temp_directory_path() / "uasr_ckpt_test2.ckpt";
  save_checkpoint(path2.string(), params);
  CHECK(slurp(path) == slurp(path2));

  // Stage-filtered application touches only the requested stage.
  Matrix a_orig = a.value, b_orig = b.value;
  for (auto& x : a.value.raw()) x += 1.0;
  for (auto& x : b.value.raw()) x += 1.0;
  std::size_t applied = apply_checkpoint(ck, params, {"stage_a"});
  CHECK(applied == 1);
  CHECK(max_abs_diff(a.value, a_orig) == 0.0);
  CHECK(max_abs_diff(b.value, add(b_orig, Matrix(1, 4, 1.0))) == 0.0);

  // Unfiltered application restores everything.
  CHECK(apply_checkpoint(ck, params) == 3);
  CHECK(max_abs_diff(b.value, b_orig) == 0.0);
}

TEST_CASE("checkpoint application fails loudly on mismatches") {
  Parameter a = make_param("alpha.w", "stage_a", 3, 2, 0.5);
  std::vector<Parameter*> params = {&a};
  fs::path path = fs::temp_directory_path() / "uasr_ckpt_err.ckpt";
  save_checkpoint(path.string(), params);
  Checkpoint ck = load_checkpoint(path.string());

  Parameter missing = make_param("other.w", "stage_a", 3, 2, 0.0);
  std::vector<Parameter*> wrong_name = {&missing};
  CHECK_THROWS_MATCHES(apply_checkpoint(ck, wrong_name), DataError,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("missing parameter: other.w")));

  Parameter reshaped = make_param("alpha.w", "stage_a", 2, 2, 0.0);
  std::vector<Parameter*> wrong_shape = {&reshaped};
  CHECK_THROWS_MATCHES(apply_checkpoint(ck, wrong_shape), DataError,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("shape mismatch")));

  fs::path bad = fs::temp_directory_path() / "uasr_ckpt_bad.ckpt";
  {
    std::ofstream os(bad, std::ios::binary | std::ios::trunc);
    os << "NOTACKPT and then some";
  }
  CHECK_THROWS_MATCHES(load_checkpoint(bad.string()), DataError,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("bad checkpoint magic")));

  fs::path truncated = fs::temp_directory_path() / "uasr_ckpt_trunc.ckpt";
  {
    std::string bytes = slurp(path);
    std::ofstream os(truncated, std::ios::binary | std::ios::trunc);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 9));
  }
  CHECK_THROWS_AS(load_checkpoint(truncated.string()), DataError);

  CHECK_THROWS_AS(load_checkpoint("/nonexistent/uasr.ckpt"), DataError);
}

TEST_CASE("stage hash is order-independent and content-sensitive") {
  Parameter a = make_param("alpha.w", "s", 2, 2, 0.5);
  Parameter b = make_param("beta.w", "s", 2, 2, 1.5);
  Parameter other = make_param("other.w", "t", 2, 2, 9.0);

  std::vector<Parameter*> fwd = {&a, &b, &other};
  std::vector<Parameter*> rev = {&other, &b, &a};
  std::uint64_t h = stage_hash(fwd, "s");
  CHECK(stage_hash(rev, "s") == h);

  // Parameters of other stages do not contribute.
  std::vector<Parameter*> no_other = {&a, &b};
  CHECK(stage_hash(no_other, "s") == h);
  CHECK(stage_hash(fwd, "t") != h);

  double saved = b.value(1, 1);
  b.value(1, 1) += 1e-12;
  CHECK(stage_hash(fwd, "s") != h);
  b.value(1, 1) = saved;
  CHECK(stage_hash(fwd, "s") == h);

  std::string name_saved = a.name;
  a.name = "alpha2.w";
  CHECK(stage_hash(fwd, "s") != h);
  a.name = name_saved;

  // Shape participates even when the flat value bytes match.
  Parameter tall = make_param("alpha.w", "s", 4, 1, 0.5);
  Parameter wide = make_param("alpha.w", "s", 1, 4, 0.5);
  std::vector<Parameter*> vt = {&tall}, vw = {&wide};
  CHECK(stage_hash(vt, "s") != stage_hash(vw, "s"));
}
