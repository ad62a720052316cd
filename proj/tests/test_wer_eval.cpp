// WER scoring against an independent edit-distance oracle, corpus-level
// aggregation, noisy test-set construction, and the eval report plumbing.
#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "oracle_helpers.hpp"
#include "uasr/evalcli.hpp"

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

void require_same_tree(const fs::path& a, const fs::path& b) {
  std::size_t compared = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    fs::path rel = fs::relative(e.path(), a);
    INFO(rel.string());
    REQUIRE(slurp(e.path()) == slurp(b / rel));
    ++compared;
  }
  REQUIRE(compared > 0);
}

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Two hand-built utterances whose reference lengths differ by 9x, to expose
// any mean-of-rates aggregation.
fs::path write_two_utt_corpus() {
  ManifestMeta meta;
  meta.char_vocab = "abcdefghiq ";
  meta.audio_dim = 3;
  meta.video_dim = 2;
  meta.frame_ratio = 2;
  meta.seed = 5;
  Rng rng(derive_seed(5, "two_utt"));
  Utterance u0, u1;
  u0.id = "utt_a";
  u0.transcript = "q";
  u0.audio = random_normal(4, 3, rng);
  u0.video = random_normal(2, 2, rng);
  u1.id = "utt_b";
  u1.transcript = "a b c d e f g h i";
  u1.audio = random_normal(4, 3, rng);
  u1.video = random_normal(2, 2, rng);
  fs::path dir = fresh_dir("uasr_two_utt_corpus");
  save_corpus(dir.string(), {u0, u1}, meta);
  return dir / "manifest.tsv";
}

}  // namespace

TEST_CASE("wer hand cases") {
  SECTION("identical sequences") {
    WerCounts c = wer("ga ma na", "ga ma na");
    CHECK(c.edits() == 0);
    CHECK(c.wer == 0.0);
  }
  SECTION("single substitution") {
    WerCounts c = wer("a b c", "a x c");
    CHECK(c.substitutions == 1);
    CHECK(c.deletions == 0);
    CHECK(c.insertions == 0);
    CHECK(c.wer == Catch::Approx(1.0 / 3.0).margin(1e-15));
  }
  SECTION("empty hypothesis deletes everything") {
    WerCounts c = wer("a b", "");
    CHECK(c.deletions == 2);
    CHECK(c.edits() == 2);
    CHECK(c.wer == 1.0);
  }
  SECTION("empty reference guards the denominator") {
    WerCounts c = wer("", "a");
    CHECK(c.insertions == 1);
    CHECK(c.wer == 1.0);
  }
  SECTION("single deletion") {
    WerCounts c = wer("a b c d", "a c d");
    CHECK(c.deletions == 1);
    CHECK(c.wer == 0.25);
  }
  SECTION("insertion can exceed a full reference") {
    WerCounts c = wer("a", "a b b");
    CHECK(c.insertions == 2);
    CHECK(c.wer == 2.0);
  }
  SECTION("length mismatch mixes substitution and deletion") {
    WerCounts c = wer("a b", "x");
    CHECK(c.edits() == 2);
    CHECK(c.substitutions == 1);
    CHECK(c.deletions == 1);
    CHECK(c.insertions == 0);
  }
}

TEST_CASE("wer equals a brute-force edit distance on random pairs") {
  Rng rng(derive_seed(77, "wer_sweep"));
  for (int i = 0; i < 200; ++i) {
    std::vector<std::string> ref = oracle::random_words(rng, 5);
    std::vector<std::string> hyp = oracle::random_words(rng, 5);
    WerCounts c = wer(ref, hyp);
    std::size_t brute = oracle::brute_edit_distance(ref, hyp);
    INFO("case " << i);
    REQUIRE(c.edits() == brute);

    // Swapping the roles swaps deletions and insertions.
    WerCounts back = wer(hyp, ref);
    CHECK(back.edits() == brute);
    CHECK(back.deletions == c.insertions);
    CHECK(back.insertions == c.deletions);
    CHECK(back.substitutions == c.substitutions);
  }
}

TEST_CASE("split words collapses repeated and trailing spaces") {
  CHECK(split_words("").empty());
  CHECK(split_words("   ").empty());
  CHECK(split_words("a") == std::vector<std::string>{"a"});
  CHECK(split_words(" a  bb c ") == std::vector<std::string>{"a", "bb", "c"});
}

TEST_CASE("corpus wer pools edits over reference words, not per-utterance rates") {
  fs::path manifest = write_two_utt_corpus();
  DecodeFn decode = [](const Utterance& u, ModalityMode) {
    return u.id == "utt_a" ? std::string("z") : u.transcript;
  };
  EvalOptions opts;
  opts.modes = {ModalityMode::AudioOnly};
  EvalReport rep = run_eval(decode, {{"clean", "inf", manifest.string()}}, opts);
  REQUIRE(rep.rows.size() == 1);
  const EvalConditionRow& row = rep.rows[0];
  CHECK(row.n_utts == 2);
  CHECK(row.total_edits == 1);
  CHECK(row.total_ref_words == 10);
  // Mean of per-utterance rates would be 0.5.
  CHECK(row.wer == Catch::Approx(0.1).margin(1e-15));
}

TEST_CASE("echo decoder scores zero everywhere") {
  fs::path manifest = write_two_utt_corpus();
  DecodeFn echo = [](const Utterance& u, ModalityMode) { return u.transcript; };
  EvalReport rep = run_eval(echo, {{"clean", "inf", manifest.string()}}, EvalOptions{});
  REQUIRE(rep.rows.size() == 3);
  for (const auto& row : rep.rows) {
    CHECK(row.wer == 0.0);
    CHECK(row.n_utts == 2);
  }
  for (const auto& d : rep.details) {
    CHECK(d.counts.edits() == 0);
    CHECK(d.hypothesis == d.reference);
  }
}

TEST_CASE("run_eval validates inputs and honors max_utts") {
  fs::path manifest = write_two_utt_corpus();
  DecodeFn echo = [](const Utterance& u, ModalityMode) { return u.transcript; };
  CHECK_THROWS_AS(run_eval(echo, {}, EvalOptions{}), DataError);
  EvalOptions no_modes;
  no_modes.modes.clear();
  CHECK_THROWS_AS(run_eval(echo, {{"clean", "inf", manifest.string()}}, no_modes), ConfigError);
  EvalOptions capped;
  capped.modes = {ModalityMode::AudioOnly};
  capped.max_utts = 1;
  EvalReport rep = run_eval(echo, {{"clean", "inf", manifest.string()}}, capped);
  CHECK(rep.rows[0].n_utts == 1);
}

TEST_CASE("noisy test sets cover the kind x snr grid and hit the nominal snr") {
  CorpusSpec spec;
  spec.n_utterances = 4;
  spec.min_len = 4;
  spec.max_len = 8;
  spec.audio_dim = 5;
  spec.video_dim = 4;
  spec.seed = 42;
  std::vector<Utterance> utts = generate_corpus(spec);
  ManifestMeta meta;
  meta.char_vocab = spec.char_vocab;
  meta.audio_dim = spec.audio_dim;
  meta.video_dim = spec.video_dim;
  meta.frame_ratio = spec.frame_ratio;
  meta.seed = spec.seed;
  fs::path clean_dir = fresh_dir("uasr_eval_clean");
  save_corpus(clean_dir.string(), utts, meta);
  std::string clean_manifest = (clean_dir / "manifest.tsv").string();

  std::vector<NoiseKind> kinds = {NoiseKind::white, NoiseKind::tonal, NoiseKind::babble};
  std::vector<double> grid = {-10.0, -5.0, 0.0, 5.0, 10.0};
  fs::path out_a = fresh_dir("uasr_eval_noisy_a");
  std::vector<EvalSet> sets = build_noisy_testsets(clean_manifest, kinds, grid, 7, out_a.string());
  REQUIRE(sets.size() == 15);

  std::map<std::string, const Utterance*> clean_by_id;
  for (const Utterance& u : utts) clean_by_id[u.id] = &u;
  for (const EvalSet& set : sets) {
    CHECK(fs::path(set.manifest_path).parent_path().filename().string() ==
          "noisy_" + set.noise + "_" + set.snr_db + "db");
    double nominal = std::stod(set.snr_db);
    std::vector<Utterance> noisy = load_manifest(set.manifest_path);
    REQUIRE(noisy.size() == utts.size());
    ManifestMeta nm = read_manifest_meta(set.manifest_path);
    CHECK(nm.noise_kind == set.noise);
    CHECK(nm.snr_db == set.snr_db);
    for (const Utterance& nu : noisy) {
      const Utterance& cu = *clean_by_id.at(nu.id);
      Matrix residual = sub(nu.audio, cu.audio);
      double measured = 10.0 * std::log10(mean_square(cu.audio) / mean_square(residual));
      INFO(set.noise << " " << set.snr_db << " " << nu.id);
      CHECK(std::abs(measured - nominal) < 0.1);
      CHECK(max_abs_diff(nu.video, cu.video) == 0.0);
    }
  }

  fs::path out_b = fresh_dir("uasr_eval_noisy_b");
  build_noisy_testsets(clean_manifest, kinds, grid, 7, out_b.string());
  require_same_tree(out_a, out_b);
}

TEST_CASE("snr labels and eval mode names round-trip") {
  CHECK(format_snr_label(-10.0) == "-10");
  CHECK(format_snr_label(0.0) == "0");
  CHECK(format_snr_label(2.5) == "2.5");
  CHECK(format_snr_label(kSnrInf) == "inf");
  for (ModalityMode m :
       {ModalityMode::VideoOnly, ModalityMode::AudioOnly, ModalityMode::AudioVisual})
    CHECK(parse_eval_mode(mode_short_name(m)) == m);
  CHECK(mode_short_name(ModalityMode::VideoOnly) == "vsr");
  CHECK_THROWS_AS(parse_eval_mode("speech"), ConfigError);
}

TEST_CASE("config fingerprint is stable and content-sensitive") {
  KvMap a = {{"trainer.seed", "1"}, {"paths.out", "x"}};
  KvMap b = {{"trainer.seed", "1"}, {"paths.out", "x"}};
  KvMap c = {{"trainer.seed", "2"}, {"paths.out", "x"}};
  CHECK(config_fingerprint(a) == config_fingerprint(b));
  CHECK(config_fingerprint(a) != config_fingerprint(c));
  CHECK(config_fingerprint(a).size() == 16);
}

TEST_CASE("eval report csv carries fingerprint, header, and fixed precision") {
  EvalReport rep;
  rep.config_fingerprint = "00000000deadbeef";
  EvalConditionRow row;
  row.mode = "asr";
  row.noise = "clean";
  row.snr_db = "inf";
  row.wer = 1.0 / 3.0;
  row.n_utts = 2;
  row.total_edits = 1;
  row.total_ref_words = 3;
  rep.rows.push_back(row);
  fs::path path = fs::temp_directory_path() / "uasr_eval_report_test.csv";
  write_eval_report_csv(rep, path.string());
  std::string text = slurp(path);
  CHECK(text.find("# config_fingerprint=00000000deadbeef\n") == 0);
  CHECK(text.find("mode,noise,snr_db,wer,n_utts\n") != std::string::npos);
  CHECK(text.find("asr,clean,inf,0.333333,2\n") != std::string::npos);

  std::string table = format_eval_table(rep);
  CHECK(table.find("asr") != std::string::npos);
  CHECK(table.find("0.3333") != std::string::npos);
}
