// Command-line front end: synth, pretrain, finetune, build-noisy, eval,
// decode. Exit codes: 0 success, 2 configuration error, 3 data error.
#include <CLI11.hpp>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "uasr/checkpoint.hpp"
#include "uasr/config.hpp"
#include "uasr/distill.hpp"
#include "uasr/evalcli.hpp"
#include "uasr/recognizer.hpp"
#include "uasr/synthcorpus.hpp"

namespace fs = std::filesystem;
using namespace uasr;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string checkpoint_path;
  std::string out_dir;
  std::string manifest_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

RunConfig load_config(const CommonArgs& args) {
  RunConfig cfg = args.config_path.empty() ? RunConfig::defaults()
                                           : RunConfig::load(args.config_path);
  if (args.seed_set) cfg.override_seed(args.seed);
  return cfg;
}

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

// Builds the stage-2 model and loads the frozen stages plus, optionally, a
// training checkpoint overlay.
void build_recognizer(RecognizerModel& model, const RunConfig& cfg,
                      const std::string& overlay_path,
                      const std::vector<std::string>& overlay_stages) {
  model.init(cfg.encoders, cfg.injection, cfg.lm, cfg.recognizer, cfg.corpus.char_vocab,
             cfg.corpus.frame_ratio);
  std::vector<Parameter*> params;
  model.all_params(params);
  Checkpoint frozen = load_checkpoint(cfg.frozen_checkpoint);
  apply_checkpoint(frozen, params, {"sfm", "visual_encoder", "lm_base"});
  if (!overlay_path.empty()) {
    Checkpoint overlay = load_checkpoint(overlay_path);
    apply_checkpoint(overlay, params, overlay_stages);
  }
}

int cmd_synth(const CommonArgs& args) {
  RunConfig cfg = load_config(args);
  require(!args.out_dir.empty(), "synth: --out DIR is required");
  std::vector<Utterance> utts = generate_corpus(cfg.corpus);
  ManifestMeta meta;
  meta.char_vocab = cfg.corpus.char_vocab;
  meta.audio_dim = cfg.corpus.audio_dim;
  meta.video_dim = cfg.corpus.video_dim;
  meta.frame_ratio = cfg.corpus.frame_ratio;
  meta.seed = cfg.corpus.seed;
  save_corpus(args.out_dir, utts, meta);
  std::cout << "wrote " << utts.size() << " utterances to " << args.out_dir << "\n";
  return 0;
}

int cmd_pretrain(const CommonArgs& args) {
  RunConfig cfg = load_config(args);
  require(!args.out_dir.empty(), "pretrain: --out DIR is required");
  std::string frozen_path =
      args.checkpoint_path.empty() ? cfg.frozen_checkpoint : args.checkpoint_path;
  std::string manifest =
      args.manifest_path.empty() ? cfg.train_manifest : args.manifest_path;
  std::vector<Utterance> utts = load_manifest(manifest);
  DistillModel model;
  model.init(cfg.encoders, cfg.injection, cfg.corpus.frame_ratio);
  std::vector<Parameter*> params;
  model.all_params(params);
  Checkpoint frozen = load_checkpoint(frozen_path);
  apply_checkpoint(frozen, params, {"sfm", "visual_encoder"});
  PretrainRunResult run = run_pretrain(model, utts, cfg.distill, cfg.corruption, args.out_dir);
  std::cout << "pretrain: " << run.losses.size() << " updates, first loss "
            << run.losses.front() << ", last loss " << run.losses.back() << "\n"
            << "checkpoint: " << run.checkpoint_path << "\n";
  return 0;
}

int cmd_finetune(const CommonArgs& args, bool from_scratch) {
  RunConfig cfg = load_config(args);
  require(!args.out_dir.empty(), "finetune: --out DIR is required");
  require(from_scratch || !args.checkpoint_path.empty(),
          "finetune: --checkpoint STAGE1 is required (or pass --from-scratch)");
  std::string manifest =
      args.manifest_path.empty() ? cfg.train_manifest : args.manifest_path;
  std::vector<Utterance> utts = load_manifest(manifest);
  RecognizerModel model;
  build_recognizer(model, cfg, from_scratch ? "" : args.checkpoint_path, {"injection"});
  FinetuneRunResult run = run_finetune(model, utts, cfg.recognizer, cfg.corruption, args.out_dir);
  std::cout << "finetune: " << run.totals.size() << " updates, first loss "
            << run.totals.front() << ", last loss " << run.totals.back() << "\n"
            << "checkpoint: " << run.checkpoint_path << "\n";
  return 0;
}

int cmd_build_noisy(const CommonArgs& args) {
  RunConfig cfg = load_config(args);
  require(!args.out_dir.empty(), "build-noisy: --out DIR is required");
  std::string manifest =
      args.manifest_path.empty() ? cfg.test_manifest : args.manifest_path;
  std::vector<EvalSet> sets = build_noisy_testsets(manifest, cfg.eval_noise_kinds(),
                                                   cfg.corruption.snr_grid_db, cfg.seed,
                                                   args.out_dir);
  std::cout << "wrote " << sets.size() << " noisy test sets to " << args.out_dir << "\n";
  return 0;
}

// Noisy sets are recognized by the provenance fields in their manifest
// sidecars; directory order is fixed by sorting.
std::vector<EvalSet> discover_noisy_sets(const std::string& dir) {
  std::vector<EvalSet> sets;
  if (dir.empty()) return sets;
  if (!fs::is_directory(dir)) throw DataError("eval: noisy dir not found: " + dir);
  std::vector<std::string> subdirs;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_directory()) subdirs.push_back(entry.path().string());
  std::sort(subdirs.begin(), subdirs.end());
  for (const std::string& sub : subdirs) {
    std::string manifest = (fs::path(sub) / "manifest.tsv").string();
    if (!fs::exists(manifest) || !fs::exists(manifest + ".meta")) continue;
    ManifestMeta meta = read_manifest_meta(manifest);
    if (meta.noise_kind.empty()) continue;
    sets.push_back({meta.noise_kind, meta.snr_db, manifest});
  }
  return sets;
}

int cmd_eval(const CommonArgs& args, const std::string& noisy_dir) {
  RunConfig cfg = load_config(args);
  require(!args.out_dir.empty(), "eval: --out DIR is required");
  require(!args.checkpoint_path.empty(), "eval: --checkpoint STAGE2 is required");
  std::string manifest =
      args.manifest_path.empty() ? cfg.test_manifest : args.manifest_path;
  RecognizerModel model;
  build_recognizer(model, cfg, args.checkpoint_path,
                   {"injection", "adaptor", "lora", "ctc_head"});
  std::vector<EvalSet> sets;
  sets.push_back({"clean", "inf", manifest});
  for (EvalSet& s : discover_noisy_sets(noisy_dir)) sets.push_back(std::move(s));
  EvalOptions opts;
  opts.modes = cfg.eval_modes();
  opts.max_utts = cfg.eval.max_utts;
  EvalReport report = run_eval(make_model_decoder(model, cfg.eval.max_decode_len), sets, opts);
  report.config_fingerprint = config_fingerprint(cfg.raw);
  fs::create_directories(args.out_dir);
  write_eval_report_csv(report, (fs::path(args.out_dir) / "eval_report.csv").string());
  write_decode_details_csv(report, (fs::path(args.out_dir) / "decode_details.csv").string());
  std::cout << format_eval_table(report);
  return 0;
}

int cmd_decode(const CommonArgs& args, const std::string& utt_id, const std::string& mode_name) {
  RunConfig cfg = load_config(args);
  require(!args.checkpoint_path.empty(), "decode: --checkpoint STAGE2 is required");
  require(!args.manifest_path.empty(), "decode: --manifest PATH is required");
  ModalityMode mode = parse_eval_mode(mode_name);
  RecognizerModel model;
  build_recognizer(model, cfg, args.checkpoint_path,
                   {"injection", "adaptor", "lora", "ctc_head"});
  std::vector<Utterance> utts = load_manifest(args.manifest_path);
  const Utterance* chosen = nullptr;
  for (const Utterance& u : utts)
    if (utt_id.empty() || u.id == utt_id) {
      chosen = &u;
      break;
    }
  if (!chosen) throw DataError("decode: utterance not found: " + utt_id);
  DecodeOutput out = greedy_decode(model, mode, chosen->audio, chosen->video,
                                   cfg.eval.max_decode_len);
  std::cout << out.text << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"audio-visual speech recognition toolkit"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string noisy_dir, utt_id, mode_name = "avsr";
  bool from_scratch = false;

  auto add_common = [&](CLI::App* sub, bool with_out) {
    sub->add_option("--config", args.config_path, "run configuration file");
    sub->add_option("--seed", args.seed, "override the run seed")
        ->each([&](const std::string&) { args.seed_set = true; });
    sub->add_option("--checkpoint", args.checkpoint_path, "checkpoint path");
    if (with_out) sub->add_option("--out", args.out_dir, "output directory");
    sub->add_option("--manifest", args.manifest_path, "manifest path override");
  };

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic corpus");
  add_common(synth, true);
  CLI::App* pretrain = app.add_subcommand("pretrain", "stage-1 injection pretraining");
  add_common(pretrain, true);
  CLI::App* finetune = app.add_subcommand("finetune", "stage-2 recognizer finetuning");
  add_common(finetune, true);
  finetune->add_flag("--from-scratch", from_scratch, "skip the stage-1 checkpoint overlay");
  CLI::App* build_noisy = app.add_subcommand("build-noisy", "derive noisy test sets");
  add_common(build_noisy, true);
  CLI::App* eval = app.add_subcommand("eval", "score a checkpoint");
  add_common(eval, true);
  eval->add_option("--noisy-dir", noisy_dir, "directory holding build-noisy output");
  CLI::App* decode = app.add_subcommand("decode", "decode one utterance to stdout");
  add_common(decode, false);
  decode->add_option("--id", utt_id, "utterance id (default: first in manifest)");
  decode->add_option("--mode", mode_name, "vsr, asr, or avsr");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (synth->parsed()) return cmd_synth(args);
    if (pretrain->parsed()) return cmd_pretrain(args);
    if (finetune->parsed()) return cmd_finetune(args, from_scratch);
    if (build_noisy->parsed()) return cmd_build_noisy(args);
    if (eval->parsed()) return cmd_eval(args, noisy_dir);
    if (decode->parsed()) return cmd_decode(args, utt_id, mode_name);
    throw ConfigError("no subcommand given");
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
