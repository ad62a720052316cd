// Run configuration: binds the flat key=value file onto the per-module
// config structs, with defaults for every key, typed parse errors, and
// rejection of unknown keys.
#pragma once

#include <cstdint>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "uasr/corruption.hpp"
#include "uasr/distill.hpp"
#include "uasr/encoders.hpp"
#include "uasr/errors.hpp"
#include "uasr/evalcli.hpp"
#include "uasr/injection.hpp"
#include "uasr/kv.hpp"
#include "uasr/recognizer.hpp"
#include "uasr/synthcorpus.hpp"

namespace uasr {

namespace detail {

class ConfigBinder {
 public:
  ConfigBinder(KvMap kv, std::string origin) : kv_(std::move(kv)), origin_(std::move(origin)) {}

  bool has(const std::string& key) {
    used_.insert(key);
    return kv_.count(key) > 0;
  }

  std::string str(const std::string& key, const std::string& def) {
    used_.insert(key);
    auto it = kv_.find(key);
    return it == kv_.end() ? def : it->second;
  }

  double num(const std::string& key, double def) {
    used_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    if (it->second == "inf") return std::numeric_limits<double>::infinity();
    try {
      std::size_t pos = 0;
      double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("");
      return v;
    } catch (const std::exception&) {
      throw ConfigError(origin_ + ": key '" + key + "': not a number: " + it->second);
    }
  }

  std::uint64_t uint(const std::string& key, std::uint64_t def) {
    used_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    // stoull quietly wraps negative inputs, so digits are checked up front.
    const std::string& s = it->second;
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
      throw ConfigError(origin_ + ": key '" + key + "': not an unsigned integer: " + s);
    try {
      std::size_t pos = 0;
      unsigned long long v = std::stoull(s, &pos);
      if (pos != s.size()) throw std::invalid_argument("");
      return v;
    } catch (const std::exception&) {
      throw ConfigError(origin_ + ": key '" + key + "': not an unsigned integer: " + s);
    }
  }

  std::vector<double> num_list(const std::string& key, std::vector<double> def) {
    used_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    std::vector<double> out;
    std::istringstream is(it->second);
    std::string item;
    while (std::getline(is, item, ',')) {
      std::string s = strip(item);
      if (s.empty()) continue;
      try {
        out.push_back(std::stod(s));
      } catch (const std::exception&) {
        throw ConfigError(origin_ + ": key '" + key + "': bad list entry: " + s);
      }
    }
    if (out.empty()) throw ConfigError(origin_ + ": key '" + key + "': empty list");
    return out;
  }

  void finish() const {
    for (const auto& [k, v] : kv_)
      if (!used_.count(k)) throw ConfigError(origin_ + ": unknown key '" + k + "'");
  }

 private:
  KvMap kv_;
  std::string origin_;
  std::set<std::string> used_;
};

}  // namespace detail

struct EvalConfig {
  std::size_t max_decode_len = 96;
  std::size_t max_utts = 0;  // 0 = all
  std::string modes = "vsr,asr,avsr";
  std::string noise_kinds = "white,tonal,babble";

  void validate() const {
    if (max_decode_len < 1) throw ConfigError("eval: max_decode_len must be >= 1");
  }
};

struct RunConfig {
  std::uint64_t seed = 1234;
  CorpusSpec corpus;
  EncoderConfig encoders;
  InjectionConfig injection;
  CorruptionConfig corruption;
  PretrainConfig distill;
  FinetuneConfig recognizer;
  LmConfig lm;
  EvalConfig eval;
  std::string frozen_checkpoint = "assets/frozen_default.ckpt";
  std::string train_manifest = "data/train/manifest.tsv";
  std::string test_manifest;  // defaults to train_manifest
  KvMap raw;  // parsed pairs, kept for fingerprinting

  static RunConfig from_kv(KvMap kv, const std::string& origin) {
    detail::ConfigBinder b(kv, origin);
    RunConfig c;
    c.raw = std::move(kv);

    c.seed = b.uint("seed", c.seed);

    c.corpus.n_utterances = b.uint("corpus.n_utterances", c.corpus.n_utterances);
    c.corpus.min_len = b.uint("corpus.min_len", c.corpus.min_len);
    c.corpus.max_len = b.uint("corpus.max_len", c.corpus.max_len);
    c.corpus.char_vocab = b.str("corpus.char_vocab", c.corpus.char_vocab);
    c.corpus.audio_dim = b.uint("corpus.audio_dim", c.corpus.audio_dim);
    c.corpus.video_dim = b.uint("corpus.video_dim", c.corpus.video_dim);
    c.corpus.frame_ratio = b.uint("corpus.frame_ratio", c.corpus.frame_ratio);
    c.corpus.frames_per_char = b.uint("corpus.frames_per_char", c.corpus.frames_per_char);
    c.corpus.jitter_sigma = b.num("corpus.jitter_sigma", c.corpus.jitter_sigma);
    c.corpus.seed = b.uint("corpus.seed", c.seed);

    c.encoders.n_blocks = b.uint("encoders.n_blocks", c.encoders.n_blocks);
    c.encoders.d_model = b.uint("encoders.d_model", c.encoders.d_model);
    c.encoders.n_heads = b.uint("encoders.n_heads", c.encoders.n_heads);
    c.encoders.d_ffn = b.uint("encoders.d_ffn", c.encoders.d_ffn);
    c.encoders.d_visual = b.uint("encoders.d_visual", c.encoders.d_visual);
    c.encoders.d_visual_hidden = b.uint("encoders.d_visual_hidden", c.encoders.d_visual_hidden);
    c.encoders.k = b.uint("encoders.k", c.encoders.k);
    c.encoders.init_seed = b.uint("encoders.init_seed", 0);
    c.encoders.audio_dim = c.corpus.audio_dim;
    c.encoders.video_dim = c.corpus.video_dim;

    c.injection.n_heads = b.uint("injection.n_heads", c.injection.n_heads);
    c.injection.d_attn = b.uint("injection.d_attn", c.injection.d_attn);
    c.injection.d_ffn = b.uint("injection.d_ffn", c.injection.d_ffn);
    c.injection.relpos_dim = b.uint("injection.relpos_dim", c.injection.relpos_dim);
    c.injection.relpos_min_period_s =
        b.num("injection.relpos_min_period_s", c.injection.relpos_min_period_s);
    c.injection.relpos_max_period_s =
        b.num("injection.relpos_max_period_s", c.injection.relpos_max_period_s);
    c.injection.audio_fps = b.num("injection.audio_fps", c.injection.audio_fps);
    c.injection.video_fps = b.num("injection.video_fps",
                                  c.injection.audio_fps /
                                      static_cast<double>(c.corpus.frame_ratio));
    c.injection.init_seed = b.uint("injection.init_seed", 0);

    c.corruption.audio_mask_ratio =
        b.num("corruption.audio_mask_ratio", c.corruption.audio_mask_ratio);
    c.corruption.video_mask_ratio =
        b.num("corruption.video_mask_ratio", c.corruption.video_mask_ratio);
    c.corruption.audio_span_len = b.uint("corruption.audio_span_len", c.corruption.audio_span_len);
    c.corruption.video_span_len = b.uint("corruption.video_span_len", c.corruption.video_span_len);
    c.corruption.p_v = b.num("corruption.p_v", c.corruption.p_v);
    c.corruption.p_prime_v = b.num("corruption.p_prime_v", c.corruption.p_prime_v);
    c.corruption.p_prime_a = b.num("corruption.p_prime_a", c.corruption.p_prime_a);
    c.corruption.snr_grid_db = b.num_list("corruption.snr_grid_db", c.corruption.snr_grid_db);
    c.corruption.noise_prob = b.num("corruption.noise_prob", c.corruption.noise_prob);

    c.distill.total_updates = b.uint("distill.total_updates", c.distill.total_updates);
    c.distill.peak_lr = b.num("distill.peak_lr", c.distill.peak_lr);
    c.distill.warmup_frac = b.num("distill.warmup_frac", c.distill.warmup_frac);
    c.distill.hold_frac = b.num("distill.hold_frac", c.distill.hold_frac);
    c.distill.decay_frac = b.num("distill.decay_frac", c.distill.decay_frac);
    c.distill.decay_floor = b.num("distill.decay_floor", c.distill.decay_floor);
    c.distill.batch_size = b.uint("distill.batch_size", c.distill.batch_size);
    c.distill.checkpoint_every = b.uint("distill.checkpoint_every", c.distill.checkpoint_every);
    c.distill.k = c.encoders.k;
    c.distill.seed = c.seed;

    c.recognizer.total_updates = b.uint("recognizer.total_updates", c.recognizer.total_updates);
    c.recognizer.peak_lr = b.num("recognizer.peak_lr", c.recognizer.peak_lr);
    c.recognizer.warmup_frac = b.num("recognizer.warmup_frac", c.recognizer.warmup_frac);
    c.recognizer.hold_frac = b.num("recognizer.hold_frac", c.recognizer.hold_frac);
    c.recognizer.decay_frac = b.num("recognizer.decay_frac", c.recognizer.decay_frac);
    c.recognizer.decay_floor = b.num("recognizer.decay_floor", c.recognizer.decay_floor);
    c.recognizer.batch_size = b.uint("recognizer.batch_size", c.recognizer.batch_size);
    c.recognizer.lambda = b.num("recognizer.lambda", c.recognizer.lambda);
    c.recognizer.lora_rank = b.uint("recognizer.lora_rank", c.recognizer.lora_rank);
    c.recognizer.lora_alpha =
        b.num("recognizer.lora_alpha", static_cast<double>(c.recognizer.lora_rank));
    c.recognizer.checkpoint_every =
        b.uint("recognizer.checkpoint_every", c.recognizer.checkpoint_every);
    c.recognizer.seed = c.seed;

    c.lm.n_blocks = b.uint("recognizer.n_blocks", c.lm.n_blocks);
    c.lm.d_lm = b.uint("recognizer.d_lm", c.lm.d_lm);
    c.lm.n_heads = b.uint("recognizer.n_heads", c.lm.n_heads);
    c.lm.d_ffn = b.uint("recognizer.d_ffn", c.lm.d_ffn);
    c.lm.init_seed = b.uint("recognizer.init_seed", 0);

    c.eval.max_decode_len = b.uint("eval.max_decode_len", c.eval.max_decode_len);
    c.eval.max_utts = b.uint("eval.max_utts", c.eval.max_utts);
    c.eval.modes = b.str("eval.modes", c.eval.modes);
    c.eval.noise_kinds = b.str("eval.noise_kinds", c.eval.noise_kinds);

    c.frozen_checkpoint = b.str("paths.frozen_checkpoint", c.frozen_checkpoint);
    c.train_manifest = b.str("paths.train_manifest", c.train_manifest);
    c.test_manifest = b.str("paths.test_manifest", c.train_manifest);

    b.finish();
    c.validate();
    return c;
  }

  static RunConfig load(const std::string& path) {
    return from_kv(parse_kv_file(path), path);
  }

  static RunConfig defaults() { return from_kv(KvMap{}, "<defaults>"); }

  void validate() const {
    corpus.validate();
    encoders.validate();
    injection.validate();
    corruption.validate();
    distill.validate();
    recognizer.validate();
    lm.validate();
    eval.validate();
  }

  // CLI --seed override: reseeds every stage that derives from the run seed.
  void override_seed(std::uint64_t s) {
    seed = s;
    corpus.seed = s;
    distill.seed = s;
    recognizer.seed = s;
    raw["seed"] = std::to_string(s);
  }

  std::vector<ModalityMode> eval_modes() const {
    std::vector<ModalityMode> out;
    std::istringstream is(eval.modes);
    std::string item;
    while (std::getline(is, item, ',')) {
      std::string s = detail::strip(item);
      if (!s.empty()) out.push_back(parse_eval_mode(s));
    }
    if (out.empty()) throw ConfigError("eval.modes: empty");
    return out;
  }

  std::vector<NoiseKind> eval_noise_kinds() const {
    std::vector<NoiseKind> out;
    std::istringstream is(eval.noise_kinds);
    std::string item;
    while (std::getline(is, item, ',')) {
      std::string s = detail::strip(item);
      if (!s.empty()) out.push_back(parse_noise_kind(s));
    }
    if (out.empty()) throw ConfigError("eval.noise_kinds: empty");
    return out;
  }
};

}  // namespace uasr
