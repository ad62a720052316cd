// Evaluation plumbing: noisy test-set construction over the SNR grid,
// corpus-level WER scoring per (mode, noise, SNR) condition, and report
// emission. The decoder enters through a function seam so the harness can
// be tested with oracle decoders.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "uasr/corruption.hpp"
#include "uasr/errors.hpp"
#include "uasr/kv.hpp"
#include "uasr/recognizer.hpp"
#include "uasr/rng.hpp"
#include "uasr/synthcorpus.hpp"
#include "uasr/wer.hpp"

namespace uasr {

struct DecodeResult {
  std::string id;
  ModalityMode mode = ModalityMode::AudioVisual;
  std::string hypothesis;
  std::string reference;
  WerCounts counts;
};

struct EvalConditionRow {
  std::string mode;      // vsr | asr | avsr
  std::string noise;     // clean | white | tonal | babble
  std::string snr_db;    // "inf" for clean
  double wer = 0.0;      // total edits / total reference words
  std::size_t n_utts = 0;
  std::size_t total_edits = 0;
  std::size_t total_ref_words = 0;
};

struct EvalReport {
  std::vector<EvalConditionRow> rows;
  std::vector<DecodeResult> details;
  std::string config_fingerprint;
};

inline std::string mode_short_name(ModalityMode m) {
  switch (m) {
    case ModalityMode::VideoOnly: return "vsr";
    case ModalityMode::AudioOnly: return "asr";
    case ModalityMode::AudioVisual: return "avsr";
  }
  throw ConfigError("bad modality mode enum");
}

inline ModalityMode parse_eval_mode(const std::string& s) {
  if (s == "vsr") return ModalityMode::VideoOnly;
  if (s == "asr") return ModalityMode::AudioOnly;
  if (s == "avsr") return ModalityMode::AudioVisual;
  throw ConfigError("unknown eval mode (expected vsr/asr/avsr): " + s);
}

inline std::string format_snr_label(double snr_db) {
  if (snr_db == kSnrInf) return "inf";
  std::ostringstream os;
  os << snr_db;
  return os.str();
}

// Stable fingerprint of a parsed config: FNV over the canonical sorted
// key=value serialization, hex-encoded.
inline std::string config_fingerprint(const KvMap& kv) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [k, v] : kv) {
    h = fnv1a(k.data(), k.size(), h);
    h = fnv1a("=", 1, h);
    h = fnv1a(v.data(), v.size(), h);
    h = fnv1a("\n", 1, h);
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

// One evaluable test set: a manifest plus its condition labels.
struct EvalSet {
  std::string noise;    // clean | white | tonal | babble
  std::string snr_db;   // label, "inf" for clean
  std::string manifest_path;
};

// For each (kind, snr) pair, mixes every utterance's audio with a fresh
// per-utterance deterministic noise instance and writes a derived corpus
// (video untouched) plus provenance in the manifest sidecar.
inline std::vector<EvalSet> build_noisy_testsets(const std::string& clean_manifest,
                                                 const std::vector<NoiseKind>& kinds,
                                                 const std::vector<double>& snr_grid_db,
                                                 std::uint64_t seed, const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::vector<Utterance> utts = load_manifest(clean_manifest);
  if (utts.empty()) throw DataError("build_noisy_testsets: empty clean manifest");
  ManifestMeta meta = read_manifest_meta(clean_manifest);
  std::vector<EvalSet> sets;
  for (NoiseKind kind : kinds) {
    for (double snr : snr_grid_db) {
      std::string label = format_snr_label(snr);
      std::string name = "noisy_" + noise_kind_name(kind) + "_" + label + "db";
      std::uint64_t cond_seed =
          derive_seed(seed, "noisy:" + noise_kind_name(kind) + ":" + label);
      std::vector<Utterance> noisy = utts;
      for (std::size_t i = 0; i < noisy.size(); ++i) {
        NoiseSignal noise = generate_noise(kind, noisy[i].audio.rows(), noisy[i].audio.cols(),
                                           derive_seed(cond_seed, i));
        noisy[i].audio = mix_at_snr(noisy[i].audio, noise, snr);
      }
      ManifestMeta noisy_meta = meta;
      noisy_meta.noise_kind = noise_kind_name(kind);
      noisy_meta.snr_db = label;
      std::string dir = (fs::path(out_dir) / name).string();
      save_corpus(dir, noisy, noisy_meta);
      sets.push_back({noise_kind_name(kind), label, (fs::path(dir) / "manifest.tsv").string()});
    }
  }
  return sets;
}

using DecodeFn = std::function<std::string(const Utterance&, ModalityMode)>;

inline DecodeFn make_model_decoder(RecognizerModel& model, std::size_t max_decode_len) {
  return [&model, max_decode_len](const Utterance& u, ModalityMode mode) {
    return greedy_decode(model, mode, u.audio, u.video, max_decode_len).text;
  };
}

struct EvalOptions {
  std::vector<ModalityMode> modes = {ModalityMode::VideoOnly, ModalityMode::AudioOnly,
                                     ModalityMode::AudioVisual};
  std::size_t max_utts = 0;  // 0 = all
};

// Corpus-level WER per condition: total edits over total reference words,
// never the mean of per-utterance rates.
inline EvalReport run_eval(const DecodeFn& decode, const std::vector<EvalSet>& sets,
                           const EvalOptions& opts) {
  if (sets.empty()) throw DataError("run_eval: no test sets");
  if (opts.modes.empty()) throw ConfigError("run_eval: no modes requested");
  EvalReport report;
  for (const EvalSet& set : sets) {
    std::vector<Utterance> utts = load_manifest(set.manifest_path);
    if (opts.max_utts > 0 && utts.size() > opts.max_utts) utts.resize(opts.max_utts);
    if (utts.empty()) throw DataError("run_eval: empty test set " + set.manifest_path);
    for (ModalityMode mode : opts.modes) {
      EvalConditionRow row;
      row.mode = mode_short_name(mode);
      row.noise = set.noise;
      row.snr_db = set.snr_db;
      for (const Utterance& u : utts) {
        DecodeResult r;
        r.id = u.id;
        r.mode = mode;
        r.reference = u.transcript;
        r.hypothesis = decode(u, mode);
        r.counts = wer(r.reference, r.hypothesis);
        row.total_edits += r.counts.edits();
        row.total_ref_words += split_words(r.reference).size();
        ++row.n_utts;
        report.details.push_back(std::move(r));
      }
      row.wer = static_cast<double>(row.total_edits) /
                static_cast<double>(std::max<std::size_t>(1, row.total_ref_words));
      report.rows.push_back(std::move(row));
    }
  }
  return report;
}

// Machine-readable report: fingerprint comment, header, one row per
// condition. Fixed-precision WER keeps byte-level comparisons meaningful.
inline void write_eval_report_csv(const EvalReport& report, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write eval report: " + path);
  os << "# config_fingerprint=" << report.config_fingerprint << "\n";
  os << "mode,noise,snr_db,wer,n_utts\n";
  for (const auto& r : report.rows) {
    os << r.mode << ',' << r.noise << ',' << r.snr_db << ',' << std::fixed
       << std::setprecision(6) << r.wer << ',' << r.n_utts << '\n';
    os.unsetf(std::ios::fixed);
  }
}

inline void write_decode_details_csv(const EvalReport& report, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write decode details: " + path);
  os << "id,mode,sub,del,ins,wer,reference,hypothesis\n";
  for (const auto& d : report.details) {
    os << d.id << ',' << mode_short_name(d.mode) << ',' << d.counts.substitutions << ','
       << d.counts.deletions << ',' << d.counts.insertions << ',' << std::fixed
       << std::setprecision(6) << d.counts.wer << ',' << d.reference << ',' << d.hypothesis
       << '\n';
    os.unsetf(std::ios::fixed);
  }
}

inline std::string format_eval_table(const EvalReport& report) {
  std::ostringstream os;
  os << std::left << std::setw(6) << "mode" << std::setw(8) << "noise" << std::setw(8)
     << "snr_db" << std::right << std::setw(10) << "wer" << std::setw(8) << "n" << "\n";
  for (const auto& r : report.rows) {
    os << std::left << std::setw(6) << r.mode << std::setw(8) << r.noise << std::setw(8)
       << r.snr_db << std::right << std::setw(10) << std::fixed << std::setprecision(4) << r.wer
       << std::setw(8) << r.n_utts << "\n";
    os.unsetf(std::ios::fixed);
  }
  return os.str();
}

}  // namespace uasr
