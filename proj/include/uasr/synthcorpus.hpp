// Synthetic paired audio-visual corpus and noise generation.
//
// Each character in the vocabulary owns a fixed random audio/video template;
// an utterance is the concatenation of its transcript's templates plus small
// per-instance jitter, so transcripts are recoverable from either modality
// and forced alignment is known by construction. Everything is a pure
// function of (spec, seed).
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "uasr/errors.hpp"
#include "uasr/kv.hpp"
#include "uasr/matrix.hpp"
#include "uasr/rng.hpp"

namespace uasr {

struct CorpusSpec {
  std::size_t n_utterances = 32;
  std::size_t min_len = 24;  // video frames
  std::size_t max_len = 48;  // video frames
  std::string char_vocab = "abcdefghijklmnopqrstuvwxyz ";
  std::size_t audio_dim = 24;
  std::size_t video_dim = 16;
  std::size_t frame_ratio = 2;      // audio frames per video frame
  std::size_t frames_per_char = 2;  // video frames emitted per character
  double jitter_sigma = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (frame_ratio < 1) throw ConfigError("corpus: frame_ratio must be >= 1");
    if (min_len < 2) throw ConfigError("corpus: min_len must be >= 2");
    if (min_len > max_len) throw ConfigError("corpus: min_len > max_len");
    if (n_utterances == 0) throw ConfigError("corpus: n_utterances must be >= 1");
    if (audio_dim == 0 || video_dim == 0) throw ConfigError("corpus: zero feature dim");
    if (frames_per_char == 0) throw ConfigError("corpus: frames_per_char must be >= 1");
    if (char_vocab.size() < 2) throw ConfigError("corpus: char_vocab too small");
    for (std::size_t i = 0; i < char_vocab.size(); ++i)
      for (std::size_t j = i + 1; j < char_vocab.size(); ++j)
        if (char_vocab[i] == char_vocab[j])
          throw ConfigError(std::string("corpus: duplicate vocab char '") + char_vocab[i] + "'");
    if (max_len / frames_per_char == 0)
      throw ConfigError("corpus: max_len shorter than one character");
  }
};

struct Utterance {
  std::string id;
  Matrix audio;  // [T x audio_dim]
  Matrix video;  // [T_v x video_dim]
  std::string transcript;
  // Audio-frame-aligned character indices into char_vocab. Filled by
  // generate_corpus (known forced alignment); empty after manifest loads.
  std::vector<int> frame_chars;
};

enum class NoiseKind { white, tonal, babble };

inline NoiseKind parse_noise_kind(const std::string& s) {
  if (s == "white") return NoiseKind::white;
  if (s == "tonal") return NoiseKind::tonal;
  if (s == "babble") return NoiseKind::babble;
  throw ConfigError("unknown noise kind: " + s);
}

inline std::string noise_kind_name(NoiseKind k) {
  switch (k) {
    case NoiseKind::white: return "white";
    case NoiseKind::tonal: return "tonal";
    case NoiseKind::babble: return "babble";
  }
  throw ConfigError("bad noise kind enum");
}

struct NoiseSignal {
  NoiseKind kind = NoiseKind::white;
  Matrix samples;  // [T x audio_dim]
};

// Per-character templates shared by every utterance of a corpus.
struct CharTemplates {
  std::vector<Matrix> audio;  // per char: [frame_ratio*frames_per_char x audio_dim]
  std::vector<Matrix> video;  // per char: [frames_per_char x video_dim]
};

inline CharTemplates make_char_templates(const CorpusSpec& spec) {
  Rng rng(derive_seed(spec.seed, "char_templates"));
  CharTemplates t;
  std::size_t a_frames = spec.frame_ratio * spec.frames_per_char;
  for (std::size_t c = 0; c < spec.char_vocab.size(); ++c) {
    t.audio.push_back(random_normal(a_frames, spec.audio_dim, rng));
    t.video.push_back(random_normal(spec.frames_per_char, spec.video_dim, rng));
  }
  return t;
}

namespace detail {

// Words of 2..5 letters (vocab minus space) joined by single spaces, sized
// so the emitted video length lands in [min_len, max_len].
inline std::string sample_transcript(const CorpusSpec& spec, Rng& rng) {
  std::string letters;
  for (char c : spec.char_vocab)
    if (c != ' ') letters.push_back(c);
  std::size_t min_chars = (spec.min_len + spec.frames_per_char - 1) / spec.frames_per_char;
  std::size_t max_chars = spec.max_len / spec.frames_per_char;
  std::string out;
  while (true) {
    std::size_t wlen = 2 + rng.randint(4);
    std::size_t need = out.empty() ? wlen : wlen + 1;
    if (out.size() + need > max_chars) break;
    if (!out.empty()) out.push_back(' ');
    for (std::size_t i = 0; i < wlen; ++i) out.push_back(letters[rng.randint(letters.size())]);
    if (out.size() >= min_chars && rng.uniform() < 0.3) break;
  }
  // A pathological min/max window could leave the loop before reaching
  // min_chars; pad with single-letter words to stay inside the window.
  while (out.size() + 2 <= max_chars && out.size() < min_chars) {
    out.push_back(' ');
    out.push_back(letters[rng.randint(letters.size())]);
  }
  if (out.empty()) out.push_back(letters[rng.randint(letters.size())]);
  return out;
}

}  // namespace detail

inline Utterance synth_utterance(const CorpusSpec& spec, const CharTemplates& templates,
                                 std::size_t index) {
  Rng rng(derive_seed(spec.seed, "utt_" + std::to_string(index)));
  Utterance u;
  {
    std::ostringstream id;
    id << "utt_" << std::setw(6) << std::setfill('0') << index;
    u.id = id.str();
  }
  u.transcript = detail::sample_transcript(spec, rng);
  std::size_t tv = u.transcript.size() * spec.frames_per_char;
  std::size_t ta = tv * spec.frame_ratio;
  u.video = Matrix(tv, spec.video_dim);
  u.audio = Matrix(ta, spec.audio_dim);
  u.frame_chars.assign(ta, -1);
  std::size_t a_frames = spec.frame_ratio * spec.frames_per_char;
  for (std::size_t ci = 0; ci < u.transcript.size(); ++ci) {
    std::size_t cid = spec.char_vocab.find(u.transcript[ci]);
    const Matrix& at = templates.audio[cid];
    const Matrix& vt = templates.video[cid];
    for (std::size_t f = 0; f < a_frames; ++f) {
      std::size_t row = ci * a_frames + f;
      u.frame_chars[row] = static_cast<int>(cid);
      for (std::size_t d = 0; d < spec.audio_dim; ++d)
        u.audio(row, d) = at(f, d) + spec.jitter_sigma * rng.normal();
    }
    for (std::size_t f = 0; f < spec.frames_per_char; ++f) {
      std::size_t row = ci * spec.frames_per_char + f;
      for (std::size_t d = 0; d < spec.video_dim; ++d)
        u.video(row, d) = vt(f, d) + spec.jitter_sigma * rng.normal();
    }
  }
  return u;
}

inline std::vector<Utterance> generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  CharTemplates templates = make_char_templates(spec);
  std::vector<Utterance> out;
  out.reserve(spec.n_utterances);
  for (std::size_t i = 0; i < spec.n_utterances; ++i)
    out.push_back(synth_utterance(spec, templates, i));
  return out;
}

// ---- noise ----

// The babble analogue sums speech-like streams, each stitched from a small
// bank of random segment patterns (one bank per stream).
inline std::vector<Matrix> babble_streams(std::size_t t, std::size_t audio_dim,
                                          std::uint64_t seed, std::size_t n_streams = 3) {
  constexpr std::size_t kBankSize = 12;
  constexpr std::size_t kSegFrames = 4;
  std::vector<Matrix> streams;
  for (std::size_t s = 0; s < n_streams; ++s) {
    Rng rng(derive_seed(seed, "babble_stream_" + std::to_string(s)));
    std::vector<Matrix> bank;
    for (std::size_t b = 0; b < kBankSize; ++b)
      bank.push_back(random_normal(kSegFrames, audio_dim, rng));
    Matrix stream(t, audio_dim);
    std::size_t row = 0;
    while (row < t) {
      const Matrix& seg = bank[rng.randint(kBankSize)];
      for (std::size_t f = 0; f < kSegFrames && row < t; ++f, ++row)
        for (std::size_t d = 0; d < audio_dim; ++d) stream(row, d) = seg(f, d);
    }
    streams.push_back(std::move(stream));
  }
  return streams;
}

inline NoiseSignal generate_noise(NoiseKind kind, std::size_t t, std::size_t audio_dim,
                                  std::uint64_t seed) {
  if (t < 1) throw ConfigError("generate_noise: T must be >= 1");
  if (audio_dim < 1) throw ConfigError("generate_noise: audio_dim must be >= 1");
  NoiseSignal n;
  n.kind = kind;
  switch (kind) {
    case NoiseKind::white: {
      Rng rng(derive_seed(seed, "noise_white"));
      n.samples = random_normal(t, audio_dim, rng);
      break;
    }
    case NoiseKind::tonal: {
      Rng rng(derive_seed(seed, "noise_tonal"));
      n.samples = Matrix(t, audio_dim);
      for (std::size_t d = 0; d < audio_dim; ++d) {
        double freq = rng.uniform(0.02, 0.45);  // cycles per frame
        double phase = rng.uniform(0.0, 2.0 * M_PI);
        for (std::size_t r = 0; r < t; ++r)
          n.samples(r, d) = std::sin(2.0 * M_PI * freq * static_cast<double>(r) + phase);
      }
      break;
    }
    case NoiseKind::babble: {
      n.samples = Matrix(t, audio_dim);
      for (const Matrix& s : babble_streams(t, audio_dim, seed)) n.samples.map() += s.map();
      break;
    }
  }
  return n;
}

// ---- feature binary I/O ----
// 16-byte header: 8-byte magic "UASRFT01", u32 rows, u32 cols; then
// rows*cols little-endian float64 values, row-major.

inline constexpr char kFeatureMagic[8] = {'U', 'A', 'S', 'R', 'F', 'T', '0', '1'};

inline void write_features(const std::string& path, const Matrix& m) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write feature file: " + path);
  os.write(kFeatureMagic, 8);
  std::uint32_t rows = static_cast<std::uint32_t>(m.rows());
  std::uint32_t cols = static_cast<std::uint32_t>(m.cols());
  unsigned char hdr[8] = {
      static_cast<unsigned char>(rows),       static_cast<unsigned char>(rows >> 8),
      static_cast<unsigned char>(rows >> 16), static_cast<unsigned char>(rows >> 24),
      static_cast<unsigned char>(cols),       static_cast<unsigned char>(cols >> 8),
      static_cast<unsigned char>(cols >> 16), static_cast<unsigned char>(cols >> 24)};
  os.write(reinterpret_cast<const char*>(hdr), 8);
  os.write(reinterpret_cast<const char*>(m.data()),
           static_cast<std::streamsize>(m.size() * sizeof(double)));
  if (!os) throw DataError("feature write failed: " + path);
}

inline Matrix read_features(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open feature file: " + path);
  char magic[8];
  unsigned char hdr[8];
  is.read(magic, 8);
  is.read(reinterpret_cast<char*>(hdr), 8);
  if (!is || std::memcmp(magic, kFeatureMagic, 8) != 0)
    throw DataError("bad feature file header: " + path);
  std::uint32_t rows = static_cast<std::uint32_t>(hdr[0]) | (hdr[1] << 8) | (hdr[2] << 16) |
                       (static_cast<std::uint32_t>(hdr[3]) << 24);
  std::uint32_t cols = static_cast<std::uint32_t>(hdr[4]) | (hdr[5] << 8) | (hdr[6] << 16) |
                       (static_cast<std::uint32_t>(hdr[7]) << 24);
  Matrix m(rows, cols);
  is.read(reinterpret_cast<char*>(m.raw().data()),
          static_cast<std::streamsize>(m.size() * sizeof(double)));
  if (!is) throw DataError("truncated feature file: " + path);
  return m;
}

// ---- manifest I/O ----
// Manifest: one record per line, `id<TAB>audio_path<TAB>video_path<TAB>
// transcript`, paths relative to the manifest's directory. A sidecar
// `<manifest>.meta` carries the vocabulary, dims, and provenance.

struct ManifestMeta {
  std::string char_vocab;
  std::size_t audio_dim = 0;
  std::size_t video_dim = 0;
  std::size_t frame_ratio = 0;
  std::uint64_t seed = 0;
  // Provenance for derived (noisy) sets; empty kind means a clean set.
  std::string noise_kind;
  std::string snr_db;
};

inline void write_manifest_meta(const std::string& manifest_path, const ManifestMeta& meta) {
  std::ofstream os(manifest_path + ".meta", std::ios::trunc);
  if (!os) throw DataError("cannot write manifest meta: " + manifest_path + ".meta");
  os << "char_vocab = " << format_kv_value(meta.char_vocab) << "\n";
  os << "audio_dim = " << meta.audio_dim << "\n";
  os << "video_dim = " << meta.video_dim << "\n";
  os << "frame_ratio = " << meta.frame_ratio << "\n";
  os << "seed = " << meta.seed << "\n";
  if (!meta.noise_kind.empty()) {
    os << "noise_kind = " << meta.noise_kind << "\n";
    os << "snr_db = " << meta.snr_db << "\n";
  }
}

inline ManifestMeta read_manifest_meta(const std::string& manifest_path) {
  KvMap kv = parse_kv_file(manifest_path + ".meta");
  ManifestMeta m;
  m.char_vocab = kv.at("char_vocab");
  m.audio_dim = std::stoul(kv.at("audio_dim"));
  m.video_dim = std::stoul(kv.at("video_dim"));
  m.frame_ratio = std::stoul(kv.at("frame_ratio"));
  m.seed = std::stoull(kv.at("seed"));
  if (kv.count("noise_kind")) m.noise_kind = kv.at("noise_kind");
  if (kv.count("snr_db")) m.snr_db = kv.at("snr_db");
  return m;
}

inline void save_corpus(const std::string& dir, const std::vector<Utterance>& utts,
                        const ManifestMeta& meta) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "feats");
  std::string manifest_path = (fs::path(dir) / "manifest.tsv").string();
  std::ofstream os(manifest_path, std::ios::trunc);
  if (!os) throw DataError("cannot write manifest: " + manifest_path);
  for (const Utterance& u : utts) {
    std::string a_rel = "feats/" + u.id + ".a.bin";
    std::string v_rel = "feats/" + u.id + ".v.bin";
    write_features((fs::path(dir) / a_rel).string(), u.audio);
    write_features((fs::path(dir) / v_rel).string(), u.video);
    os << u.id << '\t' << a_rel << '\t' << v_rel << '\t' << u.transcript << '\n';
  }
  os.close();
  write_manifest_meta(manifest_path, meta);
}

inline std::vector<Utterance> load_manifest(const std::string& manifest_path) {
  namespace fs = std::filesystem;
  std::ifstream is(manifest_path);
  if (!is) throw DataError("cannot open manifest: " + manifest_path);
  std::string vocab;
  if (fs::exists(manifest_path + ".meta")) vocab = read_manifest_meta(manifest_path).char_vocab;
  fs::path base = fs::path(manifest_path).parent_path();
  std::vector<Utterance> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t pos = 0;
    while (fields.size() < 3) {
      std::size_t tab = line.find('\t', pos);
      if (tab == std::string::npos) break;
      fields.push_back(line.substr(pos, tab - pos));
      pos = tab + 1;
    }
    if (fields.size() < 3)
      throw DataError(manifest_path + ":" + std::to_string(lineno) + ": malformed record");
    fields.push_back(line.substr(pos));
    Utterance u;
    u.id = fields[0];
    u.transcript = fields[3];
    if (u.transcript.empty())
      throw DataError("utterance " + u.id + ": empty transcript");
    if (!vocab.empty()) {
      for (char c : u.transcript)
        if (vocab.find(c) == std::string::npos)
          throw DataError("utterance " + u.id + ": transcript char outside vocabulary: '" +
                          std::string(1, c) + "'");
    }
    fs::path a_path = base / fields[1];
    fs::path v_path = base / fields[2];
    if (!fs::exists(a_path))
      throw DataError("utterance " + u.id + ": missing feature file " + a_path.string());
    if (!fs::exists(v_path))
      throw DataError("utterance " + u.id + ": missing feature file " + v_path.string());
    u.audio = read_features(a_path.string());
    u.video = read_features(v_path.string());
    out.push_back(std::move(u));
  }
  return out;
}

}  // namespace uasr
