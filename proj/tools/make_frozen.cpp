// Builds the committed assets: the frozen backbone checkpoint (random SFM and
// visual encoder plus a warm-trained character LM), forward-pass golden
// checksums for regression tests, and a small fixed corpus for training
// criteria. Run from the repository root: make_frozen [assets_dir].
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <vector>

#include "uasr/checkpoint.hpp"
#include "uasr/config.hpp"
#include "uasr/corruption.hpp"
#include "uasr/distill.hpp"
#include "uasr/encoders.hpp"
#include "uasr/recognizer.hpp"
#include "uasr/synthcorpus.hpp"

namespace fs = std::filesystem;
using namespace uasr;

namespace {

void append_sums(std::ostream& os, const std::string& key, const Matrix& m) {
  double sum = 0.0, abs_sum = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    sum += m.raw()[i];
    abs_sum += std::abs(m.raw()[i]);
  }
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%s_sum = %.17g\n%s_abs = %.17g\n", key.c_str(), sum,
                key.c_str(), abs_sum);
  os << buf;
}

Matrix probe_input(std::size_t rows, std::size_t cols, const char* tag) {
  Rng rng(derive_seed(97, tag));
  return random_normal(rows, cols, rng);
}

double window_mean(const std::vector<double>& v, std::size_t n) {
  std::size_t lo = v.size() > n ? v.size() - n : 0;
  double s = 0.0;
  for (std::size_t i = lo; i < v.size(); ++i) s += v[i];
  return s / static_cast<double>(v.size() - lo);
}

// Synthesizes audio and video features for an arbitrary text with the
// corpus character templates, like the corpus generator does for its
// transcripts.
void features_for_text(const CorpusSpec& spec, const CharTemplates& templates,
                       const std::string& text, double jitter, Rng& rng, Matrix& audio,
                       Matrix& video) {
  std::size_t a_frames = spec.frame_ratio * spec.frames_per_char;
  audio = Matrix(text.size() * a_frames, spec.audio_dim);
  video = Matrix(text.size() * spec.frames_per_char, spec.video_dim);
  for (std::size_t ci = 0; ci < text.size(); ++ci) {
    std::size_t cid = spec.char_vocab.find(text[ci]);
    if (cid == std::string::npos) throw DataError("features_for_text: character outside vocab");
    const Matrix& at = templates.audio[cid];
    const Matrix& vt = templates.video[cid];
    for (std::size_t f = 0; f < a_frames; ++f)
      for (std::size_t d = 0; d < spec.audio_dim; ++d)
        audio(ci * a_frames + f, d) = at(f, d) + jitter * rng.normal();
    for (std::size_t f = 0; f < spec.frames_per_char; ++f)
      for (std::size_t d = 0; d < spec.video_dim; ++d)
        video(ci * spec.frames_per_char + f, d) = vt(f, d) + jitter * rng.normal();
  }
}

Matrix adaptor_eager(const Adaptor& adaptor, const Matrix& h_o) {
  Matrix mid = adaptor.l1.apply_eager(h_o);
  return adaptor.l2.apply_eager(lmdec::gelu_rows(std::move(mid)));
}

// What the finetune stage feeds the LM at its first step for each prompt:
// encoder states of the utterance pushed through the adaptor as it is
// initialized there. The adaptor construction below consumes the same seed
// chain, so the map is reproduced exactly; the injected encoder carries the
// stage-1 weights the standard pretraining run would leave it with.
Matrix mode_stream(ModalityMode mode, DistillModel& dm, const Adaptor& adaptor,
                   const Matrix& audio, const Matrix& video) {
  if (mode == ModalityMode::AudioOnly)
    return adaptor_eager(adaptor, dm.sfm.forward(audio).states.back());
  Tape t;
  Matrix a = mode == ModalityMode::VideoOnly ? Matrix::zeros(audio.rows(), audio.cols()) : audio;
  Var h = dm.sfmav.forward(t, std::move(a), dm.venc.encode(video));
  return adaptor_eager(adaptor, t.val(h));
}

// Teaches the base LM to transcribe a continuous token stream laid out
// exactly like the finetune-time sequence (prompt, per-frame tokens, BOS,
// text). Each step draws a prompt mode and builds the matching stream the
// way the recognizer would at its first finetune step: the frozen encoders
// (audio-only, injected with zero audio, or injected audio-visual, the
// injection already carrying the standard stage-1 weights) followed by the
// adaptor at its deterministic initial weights. The committed LM therefore
// already reads what every prompt's stream looks like before any finetune
// update. Most steps draw a fresh random transcript so the text cannot be
// memorized and copying from the stream is the only route to low loss.
// Short sequences early make the copy mechanism form before lengths grow to
// the corpus range; scale and additive jitter on the stream keep the skill
// stable while the adaptor trains away from its initial weights.
std::vector<double> train_stream_reader(DecoderLM& lm, DistillModel& dm, const Adaptor& adaptor,
                                        const CorpusSpec& spec, const CharTemplates& templates,
                                        const std::vector<Utterance>& utts, std::size_t steps,
                                        std::uint64_t seed) {
  std::vector<Parameter*> ps;
  lm.base_params(ps);
  for (Parameter* p : ps)
    if (p->frozen) throw ConfigError("train_stream_reader: base LM is already frozen");
  Adam opt;
  Rng rng(derive_seed(seed, "stream_reader"));
  std::size_t min_chars = (spec.min_len + spec.frames_per_char - 1) / spec.frames_per_char;
  std::size_t max_chars = spec.max_len / spec.frames_per_char;
  std::vector<double> losses;
  for (std::size_t step = 0; step < steps; ++step) {
    double f = static_cast<double>(step) / static_cast<double>(steps);
    std::size_t lo = f < 0.2 ? 2 : f < 0.4 ? 4 : min_chars;
    std::size_t hi = f < 0.2 ? 6 : f < 0.4 ? 12 : max_chars;
    double lr = step < 500 ? 7e-4 * static_cast<double>(step + 1) / 500.0
               : f < 0.8  ? 7e-4
                          : 7e-4 + (1e-4 - 7e-4) * (f - 0.8) / 0.2;

    std::string text;
    double draw = rng.uniform();
    if (draw < 0.15 && f >= 0.4) {
      text = utts[rng.randint(utts.size())].transcript;
    } else {
      std::size_t n_chars = lo + rng.randint(hi - lo + 1);
      for (std::size_t i = 0; i < n_chars; ++i)
        text.push_back(spec.char_vocab[rng.randint(spec.char_vocab.size())]);
    }

    Matrix audio, video;
    features_for_text(spec, templates, text, spec.jitter_sigma, rng, audio, video);
    // The zero-audio stream is the farthest from the plain encoder's and
    // takes longest to learn, so it gets the largest share of steps.
    double md = rng.uniform();
    ModalityMode mode = md < 0.4   ? ModalityMode::VideoOnly
                        : md < 0.7 ? ModalityMode::AudioOnly
                                   : ModalityMode::AudioVisual;
    if (mode != ModalityMode::VideoOnly && rng.uniform() < 0.25) {
      double snr_db = 5.0 * static_cast<double>(rng.randint(3));
      NoiseSignal noise = generate_noise(NoiseKind::white, audio.rows(), audio.cols(),
                                         derive_seed(seed, step));
      audio = mix_at_snr(audio, noise, snr_db);
    }
    Matrix filler = mode_stream(mode, dm, adaptor, audio, video);
    double gain = rng.uniform() < 0.5 ? 1.0 : rng.uniform(0.85, 1.2);
    double noise_std = 0.05 * rng.uniform();
    for (auto& v : filler.raw()) v = gain * v + noise_std * rng.normal();

    zero_grads(ps);
    Tape t;
    AssembledSequence seq =
        assemble_sequence(t, lm, mode, t.constant(filler), lm.vocab.encode(text));
    Var logits = lm.forward(t, seq.embeddings);
    Var loss = nll_next_token(t, logits, seq.ce_targets);
    losses.push_back(t.val(loss)(0, 0));
    t.backward(loss);
    opt.step(ps, lr);
    if ((step + 1) % 1000 == 0)
      std::cout << "  reader step " << (step + 1) << " mean-500 " << window_mean(losses, 500)
                << std::endl;
  }
  return losses;
}

// Greedy decode given a clean stream for the mode; measures whether the
// reader skill actually formed.
std::string decode_stream(DecoderLM& lm, const Matrix& filler, ModalityMode mode,
                          std::size_t budget) {
  std::vector<int> generated;
  for (std::size_t it = 0; it < budget; ++it) {
    Tape t;
    AssembledSequence seq = assemble_sequence(t, lm, mode, t.constant(filler), generated);
    Var logits_var = lm.forward(t, seq.embeddings);
    const Matrix& logits = t.val(logits_var);
    std::size_t last = logits.rows() - 1;
    int best = 0;
    for (std::size_t c = 1; c < logits.cols(); ++c)
      if (logits(last, c) > logits(last, best)) best = static_cast<int>(c);
    if (best == lm.vocab.eos) break;
    generated.push_back(best);
  }
  return lm.vocab.decode(generated);
}

std::string decode_oracle(DecoderLM& lm, DistillModel& dm, const Adaptor& adaptor,
                          const CorpusSpec& spec, const CharTemplates& templates,
                          const std::string& text, ModalityMode mode) {
  Rng rng(derive_seed(123, "probe_noise"));
  Matrix audio, video;
  features_for_text(spec, templates, text, spec.jitter_sigma, rng, audio, video);
  return decode_stream(lm, mode_stream(mode, dm, adaptor, audio, video), mode, text.size() + 5);
}

}  // namespace

int main(int argc, char** argv) {
  std::string assets_dir = argc > 1 ? argv[1] : "assets";
  std::size_t reader_steps = argc > 2 ? static_cast<std::size_t>(std::stoul(argv[2])) : 6000;
  fs::create_directories(assets_dir);

  RunConfig cfg = RunConfig::defaults();

  // Fixed training corpus.
  std::vector<Utterance> utts = generate_corpus(cfg.corpus);
  ManifestMeta meta;
  meta.char_vocab = cfg.corpus.char_vocab;
  meta.audio_dim = cfg.corpus.audio_dim;
  meta.video_dim = cfg.corpus.video_dim;
  meta.frame_ratio = cfg.corpus.frame_ratio;
  meta.seed = cfg.corpus.seed;
  std::string corpus_dir = (fs::path(assets_dir) / "corpus32").string();
  save_corpus(corpus_dir, utts, meta);
  std::cout << "corpus: " << utts.size() << " utterances -> " << corpus_dir << "\n";

  // Frozen backbone.
  Sfm sfm;
  sfm.init(cfg.encoders);
  VisualEncoder venc;
  venc.init(cfg.encoders);

  // The adaptor exactly as the recognizer initializes it: same seed chain,
  // first consumer of the stream, so the weights match bit for bit.
  Adaptor adaptor;
  {
    Rng arng(derive_seed(cfg.lm.init_seed, "recognizer"));
    adaptor.init(cfg.encoders.d_model, cfg.lm.d_lm, arng);
  }
  CharTemplates templates = make_char_templates(cfg.corpus);

  // A second model copy carries the injection path through its standard
  // distillation pretraining, so the injected streams the reader sees below
  // are the ones a default pretrain run hands to the finetune stage. Its
  // encoders init from the same seeds as the ones saved above; the training
  // touches only the injection modules and the distillation projection, and
  // its checkpoints go to a scratch directory, not the assets.
  DistillModel dm;
  dm.init(cfg.encoders, cfg.injection, cfg.corpus.frame_ratio);
  {
    std::vector<Parameter*> a, b;
    sfm.params(a);
    dm.sfm.params(b);
    venc.params(a);
    dm.venc.params(b);
    for (std::size_t i = 0; i < a.size(); ++i)
      if (hash_bytes(a[i]->value) != hash_bytes(b[i]->value))
        throw ConfigError("make_frozen: encoder init drifted between model copies");
  }
  std::string stage1_dir = (fs::temp_directory_path() / "uasr_make_frozen_stage1").string();
  PretrainRunResult pre = run_pretrain(dm, utts, cfg.distill, cfg.corruption, stage1_dir);
  std::cout << "stage1 distillation: " << pre.losses.size() << " updates, first "
            << pre.losses.front() << ", last " << pre.losses.back() << "\n";

  // Warm-train the character LM before freezing: first plain next-character
  // modeling on the corpus transcripts, then stream transcription in the
  // finetune sequence layout so the frozen model already knows how to copy
  // characters out of every prompt's stream.
  DecoderLM lm;
  lm.init(cfg.lm, LmVocab::build(cfg.corpus.char_vocab));
  std::vector<std::string> texts;
  for (const Utterance& u : utts) texts.push_back(u.transcript);
  std::vector<double> lm_losses = train_char_lm(lm, texts, 300, 1e-3, 11);
  std::cout << "lm warm train: " << lm_losses.size() << " steps, first " << lm_losses.front()
            << ", last " << lm_losses.back() << "\n";
  std::vector<double> rd =
      train_stream_reader(lm, dm, adaptor, cfg.corpus, templates, utts, reader_steps, 11);
  lm.freeze_base();
  std::cout << "stream reader: " << rd.size() << " steps, first " << rd.front()
            << ", last-500-mean " << window_mean(rd, 500) << "\n";

  // Reader probe: exact-decode rate per mode, on clean streams for random
  // texts and on the real corpus features for the first utterances.
  const struct {
    ModalityMode mode;
    const char* tag;
  } kProbeModes[] = {{ModalityMode::VideoOnly, "vsr"},
                     {ModalityMode::AudioOnly, "asr"},
                     {ModalityMode::AudioVisual, "avsr"}};
  for (const auto& pm : kProbeModes) {
    std::size_t exact = 0, probes = 0;
    Rng probe_rng(derive_seed(55, "probe_texts"));
    for (std::size_t i = 0; i < 8; ++i) {
      std::size_t n = 12 + probe_rng.randint(13);
      std::string text;
      for (std::size_t j = 0; j < n; ++j)
        text.push_back(cfg.corpus.char_vocab[probe_rng.randint(cfg.corpus.char_vocab.size())]);
      std::string hyp = decode_oracle(lm, dm, adaptor, cfg.corpus, templates, text, pm.mode);
      if (i < 1) std::cout << "  " << pm.tag << " probe ref '" << text << "' hyp '" << hyp << "'\n";
      exact += hyp == text ? 1 : 0;
      ++probes;
    }
    for (std::size_t i = 0; i < 8; ++i) {
      Matrix filler = mode_stream(pm.mode, dm, adaptor, utts[i].audio, utts[i].video);
      std::string hyp = decode_stream(lm, filler, pm.mode, utts[i].transcript.size() + 5);
      exact += hyp == utts[i].transcript ? 1 : 0;
      ++probes;
    }
    std::cout << "reader probe " << pm.tag << ": " << exact << "/" << probes
              << " exact decodes\n";
  }

  std::vector<Parameter*> params;
  sfm.params(params);
  venc.params(params);
  lm.base_params(params);
  std::string ckpt_path = (fs::path(assets_dir) / "frozen_default.ckpt").string();
  save_checkpoint(ckpt_path, params);
  std::cout << "checkpoint: " << params.size() << " tensors -> " << ckpt_path << "\n";

  // Golden forward-pass checksums over fixed probe inputs.
  std::ofstream golden(fs::path(assets_dir) / "goldens.txt", std::ios::trunc);
  golden << "# forward-pass checksums for the frozen default backbone\n";
  Matrix audio = probe_input(12, cfg.corpus.audio_dim, "golden_audio");
  LayerOutputs out = sfm.forward(audio);
  for (std::size_t i = 0; i < out.states.size(); ++i)
    append_sums(golden, "sfm_block" + std::to_string(i), out.states[i]);
  Matrix video = probe_input(6, cfg.corpus.video_dim, "golden_video");
  append_sums(golden, "visual", venc.encode(video));
  append_sums(golden, "sfm_hash_probe", Matrix(1, 1, static_cast<double>(stage_hash(params, "sfm"))));
  std::cout << "goldens -> " << (fs::path(assets_dir) / "goldens.txt").string() << "\n";
  return 0;
}
