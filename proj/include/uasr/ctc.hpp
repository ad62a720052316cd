// Connectionist temporal classification with blank id 0: log-space forward
// algorithm for the loss, forward-backward recursion for the analytic
// gradient with respect to the frame logits, and a tape op wrapping both.
#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "uasr/autodiff.hpp"
#include "uasr/errors.hpp"
#include "uasr/matrix.hpp"

namespace uasr {

inline constexpr int kCtcBlank = 0;

namespace detail {

inline double log_add(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  double m = std::max(a, b);
  return m + std::log1p(std::exp(-(std::abs(a - b))));
}

}  // namespace detail

// Shortest feasible frame count: one frame per label plus one separator
// frame between adjacent repeats.
inline std::size_t ctc_min_frames(const std::vector<int>& target) {
  std::size_t n = target.size();
  for (std::size_t i = 1; i < target.size(); ++i)
    if (target[i] == target[i - 1]) ++n;
  return n;
}

// Maps a transcript onto CTC target ids (char index + 1; 0 is the blank).
inline std::vector<int> ctc_targets(const std::string& transcript, const std::string& vocab) {
  std::vector<int> out;
  out.reserve(transcript.size());
  for (char c : transcript) {
    std::size_t pos = vocab.find(c);
    if (pos == std::string::npos)
      throw DataError(std::string("ctc_targets: char outside vocabulary: '") + c + "'");
    out.push_back(static_cast<int>(pos) + 1);
  }
  return out;
}

struct CtcResult {
  double loss = 0.0;
  bool feasible = true;
  Matrix grad;  // d loss / d logits, [T x V]; empty unless requested
};

// -log of the total probability of all alignments of `target` (standard
// extended-label forward recursion over blank-interleaved states). When the
// target cannot fit in T frames the loss is the +infinity sentinel with
// feasible=false and no gradient. grad, when requested, is softmax(logits)
// minus the label posterior from the forward-backward pass.
inline CtcResult ctc_loss(const Matrix& logits, const std::vector<int>& target,
                          bool want_grad = false) {
  const double ninf = -std::numeric_limits<double>::infinity();
  std::size_t t_len = logits.rows();
  std::size_t vocab = logits.cols();
  if (t_len < 1) throw ShapeError("ctc_loss: need at least one frame");
  if (vocab < 2) throw ShapeError("ctc_loss: vocabulary must include blank plus one label");
  for (int id : target)
    if (id <= kCtcBlank || static_cast<std::size_t>(id) >= vocab)
      throw DataError("ctc_loss: target id " + std::to_string(id) + " outside [1, " +
                      std::to_string(vocab - 1) + "]");
  CtcResult res;
  if (ctc_min_frames(target) > t_len) {
    res.loss = std::numeric_limits<double>::infinity();
    res.feasible = false;
    return res;
  }

  // Per-frame log-softmax.
  Matrix logp(t_len, vocab);
  for (std::size_t t = 0; t < t_len; ++t) {
    double mx = ninf;
    for (std::size_t v = 0; v < vocab; ++v) mx = std::max(mx, logits(t, v));
    double denom = 0.0;
    for (std::size_t v = 0; v < vocab; ++v) denom += std::exp(logits(t, v) - mx);
    double log_denom = mx + std::log(denom);
    for (std::size_t v = 0; v < vocab; ++v) logp(t, v) = logits(t, v) - log_denom;
  }

  // Extended label sequence: blank, y1, blank, ..., yU, blank.
  std::size_t s_len = 2 * target.size() + 1;
  auto label = [&](std::size_t s) -> int {
    return s % 2 == 0 ? kCtcBlank : target[s / 2];
  };
  auto can_skip = [&](std::size_t s) {
    return s >= 2 && label(s) != kCtcBlank && label(s) != label(s - 2);
  };

  Matrix alpha(t_len, s_len, ninf);
  alpha(0, 0) = logp(0, static_cast<std::size_t>(label(0)));
  if (s_len > 1) alpha(0, 1) = logp(0, static_cast<std::size_t>(label(1)));
  for (std::size_t t = 1; t < t_len; ++t) {
    for (std::size_t s = 0; s < s_len; ++s) {
      double acc = alpha(t - 1, s);
      if (s >= 1) acc = detail::log_add(acc, alpha(t - 1, s - 1));
      if (can_skip(s)) acc = detail::log_add(acc, alpha(t - 1, s - 2));
      alpha(t, s) = acc == ninf ? ninf : acc + logp(t, static_cast<std::size_t>(label(s)));
    }
  }
  double log_z = alpha(t_len - 1, s_len - 1);
  if (s_len > 1) log_z = detail::log_add(log_z, alpha(t_len - 1, s_len - 2));
  res.loss = -log_z;
  if (!want_grad) return res;

  // beta(t, s) excludes the frame-t emission, so alpha + beta sums to log_z
  // at every t and the state posterior is exp(alpha + beta - log_z).
  Matrix beta(t_len, s_len, ninf);
  beta(t_len - 1, s_len - 1) = 0.0;
  if (s_len > 1) beta(t_len - 1, s_len - 2) = 0.0;
  for (std::size_t t = t_len - 1; t-- > 0;) {
    for (std::size_t s = 0; s < s_len; ++s) {
      double acc = beta(t + 1, s) + logp(t + 1, static_cast<std::size_t>(label(s)));
      if (s + 1 < s_len)
        acc = detail::log_add(acc, beta(t + 1, s + 1) +
                                       logp(t + 1, static_cast<std::size_t>(label(s + 1))));
      if (s + 2 < s_len && can_skip(s + 2))
        acc = detail::log_add(acc, beta(t + 1, s + 2) +
                                       logp(t + 1, static_cast<std::size_t>(label(s + 2))));
      beta(t, s) = acc;
    }
  }

  res.grad = Matrix(t_len, vocab);
  for (std::size_t t = 0; t < t_len; ++t) {
    std::vector<double> log_q(vocab, ninf);
    for (std::size_t s = 0; s < s_len; ++s) {
      double joint = alpha(t, s) + beta(t, s);
      if (joint == ninf) continue;
      std::size_t v = static_cast<std::size_t>(label(s));
      log_q[v] = detail::log_add(log_q[v], joint);
    }
    for (std::size_t v = 0; v < vocab; ++v) {
      double y = std::exp(logp(t, v));
      double q = log_q[v] == ninf ? 0.0 : std::exp(log_q[v] - log_z);
      res.grad(t, v) = y - q;
    }
  }
  return res;
}

// Tape node for the CTC loss. Feasibility must be checked by the caller
// (ctc_min_frames); an infeasible target here is an error.
inline Var ctc_loss_op(Tape& t, Var logits, const std::vector<int>& target) {
  CtcResult res = ctc_loss(t.val(logits), target, /*want_grad=*/true);
  if (!res.feasible) throw DataError("ctc_loss_op: target does not fit in the frame count");
  Matrix out(1, 1);
  out(0, 0) = res.loss;
  Matrix grad = std::move(res.grad);
  bool needs = t.needs_grad(logits);
  return TapeOpAccess::push(t, std::move(out), needs,
                            [logits, grad = std::move(grad)](Tape& tp) mutable {
                              Var self = TapeOpAccess::current(tp);
                              if (!tp.needs_grad(logits)) return;
                              double g = tp.grad(self)(0, 0);
                              tp.grad(logits).map() += g * grad.map();
                            });
}

}  // namespace uasr
