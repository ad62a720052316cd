// Small neural-net building blocks on top of the tape: linear layers with
// optional low-rank adapters, layer norm, feed-forward, multi-head attention
// with per-head additive logit bias, sinusoidal position tables, and Adam.
#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "uasr/autodiff.hpp"
#include "uasr/matrix.hpp"
#include "uasr/rng.hpp"

namespace uasr {

// Low-rank adapter pair: y += scale * (x A) B. A is small random, B starts
// at zero so an adapted layer is exactly the base layer at init.
struct LoraPair {
  Parameter A;  // [in x r]
  Parameter B;  // [r x out]
  double scale = 1.0;

  void init(const std::string& name, std::size_t in, std::size_t out, std::size_t rank,
            double alpha, Rng& rng) {
    A.name = name + ".lora_a";
    A.stage = "lora";
    A.value = Matrix(in, rank);
    double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& v : A.value.raw()) v = rng.uniform(-bound, bound);
    B.name = name + ".lora_b";
    B.stage = "lora";
    B.value = Matrix::zeros(rank, out);
    scale = alpha / static_cast<double>(rank);
  }

  void params(std::vector<Parameter*>& out) {
    out.push_back(&A);
    out.push_back(&B);
  }
};

struct Linear {
  Parameter W;  // [in x out]
  Parameter b;  // [1 x out]
  LoraPair* lora = nullptr;

  void init(const std::string& name, const std::string& stage, std::size_t in, std::size_t out,
            Rng& rng) {
    W.name = name + ".w";
    W.stage = stage;
    W.value = random_normal(in, out, rng, 1.0 / std::sqrt(static_cast<double>(in)));
    b.name = name + ".b";
    b.stage = stage;
    b.value = Matrix::zeros(1, out);
  }

  void init_identity(const std::string& name, const std::string& stage, std::size_t dim) {
    W.name = name + ".w";
    W.stage = stage;
    W.value = Matrix::identity(dim);
    b.name = name + ".b";
    b.stage = stage;
    b.value = Matrix::zeros(1, dim);
  }

  std::size_t in_dim() const { return W.value.rows(); }
  std::size_t out_dim() const { return W.value.cols(); }

  Var apply(Tape& t, Var x) {
    Var y = t.add_row_broadcast(t.matmul(x, t.param(W)), t.param(b));
    if (lora) {
      Var delta = t.matmul(t.matmul(x, t.param(lora->A)), t.param(lora->B));
      y = t.add(y, t.scale(delta, lora->scale));
    }
    return y;
  }

  Matrix apply_eager(const Matrix& x) const {
    Matrix y = matmul(x, W.value);
    for (std::size_t r = 0; r < y.rows(); ++r)
      for (std::size_t c = 0; c < y.cols(); ++c) y(r, c) += b.value(0, c);
    if (lora) {
      Matrix delta = matmul(matmul(x, lora->A.value), lora->B.value);
      y.map() += lora->scale * delta.map();
    }
    return y;
  }

  void params(std::vector<Parameter*>& out) {
    out.push_back(&W);
    out.push_back(&b);
  }
};

struct LayerNorm {
  Parameter gamma;  // [1 x d], ones
  Parameter beta;   // [1 x d], zeros
  double eps = 1e-5;

  void init(const std::string& name, const std::string& stage, std::size_t d) {
    gamma.name = name + ".gamma";
    gamma.stage = stage;
    gamma.value = Matrix(1, d, 1.0);
    beta.name = name + ".beta";
    beta.stage = stage;
    beta.value = Matrix::zeros(1, d);
  }

  Var apply(Tape& t, Var x) { return t.layer_norm(x, t.param(gamma), t.param(beta), eps); }

  void params(std::vector<Parameter*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
};

struct Ffn {
  Linear up;
  Linear down;

  void init(const std::string& name, const std::string& stage, std::size_t d, std::size_t hidden,
            Rng& rng) {
    up.init(name + ".up", stage, d, hidden, rng);
    down.init(name + ".down", stage, hidden, d, rng);
  }

  Var apply(Tape& t, Var x) { return down.apply(t, t.gelu(up.apply(t, x))); }

  void params(std::vector<Parameter*>& out) {
    up.params(out);
    down.params(out);
  }
};

// Multi-head attention. Queries come from q_in, keys/values from kv_in.
// head_bias, when given, holds one [Tq x Tk] matrix per head added to the
// scaled logits before masking/softmax. last_attn keeps the per-head
// post-softmax weights of the most recent apply for inspection in tests.
struct Mha {
  std::size_t n_heads = 0;
  Linear wq, wk, wv, wo;
  std::vector<Var> last_attn;

  void init(const std::string& name, const std::string& stage, std::size_t q_dim,
            std::size_t kv_dim, std::size_t d_attn, std::size_t out_dim, std::size_t heads,
            Rng& rng) {
    if (d_attn % heads != 0) throw ShapeError("mha: d_attn must be divisible by n_heads");
    n_heads = heads;
    wq.init(name + ".wq", stage, q_dim, d_attn, rng);
    wk.init(name + ".wk", stage, kv_dim, d_attn, rng);
    wv.init(name + ".wv", stage, kv_dim, d_attn, rng);
    wo.init(name + ".wo", stage, d_attn, out_dim, rng);
  }

  Var apply(Tape& t, Var q_in, Var kv_in, const std::vector<Var>* head_bias = nullptr,
            bool causal = false) {
    std::size_t d_attn = wq.out_dim();
    std::size_t dh = d_attn / n_heads;
    double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Var q = wq.apply(t, q_in);
    Var k = wk.apply(t, kv_in);
    Var v = wv.apply(t, kv_in);
    last_attn.clear();
    std::vector<Var> heads;
    heads.reserve(n_heads);
    for (std::size_t h = 0; h < n_heads; ++h) {
      Var qh = t.slice_cols(q, h * dh, (h + 1) * dh);
      Var kh = t.slice_cols(k, h * dh, (h + 1) * dh);
      Var vh = t.slice_cols(v, h * dh, (h + 1) * dh);
      Var logits = t.scale(t.matmul(qh, t.transpose(kh)), inv_scale);
      if (head_bias) logits = t.add(logits, (*head_bias)[h]);
      if (causal) logits = t.causal_mask(logits);
      Var attn = t.softmax_rows(logits);
      last_attn.push_back(attn);
      heads.push_back(t.matmul(attn, vh));
    }
    return wo.apply(t, t.concat_cols(heads));
  }

  void params(std::vector<Parameter*>& out) {
    wq.params(out);
    wk.params(out);
    wv.params(out);
    wo.params(out);
  }
};

// Standard transformer sinusoid table: row t, pair j uses period
// 10000^(2j/d). Used for absolute positions in the audio encoder and LM.
inline Matrix sinusoid_positions(std::size_t n, std::size_t d) {
  Matrix out(n, d);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t j = 0; 2 * j < d; ++j) {
      double freq = std::pow(10000.0, -2.0 * static_cast<double>(j) / static_cast<double>(d));
      double x = static_cast<double>(t) * freq;
      out(t, 2 * j) = std::sin(x);
      if (2 * j + 1 < d) out(t, 2 * j + 1) = std::cos(x);
    }
  }
  return out;
}

// Adam with bias correction. State is keyed by Parameter address, so one
// optimizer instance must outlive the training loop it drives.
class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.98, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<Parameter*>& params, double lr) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (Parameter* p : params) {
      if (p->frozen) continue;
      p->ensure_grad();
      State& s = state_[p];
      if (!s.m.same_shape(p->value)) {
        s.m = Matrix(p->value.rows(), p->value.cols());
        s.v = Matrix(p->value.rows(), p->value.cols());
      }
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        double g = p->grad.raw()[i];
        s.m.raw()[i] = beta1_ * s.m.raw()[i] + (1.0 - beta1_) * g;
        s.v.raw()[i] = beta2_ * s.v.raw()[i] + (1.0 - beta2_) * g * g;
        double mhat = s.m.raw()[i] / bc1;
        double vhat = s.v.raw()[i] / bc2;
        p->value.raw()[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  struct State {
    Matrix m, v;
  };
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::unordered_map<Parameter*, State> state_;
};

inline void zero_grads(const std::vector<Parameter*>& params) {
  for (Parameter* p : params) p->zero_grad();
}

}  // namespace uasr
