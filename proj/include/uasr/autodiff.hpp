// Reverse-mode automatic differentiation over Matrix values.
//
// A Tape owns a flat list of nodes created in topological order; Var is an
// index into that list. Ops append a node holding the forward value and a
// closure that scatters the node's gradient back to its parents. Parameters
// are bound once per tape (repeated uses share one leaf) and receive their
// accumulated gradient at the end of backward() unless frozen. Gradients
// still flow *through* frozen leaves, which is what lets trainable modules
// sit upstream of a frozen encoder block.
#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <unordered_map>
#include <vector>

#include "uasr/matrix.hpp"

namespace uasr {

// A named, persistent weight. Modules own Parameters; tapes borrow them.
struct Parameter {
  std::string name;
  std::string stage;  // "sfm", "visual_encoder", "lm_base", "injection", ...
  bool frozen = false;
  Matrix value;
  Matrix grad;  // same shape as value once touched by an optimizer/backward

  void ensure_grad() {
    if (!grad.same_shape(value)) grad = Matrix(value.rows(), value.cols());
  }
  void zero_grad() {
    ensure_grad();
    std::fill(grad.raw().begin(), grad.raw().end(), 0.0);
  }
};

struct Var {
  int idx = -1;
  bool valid() const { return idx >= 0; }
};

class Tape {
 public:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    bool grad_alloc = false;
    Parameter* param = nullptr;
    std::function<void(Tape&)> back;
  };

  const Matrix& val(Var v) const { return nodes_[v.idx].value; }

  Matrix& grad(Var v) {
    Node& n = nodes_[v.idx];
    if (!n.grad_alloc) {
      n.grad = Matrix(n.value.rows(), n.value.cols());
      n.grad_alloc = true;
    }
    return n.grad;
  }

  bool needs_grad(Var v) const { return nodes_[v.idx].needs_grad; }

  // Leaf with no gradient (data, masks, fixed tables).
  Var constant(Matrix v) { return push(std::move(v), false, nullptr, {}); }

  // Leaf that wants a gradient despite not being a Parameter (used by
  // gradient checks on inputs).
  Var input(Matrix v) { return push(std::move(v), true, nullptr, {}); }

  // Parameter leaf; memoized so every use in one graph shares the node.
  Var param(Parameter& p) {
    auto it = param_vars_.find(&p);
    if (it != param_vars_.end()) return it->second;
    Var v = push(p.value, !p.frozen, &p, {});
    param_vars_[&p] = v;
    return v;
  }

  // ---- elementwise and linear ops ----

  Var add(Var a, Var b) {
    check_same_shape(val(a), val(b), "tape add");
    Matrix out = uasr::add(val(a), val(b));
    return push(std::move(out), needs_grad(a) || needs_grad(b), nullptr, [a, b](Tape& t) mutable {
      Var self = t.current_;
      if (t.needs_grad(a)) t.grad(a).map() += t.grad(self).map();
      if (t.needs_grad(b)) t.grad(b).map() += t.grad(self).map();
    });
  }

  Var sub(Var a, Var b) {
    check_same_shape(val(a), val(b), "tape sub");
    Matrix out = uasr::sub(val(a), val(b));
    return push(std::move(out), needs_grad(a) || needs_grad(b), nullptr, [a, b](Tape& t) mutable {
      Var self = t.current_;
      if (t.needs_grad(a)) t.grad(a).map() += t.grad(self).map();
      if (t.needs_grad(b)) t.grad(b).map() -= t.grad(self).map();
    });
  }

  Var scale(Var a, double s) {
    Matrix out = uasr::scale(val(a), s);
    return push(std::move(out), needs_grad(a), nullptr, [a, s](Tape& t) mutable {
      Var self = t.current_;
      if (t.needs_grad(a)) t.grad(a).map() += s * t.grad(self).map();
    });
  }

  Var hadamard(Var a, Var b) {
    Matrix out = uasr::hadamard(val(a), val(b));
    return push(std::move(out), needs_grad(a) || needs_grad(b), nullptr, [a, b](Tape& t) mutable {
      Var self = t.current_;
      const Matrix& g = t.grad(self);
      if (t.needs_grad(a)) {
        Matrix& ga = t.grad(a);
        const Matrix& bv = t.val(b);
        for (std::size_t i = 0; i < ga.size(); ++i) ga.raw()[i] += g.raw()[i] * bv.raw()[i];
      }
      if (t.needs_grad(b)) {
        Matrix& gb = t.grad(b);
        const Matrix& av = t.val(a);
        for (std::size_t i = 0; i < gb.size(); ++i) gb.raw()[i] += g.raw()[i] * av.raw()[i];
      }
    });
  }

  Var matmul(Var a, Var b) {
    Matrix out = uasr::matmul(val(a), val(b));
    return push(std::move(out), needs_grad(a) || needs_grad(b), nullptr, [a, b](Tape& t) mutable {
      Var self = t.current_;
      const Matrix& g = t.grad(self);
      if (t.needs_grad(a)) t.grad(a).map().noalias() += g.map() * t.val(b).map().transpose();
      if (t.needs_grad(b)) t.grad(b).map().noalias() += t.val(a).map().transpose() * g.map();
    });
  }

  Var transpose(Var a) {
    Matrix out = uasr::transpose(val(a));
    return push(std::move(out), needs_grad(a), nullptr, [a](Tape& t) mutable {
      Var self = t.current_;
      if (t.needs_grad(a)) t.grad(a).map() += t.grad(self).map().transpose();
    });
  }

  // out[r, :] = a[r, :] + bias[0, :]
  Var add_row_broadcast(Var a, Var bias) {
    const Matrix& av = val(a);
    const Matrix& bv = val(bias);
    if (bv.rows() != 1 || bv.cols() != av.cols())
      throw ShapeError("add_row_broadcast: bias must be [1 x cols]");
    Matrix out = av;
    for (std::size_t r = 0; r < out.rows(); ++r)
      for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += bv(0, c);
    return push(std::move(out), needs_grad(a) || needs_grad(bias), nullptr,
                [a, bias](Tape& t) mutable {
                  Var self = t.current_;
                  const Matrix& g = t.grad(self);
                  if (t.needs_grad(a)) t.grad(a).map() += g.map();
                  if (t.needs_grad(bias)) {
                    Matrix& gb = t.grad(bias);
                    for (std::size_t r = 0; r < g.rows(); ++r)
                      for (std::size_t c = 0; c < g.cols(); ++c) gb(0, c) += g(r, c);
                  }
                });
  }

  // out = s * a, with s a 1x1 var (broadcast scalar, e.g. tanh(gate)).
  Var scalar_mul(Var a, Var s) {
    const Matrix& sv = val(s);
    if (sv.rows() != 1 || sv.cols() != 1) throw ShapeError("scalar_mul: scalar must be 1x1");
    Matrix out = uasr::scale(val(a), sv(0, 0));
    return push(std::move(out), needs_grad(a) || needs_grad(s), nullptr, [a, s](Tape& t) mutable {
      Var self = t.current_;
      const Matrix& g = t.grad(self);
      double sval = t.val(s)(0, 0);
      if (t.needs_grad(a)) t.grad(a).map() += sval * g.map();
      if (t.needs_grad(s)) {
        double acc = 0.0;
        const Matrix& av = t.val(a);
        for (std::size_t i = 0; i < av.size(); ++i) acc += g.raw()[i] * av.raw()[i];
        t.grad(s)(0, 0) += acc;
      }
    });
  }

  Var tanh_op(Var a) {
    Matrix out = val(a);
    for (auto& v : out.raw()) v = std::tanh(v);
    return push(std::move(out), needs_grad(a), nullptr, [a](Tape& t) mutable {
      Var self = t.current_;
      if (!t.needs_grad(a)) return;
      const Matrix& g = t.grad(self);
      const Matrix& y = t.val(self);
      Matrix& ga = t.grad(a);
      for (std::size_t i = 0; i < ga.size(); ++i)
        ga.raw()[i] += g.raw()[i] * (1.0 - y.raw()[i] * y.raw()[i]);
    });
  }

  // Exact GELU: x * Phi(x).
  Var gelu(Var a) {
    Matrix out = val(a);
    for (auto& v : out.raw()) v = v * 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
    return push(std::move(out), needs_grad(a), nullptr, [a](Tape& t) mutable {
      Var self = t.current_;
      if (!t.needs_grad(a)) return;
      const Matrix& g = t.grad(self);
      const Matrix& x = t.val(a);
      Matrix& ga = t.grad(a);
      constexpr double inv_sqrt_2pi = 0.3989422804014327;
      for (std::size_t i = 0; i < ga.size(); ++i) {
        double xv = x.raw()[i];
        double phi_cdf = 0.5 * (1.0 + std::erf(xv * M_SQRT1_2));
        double phi_pdf = inv_sqrt_2pi * std::exp(-0.5 * xv * xv);
        ga.raw()[i] += g.raw()[i] * (phi_cdf + xv * phi_pdf);
      }
    });
  }

  // Row-wise softmax. -inf logits are supported and give exact zeros.
  Var softmax_rows(Var a) {
    Matrix out = val(a);
    for (std::size_t r = 0; r < out.rows(); ++r) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < out.cols(); ++c) mx = std::max(mx, out(r, c));
      double denom = 0.0;
      for (std::size_t c = 0; c < out.cols(); ++c) {
        double e = std::exp(out(r, c) - mx);
        out(r, c) = e;
        denom += e;
      }
      for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) /= denom;
    }
    return push(std::move(out), needs_grad(a), nullptr, [a](Tape& t) mutable {
      Var self = t.current_;
      if (!t.needs_grad(a)) return;
      const Matrix& g = t.grad(self);
      const Matrix& y = t.val(self);
      Matrix& ga = t.grad(a);
      for (std::size_t r = 0; r < y.rows(); ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < y.cols(); ++c) dot += g(r, c) * y(r, c);
        for (std::size_t c = 0; c < y.cols(); ++c) ga(r, c) += y(r, c) * (g(r, c) - dot);
      }
    });
  }

  // Entries with col > row are set to -inf (causal attention mask on a
  // square logit matrix). Gradient does not flow through masked entries.
  Var causal_mask(Var a) {
    Matrix out = val(a);
    const double ninf = -std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < out.rows(); ++r)
      for (std::size_t c = r + 1; c < out.cols(); ++c) out(r, c) = ninf;
    return push(std::move(out), needs_grad(a), nullptr, [a](Tape& t) mutable {
      Var self = t.current_;
      if (!t.needs_grad(a)) return;
      const Matrix& g = t.grad(self);
      Matrix& ga = t.grad(a);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c <= r && c < g.cols(); ++c) ga(r, c) += g(r, c);
    });
  }

  // Per-row layer normalization with affine gamma/beta rows [1 x C].
  Var layer_norm(Var a, Var gamma, Var beta, double eps = 1e-5) {
    const Matrix& x = val(a);
    std::size_t R = x.rows(), C = x.cols();
    Matrix out(R, C);
    for (std::size_t r = 0; r < R; ++r) {
      double mean = 0.0;
      for (std::size_t c = 0; c < C; ++c) mean += x(r, c);
      mean /= static_cast<double>(C);
      double var = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        double d = x(r, c) - mean;
        var += d * d;
      }
      var /= static_cast<double>(C);
      double inv = 1.0 / std::sqrt(var + eps);
      for (std::size_t c = 0; c < C; ++c)
        out(r, c) = (x(r, c) - mean) * inv * val(gamma)(0, c) + val(beta)(0, c);
    }
    bool ng = needs_grad(a) || needs_grad(gamma) || needs_grad(beta);
    return push(std::move(out), ng, nullptr, [a, gamma, beta, eps](Tape& t) mutable {
      Var self = t.current_;
      const Matrix& g = t.grad(self);
      const Matrix& x = t.val(a);
      const Matrix& gm = t.val(gamma);
      std::size_t R = x.rows(), C = x.cols();
      for (std::size_t r = 0; r < R; ++r) {
        double mean = 0.0;
        for (std::size_t c = 0; c < C; ++c) mean += x(r, c);
        mean /= static_cast<double>(C);
        double var = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
          double d = x(r, c) - mean;
          var += d * d;
        }
        var /= static_cast<double>(C);
        double inv = 1.0 / std::sqrt(var + eps);
        // xhat and the two reduction terms of the standard LN backward.
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        std::vector<double> xhat(C), dxhat(C);
        for (std::size_t c = 0; c < C; ++c) {
          xhat[c] = (x(r, c) - mean) * inv;
          dxhat[c] = g(r, c) * gm(0, c);
          sum_dxhat += dxhat[c];
          sum_dxhat_xhat += dxhat[c] * xhat[c];
        }
        if (t.needs_grad(a)) {
          Matrix& ga = t.grad(a);
          double n = static_cast<double>(C);
          for (std::size_t c = 0; c < C; ++c)
            ga(r, c) += inv * (dxhat[c] - sum_dxhat / n - xhat[c] * sum_dxhat_xhat / n);
        }
        if (t.needs_grad(gamma)) {
          Matrix& gg = t.grad(gamma);
          for (std::size_t c = 0; c < C; ++c) gg(0, c) += g(r, c) * xhat[c];
        }
        if (t.needs_grad(beta)) {
          Matrix& gb = t.grad(beta);
          for (std::size_t c = 0; c < C; ++c) gb(0, c) += g(r, c);
        }
      }
    });
  }

  Var mean_all(Var a) {
    const Matrix& x = val(a);
    if (x.empty()) throw ShapeError("mean_all: empty input");
    double s = 0.0;
    for (double v : x.raw()) s += v;
    Matrix out(1, 1);
    out(0, 0) = s / static_cast<double>(x.size());
    return push(std::move(out), needs_grad(a), nullptr, [a](Tape& t) mutable {
      Var self = t.current_;
      if (!t.needs_grad(a)) return;
      Matrix& ga = t.grad(a);
      double g = t.grad(self)(0, 0) / static_cast<double>(ga.size());
      for (auto& v : ga.raw()) v += g;
    });
  }

  Var slice_cols(Var a, std::size_t c0, std::size_t c1) {
    const Matrix& x = val(a);
    if (c1 > x.cols() || c0 >= c1) throw ShapeError("slice_cols: bad range");
    Matrix out(x.rows(), c1 - c0);
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t c = c0; c < c1; ++c) out(r, c - c0) = x(r, c);
    return push(std::move(out), needs_grad(a), nullptr, [a, c0, c1](Tape& t) mutable {
      Var self = t.current_;
      if (!t.needs_grad(a)) return;
      const Matrix& g = t.grad(self);
      Matrix& ga = t.grad(a);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = c0; c < c1; ++c) ga(r, c) += g(r, c - c0);
    });
  }

  Var slice_rows(Var a, std::size_t r0, std::size_t r1) {
    const Matrix& x = val(a);
    if (r1 > x.rows() || r0 >= r1) throw ShapeError("slice_rows: bad range");
    Matrix out(r1 - r0, x.cols());
    for (std::size_t r = r0; r < r1; ++r)
      for (std::size_t c = 0; c < x.cols(); ++c) out(r - r0, c) = x(r, c);
    return push(std::move(out), needs_grad(a), nullptr, [a, r0, r1](Tape& t) mutable {
      Var self = t.current_;
      if (!t.needs_grad(a)) return;
      const Matrix& g = t.grad(self);
      Matrix& ga = t.grad(a);
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) ga(r, c) += g(r - r0, c);
    });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty");
    std::size_t R = val(parts[0]).rows(), C = 0;
    bool ng = false;
    for (Var p : parts) {
      if (val(p).rows() != R) throw ShapeError("concat_cols: row mismatch");
      C += val(p).cols();
      ng = ng || needs_grad(p);
    }
    Matrix out(R, C);
    std::size_t off = 0;
    for (Var p : parts) {
      const Matrix& x = val(p);
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) out(r, off + c) = x(r, c);
      off += x.cols();
    }
    return push(std::move(out), ng, nullptr, [parts](Tape& t) mutable {
      Var self = t.current_;
      const Matrix& g = t.grad(self);
      std::size_t off = 0;
      for (Var p : parts) {
        std::size_t w = t.val(p).cols();
        if (t.needs_grad(p)) {
          Matrix& gp = t.grad(p);
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < w; ++c) gp(r, c) += g(r, off + c);
        }
        off += w;
      }
    });
  }

  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty");
    std::size_t C = val(parts[0]).cols(), R = 0;
    bool ng = false;
    for (Var p : parts) {
      if (val(p).cols() != C) throw ShapeError("concat_rows: col mismatch");
      R += val(p).rows();
      ng = ng || needs_grad(p);
    }
    Matrix out(R, C);
    std::size_t off = 0;
    for (Var p : parts) {
      const Matrix& x = val(p);
      for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < C; ++c) out(off + r, c) = x(r, c);
      off += x.rows();
    }
    return push(std::move(out), ng, nullptr, [parts](Tape& t) mutable {
      Var self = t.current_;
      const Matrix& g = t.grad(self);
      std::size_t off = 0;
      for (Var p : parts) {
        std::size_t h = t.val(p).rows();
        if (t.needs_grad(p)) {
          Matrix& gp = t.grad(p);
          for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < g.cols(); ++c) gp(r, c) += g(off + r, c);
        }
        off += h;
      }
    });
  }

  Var reshape(Var a, std::size_t r, std::size_t c) {
    const Matrix& x = val(a);
    if (r * c != x.size()) throw ShapeError("reshape: element count mismatch");
    Matrix out(r, c);
    out.raw() = x.raw();
    return push(std::move(out), needs_grad(a), nullptr, [a](Tape& t) mutable {
      Var self = t.current_;
      if (!t.needs_grad(a)) return;
      const Matrix& g = t.grad(self);
      Matrix& ga = t.grad(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga.raw()[i] += g.raw()[i];
    });
  }

  // Rows of an embedding table selected by token id (backward scatter-adds).
  Var gather_rows(Var table, const std::vector<int>& ids) {
    const Matrix& x = val(table);
    Matrix out(ids.size(), x.cols());
    for (std::size_t r = 0; r < ids.size(); ++r) {
      if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= x.rows())
        throw ShapeError("gather_rows: id out of range");
      for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = x(ids[r], c);
    }
    return push(std::move(out), needs_grad(table), nullptr, [table, ids](Tape& t) mutable {
      Var self = t.current_;
      if (!t.needs_grad(table)) return;
      const Matrix& g = t.grad(self);
      Matrix& gt = t.grad(table);
      for (std::size_t r = 0; r < ids.size(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gt(ids[r], c) += g(r, c);
    });
  }

  // ---- backward driver ----

  // Seeds d(root)/d(root) = 1 and sweeps the tape in reverse. root must be
  // a 1x1 scalar. Parameter gradients are accumulated into Parameter::grad.
  void backward(Var root) {
    Node& rn = nodes_[root.idx];
    if (rn.value.rows() != 1 || rn.value.cols() != 1)
      throw ShapeError("backward: root must be scalar (1x1)");
    grad(root)(0, 0) += 1.0;
    for (int i = root.idx; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.needs_grad || !n.grad_alloc || !n.back) continue;
      current_ = Var{i};
      n.back(*this);
    }
    for (auto& [p, v] : param_vars_) {
      Node& n = nodes_[v.idx];
      if (!p->frozen && n.grad_alloc) {
        p->ensure_grad();
        p->grad.map() += n.grad.map();
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  Var push(Matrix value, bool needs, Parameter* p, std::function<void(Tape&)> back) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs;
    n.param = p;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
  std::unordered_map<Parameter*, Var> param_vars_;
  Var current_;

  friend struct TapeOpAccess;
};

// Grants fused ops (defined in other headers) access to Tape::push via a
// tiny shim, keeping the Node layout private.
struct TapeOpAccess {
  static Var push(Tape& t, Matrix value, bool needs, std::function<void(Tape&)> back) {
    return t.push(std::move(value), needs, nullptr, std::move(back));
  }
  static Var current(Tape& t) { return t.current_; }
};

}  // namespace uasr
