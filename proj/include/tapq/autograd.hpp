#pragma once

// Minimal reverse-mode autodiff over dense row-major matrices.
//
// A Tape records every operation of one forward pass. Values live in the tape;
// parameters are referenced, not copied, and receive their gradients in
// Parameter::grad when Tape::backward runs. Everything is templated on the
// scalar so the same model can train in float and be gradient-checked in double.

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "tapq/error.hpp"

namespace tapq::ag {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
struct Parameter {
  std::string name;
  Mat<S> value;
  Mat<S> grad;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Owns parameters at stable addresses, in registration order.
template <typename S>
class ParamStore {
 public:
  Parameter<S>& add(std::string name, Eigen::Index rows, Eigen::Index cols) {
    for (const auto& p : params_) {
      if (p.name == name) throw ConfigError("duplicate parameter name " + name);
    }
    auto& p = params_.emplace_back();
    p.name = std::move(name);
    p.value.setZero(rows, cols);
    p.grad.setZero(rows, cols);
    return p;
  }

  Parameter<S>* find(const std::string& name) {
    for (auto& p : params_) {
      if (p.name == name) return &p;
    }
    return nullptr;
  }

  std::deque<Parameter<S>>& all() { return params_; }
  const std::deque<Parameter<S>>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::deque<Parameter<S>> params_;
};

struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

template <typename S>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Mat<S>& out_grad)>;

  Var constant(Mat<S> value) { return push(std::move(value), false, nullptr); }

  /// A free input that accumulates its own gradient (used for probes).
  Var leaf(Mat<S> value) { return push(std::move(value), true, nullptr); }

  Var param(Parameter<S>& p) {
    Node n;
    n.external = &p.value;
    n.needs_grad = true;
    n.param = &p;
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  Var push(Mat<S> value, bool needs_grad, Backward backward) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  const Mat<S>& value(Var v) const {
    const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
    return n.external ? *n.external : n.value;
  }

  bool needs_grad(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).needs_grad; }

  bool needs_grad(std::initializer_list<Var> vs) const {
    for (Var v : vs) {
      if (needs_grad(v)) return true;
    }
    return false;
  }

  /// Gradient buffer of `v`, allocated (zeroed) on first access.
  Mat<S>& grad(Var v) {
    Node& n = nodes_.at(static_cast<std::size_t>(v.id));
    if (n.grad.size() == 0) {
      const Mat<S>& val = n.external ? *n.external : n.value;
      n.grad.setZero(val.rows(), val.cols());
    }
    return n.grad;
  }

  bool has_grad(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).grad.size() != 0; }

  /// Seeds d(root)/d(root) = 1 for a 1x1 root and propagates to every leaf.
  /// Parameter gradients are added into Parameter::grad.
  void backward(Var root) {
    if (value(root).size() != 1) throw ValidationError("backward: root must be a scalar");
    grad(root).setOnes();
    for (std::int32_t i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.grad.size() == 0 || !n.needs_grad) continue;
      if (n.backward) {
        // The closure may allocate other nodes' grads, which never moves n.grad.
        n.backward(*this, n.grad);
      } else if (n.param) {
        n.param->grad += n.grad;
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat<S> value;
    const Mat<S>* external = nullptr;
    Mat<S> grad;
    bool needs_grad = false;
    Parameter<S>* param = nullptr;
    Backward backward;
  };
  std::deque<Node> nodes_;
};

namespace detail {
template <typename S>
void check_same_shape(const Mat<S>& a, const Mat<S>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ValidationError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                          std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                          std::to_string(b.cols()) + ")");
  }
}
}  // namespace detail

template <typename S>
Var matmul(Tape<S>& t, Var a, Var b) {
  const Mat<S>& av = t.value(a);
  const Mat<S>& bv = t.value(b);
  if (av.cols() != bv.rows()) throw ValidationError("matmul: inner dimensions differ");
  Mat<S> out = av * bv;
  return t.push(std::move(out), t.needs_grad({a, b}), [a, b](Tape<S>& t, const Mat<S>& g) {
    if (t.needs_grad(a)) t.grad(a).noalias() += g * t.value(b).transpose();
    if (t.needs_grad(b)) t.grad(b).noalias() += t.value(a).transpose() * g;
  });
}

template <typename S>
Var add(Tape<S>& t, Var a, Var b) {
  detail::check_same_shape(t.value(a), t.value(b), "add");
  Mat<S> out = t.value(a) + t.value(b);
  return t.push(std::move(out), t.needs_grad({a, b}), [a, b](Tape<S>& t, const Mat<S>& g) {
    if (t.needs_grad(a)) t.grad(a) += g;
    if (t.needs_grad(b)) t.grad(b) += g;
  });
}

/// x + broadcast(bias) where bias is 1 x cols.
template <typename S>
Var add_row(Tape<S>& t, Var x, Var bias) {
  const Mat<S>& xv = t.value(x);
  const Mat<S>& bv = t.value(bias);
  if (bv.rows() != 1 || bv.cols() != xv.cols()) throw ValidationError("add_row: bias shape mismatch");
  Mat<S> out = xv.rowwise() + bv.row(0);
  return t.push(std::move(out), t.needs_grad({x, bias}), [x, bias](Tape<S>& t, const Mat<S>& g) {
    if (t.needs_grad(x)) t.grad(x) += g;
    if (t.needs_grad(bias)) t.grad(bias) += g.colwise().sum();
  });
}

template <typename S>
Var scale(Tape<S>& t, Var x, S factor) {
  Mat<S> out = t.value(x) * factor;
  return t.push(std::move(out), t.needs_grad(x), [x, factor](Tape<S>& t, const Mat<S>& g) {
    t.grad(x) += g * factor;
  });
}

/// Sum of all entries as a 1x1.
template <typename S>
Var sum_all(Tape<S>& t, Var x) {
  Mat<S> out(1, 1);
  out(0, 0) = t.value(x).sum();
  return t.push(std::move(out), t.needs_grad(x), [x](Tape<S>& t, const Mat<S>& g) {
    t.grad(x).array() += g(0, 0);
  });
}

/// Σ weight_i · x_i over 1x1 inputs.
template <typename S>
Var weighted_sum(Tape<S>& t, std::vector<std::pair<Var, S>> terms) {
  Mat<S> out = Mat<S>::Zero(1, 1);
  bool any = false;
  for (const auto& [v, w] : terms) {
    if (t.value(v).size() != 1) throw ValidationError("weighted_sum: inputs must be scalars");
    out(0, 0) += w * t.value(v)(0, 0);
    any = any || t.needs_grad(v);
  }
  return t.push(std::move(out), any, [terms = std::move(terms)](Tape<S>& t, const Mat<S>& g) {
    for (const auto& [v, w] : terms) {
      if (t.needs_grad(v)) t.grad(v)(0, 0) += w * g(0, 0);
    }
  });
}

/// tanh-approximated GELU.
template <typename S>
Var gelu(Tape<S>& t, Var x) {
  const S c = static_cast<S>(0.7978845608028654);  // sqrt(2/pi)
  const S a = static_cast<S>(0.044715);
  const Mat<S>& xv = t.value(x);
  auto th = std::make_shared<Mat<S>>(((xv.array() + a * xv.array().cube()) * c).tanh().matrix());
  Mat<S> out = (S(0.5) * xv.array() * (S(1) + th->array())).matrix();
  return t.push(std::move(out), t.needs_grad(x), [x, th, c, a](Tape<S>& t, const Mat<S>& g) {
    const auto xa = t.value(x).array();
    const auto ta = th->array();
    auto d = S(0.5) * (S(1) + ta) + S(0.5) * xa * (S(1) - ta.square()) * c * (S(1) + S(3) * a * xa.square());
    t.grad(x).array() += g.array() * d;
  });
}

/// Row-wise layer normalization with per-column gain and bias (both 1 x cols).
template <typename S>
Var layer_norm(Tape<S>& t, Var x, Var gain, Var bias, S eps = S(1e-5)) {
  const Mat<S>& xv = t.value(x);
  const Eigen::Index n = xv.rows();
  const Eigen::Index d = xv.cols();
  auto xhat = std::make_shared<Mat<S>>(n, d);
  auto inv_std = std::make_shared<std::vector<S>>(static_cast<std::size_t>(n));
  for (Eigen::Index r = 0; r < n; ++r) {
    const S mean = xv.row(r).mean();
    const S var = (xv.row(r).array() - mean).square().mean();
    const S is = S(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(r)] = is;
    xhat->row(r) = (xv.row(r).array() - mean) * is;
  }
  const Mat<S>& gv = t.value(gain);
  const Mat<S>& bv = t.value(bias);
  Mat<S> out = (xhat->array().rowwise() * gv.row(0).array()).rowwise() + bv.row(0).array();
  return t.push(std::move(out), t.needs_grad({x, gain, bias}),
                [x, gain, bias, xhat, inv_std](Tape<S>& t, const Mat<S>& g) {
                  if (t.needs_grad(gain)) t.grad(gain) += (g.array() * xhat->array()).colwise().sum().matrix();
                  if (t.needs_grad(bias)) t.grad(bias) += g.colwise().sum();
                  if (!t.needs_grad(x)) return;
                  const auto gv = t.value(gain).row(0).array();
                  Mat<S>& gx = t.grad(x);
                  for (Eigen::Index r = 0; r < g.rows(); ++r) {
                    Eigen::Array<S, 1, Eigen::Dynamic> dxhat = g.row(r).array() * gv;
                    const S m1 = dxhat.mean();
                    const S m2 = (dxhat * xhat->row(r).array()).mean();
                    gx.row(r).array() +=
                        (*inv_std)[static_cast<std::size_t>(r)] * (dxhat - m1 - xhat->row(r).array() * m2);
                  }
                });
}

/// out[i] = x[idx[i]]; the backward pass scatter-adds.
template <typename S>
Var gather_rows(Tape<S>& t, Var x, std::vector<std::int32_t> idx) {
  const Mat<S>& xv = t.value(x);
  Mat<S> out(static_cast<Eigen::Index>(idx.size()), xv.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= xv.rows()) throw ValidationError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = xv.row(idx[i]);
  }
  return t.push(std::move(out), t.needs_grad(x), [x, idx = std::move(idx)](Tape<S>& t, const Mat<S>& g) {
    Mat<S>& gx = t.grad(x);
    for (std::size_t i = 0; i < idx.size(); ++i) gx.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

template <typename S>
Var concat_rows(Tape<S>& t, std::vector<Var> parts) {
  if (parts.empty()) throw ValidationError("concat_rows: no inputs");
  Eigen::Index rows = 0;
  const Eigen::Index cols = t.value(parts.front()).cols();
  bool any = false;
  for (Var p : parts) {
    if (t.value(p).cols() != cols) throw ValidationError("concat_rows: column mismatch");
    rows += t.value(p).rows();
    any = any || t.needs_grad(p);
  }
  Mat<S> out(rows, cols);
  Eigen::Index r = 0;
  for (Var p : parts) {
    out.middleRows(r, t.value(p).rows()) = t.value(p);
    r += t.value(p).rows();
  }
  return t.push(std::move(out), any, [parts = std::move(parts)](Tape<S>& t, const Mat<S>& g) {
    Eigen::Index r = 0;
    for (Var p : parts) {
      const Eigen::Index n = t.value(p).rows();
      if (t.needs_grad(p)) t.grad(p) += g.middleRows(r, n);
      r += n;
    }
  });
}

/// Layout of a batched attention call: queries are [batch * q_len, width],
/// keys and values [batch * kv_len, width]; width splits into `heads` heads.
/// mask has batch * q_len * kv_len entries, nonzero = may attend. Rows with no
/// admissible key produce zeros.
struct AttentionShape {
  std::size_t batch = 1;
  std::size_t q_len = 0;
  std::size_t kv_len = 0;
  std::size_t heads = 1;
};

template <typename S>
Var attention(Tape<S>& t, Var q, Var k, Var v, const AttentionShape& shape,
              std::shared_ptr<const std::vector<std::uint8_t>> mask) {
  const Mat<S>& qv = t.value(q);
  const Mat<S>& kv = t.value(k);
  const Mat<S>& vv = t.value(v);
  const auto B = static_cast<Eigen::Index>(shape.batch);
  const auto n = static_cast<Eigen::Index>(shape.q_len);
  const auto m = static_cast<Eigen::Index>(shape.kv_len);
  const auto H = static_cast<Eigen::Index>(shape.heads);
  const Eigen::Index width = qv.cols();
  if (qv.rows() != B * n || kv.rows() != B * m || vv.rows() != B * m || kv.cols() != width ||
      vv.cols() != width || width % H != 0 ||
      mask->size() != static_cast<std::size_t>(B * n * m)) {
    throw ValidationError("attention: inconsistent shapes");
  }
  const Eigen::Index dh = width / H;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));

  auto probs = std::make_shared<std::vector<Mat<S>>>(static_cast<std::size_t>(B * H));
  Mat<S> out = Mat<S>::Zero(B * n, width);
  for (Eigen::Index b = 0; b < B; ++b) {
    const std::uint8_t* mb = mask->data() + b * n * m;
    for (Eigen::Index h = 0; h < H; ++h) {
      Mat<S> s = (qv.block(b * n, h * dh, n, dh) * kv.block(b * m, h * dh, m, dh).transpose()) * scale;
      for (Eigen::Index i = 0; i < n; ++i) {
        S mx = -std::numeric_limits<S>::infinity();
        for (Eigen::Index j = 0; j < m; ++j) {
          if (mb[i * m + j]) mx = std::max(mx, s(i, j));
        }
        if (mx == -std::numeric_limits<S>::infinity()) {
          s.row(i).setZero();
          continue;
        }
        S denom = 0;
        for (Eigen::Index j = 0; j < m; ++j) {
          const S e = mb[i * m + j] ? std::exp(s(i, j) - mx) : S(0);
          s(i, j) = e;
          denom += e;
        }
        s.row(i) /= denom;
      }
      out.block(b * n, h * dh, n, dh).noalias() = s * vv.block(b * m, h * dh, m, dh);
      (*probs)[static_cast<std::size_t>(b * H + h)] = std::move(s);
    }
  }
  return t.push(std::move(out), t.needs_grad({q, k, v}),
                [q, k, v, B, n, m, H, dh, scale, probs](Tape<S>& t, const Mat<S>& g) {
                  const Mat<S>& qv = t.value(q);
                  const Mat<S>& kv = t.value(k);
                  const Mat<S>& vv = t.value(v);
                  const bool gq = t.needs_grad(q);
                  const bool gk = t.needs_grad(k);
                  const bool gv = t.needs_grad(v);
                  for (Eigen::Index b = 0; b < B; ++b) {
                    for (Eigen::Index h = 0; h < H; ++h) {
                      const Mat<S>& p = (*probs)[static_cast<std::size_t>(b * H + h)];
                      const auto go = g.block(b * n, h * dh, n, dh);
                      if (gv) t.grad(v).block(b * m, h * dh, m, dh).noalias() += p.transpose() * go;
                      if (!gq && !gk) continue;
                      Mat<S> dp = go * vv.block(b * m, h * dh, m, dh).transpose();
                      // softmax backward: ds = p * (dp - rowsum(dp * p))
                      Eigen::Matrix<S, Eigen::Dynamic, 1> rs = (dp.array() * p.array()).rowwise().sum();
                      Mat<S> ds = (p.array() * (dp.array().colwise() - rs.array())).matrix() * scale;
                      if (gq) t.grad(q).block(b * n, h * dh, n, dh).noalias() += ds * kv.block(b * m, h * dh, m, dh);
                      if (gk) t.grad(k).block(b * m, h * dh, m, dh).noalias() += ds.transpose() * qv.block(b * n, h * dh, n, dh);
                    }
                  }
                });
}

/// Each row divided by its L2 norm.
template <typename S>
Var l2_normalize_rows(Tape<S>& t, Var x, S eps = S(1e-12)) {
  const Mat<S>& xv = t.value(x);
  auto norms = std::make_shared<Eigen::Matrix<S, Eigen::Dynamic, 1>>(xv.rowwise().norm());
  norms->array() = norms->array().max(eps);
  Mat<S> out = xv.array().colwise() / norms->array();
  auto y = std::make_shared<Mat<S>>(out);
  return t.push(std::move(out), t.needs_grad(x), [x, norms, y](Tape<S>& t, const Mat<S>& g) {
    // d/dx (x/|x|) applied to g: (g - y (y.g)) / |x|
    Eigen::Matrix<S, Eigen::Dynamic, 1> dot = (g.array() * y->array()).rowwise().sum();
    t.grad(x).array() += (g.array() - y->array().colwise() * dot.array()).colwise() / norms->array();
  });
}

/// S[i][j] = max_k <zq[i*K + k], zt[j]>, zq is [B*K, c], zt is [B', c].
template <typename S>
Var max_similarity(Tape<S>& t, Var zq, Var zt, std::size_t queries_per_row) {
  const Mat<S>& qv = t.value(zq);
  const Mat<S>& tv = t.value(zt);
  const auto K = static_cast<Eigen::Index>(queries_per_row);
  if (K == 0 || qv.rows() % K != 0 || qv.cols() != tv.cols()) {
    throw ValidationError("max_similarity: inconsistent shapes");
  }
  const Eigen::Index B = qv.rows() / K;
  const Eigen::Index Bt = tv.rows();
  Mat<S> all = qv * tv.transpose();  // [B*K, Bt]
  Mat<S> out(B, Bt);
  auto arg = std::make_shared<std::vector<Eigen::Index>>(static_cast<std::size_t>(B * Bt));
  for (Eigen::Index i = 0; i < B; ++i) {
    for (Eigen::Index j = 0; j < Bt; ++j) {
      Eigen::Index best = 0;
      for (Eigen::Index k = 1; k < K; ++k) {
        if (all(i * K + k, j) > all(i * K + best, j)) best = k;
      }
      out(i, j) = all(i * K + best, j);
      (*arg)[static_cast<std::size_t>(i * Bt + j)] = i * K + best;
    }
  }
  return t.push(std::move(out), t.needs_grad({zq, zt}), [zq, zt, arg, B, Bt](Tape<S>& t, const Mat<S>& g) {
    const Mat<S>& qv = t.value(zq);
    const Mat<S>& tv = t.value(zt);
    for (Eigen::Index i = 0; i < B; ++i) {
      for (Eigen::Index j = 0; j < Bt; ++j) {
        const Eigen::Index r = (*arg)[static_cast<std::size_t>(i * Bt + j)];
        if (t.needs_grad(zq)) t.grad(zq).row(r) += g(i, j) * tv.row(j);
        if (t.needs_grad(zt)) t.grad(zt).row(j) += g(i, j) * qv.row(r);
      }
    }
  });
}

/// Mean over consecutive groups of `group` rows: [B*group, c] -> [B, c].
template <typename S>
Var group_mean(Tape<S>& t, Var x, std::size_t group) {
  const Mat<S>& xv = t.value(x);
  const auto G = static_cast<Eigen::Index>(group);
  if (G == 0 || xv.rows() % G != 0) throw ValidationError("group_mean: rows not divisible by group");
  const Eigen::Index B = xv.rows() / G;
  Mat<S> out(B, xv.cols());
  for (Eigen::Index b = 0; b < B; ++b) out.row(b) = xv.middleRows(b * G, G).colwise().mean();
  return t.push(std::move(out), t.needs_grad(x), [x, G, B](Tape<S>& t, const Mat<S>& g) {
    Mat<S>& gx = t.grad(x);
    for (Eigen::Index b = 0; b < B; ++b) gx.middleRows(b * G, G).rowwise() += g.row(b) / static_cast<S>(G);
  });
}

/// Mean token cross-entropy of softmax(logits) against `labels`; label < 0 is ignored.
template <typename S>
Var cross_entropy(Tape<S>& t, Var logits, std::vector<std::int32_t> labels) {
  const Mat<S>& lv = t.value(logits);
  if (static_cast<std::size_t>(lv.rows()) != labels.size()) throw ValidationError("cross_entropy: label count mismatch");
  std::size_t count = 0;
  S total = 0;
  auto probs = std::make_shared<Mat<S>>(lv.rows(), lv.cols());
  for (Eigen::Index r = 0; r < lv.rows(); ++r) {
    const S mx = lv.row(r).maxCoeff();
    probs->row(r) = (lv.row(r).array() - mx).exp();
    const S z = probs->row(r).sum();
    probs->row(r) /= z;
    const std::int32_t y = labels[static_cast<std::size_t>(r)];
    if (y < 0) continue;
    if (y >= lv.cols()) throw ValidationError("cross_entropy: label out of range");
    total += (mx + std::log(z)) - lv(r, y);
    ++count;
  }
  if (count == 0) throw ValidationError("cross_entropy: no labelled positions");
  Mat<S> out(1, 1);
  out(0, 0) = total / static_cast<S>(count);
  return t.push(std::move(out), t.needs_grad(logits),
                [logits, probs, labels = std::move(labels), count](Tape<S>& t, const Mat<S>& g) {
                  Mat<S>& gl = t.grad(logits);
                  const S f = g(0, 0) / static_cast<S>(count);
                  for (Eigen::Index r = 0; r < gl.rows(); ++r) {
                    const std::int32_t y = labels[static_cast<std::size_t>(r)];
                    if (y < 0) continue;
                    gl.row(r) += f * probs->row(r);
                    gl(r, y) -= f;
                  }
                });
}

struct ContrastiveOptions {
  bool include_positive_in_denominator = false;
  bool symmetric = false;
};

namespace detail {
// Loss and dL/dS for one direction of the query->text contrastive loss on S.
template <typename S>
S contrastive_direction(const Mat<S>& s, S tau, bool include_positive, Mat<S>& dS) {
  const Eigen::Index B = s.rows();
  S loss = 0;
  for (Eigen::Index i = 0; i < B; ++i) {
    S mx = -std::numeric_limits<S>::infinity();
    for (Eigen::Index j = 0; j < B; ++j) {
      if (j != i || include_positive) mx = std::max(mx, s(i, j) / tau);
    }
    S z = 0;
    for (Eigen::Index j = 0; j < B; ++j) {
      if (j != i || include_positive) z += std::exp(s(i, j) / tau - mx);
    }
    loss += -(s(i, i) / tau - (mx + std::log(z)));
    for (Eigen::Index j = 0; j < B; ++j) {
      if (j != i || include_positive) dS(i, j) += std::exp(s(i, j) / tau - mx) / z / (tau * static_cast<S>(B));
    }
    dS(i, i) -= S(1) / (tau * static_cast<S>(B));
  }
  return loss / static_cast<S>(B);
}
}  // namespace detail

/// -(1/B) Σ_i log( exp(S_ii/τ) / Σ_{j≠i} exp(S_ij/τ) ) for a square S.
template <typename S>
Var contrastive_loss(Tape<S>& t, Var sim, S tau, ContrastiveOptions opts = {}) {
  const Mat<S>& sv = t.value(sim);
  if (sv.rows() != sv.cols()) throw ValidationError("contrastive_loss: similarity must be square");
  if (sv.rows() < 2) throw ValidationError("contrastive_loss: needs a batch of at least 2");
  if (!(tau > 0)) throw ConfigError("contrastive_loss: temperature must be positive");
  auto dS = std::make_shared<Mat<S>>(Mat<S>::Zero(sv.rows(), sv.cols()));
  S loss = detail::contrastive_direction<S>(sv, tau, opts.include_positive_in_denominator, *dS);
  if (opts.symmetric) {
    Mat<S> dT = Mat<S>::Zero(sv.rows(), sv.cols());
    loss = (loss + detail::contrastive_direction<S>(sv.transpose(), tau, opts.include_positive_in_denominator, dT)) / S(2);
    *dS = (*dS + dT.transpose()) / S(2);
  }
  Mat<S> out(1, 1);
  out(0, 0) = loss;
  return t.push(std::move(out), t.needs_grad(sim), [sim, dS](Tape<S>& t, const Mat<S>& g) {
    t.grad(sim) += g(0, 0) * *dS;
  });
}

/// Mean binary cross-entropy of sigmoid(logits) for a [B,1] logit column.
template <typename S>
Var bce_with_logits(Tape<S>& t, Var logits, std::vector<std::uint8_t> labels) {
  const Mat<S>& lv = t.value(logits);
  if (lv.cols() != 1 || static_cast<std::size_t>(lv.rows()) != labels.size() || labels.empty()) {
    throw ValidationError("bce_with_logits: expected one logit per label");
  }
  const auto B = static_cast<S>(labels.size());
  S loss = 0;
  for (Eigen::Index i = 0; i < lv.rows(); ++i) {
    const S x = lv(i, 0);
    // log(1 + exp(-|x|)) + max(x, 0) - y x
    loss += std::log1p(std::exp(-std::abs(x))) + std::max(x, S(0)) - (labels[static_cast<std::size_t>(i)] ? x : S(0));
  }
  Mat<S> out(1, 1);
  out(0, 0) = loss / B;
  return t.push(std::move(out), t.needs_grad(logits), [logits, labels = std::move(labels), B](Tape<S>& t, const Mat<S>& g) {
    const Mat<S>& lv = t.value(logits);
    Mat<S>& gl = t.grad(logits);
    for (Eigen::Index i = 0; i < lv.rows(); ++i) {
      const S p = S(1) / (S(1) + std::exp(-lv(i, 0)));
      gl(i, 0) += g(0, 0) * (p - (labels[static_cast<std::size_t>(i)] ? S(1) : S(0))) / B;
    }
  });
}

}  // namespace tapq::ag
