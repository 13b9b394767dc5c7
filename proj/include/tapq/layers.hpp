#pragma once

#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "tapq/autograd.hpp"

namespace tapq::nn {

using ag::Mat;
using ag::Parameter;
using ag::ParamStore;
using ag::Tape;
using ag::Var;

/// Fills `p` with N(0, std^2). Values are drawn in double and cast, so float
/// and double models built from the same seed hold the same numbers.
template <typename S>
void init_normal(Parameter<S>& p, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std);
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<S>(dist(rng));
}

template <typename S>
class Linear {
 public:
  Linear() = default;
  Linear(ParamStore<S>& store, const std::string& name, Eigen::Index in, Eigen::Index out,
         std::mt19937_64& rng)
      : weight_(&store.add(name + ".weight", in, out)), bias_(&store.add(name + ".bias", 1, out)) {
    init_normal(*weight_, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  }

  Var operator()(Tape<S>& t, Var x) const {
    return ag::add_row(t, ag::matmul(t, x, t.param(*weight_)), t.param(*bias_));
  }

  Parameter<S>& weight() const { return *weight_; }
  Parameter<S>& bias() const { return *bias_; }

 private:
  Parameter<S>* weight_ = nullptr;
  Parameter<S>* bias_ = nullptr;
};

template <typename S>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamStore<S>& store, const std::string& name, Eigen::Index width)
      : gain_(&store.add(name + ".gain", 1, width)), bias_(&store.add(name + ".bias", 1, width)) {
    gain_->value.setOnes();
  }

  Var operator()(Tape<S>& t, Var x) const {
    return ag::layer_norm(t, x, t.param(*gain_), t.param(*bias_));
  }

 private:
  Parameter<S>* gain_ = nullptr;
  Parameter<S>* bias_ = nullptr;
};

template <typename S>
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(ParamStore<S>& store, const std::string& name, Eigen::Index width, Eigen::Index mult,
              std::mt19937_64& rng)
      : up_(store, name + ".up", width, width * mult, rng), down_(store, name + ".down", width * mult, width, rng) {}

  Var operator()(Tape<S>& t, Var x) const { return down_(t, ag::gelu(t, up_(t, x))); }

  const Linear<S>& up() const { return up_; }
  const Linear<S>& down() const { return down_; }

 private:
  Linear<S> up_;
  Linear<S> down_;
};

/// Multi-head attention. Queries come from a `width`-wide stream, keys and
/// values from a `kv_width`-wide one; for self-attention both are the same.
template <typename S>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore<S>& store, const std::string& name, Eigen::Index width,
                     Eigen::Index kv_width, std::size_t heads, std::mt19937_64& rng)
      : q_(store, name + ".q", width, width, rng),
        k_(store, name + ".k", kv_width, width, rng),
        v_(store, name + ".v", kv_width, width, rng),
        o_(store, name + ".o", width, width, rng),
        heads_(heads) {
    if (width % static_cast<Eigen::Index>(heads) != 0) {
      throw ConfigError(name + ": width " + std::to_string(width) + " not divisible by " +
                        std::to_string(heads) + " heads");
    }
  }

  Var operator()(Tape<S>& t, Var x_q, Var x_kv, ag::AttentionShape shape,
                 std::shared_ptr<const std::vector<std::uint8_t>> mask) const {
    shape.heads = heads_;
    Var ctx = ag::attention(t, q_(t, x_q), k_(t, x_kv), v_(t, x_kv), shape, std::move(mask));
    return o_(t, ctx);
  }

  const Linear<S>& out_proj() const { return o_; }
  const Linear<S>& query_proj() const { return q_; }

 private:
  Linear<S> q_;
  Linear<S> k_;
  Linear<S> v_;
  Linear<S> o_;
  std::size_t heads_ = 1;
};

}  // namespace tapq::nn
