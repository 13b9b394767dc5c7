#pragma once

// Reference implementations used by the unit and acceptance tests. None of
// these call into the library code they check.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "tapq/autograd.hpp"
#include "tapq/ocrq.hpp"

namespace oracle {

// ---------------------------------------------------------------- masks

/// Rule table: may row r attend to column c over [queries; text]?
inline bool mask_allows(tapq::MaskRegime regime, std::size_t K, std::size_t r, std::size_t c) {
  const bool rq = r < K;
  const bool cq = c < K;
  switch (regime) {
    case tapq::MaskRegime::kMultimodalCausal:
      if (rq) return cq;
      return cq || c <= r;
    case tapq::MaskRegime::kUnimodal:
      return rq == cq;
    case tapq::MaskRegime::kBidirectional:
      return true;
  }
  return false;
}

// ------------------------------------------------------------ span masks

/// Rebuilds the original word list from a noisy sequence by looking each
/// "<extra_id_N>" up in the target by its number.
inline std::vector<std::string> expand(const std::vector<std::string>& noisy,
                                       const std::vector<std::pair<std::size_t, std::string>>& target) {
  static const std::regex sentinel(R"(<extra_id_(\d+)>)");
  std::map<std::size_t, std::string> by_index(target.begin(), target.end());
  std::vector<std::string> out;
  for (const auto& tok : noisy) {
    std::smatch m;
    if (std::regex_match(tok, m, sentinel)) {
      std::istringstream words(by_index.at(std::stoul(m[1].str())));
      for (std::string w; words >> w;) out.push_back(w);
    } else {
      out.push_back(tok);
    }
  }
  return out;
}

// ---------------------------------------------------------------- losses

/// Mean token cross-entropy over labels >= 0, row-major logits [n, V].
inline double cross_entropy(const std::vector<std::vector<double>>& logits, const std::vector<int>& labels) {
  double sum = 0;
  int count = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (labels[i] < 0) continue;
    double mx = logits[i][0];
    for (double z : logits[i]) mx = std::max(mx, z);
    double den = 0;
    for (double z : logits[i]) den += std::exp(z - mx);
    sum += -(logits[i][static_cast<std::size_t>(labels[i])] - mx - std::log(den));
    ++count;
  }
  return sum / count;
}

/// S[i][j] = max_k <zq[i*K + k], zt[j]>.
inline std::vector<std::vector<double>> max_similarity(const std::vector<std::vector<double>>& zq,
                                                       const std::vector<std::vector<double>>& zt, std::size_t K) {
  const std::size_t B = zq.size() / K;
  std::vector<std::vector<double>> s(B, std::vector<double>(zt.size()));
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t j = 0; j < zt.size(); ++j) {
      double best = -INFINITY;
      for (std::size_t k = 0; k < K; ++k) {
        double dot = 0;
        for (std::size_t c = 0; c < zt[j].size(); ++c) dot += zq[i * K + k][c] * zt[j][c];
        best = std::max(best, dot);
      }
      s[i][j] = best;
    }
  }
  return s;
}

/// -(1/B) sum_i log( exp(S_ii/tau) / sum_{j != i} exp(S_ij/tau) ), written out literally.
inline double contrastive(const std::vector<std::vector<double>>& s, double tau) {
  const std::size_t B = s.size();
  double total = 0;
  for (std::size_t i = 0; i < B; ++i) {
    double den = 0;
    for (std::size_t j = 0; j < B; ++j) {
      if (j != i) den += std::exp(s[i][j] / tau);
    }
    total += std::log(std::exp(s[i][i] / tau) / den);
  }
  return -total / static_cast<double>(B);
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// -(1/B) sum_i y log sigma(z) + (1-y) log(1 - sigma(z)).
inline double bce(const std::vector<double>& logits, const std::vector<int>& labels) {
  double total = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double p = sigmoid(logits[i]);
    total += labels[i] ? std::log(p) : std::log(1.0 - p);
  }
  return -total / static_cast<double>(logits.size());
}

template <typename M>
std::vector<std::vector<double>> rows_of(const M& m) {
  std::vector<std::vector<double>> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) out[static_cast<std::size_t>(r)].push_back(static_cast<double>(m(r, c)));
  }
  return out;
}

// ----------------------------------------------------------------- flops

/// One matrix product [m x k] * [k x n]; 2*m*k*n FLOPs.
struct MatmulShape {
  std::uint64_t m, k, n;
};

/// Every matmul of one pre-norm transformer layer over n tokens of width d
/// with `heads` heads, written per head for the score and mixing products.
inline std::vector<MatmulShape> layer_matmuls(std::uint64_t n, std::uint64_t d, std::uint64_t heads, std::uint64_t ff) {
  const std::uint64_t dh = d / heads;
  std::vector<MatmulShape> mm;
  mm.push_back({n, d, d});  // Q
  mm.push_back({n, d, d});  // K
  mm.push_back({n, d, d});  // V
  for (std::uint64_t h = 0; h < heads; ++h) {
    mm.push_back({n, dh, n});  // scores
    mm.push_back({n, n, dh});  // weights x values
  }
  mm.push_back({n, d, d});       // output projection
  mm.push_back({n, d, d * ff});  // MLP up
  mm.push_back({n, d * ff, d});  // MLP down
  return mm;
}

inline std::uint64_t enumerate_flops(std::uint64_t layers, std::uint64_t n, std::uint64_t d, std::uint64_t heads,
                                     std::uint64_t ff) {
  std::uint64_t total = 0;
  for (std::uint64_t l = 0; l < layers; ++l) {
    for (const auto& s : layer_matmuls(n, d, heads, ff)) total += 2 * s.m * s.k * s.n;
  }
  return total;
}

// ------------------------------------------------------ finite differences

/// Central difference of f with respect to one scalar, restoring it afterwards.
inline double central_difference(double& x, const std::function<double()>& f, double h = 1e-5) {
  const double saved = x;
  x = saved + h;
  const double up = f();
  x = saved - h;
  const double down = f();
  x = saved;
  return (up - down) / (2 * h);
}

}  // namespace oracle
