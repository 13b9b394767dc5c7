#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tapq/corpus.hpp"
#include "tapq/model.hpp"
#include "tapq/tokenizer.hpp"

namespace tapq {

/// Noisy OCR plus the encoded masked-word target of each row.
struct PretrainBatch {
  OcrInput ocr;
  std::vector<std::vector<TokenId>> targets;  // (sentinel, words...)*, never empty
  std::vector<std::string> doc_ids;
  TokenId first_word_id = 0;

  std::size_t size() const { return targets.size(); }
};

PretrainBatch make_batch(std::span<const MaskedExample> examples, const Vocabulary& vocab);

/// [<dec>, target[0..T-2]] with labels target[0..T-1]; pads carry label -1.
struct DenoisingText {
  TextInput text;
  std::vector<std::int32_t> labels;
};
DenoisingText denoising_text(const PretrainBatch& batch);

/// [<cls>, target...] for the given rows of `batch` (all rows by default).
TextInput cls_text(const PretrainBatch& batch);
TextInput cls_text(const PretrainBatch& batch, std::span<const std::size_t> rows);

struct ObjectiveConfig {
  double tau = 0.07;
  double match_positive_prob = 0.5;  // p
  double w_lm = 1.0;
  double w_con = 1.0;
  double w_match = 1.0;
  ag::ContrastiveOptions contrastive;

  void check() const;
};

struct DenoisingResult {
  ag::Var loss;
  std::size_t word_positions = 0;
  std::size_t word_correct = 0;
};

template <typename S>
DenoisingResult denoising_loss(ag::Tape<S>& t, const Model<S>& model, const PretrainBatch& batch,
                               const OcrEmbeddings& ocr);

/// S[i][j] = max_k <proj_q(r_q)[i,k], proj_t(r_t)[j]> under the unimodal regime.
template <typename S>
ag::Var contrastive_similarity(ag::Tape<S>& t, const Model<S>& model, const PretrainBatch& batch,
                               const OcrEmbeddings& ocr);

/// Samples, for each row i, a partner j != i with probability proportional to
/// exp(S[i][j]) among rows whose doc id differs from row i's; uniform over
/// j != i when no such row exists.
std::vector<std::size_t> mine_hard_negatives(const ag::Mat<double>& similarity,
                                             std::span<const std::string> doc_ids, std::mt19937_64& rng);

struct MatchingResult {
  ag::Var loss;
  std::vector<std::size_t> partner;  // text row paired with each OCR row
  std::vector<std::uint8_t> labels;  // 1 = matching pair
  std::size_t correct = 0;
};

/// Pairs each OCR row with its own target with probability p, otherwise with
/// the mined hard negative, and scores the pairs under the bidirectional regime.
template <typename S>
MatchingResult matching_loss(ag::Tape<S>& t, const Model<S>& model, const PretrainBatch& batch,
                             const OcrEmbeddings& ocr, const ag::Mat<double>& similarity, double p,
                             std::mt19937_64& rng);

struct LossBundle {
  ag::Var total_var;
  double l_lm = 0;
  double l_con = 0;
  double l_match = 0;
  double total = 0;
  double acc_lm = 0;     // argmax accuracy on masked-word label positions
  double acc_ret = 0;    // fraction of rows with argmax_j S[i][j] == i
  double acc_match = 0;  // matching accuracy at sigmoid threshold 0.5
  std::size_t lm_positions = 0;
};

/// Encodes the OCR once and evaluates all three objectives, each under its own
/// mask regime, on the same batch.
template <typename S>
LossBundle total_loss(ag::Tape<S>& t, const Model<S>& model, const PretrainBatch& batch,
                      const ObjectiveConfig& cfg, std::mt19937_64& rng);

template <typename S>
ag::Mat<double> to_double(const ag::Mat<S>& m) {
  return m.template cast<double>();
}

}  // namespace tapq
