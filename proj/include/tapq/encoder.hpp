#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <vector>

#include "tapq/corpus.hpp"
#include "tapq/layers.hpp"
#include "tapq/tokenizer.hpp"

namespace tapq {

struct EncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t d_ocr = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t ff_mult = 4;
  std::size_t n_buckets = 20;
  std::size_t max_len = 128;

  void check() const;
};

/// floor(c * n_buckets) clipped to n_buckets - 1; ValidationError outside [0,1].
std::size_t coordinate_bucket(double c, std::size_t n_buckets);

/// A padded batch of (noisy) OCR sequences, row-major [batch, length].
struct OcrInput {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<TokenId> ids;
  std::vector<BoundingBox> boxes;
  std::vector<std::uint8_t> pad_mask;  // 1 = real token

  /// Pads every sequence to the longest with <pad> and zero boxes.
  static OcrInput from_sequences(const std::vector<std::vector<TokenId>>& ids,
                                 const std::vector<std::vector<BoundingBox>>& boxes);
};

/// Encoder output O: values are [batch * length, d_ocr].
struct OcrEmbeddings {
  ag::Var values;
  std::size_t batch = 0;
  std::size_t length = 0;
  std::shared_ptr<const std::vector<std::uint8_t>> pad_mask;
};

/// Layout-aware OCR encoder: token + four bucketized-coordinate + 1D position
/// embeddings, then a pre-norm bidirectional transformer stack.
template <typename S>
class OcrEncoder {
 public:
  struct Block {
    nn::LayerNorm<S> ln_attn;
    nn::MultiHeadAttention<S> attn;
    nn::LayerNorm<S> ln_ff;
    nn::FeedForward<S> ff;
  };

  OcrEncoder(ag::ParamStore<S>& store, const EncoderConfig& cfg, std::mt19937_64& rng);

  ag::Var embed(ag::Tape<S>& t, const OcrInput& in) const;
  OcrEmbeddings encode(ag::Tape<S>& t, ag::Var embeddings, const OcrInput& in) const;
  OcrEmbeddings operator()(ag::Tape<S>& t, const OcrInput& in) const { return encode(t, embed(t, in), in); }

  const EncoderConfig& config() const { return cfg_; }
  const std::vector<Block>& blocks() const { return blocks_; }

 private:
  EncoderConfig cfg_;
  ag::Parameter<S>* token_emb_;
  ag::Parameter<S>* layout_emb_[4];
  ag::Parameter<S>* position_emb_;
  std::vector<Block> blocks_;
};

extern template class OcrEncoder<float>;
extern template class OcrEncoder<double>;

}  // namespace tapq
