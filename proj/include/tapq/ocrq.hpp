#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "tapq/encoder.hpp"
#include "tapq/layers.hpp"
#include "tapq/tokenizer.hpp"

namespace tapq {

/// Self-attention visibility between the query stream and the text stream.
enum class MaskRegime {
  kMultimodalCausal,  // queries see queries; text sees queries and earlier text
  kUnimodal,          // each stream sees only itself
  kBidirectional,     // everything sees everything
};

std::string_view to_string(MaskRegime regime);
/// Accepts "multimodal_causal" | "unimodal" | "bidirectional".
MaskRegime parse_mask_regime(std::string_view name);

/// Square boolean matrix over [queries (K); text (T)], rows attend to columns.
struct AttentionMask {
  std::size_t queries = 0;
  std::size_t text = 0;
  std::vector<std::uint8_t> allowed;

  std::size_t size() const { return queries + text; }
  bool operator()(std::size_t row, std::size_t col) const { return allowed[row * size() + col] != 0; }
};

AttentionMask build_attention_mask(MaskRegime regime, std::size_t queries, std::size_t text);

struct OcrQConfig {
  std::size_t vocab_size = 0;
  std::size_t d = 64;
  std::size_t d_ocr = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t ff_mult = 4;
  std::size_t num_queries = 8;
  std::size_t max_text_len = 64;
  std::size_t d_contrast = 32;

  void check() const;
};

/// Padded text-stream batch, row-major [batch, length]. Position 0 of every
/// row holds the task prefix (<dec> or <cls>).
struct TextInput {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> pad_mask;  // 1 = real token

  static TextInput from_sequences(const std::vector<std::vector<TokenId>>& rows);
};

/// r_q is [batch * K, d], r_m is [batch * T, d]; un-normalized residual streams
/// (each head applies its own output norm).
struct DualStreamOutput {
  ag::Var r_q;
  ag::Var r_m;
  std::size_t batch = 0;
  std::size_t queries = 0;
  std::size_t text = 0;
};

enum class Stream { kQuery, kText };

template <typename S>
class OcrQ {
 public:
  struct Block {
    nn::LayerNorm<S> ln_self;
    nn::MultiHeadAttention<S> self_attn;  // one set of weights for both streams
    nn::LayerNorm<S> ln_cross;
    nn::LayerNorm<S> ln_ocr;
    nn::MultiHeadAttention<S> cross_attn;
    nn::LayerNorm<S> ln_ff_query;
    nn::FeedForward<S> ff_query;
    nn::LayerNorm<S> ln_ff_text;
    nn::FeedForward<S> ff_text;
  };

  OcrQ(ag::ParamStore<S>& store, const OcrQConfig& cfg, std::mt19937_64& rng);

  /// Token + position embedding of the text stream (no layout input).
  ag::Var embed_text(ag::Tape<S>& t, const TextInput& text) const;

  DualStreamOutput forward(ag::Tape<S>& t, ag::Var text_embeddings, const TextInput& text,
                           const OcrEmbeddings& ocr, MaskRegime regime) const;

  DualStreamOutput operator()(ag::Tape<S>& t, const TextInput& text, const OcrEmbeddings& ocr,
                              MaskRegime regime) const {
    return forward(t, embed_text(t, text), text, ocr, regime);
  }

  /// [batch * T, vocab] logits.
  ag::Var lm_logits(ag::Tape<S>& t, const DualStreamOutput& out) const;
  /// Unit-norm [batch * K, d_contrast].
  ag::Var project_queries(ag::Tape<S>& t, const DualStreamOutput& out) const;
  /// Unit-norm [batch, d_contrast] from the prefix position of r_m.
  ag::Var project_text(ag::Tape<S>& t, const DualStreamOutput& out) const;
  /// Per-query match logits [batch * K, 1].
  ag::Var match_logits_per_query(ag::Tape<S>& t, const DualStreamOutput& out) const;
  /// Query-averaged match logit [batch, 1].
  ag::Var match_logits(ag::Tape<S>& t, const DualStreamOutput& out) const;

  const OcrQConfig& config() const { return cfg_; }
  const std::vector<Block>& blocks() const { return blocks_; }
  const nn::MultiHeadAttention<S>& self_attention(std::size_t layer, Stream stream) const;
  ag::Parameter<S>& query_bank() const { return *queries_; }
  const nn::Linear<S>& lm_head() const { return lm_head_; }
  const nn::Linear<S>& match_head() const { return match_head_; }

 private:
  OcrQConfig cfg_;
  ag::Parameter<S>* queries_;
  ag::Parameter<S>* text_emb_;
  ag::Parameter<S>* text_pos_;
  std::vector<Block> blocks_;
  nn::LayerNorm<S> ln_out_query_;
  nn::LayerNorm<S> ln_out_text_;
  nn::Linear<S> lm_head_;
  nn::Linear<S> proj_query_;
  nn::Linear<S> proj_text_;
  nn::Linear<S> match_head_;
};

extern template class OcrQ<float>;
extern template class OcrQ<double>;

}  // namespace tapq
