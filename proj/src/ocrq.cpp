#include "tapq/ocrq.hpp"

#include <algorithm>

#include "tapq/error.hpp"

namespace tapq {

std::string_view to_string(MaskRegime regime) {
  switch (regime) {
    case MaskRegime::kMultimodalCausal: return "multimodal_causal";
    case MaskRegime::kUnimodal: return "unimodal";
    case MaskRegime::kBidirectional: return "bidirectional";
  }
  return "unknown";
}

MaskRegime parse_mask_regime(std::string_view name) {
  if (name == "multimodal_causal") return MaskRegime::kMultimodalCausal;
  if (name == "unimodal") return MaskRegime::kUnimodal;
  if (name == "bidirectional") return MaskRegime::kBidirectional;
  throw ConfigError("unknown mask regime '" + std::string(name) +
                    "' (expected multimodal_causal, unimodal or bidirectional)");
}

AttentionMask build_attention_mask(MaskRegime regime, std::size_t queries, std::size_t text) {
  if (queries == 0) throw ValidationError("build_attention_mask: need at least one query");
  AttentionMask m;
  m.queries = queries;
  m.text = text;
  const std::size_t n = queries + text;
  m.allowed.assign(n * n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const bool row_is_query = i < queries;
    for (std::size_t j = 0; j < n; ++j) {
      const bool col_is_query = j < queries;
      bool ok = false;
      switch (regime) {
        case MaskRegime::kMultimodalCausal:
          ok = row_is_query ? col_is_query : (col_is_query || j <= i);
          break;
        case MaskRegime::kUnimodal:
          ok = row_is_query == col_is_query;
          break;
        case MaskRegime::kBidirectional:
          ok = true;
          break;
      }
      m.allowed[i * n + j] = ok ? 1 : 0;
    }
  }
  return m;
}

void OcrQConfig::check() const {
  if (vocab_size == 0) throw ConfigError("ocrq: vocab_size must be positive");
  if (d == 0 || n_heads == 0 || d % n_heads != 0) throw ConfigError("ocrq: d must be a positive multiple of n_heads");
  if (d_ocr == 0 || ff_mult == 0 || max_text_len == 0 || d_contrast == 0) {
    throw ConfigError("ocrq: d_ocr, ff_mult, max_text_len and d_contrast must be positive");
  }
  if (num_queries == 0) throw ConfigError("ocrq: num_queries must be positive");
}

TextInput TextInput::from_sequences(const std::vector<std::vector<TokenId>>& rows) {
  TextInput in;
  in.batch = rows.size();
  for (const auto& r : rows) {
    if (r.empty()) throw ValidationError("TextInput: empty text row (the prefix token is required)");
    in.length = std::max(in.length, r.size());
  }
  in.ids.assign(in.batch * in.length, Vocabulary::kPad);
  in.pad_mask.assign(in.batch * in.length, 0);
  for (std::size_t b = 0; b < rows.size(); ++b) {
    std::copy(rows[b].begin(), rows[b].end(), in.ids.begin() + static_cast<std::ptrdiff_t>(b * in.length));
    std::fill_n(in.pad_mask.begin() + static_cast<std::ptrdiff_t>(b * in.length), rows[b].size(), 1);
  }
  return in;
}

template <typename S>
OcrQ<S>::OcrQ(ag::ParamStore<S>& store, const OcrQConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
  cfg_.check();
  const auto d = static_cast<Eigen::Index>(cfg_.d);
  const auto d_ocr = static_cast<Eigen::Index>(cfg_.d_ocr);
  const auto ff = static_cast<Eigen::Index>(cfg_.ff_mult);
  queries_ = &store.add("ocrq.queries", static_cast<Eigen::Index>(cfg_.num_queries), d);
  nn::init_normal(*queries_, 0.02, rng);
  text_emb_ = &store.add("ocrq.text_emb", static_cast<Eigen::Index>(cfg_.vocab_size), d);
  nn::init_normal(*text_emb_, 0.02, rng);
  text_pos_ = &store.add("ocrq.text_pos", static_cast<Eigen::Index>(cfg_.max_text_len), d);
  nn::init_normal(*text_pos_, 0.02, rng);
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    const std::string p = "ocrq.block" + std::to_string(l);
    blocks_.push_back(Block{
        nn::LayerNorm<S>(store, p + ".ln_self", d),
        nn::MultiHeadAttention<S>(store, p + ".self_attn", d, d, cfg_.n_heads, rng),
        nn::LayerNorm<S>(store, p + ".ln_cross", d),
        nn::LayerNorm<S>(store, p + ".ln_ocr", d_ocr),
        nn::MultiHeadAttention<S>(store, p + ".cross_attn", d, d_ocr, cfg_.n_heads, rng),
        nn::LayerNorm<S>(store, p + ".ln_ff_query", d),
        nn::FeedForward<S>(store, p + ".ff_query", d, ff, rng),
        nn::LayerNorm<S>(store, p + ".ln_ff_text", d),
        nn::FeedForward<S>(store, p + ".ff_text", d, ff, rng),
    });
  }
  ln_out_query_ = nn::LayerNorm<S>(store, "ocrq.ln_out_query", d);
  ln_out_text_ = nn::LayerNorm<S>(store, "ocrq.ln_out_text", d);
  lm_head_ = nn::Linear<S>(store, "ocrq.lm_head", d, static_cast<Eigen::Index>(cfg_.vocab_size), rng);
  proj_query_ = nn::Linear<S>(store, "ocrq.proj_query", d, static_cast<Eigen::Index>(cfg_.d_contrast), rng);
  proj_text_ = nn::Linear<S>(store, "ocrq.proj_text", d, static_cast<Eigen::Index>(cfg_.d_contrast), rng);
  match_head_ = nn::Linear<S>(store, "ocrq.match_head", d, 1, rng);
}

template <typename S>
const nn::MultiHeadAttention<S>& OcrQ<S>::self_attention(std::size_t layer, Stream) const {
  return blocks_.at(layer).self_attn;
}

template <typename S>
ag::Var OcrQ<S>::embed_text(ag::Tape<S>& t, const TextInput& text) const {
  const std::size_t n = text.batch * text.length;
  if (text.ids.size() != n || text.pad_mask.size() != n) throw ValidationError("ocrq: text arrays disagree with batch x length");
  if (text.length > cfg_.max_text_len) {
    throw ValidationError("ocrq: text length " + std::to_string(text.length) + " exceeds max_text_len " +
                          std::to_string(cfg_.max_text_len));
  }
  std::vector<std::int32_t> ids(n), pos(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (text.ids[i] < 0 || static_cast<std::size_t>(text.ids[i]) >= cfg_.vocab_size) {
      throw ValidationError("ocrq: token id " + std::to_string(text.ids[i]) + " outside vocabulary");
    }
    ids[i] = text.ids[i];
    pos[i] = static_cast<std::int32_t>(i % text.length);
  }
  return ag::add(t, ag::gather_rows(t, t.param(*text_emb_), std::move(ids)),
                 ag::gather_rows(t, t.param(*text_pos_), std::move(pos)));
}

template <typename S>
DualStreamOutput OcrQ<S>::forward(ag::Tape<S>& t, ag::Var text_embeddings, const TextInput& text,
                                  const OcrEmbeddings& ocr, MaskRegime regime) const {
  const std::size_t B = text.batch;
  const std::size_t T = text.length;
  const std::size_t K = cfg_.num_queries;
  const std::size_t N = K + T;
  const std::size_t L = ocr.length;
  if (ocr.batch != B) throw ValidationError("ocrq: OCR batch " + std::to_string(ocr.batch) + " != text batch " + std::to_string(B));
  if (T == 0) throw ValidationError("ocrq: text stream needs at least the prefix token");
  if (t.value(text_embeddings).rows() != static_cast<Eigen::Index>(B * T) ||
      t.value(text_embeddings).cols() != static_cast<Eigen::Index>(cfg_.d)) {
    throw ValidationError("ocrq: text embedding shape mismatch");
  }
  if (t.value(ocr.values).rows() != static_cast<Eigen::Index>(B * L) ||
      t.value(ocr.values).cols() != static_cast<Eigen::Index>(cfg_.d_ocr)) {
    throw ValidationError("ocrq: OCR embedding shape mismatch");
  }

  std::vector<std::int32_t> init_idx(B * N), q_idx(B * K), t_idx(B * T), merge_idx(B * N);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t k = 0; k < K; ++k) {
      init_idx[b * N + k] = static_cast<std::int32_t>(k);
      q_idx[b * K + k] = static_cast<std::int32_t>(b * N + k);
      merge_idx[b * N + k] = static_cast<std::int32_t>(b * K + k);
    }
    for (std::size_t j = 0; j < T; ++j) {
      init_idx[b * N + K + j] = static_cast<std::int32_t>(K + b * T + j);
      t_idx[b * T + j] = static_cast<std::int32_t>(b * N + K + j);
      merge_idx[b * N + K + j] = static_cast<std::int32_t>(B * K + b * T + j);
    }
  }

  const AttentionMask base = build_attention_mask(regime, K, T);
  auto self_mask = std::make_shared<std::vector<std::uint8_t>>(B * N * N);
  auto cross_mask = std::make_shared<std::vector<std::uint8_t>>(B * K * L);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < N; ++i) {
      for (std::size_t j = 0; j < N; ++j) {
        const bool real = j < K || text.pad_mask[b * T + (j - K)];
        (*self_mask)[(b * N + i) * N + j] = (base(i, j) && real) ? 1 : 0;
      }
    }
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t j = 0; j < L; ++j) (*cross_mask)[(b * K + k) * L + j] = (*ocr.pad_mask)[b * L + j];
    }
  }
  const ag::AttentionShape self_shape{B, N, N, 0};
  const ag::AttentionShape cross_shape{B, K, L, 0};

  ag::Var x = ag::gather_rows(t, ag::concat_rows(t, {t.param(*queries_), text_embeddings}), init_idx);
  ag::Var xq, xt;
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const Block& blk = blocks_[l];
    ag::Var h = blk.ln_self(t, x);
    x = ag::add(t, x, blk.self_attn(t, h, h, self_shape, self_mask));
    xq = ag::gather_rows(t, x, q_idx);
    xt = ag::gather_rows(t, x, t_idx);
    xq = ag::add(t, xq, blk.cross_attn(t, blk.ln_cross(t, xq), blk.ln_ocr(t, ocr.values), cross_shape, cross_mask));
    xq = ag::add(t, xq, blk.ff_query(t, blk.ln_ff_query(t, xq)));
    xt = ag::add(t, xt, blk.ff_text(t, blk.ln_ff_text(t, xt)));
    if (l + 1 < blocks_.size()) x = ag::gather_rows(t, ag::concat_rows(t, {xq, xt}), merge_idx);
  }
  if (blocks_.empty()) {
    xq = ag::gather_rows(t, x, q_idx);
    xt = ag::gather_rows(t, x, t_idx);
  }
  return DualStreamOutput{xq, xt, B, K, T};
}

template <typename S>
ag::Var OcrQ<S>::lm_logits(ag::Tape<S>& t, const DualStreamOutput& out) const {
  return lm_head_(t, ln_out_text_(t, out.r_m));
}

template <typename S>
ag::Var OcrQ<S>::project_queries(ag::Tape<S>& t, const DualStreamOutput& out) const {
  return ag::l2_normalize_rows(t, proj_query_(t, ln_out_query_(t, out.r_q)));
}

template <typename S>
ag::Var OcrQ<S>::project_text(ag::Tape<S>& t, const DualStreamOutput& out) const {
  std::vector<std::int32_t> prefix(out.batch);
  for (std::size_t b = 0; b < out.batch; ++b) prefix[b] = static_cast<std::int32_t>(b * out.text);
  return ag::l2_normalize_rows(t, proj_text_(t, ln_out_text_(t, ag::gather_rows(t, out.r_m, std::move(prefix)))));
}

template <typename S>
ag::Var OcrQ<S>::match_logits_per_query(ag::Tape<S>& t, const DualStreamOutput& out) const {
  return match_head_(t, ln_out_query_(t, out.r_q));
}

template <typename S>
ag::Var OcrQ<S>::match_logits(ag::Tape<S>& t, const DualStreamOutput& out) const {
  return ag::group_mean(t, match_logits_per_query(t, out), out.queries);
}

template class OcrQ<float>;
template class OcrQ<double>;

}  // namespace tapq
