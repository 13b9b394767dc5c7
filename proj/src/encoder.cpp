#include "tapq/encoder.hpp"

#include <algorithm>
#include <cmath>

#include "tapq/error.hpp"

namespace tapq {

void EncoderConfig::check() const {
  if (vocab_size == 0) throw ConfigError("encoder: vocab_size must be positive");
  if (d_ocr == 0 || n_heads == 0 || d_ocr % n_heads != 0) {
    throw ConfigError("encoder: d_ocr must be a positive multiple of n_heads");
  }
  if (n_buckets < 2) throw ConfigError("encoder: n_buckets must be at least 2");
  if (max_len == 0 || ff_mult == 0) throw ConfigError("encoder: max_len and ff_mult must be positive");
}

std::size_t coordinate_bucket(double c, std::size_t n_buckets) {
  if (!(c >= 0.0 && c <= 1.0)) throw ValidationError("bbox coordinate " + std::to_string(c) + " outside [0,1]");
  const auto b = static_cast<std::size_t>(std::floor(c * static_cast<double>(n_buckets)));
  return std::min(b, n_buckets - 1);
}

OcrInput OcrInput::from_sequences(const std::vector<std::vector<TokenId>>& ids,
                                  const std::vector<std::vector<BoundingBox>>& boxes) {
  if (ids.size() != boxes.size()) throw ValidationError("OcrInput: ids/boxes batch mismatch");
  OcrInput in;
  in.batch = ids.size();
  for (std::size_t b = 0; b < ids.size(); ++b) {
    if (ids[b].size() != boxes[b].size()) throw ValidationError("OcrInput: ids/boxes length mismatch");
    in.length = std::max(in.length, ids[b].size());
  }
  in.ids.assign(in.batch * in.length, Vocabulary::kPad);
  in.boxes.assign(in.batch * in.length, BoundingBox{});
  in.pad_mask.assign(in.batch * in.length, 0);
  for (std::size_t b = 0; b < ids.size(); ++b) {
    for (std::size_t i = 0; i < ids[b].size(); ++i) {
      in.ids[b * in.length + i] = ids[b][i];
      in.boxes[b * in.length + i] = boxes[b][i];
      in.pad_mask[b * in.length + i] = 1;
    }
  }
  return in;
}

template <typename S>
OcrEncoder<S>::OcrEncoder(ag::ParamStore<S>& store, const EncoderConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
  cfg_.check();
  const auto d = static_cast<Eigen::Index>(cfg_.d_ocr);
  token_emb_ = &store.add("encoder.token_emb", static_cast<Eigen::Index>(cfg_.vocab_size), d);
  nn::init_normal(*token_emb_, 0.02, rng);
  const char* coord[4] = {"x0", "y0", "x1", "y1"};
  for (int c = 0; c < 4; ++c) {
    layout_emb_[c] = &store.add(std::string("encoder.layout_emb.") + coord[c], static_cast<Eigen::Index>(cfg_.n_buckets), d);
    nn::init_normal(*layout_emb_[c], 0.02, rng);
  }
  position_emb_ = &store.add("encoder.position_emb", static_cast<Eigen::Index>(cfg_.max_len), d);
  nn::init_normal(*position_emb_, 0.02, rng);
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    const std::string p = "encoder.block" + std::to_string(l);
    blocks_.push_back(Block{nn::LayerNorm<S>(store, p + ".ln_attn", d),
                            nn::MultiHeadAttention<S>(store, p + ".attn", d, d, cfg_.n_heads, rng),
                            nn::LayerNorm<S>(store, p + ".ln_ff", d),
                            nn::FeedForward<S>(store, p + ".ff", d, static_cast<Eigen::Index>(cfg_.ff_mult), rng)});
  }
}

template <typename S>
ag::Var OcrEncoder<S>::embed(ag::Tape<S>& t, const OcrInput& in) const {
  const std::size_t n = in.batch * in.length;
  if (in.ids.size() != n || in.boxes.size() != n || in.pad_mask.size() != n) {
    throw ValidationError("encoder: input arrays disagree with batch x length");
  }
  if (in.length > cfg_.max_len) {
    throw ValidationError("encoder: sequence length " + std::to_string(in.length) + " exceeds max_len " +
                          std::to_string(cfg_.max_len));
  }
  std::vector<std::int32_t> ids(n), pos(n);
  std::vector<std::int32_t> buckets[4];
  for (auto& b : buckets) b.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (in.ids[i] < 0 || static_cast<std::size_t>(in.ids[i]) >= cfg_.vocab_size) {
      throw ValidationError("encoder: token id " + std::to_string(in.ids[i]) + " outside vocabulary");
    }
    ids[i] = in.ids[i];
    pos[i] = static_cast<std::int32_t>(i % in.length);
    const BoundingBox& box = in.boxes[i];
    const double c[4] = {box.x0, box.y0, box.x1, box.y1};
    for (int k = 0; k < 4; ++k) buckets[k][i] = static_cast<std::int32_t>(coordinate_bucket(c[k], cfg_.n_buckets));
  }
  ag::Var x = ag::gather_rows(t, t.param(*token_emb_), std::move(ids));
  for (int k = 0; k < 4; ++k) x = ag::add(t, x, ag::gather_rows(t, t.param(*layout_emb_[k]), std::move(buckets[k])));
  return ag::add(t, x, ag::gather_rows(t, t.param(*position_emb_), std::move(pos)));
}

template <typename S>
OcrEmbeddings OcrEncoder<S>::encode(ag::Tape<S>& t, ag::Var embeddings, const OcrInput& in) const {
  const std::size_t B = in.batch;
  const std::size_t L = in.length;
  if (t.value(embeddings).rows() != static_cast<Eigen::Index>(B * L) ||
      t.value(embeddings).cols() != static_cast<Eigen::Index>(cfg_.d_ocr)) {
    throw ValidationError("encoder: embedding shape does not match input");
  }
  auto mask = std::make_shared<std::vector<std::uint8_t>>(B * L * L);
  for (std::size_t b = 0; b < B; ++b) {
    bool any = false;
    for (std::size_t j = 0; j < L; ++j) any = any || in.pad_mask[b * L + j];
    if (!any) throw ValidationError("encoder: batch row " + std::to_string(b) + " has no real tokens");
    for (std::size_t i = 0; i < L; ++i) {
      for (std::size_t j = 0; j < L; ++j) (*mask)[(b * L + i) * L + j] = in.pad_mask[b * L + j];
    }
  }
  const ag::AttentionShape shape{B, L, L, cfg_.n_heads};
  ag::Var x = embeddings;
  for (const Block& blk : blocks_) {
    ag::Var h = blk.ln_attn(t, x);
    x = ag::add(t, x, blk.attn(t, h, h, shape, mask));
    x = ag::add(t, x, blk.ff(t, blk.ln_ff(t, x)));
  }
  return OcrEmbeddings{x, B, L, std::make_shared<const std::vector<std::uint8_t>>(in.pad_mask)};
}

template class OcrEncoder<float>;
template class OcrEncoder<double>;

}  // namespace tapq
