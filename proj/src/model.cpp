#include "tapq/model.hpp"

#include "tapq/error.hpp"

namespace tapq {

EncoderConfig ModelConfig::encoder() const {
  return EncoderConfig{vocab_size, d_ocr, encoder_layers, encoder_heads, ff_mult, n_buckets, max_ocr_len};
}

OcrQConfig ModelConfig::ocrq() const {
  return OcrQConfig{vocab_size, d, d_ocr, ocrq_layers, ocrq_heads, ff_mult, num_queries, max_text_len, d_contrast};
}

void ModelConfig::check() const {
  encoder().check();
  ocrq().check();
}

template <typename S>
Model<S>::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.check();
  std::mt19937_64 rng(seed);
  encoder_ = std::make_unique<OcrEncoder<S>>(store_, cfg_.encoder(), rng);
  ocrq_ = std::make_unique<OcrQ<S>>(store_, cfg_.ocrq(), rng);
}

template class Model<float>;
template class Model<double>;

}  // namespace tapq
