#pragma once

#include <cstdint>
#include <memory>
#include <random>

#include "tapq/encoder.hpp"
#include "tapq/ocrq.hpp"

namespace tapq {

struct ModelConfig {
  std::size_t vocab_size = 0;
  // OCR encoder
  std::size_t d_ocr = 64;
  std::size_t encoder_layers = 4;
  std::size_t encoder_heads = 4;
  std::size_t n_buckets = 20;
  std::size_t max_ocr_len = 128;
  // OCR-Q
  std::size_t d = 64;
  std::size_t ocrq_layers = 4;
  std::size_t ocrq_heads = 4;
  std::size_t num_queries = 8;
  std::size_t max_text_len = 64;
  std::size_t d_contrast = 32;
  std::size_t ff_mult = 4;

  EncoderConfig encoder() const;
  OcrQConfig ocrq() const;
  void check() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Encoder and OCR-Q sharing one parameter store. Parameters are initialized
/// from `seed`; float and double models with the same seed start identical.
template <typename S>
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ag::ParamStore<S>& params() { return store_; }
  const ag::ParamStore<S>& params() const { return store_; }
  const OcrEncoder<S>& encoder() const { return *encoder_; }
  const OcrQ<S>& ocrq() const { return *ocrq_; }

  /// Copies values by parameter name, converting the scalar type.
  template <typename U>
  void copy_parameters_from(const Model<U>& other) {
    auto it = other.params().all().begin();
    for (auto& p : store_.all()) {
      if (it == other.params().all().end() || it->name != p.name || it->value.rows() != p.value.rows() ||
          it->value.cols() != p.value.cols()) {
        throw ValidationError("copy_parameters_from: parameter layout differs at " + p.name);
      }
      p.value = it->value.template cast<S>();
      ++it;
    }
  }

 private:
  ModelConfig cfg_;
  ag::ParamStore<S> store_;
  std::unique_ptr<OcrEncoder<S>> encoder_;
  std::unique_ptr<OcrQ<S>> ocrq_;
};

extern template class Model<float>;
extern template class Model<double>;

}  // namespace tapq
