#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "tapq/encoder.hpp"
#include "tapq/error.hpp"

using namespace tapq;
using ag::Mat;

namespace {

EncoderConfig small_config() {
  EncoderConfig cfg;
  cfg.vocab_size = 30;
  cfg.d_ocr = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.n_buckets = 10;
  cfg.max_len = 32;
  return cfg;
}

struct Fixture {
  ag::ParamStore<double> store;
  std::mt19937_64 rng{42};
  OcrEncoder<double> enc;
  explicit Fixture(const EncoderConfig& cfg = small_config()) : enc(store, cfg, rng) {}
};

std::vector<BoundingBox> random_boxes(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 0.5);
  std::vector<BoundingBox> out;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = u(rng), y = u(rng);
    out.push_back({x, y, x + u(rng), y + u(rng)});
  }
  return out;
}

}  // namespace

TEST_CASE("coordinate buckets") {
  CHECK(coordinate_bucket(0.5, 10) == 5);
  CHECK(coordinate_bucket(0.0, 10) == 0);
  CHECK(coordinate_bucket(1.0, 10) == 9);
  CHECK(coordinate_bucket(0.999, 20) == 19);
  CHECK_THROWS_AS(coordinate_bucket(-0.01, 10), ValidationError);
  CHECK_THROWS_AS(coordinate_bucket(1.01, 10), ValidationError);
}

TEST_CASE("encoder config validation") {
  EncoderConfig cfg = small_config();
  cfg.n_heads = 3;
  CHECK_THROWS_AS(cfg.check(), ConfigError);
  cfg = small_config();
  cfg.n_buckets = 1;
  CHECK_THROWS_AS(cfg.check(), ConfigError);
}

TEST_CASE("embedding depends only on id, box and position") {
  Fixture f;
  const BoundingBox b{0.2, 0.3, 0.4, 0.5};
  const OcrInput in = OcrInput::from_sequences({{7, 7}, {7, 9}}, {{b, b}, {b, b}});
  ag::Tape<double> t;
  const Mat<double>& e = t.value(f.enc.embed(t, in));
  CHECK(e.rows() == 4);
  CHECK(e.cols() == 16);
  CHECK((e.row(0) - e.row(2)).norm() == 0.0);  // same id, box, position
  CHECK((e.row(0) - e.row(1)).norm() > 0.0);   // position differs

  const OcrInput corners = OcrInput::from_sequences({{7}, {7}}, {{{0, 0, 0, 0}}, {{0.999, 0.999, 0.999, 0.999}}});
  ag::Tape<double> t2;
  const Mat<double>& c = t2.value(f.enc.embed(t2, corners));
  CHECK((c.row(0) - c.row(1)).norm() > 0.0);

  const OcrInput bad = OcrInput::from_sequences({{7}}, {{{0, 0, 1.2, 0.5}}});
  ag::Tape<double> t3;
  CHECK_THROWS_AS(f.enc.embed(t3, bad), ValidationError);
}

TEST_CASE("padding leaves real positions unchanged") {
  Fixture f;
  std::mt19937_64 rng(9);
  const std::vector<TokenId> ids{5, 8, 11, 4, 20, 6};
  const auto boxes = random_boxes(ids.size(), rng);
  // Second row is longer, so the first gets 5 pad positions appended.
  std::vector<TokenId> longer(ids);
  auto longer_boxes = boxes;
  for (int i = 0; i < 5; ++i) {
    longer.push_back(3);
    longer_boxes.push_back({0.1, 0.1, 0.2, 0.2});
  }
  ag::Tape<double> t1, t2;
  const OcrEmbeddings alone = f.enc(t1, OcrInput::from_sequences({ids}, {boxes}));
  const OcrEmbeddings padded = f.enc(t2, OcrInput::from_sequences({ids, longer}, {boxes, longer_boxes}));
  CHECK(padded.length == 11);
  REQUIRE((*padded.pad_mask)[6] == 0);
  const Mat<double> a = t1.value(alone.values);
  const Mat<double> p = t2.value(padded.values).topRows(6);
  CHECK((a - p).norm() <= 1e-5 * a.norm());
}

TEST_CASE("zeroed residual branches make the encoder the identity") {
  EncoderConfig cfg = small_config();
  cfg.n_layers = 1;
  Fixture f(cfg);
  for (auto& p : f.store.all()) {
    if (p.name.find(".attn.o.") != std::string::npos || p.name.find(".ff.down.") != std::string::npos) p.value.setZero();
  }
  std::mt19937_64 rng(10);
  const OcrInput in = OcrInput::from_sequences({{4, 9, 13}}, {random_boxes(3, rng)});
  ag::Tape<double> t;
  const ag::Var e = f.enc.embed(t, in);
  const OcrEmbeddings out = f.enc.encode(t, e, in);
  CHECK((t.value(out.values) - t.value(e)).norm() == 0.0);
}

TEST_CASE("encoder gradient matches finite differences") {
  Fixture f;
  std::mt19937_64 rng(11);
  const OcrInput in = OcrInput::from_sequences({{4, 9, 13, 2}, {6, 7}}, {random_boxes(4, rng), random_boxes(2, rng)});
  Mat<double> w(8, 16);
  std::normal_distribution<double> n(0, 1);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = n(rng);
  ag::Tape<double> base;
  Mat<double> emb = base.value(f.enc.embed(base, in));

  auto loss = [&](ag::Tape<double>& t, ag::Var e) {
    const OcrEmbeddings o = f.enc.encode(t, e, in);
    return ag::sum_all(t, ag::gelu(t, ag::add(t, o.values, t.constant(w))));
  };
  ag::Tape<double> t;
  const ag::Var e = t.leaf(emb);
  t.backward(loss(t, e));
  const Mat<double> grad = t.grad(e);
  for (Eigen::Index k : {0L, 17L, 40L, 63L}) {
    const double num = oracle::central_difference(emb.data()[k], [&] {
      ag::Tape<double> tt;
      return tt.value(loss(tt, tt.leaf(emb)))(0, 0);
    });
    CHECK(std::abs(num - grad.data()[k]) <= 1e-4 * std::max(1e-3, std::abs(num)));
  }
}

TEST_CASE("rows without real tokens are rejected") {
  Fixture f;
  OcrInput in = OcrInput::from_sequences({{4, 5}}, {{{0, 0, 0.1, 0.1}, {0, 0, 0.1, 0.1}}});
  in.pad_mask.assign(2, 0);
  ag::Tape<double> t;
  CHECK_THROWS_AS(f.enc(t, in), ValidationError);
}
