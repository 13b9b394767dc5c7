#include <doctest.h>

#include <filesystem>
#include <random>
#include <sstream>

#include "tapq/error.hpp"
#include "tapq/tokenizer.hpp"

using namespace tapq;

namespace {

OcrDocument doc_of(const std::string& text) {
  OcrDocument d;
  d.doc_id = "t";
  std::istringstream in(text);
  for (std::string w; in >> w;) {
    d.tokens.push_back(w);
    d.bboxes.push_back({0, 0, 0.1, 0.1});
  }
  return d;
}

// Independent decoder: walks ids, opening a new entry at each sentinel id.
std::vector<std::pair<std::size_t, std::string>> decode_oracle(const Vocabulary& v, const std::vector<TokenId>& ids) {
  std::vector<std::pair<std::size_t, std::string>> out;
  for (TokenId id : ids) {
    const std::string& tok = v.token(id);
    if (tok.rfind("<extra_id_", 0) == 0) {
      out.emplace_back(std::stoul(tok.substr(10, tok.size() - 11)), "");
    } else {
      REQUIRE(!out.empty());
      if (!out.back().second.empty()) out.back().second += ' ';
      out.back().second += tok;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("vocabulary reserves specials and orders words") {
  const std::vector<OcrDocument> corpus{doc_of("a a b")};
  const Vocabulary v = Vocabulary::build(corpus, 1);
  CHECK(v.id(kPadToken) == 0);
  CHECK(v.id(kUnkToken) == Vocabulary::kUnk);
  CHECK(v.id(kDecToken) == Vocabulary::kDec);
  CHECK(v.id(kClsToken) == Vocabulary::kCls);
  CHECK(v.sentinel_id(0) == 4);
  CHECK(v.id("<extra_id_31>") == 35);
  CHECK(v.first_word_id() == 36);
  CHECK(v.id("a") == 36);
  CHECK(v.id("b") == 37);
  CHECK(v.size() == 38);
  CHECK(v.id("zzz") == Vocabulary::kUnk);

  const Vocabulary strict = Vocabulary::build(corpus, 2);
  CHECK(strict.id("a") == 36);
  CHECK(strict.encode_text("a b") == std::vector<TokenId>{36, Vocabulary::kUnk});

  CHECK(Vocabulary::build(corpus, 1) == v);

  const std::vector<OcrDocument> ties{doc_of("c b a b c")};
  const Vocabulary t = Vocabulary::build(ties, 1);
  CHECK(t.token(t.first_word_id()) == "b");
  CHECK(t.token(t.first_word_id() + 1) == "c");
  CHECK(t.token(t.first_word_id() + 2) == "a");
}

TEST_CASE("special spellings in the corpus are rejected") {
  OcrDocument d = doc_of("a");
  d.tokens[0] = "<cls>";
  CHECK_THROWS(Vocabulary::build(std::vector<OcrDocument>{d}, 1));
}

TEST_CASE("encode_target interleaves sentinels and words") {
  const std::vector<OcrDocument> corpus{doc_of("hello big world")};
  const Vocabulary v = Vocabulary::build(corpus, 1);
  const std::vector<TargetEntry> target{{0, "hello"}, {1, "big world"}};
  CHECK(v.encode_target(target) ==
        std::vector<TokenId>{v.sentinel_id(0), v.id("hello"), v.sentinel_id(1), v.id("big"), v.id("world")});
  CHECK(v.encode_target(std::vector<TargetEntry>{}).empty());
  CHECK(v.decode_target(v.encode_target(target)) == target);

  CHECK_THROWS_AS(v.encode_target(std::vector<TargetEntry>{{32, "hello"}}), CapacityError);
  CHECK_THROWS_AS(v.sentinel_id(32), CapacityError);
}

TEST_CASE("random targets survive encode and decode") {
  std::string text;
  for (int i = 0; i < 50; ++i) text += "w" + std::to_string(i) + " ";
  const std::vector<OcrDocument> corpus{doc_of(text)};
  const Vocabulary v = Vocabulary::build(corpus, 1);
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<int> word(0, 49), len(1, 4), count(0, 6);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<TargetEntry> target;
    const int m = count(rng);
    for (int i = 0; i < m; ++i) {
      std::string span;
      const int l = len(rng);
      for (int k = 0; k < l; ++k) span += (k ? " w" : "w") + std::to_string(word(rng));
      target.push_back({static_cast<std::size_t>(i), span});
    }
    const auto ids = v.encode_target(target);
    CHECK(v.decode_target(ids) == target);
    std::vector<std::pair<std::size_t, std::string>> expect;
    for (const auto& e : target) expect.emplace_back(e.sentinel, e.text);
    CHECK(decode_oracle(v, ids) == expect);
  }
}

TEST_CASE("vocabulary JSON round trip") {
  const std::vector<OcrDocument> corpus{doc_of("x y y z z z")};
  const Vocabulary v = Vocabulary::build(corpus, 1, 8);
  const Vocabulary back = Vocabulary::from_json(v.to_json());
  CHECK(back == v);
  CHECK(back.max_sentinels() == 8);
  CHECK(back.id("z") == v.id("z"));

  const auto path = std::filesystem::temp_directory_path() / "tapq_vocab_test.json";
  v.save(path);
  CHECK(Vocabulary::load(path) == v);
  std::filesystem::remove(path);
}
