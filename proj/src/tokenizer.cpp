#include "tapq/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "tapq/error.hpp"

namespace tapq {

Vocabulary::Vocabulary(std::size_t max_sentinels) : max_sentinels_(max_sentinels) {
  add(kPadToken);
  add(kUnkToken);
  add(kDecToken);
  add(kClsToken);
  for (std::size_t i = 0; i < max_sentinels_; ++i) add(sentinel_token(i));
}

void Vocabulary::add(const std::string& token) {
  word_to_id_.emplace(token, static_cast<TokenId>(id_to_word_.size()));
  id_to_word_.push_back(token);
}

Vocabulary Vocabulary::build(std::span<const OcrDocument> corpus, std::size_t min_count,
                             std::size_t max_sentinels) {
  std::map<std::string, std::size_t> counts;
  for (const auto& doc : corpus) {
    for (const auto& tok : doc.tokens) {
      if (is_special_token(tok)) {
        throw ValidationError("document '" + doc.doc_id + "' contains special token " + tok);
      }
      ++counts[tok];
    }
  }
  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [word, n] : counts) {
    if (n >= min_count) ranked.emplace_back(word, n);
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });

  Vocabulary vocab(max_sentinels);
  for (const auto& [word, n] : ranked) vocab.add(word);
  return vocab;
}

TokenId Vocabulary::sentinel_id(std::size_t i) const {
  if (i >= max_sentinels_) {
    throw CapacityError("sentinel index " + std::to_string(i) + " exceeds vocabulary capacity " +
                        std::to_string(max_sentinels_));
  }
  return static_cast<TokenId>(4 + i);
}

TokenId Vocabulary::id(const std::string& token) const {
  auto it = word_to_id_.find(token);
  if (it != word_to_id_.end()) return it->second;
  if (sentinel_index(token) >= 0) return sentinel_id(static_cast<std::size_t>(sentinel_index(token)));
  return kUnk;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_word_.size()) {
    throw ValidationError("token id " + std::to_string(id) + " out of range");
  }
  return id_to_word_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Vocabulary::encode(std::span<const std::string> tokens) const {
  std::vector<TokenId> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

std::vector<TokenId> Vocabulary::encode_text(const std::string& whitespace_separated) const {
  std::istringstream in(whitespace_separated);
  std::vector<std::string> words;
  std::string w;
  while (in >> w) words.push_back(w);
  return encode(words);
}

std::vector<TokenId> Vocabulary::encode_target(std::span<const TargetEntry> target) const {
  std::vector<TokenId> out;
  for (const auto& entry : target) {
    out.push_back(sentinel_id(entry.sentinel));
    std::istringstream in(entry.text);
    std::string w;
    while (in >> w) out.push_back(id(w));
  }
  return out;
}

std::vector<TargetEntry> Vocabulary::decode_target(std::span<const TokenId> ids) const {
  std::vector<TargetEntry> out;
  for (TokenId id : ids) {
    if (is_sentinel(id)) {
      out.push_back({static_cast<std::size_t>(id - 4), {}});
      continue;
    }
    if (out.empty()) throw ValidationError("decode_target: word id before first sentinel");
    if (!out.back().text.empty()) out.back().text += ' ';
    out.back().text += token(id);
  }
  return out;
}

std::string Vocabulary::to_json() const {
  nlohmann::json j;
  std::vector<std::string> words(id_to_word_.begin() + first_word_id(), id_to_word_.end());
  j["words"] = words;
  nlohmann::json specials = nlohmann::json::object();
  for (TokenId i = 0; i < first_word_id(); ++i) specials[id_to_word_[static_cast<std::size_t>(i)]] = i;
  j["specials"] = specials;
  return j.dump();
}

Vocabulary Vocabulary::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("vocabulary JSON: ") + e.what());
  }
  try {
    std::size_t sentinels = 0;
    for (const auto& [tok, id] : j.at("specials").items()) {
      if (sentinel_index(tok) >= 0) ++sentinels;
    }
    Vocabulary vocab(sentinels);
    for (const auto& [tok, id] : j.at("specials").items()) {
      if (vocab.id(tok) != id.get<TokenId>()) {
        throw ValidationError("vocabulary JSON: special " + tok + " has unexpected id");
      }
    }
    for (const auto& w : j.at("words")) vocab.add(w.get<std::string>());
    return vocab;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("vocabulary JSON: ") + e.what());
  }
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ValidationError("cannot open " + path.string() + " for writing");
  out << to_json() << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return from_json(buf.str());
}

}  // namespace tapq
