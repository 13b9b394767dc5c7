#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "tapq/corpus.hpp"

namespace tapq {

using TokenId = std::int32_t;

/// Word-level vocabulary. Ids [0, first_word_id()) are reserved for
/// <pad>, <unk>, <dec>, <cls> and the sentinels <extra_id_0..max_sentinels-1>,
/// in that order. Words follow, ordered by descending count then lexicographically.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kDec = 2;
  static constexpr TokenId kCls = 3;
  static constexpr std::size_t kDefaultMaxSentinels = 32;

  Vocabulary() : Vocabulary(kDefaultMaxSentinels) {}
  explicit Vocabulary(std::size_t max_sentinels);

  static Vocabulary build(std::span<const OcrDocument> corpus, std::size_t min_count,
                          std::size_t max_sentinels = kDefaultMaxSentinels);

  std::size_t size() const { return id_to_word_.size(); }
  std::size_t max_sentinels() const { return max_sentinels_; }
  TokenId first_word_id() const { return static_cast<TokenId>(4 + max_sentinels_); }

  /// Sentinel i's id; CapacityError when i >= max_sentinels().
  TokenId sentinel_id(std::size_t i) const;
  bool is_sentinel(TokenId id) const { return id >= 4 && id < first_word_id(); }
  bool is_word(TokenId id) const { return id >= first_word_id() && static_cast<std::size_t>(id) < size(); }

  /// Maps any token, special spellings included; unknown words map to <unk>.
  TokenId id(const std::string& token) const;
  const std::string& token(TokenId id) const;

  std::vector<TokenId> encode(std::span<const std::string> tokens) const;
  std::vector<TokenId> encode_text(const std::string& whitespace_separated) const;

  /// (sentinel_i, span words...) for every entry, in order.
  std::vector<TokenId> encode_target(std::span<const TargetEntry> target) const;
  std::vector<TargetEntry> decode_target(std::span<const TokenId> ids) const;

  std::string to_json() const;
  static Vocabulary from_json(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.max_sentinels_ == b.max_sentinels_ && a.id_to_word_ == b.id_to_word_;
  }

 private:
  void add(const std::string& token);

  std::size_t max_sentinels_;
  std::vector<std::string> id_to_word_;
  std::unordered_map<std::string, TokenId> word_to_id_;
};

}  // namespace tapq
