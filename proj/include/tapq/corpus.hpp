#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace tapq {

/// Axis-aligned box in normalized page coordinates, origin at the top-left.
struct BoundingBox {
  double x0 = 0.0;
  double y0 = 0.0;
  double x1 = 0.0;
  double y1 = 0.0;

  bool valid() const;
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct OcrDocument {
  std::string doc_id;
  std::vector<std::string> tokens;
  std::vector<BoundingBox> bboxes;
  std::uint32_t page_index = 0;

  std::size_t size() const { return tokens.size(); }
  friend bool operator==(const OcrDocument&, const OcrDocument&) = default;
};

/// Throws ValidationError when the document breaks a structural invariant
/// (length mismatch, empty, invalid box, special or whitespace-bearing token).
void validate(const OcrDocument& doc);

// Special-token spelling shared by the corpus and the vocabulary.
inline constexpr const char* kPadToken = "<pad>";
inline constexpr const char* kUnkToken = "<unk>";
inline constexpr const char* kDecToken = "<dec>";
inline constexpr const char* kClsToken = "<cls>";

std::string sentinel_token(std::size_t index);
/// Returns the sentinel index if `token` spells <extra_id_N>, otherwise -1.
long sentinel_index(const std::string& token);
bool is_special_token(const std::string& token);

/// A masked span [start, end] over original token indices, both inclusive.
struct Span {
  std::size_t start = 0;
  std::size_t end = 0;

  std::size_t length() const { return end - start + 1; }
  friend bool operator==(const Span&, const Span&) = default;
};

struct TargetEntry {
  std::size_t sentinel = 0;
  std::string text;  // original span words joined by single spaces

  friend bool operator==(const TargetEntry&, const TargetEntry&) = default;
};

struct MaskedExample {
  std::vector<std::string> noisy_tokens;
  std::vector<BoundingBox> noisy_bboxes;
  std::vector<TargetEntry> target;
  std::vector<Span> spans;
  std::string source_doc_id;

  std::size_t masked_token_count() const;
};

BoundingBox min_covering_bbox(std::span<const BoundingBox> boxes);

/// Span-corrupts `doc`: spans are drawn until round(density * n) tokens are
/// masked (at least one, never all). Each span collapses to one sentinel whose
/// box covers the span. Span lengths are 1 + Geometric with the given mean.
MaskedExample mask_spans(const OcrDocument& doc, double mask_density, double mean_span_len,
                         std::mt19937_64& rng);

/// Re-expands sentinels in `noisy_tokens` with the span text from `target`.
std::vector<std::string> expand_target(std::span<const std::string> noisy_tokens,
                                       std::span<const TargetEntry> target);

/// Parameters of the synthetic form generator.
struct LayoutSpec {
  std::uint32_t rows = 4;
  std::uint32_t cols = 2;
  std::uint32_t min_tokens = 48;
  std::uint32_t max_tokens = 96;
  std::uint32_t n_doc_types = 4;
  std::uint32_t n_keys = 24;           // size of the key pool (at most key_pool_capacity())
  std::uint32_t keys_per_template = 8;
  std::uint32_t n_entities = 32;       // per-document random values are drawn from this pool

  void check() const;
};

std::size_t key_pool_capacity();

/// Deterministic in `seed`. Documents are key/value forms: every document has
/// a type that fixes which keys appear and in what order, categorical keys take
/// a type-specific value, and entity keys carry a per-document value that
/// repeats whenever the key recurs. Every key owns one grid cell (its pool
/// index modulo the cell count) where its fields stack as lines; the key sits
/// in the left half of the line and its value in the right half.
OcrDocument generate_synthetic_document(std::uint64_t seed, const LayoutSpec& spec);

/// Pages share doc_id, type and entity values; page_index counts up from 0.
std::vector<OcrDocument> generate_multipage_document(std::uint64_t seed, const LayoutSpec& spec,
                                                     std::uint32_t n_pages);

std::vector<OcrDocument> generate_corpus(std::size_t n, std::uint64_t seed, const LayoutSpec& spec);

// JSONL corpus I/O. One document per line:
//   {"doc_id": str, "page_index": int, "tokens": [str], "bboxes": [[x0,y0,x1,y1]]}
void save_corpus(std::span<const OcrDocument> docs, const std::filesystem::path& path);
std::vector<OcrDocument> load_corpus(const std::filesystem::path& path);

// Masked-example cache: the corpus line format plus "target" and "spans".
void save_masked_examples(std::span<const MaskedExample> examples,
                          const std::filesystem::path& path);
std::vector<MaskedExample> load_masked_examples(const std::filesystem::path& path);

}  // namespace tapq
