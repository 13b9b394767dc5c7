#include "tapq/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "tapq/error.hpp"

namespace tapq {

namespace {

constexpr std::array<const char*, 32> kKeyWords = {
    "invoice:", "date:",   "total:",   "name:",    "address:", "phone:",  "email:",   "account:",
    "amount:",  "due:",    "tax:",     "order:",   "ship:",    "bill:",   "item:",    "qty:",
    "price:",   "vendor:", "client:",  "ref:",     "status:",  "method:", "terms:",   "memo:",
    "dept:",    "code:",   "region:",  "branch:",  "agent:",   "issued:", "period:",  "balance:"};

bool is_entity_key(std::size_t key) { return key % 3 == 0; }

std::string key_stem(std::size_t key) {
  std::string word = kKeyWords[key];
  word.pop_back();  // trailing ':'
  return word;
}

std::string categorical_value(std::size_t key, std::uint32_t doc_type) {
  return key_stem(key) + "_" + static_cast<char>('a' + doc_type % 26) +
         (doc_type >= 26 ? std::to_string(doc_type / 26) : std::string{});
}

std::string entity_word(std::uint32_t id) {
  std::ostringstream os;
  os << 'e' << id;
  return os.str();
}

// Sorted key subset for a document type; independent of the document seed.
std::vector<std::size_t> template_keys(const LayoutSpec& spec, std::uint32_t doc_type) {
  std::mt19937_64 rng(0x9e3779b97f4a7c15ULL ^ (static_cast<std::uint64_t>(doc_type) * 7919ULL));
  std::vector<std::size_t> keys(spec.n_keys);
  for (std::size_t i = 0; i < keys.size(); ++i) keys[i] = i;
  std::shuffle(keys.begin(), keys.end(), rng);
  keys.resize(spec.keys_per_template);
  std::sort(keys.begin(), keys.end());
  return keys;
}

struct DocDraw {
  std::uint32_t doc_type = 0;
  std::vector<std::size_t> keys;
  std::vector<std::string> values;  // aligned with keys
};

DocDraw draw_document(std::mt19937_64& rng, const LayoutSpec& spec) {
  DocDraw draw;
  draw.doc_type = std::uniform_int_distribution<std::uint32_t>(0, spec.n_doc_types - 1)(rng);
  draw.keys = template_keys(spec, draw.doc_type);
  std::uniform_int_distribution<std::uint32_t> entity(0, spec.n_entities - 1);
  for (std::size_t key : draw.keys) {
    draw.values.push_back(is_entity_key(key) ? entity_word(entity(rng))
                                             : categorical_value(key, draw.doc_type));
  }
  return draw;
}

OcrDocument layout_page(const DocDraw& draw, std::mt19937_64& rng, const LayoutSpec& spec,
                        std::string doc_id, std::uint32_t page_index) {
  const auto n = std::uniform_int_distribution<std::uint32_t>(spec.min_tokens, spec.max_tokens)(rng);
  OcrDocument doc;
  doc.doc_id = std::move(doc_id);
  doc.page_index = page_index;

  // Fields are emitted in template order, cycling, until n tokens exist.
  std::vector<std::size_t> field_of_token;
  std::size_t field = 0;
  while (doc.tokens.size() < n) {
    const std::size_t slot = field % draw.keys.size();
    doc.tokens.push_back(kKeyWords[draw.keys[slot]]);
    field_of_token.push_back(field);
    if (doc.tokens.size() < n) {
      doc.tokens.push_back(draw.values[slot]);
      field_of_token.push_back(field);
    }
    ++field;
  }
  // Each key owns the grid cell key % cells; its fields stack as lines there.
  const std::size_t n_fields = field;
  const std::size_t cells = static_cast<std::size_t>(spec.rows) * spec.cols;
  std::vector<std::size_t> cell_of(n_fields), line_of(n_fields), used(cells, 0);
  for (std::size_t f = 0; f < n_fields; ++f) {
    cell_of[f] = draw.keys[f % draw.keys.size()] % cells;
    line_of[f] = used[cell_of[f]]++;
  }
  const std::size_t lines = *std::max_element(used.begin(), used.end());
  const double cell_w = 1.0 / spec.cols;
  const double cell_h = 1.0 / spec.rows;
  const double line_h = cell_h / static_cast<double>(lines);
  std::uniform_real_distribution<double> jitter(-0.02, 0.02);

  doc.bboxes.resize(doc.tokens.size());
  for (std::size_t t = 0; t < doc.tokens.size(); ++t) {
    const std::size_t f = field_of_token[t];
    const std::size_t cell = cell_of[f];
    const std::size_t line = line_of[f];
    const double cx = static_cast<double>(cell % spec.cols) * cell_w;
    const double cy = static_cast<double>(cell / spec.cols) * cell_h + static_cast<double>(line) * line_h;
    const bool is_key = t == 0 || field_of_token[t - 1] != f;
    const double left = is_key ? 0.05 : 0.55;
    const double right = is_key ? 0.45 : 0.95;
    BoundingBox& box = doc.bboxes[t];
    box.x0 = cx + (left + jitter(rng)) * cell_w;
    box.x1 = cx + (right + jitter(rng)) * cell_w;
    box.y0 = cy + 0.1 * line_h;
    box.y1 = cy + 0.9 * line_h;
  }
  return doc;
}

nlohmann::json box_to_json(const BoundingBox& b) { return nlohmann::json::array({b.x0, b.y0, b.x1, b.y1}); }

BoundingBox box_from_json(const nlohmann::json& j, std::size_t line) {
  if (!j.is_array() || j.size() != 4) throw ParseError("bbox must be an array of 4 numbers", line);
  for (const auto& v : j) {
    if (!v.is_number()) throw ParseError("bbox must be an array of 4 numbers", line);
  }
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

template <typename Fn>
void for_each_line(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("malformed JSON: ") + e.what(), line_no);
    }
    if (!j.is_object()) throw ParseError("expected a JSON object", line_no);
    fn(j, line_no);
  }
}

OcrDocument document_from_json(const nlohmann::json& j, std::size_t line) {
  OcrDocument doc;
  try {
    doc.doc_id = j.at("doc_id").get<std::string>();
    doc.page_index = j.value("page_index", 0U);
    doc.tokens = j.at("tokens").get<std::vector<std::string>>();
    for (const auto& b : j.at("bboxes")) doc.bboxes.push_back(box_from_json(b, line));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad document fields: ") + e.what(), line);
  }
  return doc;
}

nlohmann::json document_to_json(const std::string& doc_id, std::uint32_t page_index,
                                 std::span<const std::string> tokens,
                                 std::span<const BoundingBox> boxes) {
  nlohmann::json j;
  j["doc_id"] = doc_id;
  j["page_index"] = page_index;
  j["tokens"] = std::vector<std::string>(tokens.begin(), tokens.end());
  auto arr = nlohmann::json::array();
  for (const auto& b : boxes) arr.push_back(box_to_json(b));
  j["bboxes"] = std::move(arr);
  return j;
}

void write_lines(const std::filesystem::path& path, const std::vector<nlohmann::json>& lines) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot open " + path.string() + " for writing");
  for (const auto& j : lines) out << j.dump() << '\n';
  if (!out) throw RuntimeError("write failed: " + path.string());
}

}  // namespace

bool BoundingBox::valid() const {
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  return in_unit(x0) && in_unit(y0) && in_unit(x1) && in_unit(y1) && x0 <= x1 && y0 <= y1;
}

void validate(const OcrDocument& doc) {
  if (doc.tokens.empty()) throw ValidationError("document '" + doc.doc_id + "' has no tokens");
  if (doc.tokens.size() != doc.bboxes.size()) {
    throw ValidationError("document '" + doc.doc_id + "': " + std::to_string(doc.tokens.size()) +
                          " tokens but " + std::to_string(doc.bboxes.size()) + " bboxes");
  }
  for (std::size_t i = 0; i < doc.tokens.size(); ++i) {
    const auto& tok = doc.tokens[i];
    if (tok.empty() || tok.find_first_of(" \t\r\n") != std::string::npos) {
      throw ValidationError("document '" + doc.doc_id + "': token " + std::to_string(i) +
                            " is empty or contains whitespace");
    }
    if (is_special_token(tok)) {
      throw ValidationError("document '" + doc.doc_id + "': token " + std::to_string(i) +
                            " collides with special token " + tok);
    }
    if (!doc.bboxes[i].valid()) {
      throw ValidationError("document '" + doc.doc_id + "': bbox " + std::to_string(i) +
                            " outside [0,1] or inverted");
    }
  }
}

std::string sentinel_token(std::size_t index) { return "<extra_id_" + std::to_string(index) + ">"; }

long sentinel_index(const std::string& token) {
  static const std::string prefix = "<extra_id_";
  if (token.size() <= prefix.size() + 1 || token.compare(0, prefix.size(), prefix) != 0 ||
      token.back() != '>') {
    return -1;
  }
  const std::string digits = token.substr(prefix.size(), token.size() - prefix.size() - 1);
  if (digits.empty() || digits.size() > 9 ||
      !std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    return -1;
  }
  return std::stol(digits);
}

bool is_special_token(const std::string& token) {
  return token == kPadToken || token == kUnkToken || token == kDecToken || token == kClsToken ||
         sentinel_index(token) >= 0;
}

std::size_t MaskedExample::masked_token_count() const {
  std::size_t n = 0;
  for (const auto& s : spans) n += s.length();
  return n;
}

BoundingBox min_covering_bbox(std::span<const BoundingBox> boxes) {
  if (boxes.empty()) throw ValidationError("min_covering_bbox: empty box list");
  BoundingBox out = boxes.front();
  for (const auto& b : boxes.subspan(1)) {
    out.x0 = std::min(out.x0, b.x0);
    out.y0 = std::min(out.y0, b.y0);
    out.x1 = std::max(out.x1, b.x1);
    out.y1 = std::max(out.y1, b.y1);
  }
  return out;
}

MaskedExample mask_spans(const OcrDocument& doc, double mask_density, double mean_span_len,
                         std::mt19937_64& rng) {
  const std::size_t n = doc.size();
  if (n < 2) throw ValidationError("mask_spans: document needs at least 2 tokens");
  if (doc.bboxes.size() != n) throw ValidationError("mask_spans: tokens/bboxes length mismatch");
  if (!(mask_density > 0.0 && mask_density < 1.0)) {
    throw ConfigError("mask_density must lie in (0, 1)");
  }
  if (!(mean_span_len >= 1.0)) throw ConfigError("mean_span_len must be >= 1");

  const auto wanted = static_cast<std::size_t>(std::llround(mask_density * static_cast<double>(n)));
  const std::size_t budget = std::clamp<std::size_t>(wanted, 1, n - 1);

  std::geometric_distribution<std::size_t> extra(1.0 / mean_span_len);
  std::vector<bool> taken(n, false);
  std::vector<Span> spans;
  std::size_t masked = 0;
  // Spans may neither overlap nor touch, so every sentinel stands for one run.
  for (std::size_t attempts = 0; masked < budget && attempts < 100 * n; ++attempts) {
    const std::size_t len = std::min(1 + extra(rng), budget - masked);
    const std::size_t start = std::uniform_int_distribution<std::size_t>(0, n - len)(rng);
    const std::size_t lo = start == 0 ? 0 : start - 1;
    const std::size_t hi = std::min(n - 1, start + len);
    bool free = true;
    for (std::size_t i = lo; i <= hi && free; ++i) free = !taken[i];
    if (!free) continue;
    for (std::size_t i = start; i < start + len; ++i) taken[i] = true;
    spans.push_back({start, start + len - 1});
    masked += len;
  }
  std::sort(spans.begin(), spans.end(), [](const Span& a, const Span& b) { return a.start < b.start; });

  MaskedExample ex;
  ex.source_doc_id = doc.doc_id;
  ex.spans = spans;
  std::size_t next = 0;
  for (std::size_t k = 0; k < spans.size(); ++k) {
    const Span& s = spans[k];
    for (; next < s.start; ++next) {
      ex.noisy_tokens.push_back(doc.tokens[next]);
      ex.noisy_bboxes.push_back(doc.bboxes[next]);
    }
    ex.noisy_tokens.push_back(sentinel_token(k));
    ex.noisy_bboxes.push_back(
        min_covering_bbox(std::span<const BoundingBox>(doc.bboxes).subspan(s.start, s.length())));
    std::string text;
    for (std::size_t i = s.start; i <= s.end; ++i) {
      if (i > s.start) text += ' ';
      text += doc.tokens[i];
    }
    ex.target.push_back({k, std::move(text)});
    next = s.end + 1;
  }
  for (; next < n; ++next) {
    ex.noisy_tokens.push_back(doc.tokens[next]);
    ex.noisy_bboxes.push_back(doc.bboxes[next]);
  }
  return ex;
}

std::vector<std::string> expand_target(std::span<const std::string> noisy_tokens,
                                       std::span<const TargetEntry> target) {
  std::vector<std::string> out;
  for (const auto& tok : noisy_tokens) {
    const long s = sentinel_index(tok);
    if (s < 0) {
      out.push_back(tok);
      continue;
    }
    auto it = std::find_if(target.begin(), target.end(),
                           [s](const TargetEntry& e) { return e.sentinel == static_cast<std::size_t>(s); });
    if (it == target.end()) throw ValidationError("expand_target: no target for " + tok);
    std::istringstream words(it->text);
    std::string w;
    while (words >> w) out.push_back(w);
  }
  return out;
}

std::size_t key_pool_capacity() { return kKeyWords.size(); }

void LayoutSpec::check() const {
  if (rows == 0 || cols == 0) throw ConfigError("layout grid needs at least one row and one column");
  if (min_tokens == 0 || min_tokens > max_tokens) {
    throw ConfigError("tokens-per-document range must satisfy 1 <= min <= max");
  }
  if (n_doc_types == 0) throw ConfigError("n_doc_types must be positive");
  if (n_keys == 0 || n_keys > key_pool_capacity()) {
    throw ConfigError("n_keys must lie in [1, " + std::to_string(key_pool_capacity()) + "]");
  }
  if (keys_per_template == 0 || keys_per_template > n_keys) {
    throw ConfigError("keys_per_template must lie in [1, n_keys]");
  }
  if (n_entities == 0) throw ConfigError("n_entities must be positive");
}

OcrDocument generate_synthetic_document(std::uint64_t seed, const LayoutSpec& spec) {
  spec.check();
  std::mt19937_64 rng(seed);
  const DocDraw draw = draw_document(rng, spec);
  return layout_page(draw, rng, spec, "doc-" + std::to_string(seed), 0);
}

std::vector<OcrDocument> generate_multipage_document(std::uint64_t seed, const LayoutSpec& spec,
                                                     std::uint32_t n_pages) {
  spec.check();
  if (n_pages == 0) throw ConfigError("n_pages must be positive");
  std::mt19937_64 rng(seed);
  const DocDraw draw = draw_document(rng, spec);
  std::vector<OcrDocument> pages;
  for (std::uint32_t p = 0; p < n_pages; ++p) {
    pages.push_back(layout_page(draw, rng, spec, "doc-" + std::to_string(seed), p));
  }
  return pages;
}

std::vector<OcrDocument> generate_corpus(std::size_t n, std::uint64_t seed, const LayoutSpec& spec) {
  spec.check();
  std::vector<OcrDocument> docs;
  docs.reserve(n);
  // Per-document seeds come from one stream so corpora with different base
  // seeds do not share documents.
  std::mt19937_64 seeder(seed);
  for (std::size_t i = 0; i < n; ++i) docs.push_back(generate_synthetic_document(seeder(), spec));
  return docs;
}

void save_corpus(std::span<const OcrDocument> docs, const std::filesystem::path& path) {
  std::vector<nlohmann::json> lines;
  lines.reserve(docs.size());
  for (const auto& d : docs) {
    validate(d);
    lines.push_back(document_to_json(d.doc_id, d.page_index, d.tokens, d.bboxes));
  }
  write_lines(path, lines);
}

std::vector<OcrDocument> load_corpus(const std::filesystem::path& path) {
  std::vector<OcrDocument> docs;
  for_each_line(path, [&](const nlohmann::json& j, std::size_t line) {
    OcrDocument doc = document_from_json(j, line);
    try {
      validate(doc);
    } catch (const ValidationError& e) {
      throw ValidationError("line " + std::to_string(line) + ": " + e.what());
    }
    docs.push_back(std::move(doc));
  });
  return docs;
}

void save_masked_examples(std::span<const MaskedExample> examples,
                          const std::filesystem::path& path) {
  std::vector<nlohmann::json> lines;
  for (const auto& ex : examples) {
    auto j = document_to_json(ex.source_doc_id, 0, ex.noisy_tokens, ex.noisy_bboxes);
    auto target = nlohmann::json::array();
    for (const auto& t : ex.target) target.push_back(nlohmann::json::array({t.sentinel, t.text}));
    auto spans = nlohmann::json::array();
    for (const auto& s : ex.spans) spans.push_back(nlohmann::json::array({s.start, s.end}));
    j["target"] = std::move(target);
    j["spans"] = std::move(spans);
    lines.push_back(std::move(j));
  }
  write_lines(path, lines);
}

std::vector<MaskedExample> load_masked_examples(const std::filesystem::path& path) {
  std::vector<MaskedExample> out;
  for_each_line(path, [&](const nlohmann::json& j, std::size_t line) {
    OcrDocument noisy = document_from_json(j, line);
    if (noisy.tokens.size() != noisy.bboxes.size()) {
      throw ValidationError("line " + std::to_string(line) + ": tokens/bboxes length mismatch");
    }
    MaskedExample ex;
    ex.source_doc_id = noisy.doc_id;
    ex.noisy_tokens = std::move(noisy.tokens);
    ex.noisy_bboxes = std::move(noisy.bboxes);
    for (const auto& b : ex.noisy_bboxes) {
      if (!b.valid()) throw ValidationError("line " + std::to_string(line) + ": bbox outside [0,1]");
    }
    try {
      for (const auto& t : j.at("target")) ex.target.push_back({t.at(0).get<std::size_t>(), t.at(1).get<std::string>()});
      for (const auto& s : j.at("spans")) ex.spans.push_back({s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>()});
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("bad target/spans: ") + e.what(), line);
    }
    out.push_back(std::move(ex));
  });
  return out;
}

}  // namespace tapq
