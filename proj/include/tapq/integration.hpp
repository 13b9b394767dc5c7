#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tapq/corpus.hpp"
#include "tapq/model.hpp"
#include "tapq/tokenizer.hpp"
#include "tapq/trainer.hpp"

namespace tapq {

/// Per-page query states: `vectors` is [pages * queries, d], page-major.
struct CompressedOcr {
  std::size_t pages = 0;
  std::size_t queries = 0;
  std::size_t width = 0;
  ag::Mat<float> vectors;
  std::vector<std::string> doc_ids;
  std::string instruction;

  /// Rows of page `p` as a [queries, width] block.
  ag::Mat<float> page(std::size_t p) const { return vectors.middleRows(static_cast<Eigen::Index>(p * queries), static_cast<Eigen::Index>(queries)); }
};

/// Mask regime used when compressing for a downstream model: the queries must
/// see the instruction, so the bidirectional regime is the default.
inline constexpr MaskRegime kInferenceRegime = MaskRegime::kBidirectional;

/// Encodes `doc` (truncated to the model's max OCR length) and returns r_q for
/// the text stream [<cls>, instruction words...].
CompressedOcr compress(const Model<float>& model, const Vocabulary& vocab, const OcrDocument& doc,
                       const std::string& instruction, MaskRegime regime = kInferenceRegime);

/// Compresses each page on its own and stacks the blocks in page order.
CompressedOcr compress_multipage(const Model<float>& model, const Vocabulary& vocab,
                                 std::span<const OcrDocument> pages, const std::string& instruction,
                                 MaskRegime regime = kInferenceRegime);

CompressedOcr compress(const Checkpoint& ckpt, const OcrDocument& doc, const std::string& instruction);
CompressedOcr compress_multipage(const Checkpoint& ckpt, std::span<const OcrDocument> pages,
                                 const std::string& instruction);

enum class AssemblyMode { kBaseline, kFull, kLight };

std::string_view to_string(AssemblyMode mode);
/// "baseline" | "full" | "light"; ConfigError otherwise.
AssemblyMode parse_assembly_mode(std::string_view name);

enum class SlotKind { kVisual, kQueries, kRawOcr, kInstruction };
std::string_view to_string(SlotKind kind);

struct SlotSegment {
  SlotKind kind;
  std::size_t length = 0;
  long page = -1;  // -1 when the segment spans all pages

  friend bool operator==(const SlotSegment&, const SlotSegment&) = default;
};

struct AssemblyRequest {
  std::size_t pages = 1;
  std::size_t queries_per_page = 32;
  std::vector<std::size_t> raw_ocr_lengths;  // one entry per page
  std::size_t instruction_len = 0;
  std::size_t visual_tokens = 0;             // optional fixed visual prefix
  bool interleave_pages = false;             // full mode: [q_p, raw_p]* instead of [q*, raw*]
};

/// Ordered embedding slots handed to the downstream language model.
struct AssembledInput {
  AssemblyMode mode = AssemblyMode::kBaseline;
  std::vector<SlotSegment> segments;
  std::size_t seq_len = 0;
  std::size_t pages = 0;
  std::size_t queries_per_page = 0;
  std::size_t ocr_len = 0;
  std::size_t instruction_len = 0;
};

/// baseline = [raw_ocr, instruction]; full = [queries, raw_ocr, instruction];
/// light = [queries, instruction]. Visual tokens, if any, come first.
AssembledInput assemble_llm_input(const AssemblyRequest& req, AssemblyMode mode);
AssembledInput assemble_llm_input(const CompressedOcr& compressed, std::span<const TokenId> instruction_ids,
                                  std::span<const TokenId> raw_ocr_ids, AssemblyMode mode);

struct LmArch {
  std::string name = "lm";
  std::uint64_t d_model = 2048;
  std::uint64_t layers = 24;
  std::uint64_t heads = 32;
  std::uint64_t ff_mult = 4;
};

/// Width/depth of the OCR module for cost purposes.
struct OcrModuleArch {
  std::uint64_t d_ocr = 64;
  std::uint64_t encoder_layers = 4;
  std::uint64_t d = 64;
  std::uint64_t ocrq_layers = 4;
  std::uint64_t ff_mult = 4;

  static OcrModuleArch from(const ModelConfig& cfg);
};

/// Forward FLOPs of one pre-norm transformer layer over n tokens, counting a
/// multiply-accumulate as 2: projections 8·n·d², scores and mixing 4·n²·d,
/// MLP 4·n·d²·ff_mult.
std::uint64_t attention_flops(std::uint64_t n, std::uint64_t d);
std::uint64_t mlp_flops(std::uint64_t n, std::uint64_t d, std::uint64_t ff_mult);

struct FlopsProfile {
  AssemblyMode mode = AssemblyMode::kBaseline;
  std::uint64_t seq_len = 0;
  std::uint64_t lm_attention = 0;
  std::uint64_t lm_mlp = 0;
  std::uint64_t lm_total = 0;
  std::uint64_t ocr_encoder = 0;
  std::uint64_t ocr_query = 0;
  std::uint64_t ocr_total = 0;
  std::uint64_t total = 0;

  std::string to_json() const;
  std::string to_table() const;
};

/// LM cost over the assembled sequence plus, for full/light, the OCR module:
/// its encoder over each page's OCR tokens and OCR-Q over K + instruction + 1
/// (the <cls> prefix) positions per page.
FlopsProfile flops_report(const LmArch& lm, const AssembledInput& assembled, const OcrModuleArch& ocr = {});

std::string flops_table(std::span<const FlopsProfile> profiles);

}  // namespace tapq
