#include "tapq/integration.hpp"

#include <iomanip>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "tapq/error.hpp"

namespace tapq {

CompressedOcr compress(const Model<float>& model, const Vocabulary& vocab, const OcrDocument& doc,
                       const std::string& instruction, MaskRegime regime) {
  if (doc.tokens.empty()) throw ValidationError("compress: document '" + doc.doc_id + "' is empty");
  if (doc.tokens.size() != doc.bboxes.size()) throw ValidationError("compress: tokens/bboxes length mismatch");
  const ModelConfig& cfg = model.config();
  const std::size_t n = std::min(doc.tokens.size(), cfg.max_ocr_len);
  std::vector<TokenId> ids = vocab.encode(std::span<const std::string>(doc.tokens).first(n));
  std::vector<BoundingBox> boxes(doc.bboxes.begin(), doc.bboxes.begin() + static_cast<std::ptrdiff_t>(n));
  const OcrInput ocr_in = OcrInput::from_sequences({ids}, {boxes});

  std::vector<TokenId> text{Vocabulary::kCls};
  for (TokenId id : vocab.encode_text(instruction)) {
    if (text.size() >= cfg.max_text_len) break;
    text.push_back(id);
  }
  const TextInput text_in = TextInput::from_sequences({text});

  ag::Tape<float> tape;
  const OcrEmbeddings ocr = model.encoder()(tape, ocr_in);
  const DualStreamOutput out = model.ocrq()(tape, text_in, ocr, regime);

  CompressedOcr c;
  c.pages = 1;
  c.queries = out.queries;
  c.width = cfg.d;
  c.vectors = tape.value(out.r_q);
  c.doc_ids = {doc.doc_id};
  c.instruction = instruction;
  return c;
}

CompressedOcr compress_multipage(const Model<float>& model, const Vocabulary& vocab,
                                 std::span<const OcrDocument> pages, const std::string& instruction,
                                 MaskRegime regime) {
  if (pages.empty()) throw ValidationError("compress_multipage: no pages");
  CompressedOcr all;
  all.queries = model.config().num_queries;
  all.width = model.config().d;
  all.instruction = instruction;
  all.vectors.resize(static_cast<Eigen::Index>(pages.size() * all.queries), static_cast<Eigen::Index>(all.width));
  for (const auto& page : pages) {
    const CompressedOcr one = compress(model, vocab, page, instruction, regime);
    all.vectors.middleRows(static_cast<Eigen::Index>(all.pages * all.queries), static_cast<Eigen::Index>(all.queries)) =
        one.vectors;
    all.doc_ids.push_back(page.doc_id);
    ++all.pages;
  }
  return all;
}

CompressedOcr compress(const Checkpoint& ckpt, const OcrDocument& doc, const std::string& instruction) {
  const auto model = load_model<float>(ckpt);
  return compress(*model, ckpt.vocabulary(), doc, instruction);
}

CompressedOcr compress_multipage(const Checkpoint& ckpt, std::span<const OcrDocument> pages,
                                 const std::string& instruction) {
  const auto model = load_model<float>(ckpt);
  return compress_multipage(*model, ckpt.vocabulary(), pages, instruction);
}

std::string_view to_string(AssemblyMode mode) {
  switch (mode) {
    case AssemblyMode::kBaseline: return "baseline";
    case AssemblyMode::kFull: return "full";
    case AssemblyMode::kLight: return "light";
  }
  return "unknown";
}

AssemblyMode parse_assembly_mode(std::string_view name) {
  if (name == "baseline") return AssemblyMode::kBaseline;
  if (name == "full") return AssemblyMode::kFull;
  if (name == "light") return AssemblyMode::kLight;
  throw ConfigError("unknown assembly mode '" + std::string(name) + "' (expected baseline, full or light)");
}

std::string_view to_string(SlotKind kind) {
  switch (kind) {
    case SlotKind::kVisual: return "visual";
    case SlotKind::kQueries: return "queries";
    case SlotKind::kRawOcr: return "raw_ocr";
    case SlotKind::kInstruction: return "instruction";
  }
  return "unknown";
}

AssembledInput assemble_llm_input(const AssemblyRequest& req, AssemblyMode mode) {
  if (req.pages == 0) throw ValidationError("assemble_llm_input: need at least one page");
  if (req.raw_ocr_lengths.size() != req.pages) {
    throw ValidationError("assemble_llm_input: expected one raw OCR length per page");
  }
  AssembledInput a;
  a.mode = mode;
  a.pages = req.pages;
  a.queries_per_page = req.queries_per_page;
  a.ocr_len = std::accumulate(req.raw_ocr_lengths.begin(), req.raw_ocr_lengths.end(), std::size_t{0});
  a.instruction_len = req.instruction_len;

  if (req.visual_tokens > 0) a.segments.push_back({SlotKind::kVisual, req.visual_tokens, -1});
  const std::size_t all_queries = req.pages * req.queries_per_page;
  switch (mode) {
    case AssemblyMode::kBaseline:
      a.segments.push_back({SlotKind::kRawOcr, a.ocr_len, -1});
      break;
    case AssemblyMode::kFull:
      if (req.interleave_pages) {
        for (std::size_t p = 0; p < req.pages; ++p) {
          a.segments.push_back({SlotKind::kQueries, req.queries_per_page, static_cast<long>(p)});
          a.segments.push_back({SlotKind::kRawOcr, req.raw_ocr_lengths[p], static_cast<long>(p)});
        }
      } else {
        a.segments.push_back({SlotKind::kQueries, all_queries, -1});
        a.segments.push_back({SlotKind::kRawOcr, a.ocr_len, -1});
      }
      break;
    case AssemblyMode::kLight:
      a.segments.push_back({SlotKind::kQueries, all_queries, -1});
      break;
  }
  a.segments.push_back({SlotKind::kInstruction, req.instruction_len, -1});
  for (const auto& s : a.segments) a.seq_len += s.length;
  return a;
}

AssembledInput assemble_llm_input(const CompressedOcr& compressed, std::span<const TokenId> instruction_ids,
                                  std::span<const TokenId> raw_ocr_ids, AssemblyMode mode) {
  AssemblyRequest req;
  req.pages = 1;
  req.queries_per_page = compressed.pages * compressed.queries;
  req.raw_ocr_lengths = {raw_ocr_ids.size()};
  req.instruction_len = instruction_ids.size();
  AssembledInput a = assemble_llm_input(req, mode);
  a.pages = compressed.pages;
  a.queries_per_page = compressed.queries;
  return a;
}

OcrModuleArch OcrModuleArch::from(const ModelConfig& cfg) {
  return OcrModuleArch{cfg.d_ocr, cfg.encoder_layers, cfg.d, cfg.ocrq_layers, cfg.ff_mult};
}

std::uint64_t attention_flops(std::uint64_t n, std::uint64_t d) { return 8 * n * d * d + 4 * n * n * d; }

std::uint64_t mlp_flops(std::uint64_t n, std::uint64_t d, std::uint64_t ff_mult) { return 4 * n * d * d * ff_mult; }

FlopsProfile flops_report(const LmArch& lm, const AssembledInput& assembled, const OcrModuleArch& ocr) {
  if (lm.d_model == 0 || lm.layers == 0 || lm.heads == 0 || lm.ff_mult == 0) {
    throw ConfigError("flops_report: LM dimensions must be positive");
  }
  FlopsProfile f;
  f.mode = assembled.mode;
  f.seq_len = assembled.seq_len;
  f.lm_attention = lm.layers * attention_flops(f.seq_len, lm.d_model);
  f.lm_mlp = lm.layers * mlp_flops(f.seq_len, lm.d_model, lm.ff_mult);
  f.lm_total = f.lm_attention + f.lm_mlp;
  if (assembled.mode != AssemblyMode::kBaseline) {
    // Pages are compressed independently; the raw OCR splits evenly across pages.
    const std::uint64_t pages = assembled.pages;
    const std::uint64_t per_page = (assembled.ocr_len + pages - 1) / pages;
    const std::uint64_t ocrq_len = assembled.queries_per_page + assembled.instruction_len + 1;
    for (std::uint64_t p = 0; p < pages; ++p) {
      const std::uint64_t l = std::min<std::uint64_t>(per_page, assembled.ocr_len - std::min(assembled.ocr_len, p * per_page));
      f.ocr_encoder += ocr.encoder_layers * (attention_flops(l, ocr.d_ocr) + mlp_flops(l, ocr.d_ocr, ocr.ff_mult));
      f.ocr_query += ocr.ocrq_layers * (attention_flops(ocrq_len, ocr.d) + mlp_flops(ocrq_len, ocr.d, ocr.ff_mult));
    }
    f.ocr_total = f.ocr_encoder + f.ocr_query;
  }
  f.total = f.lm_total + f.ocr_total;
  return f;
}

std::string FlopsProfile::to_json() const {
  nlohmann::json j;
  j["mode"] = std::string(to_string(mode));
  j["seq_len"] = seq_len;
  j["lm_attention_flops"] = lm_attention;
  j["lm_mlp_flops"] = lm_mlp;
  j["lm_flops"] = lm_total;
  j["ocr_encoder_flops"] = ocr_encoder;
  j["ocr_query_flops"] = ocr_query;
  j["ocr_flops"] = ocr_total;
  j["total_flops"] = total;
  j["total_tflops"] = static_cast<double>(total) / 1e12;
  return j.dump(2);
}

std::string flops_table(std::span<const FlopsProfile> profiles) {
  std::ostringstream os;
  os << std::left << std::setw(10) << "mode" << std::right << std::setw(10) << "seq_len" << std::setw(16) << "lm_flops"
     << std::setw(16) << "ocr_flops" << std::setw(16) << "total_flops" << std::setw(12) << "tflops" << '\n';
  for (const auto& p : profiles) {
    os << std::left << std::setw(10) << to_string(p.mode) << std::right << std::setw(10) << p.seq_len << std::setw(16)
       << p.lm_total << std::setw(16) << p.ocr_total << std::setw(16) << p.total << std::setw(12) << std::fixed
       << std::setprecision(4) << static_cast<double>(p.total) / 1e12 << '\n';
    os.unsetf(std::ios::fixed);
  }
  return os.str();
}

std::string FlopsProfile::to_table() const { return flops_table(std::span<const FlopsProfile>(this, 1)); }

}  // namespace tapq
