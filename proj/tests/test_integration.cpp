#include <doctest.h>

#include <algorithm>

#include "oracles.hpp"
#include "tapq/error.hpp"
#include "tapq/integration.hpp"

using namespace tapq;

namespace {

struct Setup {
  std::vector<OcrDocument> corpus;
  Vocabulary vocab;
  std::unique_ptr<Model<float>> model;

  explicit Setup(std::size_t max_ocr_len = 128) {
    LayoutSpec spec;
    spec.min_tokens = 600;
    spec.max_tokens = 600;
    corpus = generate_corpus(4, 31, spec);
    vocab = Vocabulary::build(corpus, 1);
    ModelConfig cfg;
    cfg.vocab_size = vocab.size();
    cfg.d_ocr = 16;
    cfg.encoder_layers = 1;
    cfg.encoder_heads = 2;
    cfg.max_ocr_len = max_ocr_len;
    cfg.d = 16;
    cfg.ocrq_layers = 2;
    cfg.ocrq_heads = 2;
    cfg.num_queries = 4;
    cfg.d_contrast = 8;
    model = std::make_unique<Model<float>>(cfg, 3);
  }

  OcrDocument prefix(std::size_t doc, std::size_t n) const {
    OcrDocument d = corpus[doc];
    d.tokens.resize(n);
    d.bboxes.resize(n);
    return d;
  }
};

}  // namespace

TEST_CASE("compressed shape does not depend on OCR length") {
  Setup s(512);
  for (std::size_t n : {1, 10, 128, 500}) {
    const CompressedOcr c = compress(*s.model, s.vocab, s.prefix(0, n), "what is the total");
    CHECK(c.pages == 1);
    CHECK(c.vectors.rows() == 4);
    CHECK(c.vectors.cols() == 16);
    CHECK(c.vectors.allFinite());
  }
}

TEST_CASE("long documents are truncated to the model length") {
  Setup s(128);
  const CompressedOcr a = compress(*s.model, s.vocab, s.prefix(0, 128), "total");
  const CompressedOcr b = compress(*s.model, s.vocab, s.corpus[0], "total");
  CHECK((a.vectors - b.vectors).norm() == 0.0f);

  OcrDocument empty;
  empty.doc_id = "x";
  CHECK_THROWS_AS(compress(*s.model, s.vocab, empty, "q"), ValidationError);
}

TEST_CASE("the instruction steers the queries in the bidirectional regime") {
  Setup s;
  const OcrDocument doc = s.prefix(1, 40);
  const CompressedOcr a = compress(*s.model, s.vocab, doc, "invoice: total:");
  const CompressedOcr b = compress(*s.model, s.vocab, doc, "phone: date:");
  CHECK((a.vectors - b.vectors).norm() > 1e-6f);

  const CompressedOcr c = compress(*s.model, s.vocab, doc, "invoice: total:", MaskRegime::kUnimodal);
  const CompressedOcr d = compress(*s.model, s.vocab, doc, "phone: date:", MaskRegime::kUnimodal);
  CHECK((c.vectors - d.vectors).norm() == 0.0f);
}

TEST_CASE("multipage compression is blockwise") {
  Setup s;
  LayoutSpec spec;
  const auto pages = generate_multipage_document(8, spec, 3);
  REQUIRE(pages.size() == 3);
  const CompressedOcr all = compress_multipage(*s.model, s.vocab, pages, "amount due");
  CHECK(all.pages == 3);
  CHECK(all.vectors.rows() == 12);
  for (std::size_t p = 0; p < 3; ++p) {
    const CompressedOcr one = compress(*s.model, s.vocab, pages[p], "amount due");
    CHECK(all.page(p) == one.vectors);
  }

  const std::vector<OcrDocument> swapped{pages[2], pages[0], pages[1]};
  const CompressedOcr perm = compress_multipage(*s.model, s.vocab, swapped, "amount due");
  CHECK(perm.page(0) == all.page(2));
  CHECK(perm.page(1) == all.page(0));
  CHECK(perm.page(2) == all.page(1));

  CHECK_THROWS_AS(compress_multipage(*s.model, s.vocab, std::vector<OcrDocument>{}, "q"), ValidationError);
}

TEST_CASE("input assembly lengths") {
  AssemblyRequest req;
  req.queries_per_page = 32;
  req.raw_ocr_lengths = {1024};
  req.instruction_len = 32;
  CHECK(assemble_llm_input(req, AssemblyMode::kLight).seq_len == 64);
  CHECK(assemble_llm_input(req, AssemblyMode::kBaseline).seq_len == 1056);
  CHECK(assemble_llm_input(req, AssemblyMode::kFull).seq_len == 1088);

  for (std::size_t ocr : {1, 100, 5000}) {
    req.raw_ocr_lengths = {ocr};
    CHECK(assemble_llm_input(req, AssemblyMode::kLight).seq_len == 64);
  }

  const AssembledInput light = assemble_llm_input(req, AssemblyMode::kLight);
  CHECK(light.segments == std::vector<SlotSegment>{{SlotKind::kQueries, 32, -1}, {SlotKind::kInstruction, 32, -1}});

  AssemblyRequest multi;
  multi.pages = 2;
  multi.queries_per_page = 8;
  multi.raw_ocr_lengths = {10, 20};
  multi.instruction_len = 5;
  multi.visual_tokens = 7;
  multi.interleave_pages = true;
  const AssembledInput full = assemble_llm_input(multi, AssemblyMode::kFull);
  CHECK(full.seq_len == 7 + 16 + 30 + 5);
  CHECK(full.segments == std::vector<SlotSegment>{{SlotKind::kVisual, 7, -1},
                                                  {SlotKind::kQueries, 8, 0},
                                                  {SlotKind::kRawOcr, 10, 0},
                                                  {SlotKind::kQueries, 8, 1},
                                                  {SlotKind::kRawOcr, 20, 1},
                                                  {SlotKind::kInstruction, 5, -1}});
  CHECK(assemble_llm_input(multi, AssemblyMode::kLight).seq_len == 7 + 16 + 5);

  multi.raw_ocr_lengths = {10};
  CHECK_THROWS_AS(assemble_llm_input(multi, AssemblyMode::kFull), ValidationError);
  CHECK(parse_assembly_mode(to_string(AssemblyMode::kFull)) == AssemblyMode::kFull);
  CHECK_THROWS_AS(parse_assembly_mode("half"), ConfigError);
}

TEST_CASE("assembly from a compressed document") {
  Setup s;
  const CompressedOcr c = compress(*s.model, s.vocab, s.prefix(2, 50), "total");
  const std::vector<TokenId> instr{40, 41, 42};
  const std::vector<TokenId> raw(50, 40);
  CHECK(assemble_llm_input(c, instr, raw, AssemblyMode::kLight).seq_len == 4 + 3);
  CHECK(assemble_llm_input(c, instr, raw, AssemblyMode::kFull).seq_len == 4 + 50 + 3);
  CHECK(assemble_llm_input(c, instr, raw, AssemblyMode::kBaseline).seq_len == 50 + 3);
}

TEST_CASE("layer FLOPs match matmul enumeration") {
  for (std::uint64_t n : {1, 7, 64, 1088}) {
    for (std::uint64_t d : {8, 64, 2048}) {
      CHECK(attention_flops(n, d) + mlp_flops(n, d, 4) == oracle::enumerate_flops(1, n, d, 4, 4));
      CHECK(mlp_flops(n, d, 2) == 2 * 2 * n * d * (2 * d));
    }
  }
}

TEST_CASE("FLOPs report") {
  LmArch lm;
  lm.d_model = 64;
  lm.layers = 2;
  lm.heads = 4;
  AssemblyRequest req;
  req.queries_per_page = 32;
  req.raw_ocr_lengths = {1024};
  req.instruction_len = 32;
  const OcrModuleArch ocr;

  const FlopsProfile base = flops_report(lm, assemble_llm_input(req, AssemblyMode::kBaseline), ocr);
  CHECK(base.lm_total == oracle::enumerate_flops(2, 1056, 64, 4, 4));
  CHECK(base.ocr_total == 0);
  CHECK(base.total == base.lm_total);

  const FlopsProfile light = flops_report(lm, assemble_llm_input(req, AssemblyMode::kLight), ocr);
  CHECK(light.lm_total == oracle::enumerate_flops(2, 64, 64, 4, 4));
  CHECK(light.ocr_encoder == oracle::enumerate_flops(4, 1024, 64, 4, 4));
  CHECK(light.ocr_query == oracle::enumerate_flops(4, 32 + 32 + 1, 64, 4, 4));
  CHECK(light.total == light.lm_total + light.ocr_total);

  const FlopsProfile full = flops_report(lm, assemble_llm_input(req, AssemblyMode::kFull), ocr);
  CHECK(full.ocr_total == light.ocr_total);
  CHECK(full.lm_total == oracle::enumerate_flops(2, 1088, 64, 4, 4));

  for (const LmArch& arch : {LmArch{"small", 1024, 24, 16, 4}, LmArch{"xl", 2048, 24, 32, 4}, LmArch{"7b", 4096, 32, 32, 4}}) {
    const auto b = flops_report(arch, assemble_llm_input(req, AssemblyMode::kBaseline)).total;
    const auto f = flops_report(arch, assemble_llm_input(req, AssemblyMode::kFull)).total;
    const auto l = flops_report(arch, assemble_llm_input(req, AssemblyMode::kLight)).total;
    CHECK(l < b);
    CHECK(b < f);
  }

  const std::vector<FlopsProfile> all{base, full, light};
  const std::string table = flops_table(all);
  CHECK(table.find("light") != std::string::npos);
  CHECK(base.to_json().find("\"seq_len\"") != std::string::npos);
}
