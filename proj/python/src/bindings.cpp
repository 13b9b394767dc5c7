#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <random>
#include <sstream>

#include "tapq/corpus.hpp"
#include "tapq/error.hpp"
#include "tapq/integration.hpp"
#include "tapq/ocrq.hpp"
#include "tapq/trainer.hpp"

namespace py = pybind11;
using namespace tapq;

namespace {

py::dict metrics_dict(const EvalMetrics& m) {
  py::dict d;
  d["acc_lm"] = m.acc_lm;
  d["acc_ret"] = m.acc_ret;
  d["acc_match"] = m.acc_match;
  d["l_lm"] = m.l_lm;
  d["l_con"] = m.l_con;
  d["l_match"] = m.l_match;
  d["batches"] = m.batches;
  d["rows"] = m.rows;
  return d;
}

py::dict flops_dict(const FlopsProfile& f) {
  py::dict d;
  d["mode"] = std::string(to_string(f.mode));
  d["seq_len"] = f.seq_len;
  d["lm_attention"] = f.lm_attention;
  d["lm_mlp"] = f.lm_mlp;
  d["lm_total"] = f.lm_total;
  d["ocr_encoder"] = f.ocr_encoder;
  d["ocr_query"] = f.ocr_query;
  d["ocr_total"] = f.ocr_total;
  d["total"] = f.total;
  return d;
}

}  // namespace

PYBIND11_MODULE(_tapq, m) {
  m.doc() = "Layout-aware OCR query compression: corpus, masking, training and compression";

  auto error = py::register_exception<Error>(m, "Error");
  py::register_exception<ConfigError>(m, "ConfigError", error);
  auto validation = py::register_exception<ValidationError>(m, "ValidationError", error);
  py::register_exception<ParseError>(m, "ParseError", validation);
  py::register_exception<CapacityError>(m, "CapacityError", error);
  py::register_exception<RuntimeError>(m, "TrainingError", error);

  py::class_<BoundingBox>(m, "BoundingBox")
      .def(py::init<>())
      .def(py::init([](double x0, double y0, double x1, double y1) { return BoundingBox{x0, y0, x1, y1}; }),
           py::arg("x0"), py::arg("y0"), py::arg("x1"), py::arg("y1"))
      .def_readwrite("x0", &BoundingBox::x0)
      .def_readwrite("y0", &BoundingBox::y0)
      .def_readwrite("x1", &BoundingBox::x1)
      .def_readwrite("y1", &BoundingBox::y1)
      .def("valid", &BoundingBox::valid)
      .def("as_tuple", [](const BoundingBox& b) { return py::make_tuple(b.x0, b.y0, b.x1, b.y1); })
      .def(py::self == py::self)
      .def("__repr__", [](const BoundingBox& b) {
        return "BoundingBox(" + std::to_string(b.x0) + ", " + std::to_string(b.y0) + ", " + std::to_string(b.x1) +
               ", " + std::to_string(b.y1) + ")";
      });

  py::class_<OcrDocument>(m, "OcrDocument")
      .def(py::init<>())
      .def_readwrite("doc_id", &OcrDocument::doc_id)
      .def_readwrite("tokens", &OcrDocument::tokens)
      .def_readwrite("bboxes", &OcrDocument::bboxes)
      .def_readwrite("page_index", &OcrDocument::page_index)
      .def("__len__", &OcrDocument::size)
      .def(py::self == py::self);

  py::class_<Span>(m, "Span")
      .def_readonly("start", &Span::start)
      .def_readonly("end", &Span::end)
      .def("length", &Span::length);

  py::class_<TargetEntry>(m, "TargetEntry")
      .def_readonly("sentinel", &TargetEntry::sentinel)
      .def_readonly("text", &TargetEntry::text);

  py::class_<MaskedExample>(m, "MaskedExample")
      .def_readonly("noisy_tokens", &MaskedExample::noisy_tokens)
      .def_readonly("noisy_bboxes", &MaskedExample::noisy_bboxes)
      .def_readonly("target", &MaskedExample::target)
      .def_readonly("spans", &MaskedExample::spans)
      .def_readonly("source_doc_id", &MaskedExample::source_doc_id)
      .def("masked_token_count", &MaskedExample::masked_token_count);

  py::class_<LayoutSpec>(m, "LayoutSpec")
      .def(py::init<>())
      .def_readwrite("rows", &LayoutSpec::rows)
      .def_readwrite("cols", &LayoutSpec::cols)
      .def_readwrite("min_tokens", &LayoutSpec::min_tokens)
      .def_readwrite("max_tokens", &LayoutSpec::max_tokens)
      .def_readwrite("n_doc_types", &LayoutSpec::n_doc_types)
      .def_readwrite("n_keys", &LayoutSpec::n_keys)
      .def_readwrite("keys_per_template", &LayoutSpec::keys_per_template)
      .def_readwrite("n_entities", &LayoutSpec::n_entities);

  m.def("generate_synthetic_document", &generate_synthetic_document, py::arg("seed"),
        py::arg("spec") = LayoutSpec{});
  m.def("generate_corpus", &generate_corpus, py::arg("n"), py::arg("seed"), py::arg("spec") = LayoutSpec{});
  m.def(
      "generate_multipage_document",
      [](std::uint64_t seed, std::uint32_t pages, const LayoutSpec& spec) {
        return generate_multipage_document(seed, spec, pages);
      },
      py::arg("seed"), py::arg("pages"), py::arg("spec") = LayoutSpec{});
  m.def("load_corpus", &load_corpus, py::arg("path"));
  m.def(
      "save_corpus", [](const std::vector<OcrDocument>& docs, const std::filesystem::path& p) { save_corpus(docs, p); },
      py::arg("docs"), py::arg("path"));
  m.def("validate", &validate, py::arg("doc"));
  m.def(
      "min_covering_bbox", [](const std::vector<BoundingBox>& boxes) { return min_covering_bbox(boxes); },
      py::arg("boxes"));
  m.def(
      "mask_spans",
      [](const OcrDocument& doc, double density, double mean_span_len, std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        return mask_spans(doc, density, mean_span_len, rng);
      },
      py::arg("doc"), py::arg("density") = 0.15, py::arg("mean_span_len") = 3.0, py::arg("seed") = 0);
  m.def(
      "expand_target",
      [](const MaskedExample& ex) { return expand_target(ex.noisy_tokens, ex.target); }, py::arg("example"));

  m.def(
      "build_attention_mask",
      [](const std::string& regime, std::size_t queries, std::size_t text) {
        const AttentionMask mask = build_attention_mask(parse_mask_regime(regime), queries, text);
        const auto n = static_cast<py::ssize_t>(mask.size());
        py::array_t<bool> out({n, n});
        auto view = out.mutable_unchecked<2>();
        for (py::ssize_t r = 0; r < n; ++r) {
          for (py::ssize_t c = 0; c < n; ++c) view(r, c) = mask(r, c);
        }
        return out;
      },
      py::arg("regime"), py::arg("queries"), py::arg("text"));

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_static("from_text", &TrainConfig::from_text)
      .def_static("load", &TrainConfig::load)
      .def_static("keys", &TrainConfig::keys)
      .def("to_text", &TrainConfig::to_text)
      .def("check", &TrainConfig::check)
      .def("set", [](TrainConfig& cfg, const std::string& key, const std::string& value) {
        std::istringstream in(cfg.to_text());
        std::string text;
        bool found = false;
        for (std::string line; std::getline(in, line);) {
          if (line.rfind(key + " = ", 0) == 0) {
            line = key + " = " + value;
            found = true;
          }
          text += line + '\n';
        }
        if (!found) throw ConfigError("unknown config key '" + key + "'");
        cfg = TrainConfig::from_text(text);
      })
      .def_readwrite("steps", &TrainConfig::steps)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("train_corpus", &TrainConfig::train_corpus)
      .def_readwrite("checkpoint_path", &TrainConfig::checkpoint_path)
      .def_readwrite("metrics_path", &TrainConfig::metrics_path);

  py::class_<Checkpoint>(m, "Checkpoint")
      .def_static("load", &Checkpoint::load, py::arg("path"))
      .def("save", &Checkpoint::save, py::arg("path"))
      .def_readonly("step", &Checkpoint::step)
      .def_readonly("config", &Checkpoint::config);

  m.def(
      "train",
      [](const TrainConfig& cfg, std::vector<OcrDocument> corpus) {
        py::gil_scoped_release release;
        return train(cfg, std::move(corpus));
      },
      py::arg("config"), py::arg("corpus"));
  m.def(
      "evaluate",
      [](const Checkpoint& ckpt, const std::vector<OcrDocument>& heldout, std::uint64_t seed) {
        return metrics_dict(evaluate(ckpt, heldout, seed));
      },
      py::arg("checkpoint"), py::arg("heldout"), py::arg("seed") = 1234);

  m.def(
      "compress",
      [](const Checkpoint& ckpt, const OcrDocument& doc, const std::string& instruction) {
        return ag::Mat<float>(compress(ckpt, doc, instruction).vectors);
      },
      py::arg("checkpoint"), py::arg("doc"), py::arg("instruction") = "");
  m.def(
      "compress_multipage",
      [](const Checkpoint& ckpt, const std::vector<OcrDocument>& pages, const std::string& instruction) {
        return ag::Mat<float>(compress_multipage(ckpt, pages, instruction).vectors);
      },
      py::arg("checkpoint"), py::arg("pages"), py::arg("instruction") = "");

  m.def(
      "assembled_length",
      [](const std::string& mode, std::size_t queries_per_page, const std::vector<std::size_t>& raw_ocr_lengths,
         std::size_t instruction_len) {
        AssemblyRequest req;
        req.pages = raw_ocr_lengths.size();
        req.queries_per_page = queries_per_page;
        req.raw_ocr_lengths = raw_ocr_lengths;
        req.instruction_len = instruction_len;
        return assemble_llm_input(req, parse_assembly_mode(mode)).seq_len;
      },
      py::arg("mode"), py::arg("queries_per_page"), py::arg("raw_ocr_lengths"), py::arg("instruction_len"));

  m.def(
      "flops_report",
      [](const std::string& mode, std::size_t ocr_len, std::size_t queries, std::size_t instruction_len,
         std::uint64_t d_model, std::uint64_t layers, std::uint64_t heads) {
        AssemblyRequest req;
        req.queries_per_page = queries;
        req.raw_ocr_lengths = {ocr_len};
        req.instruction_len = instruction_len;
        LmArch lm;
        lm.d_model = d_model;
        lm.layers = layers;
        lm.heads = heads;
        return flops_dict(flops_report(lm, assemble_llm_input(req, parse_assembly_mode(mode))));
      },
      py::arg("mode"), py::arg("ocr_len") = 1024, py::arg("queries") = 32, py::arg("instruction_len") = 32,
      py::arg("d_model") = 2048, py::arg("layers") = 24, py::arg("heads") = 32);
}
