#include "cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "tapq/corpus.hpp"
#include "tapq/error.hpp"
#include "tapq/integration.hpp"
#include "tapq/trainer.hpp"

namespace tapq::cli {

namespace fs = std::filesystem;

namespace {

const std::map<std::string, LmArch>& lm_presets() {
  static const std::map<std::string, LmArch> presets = {
      {"small", {"small", 1024, 24, 16, 4}},
      {"xl", {"xl", 2048, 24, 32, 4}},
      {"7b", {"7b", 4096, 32, 32, 4}},
      {"13b", {"13b", 5120, 40, 40, 4}},
  };
  return presets;
}

LmArch parse_lm_arch(const std::string& spec) {
  if (auto it = lm_presets().find(spec); it != lm_presets().end()) return it->second;
  LmArch arch;
  arch.name = spec;
  char c1 = 0, c2 = 0, c3 = 0;
  std::istringstream in(spec);
  if (!(in >> arch.d_model >> c1 >> arch.layers >> c2 >> arch.heads >> c3 >> arch.ff_mult) || c1 != ',' || c2 != ',' ||
      c3 != ',' || !in.eof()) {
    throw ConfigError("--lm-arch expects a preset (small, xl, 7b, 13b) or d_model,layers,heads,ff_mult; got '" + spec + "'");
  }
  return arch;
}

void write_snapshot(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ValidationError("cannot write snapshot " + path.string());
  out << text;
}

std::string shell_quote(const std::string& s) {
  if (!s.empty() && s.find_first_not_of("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789-_./=,:+") == std::string::npos) {
    return s;
  }
  std::string q = "'";
  for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

// Every option of a parsed subcommand with its effective value (given or default).
std::vector<std::pair<std::string, std::vector<std::string>>> resolved_options(const CLI::App& sub) {
  std::vector<std::pair<std::string, std::vector<std::string>>> kv;
  for (const CLI::Option* opt : sub.get_options()) {
    const std::string name = opt->get_single_name();
    if (name == "help" || name == "snapshot") continue;
    if (opt->get_type_size() == 0 || opt->get_expected_max() == 0) {
      if (opt->count() > 0) kv.push_back({name, {}});
    } else if (opt->count() > 0) {
      kv.push_back({name, opt->results()});
    } else if (!opt->get_default_str().empty()) {
      kv.push_back({name, {opt->get_default_str()}});
    }
  }
  return kv;
}

std::string snapshot_text(const CLI::App& sub) {
  const auto kv = resolved_options(sub);
  std::ostringstream os;
  os << "# tapq " << sub.get_name() << " resolved arguments\n# reproduce: tapq " << sub.get_name();
  for (const auto& [k, vals] : kv) {
    if (vals.empty()) os << " --" << k;
    for (const auto& v : vals) os << " --" << k << ' ' << shell_quote(v);
  }
  os << '\n';
  for (const auto& [k, vals] : kv) {
    os << k << " =";
    if (vals.empty()) os << " true";
    for (const auto& v : vals) os << ' ' << v;
    os << '\n';
  }
  return os.str();
}

fs::path snapshot_path(const std::string& explicit_path, const std::string& output, const std::string& subcommand) {
  if (!explicit_path.empty()) return explicit_path;
  if (!output.empty()) return output + ".resolved.txt";
  return "tapq-" + subcommand + ".resolved.txt";
}

void write_vectors(const CompressedOcr& c, const fs::path& path, const std::string& format) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (format == "json") {
    nlohmann::json j;
    j["pages"] = c.pages;
    j["queries"] = c.queries;
    j["width"] = c.width;
    j["doc_ids"] = c.doc_ids;
    j["instruction"] = c.instruction;
    auto rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < c.vectors.rows(); ++r) {
      rows.push_back(std::vector<float>(c.vectors.row(r).data(), c.vectors.row(r).data() + c.vectors.cols()));
    }
    j["vectors"] = std::move(rows);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ValidationError("cannot write " + path.string());
    out << j.dump() << '\n';
    return;
  }
  // Shape-prefixed binary: "TAPQV1\n", u64 pages, u64 queries, u64 width, float32 row-major data.
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path.string());
  out.write("TAPQV1\n", 7);
  const std::uint64_t dims[3] = {c.pages, c.queries, c.width};
  out.write(reinterpret_cast<const char*>(dims), sizeof dims);
  out.write(reinterpret_cast<const char*>(c.vectors.data()), static_cast<std::streamsize>(c.vectors.size() * sizeof(float)));
}

struct GenArgs {
  std::size_t n = 100;
  std::uint64_t seed = 0;
  std::string grid = "4x2";
  std::uint32_t min_tokens = 48;
  std::uint32_t max_tokens = 96;
  std::uint32_t pages = 1;
  std::string out;
};

int cmd_gen_corpus(const GenArgs& a, std::ostream& out) {
  LayoutSpec spec;
  char x = 0;
  std::istringstream g(a.grid);
  if (!(g >> spec.rows >> x >> spec.cols) || x != 'x' || !g.eof()) {
    throw ConfigError("--grid expects ROWSxCOLS, got '" + a.grid + "'");
  }
  spec.min_tokens = a.min_tokens;
  spec.max_tokens = a.max_tokens;
  spec.check();
  std::vector<OcrDocument> docs;
  if (a.pages <= 1) {
    docs = generate_corpus(a.n, a.seed, spec);
  } else {
    std::mt19937_64 seeder(a.seed);
    for (std::size_t i = 0; i < a.n; ++i) {
      auto pages = generate_multipage_document(seeder(), spec, a.pages);
      docs.insert(docs.end(), pages.begin(), pages.end());
    }
  }
  save_corpus(docs, a.out);
  out << "wrote " << docs.size() << " documents to " << a.out << '\n';
  return kExitOk;
}

struct PretrainArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string corpus;
  std::string out_dir;
  std::string resume;
  std::string snapshot;
};

int cmd_pretrain(const PretrainArgs& a, std::ostream& out) {
  std::optional<Checkpoint> from;
  if (!a.resume.empty()) from = Checkpoint::load(a.resume);
  // A resumed run starts from the checkpoint's own config; flags and --set apply on top.
  TrainConfig cfg = !a.config.empty() ? TrainConfig::load(a.config) : from ? from->config : TrainConfig{};
  if (from) cfg.model.vocab_size = from->config.model.vocab_size;
  if (!a.corpus.empty()) cfg.train_corpus = a.corpus;
  if (!a.out_dir.empty()) {
    cfg.checkpoint_path = (fs::path(a.out_dir) / "model.tapq").string();
    cfg.metrics_path = (fs::path(a.out_dir) / "metrics.csv").string();
  }
  for (const auto& kv : a.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (const char* env = std::getenv("TAPQ_SEED"); env && *env) cfg.set("seed", env);
  cfg.check();
  if (cfg.train_corpus.empty()) throw ConfigError("no training corpus (use --corpus or train_corpus in the config)");
  if (from && !(cfg.model == from->config.model)) throw ConfigError("model shape differs from the resumed checkpoint");

  const fs::path snapshot = !a.snapshot.empty()                 ? fs::path(a.snapshot)
                            : !a.out_dir.empty()                ? fs::path(a.out_dir) / "resolved_config.txt"
                            : !cfg.checkpoint_path.empty()      ? fs::path(cfg.checkpoint_path + ".resolved.txt")
                                                                : fs::path("tapq-pretrain.resolved.txt");
  auto corpus = load_corpus(cfg.train_corpus);
  Checkpoint ckpt;
  if (from) {
    from->config = cfg;
    write_snapshot(snapshot, "# tapq pretrain resolved config\n# reproduce: tapq pretrain --resume " + shell_quote(a.resume) +
                                 " --config " + shell_quote(snapshot.string()) + "\n" + cfg.to_text());
    ckpt = train(cfg, std::move(corpus), &*from);
  } else {
    write_snapshot(snapshot, "# tapq pretrain resolved config\n# reproduce: tapq pretrain --config " +
                                 shell_quote(snapshot.string()) + "\n" + cfg.to_text());
    ckpt = train(cfg, std::move(corpus));
  }
  out << "trained " << ckpt.step << " steps";
  if (!cfg.checkpoint_path.empty()) out << "; checkpoint " << cfg.checkpoint_path;
  if (!cfg.metrics_path.empty()) out << "; metrics " << cfg.metrics_path;
  out << '\n';
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string corpus;
  std::uint64_t seed = 1234;
  std::size_t batch_size = 16;
  std::string out;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const Checkpoint ckpt = Checkpoint::load(a.checkpoint);
  const auto heldout = load_corpus(a.corpus);
  const EvalMetrics m = evaluate(ckpt, heldout, a.seed, a.batch_size);
  nlohmann::json j;
  j["checkpoint"] = a.checkpoint;
  j["step"] = ckpt.step;
  j["batches"] = m.batches;
  j["rows"] = m.rows;
  j["acc_lm"] = m.acc_lm;
  j["acc_ret"] = m.acc_ret;
  j["acc_match"] = m.acc_match;
  j["l_lm"] = m.l_lm;
  j["l_con"] = m.l_con;
  j["l_match"] = m.l_match;
  const std::string text = j.dump(2);
  if (!a.out.empty()) {
    std::ofstream f(a.out, std::ios::trunc);
    if (!f) throw ValidationError("cannot write " + a.out);
    f << text << '\n';
  }
  out << text << '\n';
  return kExitOk;
}

struct CompressArgs {
  std::string checkpoint;
  std::string doc;
  std::string instruction;
  std::size_t pages = 1;
  std::string out;
  std::string format;
};

int cmd_compress(const CompressArgs& a, std::ostream& out) {
  const Checkpoint ckpt = Checkpoint::load(a.checkpoint);
  const auto docs = load_corpus(a.doc);
  if (docs.empty()) throw ValidationError(a.doc + " holds no documents");
  if (a.pages == 0 || a.pages > docs.size()) {
    throw ValidationError("--pages " + std::to_string(a.pages) + " but " + a.doc + " holds " + std::to_string(docs.size()) +
                          " documents");
  }
  const CompressedOcr c = compress_multipage(ckpt, std::span<const OcrDocument>(docs).first(a.pages), a.instruction);
  const std::string format = !a.format.empty() ? a.format : fs::path(a.out).extension() == ".json" ? "json" : "bin";
  write_vectors(c, a.out, format);
  out << "wrote [" << c.pages << ", " << c.queries << ", " << c.width << "] vectors to " << a.out << '\n';
  return kExitOk;
}

struct FlopsArgs {
  std::string mode = "light";
  std::size_t ocr_len = 1024;
  std::size_t k = 32;
  std::size_t instr_len = 32;
  std::size_t pages = 1;
  std::size_t visual_tokens = 0;
  std::string lm_arch = "xl";
  std::string ocr_arch = "64,4,64,4,4";
  bool interleave = false;
  bool json = false;
  std::string out;
  std::string sweep_csv;
};

AssemblyRequest flops_request(const FlopsArgs& a, std::size_t ocr_len) {
  AssemblyRequest req;
  req.pages = a.pages;
  req.queries_per_page = a.k;
  req.instruction_len = a.instr_len;
  req.visual_tokens = a.visual_tokens;
  req.interleave_pages = a.interleave;
  req.raw_ocr_lengths.assign(a.pages, ocr_len / a.pages);
  req.raw_ocr_lengths.back() += ocr_len % a.pages;
  return req;
}

int cmd_flops(const FlopsArgs& a, std::ostream& out) {
  std::vector<AssemblyMode> modes;
  if (a.mode == "all") {
    modes = {AssemblyMode::kBaseline, AssemblyMode::kFull, AssemblyMode::kLight};
  } else {
    modes = {parse_assembly_mode(a.mode)};
  }
  if (a.pages == 0) throw ConfigError("--pages must be positive");
  const LmArch lm = parse_lm_arch(a.lm_arch);
  OcrModuleArch ocr;
  {
    char c[4] = {};
    std::istringstream in(a.ocr_arch);
    if (!(in >> ocr.d_ocr >> c[0] >> ocr.encoder_layers >> c[1] >> ocr.d >> c[2] >> ocr.ocrq_layers >> c[3] >> ocr.ff_mult) ||
        c[0] != ',' || c[1] != ',' || c[2] != ',' || c[3] != ',' || !in.eof()) {
      throw ConfigError("--ocr-arch expects d_ocr,encoder_layers,d,ocrq_layers,ff_mult; got '" + a.ocr_arch + "'");
    }
  }
  std::vector<FlopsProfile> profiles;
  for (AssemblyMode m : modes) profiles.push_back(flops_report(lm, assemble_llm_input(flops_request(a, a.ocr_len), m), ocr));

  std::string text;
  if (a.json) {
    if (profiles.size() == 1) {
      text = profiles.front().to_json();
    } else {
      auto arr = nlohmann::json::array();
      for (const auto& p : profiles) arr.push_back(nlohmann::json::parse(p.to_json()));
      text = arr.dump(2);
    }
    text += '\n';
  } else {
    text = flops_table(profiles);
  }
  out << text;
  if (!a.out.empty()) {
    std::ofstream f(a.out, std::ios::trunc);
    if (!f) throw ValidationError("cannot write " + a.out);
    f << text;
  }
  if (!a.sweep_csv.empty()) {
    // FLOPs against OCR length, doubling from 1 token up to --ocr-len.
    std::ofstream f(a.sweep_csv, std::ios::trunc);
    if (!f) throw ValidationError("cannot write " + a.sweep_csv);
    f << "mode,ocr_len,seq_len,lm_flops,ocr_flops,total_flops\n";
    std::vector<std::size_t> lengths;
    for (std::size_t l = std::max<std::size_t>(1, a.pages); l < a.ocr_len; l *= 2) lengths.push_back(l);
    lengths.push_back(std::max(a.ocr_len, a.pages));
    for (AssemblyMode m : modes) {
      for (std::size_t l : lengths) {
        const FlopsProfile p = flops_report(lm, assemble_llm_input(flops_request(a, l), m), ocr);
        f << to_string(m) << ',' << l << ',' << p.seq_len << ',' << p.lm_total << ',' << p.ocr_total << ',' << p.total << '\n';
      }
    }
  }
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"tapq: layout-aware OCR compression (OCR-Q) pretraining and inference toolkit", "tapq"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "tapq 0.1.0");

  std::string snapshot;
  const auto add_snapshot = [&snapshot](CLI::App* sub) {
    sub->add_option("--snapshot", snapshot, "Resolved-argument snapshot path (default: <output>.resolved.txt)");
  };

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-corpus", "Generate a synthetic layout-rich OCR corpus (JSONL)");
  gen_cmd->add_option("--n", gen.n, "Number of documents")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Base seed")->capture_default_str();
  gen_cmd->add_option("--grid", gen.grid, "Page grid as ROWSxCOLS")->capture_default_str();
  gen_cmd->add_option("--min-tokens", gen.min_tokens, "Minimum tokens per page")->capture_default_str();
  gen_cmd->add_option("--max-tokens", gen.max_tokens, "Maximum tokens per page")->capture_default_str();
  gen_cmd->add_option("--pages", gen.pages, "Pages per document (one JSONL line per page)")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output JSONL path")->required();
  add_snapshot(gen_cmd);

  PretrainArgs pre;
  auto* pre_cmd = app.add_subcommand("pretrain", "Pretrain the OCR encoder and OCR-Q on a corpus");
  pre_cmd->add_option("--config", pre.config, "key = value config file");
  pre_cmd->add_option("--set", pre.overrides, "Config override key=value (repeatable)");
  pre_cmd->add_option("--corpus", pre.corpus, "Training corpus (overrides train_corpus)");
  pre_cmd->add_option("--out-dir", pre.out_dir, "Directory for model.tapq, metrics.csv and resolved_config.txt");
  pre_cmd->add_option("--resume", pre.resume, "Continue training from this checkpoint");
  pre_cmd->add_option("--snapshot", pre.snapshot, "Resolved-config snapshot path");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Held-out proxy metrics for a checkpoint (JSON)");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint archive")->required();
  eval_cmd->add_option("--corpus", ev.corpus, "Held-out corpus (JSONL)")->required();
  eval_cmd->add_option("--seed", ev.seed, "Masking seed")->capture_default_str();
  eval_cmd->add_option("--batch-size", ev.batch_size, "Rows per retrieval batch")->capture_default_str();
  eval_cmd->add_option("--out", ev.out, "Also write the metrics JSON here");
  add_snapshot(eval_cmd);

  CompressArgs cp;
  auto* cp_cmd = app.add_subcommand("compress", "Compress document pages into K query vectors each");
  cp_cmd->add_option("--checkpoint", cp.checkpoint, "Checkpoint archive")->required();
  cp_cmd->add_option("--doc", cp.doc, "JSONL file whose first --pages lines are the pages")->required();
  cp_cmd->add_option("--instruction", cp.instruction, "Instruction text fed to the text stream");
  cp_cmd->add_option("--pages", cp.pages, "Number of pages to read")->capture_default_str();
  cp_cmd->add_option("--out", cp.out, "Output vectors file")->required();
  cp_cmd->add_option("--format", cp.format, "json or bin (default: from the --out extension)")
      ->check(CLI::IsMember({"json", "bin"}));
  add_snapshot(cp_cmd);

  FlopsArgs fl;
  auto* fl_cmd = app.add_subcommand("flops", "Analytic forward FLOPs of the downstream LM input");
  fl_cmd->add_option("--mode", fl.mode, "baseline, full, light or all")
      ->check(CLI::IsMember({"baseline", "full", "light", "all"}))
      ->capture_default_str();
  fl_cmd->add_option("--ocr-len", fl.ocr_len, "Raw OCR tokens (all pages)")->capture_default_str();
  fl_cmd->add_option("--k", fl.k, "Queries per page")->capture_default_str();
  fl_cmd->add_option("--instr-len", fl.instr_len, "Instruction tokens")->capture_default_str();
  fl_cmd->add_option("--pages", fl.pages, "Pages")->capture_default_str();
  fl_cmd->add_option("--visual-tokens", fl.visual_tokens, "Fixed visual-token prefix")->capture_default_str();
  fl_cmd->add_option("--lm-arch", fl.lm_arch, "Preset (small, xl, 7b, 13b) or d_model,layers,heads,ff_mult")
      ->capture_default_str();
  fl_cmd->add_option("--ocr-arch", fl.ocr_arch, "d_ocr,encoder_layers,d,ocrq_layers,ff_mult")->capture_default_str();
  fl_cmd->add_flag("--interleave", fl.interleave, "Full mode: interleave per-page queries and raw OCR");
  fl_cmd->add_flag("--json", fl.json, "Emit JSON instead of a table");
  fl_cmd->add_option("--out", fl.out, "Also write the report here");
  fl_cmd->add_option("--sweep-csv", fl.sweep_csv, "Write FLOPs against OCR length (doubling up to --ocr-len) as CSV");
  add_snapshot(fl_cmd);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    const auto subs = app.get_subcommands();
    out << (subs.empty() ? app.help() : subs.front()->help());
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << app.version() << '\n';
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "tapq: " << e.what() << '\n';
    return kExitValidation;
  }

  try {
    if (pre_cmd->parsed()) return cmd_pretrain(pre, out);
    CLI::App* sub = app.get_subcommands().front();
    const std::string output = gen_cmd->parsed() ? gen.out : eval_cmd->parsed() ? ev.out : cp_cmd->parsed() ? cp.out : fl.out;
    write_snapshot(snapshot_path(snapshot, output, sub->get_name()), snapshot_text(*sub));
    if (gen_cmd->parsed()) return cmd_gen_corpus(gen, out);
    if (eval_cmd->parsed()) return cmd_eval(ev, out);
    if (cp_cmd->parsed()) return cmd_compress(cp, out);
    return cmd_flops(fl, out);
  } catch (const ValidationError& e) {
    err << "tapq: " << e.what() << '\n';
    return kExitValidation;
  } catch (const ConfigError& e) {
    err << "tapq: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "tapq: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace tapq::cli
