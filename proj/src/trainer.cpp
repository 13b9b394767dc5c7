#include "tapq/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <unordered_set>

#include "tapq/error.hpp"

namespace tapq {

namespace {

struct Field {
  const char* name;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::uint64_t parse_uint(const std::string& key, const std::string& s) {
  std::uint64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw ConfigError("config key '" + key + "': expected a nonnegative integer, got '" + s + "'");
  }
  return v;
}

double parse_double(const std::string& key, const std::string& s) {
  double v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || res.ec != std::errc{} || res.ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + s + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + s + "'");
}

template <typename Acc>
Field size_field(const char* name, Acc acc) {
  return {name, [acc](const TrainConfig& c) { return std::to_string(acc(const_cast<TrainConfig&>(c))); },
          [acc, name](TrainConfig& c, const std::string& s) { acc(c) = static_cast<std::size_t>(parse_uint(name, s)); }};
}

template <typename Acc>
Field u64_field(const char* name, Acc acc) {
  return {name, [acc](const TrainConfig& c) { return std::to_string(acc(const_cast<TrainConfig&>(c))); },
          [acc, name](TrainConfig& c, const std::string& s) { acc(c) = parse_uint(name, s); }};
}

template <typename Acc>
Field double_field(const char* name, Acc acc) {
  return {name, [acc](const TrainConfig& c) { return format_double(acc(const_cast<TrainConfig&>(c))); },
          [acc, name](TrainConfig& c, const std::string& s) { acc(c) = parse_double(name, s); }};
}

template <typename Acc>
Field bool_field(const char* name, Acc acc) {
  return {name, [acc](const TrainConfig& c) { return std::string(acc(const_cast<TrainConfig&>(c)) ? "true" : "false"); },
          [acc, name](TrainConfig& c, const std::string& s) { acc(c) = parse_bool(name, s); }};
}

template <typename Acc>
Field string_field(const char* name, Acc acc) {
  return {name, [acc](const TrainConfig& c) { return acc(const_cast<TrainConfig&>(c)); },
          [acc](TrainConfig& c, const std::string& s) { acc(c) = s; }};
}

#define TAPQ_REF(type, expr) [](TrainConfig & c) -> type& { return c.expr; }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      size_field("d_ocr", TAPQ_REF(std::size_t, model.d_ocr)),
      size_field("encoder_layers", TAPQ_REF(std::size_t, model.encoder_layers)),
      size_field("encoder_heads", TAPQ_REF(std::size_t, model.encoder_heads)),
      size_field("n_buckets", TAPQ_REF(std::size_t, model.n_buckets)),
      size_field("max_ocr_len", TAPQ_REF(std::size_t, model.max_ocr_len)),
      size_field("d", TAPQ_REF(std::size_t, model.d)),
      size_field("ocrq_layers", TAPQ_REF(std::size_t, model.ocrq_layers)),
      size_field("ocrq_heads", TAPQ_REF(std::size_t, model.ocrq_heads)),
      size_field("num_queries", TAPQ_REF(std::size_t, model.num_queries)),
      size_field("max_text_len", TAPQ_REF(std::size_t, model.max_text_len)),
      size_field("d_contrast", TAPQ_REF(std::size_t, model.d_contrast)),
      size_field("ff_mult", TAPQ_REF(std::size_t, model.ff_mult)),
      size_field("min_count", TAPQ_REF(std::size_t, min_count)),
      size_field("max_sentinels", TAPQ_REF(std::size_t, max_sentinels)),
      size_field("steps", TAPQ_REF(std::size_t, steps)),
      size_field("batch_size", TAPQ_REF(std::size_t, batch_size)),
      double_field("base_lr", TAPQ_REF(double, base_lr)),
      size_field("warmup_steps", TAPQ_REF(std::size_t, warmup_steps)),
      double_field("weight_decay", TAPQ_REF(double, weight_decay)),
      double_field("grad_clip", TAPQ_REF(double, grad_clip)),
      double_field("mask_density", TAPQ_REF(double, mask_density)),
      double_field("mean_span_len", TAPQ_REF(double, mean_span_len)),
      double_field("tau", TAPQ_REF(double, objective.tau)),
      double_field("match_positive_prob", TAPQ_REF(double, objective.match_positive_prob)),
      double_field("w_lm", TAPQ_REF(double, objective.w_lm)),
      double_field("w_con", TAPQ_REF(double, objective.w_con)),
      double_field("w_match", TAPQ_REF(double, objective.w_match)),
      bool_field("contrastive_symmetric", TAPQ_REF(bool, objective.contrastive.symmetric)),
      bool_field("contrastive_include_positive", TAPQ_REF(bool, objective.contrastive.include_positive_in_denominator)),
      u64_field("seed", TAPQ_REF(std::uint64_t, seed)),
      string_field("train_corpus", TAPQ_REF(std::string, train_corpus)),
      string_field("heldout_corpus", TAPQ_REF(std::string, heldout_corpus)),
      string_field("checkpoint_path", TAPQ_REF(std::string, checkpoint_path)),
      string_field("metrics_path", TAPQ_REF(std::string, metrics_path)),
      size_field("checkpoint_every", TAPQ_REF(std::size_t, checkpoint_every)),
  };
  return table;
}

#undef TAPQ_REF

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// --- binary archive helpers (little-endian hosts) ---

constexpr char kMagic[] = "TAPQ1\n";

void put_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }

void put_string(std::ostream& out, const std::string& s) {
  put_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint64_t get_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw ValidationError("checkpoint: truncated archive");
  return v;
}

std::string get_string(std::istream& in, std::uint64_t limit = (1ULL << 32)) {
  const std::uint64_t n = get_u64(in);
  if (n > limit) throw ValidationError("checkpoint: implausible string length");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw ValidationError("checkpoint: truncated archive");
  return s;
}

void put_arrays(std::ostream& out, const std::vector<NamedArray>& arrays) {
  put_u64(out, arrays.size());
  for (const auto& a : arrays) {
    put_string(out, a.name);
    put_u64(out, a.rows);
    put_u64(out, a.cols);
    out.write(reinterpret_cast<const char*>(a.data.data()), static_cast<std::streamsize>(a.data.size() * sizeof(float)));
  }
}

std::vector<NamedArray> get_arrays(std::istream& in) {
  const std::uint64_t n = get_u64(in);
  if (n > (1ULL << 20)) throw ValidationError("checkpoint: implausible array count");
  std::vector<NamedArray> arrays(n);
  for (auto& a : arrays) {
    a.name = get_string(in, 4096);
    a.rows = get_u64(in);
    a.cols = get_u64(in);
    if (a.rows * a.cols > (1ULL << 31)) throw ValidationError("checkpoint: implausible array shape for " + a.name);
    a.data.resize(a.rows * a.cols);
    in.read(reinterpret_cast<char*>(a.data.data()), static_cast<std::streamsize>(a.data.size() * sizeof(float)));
    if (!in) throw ValidationError("checkpoint: truncated data for " + a.name);
  }
  return arrays;
}

std::vector<NamedArray> export_mats(const ag::ParamStore<float>& store, const std::vector<ag::Mat<float>>& mats) {
  std::vector<NamedArray> out;
  std::size_t i = 0;
  for (const auto& p : store.all()) {
    const auto& m = mats[i++];
    out.push_back({p.name, static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols()),
                   std::vector<float>(m.data(), m.data() + m.size())});
  }
  return out;
}

std::vector<ag::Mat<float>> import_mats(const ag::ParamStore<float>& store, const std::vector<NamedArray>& arrays) {
  if (arrays.size() != store.size()) throw ValidationError("checkpoint: optimizer state does not match parameters");
  std::vector<ag::Mat<float>> out;
  std::size_t i = 0;
  for (const auto& p : store.all()) {
    const auto& a = arrays[i++];
    if (a.name != p.name || a.rows != static_cast<std::uint64_t>(p.value.rows()) ||
        a.cols != static_cast<std::uint64_t>(p.value.cols())) {
      throw ValidationError("checkpoint: optimizer state mismatch at " + p.name);
    }
    out.emplace_back(Eigen::Map<const ag::Mat<float>>(a.data.data(), p.value.rows(), p.value.cols()));
  }
  return out;
}

std::string rng_to_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

std::mt19937_64 rng_from_string(const std::string& s) {
  std::mt19937_64 rng;
  std::istringstream is(s);
  is >> rng;
  if (!is) throw ValidationError("checkpoint: corrupt rng state");
  return rng;
}

constexpr std::uint64_t kDataStreamSalt = 0x5851f42d4c957f2dULL;

}  // namespace

// ---------------------------------------------------------------- config

void TrainConfig::check() const {
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
  if (warmup_steps > steps) throw ConfigError("warmup_steps must not exceed steps");
  if (!(base_lr >= 0)) throw ConfigError("base_lr must be nonnegative");
  if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be nonnegative");
  if (!(grad_clip > 0)) throw ConfigError("grad_clip must be positive");
  if (!(mask_density > 0 && mask_density < 1)) throw ConfigError("mask_density must lie in (0, 1)");
  if (!(mean_span_len >= 1)) throw ConfigError("mean_span_len must be >= 1");
  objective.check();
  ModelConfig m = model;
  if (m.vocab_size == 0) m.vocab_size = 1;  // filled from the vocabulary later
  m.check();
}

std::vector<std::string> TrainConfig::keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.emplace_back(f.name);
  return out;
}

std::string TrainConfig::to_text() const {
  std::ostringstream os;
  for (const auto& f : fields()) os << f.name << " = " << f.get(*this) << '\n';
  return os.str();
}

void TrainConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (key == f.name) {
      f.set(*this, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

TrainConfig TrainConfig::from_text(const std::string& text) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  std::unordered_set<std::string> seen;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (!seen.insert(key).second) throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    try {
      cfg.set(key, trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return cfg;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return from_text(buf.str());
}

double learning_rate(std::size_t step, const TrainConfig& cfg) {
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
    return cfg.base_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  const std::size_t decay = cfg.steps - cfg.warmup_steps;
  if (decay == 0) return cfg.base_lr;
  const double progress = std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(decay));
  return cfg.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------- checkpoint

void Checkpoint::write(std::ostream& out) const {
  out.write(kMagic, sizeof kMagic - 1);
  put_string(out, config.to_text());
  put_string(out, vocab_json);
  put_u64(out, step);
  put_string(out, rng_state);
  put_arrays(out, params);
  put_arrays(out, adam_m);
  put_arrays(out, adam_v);
}

Checkpoint Checkpoint::read(std::istream& in) {
  char magic[sizeof kMagic - 1];
  in.read(magic, sizeof magic);
  if (!in || std::string(magic, sizeof magic) != std::string(kMagic, sizeof kMagic - 1)) {
    throw ValidationError("checkpoint: bad magic (expected TAPQ1)");
  }
  Checkpoint c;
  c.config = TrainConfig::from_text(get_string(in));
  c.vocab_json = get_string(in);
  c.config.model.vocab_size = Vocabulary::from_json(c.vocab_json).size();
  c.step = get_u64(in);
  c.rng_state = get_string(in);
  c.params = get_arrays(in);
  c.adam_m = get_arrays(in);
  c.adam_v = get_arrays(in);
  return c;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot open " + tmp.string() + " for writing");
    write(out);
    if (!out) throw RuntimeError("checkpoint write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint " + path.string());
  return read(in);
}

template <typename S>
std::vector<NamedArray> export_parameters(const ag::ParamStore<S>& store) {
  std::vector<NamedArray> out;
  for (const auto& p : store.all()) {
    NamedArray a{p.name, static_cast<std::uint64_t>(p.value.rows()), static_cast<std::uint64_t>(p.value.cols()), {}};
    a.data.resize(static_cast<std::size_t>(p.value.size()));
    for (Eigen::Index i = 0; i < p.value.size(); ++i) a.data[static_cast<std::size_t>(i)] = static_cast<float>(p.value.data()[i]);
    out.push_back(std::move(a));
  }
  return out;
}

template <typename S>
void import_parameters(ag::ParamStore<S>& store, const std::vector<NamedArray>& arrays) {
  if (arrays.size() != store.size()) {
    throw ValidationError("checkpoint holds " + std::to_string(arrays.size()) + " parameters, model expects " +
                          std::to_string(store.size()));
  }
  std::size_t i = 0;
  for (auto& p : store.all()) {
    const auto& a = arrays[i++];
    if (a.name != p.name || a.rows != static_cast<std::uint64_t>(p.value.rows()) ||
        a.cols != static_cast<std::uint64_t>(p.value.cols())) {
      throw ValidationError("checkpoint parameter mismatch at " + p.name);
    }
    for (Eigen::Index k = 0; k < p.value.size(); ++k) p.value.data()[k] = static_cast<S>(a.data[static_cast<std::size_t>(k)]);
  }
}

template <typename S>
std::unique_ptr<Model<S>> load_model(const Checkpoint& ckpt) {
  auto model = std::make_unique<Model<S>>(ckpt.config.model, ckpt.config.seed);
  import_parameters(model->params(), ckpt.params);
  return model;
}

template std::vector<NamedArray> export_parameters<float>(const ag::ParamStore<float>&);
template std::vector<NamedArray> export_parameters<double>(const ag::ParamStore<double>&);
template void import_parameters<float>(ag::ParamStore<float>&, const std::vector<NamedArray>&);
template void import_parameters<double>(ag::ParamStore<double>&, const std::vector<NamedArray>&);
template std::unique_ptr<Model<float>> load_model<float>(const Checkpoint&);
template std::unique_ptr<Model<double>> load_model<double>(const Checkpoint&);

// ---------------------------------------------------------------- trainer

MaskedExample mask_for_training(const OcrDocument& doc, const TrainConfig& cfg, std::mt19937_64& rng) {
  if (doc.size() <= cfg.model.max_ocr_len) return mask_spans(doc, cfg.mask_density, cfg.mean_span_len, rng);
  OcrDocument cut = doc;
  cut.tokens.resize(cfg.model.max_ocr_len);
  cut.bboxes.resize(cfg.model.max_ocr_len);
  return mask_spans(cut, cfg.mask_density, cfg.mean_span_len, rng);
}

Trainer::Trainer(const TrainConfig& cfg, std::vector<OcrDocument> corpus, Vocabulary vocab)
    : cfg_(cfg), corpus_(std::move(corpus)), vocab_(std::move(vocab)), rng_(cfg.seed ^ kDataStreamSalt) {
  cfg_.model.vocab_size = vocab_.size();
  cfg_.check();
  if (corpus_.size() < cfg_.batch_size) {
    throw ConfigError("corpus has " + std::to_string(corpus_.size()) + " documents, fewer than batch_size " +
                      std::to_string(cfg_.batch_size));
  }
  model_ = std::make_unique<Model<float>>(cfg_.model, cfg_.seed);
  for (const auto& p : model_->params().all()) {
    m_.push_back(ag::Mat<float>::Zero(p.value.rows(), p.value.cols()));
    v_.push_back(ag::Mat<float>::Zero(p.value.rows(), p.value.cols()));
  }
}

Trainer::Trainer(const Checkpoint& ckpt, std::vector<OcrDocument> corpus)
    : Trainer(ckpt.config, std::move(corpus), ckpt.vocabulary()) {
  import_parameters(model_->params(), ckpt.params);
  m_ = import_mats(model_->params(), ckpt.adam_m);
  v_ = import_mats(model_->params(), ckpt.adam_v);
  rng_ = rng_from_string(ckpt.rng_state);
  step_ = ckpt.step;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.config = cfg_;
  c.vocab_json = vocab_.to_json();
  c.step = step_;
  c.rng_state = rng_to_string(rng_);
  c.params = export_parameters(model_->params());
  c.adam_m = export_mats(model_->params(), m_);
  c.adam_v = export_mats(model_->params(), v_);
  return c;
}

std::vector<MaskedExample> Trainer::sample_examples() {
  std::uniform_int_distribution<std::size_t> pick(0, corpus_.size() - 1);
  std::vector<std::size_t> rows;
  while (rows.size() < cfg_.batch_size) {
    const std::size_t r = pick(rng_);
    if (std::find(rows.begin(), rows.end(), r) == rows.end()) rows.push_back(r);
  }
  std::vector<MaskedExample> out;
  for (std::size_t r : rows) {
    out.push_back(mask_for_training(corpus_[r], cfg_, rng_));
    if (out.back().target.size() + out.back().masked_token_count() + 1 > cfg_.model.max_text_len) {
      throw ConfigError("max_text_len " + std::to_string(cfg_.model.max_text_len) + " too small for masked targets");
    }
  }
  return out;
}

StepMetrics Trainer::step() {
  const auto examples = sample_examples();
  const PretrainBatch batch = make_batch(examples, vocab_);
  auto& store = model_->params();
  store.zero_grad();
  ag::Tape<float> tape;
  StepMetrics m;
  m.losses = total_loss(tape, *model_, batch, cfg_.objective, rng_);
  if (!std::isfinite(m.losses.total)) {
    if (on_nan) on_nan(examples);
    throw RuntimeError("non-finite loss at step " + std::to_string(step_ + 1) + " (l_lm=" + format_double(m.losses.l_lm) +
                       ", l_con=" + format_double(m.losses.l_con) + ", l_match=" + format_double(m.losses.l_match) + ")");
  }
  tape.backward(m.losses.total_var);

  double sq = 0;
  for (const auto& p : store.all()) sq += static_cast<double>(p.grad.squaredNorm());
  const double norm = std::sqrt(sq);
  if (norm > cfg_.grad_clip) {
    const auto f = static_cast<float>(cfg_.grad_clip / norm);
    for (auto& p : store.all()) p.grad *= f;
  }
  m.step = step_ + 1;
  m.lr = learning_rate(m.step, cfg_);
  adamw_update(m.lr);
  ++step_;
  return m;
}

void Trainer::adamw_update(double lr) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double t = static_cast<double>(step_ + 1);
  const double c1 = 1.0 - std::pow(b1, t);
  const double c2 = 1.0 - std::pow(b2, t);
  std::size_t i = 0;
  for (auto& p : model_->params().all()) {
    auto& m = m_[i];
    auto& v = v_[i];
    ++i;
    m = static_cast<float>(b1) * m + static_cast<float>(1 - b1) * p.grad;
    v = static_cast<float>(b2) * v + static_cast<float>(1 - b2) * p.grad.cwiseProduct(p.grad);
    const bool decay = p.name.size() > 7 && p.name.compare(p.name.size() - 7, 7, ".weight") == 0;
    auto update = (m.array() / static_cast<float>(c1)) / ((v.array() / static_cast<float>(c2)).sqrt() + static_cast<float>(eps));
    if (decay) {
      p.value.array() -= static_cast<float>(lr) * (update + static_cast<float>(cfg_.weight_decay) * p.value.array());
    } else {
      p.value.array() -= static_cast<float>(lr) * update;
    }
  }
}

void Trainer::run(std::size_t max_new_steps, const std::function<void(const StepMetrics&)>& on_step) {
  for (std::size_t n = 0; n < max_new_steps && step_ < cfg_.steps; ++n) {
    const StepMetrics m = step();
    if (on_step) on_step(m);
  }
}

void write_metrics_header(std::ostream& out) { out << "step,lr,l_lm,l_con,l_match,total,acc_lm,acc_ret,acc_match\n"; }

void write_metrics_row(std::ostream& out, const StepMetrics& m) {
  const auto& l = m.losses;
  out << m.step << ',' << format_double(m.lr) << ',' << format_double(l.l_lm) << ',' << format_double(l.l_con) << ','
      << format_double(l.l_match) << ',' << format_double(l.total) << ',' << format_double(l.acc_lm) << ','
      << format_double(l.acc_ret) << ',' << format_double(l.acc_match) << '\n';
}

Checkpoint train(const TrainConfig& cfg) {
  if (cfg.train_corpus.empty()) throw ConfigError("train_corpus is not set");
  return train(cfg, load_corpus(cfg.train_corpus));
}

Checkpoint train(const TrainConfig& cfg, std::vector<OcrDocument> corpus, const Checkpoint* resume) {
  std::unique_ptr<Trainer> trainer;
  if (resume) {
    trainer = std::make_unique<Trainer>(*resume, std::move(corpus));
  } else {
    cfg.check();
    Vocabulary vocab = Vocabulary::build(corpus, cfg.min_count, cfg.max_sentinels);
    trainer = std::make_unique<Trainer>(cfg, std::move(corpus), std::move(vocab));
  }
  const TrainConfig& active = trainer->config();

  std::ofstream metrics;
  if (!active.metrics_path.empty()) {
    const std::filesystem::path mp(active.metrics_path);
    if (mp.has_parent_path()) std::filesystem::create_directories(mp.parent_path());
    const bool fresh = !resume || !std::filesystem::exists(mp) || std::filesystem::file_size(mp) == 0;
    metrics.open(mp, fresh ? std::ios::trunc : std::ios::app);
    if (!metrics) throw ValidationError("cannot open metrics file " + active.metrics_path);
    if (fresh) write_metrics_header(metrics);
    trainer->on_nan = [mp](const std::vector<MaskedExample>& batch) {
      save_masked_examples(batch, mp.parent_path() / "nan_batch.jsonl");
    };
  }
  trainer->run(static_cast<std::size_t>(-1), [&](const StepMetrics& m) {
    if (metrics.is_open()) {
      write_metrics_row(metrics, m);
      metrics.flush();
    }
    if (!active.checkpoint_path.empty() && active.checkpoint_every > 0 && m.step % active.checkpoint_every == 0) {
      trainer->checkpoint().save(active.checkpoint_path);
    }
  });
  Checkpoint final_ckpt = trainer->checkpoint();
  if (!active.checkpoint_path.empty()) final_ckpt.save(active.checkpoint_path);
  return final_ckpt;
}

// ---------------------------------------------------------------- evaluation

EvalMetrics evaluate(const Model<float>& model, const Vocabulary& vocab, std::span<const OcrDocument> heldout,
                     const TrainConfig& cfg, std::uint64_t seed, std::size_t batch_size) {
  if (batch_size < 2) throw ConfigError("evaluation batch size must be at least 2");
  if (heldout.size() < batch_size) {
    throw ValidationError("held-out set has " + std::to_string(heldout.size()) + " documents; need at least " +
                          std::to_string(batch_size));
  }
  std::mt19937_64 rng(seed);
  EvalMetrics out;
  double lm_correct = 0, lm_total = 0, ret = 0, match = 0;
  for (std::size_t start = 0; start + batch_size <= heldout.size(); start += batch_size) {
    std::vector<MaskedExample> examples;
    for (std::size_t i = start; i < start + batch_size; ++i) examples.push_back(mask_for_training(heldout[i], cfg, rng));
    const PretrainBatch batch = make_batch(examples, vocab);
    ag::Tape<float> tape;
    const LossBundle b = total_loss(tape, model, batch, cfg.objective, rng);
    lm_correct += b.acc_lm * static_cast<double>(b.lm_positions);
    lm_total += static_cast<double>(b.lm_positions);
    ret += b.acc_ret * static_cast<double>(batch_size);
    match += b.acc_match * static_cast<double>(batch_size);
    out.l_lm += b.l_lm;
    out.l_con += b.l_con;
    out.l_match += b.l_match;
    ++out.batches;
    out.rows += batch_size;
  }
  const auto nb = static_cast<double>(out.batches);
  out.acc_lm = lm_total > 0 ? lm_correct / lm_total : 0.0;
  out.acc_ret = ret / static_cast<double>(out.rows);
  out.acc_match = match / static_cast<double>(out.rows);
  out.l_lm /= nb;
  out.l_con /= nb;
  out.l_match /= nb;
  return out;
}

EvalMetrics evaluate(const Checkpoint& ckpt, std::span<const OcrDocument> heldout, std::uint64_t seed,
                     std::size_t batch_size) {
  const auto model = load_model<float>(ckpt);
  return evaluate(*model, ckpt.vocabulary(), heldout, ckpt.config, seed, batch_size);
}

}  // namespace tapq
