#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "tapq/corpus.hpp"
#include "tapq/model.hpp"
#include "tapq/objectives.hpp"
#include "tapq/tokenizer.hpp"

namespace tapq {

struct TrainConfig {
  ModelConfig model;  // vocab_size is filled in from the vocabulary
  std::size_t min_count = 1;
  std::size_t max_sentinels = Vocabulary::kDefaultMaxSentinels;

  std::size_t steps = 3000;
  std::size_t batch_size = 16;
  double base_lr = 1e-3;
  std::size_t warmup_steps = 200;
  double weight_decay = 0.01;
  double grad_clip = 1.0;

  double mask_density = 0.15;
  double mean_span_len = 3.0;
  ObjectiveConfig objective;

  std::uint64_t seed = 0;
  std::string train_corpus;
  std::string heldout_corpus;
  std::string checkpoint_path;
  std::string metrics_path;
  std::size_t checkpoint_every = 500;  // 0 = only at the end

  void check() const;

  /// Flat "key = value" text, one key per line, '#' starts a comment.
  std::string to_text() const;
  static TrainConfig from_text(const std::string& text);
  static TrainConfig load(const std::filesystem::path& path);
  /// Applies one "key=value" override; ConfigError on unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  static std::vector<std::string> keys();
};

/// lr(step) = base · step / warmup during warmup, then cosine decay to 0 at `steps`.
double learning_rate(std::size_t step, const TrainConfig& cfg);

struct NamedArray {
  std::string name;
  std::uint64_t rows = 0;
  std::uint64_t cols = 0;
  std::vector<float> data;

  friend bool operator==(const NamedArray&, const NamedArray&) = default;
};

/// Everything needed to resume training or run inference. Serialized as the
/// versioned "TAPQ1" archive described in docs/checkpoint_format.md.
struct Checkpoint {
  TrainConfig config;
  std::string vocab_json;
  std::uint64_t step = 0;
  std::string rng_state;
  std::vector<NamedArray> params;
  std::vector<NamedArray> adam_m;
  std::vector<NamedArray> adam_v;

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
  void write(std::ostream& out) const;
  static Checkpoint read(std::istream& in);

  Vocabulary vocabulary() const { return Vocabulary::from_json(vocab_json); }
};

template <typename S>
std::vector<NamedArray> export_parameters(const ag::ParamStore<S>& store);
template <typename S>
void import_parameters(ag::ParamStore<S>& store, const std::vector<NamedArray>& arrays);

/// Builds a model from the checkpoint's config and loads its parameters.
template <typename S>
std::unique_ptr<Model<S>> load_model(const Checkpoint& ckpt);

struct StepMetrics {
  std::size_t step = 0;
  double lr = 0;
  LossBundle losses;
};

/// Single-writer pretraining loop over an in-memory corpus.
class Trainer {
 public:
  Trainer(const TrainConfig& cfg, std::vector<OcrDocument> corpus, Vocabulary vocab);
  /// Resumes from `ckpt`; `corpus` must be the one the checkpoint was trained on.
  Trainer(const Checkpoint& ckpt, std::vector<OcrDocument> corpus);

  /// Runs until `cfg.steps` total steps, or `max_new_steps` more, whichever is first.
  /// The callback sees every completed step.
  void run(std::size_t max_new_steps = static_cast<std::size_t>(-1),
           const std::function<void(const StepMetrics&)>& on_step = {});

  /// One optimization step on a fresh batch.
  StepMetrics step();

  Checkpoint checkpoint() const;
  std::size_t steps_done() const { return step_; }
  const Model<float>& model() const { return *model_; }
  Model<float>& model() { return *model_; }
  const Vocabulary& vocabulary() const { return vocab_; }
  const TrainConfig& config() const { return cfg_; }

  /// Masked examples for the next batch, drawn from the training rng.
  std::vector<MaskedExample> sample_examples();

  /// Called with the offending batch when a step produces a non-finite loss,
  /// before the RuntimeError propagates.
  std::function<void(const std::vector<MaskedExample>&)> on_nan;

 private:
  void adamw_update(double lr);

  TrainConfig cfg_;
  std::vector<OcrDocument> corpus_;
  Vocabulary vocab_;
  std::unique_ptr<Model<float>> model_;
  std::vector<ag::Mat<float>> m_;
  std::vector<ag::Mat<float>> v_;
  std::mt19937_64 rng_;
  std::size_t step_ = 0;
};

/// Writes the CSV header used by `train`.
void write_metrics_header(std::ostream& out);
void write_metrics_row(std::ostream& out, const StepMetrics& m);

/// Loads the configured corpus, builds the vocabulary, trains, writes metrics
/// and periodic checkpoints, and returns the final checkpoint. NaN losses abort
/// with a RuntimeError after dumping the offending batch next to the metrics.
/// When `resume` is given, training continues from it and metrics are appended.
Checkpoint train(const TrainConfig& cfg);
Checkpoint train(const TrainConfig& cfg, std::vector<OcrDocument> corpus, const Checkpoint* resume = nullptr);

struct EvalMetrics {
  double acc_lm = 0;
  double acc_ret = 0;
  double acc_match = 0;
  double l_lm = 0;
  double l_con = 0;
  double l_match = 0;
  std::size_t batches = 0;
  std::size_t rows = 0;
};

/// Proxy metrics over full batches of `batch_size` held-out documents, masked
/// with a generator seeded by `seed`. Needs at least one full batch.
EvalMetrics evaluate(const Model<float>& model, const Vocabulary& vocab, std::span<const OcrDocument> heldout,
                     const TrainConfig& cfg, std::uint64_t seed, std::size_t batch_size = 16);
/// Truncates to the model's OCR length and span-masks with the configured density.
MaskedExample mask_for_training(const OcrDocument& doc, const TrainConfig& cfg, std::mt19937_64& rng);

EvalMetrics evaluate(const Checkpoint& ckpt, std::span<const OcrDocument> heldout, std::uint64_t seed,
                     std::size_t batch_size = 16);

}  // namespace tapq
