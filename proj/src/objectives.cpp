#include "tapq/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "tapq/error.hpp"

namespace tapq {

PretrainBatch make_batch(std::span<const MaskedExample> examples, const Vocabulary& vocab) {
  if (examples.empty()) throw ValidationError("make_batch: no examples");
  PretrainBatch batch;
  batch.first_word_id = vocab.first_word_id();
  std::vector<std::vector<TokenId>> ids;
  std::vector<std::vector<BoundingBox>> boxes;
  for (const auto& ex : examples) {
    if (ex.target.empty()) throw ValidationError("make_batch: example from '" + ex.source_doc_id + "' has no masked span");
    ids.push_back(vocab.encode(ex.noisy_tokens));
    boxes.push_back(ex.noisy_bboxes);
    batch.targets.push_back(vocab.encode_target(ex.target));
    batch.doc_ids.push_back(ex.source_doc_id);
  }
  batch.ocr = OcrInput::from_sequences(ids, boxes);
  return batch;
}

DenoisingText denoising_text(const PretrainBatch& batch) {
  std::vector<std::vector<TokenId>> rows;
  for (const auto& target : batch.targets) {
    std::vector<TokenId> row{Vocabulary::kDec};
    row.insert(row.end(), target.begin(), target.end() - 1);
    rows.push_back(std::move(row));
  }
  DenoisingText out;
  out.text = TextInput::from_sequences(rows);
  out.labels.assign(out.text.batch * out.text.length, -1);
  for (std::size_t b = 0; b < batch.targets.size(); ++b) {
    for (std::size_t j = 0; j < batch.targets[b].size(); ++j) out.labels[b * out.text.length + j] = batch.targets[b][j];
  }
  return out;
}

TextInput cls_text(const PretrainBatch& batch, std::span<const std::size_t> rows) {
  std::vector<std::vector<TokenId>> seqs;
  for (std::size_t r : rows) {
    std::vector<TokenId> row{Vocabulary::kCls};
    const auto& target = batch.targets.at(r);
    row.insert(row.end(), target.begin(), target.end());
    seqs.push_back(std::move(row));
  }
  return TextInput::from_sequences(seqs);
}

TextInput cls_text(const PretrainBatch& batch) {
  std::vector<std::size_t> rows(batch.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return cls_text(batch, rows);
}

void ObjectiveConfig::check() const {
  if (!(tau > 0)) throw ConfigError("tau must be positive");
  if (!(match_positive_prob >= 0.0 && match_positive_prob <= 1.0)) {
    throw ConfigError("match probability p must lie in [0, 1]");
  }
}

template <typename S>
DenoisingResult denoising_loss(ag::Tape<S>& t, const Model<S>& model, const PretrainBatch& batch,
                               const OcrEmbeddings& ocr) {
  const DenoisingText dt = denoising_text(batch);
  const auto out = model.ocrq()(t, dt.text, ocr, MaskRegime::kMultimodalCausal);
  const ag::Var logits = model.ocrq().lm_logits(t, out);

  DenoisingResult res;
  const auto& lv = t.value(logits);
  for (std::size_t i = 0; i < dt.labels.size(); ++i) {
    const std::int32_t y = dt.labels[i];
    if (y < batch.first_word_id) continue;
    Eigen::Index best = 0;
    lv.row(static_cast<Eigen::Index>(i)).maxCoeff(&best);
    ++res.word_positions;
    if (best == y) ++res.word_correct;
  }
  res.loss = ag::cross_entropy(t, logits, dt.labels);
  return res;
}

template <typename S>
ag::Var contrastive_similarity(ag::Tape<S>& t, const Model<S>& model, const PretrainBatch& batch,
                               const OcrEmbeddings& ocr) {
  if (batch.size() < 2) throw ValidationError("contrastive objective needs a batch of at least 2");
  const auto out = model.ocrq()(t, cls_text(batch), ocr, MaskRegime::kUnimodal);
  return ag::max_similarity(t, model.ocrq().project_queries(t, out), model.ocrq().project_text(t, out),
                            out.queries);
}

std::vector<std::size_t> mine_hard_negatives(const ag::Mat<double>& similarity,
                                             std::span<const std::string> doc_ids, std::mt19937_64& rng) {
  const auto B = static_cast<std::size_t>(similarity.rows());
  if (B < 2 || similarity.cols() != similarity.rows()) throw ValidationError("mine_hard_negatives: need a square similarity with B >= 2");
  if (doc_ids.size() != B) throw ValidationError("mine_hard_negatives: doc id count mismatch");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::size_t> out(B);
  std::vector<double> w(B);
  for (std::size_t i = 0; i < B; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < B; ++j) any = any || (j != i && doc_ids[j] != doc_ids[i]);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < B; ++j) {
      const bool ok = j != i && (!any || doc_ids[j] != doc_ids[i]);
      if (ok) mx = std::max(mx, any ? similarity(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) : 0.0);
    }
    double z = 0;
    for (std::size_t j = 0; j < B; ++j) {
      const bool ok = j != i && (!any || doc_ids[j] != doc_ids[i]);
      // Without an eligible partner the fallback is uniform over j != i.
      w[j] = ok ? std::exp((any ? similarity(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) : 0.0) - mx) : 0.0;
      z += w[j];
    }
    double u = unit(rng) * z;
    std::size_t pick = B;
    for (std::size_t j = 0; j < B; ++j) {
      if (w[j] == 0.0) continue;
      pick = j;
      if (u < w[j]) break;
      u -= w[j];
    }
    out[i] = pick;
  }
  return out;
}

template <typename S>
MatchingResult matching_loss(ag::Tape<S>& t, const Model<S>& model, const PretrainBatch& batch,
                             const OcrEmbeddings& ocr, const ag::Mat<double>& similarity, double p,
                             std::mt19937_64& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("match probability p must lie in [0, 1]");
  if (batch.size() < 2) throw ValidationError("matching objective needs a batch of at least 2");
  const auto negatives = mine_hard_negatives(similarity, batch.doc_ids, rng);
  std::bernoulli_distribution keep(p);
  MatchingResult res;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const bool positive = keep(rng);
    res.partner.push_back(positive ? i : negatives[i]);
    res.labels.push_back(positive ? 1 : 0);
  }
  const auto out = model.ocrq()(t, cls_text(batch, res.partner), ocr, MaskRegime::kBidirectional);
  const ag::Var logits = model.ocrq().match_logits(t, out);
  const auto& lv = t.value(logits);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const bool predicted = lv(static_cast<Eigen::Index>(i), 0) > 0;  // sigmoid > 0.5
    if (predicted == (res.labels[i] == 1)) ++res.correct;
  }
  res.loss = ag::bce_with_logits(t, logits, res.labels);
  return res;
}

template <typename S>
LossBundle total_loss(ag::Tape<S>& t, const Model<S>& model, const PretrainBatch& batch,
                      const ObjectiveConfig& cfg, std::mt19937_64& rng) {
  cfg.check();
  const OcrEmbeddings ocr = model.encoder()(t, batch.ocr);

  LossBundle bundle;
  const DenoisingResult lm = denoising_loss(t, model, batch, ocr);
  const ag::Var sim = contrastive_similarity(t, model, batch, ocr);
  const ag::Var con = ag::contrastive_loss(t, sim, static_cast<S>(cfg.tau), cfg.contrastive);
  const ag::Mat<double> sim_values = to_double(t.value(sim));
  const MatchingResult match = matching_loss(t, model, batch, ocr, sim_values, cfg.match_positive_prob, rng);

  bundle.total_var = ag::weighted_sum<S>(t, {{lm.loss, static_cast<S>(cfg.w_lm)},
                                             {con, static_cast<S>(cfg.w_con)},
                                             {match.loss, static_cast<S>(cfg.w_match)}});
  bundle.l_lm = static_cast<double>(t.value(lm.loss)(0, 0));
  bundle.l_con = static_cast<double>(t.value(con)(0, 0));
  bundle.l_match = static_cast<double>(t.value(match.loss)(0, 0));
  bundle.total = static_cast<double>(t.value(bundle.total_var)(0, 0));
  bundle.lm_positions = lm.word_positions;
  bundle.acc_lm = lm.word_positions ? static_cast<double>(lm.word_correct) / static_cast<double>(lm.word_positions) : 0.0;
  std::size_t hits = 0;
  for (Eigen::Index i = 0; i < sim_values.rows(); ++i) {
    Eigen::Index best = 0;
    sim_values.row(i).maxCoeff(&best);
    if (best == i) ++hits;
  }
  bundle.acc_ret = static_cast<double>(hits) / static_cast<double>(batch.size());
  bundle.acc_match = static_cast<double>(match.correct) / static_cast<double>(batch.size());
  return bundle;
}

#define TAPQ_INSTANTIATE(S)                                                                                       \
  template DenoisingResult denoising_loss<S>(ag::Tape<S>&, const Model<S>&, const PretrainBatch&,                 \
                                             const OcrEmbeddings&);                                               \
  template ag::Var contrastive_similarity<S>(ag::Tape<S>&, const Model<S>&, const PretrainBatch&,                 \
                                             const OcrEmbeddings&);                                               \
  template MatchingResult matching_loss<S>(ag::Tape<S>&, const Model<S>&, const PretrainBatch&,                   \
                                           const OcrEmbeddings&, const ag::Mat<double>&, double, std::mt19937_64&); \
  template LossBundle total_loss<S>(ag::Tape<S>&, const Model<S>&, const PretrainBatch&, const ObjectiveConfig&,  \
                                    std::mt19937_64&);

TAPQ_INSTANTIATE(float)
TAPQ_INSTANTIATE(double)

#undef TAPQ_INSTANTIATE

}  // namespace tapq
