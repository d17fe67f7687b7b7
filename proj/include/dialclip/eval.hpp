#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dialclip/dialog.hpp"
#include "dialclip/model.hpp"
#include "dialclip/rng.hpp"

namespace dialclip {

/// Scores of each query (row) against its own candidate pool (columns).
struct ScoreMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> scores;
  std::vector<std::size_t> positive;

  double at(std::size_t r, std::size_t c) const { return scores[r * cols + c]; }

  void validate() const {
    if (scores.size() != rows * cols || positive.size() != rows)
      throw ContractError("score matrix storage does not match its shape");
    for (auto p : positive)
      if (p >= cols) throw ContractError("positive index out of range");
    for (double s : scores)
      if (!std::isfinite(s)) throw NumericError("score matrix holds a non-finite entry");
  }
};

/// Zero-based rank of the positive in row r. Candidates with a higher score
/// rank ahead; on equal scores the lower candidate index ranks ahead.
inline std::size_t positive_rank(const ScoreMatrix& m, std::size_t r) {
  const std::size_t pos = m.positive[r];
  const double sp = m.at(r, pos);
  std::size_t rank = 0;
  for (std::size_t c = 0; c < m.cols; ++c) {
    const double s = m.at(r, c);
    if (s > sp || (s == sp && c < pos)) ++rank;
  }
  return rank;
}

inline double recall_at_k(const ScoreMatrix& m, std::size_t k) {
  if (k < 1) throw ContractError("recall_at_k needs k >= 1");
  if (k > m.cols)
    throw ContractError("recall_at_k: k=" + std::to_string(k) + " exceeds " + std::to_string(m.cols) +
                        " candidates");
  m.validate();
  if (m.rows == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < m.rows; ++r)
    if (positive_rank(m, r) < k) ++hits;
  return static_cast<double>(hits) / static_cast<double>(m.rows);
}

struct RecallAt {
  double r1 = 0.0, r5 = 0.0, r10 = 0.0;
  std::size_t queries = 0;
  double sum() const { return 100.0 * (r1 + r5 + r10); }
};

/// R@{1,5,10} overall, per retrieval type, and split by response modality
/// (TR for text responses, IR for image responses).
struct RecallReport {
  RecallAt overall;
  std::array<RecallAt, 4> per_type{};
  RecallAt text_responses;
  RecallAt image_responses;

  double r1() const { return overall.r1; }
  double r5() const { return overall.r5; }
  double r10() const { return overall.r10; }
  double sum_metric() const { return overall.sum(); }
};

namespace eval_detail {

inline RecallAt recall_for_rows(const ScoreMatrix& m, const std::vector<std::size_t>& rows) {
  RecallAt out;
  out.queries = rows.size();
  if (rows.empty()) return out;
  std::size_t h1 = 0, h5 = 0, h10 = 0;
  for (auto r : rows) {
    const std::size_t rank = positive_rank(m, r);
    h1 += rank < 1;
    h5 += rank < 5;
    h10 += rank < 10;
  }
  const auto n = static_cast<double>(rows.size());
  out.r1 = static_cast<double>(h1) / n;
  out.r5 = static_cast<double>(h5) / n;
  out.r10 = static_cast<double>(h10) / n;
  return out;
}

}  // namespace eval_detail

/// Aggregates a score matrix whose rows carry the given retrieval types.
inline RecallReport report_from_scores(const ScoreMatrix& m, const std::vector<RetrievalType>& row_types) {
  if (m.cols < 10) throw ContractError("recall report needs at least 10 candidates per query");
  m.validate();
  RecallReport rep;
  std::vector<std::size_t> all, text, image;
  std::array<std::vector<std::size_t>, 4> typed;
  for (std::size_t r = 0; r < m.rows; ++r) {
    all.push_back(r);
    typed[row_types[r].index()].push_back(r);
    (row_types[r].response == Modality::Text ? text : image).push_back(r);
  }
  rep.overall = eval_detail::recall_for_rows(m, all);
  for (std::size_t t = 0; t < 4; ++t) rep.per_type[t] = eval_detail::recall_for_rows(m, typed[t]);
  rep.text_responses = eval_detail::recall_for_rows(m, text);
  rep.image_responses = eval_detail::recall_for_rows(m, image);
  return rep;
}

struct EvalOptions {
  std::size_t pool_size = 100;
  std::uint64_t seed = 0x5eedULL;
};

struct Evaluation {
  RecallReport report;
  ScoreMatrix scores;
  std::vector<RetrievalType> row_types;
};

/// Scores every dialog of `split` against a pool of its own positive plus
/// pool_size − 1 distractor responses of the same modality drawn from other
/// topics in the split. The positive's slot in the pool is random. Pools
/// depend only on the split and the seed, so two models see the same pools.
inline Evaluation evaluate_detailed(const DialClipModel& model, const std::vector<Dialog>& split,
                                    const EvalOptions& opt = {}) {
  if (split.empty()) throw InputError("evaluation split is empty");
  if (opt.pool_size < 10) throw ContractError("pool_size must be at least 10");
  NoGradGuard no_grad;
  Rng rng(opt.seed);

  std::vector<Tensor> cand_backbone(split.size());
  std::array<std::vector<Tensor>, 4> projected;
  for (auto& p : projected) p.resize(split.size());
  auto candidate = [&](std::size_t j, RetrievalType rt) -> const Tensor& {
    Tensor& slot = projected[model.mop().expert_index(rt)][j];
    if (!slot.defined()) {
      if (!cand_backbone[j].defined()) cand_backbone[j] = model.encode_candidate_backbone(split[j].response);
      slot = model.mop().project_candidate(cand_backbone[j], rt);
    }
    return slot;
  };

  Evaluation ev;
  ev.scores.rows = split.size();
  ev.scores.cols = opt.pool_size;
  ev.scores.scores.resize(split.size() * opt.pool_size);
  ev.scores.positive.resize(split.size());
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < split.size(); ++i) {
    const Dialog& d = split[i];
    const RetrievalType rt = d.retrieval_type();
    eligible.clear();
    for (std::size_t j = 0; j < split.size(); ++j)
      if (j != i && split[j].response.modality == rt.response && split[j].topic_id != d.topic_id)
        eligible.push_back(j);
    if (eligible.size() + 1 < opt.pool_size)
      throw InputError("dialog " + d.id + ": only " + std::to_string(eligible.size()) +
                       " distractors available for a pool of " + std::to_string(opt.pool_size));
    // Partial Fisher-Yates: the first pool_size − 1 entries become the sample.
    for (std::size_t k = 0; k + 1 < opt.pool_size; ++k) {
      const std::size_t pick = k + rng.below(static_cast<std::uint32_t>(eligible.size() - k));
      std::swap(eligible[k], eligible[pick]);
    }
    const std::size_t pos = rng.below(static_cast<std::uint32_t>(opt.pool_size));
    ev.scores.positive[i] = pos;
    const Tensor x = model.encode_query(d, rt);
    std::size_t next = 0;
    for (std::size_t c = 0; c < opt.pool_size; ++c) {
      const std::size_t j = c == pos ? i : eligible[next++];
      const Tensor& y = candidate(j, rt);
      double s = 0.0;
      for (std::size_t e = 0; e < x.numel(); ++e) s += x.values()[e] * y.values()[e];
      ev.scores.scores[i * opt.pool_size + c] = s;
    }
    ev.row_types.push_back(rt);
  }
  ev.report = report_from_scores(ev.scores, ev.row_types);
  return ev;
}

inline RecallReport evaluate(const DialClipModel& model, const std::vector<Dialog>& split,
                             const EvalOptions& opt = {}) {
  return evaluate_detailed(model, split, opt).report;
}

/// Caption→image retrieval with the temporary pretraining heads; used to
/// monitor backbone pretraining. Distractor images come from other topics.
template <class Pairs>
RecallAt evaluate_pairs(const DialClipModel& model, const Pairs& pairs, std::size_t pool_size = 100,
                        std::uint64_t seed = 0x5eedULL) {
  if (pool_size < 10) throw ContractError("pool_size must be at least 10");
  NoGradGuard no_grad;
  Rng rng(seed);
  std::vector<Tensor> img(pairs.size()), txt(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    img[i] = model.pretrain_embed_image(pairs[i].patches);
    txt[i] = model.pretrain_embed_text(pairs[i].tokens);
  }
  ScoreMatrix m;
  m.rows = pairs.size();
  m.cols = pool_size;
  m.scores.resize(m.rows * pool_size);
  m.positive.resize(m.rows);
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    eligible.clear();
    for (std::size_t j = 0; j < pairs.size(); ++j)
      if (pairs[j].topic != pairs[i].topic) eligible.push_back(j);
    if (eligible.size() + 1 < pool_size) throw InputError("not enough pairs for the requested pool");
    for (std::size_t k = 0; k + 1 < pool_size; ++k)
      std::swap(eligible[k], eligible[k + rng.below(static_cast<std::uint32_t>(eligible.size() - k))]);
    const std::size_t pos = rng.below(static_cast<std::uint32_t>(pool_size));
    m.positive[i] = pos;
    std::size_t next = 0;
    for (std::size_t c = 0; c < pool_size; ++c) {
      const std::size_t j = c == pos ? i : eligible[next++];
      double s = 0.0;
      for (std::size_t e = 0; e < txt[i].numel(); ++e) s += txt[i].values()[e] * img[j].values()[e];
      m.scores[i * pool_size + c] = s;
    }
  }
  RecallAt out;
  out.queries = m.rows;
  out.r1 = recall_at_k(m, 1);
  out.r5 = recall_at_k(m, 5);
  out.r10 = recall_at_k(m, 10);
  return out;
}

}  // namespace dialclip
