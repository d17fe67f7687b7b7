#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "dialclip/data.hpp"
#include "dialclip/eval.hpp"
#include "dialclip/model.hpp"
#include "dialclip/tensor.hpp"

namespace dialclip::testing {

// Independent central-difference oracle used by the op tests. Kept separate
// from grad_check() so the checker itself is not its own witness.
inline std::vector<double> numeric_grad(const std::function<double()>& f, Tensor& x,
                                        double h = 1e-6) {
  std::vector<double> g(x.numel());
  auto v = x.mutable_values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double orig = v[i];
    v[i] = orig + h;
    const double up = f();
    v[i] = orig - h;
    const double down = f();
    v[i] = orig;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline double max_rel_err(std::span<const double> a, const std::vector<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), 1e-8});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

// Weighted sum of an op's output with fixed pseudo-random weights; turns any
// tensor-valued op into a scalar whose gradient exercises every output.
inline Tensor probe(const Tensor& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  Tensor w = Tensor::randn(y.shape(), rng, 1.0);
  return ops::sum(ops::mul(y, w));
}

// Small corpus and model that build in milliseconds.
inline CorpusSpec tiny_corpus(std::uint64_t seed = 3) {
  CorpusSpec c;
  c.n_topics = 4;
  c.dialogs_per_topic = 40;
  c.vocab_size = 48;
  c.tokens_per_topic = 4;
  c.min_tokens = 2;
  c.max_tokens = 5;
  c.max_turns = 4;
  c.n_patches = 4;
  c.patch_dim = 6;
  c.seed = seed;
  return c;
}

inline ModelConfig tiny_model(std::uint64_t seed = 5) {
  ModelConfig m;
  const CorpusSpec c = tiny_corpus();
  m.encoder.d_model = 16;
  m.encoder.n_layers = 2;
  m.encoder.n_heads = 2;
  m.encoder.vocab_size = c.vocab_size;
  m.encoder.n_patches = c.n_patches;
  m.encoder.patch_dim = c.patch_dim;
  m.encoder.max_seq = 32;
  m.encoder.ffn_mult = 2;
  m.cpg_layers = 1;
  m.context_len = 4;
  m.domain_len = 2;
  m.proj_dim = 8;
  m.seed = seed;
  return m;
}

inline std::vector<double> snapshot(const ParamList& params) {
  std::vector<double> out;
  for (const auto& p : params) out.insert(out.end(), p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

// Recall by fully sorting each row: score descending, then candidate index.
inline double brute_force_recall(const ScoreMatrix& m, std::size_t k) {
  if (m.rows == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < m.rows; ++r) {
    std::vector<std::pair<double, std::size_t>> row;
    for (std::size_t c = 0; c < m.cols; ++c) row.emplace_back(-m.scores[r * m.cols + c], c);
    std::sort(row.begin(), row.end());
    for (std::size_t i = 0; i < k; ++i)
      if (row[i].second == m.positive[r]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(m.rows);
}

// Random matrix with scores drawn from a handful of levels, so ties are common.
inline ScoreMatrix random_score_matrix(Rng& rng, std::size_t max_rows = 32, std::size_t max_cols = 128) {
  ScoreMatrix m;
  m.rows = 1 + rng.below(static_cast<std::uint32_t>(max_rows));
  m.cols = 1 + rng.below(static_cast<std::uint32_t>(max_cols));
  const std::uint32_t levels = 1 + rng.below(8);
  for (std::size_t i = 0; i < m.rows * m.cols; ++i) m.scores.push_back(static_cast<double>(rng.below(levels)) * 0.5);
  for (std::size_t r = 0; r < m.rows; ++r) m.positive.push_back(rng.below(static_cast<std::uint32_t>(m.cols)));
  return m;
}

}  // namespace dialclip::testing
