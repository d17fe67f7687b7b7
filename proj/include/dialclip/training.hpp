#pragma once

#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dialclip/data.hpp"
#include "dialclip/eval.hpp"
#include "dialclip/model.hpp"
#include "dialclip/tensor.hpp"

namespace dialclip {

struct TrainConfig {
  double base_lr = 5e-5;
  std::size_t total_steps = 1000;
  std::size_t batch_size = 32;
  double weight_decay = 0.01;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  Stage stage = Stage::Stage2;
  std::uint64_t seed = 0;
  // Evaluate every this many steps (0 = only after the last step).
  std::size_t eval_every = 0;
  EvalOptions eval;

  void validate() const {
    if (total_steps == 0 || batch_size == 0) throw ConfigError("steps and batch size must be positive");
    if (!(base_lr >= 0.0) || weight_decay < 0.0) throw ConfigError("learning rate and decay must be >= 0");
    if (adam_beta1 < 0.0 || adam_beta1 >= 1.0 || adam_beta2 < 0.0 || adam_beta2 >= 1.0 || !(adam_eps > 0.0))
      throw ConfigError("bad Adam hyperparameters");
  }
};

/// Plain dot product; no normalization, no temperature.
inline double similarity(const Tensor& x, const Tensor& y) {
  if (x.numel() != y.numel())
    throw ShapeError("similarity: widths " + shape_str(x.shape()) + " and " + shape_str(y.shape()));
  double s = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) s += x.values()[i] * y.values()[i];
  return s;
}

/// −log(e^{s(x,y+)} / (e^{s(x,y+)} + Σ_j e^{s(x,y_j−)})) as a scalar tensor.
inline Tensor contrastive_loss(const Tensor& x, const Tensor& y_pos, const std::vector<Tensor>& y_negs) {
  std::vector<Tensor> cands{y_pos};
  cands.insert(cands.end(), y_negs.begin(), y_negs.end());
  const Tensor scores = ops::matmul_nt(ops::reshape(x, {1, x.numel()}), ops::concat_rows(cands));
  const std::size_t target = 0;
  return ops::softmax_cross_entropy(scores, std::span<const std::size_t>(&target, 1));
}

/// Mean over rows of the contrastive loss where row i's negatives are the
/// other rows' positives.
inline Tensor in_batch_loss(const Tensor& queries, const Tensor& candidates) {
  const Tensor scores = ops::matmul_nt(queries, candidates);
  std::vector<std::size_t> targets(queries.rows());
  for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = i;
  return ops::softmax_cross_entropy(scores, targets);
}

/// lr(t) = base_lr · (1 − t / total_steps).
inline double linear_lr(std::size_t step, const TrainConfig& cfg) {
  if (step > cfg.total_steps)
    throw ContractError("step " + std::to_string(step) + " beyond schedule of " +
                        std::to_string(cfg.total_steps));
  return cfg.base_lr * (1.0 - static_cast<double>(step) / static_cast<double>(cfg.total_steps));
}

/// AdamW with decoupled weight decay on the parameters flagged for it.
///
/// Only parameters reached by the latest backward pass are stepped; the rest
/// keep their values and moments. A batch that never routes through an expert
/// therefore leaves that expert bit-identical, decay included. Bias correction
/// uses each parameter's own update count.
class AdamW {
 public:
  AdamW(ParamList params, const TrainConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.numel(), 0.0);
      v_.emplace_back(p.tensor.numel(), 0.0);
      t_.push_back(0);
    }
  }

  const ParamList& params() const { return params_; }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& w = params_[i].tensor;
      if (!w.requires_grad() || !w.touched()) continue;
      if (m_[i].size() != w.numel() || v_[i].size() != w.numel())
        throw ContractError("optimizer state does not match parameter " + params_[i].name);
      const auto g = w.grad();
      auto val = w.mutable_values();
      const std::size_t t = ++t_[i];
      const double bc1 = 1.0 - std::pow(cfg_.adam_beta1, static_cast<double>(t));
      const double bc2 = 1.0 - std::pow(cfg_.adam_beta2, static_cast<double>(t));
      const double decay = params_[i].decay ? cfg_.weight_decay : 0.0;
      for (std::size_t k = 0; k < val.size(); ++k) {
        m_[i][k] = cfg_.adam_beta1 * m_[i][k] + (1.0 - cfg_.adam_beta1) * g[k];
        v_[i][k] = cfg_.adam_beta2 * v_[i][k] + (1.0 - cfg_.adam_beta2) * g[k] * g[k];
        const double mhat = m_[i][k] / bc1;
        const double vhat = v_[i][k] / bc2;
        val[k] -= lr * (mhat / (std::sqrt(vhat) + cfg_.adam_eps) + decay * val[k]);
      }
    }
  }

  // Exposed for tests that plant mismatched state.
  std::vector<std::vector<double>>& first_moments() { return m_; }

 private:
  ParamList params_;
  TrainConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::vector<std::size_t> t_;
};

/// One optimization step on a batch of a single retrieval type. Returns the
/// batch-mean loss before the update.
inline double train_step(const std::vector<const Dialog*>& batch, const DialClipModel& model, AdamW& opt,
                         double lr) {
  if (batch.empty()) throw ContractError("train_step: empty batch");
  const RetrievalType rt = batch.front()->retrieval_type();
  for (const auto* d : batch)
    if (!(d->retrieval_type() == rt))
      throw ContractError("train_step: batch mixes retrieval types " + rt.name() + " and " +
                          d->retrieval_type().name());
  opt.zero_grad();
  std::vector<Tensor> xs, ys;
  for (const auto* d : batch) {
    xs.push_back(model.encode_query(*d, rt));
    ys.push_back(model.encode_candidate(d->response, rt));
  }
  const Tensor loss = in_batch_loss(ops::concat_rows(xs), ops::concat_rows(ys));
  backward(loss);
  opt.step(lr);
  return loss.item();
}

/// Symmetric caption↔image contrastive step through the temporary heads.
inline double pretrain_step(const std::vector<const ImageTextPair*>& batch, const DialClipModel& model,
                            AdamW& opt, double lr) {
  if (batch.empty()) throw ContractError("pretrain_step: empty batch");
  opt.zero_grad();
  std::vector<Tensor> ts, is;
  for (const auto* p : batch) {
    ts.push_back(model.pretrain_embed_text(p->tokens));
    is.push_back(model.pretrain_embed_image(p->patches));
  }
  const Tensor t = ops::concat_rows(ts), im = ops::concat_rows(is);
  const Tensor loss = ops::scale(ops::add(in_batch_loss(t, im), in_batch_loss(im, t)), 0.5);
  backward(loss);
  opt.step(lr);
  return loss.item();
}

/// JSONL metrics sink: one record per evaluation.
class MetricsLog {
 public:
  explicit MetricsLog(std::ostream* os = nullptr) : os_(os) {}

  void record(Stage stage, std::size_t step, const std::string& split, const RecallAt& r) {
    nlohmann::ordered_json j;
    j["stage"] = std::string(to_string(stage));
    j["step"] = step;
    j["split"] = split;
    j["r1"] = r.r1;
    j["r5"] = r.r5;
    j["r10"] = r.r10;
    j["sum"] = r.sum();
    lines_.push_back(j.dump());
    if (os_) *os_ << lines_.back() << '\n' << std::flush;
  }

  const std::vector<std::string>& lines() const { return lines_; }

 private:
  std::ostream* os_;
  std::vector<std::string> lines_;
};

struct StageLog {
  Stage stage = Stage::Stage2;
  std::vector<double> losses;
  std::vector<std::pair<std::size_t, RecallReport>> evals;
  std::size_t trainable_values = 0;
  std::size_t total_values = 0;
  double trainable_fraction = 0.0;
};

namespace training_detail {

inline StageLog begin_stage(Stage stage, DialClipModel& model) {
  model.set_stage(stage);
  StageLog log;
  log.stage = stage;
  log.trainable_values = count_values(model.trainable());
  log.total_values = count_values(model.parameters());
  log.trainable_fraction = static_cast<double>(log.trainable_values) / static_cast<double>(log.total_values);
  return log;
}

}  // namespace training_detail

/// Pretrains both backbone encoders and their temporary heads on
/// single-round caption/image pairs, then freezes everything.
inline StageLog pretrain_backbone(const std::vector<ImageTextPair>& pairs, const std::vector<ImageTextPair>& heldout,
                                  DialClipModel& model, const TrainConfig& cfg, MetricsLog* metrics = nullptr) {
  cfg.validate();
  if (pairs.empty()) throw InputError("no pretraining pairs");
  StageLog log = training_detail::begin_stage(Stage::Backbone, model);
  AdamW opt(model.trainable(), cfg);
  Rng rng(cfg.seed ^ 0xbacbULL);
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();
  auto do_eval = [&](std::size_t step) {
    if (heldout.empty()) return;
    const RecallAt r = evaluate_pairs(model, heldout, std::min<std::size_t>(cfg.eval.pool_size, heldout.size()),
                                      cfg.eval.seed);
    RecallReport rep;
    rep.overall = r;
    log.evals.emplace_back(step, rep);
    if (metrics) metrics->record(Stage::Backbone, step, "pairs", r);
  };
  for (std::size_t step = 0; step < cfg.total_steps; ++step) {
    std::vector<const ImageTextPair*> batch;
    while (batch.size() < cfg.batch_size) {
      if (cursor == order.size()) {
        rng.shuffle(std::span<std::size_t>(order));
        cursor = 0;
      }
      batch.push_back(&pairs[order[cursor++]]);
    }
    log.losses.push_back(pretrain_step(batch, model, opt, linear_lr(step, cfg)));
    if (cfg.eval_every && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.total_steps) do_eval(step + 1);
  }
  do_eval(cfg.total_steps);
  for (auto& p : model.parameters()) p.tensor.set_requires_grad(false);
  model.mark_backbone_ready();
  return log;
}

/// Prompt-tuning stage. stage1 trains the domain prompts and projection
/// experts; stage2 also trains the context prompt generator. The backbone
/// stays frozen throughout.
inline StageLog run_stage(Stage stage, const std::vector<Dialog>& train, const std::vector<Dialog>& eval_split,
                          DialClipModel& model, const TrainConfig& cfg, MetricsLog* metrics = nullptr,
                          const std::string& eval_name = "test") {
  cfg.validate();
  if (stage == Stage::Backbone) throw ContractError("use pretrain_backbone() for the backbone stage");
  if (!model.backbone_ready())
    throw StateError(std::string(to_string(stage)) + " needs a pretrained backbone checkpoint");
  if (train.empty()) throw InputError("training split is empty");
  StageLog log = training_detail::begin_stage(stage, model);
  AdamW opt(model.trainable(), cfg);
  BatchSampler sampler(train, cfg.batch_size, Rng(cfg.seed ^ 0xba7cULL));
  auto do_eval = [&](std::size_t step) {
    if (eval_split.empty()) return;
    const RecallReport r = evaluate(model, eval_split, cfg.eval);
    log.evals.emplace_back(step, r);
    if (metrics) metrics->record(stage, step, eval_name, r.overall);
  };
  for (std::size_t step = 0; step < cfg.total_steps; ++step) {
    log.losses.push_back(train_step(sampler.next(), model, opt, linear_lr(step, cfg)));
    if (cfg.eval_every && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.total_steps) do_eval(step + 1);
  }
  do_eval(cfg.total_steps);
  return log;
}

}  // namespace dialclip
