#pragma once

#include <array>
#include <string>
#include <vector>

#include "dialclip/data.hpp"
#include "dialclip/grad_check.hpp"
#include "dialclip/model.hpp"
#include "dialclip/training.hpp"

namespace dialclip {

struct ModelGradCheckOptions {
  std::size_t d_model = 16;
  std::size_t n_layers = 2;
  std::size_t context_len = 4;
  std::size_t domain_len = 2;
  std::size_t batch = 4;
  std::uint64_t seed = 7;
  // Also perturb the backbone, which is frozen during prompt tuning.
  bool include_backbone = false;
  GradCheckOptions check;
};

struct ModelGradCheckResult {
  GradCheckReport report;
  std::vector<std::string> param_names;
  double loss = 0.0;

  std::string worst_name() const {
    return report.worst_param < param_names.size() ? param_names[report.worst_param] : std::string("?");
  }
};

/// Finite-difference check of the full retrieval loss: context generator,
/// prompted encoders, and projection experts. The loss averages one batch
/// per retrieval type so every expert receives gradient.
inline ModelGradCheckResult model_grad_check(const ModelGradCheckOptions& o) {
  CorpusSpec cs;
  cs.n_topics = 4;
  cs.dialogs_per_topic = 24;
  cs.vocab_size = 32;
  cs.tokens_per_topic = 4;
  cs.min_tokens = 2;
  cs.max_tokens = 4;
  cs.max_turns = 4;
  cs.n_patches = 4;
  cs.patch_dim = 6;
  cs.test_fraction = 0.0;
  cs.seed = o.seed;
  const auto corpus = generate_corpus(cs);

  ModelConfig mc;
  mc.encoder.d_model = o.d_model;
  mc.encoder.n_layers = o.n_layers;
  mc.encoder.n_heads = 2;
  mc.encoder.vocab_size = cs.vocab_size;
  mc.encoder.n_patches = cs.n_patches;
  mc.encoder.patch_dim = cs.patch_dim;
  mc.encoder.max_seq = 32;
  mc.encoder.ffn_mult = 2;
  mc.cpg_layers = 1;
  mc.context_len = o.context_len;
  mc.domain_len = o.domain_len;
  mc.proj_dim = o.d_model / 2;
  mc.seed = o.seed;
  DialClipModel model(mc);
  model.set_stage(Stage::Stage2);

  std::array<std::vector<const Dialog*>, 4> batches;
  for (const auto& d : corpus) {
    auto& b = batches[d.retrieval_type().index()];
    if (b.size() < o.batch) b.push_back(&d);
  }
  for (const auto& b : batches)
    if (b.size() < o.batch) throw InputError("gradient check corpus lacks a full batch of every type");

  ModelGradCheckResult out;
  std::vector<Tensor> params;
  for (auto& p : model.parameters()) {
    const bool backbone = group_of(p.name) == ParamGroup::BackboneText || group_of(p.name) == ParamGroup::BackboneImage;
    if (backbone && p.name.find(".head.") != std::string::npos) continue;  // pretraining heads are off this path
    if (backbone && !o.include_backbone) continue;
    p.tensor.set_requires_grad(true);
    params.push_back(p.tensor);
    out.param_names.push_back(p.name);
  }

  auto loss_fn = [&] {
    std::vector<Tensor> per_type;
    for (const auto& b : batches) {
      std::vector<Tensor> xs, ys;
      for (const auto* d : b) {
        xs.push_back(model.encode_query(*d, d->retrieval_type()));
        ys.push_back(model.encode_candidate(d->response, d->retrieval_type()));
      }
      per_type.push_back(in_batch_loss(ops::concat_rows(xs), ops::concat_rows(ys)));
    }
    Tensor total = per_type[0];
    for (std::size_t i = 1; i < per_type.size(); ++i) total = ops::add(total, per_type[i]);
    return ops::scale(total, 1.0 / static_cast<double>(per_type.size()));
  };
  {
    NoGradGuard g;
    out.loss = loss_fn().item();
  }
  out.report = grad_check(loss_fn, params, o.check);
  return out;
}

}  // namespace dialclip
