#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "dialclip/cpg.hpp"
#include "dialclip/dialog.hpp"
#include "dialclip/encoders.hpp"
#include "dialclip/module.hpp"
#include "dialclip/mop.hpp"

namespace dialclip {

struct ModelConfig {
  EncoderConfig encoder;
  std::size_t cpg_layers = 2;
  std::size_t context_len = 96;
  std::size_t domain_len = 4;
  // First encoder layer that sees the context prompts (0 = embedding output).
  std::size_t insert_layer = 1;
  std::size_t proj_dim = 32;
  // Generator bottleneck; 0 means 2·d_model.
  std::size_t bottleneck = 0;
  bool use_cpg = true;
  bool use_mop = true;
  double prompt_init_std = 1.0;
  std::uint64_t seed = 0;

  std::size_t bottleneck_width() const { return bottleneck ? bottleneck : 2 * encoder.d_model; }

  void validate() const {
    encoder.validate();
    if (proj_dim == 0 || proj_dim > encoder.d_model)
      throw ConfigError("proj_dim must be in [1, d_model]");
    if (use_cpg) {
      if (context_len == 0) throw ConfigError("context_len must be at least 1");
      if (insert_layer >= encoder.n_layers)
        throw ConfigError("insert_layer " + std::to_string(insert_layer) + " out of range for " +
                          std::to_string(encoder.n_layers) + " layers");
      if (cpg_layers == 0) throw ConfigError("cpg_layers must be at least 1");
    }
  }
};

enum class ParamGroup : std::uint8_t { BackboneText, BackboneImage, DomainPrompts, Cpg, Mop };

inline constexpr std::array<ParamGroup, 5> kAllGroups{ParamGroup::BackboneText, ParamGroup::BackboneImage,
                                                      ParamGroup::DomainPrompts, ParamGroup::Cpg,
                                                      ParamGroup::Mop};

inline std::string_view to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::BackboneText: return "backbone_text";
    case ParamGroup::BackboneImage: return "backbone_image";
    case ParamGroup::DomainPrompts: return "domain_prompts";
    case ParamGroup::Cpg: return "cpg";
    case ParamGroup::Mop: return "mop";
  }
  return "";
}

inline ParamGroup group_of(std::string_view param_name) {
  const auto prefix = param_name.substr(0, param_name.find('.'));
  for (auto g : kAllGroups)
    if (to_string(g) == prefix) return g;
  throw ContractError("parameter '" + std::string(param_name) + "' belongs to no group");
}

enum class Stage : std::uint8_t { Backbone, Stage1, Stage2 };

inline std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::Backbone: return "backbone";
    case Stage::Stage1: return "stage1";
    case Stage::Stage2: return "stage2";
  }
  return "";
}

inline Stage stage_from_string(std::string_view s) {
  if (s == "backbone") return Stage::Backbone;
  if (s == "stage1") return Stage::Stage1;
  if (s == "stage2") return Stage::Stage2;
  throw ConfigError("unknown stage '" + std::string(s) + "'");
}

inline std::set<ParamGroup> trainable_groups(Stage s) {
  switch (s) {
    case Stage::Backbone: return {ParamGroup::BackboneText, ParamGroup::BackboneImage};
    case Stage::Stage1: return {ParamGroup::DomainPrompts, ParamGroup::Mop};
    case Stage::Stage2: return {ParamGroup::DomainPrompts, ParamGroup::Mop, ParamGroup::Cpg};
  }
  return {};
}

/// Dual encoder with context prompt generator, domain prompts and the
/// mixture of projection heads, plus the temporary heads used only while the
/// backbone itself is pretrained.
class DialClipModel {
 public:
  explicit DialClipModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const std::size_t d = cfg.encoder.d_model;
    const std::size_t dom = cfg.domain_len;
    // Separate streams so changing one component's size leaves the others'
    // initial values untouched. Domain prompts are drawn after each backbone.
    Rng text_rng(cfg.seed ^ 0x7e47ULL), image_rng(cfg.seed ^ 0x1a6eULL);
    Rng cpg_rng(cfg.seed ^ 0xc96ULL), mop_rng(cfg.seed ^ 0x30bULL), head_rng(cfg.seed ^ 0x4eadULL);
    encoders_.text = PromptedEncoder(Modality::Text, cfg.encoder, dom, text_rng, cfg.prompt_init_std);
    encoders_.image = PromptedEncoder(Modality::Image, cfg.encoder, dom, image_rng, cfg.prompt_init_std);
    if (cfg.use_cpg) {
      cpg_.encoder = ContextEncoder(cfg.encoder, cfg.cpg_layers, cpg_rng);
      cpg_.generator = PromptGenerator::create(cfg.context_len, d, cfg.bottleneck_width(), cpg_rng);
    }
    mop_ = MixtureOfProjection(cfg.proj_dim, d, !cfg.use_mop, mop_rng);
    text_head_w_ = init::weight(cfg.proj_dim, d, head_rng);
    text_head_b_ = init::bias(cfg.proj_dim);
    image_head_w_ = init::weight(cfg.proj_dim, d, head_rng);
    image_head_b_ = init::bias(cfg.proj_dim);
    // Everything starts frozen; set_stage() opens the groups a stage trains.
    for (auto& p : parameters()) p.tensor.set_requires_grad(false);
  }

  const ModelConfig& config() const { return cfg_; }
  const DualEncoder& encoders() const { return encoders_; }
  const MixtureOfProjection& mop() const { return mop_; }
  const ContextPromptGenerator& cpg() const { return cpg_; }
  const DomainPrompts& domain(Modality m) const { return encoders_.for_modality(m).domain(); }

  /// Every parameter, named "<group>.<path>". Order is fixed by the config.
  ParamList parameters() const {
    ParamList out;
    encoders_.text.collect_backbone(out, "backbone_text.");
    out.push_back({"backbone_text.head.w", text_head_w_, true});
    out.push_back({"backbone_text.head.b", text_head_b_, false});
    encoders_.image.collect_backbone(out, "backbone_image.");
    out.push_back({"backbone_image.head.w", image_head_w_, true});
    out.push_back({"backbone_image.head.b", image_head_b_, false});
    encoders_.text.collect_domain(out, "domain_prompts.text.");
    encoders_.image.collect_domain(out, "domain_prompts.image.");
    if (cfg_.use_cpg) cpg_.collect(out, "cpg.");
    mop_.collect(out, "mop.");
    return out;
  }

  ParamList group(ParamGroup g) const {
    ParamList out;
    for (auto& p : parameters())
      if (group_of(p.name) == g) out.push_back(p);
    return out;
  }

  /// Marks exactly the stage's groups as trainable; everything else frozen.
  void set_stage(Stage s) {
    const auto groups = trainable_groups(s);
    for (auto& p : parameters()) {
      p.tensor.set_requires_grad(groups.contains(group_of(p.name)));
      p.tensor.zero_grad();
    }
  }

  ParamList trainable() const {
    ParamList out;
    for (auto& p : parameters())
      if (p.tensor.requires_grad()) out.push_back(p);
    return out;
  }

  double trainable_fraction() const {
    const double total = static_cast<double>(count_values(parameters()));
    return static_cast<double>(count_values(trainable())) / total;
  }

  bool backbone_ready() const { return backbone_ready_; }
  void mark_backbone_ready(bool ready = true) { backbone_ready_ = ready; }

  // --- forward passes -----------------------------------------------------

  /// Context prompts P_c for a dialog, or an undefined tensor when the
  /// generator is disabled.
  Tensor context_prompts(const Dialog& d) const {
    if (!cfg_.use_cpg) return Tensor();
    return cpg_(d.context());
  }

  /// Backbone output for the query side: the current input, encoded with its
  /// modality's encoder, domain prompts, and (if enabled) context prompts.
  Tensor encode_query_backbone(const Dialog& d) const {
    const Utterance& input = d.current_input();
    const PromptedEncoder& enc = encoders_.for_modality(input.modality);
    const Tensor ctx = context_prompts(d);
    return enc.encode_with_prompts(enc.embed(input), domain(input.modality), ctx.defined() ? &ctx : nullptr,
                                   cfg_.insert_layer);
  }

  Tensor encode_candidate_backbone(const Utterance& r) const {
    const PromptedEncoder& enc = encoders_.for_modality(r.modality);
    return enc.encode_with_prompts(enc.embed(r), domain(r.modality), nullptr, 0);
  }

  Tensor encode_query(const Dialog& d, RetrievalType rt) const {
    return mop_.project_query(encode_query_backbone(d), rt);
  }
  Tensor encode_query(const Dialog& d) const { return encode_query(d, d.retrieval_type()); }

  Tensor encode_candidate(const Utterance& r, RetrievalType rt) const {
    return mop_.project_candidate(encode_candidate_backbone(r), rt);
  }

  // Backbone pretraining path: no prompts, temporary linear heads.
  Tensor pretrain_embed_text(std::span<const std::uint32_t> tokens) const {
    return ops::linear(encoders_.text.encode_plain(encoders_.text.embed_text(tokens)), text_head_w_,
                       text_head_b_);
  }
  Tensor pretrain_embed_image(std::span<const double> patches) const {
    const auto& c = cfg_.encoder;
    const Tensor p = Tensor::from({c.n_patches, c.patch_dim}, {patches.begin(), patches.end()});
    return ops::linear(encoders_.image.encode_plain(encoders_.image.embed_image(p)), image_head_w_,
                       image_head_b_);
  }

  /// Copies values of every same-named parameter in `groups` from `src`.
  void copy_groups_from(const DialClipModel& src, const std::set<ParamGroup>& groups) {
    const ParamList from = src.parameters();
    for (auto& dst : parameters()) {
      if (!groups.contains(group_of(dst.name))) continue;
      auto it = std::find_if(from.begin(), from.end(), [&](const ParamRef& p) { return p.name == dst.name; });
      if (it == from.end()) continue;
      if (it->tensor.shape() != dst.tensor.shape())
        throw ShapeError("cannot copy " + dst.name + ": " + shape_str(it->tensor.shape()) + " vs " +
                         shape_str(dst.tensor.shape()));
      std::copy(it->tensor.values().begin(), it->tensor.values().end(), dst.tensor.mutable_values().begin());
    }
    if (groups.contains(ParamGroup::BackboneText) && groups.contains(ParamGroup::BackboneImage))
      backbone_ready_ = src.backbone_ready_;
  }

  DialClipModel clone() const {
    DialClipModel m(cfg_);
    m.copy_groups_from(*this, {kAllGroups.begin(), kAllGroups.end()});
    const ParamList mine = parameters();
    ParamList theirs = m.parameters();
    for (std::size_t i = 0; i < mine.size(); ++i) theirs[i].tensor.set_requires_grad(mine[i].tensor.requires_grad());
    return m;
  }

 private:
  ModelConfig cfg_;
  DualEncoder encoders_;
  ContextPromptGenerator cpg_;
  MixtureOfProjection mop_;
  Tensor text_head_w_, text_head_b_, image_head_w_, image_head_b_;
  bool backbone_ready_ = false;
};

}  // namespace dialclip
