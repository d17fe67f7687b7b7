#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dialclip/dialog.hpp"
#include "dialclip/module.hpp"
#include "dialclip/tensor.hpp"

namespace dialclip {

struct EncoderConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t vocab_size = 256;
  std::size_t max_seq = 128;
  std::size_t patch_dim = 16;
  std::size_t n_patches = 16;
  std::size_t ffn_mult = 4;

  void validate() const {
    if (d_model == 0 || n_layers == 0 || n_heads == 0 || vocab_size == 0 || max_seq < 2 ||
        patch_dim == 0 || n_patches == 0 || ffn_mult == 0)
      throw ConfigError("encoder dimensions must be positive");
    if (d_model % n_heads != 0)
      throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                        std::to_string(n_heads));
    if (n_patches + 1 > max_seq) throw ConfigError("max_seq too small for n_patches + summary token");
  }
};

/// Pre-norm transformer block: self-attention then GELU feed-forward, each
/// with a residual connection. Attention is bidirectional and unmasked.
struct TransformerLayer {
  Tensor ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_g, ln2_b, w1, b1, w2, b2;

  static TransformerLayer create(std::size_t d, std::size_t ffn, Rng& rng) {
    TransformerLayer l;
    l.ln1_g = init::ones(d);
    l.ln1_b = init::bias(d);
    l.wq = init::weight(d, d, rng);
    l.bq = init::bias(d);
    l.wk = init::weight(d, d, rng);
    l.bk = init::bias(d);
    l.wv = init::weight(d, d, rng);
    l.bv = init::bias(d);
    l.wo = init::weight(d, d, rng);
    l.bo = init::bias(d);
    l.ln2_g = init::ones(d);
    l.ln2_b = init::bias(d);
    l.w1 = init::weight(ffn, d, rng);
    l.b1 = init::bias(ffn);
    l.w2 = init::weight(d, ffn, rng);
    l.b2 = init::bias(d);
    return l;
  }

  Tensor forward(const Tensor& x, std::size_t n_heads) const {
    const Tensor h = ops::layer_norm(x, ln1_g, ln1_b);
    const Tensor attn = ops::multi_head_attention(ops::linear(h, wq, bq), ops::linear(h, wk, bk),
                                                  ops::linear(h, wv, bv), n_heads);
    const Tensor x1 = ops::add(x, ops::linear(attn, wo, bo));
    const Tensor h2 = ops::layer_norm(x1, ln2_g, ln2_b);
    return ops::add(x1, ops::linear(ops::gelu(ops::linear(h2, w1, b1)), w2, b2));
  }

  void collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + "ln1.g", ln1_g, false});
    out.push_back({prefix + "ln1.b", ln1_b, false});
    out.push_back({prefix + "attn.wq", wq, true});
    out.push_back({prefix + "attn.bq", bq, false});
    out.push_back({prefix + "attn.wk", wk, true});
    out.push_back({prefix + "attn.bk", bk, false});
    out.push_back({prefix + "attn.wv", wv, true});
    out.push_back({prefix + "attn.bv", bv, false});
    out.push_back({prefix + "attn.wo", wo, true});
    out.push_back({prefix + "attn.bo", bo, false});
    out.push_back({prefix + "ln2.g", ln2_g, false});
    out.push_back({prefix + "ln2.b", ln2_b, false});
    out.push_back({prefix + "ffn.w1", w1, true});
    out.push_back({prefix + "ffn.b1", b1, false});
    out.push_back({prefix + "ffn.w2", w2, true});
    out.push_back({prefix + "ffn.b2", b2, false});
  }
};

/// Per-layer deep prompts: one [length × d_model] matrix for every encoder
/// layer. A length of zero disables them.
struct DomainPrompts {
  std::size_t length = 0;
  std::vector<Tensor> per_layer;

  static DomainPrompts create(std::size_t n_layers, std::size_t length, std::size_t d, Rng& rng,
                              double stddev) {
    DomainPrompts p;
    p.length = length;
    if (length == 0) return p;
    for (std::size_t l = 0; l < n_layers; ++l)
      p.per_layer.push_back(Tensor::randn({length, d}, rng, stddev));
    return p;
  }

  static const DomainPrompts& none() {
    static const DomainPrompts empty;
    return empty;
  }

  void collect(ParamList& out, const std::string& prefix) const {
    for (std::size_t l = 0; l < per_layer.size(); ++l)
      out.push_back({prefix + "layer" + std::to_string(l), per_layer[l], false});
  }
};

/// Sequence lengths seen by each layer during one encode call.
struct EncodeTrace {
  std::vector<std::size_t> layer_rows;
  std::size_t summary_row = 0;
};

/// Toy transformer encoder for one modality with deep domain prompts and
/// optional mid-stack context-prompt insertion. The output is the final
/// representation of a dedicated summary token.
class PromptedEncoder {
 public:
  PromptedEncoder() = default;

  PromptedEncoder(Modality modality, const EncoderConfig& cfg, std::size_t domain_len, Rng& rng,
                  double prompt_std = 1.0)
      : modality_(modality), cfg_(cfg) {
    cfg.validate();
    const std::size_t d = cfg.d_model;
    if (modality == Modality::Text) {
      token_emb_ = Tensor::randn({cfg.vocab_size, d}, rng, 1.0);
    } else {
      patch_w_ = init::weight(d, cfg.patch_dim, rng);
      patch_b_ = init::bias(d);
    }
    summary_ = Tensor::randn({1, d}, rng, 1.0);
    pos_emb_ = Tensor::randn({cfg.max_seq, d}, rng, 0.1);
    for (std::size_t l = 0; l < cfg.n_layers; ++l)
      layers_.push_back(TransformerLayer::create(d, cfg.ffn_mult * d, rng));
    lnf_g_ = init::ones(d);
    lnf_b_ = init::bias(d);
    domain_ = DomainPrompts::create(cfg.n_layers, domain_len, d, rng, prompt_std);
  }

  Modality modality() const { return modality_; }
  const EncoderConfig& config() const { return cfg_; }
  const DomainPrompts& domain() const { return domain_; }

  /// Summary token followed by token embeddings, plus positions.
  Tensor embed_text(std::span<const std::uint32_t> tokens) const {
    if (modality_ != Modality::Text) throw InputError("embed_text called on the image encoder");
    if (tokens.size() + 1 > cfg_.max_seq)
      throw InputError("text of " + std::to_string(tokens.size()) + " tokens exceeds max_seq " +
                       std::to_string(cfg_.max_seq));
    for (auto t : tokens)
      if (t >= cfg_.vocab_size)
        throw InputError("token id " + std::to_string(t) + " outside vocabulary of " +
                         std::to_string(cfg_.vocab_size));
    Tensor seq = summary_;
    if (!tokens.empty()) {
      std::vector<std::size_t> ids(tokens.begin(), tokens.end());
      seq = ops::concat_rows({summary_, ops::gather_rows(token_emb_, ids)});
    }
    return ops::add(seq, ops::slice_rows(pos_emb_, 0, tokens.size() + 1));
  }

  /// Linear patch projection, summary token prepended, plus positions.
  Tensor embed_image(const Tensor& patches) const {
    if (modality_ != Modality::Image) throw InputError("embed_image called on the text encoder");
    if (patches.shape() != Shape{cfg_.n_patches, cfg_.patch_dim})
      throw InputError("image patches " + shape_str(patches.shape()) + ", expected " +
                       shape_str({cfg_.n_patches, cfg_.patch_dim}));
    Tensor seq = ops::concat_rows({summary_, ops::linear(patches, patch_w_, patch_b_)});
    return ops::add(seq, ops::slice_rows(pos_emb_, 0, cfg_.n_patches + 1));
  }

  Tensor embed(const Utterance& u) const {
    u.validate(cfg_.n_patches * cfg_.patch_dim);
    if (u.modality != modality_)
      throw InputError("utterance modality does not match the encoder");
    if (u.modality == Modality::Text) return embed_text(*u.tokens);
    return embed_image(Tensor::from({cfg_.n_patches, cfg_.patch_dim}, *u.patches));
  }

  /// Runs the stack. Each layer prepends its own domain prompt rows and drops
  /// their outputs afterwards. Context rows, if given, are prepended once at
  /// `insert_layer` and then travel with the sequence. Prompt rows carry no
  /// positional embedding.
  Tensor encode_with_prompts(const Tensor& seq, const DomainPrompts& domain, const Tensor* ctx,
                             std::size_t insert_layer, EncodeTrace* trace = nullptr) const {
    if (seq.dim() != 2 || seq.cols() != cfg_.d_model)
      throw ShapeError("encoder input " + shape_str(seq.shape()) + " has wrong width");
    if (ctx) {
      if (ctx->dim() != 2 || ctx->cols() != cfg_.d_model)
        throw ShapeError("context prompts " + shape_str(ctx->shape()) + " do not match d_model " +
                         std::to_string(cfg_.d_model));
      if (insert_layer >= cfg_.n_layers)
        throw ConfigError("insert_layer " + std::to_string(insert_layer) + " out of range for " +
                          std::to_string(cfg_.n_layers) + " layers");
    }
    if (domain.length > 0 && domain.per_layer.size() != cfg_.n_layers)
      throw ConfigError("domain prompts cover " + std::to_string(domain.per_layer.size()) +
                        " layers, encoder has " + std::to_string(cfg_.n_layers));
    if (trace) trace->layer_rows.clear();

    Tensor x = seq;
    std::size_t summary = 0;
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      if (ctx && l == insert_layer) {
        x = ops::concat_rows({*ctx, x});
        summary += ctx->rows();
      }
      if (domain.length > 0) {
        const std::size_t base = x.rows();
        Tensor z = layers_[l].forward(ops::concat_rows({domain.per_layer[l], x}), cfg_.n_heads);
        if (trace) trace->layer_rows.push_back(z.rows());
        x = ops::slice_rows(z, domain.length, base);
      } else {
        if (trace) trace->layer_rows.push_back(x.rows());
        x = layers_[l].forward(x, cfg_.n_heads);
      }
    }
    if (trace) trace->summary_row = summary;
    return ops::layer_norm(ops::row(x, summary), lnf_g_, lnf_b_);
  }

  // Stack without any prompts.
  Tensor encode_plain(const Tensor& seq) const {
    return encode_with_prompts(seq, DomainPrompts::none(), nullptr, 0);
  }

  const std::vector<TransformerLayer>& layers() const { return layers_; }
  const Tensor& final_norm_gain() const { return lnf_g_; }
  const Tensor& final_norm_bias() const { return lnf_b_; }

  void collect_backbone(ParamList& out, const std::string& prefix) const {
    if (modality_ == Modality::Text) {
      out.push_back({prefix + "token_emb", token_emb_, false});
    } else {
      out.push_back({prefix + "patch.w", patch_w_, true});
      out.push_back({prefix + "patch.b", patch_b_, false});
    }
    out.push_back({prefix + "summary", summary_, false});
    out.push_back({prefix + "pos_emb", pos_emb_, false});
    for (std::size_t l = 0; l < layers_.size(); ++l)
      layers_[l].collect(out, prefix + "layer" + std::to_string(l) + ".");
    out.push_back({prefix + "ln_f.g", lnf_g_, false});
    out.push_back({prefix + "ln_f.b", lnf_b_, false});
  }

  void collect_domain(ParamList& out, const std::string& prefix) const {
    domain_.collect(out, prefix);
  }

 private:
  Modality modality_ = Modality::Text;
  EncoderConfig cfg_;
  Tensor token_emb_, patch_w_, patch_b_, summary_, pos_emb_;
  std::vector<TransformerLayer> layers_;
  Tensor lnf_g_, lnf_b_;
  DomainPrompts domain_;
};

/// The text and image encoders side by side.
struct DualEncoder {
  PromptedEncoder text;
  PromptedEncoder image;

  const PromptedEncoder& for_modality(Modality m) const {
    return m == Modality::Text ? text : image;
  }

  /// Response-side encoding: domain prompts only, no context prompts.
  Tensor encode_response(const Utterance& resp, bool with_domain = true) const {
    const PromptedEncoder& enc = for_modality(resp.modality);
    return enc.encode_with_prompts(enc.embed(resp), with_domain ? enc.domain() : DomainPrompts::none(),
                                   nullptr, 0);
  }
};

}  // namespace dialclip
