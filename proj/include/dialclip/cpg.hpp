#pragma once

#include <string>
#include <vector>

#include "dialclip/dialog.hpp"
#include "dialclip/encoders.hpp"
#include "dialclip/module.hpp"
#include "dialclip/tensor.hpp"

namespace dialclip {

/// Multi-modal context encoder. Text turns are embedded token by token, image
/// turns go through a linear vision bridge into the same width, every row gets
/// its turn-role embedding, and the concatenated history runs through a small
/// transformer stack.
class ContextEncoder {
 public:
  ContextEncoder() = default;

  ContextEncoder(const EncoderConfig& shape, std::size_t n_layers, Rng& rng) : cfg_(shape) {
    shape.validate();
    if (n_layers == 0) throw ConfigError("context encoder needs at least one layer");
    const std::size_t d = shape.d_model;
    token_emb_ = Tensor::randn({shape.vocab_size, d}, rng, 1.0);
    bridge_w_ = init::weight(d, shape.patch_dim, rng);
    bridge_b_ = init::bias(d);
    role_emb_ = Tensor::randn({2, d}, rng, 0.5);
    pos_emb_ = Tensor::randn({shape.max_seq, d}, rng, 0.1);
    null_row_ = Tensor::randn({1, d}, rng, 1.0);
    for (std::size_t l = 0; l < n_layers; ++l)
      layers_.push_back(TransformerLayer::create(d, shape.ffn_mult * d, rng));
    lnf_g_ = init::ones(d);
    lnf_b_ = init::bias(d);
  }

  std::size_t width() const { return cfg_.d_model; }

  /// Returns one row per context position (h). An empty history, or one with
  /// no content rows, maps to the learned null-context row. Histories longer
  /// than max_seq keep their most recent rows.
  Tensor encode(const std::vector<Utterance>& context) const {
    std::vector<Tensor> parts;
    std::size_t total = 0;
    for (const auto& u : context) {
      u.validate(cfg_.n_patches * cfg_.patch_dim);
      Tensor rows;
      if (u.modality == Modality::Text) {
        if (u.tokens->empty()) continue;
        std::vector<std::size_t> ids;
        for (auto t : *u.tokens) {
          if (t >= cfg_.vocab_size)
            throw InputError("context token id " + std::to_string(t) + " outside vocabulary");
          ids.push_back(t);
        }
        rows = ops::gather_rows(token_emb_, ids);
      } else {
        rows = ops::linear(Tensor::from({cfg_.n_patches, cfg_.patch_dim}, *u.patches), bridge_w_,
                           bridge_b_);
      }
      const std::vector<std::size_t> role_ids(rows.rows(), static_cast<std::size_t>(u.role));
      parts.push_back(ops::add(rows, ops::gather_rows(role_emb_, role_ids)));
      total += rows.rows();
    }
    if (parts.empty()) return null_row_;
    Tensor x = parts.size() == 1 ? parts.front() : ops::concat_rows(parts);
    if (total > cfg_.max_seq) {
      x = ops::slice_rows(x, total - cfg_.max_seq, cfg_.max_seq);
      total = cfg_.max_seq;
    }
    x = ops::add(x, ops::slice_rows(pos_emb_, 0, total));
    for (const auto& layer : layers_) x = layer.forward(x, cfg_.n_heads);
    return ops::layer_norm(x, lnf_g_, lnf_b_);
  }

  void collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + "token_emb", token_emb_, false});
    out.push_back({prefix + "bridge.w", bridge_w_, true});
    out.push_back({prefix + "bridge.b", bridge_b_, false});
    out.push_back({prefix + "role_emb", role_emb_, false});
    out.push_back({prefix + "pos_emb", pos_emb_, false});
    out.push_back({prefix + "null_row", null_row_, false});
    for (std::size_t l = 0; l < layers_.size(); ++l)
      layers_[l].collect(out, prefix + "layer" + std::to_string(l) + ".");
    out.push_back({prefix + "ln_f.g", lnf_g_, false});
    out.push_back({prefix + "ln_f.b", lnf_b_, false});
  }

 private:
  EncoderConfig cfg_;
  Tensor token_emb_, bridge_w_, bridge_b_, role_emb_, pos_emb_, null_row_;
  std::vector<TransformerLayer> layers_;
  Tensor lnf_g_, lnf_b_;
};

/// Pooling plus a bottleneck feed-forward net that turns context features
/// h [n×d] into L_c prompt rows:
///   P̂ = ReLU(W1·pool(h) + b1),  P = W2·P̂ + b2   (applied per pooled row)
struct PromptGenerator {
  std::size_t length = 0;
  Tensor w1, b1, w2, b2;

  static PromptGenerator create(std::size_t length, std::size_t d, std::size_t bottleneck, Rng& rng) {
    if (length == 0) throw ConfigError("context prompt length must be at least 1");
    if (bottleneck == 0) throw ConfigError("bottleneck width must be positive");
    return {length, init::weight(bottleneck, d, rng), init::bias(bottleneck),
            init::weight(d, bottleneck, rng), init::bias(d)};
  }

  std::size_t width() const { return w2.rows(); }
  std::size_t bottleneck() const { return w1.rows(); }

  // Pooled rows: contiguous mean pooling when n ≥ L_c, otherwise h's rows
  // repeated cyclically up to L_c.
  Tensor pool(const Tensor& h) const {
    if (h.dim() != 2 || h.cols() != w1.cols())
      throw ShapeError("context features " + shape_str(h.shape()) + " do not match generator width " +
                       std::to_string(w1.cols()));
    const std::size_t n = h.rows();
    if (n >= length) return ops::mean_pool_segments(h, length);
    std::vector<std::size_t> ids(length);
    for (std::size_t i = 0; i < length; ++i) ids[i] = i % n;
    return ops::gather_rows(h, ids);
  }

  Tensor generate(const Tensor& h) const {
    return ops::linear(ops::relu(ops::linear(pool(h), w1, b1)), w2, b2);
  }

  void collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + "w1", w1, true});
    out.push_back({prefix + "b1", b1, false});
    out.push_back({prefix + "w2", w2, true});
    out.push_back({prefix + "b2", b2, false});
  }
};

/// Context encoder followed by the prompt generator.
struct ContextPromptGenerator {
  ContextEncoder encoder;
  PromptGenerator generator;

  Tensor operator()(const std::vector<Utterance>& context) const {
    return generator.generate(encoder.encode(context));
  }

  void collect(ParamList& out, const std::string& prefix) const {
    encoder.collect(out, prefix + "enc.");
    generator.collect(out, prefix + "gen.");
  }
};

}  // namespace dialclip
