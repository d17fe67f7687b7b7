#pragma once

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dialclip/errors.hpp"
#include "dialclip/harness.hpp"

namespace dialclip {

/// Flat `key = value` text; `#` starts a comment. Later keys win.
using KeyValues = std::map<std::string, std::string>;

namespace config_detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("bad value '" + v + "' for " + key);
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("bad boolean '" + v + "' for " + key);
}

}  // namespace config_detail

inline KeyValues parse_key_values(std::istream& is) {
  KeyValues kv;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string t = config_detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ParseError(line_no, "expected 'key = value'");
    const std::string key = config_detail::trim(std::string_view(t).substr(0, eq));
    if (key.empty()) throw ParseError(line_no, "empty key");
    kv[key] = config_detail::trim(std::string_view(t).substr(eq + 1));
  }
  return kv;
}

inline KeyValues read_key_values(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open config file '" + path + "'");
  return parse_key_values(is);
}

using Setter = std::function<void(PipelineConfig&, const std::string&)>;

/// Every recognised configuration key. Names are also the CLI flag names.
inline const std::map<std::string, Setter>& config_keys() {
  using namespace config_detail;
  static const std::map<std::string, Setter> keys = [] {
    std::map<std::string, Setter> k;
    auto size = [&](const char* name, auto member) {
      k[name] = [name, member](PipelineConfig& c, const std::string& v) {
        member(c) = parse_number<std::size_t>(name, v);
      };
    };
    auto real = [&](const char* name, auto member) {
      k[name] = [name, member](PipelineConfig& c, const std::string& v) { member(c) = parse_number<double>(name, v); };
    };
    auto flag = [&](const char* name, auto member) {
      k[name] = [name, member](PipelineConfig& c, const std::string& v) { member(c) = parse_bool(name, v); };
    };
    auto u64 = [&](const char* name, auto member) {
      k[name] = [name, member](PipelineConfig& c, const std::string& v) {
        member(c) = parse_number<std::uint64_t>(name, v);
      };
    };
#define DC_FIELD(expr) [](PipelineConfig & c) -> auto& { return expr; }
    // corpus
    size("n_topics", DC_FIELD(c.corpus.n_topics));
    size("dialogs_per_topic", DC_FIELD(c.corpus.dialogs_per_topic));
    size("min_turns", DC_FIELD(c.corpus.min_turns));
    size("max_turns", DC_FIELD(c.corpus.max_turns));
    size("vocab_size", DC_FIELD(c.corpus.vocab_size));
    size("tokens_per_topic", DC_FIELD(c.corpus.tokens_per_topic));
    size("min_tokens", DC_FIELD(c.corpus.min_tokens));
    size("max_tokens", DC_FIELD(c.corpus.max_tokens));
    real("topic_token_rate", DC_FIELD(c.corpus.topic_token_rate));
    size("n_patches", DC_FIELD(c.corpus.n_patches));
    size("patch_dim", DC_FIELD(c.corpus.patch_dim));
    real("topic_mean_scale", DC_FIELD(c.corpus.topic_mean_scale));
    real("noise_sigma", DC_FIELD(c.corpus.noise_sigma));
    real("ambiguity_rate", DC_FIELD(c.corpus.ambiguity_rate));
    real("context_image_rate", DC_FIELD(c.corpus.context_image_rate));
    real("input_image_rate", DC_FIELD(c.corpus.input_image_rate));
    real("response_image_rate", DC_FIELD(c.corpus.response_image_rate));
    real("dev_fraction", DC_FIELD(c.corpus.dev_fraction));
    real("test_fraction", DC_FIELD(c.corpus.test_fraction));
    real("pair_topic_token_rate", DC_FIELD(c.corpus.pair_topic_token_rate));
    u64("corpus_seed", DC_FIELD(c.corpus.seed));
    // model
    size("d_model", DC_FIELD(c.model.encoder.d_model));
    size("n_layers", DC_FIELD(c.model.encoder.n_layers));
    size("n_heads", DC_FIELD(c.model.encoder.n_heads));
    size("max_seq", DC_FIELD(c.model.encoder.max_seq));
    size("ffn_mult", DC_FIELD(c.model.encoder.ffn_mult));
    size("cpg_layers", DC_FIELD(c.model.cpg_layers));
    size("ctx_len", DC_FIELD(c.model.context_len));
    size("dom_len", DC_FIELD(c.model.domain_len));
    size("prompt_layer", DC_FIELD(c.model.insert_layer));
    size("proj_dim", DC_FIELD(c.model.proj_dim));
    size("bottleneck", DC_FIELD(c.model.bottleneck));
    flag("use_cpg", DC_FIELD(c.model.use_cpg));
    flag("use_mop", DC_FIELD(c.model.use_mop));
    real("prompt_init_std", DC_FIELD(c.model.prompt_init_std));
    // training
    size("backbone_steps", DC_FIELD(c.backbone.total_steps));
    real("backbone_lr", DC_FIELD(c.backbone.base_lr));
    size("backbone_batch", DC_FIELD(c.backbone.batch_size));
    size("pretrain_pairs", DC_FIELD(c.pretrain_pairs));
    size("heldout_pairs", DC_FIELD(c.heldout_pairs));
    size("stage1_steps", DC_FIELD(c.stage1.total_steps));
    real("stage1_lr", DC_FIELD(c.stage1.base_lr));
    size("stage2_steps", DC_FIELD(c.stage2.total_steps));
    real("stage2_lr", DC_FIELD(c.stage2.base_lr));
    flag("run_stage1", DC_FIELD(c.run_stage1));
    size("pool_size", DC_FIELD(c.eval.pool_size));
    u64("eval_seed", DC_FIELD(c.eval.seed));
    u64("seed", DC_FIELD(c.seed));
#undef DC_FIELD
    // Settings shared by both prompt-tuning stages.
    k["batch_size"] = [](PipelineConfig& c, const std::string& v) {
      c.stage1.batch_size = c.stage2.batch_size = parse_number<std::size_t>("batch_size", v);
    };
    k["weight_decay"] = [](PipelineConfig& c, const std::string& v) {
      c.backbone.weight_decay = c.stage1.weight_decay = c.stage2.weight_decay =
          parse_number<double>("weight_decay", v);
    };
    k["eval_every"] = [](PipelineConfig& c, const std::string& v) {
      c.stage1.eval_every = c.stage2.eval_every = parse_number<std::size_t>("eval_every", v);
    };
    return k;
  }();
  return keys;
}

inline void apply_key_values(PipelineConfig& cfg, const KeyValues& kv) {
  const auto& keys = config_keys();
  for (const auto& [k, v] : kv) {
    auto it = keys.find(k);
    if (it == keys.end()) throw ConfigError("unknown configuration key '" + k + "'");
    it->second(cfg, v);
  }
}

/// A small configuration that trains in minutes on one core. Full-size
/// defaults live in the individual config structs.
inline PipelineConfig desk_config() {
  PipelineConfig c;
  c.corpus.dialogs_per_topic = 500;
  c.corpus.ambiguity_rate = 1.0;
  c.model.encoder.d_model = 32;
  c.model.encoder.n_layers = 2;
  c.model.encoder.n_heads = 2;
  c.model.encoder.max_seq = 64;
  c.model.cpg_layers = 1;
  c.model.context_len = 8;
  c.model.domain_len = 4;
  c.model.proj_dim = 32;
  c.backbone.total_steps = 1500;
  c.backbone.base_lr = 1e-3;
  c.stage1.total_steps = 1000;
  c.stage2.total_steps = 3000;
  for (TrainConfig* t : {&c.backbone, &c.stage1, &c.stage2}) t->batch_size = 16;
  c.stage1.base_lr = c.stage2.base_lr = 3e-3;
  return c;
}

inline std::string describe(const PipelineConfig& c) {
  std::ostringstream os;
  os << "d_model=" << c.model.encoder.d_model << " n_layers=" << c.model.encoder.n_layers
     << " ctx_len=" << c.model.context_len << " dom_len=" << c.model.domain_len
     << " prompt_layer=" << c.model.insert_layer << " use_cpg=" << c.model.use_cpg << " use_mop=" << c.model.use_mop
     << " stage1_steps=" << c.stage1.total_steps << " stage2_steps=" << c.stage2.total_steps
     << " batch_size=" << c.stage2.batch_size << " seed=" << c.seed;
  return os.str();
}

}  // namespace dialclip
