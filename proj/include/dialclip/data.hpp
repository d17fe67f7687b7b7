#pragma once

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dialclip/dialog.hpp"
#include "dialclip/errors.hpp"
#include "dialclip/rng.hpp"

namespace dialclip {

/// Parameters of the synthetic multi-modal dialog corpus.
///
/// Every dialog has a hidden topic. Topic-indicative tokens are a disjoint
/// block of the vocabulary per topic; the remaining ids are a shared
/// sublanguage that carries no topic information. Images are the topic's mean
/// patch matrix plus Gaussian noise. In an ambiguous dialog the current input
/// carries no topic signal (shared tokens only, or an image drawn around a
/// topic-free mean), so only the earlier context can identify the topic.
struct CorpusSpec {
  std::size_t n_topics = 16;
  std::size_t dialogs_per_topic = 160;
  std::size_t min_turns = 2;
  std::size_t max_turns = 6;
  std::size_t vocab_size = 256;
  std::size_t tokens_per_topic = 8;
  std::size_t min_tokens = 4;
  std::size_t max_tokens = 8;
  // Fraction of positions in an informative dialog utterance drawn from the
  // topic block; the rest are shared tokens.
  double topic_token_rate = 0.5;
  std::size_t n_patches = 16;
  std::size_t patch_dim = 16;
  double topic_mean_scale = 1.0;
  double noise_sigma = 1.0;
  double ambiguity_rate = 0.0;
  double context_image_rate = 0.3;
  double input_image_rate = 0.5;
  double response_image_rate = 0.5;
  double dev_fraction = 0.0;
  double test_fraction = 0.2;
  // Single-round caption/image pairs for backbone pretraining. Captions use
  // topic tokens at this rate (1.0 = no shared tokens at all).
  double pair_topic_token_rate = 1.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (n_topics < 2) throw ConfigError("corpus needs at least 2 topics, got " + std::to_string(n_topics));
    if (n_topics * tokens_per_topic >= vocab_size)
      throw ConfigError("topic token blocks leave no shared vocabulary");
    if (tokens_per_topic == 0 || min_tokens == 0 || min_tokens > max_tokens)
      throw ConfigError("bad token length range");
    if (min_turns < 1 || min_turns > max_turns) throw ConfigError("bad turn count range");
    auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!unit(ambiguity_rate) || !unit(topic_token_rate) || !unit(context_image_rate) ||
        !unit(input_image_rate) || !unit(response_image_rate) || !unit(pair_topic_token_rate))
      throw ConfigError("rates must lie in [0, 1]");
    if (dev_fraction < 0.0 || test_fraction < 0.0 || dev_fraction + test_fraction > 1.0)
      throw ConfigError("split fractions must be non-negative and sum to at most 1");
    if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be non-negative");
    if (n_patches == 0 || patch_dim == 0 || dialogs_per_topic == 0)
      throw ConfigError("corpus sizes must be positive");
  }

  std::size_t patch_values() const { return n_patches * patch_dim; }
  std::size_t shared_begin() const { return n_topics * tokens_per_topic; }
};

/// One caption/image pair used to pretrain the backbone.
struct ImageTextPair {
  std::vector<std::uint32_t> tokens;
  std::vector<double> patches;
  std::uint32_t topic = 0;
};

/// Draws utterances from the planted topic model. Construction fixes the
/// topic means; all later sampling goes through the caller's stream.
class TopicModel {
 public:
  explicit TopicModel(const CorpusSpec& spec) : spec_(spec) {
    spec.validate();
    Rng rng(spec.seed ^ 0x70706963ULL);
    // One extra mean for topic-free images.
    for (std::size_t k = 0; k <= spec.n_topics; ++k) {
      std::vector<double> m(spec.patch_values());
      for (auto& v : m) v = rng.normal() * spec.topic_mean_scale;
      means_.push_back(std::move(m));
    }
    for (std::size_t a = 0; a < means_.size(); ++a)
      for (std::size_t b = a + 1; b < means_.size(); ++b)
        if (means_[a] == means_[b]) throw ConfigError("topic means collide");
  }

  const CorpusSpec& spec() const { return spec_; }
  const std::vector<double>& mean(std::size_t topic) const { return means_.at(topic); }
  const std::vector<double>& neutral_mean() const { return means_.back(); }

  std::uint32_t topic_token(std::uint32_t topic, Rng& rng) const {
    return static_cast<std::uint32_t>(topic * spec_.tokens_per_topic +
                                      rng.below(static_cast<std::uint32_t>(spec_.tokens_per_topic)));
  }
  std::uint32_t shared_token(Rng& rng) const {
    const auto n = static_cast<std::uint32_t>(spec_.vocab_size - spec_.shared_begin());
    return static_cast<std::uint32_t>(spec_.shared_begin() + rng.below(n));
  }
  bool is_topic_token(std::uint32_t t) const { return t < spec_.shared_begin(); }
  std::uint32_t topic_of_token(std::uint32_t t) const {
    return static_cast<std::uint32_t>(t / spec_.tokens_per_topic);
  }

  // Informative text: topic tokens at `rate`, at least one of them.
  std::vector<std::uint32_t> text(std::uint32_t topic, double rate, Rng& rng) const {
    const std::size_t len = spec_.min_tokens + rng.below(static_cast<std::uint32_t>(
                                                   spec_.max_tokens - spec_.min_tokens + 1));
    std::vector<std::uint32_t> toks(len);
    bool any = false;
    for (auto& t : toks) {
      if (rng.bernoulli(rate)) {
        t = topic_token(topic, rng);
        any = true;
      } else {
        t = shared_token(rng);
      }
    }
    if (!any) toks[rng.below(static_cast<std::uint32_t>(len))] = topic_token(topic, rng);
    return toks;
  }

  std::vector<std::uint32_t> neutral_text(Rng& rng) const {
    const std::size_t len = spec_.min_tokens + rng.below(static_cast<std::uint32_t>(
                                                   spec_.max_tokens - spec_.min_tokens + 1));
    std::vector<std::uint32_t> toks(len);
    for (auto& t : toks) t = shared_token(rng);
    return toks;
  }

  std::vector<double> image_around(const std::vector<double>& mean, Rng& rng) const {
    std::vector<double> p(mean.size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = mean[i] + rng.normal() * spec_.noise_sigma;
    return p;
  }

  Utterance utterance(Modality m, Role role, std::uint32_t topic, bool informative, Rng& rng) const {
    if (m == Modality::Text)
      return Utterance::text(role, informative ? text(topic, spec_.topic_token_rate, rng) : neutral_text(rng));
    return Utterance::image(role, image_around(informative ? mean(topic) : neutral_mean(), rng));
  }

 private:
  CorpusSpec spec_;
  std::vector<std::vector<double>> means_;
};

/// Generates the dialog corpus. Deterministic in spec.seed.
inline std::vector<Dialog> generate_corpus(const CorpusSpec& spec) {
  const TopicModel model(spec);
  Rng rng(spec.seed);
  const std::size_t total = spec.n_topics * spec.dialogs_per_topic;
  std::vector<Dialog> out;
  out.reserve(total);
  for (std::size_t i = 0; i < total; ++i) {
    Dialog d;
    d.id = "d" + std::to_string(i);
    d.topic_id = static_cast<std::uint32_t>(i % spec.n_topics);
    const bool ambiguous = rng.bernoulli(spec.ambiguity_rate);
    const std::size_t n_turns =
        spec.min_turns + rng.below(static_cast<std::uint32_t>(spec.max_turns - spec.min_turns + 1));
    for (std::size_t t = 0; t < n_turns; ++t) {
      const bool is_input = t + 1 == n_turns;
      const Role role = ((n_turns - 1 - t) % 2 == 0) ? Role::User : Role::System;
      const double image_rate = is_input ? spec.input_image_rate : spec.context_image_rate;
      const Modality m = rng.bernoulli(image_rate) ? Modality::Image : Modality::Text;
      d.turns.push_back(model.utterance(m, role, d.topic_id, !(is_input && ambiguous), rng));
    }
    const Modality rm = rng.bernoulli(spec.response_image_rate) ? Modality::Image : Modality::Text;
    d.response = model.utterance(rm, Role::System, d.topic_id, true, rng);
    out.push_back(std::move(d));
  }
  // Split assignment over a shuffled order so every split mixes topics.
  std::vector<std::size_t> order(total);
  for (std::size_t i = 0; i < total; ++i) order[i] = i;
  rng.shuffle(std::span<std::size_t>(order));
  const auto n_test = static_cast<std::size_t>(std::llround(spec.test_fraction * static_cast<double>(total)));
  const auto n_dev = static_cast<std::size_t>(std::llround(spec.dev_fraction * static_cast<double>(total)));
  for (std::size_t r = 0; r < total; ++r) {
    Split s = Split::Train;
    if (r < n_test)
      s = Split::Test;
    else if (r < n_test + n_dev)
      s = Split::Dev;
    out[order[r]].split = s;
  }
  return out;
}

/// Single-round caption/image pairs from the same topic model, for backbone
/// pretraining. `stream` selects an independent sample (train vs held-out).
inline std::vector<ImageTextPair> generate_pairs(const CorpusSpec& spec, std::size_t n,
                                                 std::uint64_t stream = 0) {
  const TopicModel model(spec);
  Rng rng(spec.seed ^ (0x9a125ULL + stream * 0x1000193ULL));
  std::vector<ImageTextPair> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& p = out[i];
    p.topic = static_cast<std::uint32_t>(rng.below(static_cast<std::uint32_t>(spec.n_topics)));
    p.tokens = model.text(p.topic, spec.pair_topic_token_rate, rng);
    p.patches = model.image_around(model.mean(p.topic), rng);
  }
  return out;
}

inline std::vector<Dialog> filter_split(const std::vector<Dialog>& corpus, Split s) {
  std::vector<Dialog> out;
  for (const auto& d : corpus)
    if (d.split == s) out.push_back(d);
  return out;
}

// --- JSONL -----------------------------------------------------------------

namespace jsonl_detail {

using nlohmann::json;

inline json utterance_to_json(const Utterance& u) {
  json j;
  j["role"] = std::string(to_string(u.role));
  j["modality"] = std::string(to_string(u.modality));
  if (u.tokens) j["tokens"] = *u.tokens;
  if (u.patches) j["patches"] = *u.patches;
  return j;
}

inline const json& field(const json& j, const char* name, const std::string& where) {
  auto it = j.find(name);
  if (it == j.end()) throw InputError("missing field '" + std::string(name) + "'" + where);
  return *it;
}

inline Utterance utterance_from_json(const json& j, const std::string& where) {
  if (!j.is_object()) throw InputError("utterance must be an object" + where);
  Utterance u;
  u.role = role_from_string(field(j, "role", where).get<std::string>());
  u.modality = modality_from_string(field(j, "modality", where).get<std::string>());
  if (u.modality == Modality::Text) {
    u.tokens = field(j, "tokens", where).get<std::vector<std::uint32_t>>();
    if (j.contains("patches")) throw InputError("text utterance carries patches" + where);
  } else {
    u.patches = field(j, "patches", where).get<std::vector<double>>();
    if (j.contains("tokens")) throw InputError("image utterance carries tokens" + where);
  }
  return u;
}

inline bool has_gz_suffix(const std::string& path) {
  return path.size() >= 3 && path.compare(path.size() - 3, 3, ".gz") == 0;
}

}  // namespace jsonl_detail

inline std::string dialog_to_json_line(const Dialog& d) {
  using jsonl_detail::json;
  json j;
  j["id"] = d.id;
  j["split"] = std::string(to_string(d.split));
  json turns = json::array();
  for (const auto& u : d.turns) turns.push_back(jsonl_detail::utterance_to_json(u));
  j["turns"] = std::move(turns);
  j["response"] = jsonl_detail::utterance_to_json(d.response);
  j["topic_id"] = d.topic_id;
  return j.dump();
}

inline Dialog dialog_from_json_line(const std::string& line, std::size_t line_no) {
  using jsonl_detail::json;
  try {
    const json j = json::parse(line);
    if (!j.is_object()) throw InputError("dialog must be a JSON object");
    Dialog d;
    d.id = jsonl_detail::field(j, "id", "").get<std::string>();
    d.split = split_from_string(jsonl_detail::field(j, "split", "").get<std::string>());
    const json& turns = jsonl_detail::field(j, "turns", "");
    if (!turns.is_array() || turns.empty()) throw InputError("field 'turns' must be a non-empty array");
    for (std::size_t i = 0; i < turns.size(); ++i)
      d.turns.push_back(jsonl_detail::utterance_from_json(turns[i], " in turns[" + std::to_string(i) + "]"));
    d.response = jsonl_detail::utterance_from_json(jsonl_detail::field(j, "response", ""), " in response");
    d.topic_id = jsonl_detail::field(j, "topic_id", "").get<std::uint32_t>();
    return d;
  } catch (const json::exception& e) {
    throw ParseError(line_no, e.what());
  } catch (const InputError& e) {
    throw ParseError(line_no, e.what());
  }
}

/// One dialog per line. Paths ending in ".gz" are gzip-compressed. Floats are
/// written in shortest round-trip form, so reading back is exact.
inline void write_jsonl(const std::vector<Dialog>& dialogs, const std::string& path) {
  if (jsonl_detail::has_gz_suffix(path)) {
    gzFile f = gzopen(path.c_str(), "wb");
    if (!f) throw InputError("cannot open " + path + " for writing");
    for (const auto& d : dialogs) {
      const std::string line = dialog_to_json_line(d) + "\n";
      if (gzwrite(f, line.data(), static_cast<unsigned>(line.size())) != static_cast<int>(line.size())) {
        gzclose(f);
        throw InputError("write failed: " + path);
      }
    }
    if (gzclose(f) != Z_OK) throw InputError("write failed: " + path);
    return;
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot open " + path + " for writing");
  for (const auto& d : dialogs) os << dialog_to_json_line(d) << '\n';
  if (!os) throw InputError("write failed: " + path);
}

inline std::vector<Dialog> parse_jsonl(std::istream& is) {
  std::vector<Dialog> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    out.push_back(dialog_from_json_line(line, line_no));
  }
  return out;
}

inline std::vector<Dialog> read_jsonl(const std::string& path) {
  if (jsonl_detail::has_gz_suffix(path)) {
    gzFile f = gzopen(path.c_str(), "rb");
    if (!f) throw InputError("cannot open " + path);
    std::string data;
    std::array<char, 1 << 16> buf{};
    int n = 0;
    while ((n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()))) > 0) data.append(buf.data(), n);
    const bool failed = n < 0;
    gzclose(f);
    if (failed) throw InputError("corrupt gzip stream: " + path);
    std::istringstream is(data);
    return parse_jsonl(is);
  }
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open " + path);
  return parse_jsonl(is);
}

// --- batching --------------------------------------------------------------

/// Yields batches that each hold a single retrieval type. Within a type,
/// dialogs are drawn without replacement per epoch; the last batch of a type
/// may be short. Batch order is shuffled across types.
class BatchSampler {
 public:
  BatchSampler(const std::vector<Dialog>& corpus, std::size_t batch_size, Rng rng)
      : corpus_(&corpus), batch_size_(batch_size), rng_(rng) {
    if (batch_size == 0) throw ContractError("batch_size must be at least 1");
    for (std::size_t i = 0; i < corpus.size(); ++i) by_type_[corpus[i].retrieval_type().index()].push_back(i);
  }

  /// Batches (as corpus indices) for one full pass.
  std::vector<std::vector<std::size_t>> epoch() {
    std::vector<std::vector<std::size_t>> batches;
    for (auto& ids : by_type_) {
      std::vector<std::size_t> order = ids;
      rng_.shuffle(std::span<std::size_t>(order));
      for (std::size_t i = 0; i < order.size(); i += batch_size_)
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                             order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size_)));
    }
    rng_.shuffle(std::span<std::vector<std::size_t>>(batches));
    return batches;
  }

  std::vector<const Dialog*> next() {
    if (pending_.empty()) {
      pending_ = epoch();
      std::reverse(pending_.begin(), pending_.end());
      if (pending_.empty()) throw InputError("cannot sample batches from an empty corpus");
    }
    std::vector<const Dialog*> batch;
    for (auto i : pending_.back()) batch.push_back(&(*corpus_)[i]);
    pending_.pop_back();
    return batch;
  }

 private:
  const std::vector<Dialog>* corpus_;
  std::size_t batch_size_;
  Rng rng_;
  std::array<std::vector<std::size_t>, 4> by_type_;
  std::vector<std::vector<std::size_t>> pending_;
};

}  // namespace dialclip
