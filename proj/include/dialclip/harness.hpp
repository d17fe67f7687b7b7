#pragma once

#include <algorithm>
#include <cstdio>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "dialclip/data.hpp"
#include "dialclip/eval.hpp"
#include "dialclip/model.hpp"
#include "dialclip/training.hpp"

namespace dialclip {

/// Everything one end-to-end run needs. `seed` drives model initialization
/// and batch order; the corpus has its own seed so several runs can share it.
struct PipelineConfig {
  CorpusSpec corpus;
  ModelConfig model;
  TrainConfig backbone;
  TrainConfig stage1;
  TrainConfig stage2;
  std::size_t pretrain_pairs = 4000;
  std::size_t heldout_pairs = 400;
  bool run_stage1 = true;
  EvalOptions eval;
  std::uint64_t seed = 0;

  PipelineConfig() {
    backbone.stage = Stage::Backbone;
    stage1.stage = Stage::Stage1;
    stage2.stage = Stage::Stage2;
    stage1.total_steps = 2000;
    stage2.total_steps = 5000;
  }

  /// Mirrors corpus dimensions into the encoder so the two cannot disagree.
  void sync() {
    model.encoder.vocab_size = corpus.vocab_size;
    model.encoder.n_patches = corpus.n_patches;
    model.encoder.patch_dim = corpus.patch_dim;
    model.seed = seed;
    for (TrainConfig* t : {&backbone, &stage1, &stage2}) {
      t->seed = seed;
      t->eval = eval;
    }
  }

  void validate() const {
    corpus.validate();
    model.validate();
    backbone.validate();
    stage1.validate();
    stage2.validate();
    if (pretrain_pairs == 0) throw ConfigError("pretrain_pairs must be positive");
  }
};

struct RunResult {
  RecallReport report;
  std::vector<StageLog> stages;
};

/// Pretrains a backbone under `cfg.seed` and returns it frozen.
inline DialClipModel build_backbone(PipelineConfig cfg, MetricsLog* log = nullptr) {
  cfg.sync();
  cfg.validate();
  DialClipModel model(cfg.model);
  const auto pairs = generate_pairs(cfg.corpus, cfg.pretrain_pairs, 0);
  const auto heldout = generate_pairs(cfg.corpus, cfg.heldout_pairs, 1);
  pretrain_backbone(pairs, heldout.size() >= cfg.eval.pool_size ? heldout : std::vector<ImageTextPair>{}, model,
                    cfg.backbone, log);
  return model;
}

/// Fresh prompts, generator and experts on top of a copy of `backbone`,
/// then stage1 (optional) and stage2. The final test report is the last
/// stage2 evaluation.
inline RunResult run_from_backbone(const DialClipModel& backbone, PipelineConfig cfg,
                                   const std::vector<Dialog>& train, const std::vector<Dialog>& test,
                                   MetricsLog* log = nullptr) {
  cfg.sync();
  cfg.validate();
  DialClipModel model(cfg.model);
  model.copy_groups_from(backbone, {ParamGroup::BackboneText, ParamGroup::BackboneImage});
  RunResult out;
  if (cfg.run_stage1) out.stages.push_back(run_stage(Stage::Stage1, train, {}, model, cfg.stage1, log));
  out.stages.push_back(run_stage(Stage::Stage2, train, test, model, cfg.stage2, log));
  out.report = out.stages.back().evals.back().second;
  return out;
}

inline RunResult run_pipeline(const PipelineConfig& cfg, MetricsLog* log = nullptr) {
  const auto corpus = generate_corpus(cfg.corpus);
  const DialClipModel backbone = build_backbone(cfg, log);
  return run_from_backbone(backbone, cfg, filter_split(corpus, Split::Train), filter_split(corpus, Split::Test),
                           log);
}

// --- ablations ---------------------------------------------------------------

enum class Variant : std::uint8_t { Full, NoCpg, NoDomain, NoMop };

inline constexpr std::array<Variant, 4> kAllVariants{Variant::Full, Variant::NoCpg, Variant::NoDomain,
                                                     Variant::NoMop};

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::NoCpg: return "-CPG";
    case Variant::NoDomain: return "-Domain";
    case Variant::NoMop: return "-MoP";
  }
  return "";
}

inline PipelineConfig with_variant(PipelineConfig cfg, Variant v) {
  switch (v) {
    case Variant::Full: break;
    case Variant::NoCpg: cfg.model.use_cpg = false; break;
    case Variant::NoDomain: cfg.model.domain_len = 0; break;
    case Variant::NoMop: cfg.model.use_mop = false; break;
  }
  return cfg;
}

/// Per-seed reports for each row of a sweep or ablation table.
struct SeriesRow {
  std::string label;
  std::vector<RecallReport> per_seed;

  RecallAt mean() const {
    RecallAt m;
    if (per_seed.empty()) return m;
    for (const auto& r : per_seed) {
      m.r1 += r.overall.r1;
      m.r5 += r.overall.r5;
      m.r10 += r.overall.r10;
      m.queries += r.overall.queries;
    }
    const auto n = static_cast<double>(per_seed.size());
    m.r1 /= n;
    m.r5 /= n;
    m.r10 /= n;
    return m;
  }
};

struct SeriesResult {
  std::string key_header;
  std::vector<SeriesRow> rows;

  const SeriesRow& row(const std::string& label) const {
    for (const auto& r : rows)
      if (r.label == label) return r;
    throw ContractError("no row labelled '" + label + "'");
  }
};

/// Runs `configure(cfg, i)` for each row i and seed, sharing one corpus and,
/// per seed, one pretrained backbone across rows.
template <class Configure>
SeriesResult run_series(const PipelineConfig& base, const std::vector<std::uint64_t>& seeds,
                        const std::vector<std::string>& labels, Configure configure, MetricsLog* log = nullptr) {
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  // Validate every row before spending time on training.
  for (std::size_t i = 0; i < labels.size(); ++i) {
    PipelineConfig c = configure(base, i);
    c.sync();
    c.validate();
  }
  const auto corpus = generate_corpus(base.corpus);
  const auto train = filter_split(corpus, Split::Train), test = filter_split(corpus, Split::Test);
  SeriesResult out;
  for (const auto& l : labels) out.rows.push_back({l, {}});
  for (auto seed : seeds) {
    PipelineConfig seeded = base;
    seeded.seed = seed;
    const DialClipModel backbone = build_backbone(seeded, log);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      PipelineConfig c = configure(seeded, i);
      c.seed = seed;
      out.rows[i].per_seed.push_back(run_from_backbone(backbone, c, train, test, log).report);
    }
  }
  return out;
}

inline SeriesResult ablate(const PipelineConfig& base, const std::vector<std::uint64_t>& seeds,
                           MetricsLog* log = nullptr) {
  std::vector<std::string> labels;
  for (auto v : kAllVariants) labels.emplace_back(to_string(v));
  auto r = run_series(base, seeds, labels,
                      [](const PipelineConfig& c, std::size_t i) { return with_variant(c, kAllVariants[i]); }, log);
  r.key_header = "Model";
  return r;
}

/// Sweepable knobs: ctx_len (L_c), dom_len (L_d), prompt_layer.
inline PipelineConfig with_sweep_value(PipelineConfig cfg, const std::string& param, std::size_t value) {
  if (param == "ctx_len")
    cfg.model.context_len = value;
  else if (param == "dom_len")
    cfg.model.domain_len = value;
  else if (param == "prompt_layer")
    cfg.model.insert_layer = value;
  else
    throw ConfigError("unknown sweep parameter '" + param + "' (expected ctx_len, dom_len or prompt_layer)");
  return cfg;
}

inline SeriesResult sweep(const PipelineConfig& base, const std::string& param, const std::vector<std::size_t>& values,
                          const std::vector<std::uint64_t>& seeds, MetricsLog* log = nullptr) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  std::vector<std::string> labels;
  for (auto v : values) labels.push_back(std::to_string(v));
  auto r = run_series(base, seeds, labels,
                      [&](const PipelineConfig& c, std::size_t i) { return with_sweep_value(c, param, values[i]); },
                      log);
  r.key_header = param;
  return r;
}

// --- tables --------------------------------------------------------------------

enum class TableFormat : std::uint8_t { Text, Csv };

inline TableFormat table_format_from_string(const std::string& s) {
  if (s == "text") return TableFormat::Text;
  if (s == "csv") return TableFormat::Csv;
  throw ConfigError("unknown table format '" + s + "' (expected text or csv)");
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

inline std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", 100.0 * v);
  return buf;
}

inline Table recall_table(const std::string& key_header, const std::vector<std::pair<std::string, RecallAt>>& rows) {
  Table t;
  t.header = {key_header, "R@1", "R@5", "R@10", "Sum"};
  for (const auto& [label, r] : rows) {
    char sum[32];
    std::snprintf(sum, sizeof sum, "%.1f", r.sum());
    t.rows.push_back({label, percent(r.r1), percent(r.r5), percent(r.r10), sum});
  }
  return t;
}

inline Table series_table(const SeriesResult& s) {
  std::vector<std::pair<std::string, RecallAt>> rows;
  for (const auto& r : s.rows) rows.emplace_back(r.label, r.mean());
  return recall_table(s.key_header, rows);
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string format_table(const Table& t, TableFormat f) {
  std::ostringstream os;
  if (f == TableFormat::Csv) {
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) os << (i ? "," : "") << csv_field(cells[i]);
      os << '\n';
    };
    line(t.header);
    for (const auto& r : t.rows) line(r);
    return os.str();
  }
  std::vector<std::size_t> width(t.header.size());
  for (std::size_t c = 0; c < width.size(); ++c) {
    width[c] = t.header[c].size();
    for (const auto& r : t.rows) width[c] = std::max(width[c], r[c].size());
  }
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      // First column left-aligned, numbers right-aligned.
      if (c == 0)
        os << std::left << std::setw(static_cast<int>(width[c])) << cells[c];
      else
        os << "  " << std::right << std::setw(static_cast<int>(width[c])) << cells[c];
    }
    os << '\n';
  };
  line(t.header);
  std::size_t total = 0;
  for (auto w : width) total += w;
  os << std::string(total + 2 * (width.size() - 1), '-') << '\n';
  for (const auto& r : t.rows) line(r);
  return os.str();
}

}  // namespace dialclip
