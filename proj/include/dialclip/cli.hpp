#pragma once

#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dialclip/checkpoint.hpp"
#include "dialclip/config.hpp"
#include "dialclip/data.hpp"
#include "dialclip/diagnostics.hpp"
#include "dialclip/eval.hpp"
#include "dialclip/harness.hpp"
#include "dialclip/training.hpp"

namespace dialclip {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

namespace cli_detail {

// Options every subcommand shares: config file, per-key overrides, preset.
struct Common {
  std::string config_path;
  std::string preset = "default";
  std::map<std::string, std::string> flag_values;
  std::map<std::string, CLI::Option*> flag_opts;
  std::string metrics_path;
  std::string format = "text";
};

inline void add_common(CLI::App& sub, Common& c, bool with_metrics, bool with_format) {
  sub.add_option("--config", c.config_path, "key = value configuration file");
  sub.add_option("--preset", c.preset, "starting point before config and flags")
      ->check(CLI::IsMember({"default", "desk"}));
  if (with_metrics) sub.add_option("--metrics", c.metrics_path, "append metrics JSONL here");
  if (with_format) sub.add_option("--format", c.format, "table format")->check(CLI::IsMember({"text", "csv"}));
  auto* group = sub.add_option_group("config keys", "any configuration key, overriding the file");
  for (const auto& [key, setter] : config_keys()) c.flag_opts[key] = group->add_option("--" + key, c.flag_values[key]);
}

inline PipelineConfig resolve(const Common& c, const ModelConfig* model_base = nullptr) {
  PipelineConfig cfg = c.preset == "desk" ? desk_config() : PipelineConfig{};
  if (model_base) {
    cfg.model = *model_base;
    cfg.seed = model_base->seed;
  }
  if (!c.config_path.empty()) apply_key_values(cfg, read_key_values(c.config_path));
  KeyValues flags;
  for (const auto& [key, opt] : c.flag_opts)
    if (opt->count() > 0) flags[key] = c.flag_values.at(key);
  apply_key_values(cfg, flags);
  cfg.sync();
  cfg.validate();
  return cfg;
}

inline std::vector<std::uint64_t> parse_list_u64(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    out.push_back(config_detail::parse_number<std::uint64_t>("list", config_detail::trim(item)));
  if (out.empty()) throw ConfigError("empty list '" + s + "'");
  return out;
}

// Opens the metrics sink if requested. The stream outlives the log.
struct MetricsSink {
  std::unique_ptr<std::ofstream> file;
  std::unique_ptr<MetricsLog> log;

  explicit MetricsSink(const std::string& path) {
    if (path.empty()) return;
    file = std::make_unique<std::ofstream>(path, std::ios::trunc);
    if (!*file) throw InputError("cannot open metrics file '" + path + "'");
    log = std::make_unique<MetricsLog>(file.get());
  }
  MetricsLog* get() { return log.get(); }
};

inline std::vector<Dialog> load_or_generate(const std::string& data_path, const CorpusSpec& spec) {
  return data_path.empty() ? generate_corpus(spec) : read_jsonl(data_path);
}

inline Table report_table(const RecallReport& r) {
  std::vector<std::pair<std::string, RecallAt>> rows{{"all", r.overall}};
  rows.emplace_back("TR", r.text_responses);
  rows.emplace_back("IR", r.image_responses);
  for (auto rt : kAllRetrievalTypes)
    if (r.per_type[rt.index()].queries) rows.emplace_back(rt.name(), r.per_type[rt.index()]);
  return recall_table("Queries", rows);
}

}  // namespace cli_detail

/// Entry point shared by the executable and the tests.
inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  using namespace cli_detail;
  CLI::App app{"Prompt-tuned dual-encoder dialog retrieval on synthetic multi-modal dialogs"};
  app.name("dialclip");
  app.require_subcommand(1);

  Common c_gen, c_pre, c_train, c_ev, c_sw, c_ab;
  std::string out_path, data_path, init_path, ckpt_path, split = "test", stage = "stage2";
  std::string param, values, seeds = "0";
  double tol = 1e-3, step = 1e-4;
  bool include_backbone = false;
  std::uint64_t gc_seed = 7;

  auto* gen = app.add_subcommand("gen-data", "write the synthetic corpus as JSONL (.gz compresses)");
  gen->add_option("--out", out_path, "output path")->required();
  add_common(*gen, c_gen, false, false);

  auto* pre = app.add_subcommand("pretrain-backbone", "pretrain and save the dual-encoder backbone");
  pre->add_option("--out", out_path, "checkpoint path")->required();
  add_common(*pre, c_pre, true, false);

  auto* train = app.add_subcommand("train", "prompt-tune from a checkpoint");
  train->add_option("--init", init_path, "backbone or stage1 checkpoint")->required();
  train->add_option("--stage", stage, "stage to run")->check(CLI::IsMember({"stage1", "stage2"}));
  train->add_option("--out", out_path, "checkpoint path")->required();
  train->add_option("--data", data_path, "corpus JSONL (generated from the config when absent)");
  add_common(*train, c_train, true, false);

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--checkpoint", ckpt_path, "checkpoint path")->required();
  ev->add_option("--data", data_path, "corpus JSONL (generated from the config when absent)");
  ev->add_option("--split", split, "split to score")->check(CLI::IsMember({"train", "dev", "test"}));
  add_common(*ev, c_ev, false, true);

  auto* sw = app.add_subcommand("sweep", "vary one prompt setting and tabulate recall");
  sw->add_option("--param", param, "ctx_len, dom_len or prompt_layer")->required();
  sw->add_option("--values", values, "comma-separated values")->required();
  sw->add_option("--seeds", seeds, "comma-separated seeds");
  add_common(*sw, c_sw, true, true);

  auto* ab = app.add_subcommand("ablate", "compare full model against -CPG, -Domain, -MoP");
  ab->add_option("--seeds", seeds, "comma-separated seeds");
  add_common(*ab, c_ab, true, true);

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the end-to-end loss gradient");
  gc->add_option("--tol", tol, "maximum relative error");
  gc->add_option("--step", step, "finite-difference step");
  gc->add_option("--seed", gc_seed, "seed");
  gc->add_flag("--include-backbone", include_backbone, "also check backbone parameters");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (gen->parsed()) {
      const PipelineConfig cfg = resolve(c_gen);
      const auto corpus = generate_corpus(cfg.corpus);
      write_jsonl(corpus, out_path);
      out << "wrote " << corpus.size() << " dialogs to " << out_path << '\n';
    } else if (pre->parsed()) {
      const PipelineConfig cfg = resolve(c_pre);
      MetricsSink sink(c_pre.metrics_path);
      const DialClipModel model = build_backbone(cfg, sink.get());
      save_checkpoint(model, out_path);
      out << "backbone saved to " << out_path << '\n';
    } else if (train->parsed()) {
      const DialClipModel init = load_checkpoint(init_path);
      const PipelineConfig cfg = resolve(c_train, &init.config());
      DialClipModel model(cfg.model);
      // Same architecture: continue from every group. Otherwise keep only the backbone.
      if (model_config_to_json(init.config()) == model_config_to_json(cfg.model))
        model.copy_groups_from(init, {kAllGroups.begin(), kAllGroups.end()});
      else
        model.copy_groups_from(init, {ParamGroup::BackboneText, ParamGroup::BackboneImage});
      const auto corpus = load_or_generate(data_path, cfg.corpus);
      const Stage s = stage_from_string(stage);
      MetricsSink sink(c_train.metrics_path);
      const StageLog log = run_stage(s, filter_split(corpus, Split::Train),
                                     s == Stage::Stage2 ? filter_split(corpus, Split::Test) : std::vector<Dialog>{},
                                     model, s == Stage::Stage1 ? cfg.stage1 : cfg.stage2, sink.get());
      out << to_string(s) << ": " << log.losses.size() << " steps, final loss " << log.losses.back()
          << ", trainable " << log.trainable_values << " of " << log.total_values << " values ("
          << 100.0 * log.trainable_fraction << "%)\n";
      save_checkpoint(model, out_path);
    } else if (ev->parsed()) {
      const DialClipModel model = load_checkpoint(ckpt_path);
      const PipelineConfig cfg = resolve(c_ev, &model.config());
      const auto corpus = load_or_generate(data_path, cfg.corpus);
      const RecallReport r = evaluate(model, filter_split(corpus, split_from_string(split)), cfg.eval);
      out << format_table(report_table(r), table_format_from_string(c_ev.format));
    } else if (sw->parsed()) {
      const PipelineConfig cfg = resolve(c_sw);
      std::vector<std::size_t> vals;
      for (auto v : parse_list_u64(values)) vals.push_back(static_cast<std::size_t>(v));
      MetricsSink sink(c_sw.metrics_path);
      const auto res = sweep(cfg, param, vals, parse_list_u64(seeds), sink.get());
      out << format_table(series_table(res), table_format_from_string(c_sw.format));
    } else if (ab->parsed()) {
      const PipelineConfig cfg = resolve(c_ab);
      MetricsSink sink(c_ab.metrics_path);
      const auto res = ablate(cfg, parse_list_u64(seeds), sink.get());
      out << format_table(series_table(res), table_format_from_string(c_ab.format));
    } else if (gc->parsed()) {
      ModelGradCheckOptions o;
      o.check.tol = tol;
      o.check.step = step;
      o.seed = gc_seed;
      o.include_backbone = include_backbone;
      const auto r = model_grad_check(o);
      out << "coordinates " << r.report.coordinates << ", max relative error " << r.report.max_rel_error
          << " at " << r.worst_name() << '[' << r.report.worst_index << "] (analytic " << r.report.worst_analytic
          << ", numeric " << r.report.worst_numeric << "): " << (r.report.passed ? "PASS" : "FAIL") << '\n';
      return r.report.passed ? kExitOk : kExitRuntime;
    }
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  } catch (const ParseError& e) {
    err << "configuration file: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace dialclip
