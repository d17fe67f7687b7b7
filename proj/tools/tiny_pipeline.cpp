// Library walk-through: generate a corpus, pretrain a backbone, prompt-tune,
// then score the test split. Takes well under a minute.

#include <iostream>

#include "dialclip/config.hpp"
#include "dialclip/harness.hpp"

int main() {
  using namespace dialclip;

  PipelineConfig cfg = desk_config();
  cfg.corpus.n_topics = 8;
  cfg.corpus.dialogs_per_topic = 120;
  cfg.pretrain_pairs = 1000;
  cfg.backbone.total_steps = 300;
  cfg.stage1.total_steps = 100;
  cfg.stage2.total_steps = 300;
  cfg.eval.pool_size = 50;
  cfg.seed = 1;
  cfg.sync();
  cfg.validate();
  std::cout << describe(cfg) << "\n\n";

  MetricsLog log(&std::cout);
  const auto corpus = generate_corpus(cfg.corpus);
  const DialClipModel backbone = build_backbone(cfg, &log);
  const RunResult run = run_from_backbone(backbone, cfg, filter_split(corpus, Split::Train),
                                          filter_split(corpus, Split::Test), &log);

  for (const auto& s : run.stages)
    std::cout << to_string(s.stage) << ": " << s.losses.size() << " steps, last loss " << s.losses.back()
              << ", " << s.trainable_values << " of " << s.total_values << " values trainable\n";
  const RecallReport& r = run.report;
  std::cout << '\n'
            << format_table(recall_table("Queries", {{"all", r.overall},
                                                     {"TR", r.text_responses},
                                                     {"IR", r.image_responses}}),
                            TableFormat::Text);
}
