#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dialclip/checkpoint.hpp"
#include "dialclip/cli.hpp"
#include "dialclip/config.hpp"
#include "dialclip/harness.hpp"
#include "test_util.hpp"

using namespace dialclip;
namespace dt = dialclip::testing;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("dialclip_io_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                         "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
};

struct CliResult {
  int code;
  std::string out, err;
};

CliResult run(std::vector<std::string> args) {
  args.insert(args.begin(), "dialclip");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

// A pipeline that runs in well under a second.
const char* kTinyConfig = R"(# tiny end-to-end run
n_topics = 4
dialogs_per_topic = 60
vocab_size = 48
tokens_per_topic = 4
min_tokens = 2
max_tokens = 5
max_turns = 4
n_patches = 4
patch_dim = 6
d_model = 16
n_layers = 2
n_heads = 2
max_seq = 32
ctx_len = 2
dom_len = 2
proj_dim = 8
pretrain_pairs = 64
heldout_pairs = 0
backbone_steps = 6
backbone_batch = 8
stage1_steps = 4
stage2_steps = 4
batch_size = 4
pool_size = 10
)";

PipelineConfig tiny_pipeline() {
  std::istringstream is(kTinyConfig);
  PipelineConfig c;
  apply_key_values(c, parse_key_values(is));
  c.sync();
  return c;
}

std::string with_manifest(const std::string& bytes, const std::function<void(nlohmann::json&)>& edit) {
  const std::uint64_t mlen = checkpoint_detail::get_u64(bytes.data() + 8);
  auto j = nlohmann::json::parse(bytes.substr(16, mlen));
  edit(j);
  const std::string text = j.dump();
  std::string out = bytes.substr(0, 8);
  checkpoint_detail::put_u64(out, text.size());
  return out + text + bytes.substr(16 + mlen);
}

}  // namespace

// --- checkpoints ---------------------------------------------------------------

TEST(Checkpoint, RoundTripAtSinglePrecision) {
  TempDir dir;
  DialClipModel model(dt::tiny_model(12));
  model.mark_backbone_ready();
  save_checkpoint(model, dir.file("m.dcl"));
  const DialClipModel back = load_checkpoint(dir.file("m.dcl"));
  EXPECT_TRUE(back.backbone_ready());
  EXPECT_EQ(model_config_to_json(back.config()), model_config_to_json(model.config()));
  DialClipModel rounded = model.clone();
  round_to_f32(rounded);
  EXPECT_EQ(dt::snapshot(back.parameters()), dt::snapshot(rounded.parameters()));
  const auto orig = dt::snapshot(model.parameters());
  const auto loaded = dt::snapshot(back.parameters());
  for (std::size_t i = 0; i < orig.size(); ++i) EXPECT_NEAR(loaded[i], orig[i], 1e-7 * std::max(1.0, std::abs(orig[i])));
  // Saving the reload reproduces the same bytes.
  EXPECT_EQ(checkpoint_bytes(back), checkpoint_bytes(model));
}

TEST(Checkpoint, Truncation) {
  const std::string bytes = checkpoint_bytes(DialClipModel(dt::tiny_model()));
  const std::uint64_t mlen = checkpoint_detail::get_u64(bytes.data() + 8);
  for (std::size_t n : {std::size_t{0}, std::size_t{5}, std::size_t{12}, std::size_t{16 + mlen / 2},
                        std::size_t{16 + mlen + 3}, bytes.size() - 1})
    EXPECT_THROW(model_from_checkpoint_bytes(bytes.substr(0, n)), TruncationError) << n;
  EXPECT_NO_THROW(model_from_checkpoint_bytes(bytes));
}

TEST(Checkpoint, VersionMismatch) {
  const std::string bytes = checkpoint_bytes(DialClipModel(dt::tiny_model()));
  std::string other = bytes;
  other[7] = '2';
  EXPECT_THROW(model_from_checkpoint_bytes(other), VersionError);
  EXPECT_THROW(model_from_checkpoint_bytes(with_manifest(bytes, [](auto& j) { j["format_version"] = 2; })),
               VersionError);
}

TEST(Checkpoint, CorruptManifest) {
  const std::string bytes = checkpoint_bytes(DialClipModel(dt::tiny_model()));
  std::string magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(model_from_checkpoint_bytes(magic), CorruptManifestError);
  std::string garbled = bytes;
  garbled[16] = '#';
  EXPECT_THROW(model_from_checkpoint_bytes(garbled), CorruptManifestError);
  EXPECT_THROW(model_from_checkpoint_bytes(with_manifest(bytes, [](auto& j) { j["params"][3]["name"] = "nope"; })),
               CorruptManifestError);
  EXPECT_THROW(model_from_checkpoint_bytes(with_manifest(bytes, [](auto& j) { j["params"][0]["shape"] = {1, 1}; })),
               CorruptManifestError);
  EXPECT_THROW(model_from_checkpoint_bytes(with_manifest(bytes, [](auto& j) { j.erase("config"); })),
               CorruptManifestError);
  EXPECT_THROW(model_from_checkpoint_bytes(
                   with_manifest(bytes, [](auto& j) { j["config"]["n_heads"] = 3; })),
               CorruptManifestError);
  EXPECT_THROW(model_from_checkpoint_bytes(
                   with_manifest(bytes, [](auto& j) { j["params"][1]["offset"] = j["blob_bytes"]; })),
               CorruptManifestError);
}

TEST(Checkpoint, MissingFile) { EXPECT_THROW(load_checkpoint("/nonexistent/dir/m.dcl"), LoadError); }

// --- config files ------------------------------------------------------------------

TEST(ConfigFile, ParsesCommentsAndWhitespace) {
  std::istringstream is("# header\n\n  d_model = 24  # inline\nuse_cpg=false\r\n\tname =  a b \n");
  const KeyValues kv = parse_key_values(is);
  ASSERT_EQ(kv.size(), 3u);
  EXPECT_EQ(kv.at("d_model"), "24");
  EXPECT_EQ(kv.at("use_cpg"), "false");
  EXPECT_EQ(kv.at("name"), "a b");
}

TEST(ConfigFile, SyntaxErrorsCarryLineNumbers) {
  std::istringstream missing_eq("d_model = 4\n\nctx_len 3\n");
  try {
    parse_key_values(missing_eq);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  std::istringstream empty_key(" = 4\n");
  EXPECT_THROW(parse_key_values(empty_key), ParseError);
  EXPECT_THROW(read_key_values("/nonexistent/cfg.txt"), InputError);
}

TEST(ConfigFile, AppliesKeys) {
  PipelineConfig c;
  apply_key_values(c, {{"batch_size", "12"}, {"use_mop", "no"}, {"prompt_layer", "1"}, {"stage2_lr", "0.25"}});
  EXPECT_EQ(c.stage1.batch_size, 12u);
  EXPECT_EQ(c.stage2.batch_size, 12u);
  EXPECT_FALSE(c.model.use_mop);
  EXPECT_EQ(c.model.insert_layer, 1u);
  EXPECT_EQ(c.stage2.base_lr, 0.25);
  EXPECT_THROW(apply_key_values(c, {{"learning_rate", "1"}}), ConfigError);
  EXPECT_THROW(apply_key_values(c, {{"d_model", "twelve"}}), ConfigError);
  EXPECT_THROW(apply_key_values(c, {{"use_cpg", "maybe"}}), ConfigError);
}

TEST(ConfigFile, PresetsValidate) {
  PipelineConfig desk = desk_config();
  desk.sync();
  EXPECT_NO_THROW(desk.validate());
  EXPECT_NO_THROW(tiny_pipeline().validate());
  PipelineConfig bad = tiny_pipeline();
  bad.model.context_len = 0;
  bad.model.domain_len = 0;
  bad.model.encoder.n_heads = 5;
  EXPECT_THROW(bad.validate(), ConfigError);
}

// --- tables ---------------------------------------------------------------------------

TEST(Tables, TextAndCsv) {
  RecallAt a;
  a.r1 = 0.5;
  a.r5 = 0.75;
  a.r10 = 0.875;
  RecallAt b;
  b.r1 = 0.0126;
  const Table t = recall_table("Model", {{"full", a}, {"-CPG, x", b}});
  EXPECT_EQ(format_table(t, TableFormat::Text),
            "Model     R@1   R@5  R@10    Sum\n"
            "--------------------------------\n"
            "full     50.0  75.0  87.5  212.5\n"
            "-CPG, x   1.3   0.0   0.0    1.3\n");
  EXPECT_EQ(format_table(t, TableFormat::Csv),
            "Model,R@1,R@5,R@10,Sum\n"
            "full,50.0,75.0,87.5,212.5\n"
            "\"-CPG, x\",1.3,0.0,0.0,1.3\n");
  EXPECT_EQ(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
  EXPECT_THROW(table_format_from_string("xml"), ConfigError);
}

// --- harness ----------------------------------------------------------------------------

TEST(Harness, SingleValueSweepEqualsPlainRun) {
  PipelineConfig c = tiny_pipeline();
  c.seed = 4;
  const RunResult plain = run_pipeline(c);
  const SeriesResult s = sweep(c, "ctx_len", {c.model.context_len}, {4});
  ASSERT_EQ(s.rows.size(), 1u);
  const RecallAt m = s.rows[0].mean();
  EXPECT_EQ(m.r1, plain.report.overall.r1);
  EXPECT_EQ(m.r5, plain.report.overall.r5);
  EXPECT_EQ(m.r10, plain.report.overall.r10);
  EXPECT_EQ(s.key_header, "ctx_len");
}

TEST(Harness, VariantsAndSweepKeys) {
  const PipelineConfig c = tiny_pipeline();
  EXPECT_FALSE(with_variant(c, Variant::NoCpg).model.use_cpg);
  EXPECT_EQ(with_variant(c, Variant::NoDomain).model.domain_len, 0u);
  EXPECT_FALSE(with_variant(c, Variant::NoMop).model.use_mop);
  EXPECT_EQ(with_sweep_value(c, "dom_len", 7).model.domain_len, 7u);
  EXPECT_THROW(with_sweep_value(c, "d_model", 7), ConfigError);
  // Invalid rows are rejected before any training starts.
  EXPECT_THROW(sweep(c, "prompt_layer", {0, 9}, {0}), ConfigError);
  EXPECT_THROW(ablate(c, {}), ConfigError);
}

TEST(Harness, MetricsAreDeterministic) {
  PipelineConfig c = tiny_pipeline();
  c.stage2.eval_every = 2;
  std::ostringstream a, b;
  MetricsLog la(&a), lb(&b);
  run_pipeline(c, &la);
  run_pipeline(c, &lb);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_FALSE(a.str().empty());
}

// --- command line ----------------------------------------------------------------------

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run({}).code, kExitUsage);
  const CliResult unknown = run({"frobnicate"});
  EXPECT_EQ(unknown.code, kExitUsage);
  EXPECT_NE(unknown.err.find("Usage"), std::string::npos);
  EXPECT_EQ(run({"ablate", "--preset", "huge"}).code, kExitUsage);
  EXPECT_EQ(run({"ablate", "--d_model", "abc"}).code, kExitUsage);
  EXPECT_EQ(run({"sweep", "--param", "d_model", "--values", "1"}).code, kExitUsage);
  EXPECT_EQ(run({"--help"}).code, kExitOk);
}

TEST(Cli, RuntimeErrors) {
  const CliResult r = run({"eval", "--checkpoint", "missing.dcl"});
  EXPECT_EQ(r.code, kExitRuntime);
  EXPECT_NE(r.err.find("missing.dcl"), std::string::npos);
  TempDir dir;
  {
    std::ofstream(dir.file("bad.cfg")) << "d_model 4\n";
  }
  EXPECT_EQ(run({"gen-data", "--out", dir.file("x.jsonl"), "--config", dir.file("bad.cfg")}).code, kExitUsage);
  {
    std::ofstream(dir.file("unknown.cfg")) << "colour = red\n";
  }
  EXPECT_EQ(run({"gen-data", "--out", dir.file("x.jsonl"), "--config", dir.file("unknown.cfg")}).code, kExitUsage);
}

TEST(Cli, EndToEnd) {
  TempDir dir;
  const std::string cfg = dir.file("tiny.cfg");
  {
    std::ofstream(cfg) << kTinyConfig;
  }
  const std::string data = dir.file("corpus.jsonl.gz");
  CliResult r = run({"gen-data", "--config", cfg, "--out", data});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(read_jsonl(data), generate_corpus(tiny_pipeline().corpus));

  r = run({"pretrain-backbone", "--config", cfg, "--out", dir.file("bb.dcl"), "--seed", "3"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_TRUE(load_checkpoint(dir.file("bb.dcl")).backbone_ready());

  r = run({"train", "--config", cfg, "--init", dir.file("bb.dcl"), "--stage", "stage1", "--data", data, "--out",
           dir.file("s1.dcl")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_NE(r.out.find("trainable"), std::string::npos);

  r = run({"train", "--config", cfg, "--init", dir.file("s1.dcl"), "--stage", "stage2", "--data", data, "--out",
           dir.file("s2.dcl"), "--metrics", dir.file("m.jsonl")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  std::ifstream metrics(dir.file("m.jsonl"));
  std::string line;
  ASSERT_TRUE(std::getline(metrics, line));
  EXPECT_EQ(nlohmann::json::parse(line)["stage"], "stage2");

  // Stage2 continued from stage1, so the domain prompts carried over.
  const DialClipModel s1 = load_checkpoint(dir.file("s1.dcl")), s2 = load_checkpoint(dir.file("s2.dcl"));
  const DialClipModel bb = load_checkpoint(dir.file("bb.dcl"));
  EXPECT_EQ(dt::snapshot(s2.group(ParamGroup::BackboneText)), dt::snapshot(bb.group(ParamGroup::BackboneText)));
  EXPECT_NE(dt::snapshot(s1.group(ParamGroup::DomainPrompts)), dt::snapshot(bb.group(ParamGroup::DomainPrompts)));

  r = run({"eval", "--checkpoint", dir.file("s2.dcl"), "--data", data, "--format", "csv", "--config", cfg});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(r.out.rfind("Queries,R@1,R@5,R@10,Sum\nall,", 0), 0u) << r.out;
  EXPECT_NE(r.out.find("\nTR,"), std::string::npos);
  EXPECT_NE(r.out.find("\nIR,"), std::string::npos);
}

TEST(Cli, AblateAndSweepTables) {
  TempDir dir;
  const std::string cfg = dir.file("tiny.cfg");
  {
    std::ofstream(cfg) << kTinyConfig;
  }
  CliResult r = run({"ablate", "--config", cfg, "--seeds", "0,1"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  for (const char* label : {"full", "-CPG", "-Domain", "-MoP"}) EXPECT_NE(r.out.find(label), std::string::npos);
  r = run({"sweep", "--config", cfg, "--param", "dom_len", "--values", "1,3", "--format", "csv"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(r.out.rfind("dom_len,R@1,R@5,R@10,Sum\n1,", 0), 0u) << r.out;
}
