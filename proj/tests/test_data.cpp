#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "dialclip/data.hpp"
#include "test_util.hpp"

using namespace dialclip;
using dialclip::testing::tiny_corpus;

namespace {

CorpusSpec ambiguous_spec() {
  CorpusSpec s;
  s.n_topics = 8;
  s.dialogs_per_topic = 60;
  s.min_turns = 3;
  s.max_turns = 5;
  s.ambiguity_rate = 1.0;
  s.seed = 11;
  return s;
}

// Topic guess for one utterance: majority topic token, or nearest topic mean.
// Returns the guess and whether the utterance carried any evidence.
std::pair<std::size_t, bool> guess(const Utterance& u, const TopicModel& tm, std::vector<double>& votes) {
  const auto& spec = tm.spec();
  if (u.modality == Modality::Text) {
    bool any = false;
    for (auto t : *u.tokens)
      if (tm.is_topic_token(t)) {
        votes[tm.topic_of_token(t)] += 1.0;
        any = true;
      }
    return {0, any};
  }
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < spec.n_topics; ++k) {
    double dist = 0.0;
    for (std::size_t i = 0; i < u.patches->size(); ++i) {
      const double e = (*u.patches)[i] - tm.mean(k)[i];
      dist += e * e;
    }
    if (dist < best_d) best_d = dist, best = k;
  }
  votes[best] += 1.0;
  return {best, true};
}

std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("dialclip_test_" + name)).string();
}

}  // namespace

TEST(Corpus, DeterministicInSeed) {
  const auto a = generate_corpus(tiny_corpus(3));
  const auto b = generate_corpus(tiny_corpus(3));
  const auto c = generate_corpus(tiny_corpus(4));
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST(Corpus, ShapeAndSplits) {
  CorpusSpec s = tiny_corpus();
  s.dev_fraction = 0.1;
  s.test_fraction = 0.2;
  const auto corpus = generate_corpus(s);
  ASSERT_EQ(corpus.size(), s.n_topics * s.dialogs_per_topic);
  std::map<Split, std::size_t> counts;
  std::set<std::string> ids;
  for (const auto& d : corpus) {
    ++counts[d.split];
    ids.insert(d.id);
    EXPECT_GE(d.turns.size(), s.min_turns);
    EXPECT_LE(d.turns.size(), s.max_turns);
    EXPECT_EQ(d.turns.back().role, Role::User);
    EXPECT_EQ(d.response.role, Role::System);
    EXPECT_LT(d.topic_id, s.n_topics);
    for (const auto& u : d.turns) u.validate(s.patch_values());
    d.response.validate(s.patch_values());
  }
  EXPECT_EQ(ids.size(), corpus.size());
  EXPECT_EQ(counts[Split::Test], 32u);
  EXPECT_EQ(counts[Split::Dev], 16u);
  EXPECT_EQ(counts[Split::Train], 112u);
}

TEST(Corpus, ResponsesShareTheDialogTopic) {
  const CorpusSpec s = tiny_corpus();
  const TopicModel tm(s);
  for (const auto& d : generate_corpus(s)) {
    std::vector<double> votes(s.n_topics, 0.0);
    const auto [img_guess, evidence] = guess(d.response, tm, votes);
    ASSERT_TRUE(evidence);
    // Every topic token in a response comes from the dialog's own block.
    if (d.response.modality == Modality::Text) {
      for (std::size_t k = 0; k < s.n_topics; ++k)
        if (k != d.topic_id) EXPECT_EQ(votes[k], 0.0);
    } else {
      EXPECT_EQ(img_guess, d.topic_id);
    }
  }
}

TEST(Corpus, RejectsBadSpecs) {
  CorpusSpec s = tiny_corpus();
  s.n_topics = 1;
  EXPECT_THROW(generate_corpus(s), ConfigError);
  s = tiny_corpus();
  s.ambiguity_rate = 1.5;
  EXPECT_THROW(generate_corpus(s), ConfigError);
  s = tiny_corpus();
  s.tokens_per_topic = s.vocab_size;
  EXPECT_THROW(generate_corpus(s), ConfigError);
}

// With every input ambiguous the last utterance alone says nothing about the
// topic, while the context still does.
TEST(Corpus, AmbiguousInputsNeedTheContext) {
  const CorpusSpec s = ambiguous_spec();
  const TopicModel tm(s);
  const auto corpus = generate_corpus(s);
  Rng tiebreak(99);
  std::size_t last_hits = 0, ctx_hits = 0;
  for (const auto& d : corpus) {
    std::vector<double> votes(s.n_topics, 0.0);
    const auto [g, evidence] = guess(d.current_input(), tm, votes);
    if (d.current_input().modality == Modality::Text) EXPECT_FALSE(evidence);
    const std::size_t last = evidence ? argmax(votes) : tiebreak.below(static_cast<std::uint32_t>(s.n_topics));
    last_hits += last == d.topic_id;

    std::vector<double> ctx_votes(s.n_topics, 0.0);
    for (const auto& u : d.context()) guess(u, tm, ctx_votes);
    ctx_hits += argmax(ctx_votes) == d.topic_id;
  }
  const double n = static_cast<double>(corpus.size());
  EXPECT_NEAR(last_hits / n, 1.0 / static_cast<double>(s.n_topics), 0.06);
  EXPECT_GT(ctx_hits / n, 0.9);
}

TEST(Pairs, StreamsDifferAndTopicsMatch) {
  CorpusSpec s = tiny_corpus();
  const TopicModel tm(s);
  const auto a = generate_pairs(s, 50, 0), b = generate_pairs(s, 50, 0), c = generate_pairs(s, 50, 1);
  EXPECT_EQ(a.front().tokens, b.front().tokens);
  EXPECT_NE(a.front().patches, c.front().patches);
  for (const auto& p : a) {
    std::vector<double> votes(s.n_topics, 0.0);
    EXPECT_EQ(guess(Utterance::image(Role::System, p.patches), tm, votes).first, p.topic);
    for (auto t : p.tokens) EXPECT_TRUE(tm.is_topic_token(t));  // clean captions
  }
}

TEST(Jsonl, RoundTripPlainAndGzip) {
  CorpusSpec s = tiny_corpus();
  s.dev_fraction = 0.1;
  const auto corpus = generate_corpus(s);
  for (const std::string name : {"rt.jsonl", "rt.jsonl.gz"}) {
    const std::string path = temp_path(name);
    write_jsonl(corpus, path);
    EXPECT_EQ(read_jsonl(path), corpus) << name;
    std::filesystem::remove(path);
  }
}

TEST(Jsonl, LineFormat) {
  const auto corpus = generate_corpus(tiny_corpus());
  const auto j = nlohmann::json::parse(dialog_to_json_line(corpus.front()));
  for (const char* key : {"id", "split", "turns", "response", "topic_id"}) EXPECT_TRUE(j.contains(key)) << key;
  const auto& u = j["turns"][0];
  EXPECT_TRUE(u.contains("role"));
  EXPECT_TRUE(u.contains("modality"));
  EXPECT_NE(u.contains("tokens"), u.contains("patches"));
}

TEST(Jsonl, MissingFieldNamesFieldAndLine) {
  const auto corpus = generate_corpus(tiny_corpus());
  auto j = nlohmann::json::parse(dialog_to_json_line(corpus[1]));
  j.erase("response");
  std::istringstream is(dialog_to_json_line(corpus[0]) + "\n\n" + j.dump() + "\n");
  try {
    parse_jsonl(is);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
    EXPECT_NE(std::string(e.what()).find("response"), std::string::npos) << e.what();
  }
}

TEST(Jsonl, MalformedInputs) {
  auto parse = [](const std::string& text) {
    std::istringstream is(text);
    return parse_jsonl(is);
  };
  EXPECT_TRUE(parse("").empty());
  EXPECT_TRUE(parse("\n  \n").empty());
  EXPECT_THROW(parse("{not json"), ParseError);
  EXPECT_THROW(parse("[1,2]"), ParseError);
  const std::string bad_turn =
      R"({"id":"x","split":"train","topic_id":0,"turns":[{"role":"user","modality":"text","tokens":[1],"patches":[0.5]}],)"
      R"("response":{"role":"system","modality":"text","tokens":[2]}})";
  EXPECT_THROW(parse(bad_turn), ParseError);
  EXPECT_THROW(read_jsonl(temp_path("does_not_exist.jsonl")), InputError);
}

TEST(BatchSampler, HomogeneousBatchesPartitionAnEpoch) {
  const auto corpus = generate_corpus(tiny_corpus());
  BatchSampler sampler(corpus, 7, Rng(5));
  const auto epoch = sampler.epoch();
  std::vector<int> seen(corpus.size(), 0);
  for (const auto& b : epoch) {
    ASSERT_FALSE(b.empty());
    EXPECT_LE(b.size(), 7u);
    for (auto i : b) {
      ++seen[i];
      EXPECT_EQ(corpus[i].retrieval_type(), corpus[b.front()].retrieval_type());
    }
  }
  for (int s : seen) EXPECT_EQ(s, 1);
}

TEST(BatchSampler, SeededOrderAndErrors) {
  const auto corpus = generate_corpus(tiny_corpus());
  BatchSampler a(corpus, 4, Rng(8)), b(corpus, 4, Rng(8)), c(corpus, 4, Rng(9));
  EXPECT_EQ(a.epoch(), b.epoch());
  EXPECT_NE(BatchSampler(corpus, 4, Rng(8)).epoch(), c.epoch());
  EXPECT_THROW(BatchSampler(corpus, 0, Rng(1)), ContractError);
  const std::vector<Dialog> empty;
  BatchSampler e(empty, 4, Rng(1));
  EXPECT_THROW(e.next(), InputError);
}

TEST(BatchSampler, NextCyclesThroughEpochs) {
  const auto corpus = generate_corpus(tiny_corpus());
  BatchSampler sampler(corpus, 16, Rng(2));
  const std::size_t per_epoch = BatchSampler(corpus, 16, Rng(2)).epoch().size();
  std::size_t total = 0;
  for (std::size_t i = 0; i < 2 * per_epoch; ++i) total += sampler.next().size();
  EXPECT_EQ(total, 2 * corpus.size());
}
