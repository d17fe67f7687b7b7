#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include <json.hpp>

#include "dialclip/training.hpp"
#include "test_util.hpp"

using namespace dialclip;
using dialclip::testing::tiny_corpus;
using dialclip::testing::tiny_model;
namespace dt = dialclip::testing;

namespace {

Tensor vec(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor::from({n}, std::move(v));
}

// Single-row contrastive loss written out directly from its definition.
double oracle_loss(double pos, const std::vector<double>& negs) {
  double denom = std::exp(pos);
  for (double n : negs) denom += std::exp(n);
  return -std::log(std::exp(pos) / denom);
}

TrainConfig quick_cfg(std::size_t steps, double lr = 1e-2) {
  TrainConfig c;
  c.total_steps = steps;
  c.base_lr = lr;
  c.batch_size = 8;
  return c;
}

}  // namespace

TEST(Similarity, Examples) {
  EXPECT_EQ(similarity(vec({1, 0}), vec({0, 1})), 0.0);
  EXPECT_EQ(similarity(vec({1, 2}), vec({3, 4})), 11.0);
  const Tensor a = vec({0.3, -1.2, 2.0}), b = vec({1.5, 0.25, -0.75});
  EXPECT_EQ(similarity(a, b), similarity(b, a));
  EXPECT_THROW(similarity(vec({1, 2}), vec({1, 2, 3})), ShapeError);
}

TEST(ContrastiveLoss, Examples) {
  // s+ = 1 against one negative at 0.
  EXPECT_NEAR(contrastive_loss(vec({1}), vec({1}), {vec({0})}).item(), std::log1p(std::exp(-1.0)), 1e-12);
  EXPECT_NEAR(contrastive_loss(vec({1}), vec({1}), {vec({0})}).item(), 0.31326, 5e-6);
  // Equal scores with N negatives.
  for (std::size_t n : {1u, 3u, 9u}) {
    std::vector<Tensor> negs(n, vec({2.0, 1.0}));
    EXPECT_NEAR(contrastive_loss(vec({0.5, 1.0}), vec({2.0, 1.0}), negs).item(), std::log(n + 1.0), 1e-12);
  }
  EXPECT_EQ(contrastive_loss(vec({3, 4}), vec({1, 2}), {}).item(), 0.0);
}

TEST(ContrastiveLoss, MatchesOracleAndIsNonNegative) {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = Tensor::randn({4}, rng, 1.0), yp = Tensor::randn({4}, rng, 1.0);
    std::vector<Tensor> negs;
    std::vector<double> neg_scores;
    for (std::size_t j = 0; j < 1 + rng.below(6); ++j) {
      negs.push_back(Tensor::randn({4}, rng, 1.0));
      neg_scores.push_back(similarity(x, negs.back()));
    }
    const double l = contrastive_loss(x, yp, negs).item();
    EXPECT_NEAR(l, oracle_loss(similarity(x, yp), neg_scores), 1e-10);
    EXPECT_GE(l, 0.0);
  }
}

TEST(ContrastiveLoss, RowShiftInvariance) {
  Rng rng(22);
  const Tensor s = Tensor::randn({5, 5}, rng, 2.0);
  std::vector<double> shifted(s.values().begin(), s.values().end());
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 5; ++c) shifted[r * 5 + c] += 10.0 * static_cast<double>(r) - 7.0;
  const std::vector<std::size_t> t{0, 1, 2, 3, 4};
  EXPECT_NEAR(ops::softmax_cross_entropy(s, t).item(),
              ops::softmax_cross_entropy(Tensor::from({5, 5}, shifted), t).item(), 1e-9);
}

TEST(ContrastiveLoss, NonFiniteScores) {
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_THROW(contrastive_loss(vec({inf}), vec({1}), {vec({0})}), NumericError);
}

TEST(InBatchLoss, IdenticalEmbeddingsGiveLogN) {
  for (std::size_t n : {2u, 4u, 7u, 32u}) {
    std::vector<double> v(n * 3, 0.0);
    for (std::size_t i = 0; i < n; ++i) v[i * 3] = 0.7, v[i * 3 + 1] = -1.1, v[i * 3 + 2] = 2.5;
    const Tensor e = Tensor::from({n, 3}, v);
    EXPECT_NEAR(in_batch_loss(e, e).item(), std::log(static_cast<double>(n)), 1e-9);
  }
  const Tensor one = Tensor::from({1, 3}, {4.0, -2.0, 9.0});
  EXPECT_EQ(in_batch_loss(one, one).item(), 0.0);
}

TEST(LinearLr, Schedule) {
  TrainConfig c;
  c.base_lr = 0.4;
  c.total_steps = 10;
  EXPECT_EQ(linear_lr(0, c), 0.4);
  EXPECT_EQ(linear_lr(10, c), 0.0);
  EXPECT_NEAR(linear_lr(5, c), 0.2, 1e-15);
  EXPECT_THROW(linear_lr(11, c), ContractError);
}

TEST(AdamW, DecayOnlyStep) {
  Tensor w = Tensor::from({2, 2}, {1.0, -2.0, 0.5, 3.0});
  w.set_requires_grad(true);
  TrainConfig c;
  c.weight_decay = 0.1;
  AdamW opt({{"w", w, true}}, c);
  backward(ops::scale(ops::sum(w), 0.0));  // reached by backward, gradient zero
  opt.step(0.01);
  const std::vector<double> expect{1.0, -2.0, 0.5, 3.0};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(w.values()[i], expect[i] * (1.0 - 0.01 * 0.1), 1e-15);
}

TEST(AdamW, FirstStepMovesBySignedLr) {
  Tensor b = Tensor::from({3}, {0.0, 1.0, -1.0});
  b.set_requires_grad(true);
  TrainConfig c;
  AdamW opt({{"b", b, false}}, c);
  const Tensor g = Tensor::from({3}, {2.0, -0.5, 1e-3});
  backward(ops::dot(b, g));
  opt.step(0.1);
  const std::vector<double> start{0.0, 1.0, -1.0}, sign{1.0, -1.0, 1.0};
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(b.values()[i], start[i] - 0.1 * sign[i], 1e-5 * 0.1 + 1e-6);
}

TEST(AdamW, FrozenAndUnreachedParametersStayBitIdentical) {
  Tensor used = Tensor::from({2}, {1.0, 2.0}), unused = Tensor::from({2}, {3.0, 4.0});
  Tensor frozen = Tensor::from({2}, {5.0, 6.0});
  used.set_requires_grad(true);
  unused.set_requires_grad(true);
  TrainConfig c;
  c.weight_decay = 0.5;
  AdamW opt({{"used", used, true}, {"unused", unused, true}, {"frozen", frozen, true}}, c);
  for (int i = 0; i < 5; ++i) {
    opt.zero_grad();
    backward(ops::sum(ops::mul(ops::add(used, frozen), used)));
    opt.step(0.1);
  }
  EXPECT_NE(used.values()[0], 1.0);
  EXPECT_EQ(unused.values()[0], 3.0);
  EXPECT_EQ(unused.values()[1], 4.0);
  EXPECT_EQ(frozen.values()[0], 5.0);
  EXPECT_EQ(frozen.values()[1], 6.0);
}

TEST(AdamW, StateMismatchIsContractError) {
  Tensor w = Tensor::from({2}, {1.0, 2.0});
  w.set_requires_grad(true);
  AdamW opt({{"w", w, true}}, TrainConfig{});
  opt.first_moments()[0].resize(1);
  backward(ops::sum(w));
  EXPECT_THROW(opt.step(0.1), ContractError);
}

// --- train_step on the model ---------------------------------------------------

class TrainStepTest : public ::testing::Test {
 protected:
  void SetUp() override {
    corpus_ = generate_corpus(tiny_corpus());
    for (auto rt : kAllRetrievalTypes)
      for (const auto& d : corpus_)
        if (d.retrieval_type() == rt) by_type_[rt.index()].push_back(&d);
  }
  std::vector<const Dialog*> batch(RetrievalType rt, std::size_t n) const {
    const auto& all = by_type_[rt.index()];
    return {all.begin(), all.begin() + static_cast<std::ptrdiff_t>(std::min(n, all.size()))};
  }
  std::vector<Dialog> corpus_;
  std::array<std::vector<const Dialog*>, 4> by_type_;
};

TEST_F(TrainStepTest, MixedBatchIsContractError) {
  DialClipModel model(tiny_model());
  model.set_stage(Stage::Stage2);
  AdamW opt(model.trainable(), quick_cfg(10));
  auto mixed = batch(kAllRetrievalTypes[0], 2);
  mixed.push_back(by_type_[3].front());
  EXPECT_THROW(train_step(mixed, model, opt, 0.01), ContractError);
  EXPECT_THROW(train_step({}, model, opt, 0.01), ContractError);
}

TEST_F(TrainStepTest, BatchOfOneMovesOnlyByDecay) {
  DialClipModel model(tiny_model());
  model.set_stage(Stage::Stage2);
  TrainConfig c = quick_cfg(10);
  c.weight_decay = 0.05;
  AdamW opt(model.trainable(), c);
  const auto before = dt::snapshot(model.parameters());
  const ParamList params = model.parameters();
  const double loss = train_step(batch(kAllRetrievalTypes[1], 1), model, opt, 0.01);
  EXPECT_EQ(loss, 0.0);
  const auto after = dt::snapshot(params);
  std::size_t k = 0;
  for (const auto& p : params) {
    const bool decays = p.tensor.requires_grad() && p.tensor.touched() && p.decay;
    for (std::size_t i = 0; i < p.tensor.numel(); ++i, ++k) {
      if (decays)
        EXPECT_NEAR(after[k], before[k] * (1.0 - 0.01 * 0.05), 1e-15) << p.name;
      else
        EXPECT_EQ(after[k], before[k]) << p.name;
    }
  }
}

TEST_F(TrainStepTest, InitialLossNearLogBatch) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    DialClipModel model(tiny_model(seed));
    model.set_stage(Stage::Stage2);
    AdamW opt(model.trainable(), quick_cfg(10));
    for (auto rt : kAllRetrievalTypes) {
      const auto b = batch(rt, 8);
      ASSERT_EQ(b.size(), 8u);
      EXPECT_NEAR(train_step(b, model, opt, 0.0), std::log(8.0), 0.5) << rt.name();
    }
  }
}

TEST_F(TrainStepTest, OverfitsFixedBatch) {
  DialClipModel model(tiny_model());
  model.set_stage(Stage::Stage2);
  const TrainConfig c = quick_cfg(200, 1e-2);
  AdamW opt(model.trainable(), c);
  const auto b = batch(kAllRetrievalTypes[2], 8);
  double loss = 0.0;
  for (std::size_t t = 0; t < c.total_steps; ++t) loss = train_step(b, model, opt, linear_lr(t, c));
  NoGradGuard g;
  std::vector<Tensor> xs, ys;
  for (const auto* d : b) {
    xs.push_back(model.encode_query(*d));
    ys.push_back(model.encode_candidate(d->response, d->retrieval_type()));
  }
  const double final_loss = in_batch_loss(ops::concat_rows(xs), ops::concat_rows(ys)).item();
  EXPECT_LT(final_loss, 0.1) << "last step loss " << loss;
}

// --- stages -------------------------------------------------------------------------

TEST(RunStage, Preconditions) {
  const auto corpus = generate_corpus(tiny_corpus());
  DialClipModel model(tiny_model());
  EXPECT_THROW(run_stage(Stage::Stage1, corpus, {}, model, quick_cfg(2)), StateError);
  model.mark_backbone_ready();
  EXPECT_THROW(run_stage(Stage::Backbone, corpus, {}, model, quick_cfg(2)), ContractError);
  EXPECT_THROW(run_stage(Stage::Stage1, {}, {}, model, quick_cfg(2)), InputError);
  TrainConfig bad = quick_cfg(0);
  EXPECT_THROW(run_stage(Stage::Stage1, corpus, {}, model, bad), ConfigError);
}

TEST(RunStage, BackboneThenStagesRespectGroups) {
  const CorpusSpec spec = tiny_corpus();
  const auto corpus = generate_corpus(spec);
  const auto train = filter_split(corpus, Split::Train);
  DialClipModel model(tiny_model());

  const auto bb_before = dt::snapshot(model.group(ParamGroup::BackboneText));
  const auto prompts_before = dt::snapshot(model.group(ParamGroup::DomainPrompts));
  pretrain_backbone(generate_pairs(spec, 64), {}, model, quick_cfg(5));
  EXPECT_TRUE(model.backbone_ready());
  EXPECT_TRUE(model.trainable().empty());
  EXPECT_NE(dt::snapshot(model.group(ParamGroup::BackboneText)), bb_before);
  EXPECT_EQ(dt::snapshot(model.group(ParamGroup::DomainPrompts)), prompts_before);

  const auto backbone = dt::snapshot(model.group(ParamGroup::BackboneText));
  const auto image_backbone = dt::snapshot(model.group(ParamGroup::BackboneImage));
  const auto cpg = dt::snapshot(model.group(ParamGroup::Cpg));
  const StageLog s1 = run_stage(Stage::Stage1, train, {}, model, quick_cfg(5));
  EXPECT_EQ(dt::snapshot(model.group(ParamGroup::Cpg)), cpg);
  EXPECT_NE(dt::snapshot(model.group(ParamGroup::DomainPrompts)), prompts_before);
  EXPECT_EQ(s1.losses.size(), 5u);

  const StageLog s2 = run_stage(Stage::Stage2, train, {}, model, quick_cfg(5));
  EXPECT_NE(dt::snapshot(model.group(ParamGroup::Cpg)), cpg);
  EXPECT_EQ(dt::snapshot(model.group(ParamGroup::BackboneText)), backbone);
  EXPECT_EQ(dt::snapshot(model.group(ParamGroup::BackboneImage)), image_backbone);
  EXPECT_GT(s2.trainable_fraction, 0.0);
  EXPECT_LT(s2.trainable_fraction, 1.0);
  EXPECT_EQ(s2.trainable_values + count_values(model.group(ParamGroup::BackboneText)) +
                count_values(model.group(ParamGroup::BackboneImage)),
            s2.total_values);
}

TEST(MetricsLog, RecordShape) {
  std::ostringstream os;
  MetricsLog log(&os);
  RecallAt r;
  r.r1 = 0.25;
  r.r5 = 0.5;
  r.r10 = 0.75;
  log.record(Stage::Stage2, 40, "test", r);
  const std::string line = os.str();
  ASSERT_EQ(line.back(), '\n');
  const auto j = nlohmann::json::parse(line);
  EXPECT_EQ(j.size(), 7u);
  EXPECT_EQ(j["stage"], "stage2");
  EXPECT_EQ(j["step"], 40);
  EXPECT_EQ(j["split"], "test");
  EXPECT_EQ(j["r1"], 0.25);
  EXPECT_EQ(j["r5"], 0.5);
  EXPECT_EQ(j["r10"], 0.75);
  EXPECT_EQ(j["sum"], 150.0);
  EXPECT_EQ(line.substr(0, 10), "{\"stage\":\"");
}
