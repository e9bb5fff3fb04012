#include "support.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace medvill;

namespace {

struct Toy {
  Corpus corpus;
  Vocabulary vocab;
  std::vector<std::string> answers;
  std::vector<const Study*> train;
};

Toy make_toy(int n, std::uint64_t seed) {
  Toy t;
  t.corpus = gen_corpus({n, 0, 0}, seed, FindingSpec::standard());
  t.vocab = build_vocabulary(t.corpus);
  t.answers = build_answer_table(t.corpus);
  t.train = t.corpus.split(Split::Train);
  return t;
}

RunConfig toy_run(const std::string& scheme, std::uint64_t seed) {
  RunConfig run;
  run.set("model.layers", "2");
  run.set("model.heads", "2");
  run.set("model.hidden", "32");
  run.set("model.ff", "64");
  run.set("vis.mid_channels", "8");
  run.set("vis.channels", "16");
  run.set("text.max_len", "40");
  run.set("pretrain.scheme", scheme);
  run.set("train.epochs", "3");
  run.set("optim.lr", "1e-3");
  run.set("seed", std::to_string(seed));
  return run;
}

TokenSequence long_sequence(int n, int vocab, Rng& rng) {
  std::vector<int> ids;
  for (int i = 0; i < n; ++i) ids.push_back(rng.uniform_int(token_id::kReservedCount, vocab - 1));
  return pad_tokens(ids, n);
}

}  // namespace

TEST(Mlm, ZeroRateLeavesTokensUntouched) {
  Rng rng(1);
  const TokenSequence t = long_sequence(50, 30, rng);
  MlmPolicy p;
  p.select_rate = 0.0;
  const auto c = corrupt_mlm(t, p, 30, rng);
  EXPECT_EQ(c.tokens, t);
  EXPECT_TRUE(c.positions.empty());
}

TEST(Mlm, SelectionAndActionRates) {
  Rng data(2);
  const TokenSequence t = long_sequence(100000, 60, data);
  Rng rng(3, "mlm");
  const auto c = corrupt_mlm(t, MlmPolicy{}, 60, rng);
  const double n = static_cast<double>(c.positions.size());
  EXPECT_NEAR(n / 100000.0, 0.15, 0.01);
  int mask = 0, random = 0, keep = 0;
  for (std::size_t i = 0; i < c.positions.size(); ++i) {
    const int pos = c.positions[i];
    const int now = c.tokens.ids[static_cast<std::size_t>(pos)];
    EXPECT_EQ(c.originals[i], t.ids[static_cast<std::size_t>(pos)]);
    switch (c.actions[i]) {
      case MlmAction::Mask:
        ++mask;
        EXPECT_EQ(now, token_id::kMask);
        break;
      case MlmAction::Random:
        ++random;
        EXPECT_GE(now, token_id::kReservedCount);
        EXPECT_LT(now, 60);
        break;
      case MlmAction::Keep:
        ++keep;
        EXPECT_EQ(now, c.originals[i]);
        break;
    }
  }
  EXPECT_NEAR(mask / n, 0.8, 0.02);
  EXPECT_NEAR(random / n, 0.1, 0.02);
  EXPECT_NEAR(keep / n, 0.1, 0.02);
}

TEST(Mlm, ReservedAndPaddingNeverSelected) {
  std::vector<int> ids(200, token_id::kSep);
  const TokenSequence t = pad_tokens(ids, 300);
  MlmPolicy p;
  p.select_rate = 0.99;
  Rng rng(4);
  EXPECT_TRUE(corrupt_mlm(t, p, 30, rng).positions.empty());
}

TEST(Mlm, SeedDeterminism) {
  Rng data(5);
  const TokenSequence t = long_sequence(500, 40, data);
  Rng a(6), b(6);
  const auto ca = corrupt_mlm(t, MlmPolicy{}, 40, a);
  const auto cb = corrupt_mlm(t, MlmPolicy{}, 40, b);
  EXPECT_EQ(ca.tokens, cb.tokens);
  EXPECT_EQ(ca.positions, cb.positions);
}

TEST(Mlm, PolicyValidation) {
  MlmPolicy p;
  p.keep_prob = 0.2;
  EXPECT_THROW(p.validate(), ConfigError);
  RunConfig run;
  run.set("mlm.mask_prob", "0.7");
  run.set("mlm.rand_prob", "0.2");
  EXPECT_NEAR(MlmPolicy::from(run).keep_prob, 0.1, 1e-12);
}

TEST(Mlm, LossValues) {
  EXPECT_NEAR(loss_mlm<double>(Matrix<double>::Zero(3, 100), {1, 2, 3}).value, std::log(100.0), 1e-12);
  Matrix<double> logits(2, 3);
  logits << 1.0, 2.0, 0.5, -1.0, 0.0, 3.0;
  const double lse0 = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(0.5));
  const double lse1 = std::log(std::exp(-1.0) + std::exp(0.0) + std::exp(3.0));
  const double expected = ((lse0 - 2.0) + (lse1 - (-1.0))) / 2.0;
  EXPECT_NEAR(loss_mlm<double>(logits, {1, 0}).value, expected, 1e-12);
  Matrix<double> sharp = Matrix<double>::Zero(1, 5);
  sharp(0, 2) = 50.0;
  EXPECT_LT(loss_mlm<double>(sharp, {2}).value, 1e-20);
  const MlmLoss none = loss_mlm<double>(Matrix<double>::Zero(0, 5), {});
  EXPECT_TRUE(none.empty);
  EXPECT_EQ(none.value, 0.0);
}

TEST(Mlm, NonTargetLogitsGetNoGradient) {
  Tape<double> tape;
  const Var<double> logits = tape.parameter("z", Matrix<double>::Random(4, 6));
  tape.backward(ad::softmax_cross_entropy_sum(ad::gather_rows(logits, {1, 3}), {0, 5}));
  const Matrix<double> g = tape.parameter_gradients().at("z");
  EXPECT_TRUE(g.row(0).isZero());
  EXPECT_TRUE(g.row(2).isZero());
  EXPECT_FALSE(g.row(1).isZero());
}

TEST(Irm, LossValues) {
  EXPECT_NEAR(loss_irm(0.0, 1), std::log(2.0), 1e-15);
  EXPECT_NEAR(loss_irm(0.0, 0), std::log(2.0), 1e-15);
  EXPECT_LT(loss_irm(20.0, 1), 1e-8);
  const double sig = 1.0 / (1.0 + std::exp(3.0));
  EXPECT_NEAR(loss_irm(-3.0, 0), -std::log(1.0 - sig), 1e-12);
}

TEST(Irm, SingleLabelSetRejected) {
  const IrmSampler s(std::vector<LabelVector>(5, LabelVector{}));
  EXPECT_FALSE(s.well_posed());
  Rng rng(1);
  try {
    s.negative_for(0, rng);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("no valid negative"), std::string::npos);
  }
}

TEST(Irm, TwoStudiesPairWithEachOther) {
  LabelVector b{};
  b[4] = 1;
  const IrmSampler s({LabelVector{}, b});
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    EXPECT_EQ(s.negative_for(0, rng), 1u);
    EXPECT_EQ(s.negative_for(1, rng), 0u);
  }
}

TEST(Irm, BalancedAndNeverSharesLabelSet) {
  const Toy t = make_toy(300, 3);
  const IrmSampler s = IrmSampler::from(t.train);
  Rng rng(4, "irm");
  int negatives = 0;
  for (int i = 0; i < 10000; ++i) {
    const IrmExample e = s.sample(rng);
    if (e.label == 1) {
      EXPECT_EQ(e.image, e.report);
      continue;
    }
    ++negatives;
    EXPECT_NE(label_key(s.labels(e.image)), label_key(s.labels(e.report)));
  }
  EXPECT_NEAR(negatives / 10000.0, 0.5, 0.02);
}

TEST(Irm, NegativesUniformOverEligibleStudies) {
  LabelVector a{}, b{};
  a[0] = 1;
  b[1] = 1;
  // Study 0 has label set A; studies 1..3 have B, study 4 has A.
  const IrmSampler s({a, b, b, b, a});
  Rng rng(5);
  std::array<int, 5> hits{};
  for (int i = 0; i < 30000; ++i) ++hits[s.negative_for(0, rng)];
  EXPECT_EQ(hits[0], 0);
  EXPECT_EQ(hits[4], 0);
  for (int j = 1; j <= 3; ++j) EXPECT_NEAR(hits[static_cast<std::size_t>(j)] / 30000.0, 1.0 / 3.0, 0.015);
}

TEST(Optimizer, ZeroLearningRateKeepsParameters) {
  ModelParams<double> p;
  p.tensors["a.weight"] = Matrix<double>::Random(2, 2);
  const ModelParams<double> before = p;
  AdamW<double> opt({0.0, 0.9, 0.999, 1e-8, 0.01});
  opt.step(p, {{"a.weight", Matrix<double>::Ones(2, 2)}});
  EXPECT_EQ(p.at("a.weight"), before.at("a.weight"));
}

TEST(Optimizer, FirstStepMovesBySignedLearningRate) {
  ModelParams<double> p;
  p.tensors["b.bias"] = Matrix<double>::Zero(1, 3);
  AdamW<double> opt({0.01, 0.9, 0.999, 1e-12, 0.5});
  Matrix<double> g(1, 3);
  g << 2.0, -0.5, 0.0;
  opt.step(p, {{"b.bias", g}});
  EXPECT_NEAR(p.at("b.bias")(0, 0), -0.01, 1e-9);
  EXPECT_NEAR(p.at("b.bias")(0, 1), 0.01, 1e-9);
  EXPECT_EQ(p.at("b.bias")(0, 2), 0.0);
}

TEST(Optimizer, DecayOnlyOnWeights) {
  EXPECT_TRUE(AdamW<double>::decays("layer0.attn.query.weight"));
  EXPECT_FALSE(AdamW<double>::decays("layer0.attn.query.bias"));
  EXPECT_FALSE(AdamW<double>::decays("embed.token"));
  ModelParams<double> p;
  p.tensors["w.weight"] = Matrix<double>::Ones(1, 1);
  AdamW<double> opt({0.1, 0.9, 0.999, 1e-8, 0.5});
  opt.step(p, {{"w.weight", Matrix<double>::Zero(1, 1)}});
  EXPECT_NEAR(p.at("w.weight")(0, 0), 0.95, 1e-12);
}

TEST(Pretrain, ZeroLearningRateKeepsInitialisation) {
  const Toy t = make_toy(40, 1);
  RunConfig run = toy_run("bar", 1);
  run.set("optim.lr", "0");
  run.set("train.epochs", "1");
  const ModelConfig cfg = model_config_from(run, t.vocab.size(), static_cast<int>(t.answers.size()));
  const auto init = init_params<float>(cfg, 1);
  const auto res = pretrain<float>(t.train, t.vocab, cfg, init, PretrainOptions::from(run));
  for (const auto& [name, m] : init.tensors) EXPECT_EQ(res.params.at(name), m) << name;
}

TEST(Pretrain, EpochMeanLossDecreasesOnToyRuns) {
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    const Toy t = make_toy(200, seed);
    const RunConfig run = toy_run("bar", seed);
    const ModelConfig cfg = model_config_from(run, t.vocab.size(), static_cast<int>(t.answers.size()));
    const auto res = pretrain<float>(t.train, t.vocab, cfg, init_params<float>(cfg, seed), PretrainOptions::from(run));
    const auto means = epoch_mean_loss(res.log);
    ASSERT_EQ(means.size(), 3u);
    EXPECT_LT(means[1], means[0]) << "seed " << seed;
    EXPECT_LT(means[2], means[1]) << "seed " << seed;
    EXPECT_EQ(res.log.size(), 3u * 7u);
  }
}

TEST(Pretrain, SeedDeterministicInDoublePrecision) {
  const Toy t = make_toy(48, 5);
  RunConfig run = toy_run("bi_s2s", 5);
  run.set("train.epochs", "1");
  run.set("model.precision", "64");
  const ModelConfig cfg = model_config_from(run, t.vocab.size(), static_cast<int>(t.answers.size()));
  const auto a = pretrain<double>(t.train, t.vocab, cfg, init_params<double>(cfg, 5), PretrainOptions::from(run));
  const auto b = pretrain<double>(t.train, t.vocab, cfg, init_params<double>(cfg, 5), PretrainOptions::from(run));
  Checkpoint<double> ca{{run, t.vocab.size(), static_cast<int>(t.answers.size()), "pretrain"}, a.params};
  Checkpoint<double> cb{{run, t.vocab.size(), static_cast<int>(t.answers.size()), "pretrain"}, b.params};
  EXPECT_EQ(encode_checkpoint(ca), encode_checkpoint(cb));
}

TEST(Pretrain, MixedScheduleRatio) {
  PretrainOptions opt;
  opt.schedule = SchemeSchedule::parse("bi_s2s", 0.75);
  int s2s = 0, bi = 0;
  for (int step = 0; step < 20000; ++step) {
    Rng rng(0, "pretrain:step", static_cast<std::uint64_t>(step));
    const MaskScheme m = opt.schedule.draw(rng);
    ASSERT_TRUE(m == MaskScheme::S2S || m == MaskScheme::Bi);
    (m == MaskScheme::S2S ? s2s : bi) += 1;
  }
  EXPECT_NEAR(static_cast<double>(s2s) / bi, 3.0, 0.15);
  EXPECT_THROW(SchemeSchedule::parse("causal", 0.75), ConfigError);
}

TEST(Pretrain, LoggedSchemesFollowSchedule) {
  const Toy t = make_toy(64, 6);
  RunConfig run = toy_run("bi_s2s", 6);
  run.set("train.epochs", "1");
  run.set("train.batch", "2");
  const ModelConfig cfg = model_config_from(run, t.vocab.size(), static_cast<int>(t.answers.size()));
  auto opt = PretrainOptions::from(run);
  opt.verify_negatives = true;
  const auto res = pretrain<float>(t.train, t.vocab, cfg, init_params<float>(cfg, 6), opt);
  int s2s = 0;
  for (const auto& r : res.log) s2s += r.scheme == MaskScheme::S2S;
  EXPECT_EQ(res.log.size(), 32u);
  EXPECT_GT(s2s, 16);
}

TEST(Pretrain, DivergenceNamesTheStep) {
  const Toy t = make_toy(40, 7);
  RunConfig run = toy_run("bar", 7);
  run.set("train.epochs", "1");
  const ModelConfig cfg = model_config_from(run, t.vocab.size(), static_cast<int>(t.answers.size()));
  auto init = init_params<float>(cfg, 7);
  init.at("head.irm.bias")(0, 0) = std::numeric_limits<float>::quiet_NaN();
  try {
    pretrain<float>(t.train, t.vocab, cfg, init, PretrainOptions::from(run));
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos) << e.what();
  }
}

TEST(Pretrain, RejectsSingleLabelSet) {
  Toy t = make_toy(20, 8);
  std::vector<const Study*> same;
  for (const auto* s : t.train)
    if (positive_count(s->labels) == 0) same.push_back(s);
  ASSERT_GE(same.size(), 2u);
  const RunConfig run = toy_run("bar", 8);
  const ModelConfig cfg = model_config_from(run, t.vocab.size(), 2);
  EXPECT_THROW(pretrain<float>(same, t.vocab, cfg, init_params<float>(cfg, 8), PretrainOptions::from(run)), DataError);
}

TEST(Pretrain, LossCsvHasOneRowPerStep) {
  std::vector<LossRecord> log{{0, 0, MaskScheme::BAR, 2.5, 0.7}, {1, 0, MaskScheme::S2S, 2.0, 0.6}};
  std::ostringstream out;
  write_loss_csv(out, log);
  EXPECT_EQ(out.str(), "step,epoch,scheme,mlm_loss,irm_loss\n0,0,bar,2.5,0.7\n1,0,s2s,2,0.6\n");
  const auto means = epoch_mean_loss(log);
  ASSERT_EQ(means.size(), 1u);
  EXPECT_NEAR(means[0], (3.2 + 2.6) / 2.0, 1e-12);
}
