#include "support.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace medvill;
using medvill::testing::random_image;
using medvill::testing::random_tokens;
using medvill::testing::small_config;

namespace {

struct Toy {
  Corpus corpus;
  Vocabulary vocab;
  std::vector<std::string> answers;
  TaskData train;
  ModelConfig cfg;
};

RunConfig tiny_run() {
  RunConfig run;
  run.set("model.layers", "2");
  run.set("model.heads", "2");
  run.set("model.hidden", "32");
  run.set("model.ff", "64");
  run.set("model.dropout", "0");
  run.set("model.precision", "64");
  run.set("vis.mid_channels", "8");
  run.set("vis.channels", "16");
  run.set("text.max_len", "40");
  return run;
}

Toy make_toy(int n, std::uint64_t seed, const RunConfig& run = tiny_run()) {
  Toy t;
  t.corpus = gen_corpus({n, 0, 0}, seed, FindingSpec::standard());
  t.vocab = build_vocabulary(t.corpus);
  t.answers = build_answer_table(t.corpus);
  t.train = TaskData::from(t.corpus, Split::Train);
  t.cfg = model_config_from(run, t.vocab.size(), static_cast<int>(t.answers.size()));
  return t;
}

FinetuneOptions options(Task task, double lr, int epochs, int batch) {
  FinetuneOptions o;
  o.task = task;
  o.optim.lr = lr;
  o.optim.weight_decay = 0.0;
  o.epochs = epochs;
  o.batch = batch;
  return o;
}

bool same_params(const ModelParams<double>& a, const ModelParams<double>& b, const std::string& prefix = "") {
  for (const auto& [name, m] : a.tensors)
    if (name.rfind(prefix, 0) == 0 && m != b.at(name)) return false;
  return true;
}

}  // namespace

TEST(Heads, ZeroClassificationHeadGivesOneHalf) {
  const auto cfg = small_config();
  auto params = init_params<double>(cfg, 1);
  params.at("head.cls.weight").setZero();
  params.at("head.cls.bias").setZero();
  Rng rng(2);
  const auto p = classify(cache_visual(random_image(rng), params, cfg), random_tokens(rng, 5, cfg.vocab_size), params, cfg);
  for (double v : p) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Heads, ZeroMatchHeadGivesOneHalf) {
  for (auto scheme : {MaskScheme::BAR, MaskScheme::NonCrossing}) {
    const auto cfg = small_config(scheme);
    auto params = init_params<double>(cfg, 3);
    params.at("head.match.weight").setZero();
    params.at("head.match.bias").setZero();
    Rng rng(4);
    EXPECT_DOUBLE_EQ(score_pair(cache_visual(random_image(rng), params, cfg), random_tokens(rng, 4, cfg.vocab_size), params, cfg), 0.5);
  }
}

TEST(Heads, ZeroVqaHeadIsUniform) {
  const auto cfg = small_config(MaskScheme::BAR, 12, 2);
  auto params = init_params<double>(cfg, 5);
  params.at("head.vqa.weight").setZero();
  params.at("head.vqa.bias").setZero();
  Rng rng(6);
  const auto p = answer(cache_visual(random_image(rng), params, cfg), random_tokens(rng, 3, cfg.vocab_size), params, cfg);
  ASSERT_EQ(p.size(), 2u);
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Generation, StopsOnSepOrLength) {
  const auto cfg = small_config();
  auto params = init_params<double>(cfg, 7);
  Rng rng(8);
  const auto visual = cache_visual(random_image(rng), params, cfg);

  params.at("head.mlm.decoder.bias")(0, token_id::kSep) = 1e3;
  const Generation sep = generate(visual, params, cfg, 5);
  EXPECT_EQ(sep.stop, StopReason::Sep);
  EXPECT_TRUE(sep.ids.empty());
  EXPECT_EQ(sep.steps, 1);

  params.at("head.mlm.decoder.bias")(0, token_id::kSep) = 0.0;
  params.at("head.mlm.decoder.bias")(0, 7) = 1e3;
  const Generation one = generate(visual, params, cfg, 1);
  EXPECT_EQ(one.stop, StopReason::Length);
  EXPECT_EQ(one.ids, std::vector<int>{7});
  const Generation full = generate(visual, params, cfg, cfg.max_len - 1);
  EXPECT_EQ(full.ids, std::vector<int>(static_cast<std::size_t>(cfg.max_len - 1), 7));
  EXPECT_THROW(generate(visual, params, cfg, 0), ConfigError);
}

TEST(Generation, DecodingStepMatchesFullSequencePass) {
  // Under S2S a language row never sees later positions, so the logits at a
  // MASK slot are the same whether or not tokens follow it.
  const auto cfg = small_config();
  const auto params = init_params<double>(cfg, 9);
  Rng rng(10);
  const auto visual = cache_visual(random_image(rng), params, cfg);
  const std::vector<int> prefix = random_tokens(rng, 3, cfg.vocab_size);
  const Matrix<double> step = next_token_logits(visual, prefix, params, cfg);

  std::vector<int> language = prefix;
  language.push_back(token_id::kMask);
  for (int t : random_tokens(rng, 2, cfg.vocab_size)) language.push_back(t);
  Tape<double> tape(false);
  const auto pass = run_joint(tape, visual.bind(tape), language, params, cfg, MaskScheme::S2S, false);
  const int slot = pass.layout.text_begin() + static_cast<int>(prefix.size());
  const Matrix<double> full = mlm_logits(tape, ad::gather_rows(pass.out.hidden, {slot}), params, cfg).value();
  EXPECT_LT((step - full).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Generation, SequenceNllSumsPerStepLogLikelihood) {
  const auto cfg = small_config();
  const auto params = init_params<double>(cfg, 11);
  Rng rng(12);
  const auto visual = cache_visual(random_image(rng), params, cfg);
  const std::vector<int> ref = random_tokens(rng, 4, cfg.vocab_size);
  const SequenceNll got = sequence_nll(visual, ref, params, cfg);
  EXPECT_EQ(got.tokens, 5);
  std::vector<int> targets = ref, prefix;
  targets.push_back(token_id::kSep);
  double want = 0.0;
  for (int t : targets) {
    const Matrix<double> z = next_token_logits(visual, prefix, params, cfg);
    const double m = z.maxCoeff();
    want -= z(0, t) - m - std::log((z.array() - m).exp().sum());
    prefix.push_back(t);
  }
  EXPECT_NEAR(got.nll, want, 1e-10);
}

TEST(Retrieval, TrialsHoldOneHundredDistinctCandidates) {
  const Corpus c = gen_corpus({2, 0, 150}, 13, FindingSpec::standard());
  std::vector<LabelVector> labels;
  for (const auto* s : c.split(Split::Test)) labels.push_back(s->labels);
  for (Direction d : {Direction::ImageToReport, Direction::ReportToImage}) {
    const auto trials = build_trials(labels, d, 20, 3);
    ASSERT_EQ(trials.size(), 20u);
    std::set<int> queries;
    for (const auto& t : trials) {
      queries.insert(t.query);
      EXPECT_EQ(t.candidates.size(), static_cast<std::size_t>(kTrialCandidates));
      EXPECT_EQ(std::set<int>(t.candidates.begin(), t.candidates.end()).size(), t.candidates.size());
      EXPECT_NE(std::find(t.candidates.begin(), t.candidates.end(), t.query), t.candidates.end());
      for (std::size_t i = 0; i < t.candidates.size(); ++i)
        EXPECT_EQ(t.positive[i], label_key(labels[static_cast<std::size_t>(t.candidates[i])]) ==
                                     label_key(labels[static_cast<std::size_t>(t.query)]));
    }
    EXPECT_EQ(queries.size(), 20u);
    const auto again = build_trials(labels, d, 20, 3);
    for (std::size_t i = 0; i < trials.size(); ++i) EXPECT_EQ(trials[i].candidates, again[i].candidates);
  }
}

TEST(Retrieval, SmallPoolUsesEveryStudy) {
  std::vector<LabelVector> labels(10);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i][i % kFindingCount] = 1;
  const auto trials = build_trials(labels, Direction::ImageToReport, 100, 1);
  EXPECT_EQ(trials.size(), 10u);
  for (const auto& t : trials) EXPECT_EQ(t.candidates.size(), 10u);
  EXPECT_THROW(build_trials({labels[0]}, Direction::ImageToReport, 1, 1), DataError);
}

TEST(Retrieval, RunTrialOrdersPositivesByScore) {
  RetrievalTrial t;
  t.candidates = {4, 8, 2};
  t.positive = {false, true, false};
  EXPECT_EQ(run_trial(t, {0.2, 0.9, 0.5}).positive, (std::vector<bool>{true, false, false}));
  EXPECT_EQ(run_trial(t, {0.7, 0.1, 0.5}).positive, (std::vector<bool>{false, false, true}));
  EXPECT_THROW(run_trial(t, {0.1}), DataError);
}

TEST(Finetune, ZeroLearningRateLeavesParametersUnchanged) {
  Toy t = make_toy(8, 1);
  const auto params = init_params<double>(t.cfg, 2);
  for (Task task : {Task::Cls, Task::Retrieval, Task::Vqa, Task::Gen}) {
    const auto r = finetune(t.train, t.vocab, t.answers, t.cfg, params, options(task, 0.0, 1, 4));
    EXPECT_TRUE(same_params(r.params, params)) << to_string(task);
    EXPECT_FALSE(r.step_loss.empty());
  }
}

TEST(Finetune, MaskFollowsTask) {
  Toy t = make_toy(4, 3);
  const auto params = init_params<double>(t.cfg, 4);
  EXPECT_EQ(finetune(t.train, t.vocab, t.answers, t.cfg, params, options(Task::Gen, 0.0, 1, 4)).mask, MaskScheme::S2S);
  EXPECT_EQ(finetune(t.train, t.vocab, t.answers, t.cfg, params, options(Task::Cls, 0.0, 1, 4)).mask, MaskScheme::Bi);

  RunConfig run = tiny_run();
  run.set("pretrain.scheme", "noncross");
  Toy nc = make_toy(4, 3, run);
  const auto nc_params = init_params<double>(nc.cfg, 4);
  EXPECT_EQ(finetune(nc.train, nc.vocab, nc.answers, nc.cfg, nc_params, options(Task::Cls, 0.0, 1, 4)).mask,
            MaskScheme::NonCrossing);
}

TEST(Finetune, HeadOnlyTouchesOnlyTheTaskHead) {
  Toy t = make_toy(8, 5);
  const auto params = init_params<double>(t.cfg, 6);
  auto opt = options(Task::Cls, 1e-2, 1, 4);
  opt.head_only = true;
  const auto r = finetune(t.train, t.vocab, t.answers, t.cfg, params, opt);
  for (const auto& [name, m] : params.tensors) {
    if (name.rfind("head.cls.", 0) == 0) {
      EXPECT_NE(r.params.at(name), m) << name;
    } else {
      EXPECT_EQ(r.params.at(name), m) << name;
    }
  }
}

TEST(Finetune, FrozenVisualEncoderStaysFixed) {
  Toy t = make_toy(8, 5);
  const auto params = init_params<double>(t.cfg, 6);
  auto opt = options(Task::Cls, 1e-2, 1, 4);
  opt.freeze_visual = true;
  const auto r = finetune(t.train, t.vocab, t.answers, t.cfg, params, opt);
  EXPECT_TRUE(same_params(r.params, params, "vis."));
  EXPECT_FALSE(same_params(r.params, params, "layer0."));
}

TEST(Finetune, MatchHeadCanStartFromIrmHead) {
  Toy t = make_toy(8, 7);
  auto params = init_params<double>(t.cfg, 8);
  params.at("head.irm.bias")(0, 0) = 0.25;
  auto opt = options(Task::Retrieval, 0.0, 1, 4);
  opt.match_from_irm = true;
  const auto r = finetune(t.train, t.vocab, t.answers, t.cfg, params, opt);
  EXPECT_EQ(r.params.at("head.match.weight"), params.at("head.irm.weight"));
  EXPECT_EQ(r.params.at("head.match.bias")(0, 0), 0.25);
}

TEST(Finetune, RejectsBadInputs) {
  Toy t = make_toy(4, 9);
  const auto params = init_params<double>(t.cfg, 1);
  EXPECT_THROW(finetune(t.train, t.vocab, t.answers, t.cfg, params, options(Task::Cls, 1e-3, 1, 0)), ConfigError);
  TaskData empty;
  EXPECT_THROW(finetune(empty, t.vocab, t.answers, t.cfg, params, options(Task::Cls, 1e-3, 1, 4)), DataError);
  const std::vector<std::string> wrong{"yes"};
  EXPECT_THROW(finetune(t.train, t.vocab, wrong, t.cfg, params, options(Task::Vqa, 1e-3, 1, 4)), DataError);
}

TEST(Finetune, ClassificationMemorisesSixteenStudies) {
  Toy t = make_toy(16, 11);
  const auto params = init_params<double>(t.cfg, 12);
  const auto r = finetune(t.train, t.vocab, t.answers, t.cfg, params, options(Task::Cls, 3e-3, 100, 4));
  EXPECT_LT(r.epoch_loss.back(), r.epoch_loss.front());
  const auto out = std::make_shared<ClsOutputs>(predict_cls(t.train, t.vocab, t.cfg, r.params));
  std::vector<int> pred, truth;
  for (std::size_t i = 0; i < out->truths.size(); ++i)
    for (int j = 0; j < kFindingCount; ++j) {
      pred.push_back(out->probabilities[i][static_cast<std::size_t>(j)] >= 0.5);
      truth.push_back(out->truths[i][static_cast<std::size_t>(j)]);
    }
  EXPECT_DOUBLE_EQ(micro_f1(pred, truth), 1.0);
}

TEST(Finetune, GenerationMemorisesEightReports) {
  Toy t = make_toy(8, 13);
  const auto params = init_params<double>(t.cfg, 14);
  auto opt = options(Task::Gen, 3e-3, 250, 4);
  const auto r = finetune(t.train, t.vocab, t.answers, t.cfg, params, opt);
  EXPECT_LT(perplexity(t.train, t.vocab, t.cfg, r.params), 1.1);
}

TEST(Checkpoint, RoundTripIsExact) {
  Toy t = make_toy(4, 15);
  Checkpoint<double> ckpt{{tiny_run(), t.vocab.size(), static_cast<int>(t.answers.size()), "pretrain"},
                          init_params<double>(t.cfg, 16)};
  const std::string bytes = encode_checkpoint(ckpt);
  const auto back = decode_checkpoint<double>(bytes);
  EXPECT_EQ(back.meta.stage, "pretrain");
  EXPECT_EQ(back.meta.vocab_size, t.vocab.size());
  EXPECT_EQ(back.meta.run.serialize(), ckpt.meta.run.serialize());
  EXPECT_TRUE(same_params(back.params, ckpt.params));
  EXPECT_EQ(encode_checkpoint(back), bytes);
}

TEST(Checkpoint, CorruptInputsRejected) {
  Toy t = make_toy(4, 17);
  Checkpoint<double> ckpt{{tiny_run(), t.vocab.size(), static_cast<int>(t.answers.size()), "init"},
                          init_params<double>(t.cfg, 18)};
  const std::string bytes = encode_checkpoint(ckpt);
  EXPECT_THROW(decode_checkpoint<double>("XXXX" + bytes.substr(4)), DataError);
  EXPECT_THROW(decode_checkpoint<double>(bytes.substr(0, bytes.size() / 2)), DataError);
  EXPECT_THROW(decode_checkpoint<double>(bytes + "x"), DataError);
  for (std::size_t cut : {std::size_t{6}, std::size_t{40}, bytes.size() - 1}) {
    try {
      decode_checkpoint<double>(bytes.substr(0, cut));
      ADD_FAILURE() << "cut " << cut;
    } catch (const DataError& e) {
      EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos) << e.what();
    }
  }
}

TEST(Checkpoint, ShapeMismatchNamesTheTensor) {
  Toy t = make_toy(4, 19);
  Checkpoint<double> ckpt{{tiny_run(), t.vocab.size(), static_cast<int>(t.answers.size()), "init"},
                          init_params<double>(t.cfg, 20)};
  ckpt.params.at("layer1.ffn.input.bias") = Matrix<double>::Zero(1, 3);
  try {
    decode_checkpoint<double>(encode_checkpoint(ckpt));
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("layer1.ffn.input.bias"), std::string::npos) << e.what();
  }
  ckpt.params.tensors.erase("layer1.ffn.input.bias");
  EXPECT_THROW(decode_checkpoint<double>(encode_checkpoint(ckpt)), DataError);
}

TEST(Checkpoint, SinglePrecisionPayloadLoadsAsDouble) {
  Toy t = make_toy(4, 21);
  RunConfig run = tiny_run();
  run.set("model.precision", "32");
  Checkpoint<float> ckpt{{run, t.vocab.size(), static_cast<int>(t.answers.size()), "init"},
                         init_params<double>(t.cfg, 22).cast<float>()};
  const auto back = decode_checkpoint<double>(encode_checkpoint(ckpt));
  for (const auto& [name, m] : ckpt.params.tensors) EXPECT_EQ(back.params.at(name), m.cast<double>()) << name;
}

TEST(Config, SerializeParseRoundTrip) {
  RunConfig run = tiny_run();
  run.set("seed", "42");
  run.set("pretrain.scheme", "bi_s2s");
  const RunConfig back = RunConfig::parse(run.serialize());
  EXPECT_EQ(back.serialize(), run.serialize());
  EXPECT_EQ(back.seed(), 42u);
}

TEST(Config, ErrorsAreConfigErrors) {
  EXPECT_THROW(RunConfig::parse("model.colour = red\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("model.layers\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("model.layers = zero\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("model.heads = 3\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("pretrain.scheme = causal\n"), ConfigError);
  EXPECT_THROW(RunConfig().get("nope"), ConfigError);
}

TEST(Config, CommentsAndBlankLinesIgnored) {
  const RunConfig run = RunConfig::parse("# header\n\nmodel.layers = 3   # inline\n");
  EXPECT_EQ(run.get_int("model.layers"), 3);
  EXPECT_EQ(run.get_int("model.heads"), 4);
}

TEST(Config, ReferenceScaleIsExpressible) {
  RunConfig run;
  run.set("model.layers", "12");
  run.set("model.heads", "12");
  run.set("model.hidden", "768");
  run.set("model.ff", "3072");
  run.set("image.size", "512");
  run.set("vis.sample_k", "180");
  run.set("text.max_len", "253");
  run.set("train.epochs", "50");
  run.set("optim.lr", "1e-5");
  run.set("train.batch", "16");
  run.validate();
  const ModelConfig m = model_config_from(run, 30522, 100);
  EXPECT_EQ(m.head_dim(), 64);
  EXPECT_EQ(m.max_len, 253);
}
