#pragma once

#include "medvill/corpus.hpp"
#include "medvill/metrics.hpp"
#include "medvill/model.hpp"
#include "medvill/optim.hpp"
#include "medvill/pretrain.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

namespace medvill {

enum class Task { Cls, Retrieval, Vqa, Gen };

inline std::string_view to_string(Task t) {
  switch (t) {
    case Task::Cls: return "cls";
    case Task::Retrieval: return "retrieval";
    case Task::Vqa: return "vqa";
    case Task::Gen: return "gen";
  }
  return "?";
}

inline Task parse_task(std::string_view s) {
  if (s == "cls") return Task::Cls;
  if (s == "retrieval") return Task::Retrieval;
  if (s == "vqa") return Task::Vqa;
  if (s == "gen") return Task::Gen;
  throw UsageError("unknown task '" + std::string(s) + "' (expected cls, retrieval, vqa or gen)");
}

/// Mask used by the understanding tasks: Bi, or NonCrossing for models
/// pre-trained with it (their layout carries CLS_L).
inline MaskScheme understanding_scheme(const ModelConfig& cfg) {
  return cfg.language_cls ? MaskScheme::NonCrossing : MaskScheme::Bi;
}

/// Full visual grid of one image, detached from any tape.
template <typename T>
struct CachedVisual {
  Matrix<T> features;
  int grid_rows = 0;
  int grid_cols = 0;
  std::vector<int> position_ids;

  VisualFeatures<T> bind(Tape<T>& tape) const {
    VisualFeatures<T> v;
    v.features = tape.constant(features);
    v.grid_rows = grid_rows;
    v.grid_cols = grid_cols;
    v.position_ids = position_ids;
    return v;
  }
};

template <typename T>
CachedVisual<T> cache_visual(const ImageGrid& image, const ModelParams<T>& params, const ModelConfig& cfg) {
  Tape<T> tape(false);
  const VisualFeatures<T> v = encode_image(tape, image, params, cfg);
  return {v.features.value(), v.grid_rows, v.grid_cols, v.position_ids};
}

template <typename T>
struct JointPass {
  ContextualOutput<T> out;
  SequenceLayout layout;
};

template <typename T>
JointPass<T> run_joint(Tape<T>& tape, const VisualFeatures<T>& visual, const std::vector<int>& language,
                       const ModelParams<T>& params, const ModelConfig& cfg, MaskScheme scheme, bool train_mode,
                       Rng* rng = nullptr, bool keep_attention = false) {
  JointPass<T> pass;
  pass.layout = build_layout(visual.count(), static_cast<int>(language.size()), scheme);
  const AttentionMask<T> mask = build_mask<T>(pass.layout, scheme, static_cast<T>(cfg.neg));
  const JointInput<T> input = embed_joint(tape, visual, language, params, pass.layout);
  pass.out = forward(tape, input, mask, params, cfg, train_mode, rng, keep_attention);
  return pass;
}

namespace task_detail {

template <typename T>
Var<T> head(Tape<T>& tape, Var<T> x, const ModelParams<T>& params, const std::string& name) {
  return ad::affine(x, param(tape, params, name + ".weight"), param(tape, params, name + ".bias"));
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

template <typename T>
std::vector<double> softmax(const Matrix<T>& row) {
  const double m = static_cast<double>(row.maxCoeff());
  std::vector<double> p(static_cast<std::size_t>(row.cols()));
  double z = 0.0;
  for (Eigen::Index i = 0; i < row.cols(); ++i) z += p[static_cast<std::size_t>(i)] = std::exp(static_cast<double>(row(0, i)) - m);
  for (double& v : p) v /= z;
  return p;
}

}  // namespace task_detail

/// Fourteen sigmoid outputs in finding-index order.
template <typename T>
std::array<double, kFindingCount> classify(const CachedVisual<T>& visual, const std::vector<int>& report,
                                           const ModelParams<T>& params, const ModelConfig& cfg) {
  Tape<T> tape(false);
  const auto pass = run_joint(tape, visual.bind(tape), report, params, cfg, understanding_scheme(cfg), false);
  const Matrix<T> logits = task_detail::head(tape, ad::gather_rows(pass.out.hidden, {pass.layout.cls()}), params, "head.cls").value();
  std::array<double, kFindingCount> out{};
  for (int i = 0; i < kFindingCount; ++i) out[static_cast<std::size_t>(i)] = task_detail::sigmoid(static_cast<double>(logits(0, i)));
  return out;
}

/// Match probability of an (image, report) pair.
template <typename T>
double score_pair(const CachedVisual<T>& visual, const std::vector<int>& report, const ModelParams<T>& params,
                  const ModelConfig& cfg) {
  Tape<T> tape(false);
  const auto pass = run_joint(tape, visual.bind(tape), report, params, cfg, understanding_scheme(cfg), false);
  const Var<T> logit = task_detail::head(tape, pooled_cls(pass.out, pass.layout, cfg.language_cls), params, "head.match");
  return task_detail::sigmoid(static_cast<double>(logit.value()(0, 0)));
}

/// Distribution over the answer table.
template <typename T>
std::vector<double> answer(const CachedVisual<T>& visual, const std::vector<int>& question, const ModelParams<T>& params,
                           const ModelConfig& cfg) {
  Tape<T> tape(false);
  const auto pass = run_joint(tape, visual.bind(tape), question, params, cfg, understanding_scheme(cfg), false);
  return task_detail::softmax(
      task_detail::head(tape, ad::gather_rows(pass.out.hidden, {pass.layout.cls()}), params, "head.vqa").value());
}

/// Vocabulary logits at the MASK slot appended after `prefix`, under S2S.
/// This is the single step shared by decoding and perplexity.
template <typename T>
Matrix<T> next_token_logits(const CachedVisual<T>& visual, const std::vector<int>& prefix, const ModelParams<T>& params,
                            const ModelConfig& cfg) {
  Tape<T> tape(false);
  std::vector<int> language = prefix;
  language.push_back(token_id::kMask);
  const auto pass = run_joint(tape, visual.bind(tape), language, params, cfg, MaskScheme::S2S, false);
  const int slot = pass.layout.text_begin() + static_cast<int>(prefix.size());
  return mlm_logits(tape, ad::gather_rows(pass.out.hidden, {slot}), params, cfg).value();
}

enum class StopReason { Sep, Length };

inline std::string_view to_string(StopReason r) { return r == StopReason::Sep ? "sep" : "length"; }

struct Generation {
  std::vector<int> ids;
  StopReason stop = StopReason::Length;
  int steps = 0;
};

/// Greedy decoding: append MASK, run the S2S forward pass, take the argmax
/// at the MASK slot; stop on SEP or after `max_len` tokens.
template <typename T>
Generation generate(const CachedVisual<T>& visual, const ModelParams<T>& params, const ModelConfig& cfg, int max_len) {
  if (max_len < 1) throw ConfigError("generation max_len must be >= 1");
  Generation g;
  while (g.steps < max_len) {
    const Matrix<T> logits = next_token_logits(visual, g.ids, params, cfg);
    ++g.steps;
    Eigen::Index best = 0;
    logits.row(0).maxCoeff(&best);
    if (static_cast<int>(best) == token_id::kSep) {
      g.stop = StopReason::Sep;
      return g;
    }
    g.ids.push_back(static_cast<int>(best));
  }
  g.stop = StopReason::Length;
  return g;
}

struct SequenceNll {
  double nll = 0.0;
  long long tokens = 0;
};

/// Teacher-forced negative log-likelihood of `reference` followed by SEP,
/// one S2S pass per position.
template <typename T>
SequenceNll sequence_nll(const CachedVisual<T>& visual, const std::vector<int>& reference, const ModelParams<T>& params,
                         const ModelConfig& cfg) {
  SequenceNll out;
  std::vector<int> targets = reference;
  targets.push_back(token_id::kSep);
  std::vector<int> prefix;
  for (int target : targets) {
    const Matrix<T> logits = next_token_logits(visual, prefix, params, cfg);
    Tape<T> tape(false);
    out.nll += static_cast<double>(ad::softmax_cross_entropy_sum(tape.constant(logits), {target}).value()(0, 0));
    ++out.tokens;
    prefix.push_back(target);
  }
  return out;
}

/// Candidate order by descending score; equal scores keep ascending
/// candidate id.
inline std::vector<int> rank_candidates(const std::vector<double>& scores) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)]; });
  return order;
}

enum class Direction { ImageToReport, ReportToImage };

inline std::string_view to_string(Direction d) { return d == Direction::ImageToReport ? "i2r" : "r2i"; }

inline constexpr int kTrialCandidates = 100;

/// A query study and its candidate studies (candidate id = list position).
struct RetrievalTrial {
  Direction direction = Direction::ImageToReport;
  int query = 0;
  std::vector<int> candidates;
  std::vector<bool> positive;
};

/// Trials over a pool of studies. Each trial holds the true partner plus
/// distinct random others (at most kTrialCandidates in total), shuffled;
/// positives share the query's label set.
inline std::vector<RetrievalTrial> build_trials(const std::vector<LabelVector>& labels, Direction direction, int count,
                                                std::uint64_t seed) {
  const int n = static_cast<int>(labels.size());
  if (n < 2) throw DataError("retrieval needs at least 2 studies");
  const int queries = std::min(count, n);
  Rng pick(seed, std::string("trials:") + std::string(to_string(direction)));
  const std::vector<int> query_ids = pick.sample_without_replacement(n, queries);
  std::vector<RetrievalTrial> trials;
  for (int t = 0; t < queries; ++t) {
    Rng rng(seed, std::string("trial:") + std::string(to_string(direction)), static_cast<std::uint64_t>(t));
    RetrievalTrial trial;
    trial.direction = direction;
    trial.query = query_ids[static_cast<std::size_t>(t)];
    std::vector<int> others;
    for (int i = 0; i < n; ++i)
      if (i != trial.query) others.push_back(i);
    const int extra = std::min(kTrialCandidates - 1, n - 1);
    for (int j : rng.sample_without_replacement(static_cast<int>(others.size()), extra))
      trial.candidates.push_back(others[static_cast<std::size_t>(j)]);
    trial.candidates.push_back(trial.query);
    rng.shuffle(trial.candidates.begin(), trial.candidates.end());
    const std::string key = label_key(labels[static_cast<std::size_t>(trial.query)]);
    for (int c : trial.candidates) trial.positive.push_back(label_key(labels[static_cast<std::size_t>(c)]) == key);
    trials.push_back(std::move(trial));
  }
  return trials;
}

/// Ranks a trial's candidates with the given scores.
inline RankedTrial run_trial(const RetrievalTrial& trial, const std::vector<double>& scores) {
  if (scores.size() != trial.candidates.size()) throw DataError("trial score count does not match its candidates");
  RankedTrial out;
  for (int c : rank_candidates(scores)) out.positive.push_back(trial.positive[static_cast<std::size_t>(c)]);
  return out;
}

// ---------------------------------------------------------------------------
// Fine-tuning

struct FinetuneOptions {
  Task task = Task::Cls;
  AdamWConfig optim;
  int epochs = 1;
  int batch = 32;
  bool head_only = false;
  bool freeze_visual = false;
  double gen_mask_rate = 0.5;
  std::uint64_t seed = 0;
  /// Start the match head from the pre-trained IRM head.
  bool match_from_irm = false;

  static FinetuneOptions from(const RunConfig& run, Task task) {
    FinetuneOptions o;
    o.task = task;
    o.optim.lr = run.get_double("finetune.lr");
    o.optim.weight_decay = run.get_double("optim.weight_decay");
    o.epochs = static_cast<int>(run.get_int("finetune.epochs"));
    o.batch = static_cast<int>(run.get_int("train.batch"));
    o.head_only = run.get_bool("finetune.head_only");
    o.freeze_visual = run.get_bool("finetune.freeze_visual");
    o.gen_mask_rate = run.get_double("gen.mask_rate");
    o.seed = run.seed();
    return o;
  }
};

inline std::string head_prefix(Task task) {
  switch (task) {
    case Task::Cls: return "head.cls.";
    case Task::Retrieval: return "head.match.";
    case Task::Vqa: return "head.vqa.";
    case Task::Gen: return "head.mlm.";
  }
  return "head.";
}

/// Studies and VQA items a fine-tuning or evaluation run draws from.
struct TaskData {
  std::vector<const Study*> studies;
  std::vector<const VqaItem*> vqa;
  std::map<std::string, std::size_t> study_index;  // id -> position in `studies`

  static TaskData from(const Corpus& corpus, Split split) {
    TaskData d;
    d.studies = corpus.split(split);
    for (std::size_t i = 0; i < d.studies.size(); ++i) d.study_index[d.studies[i]->id] = i;
    for (const auto& q : corpus.vqa)
      if (d.study_index.count(q.study_id)) d.vqa.push_back(&q);
    return d;
  }
};

/// Generation fine-tuning targets over a block of `length` slots (report
/// tokens then the SEP stop target): each slot is masked with `rate`, and one
/// slot is forced when none was drawn.
inline std::vector<int> select_generation_targets(std::size_t length, double rate, Rng& rng) {
  std::vector<int> positions;
  for (std::size_t i = 0; i < length; ++i)
    if (rng.bernoulli(rate)) positions.push_back(static_cast<int>(i));
  if (positions.empty()) positions.push_back(static_cast<int>(rng.index(length)));
  return positions;
}

template <typename T>
struct FinetuneResult {
  ModelParams<T> params;
  MaskScheme mask = MaskScheme::Bi;
  std::vector<double> step_loss;
  std::vector<double> epoch_loss;
};

inline int answer_index(const std::vector<std::string>& answers, const std::string& a) {
  auto it = std::lower_bound(answers.begin(), answers.end(), a);
  return it != answers.end() && *it == a ? static_cast<int>(it - answers.begin()) : -1;
}

/// Trains the task head (and, unless restricted, the whole stack) with the
/// task loss. Understanding tasks run under the understanding mask,
/// generation always under S2S.
template <typename T>
FinetuneResult<T> finetune(const TaskData& data, const Vocabulary& vocab, const std::vector<std::string>& answers,
                           const ModelConfig& cfg, ModelParams<T> params, const FinetuneOptions& opt) {
  if (opt.epochs < 0 || opt.batch < 1) throw ConfigError("fine-tuning needs epochs >= 0 and batch >= 1");
  if (data.studies.empty()) throw DataError("fine-tuning split holds no studies");
  if (opt.task == Task::Vqa) {
    if (data.vqa.empty()) throw DataError("task vqa needs VQA items for the training split");
    if (static_cast<int>(answers.size()) != cfg.answer_count) {
      throw DataError("answer table has " + std::to_string(answers.size()) + " entries, checkpoint head expects " +
                      std::to_string(cfg.answer_count));
    }
  }
  if (opt.match_from_irm) {
    params.at("head.match.weight") = params.at("head.irm.weight");
    params.at("head.match.bias") = params.at("head.irm.bias");
  }
  FinetuneResult<T> result;
  result.mask = opt.task == Task::Gen ? MaskScheme::S2S : understanding_scheme(cfg);
  const std::string prefix = head_prefix(opt.task);
  const auto trainable = [&](const std::string& name) {
    if (opt.head_only) return name.rfind(prefix, 0) == 0;
    if (opt.freeze_visual && name.rfind("vis.", 0) == 0) return false;
    return true;
  };

  std::vector<std::vector<int>> report_tokens;
  for (const auto* s : data.studies) report_tokens.push_back(report_ids(s->report, vocab, cfg.max_len));
  std::optional<IrmSampler> sampler;
  if (opt.task == Task::Retrieval) {
    sampler.emplace(IrmSampler::from(data.studies));
    if (!sampler->well_posed()) throw DataError("no valid negative: the training split holds a single label set");
  }
  const std::size_t n = opt.task == Task::Vqa ? data.vqa.size() : data.studies.size();

  AdamW<T> optimizer(opt.optim);
  int step = 0;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng(opt.seed, "finetune:order", static_cast<std::uint64_t>(epoch)).shuffle(order.begin(), order.end());
    double epoch_sum = 0.0;
    for (std::size_t begin = 0; begin < n; begin += static_cast<std::size_t>(opt.batch), ++step) {
      const std::size_t end = std::min(n, begin + static_cast<std::size_t>(opt.batch));
      const double batch_size = static_cast<double>(end - begin);
      std::map<std::string, Matrix<T>> grads;
      double loss_sum = 0.0;
      for (std::size_t b = begin; b < end; ++b) {
        Rng rng(opt.seed, "finetune:example", static_cast<std::uint64_t>(step) * 100003u + b);
        Tape<T> tape;
        Var<T> loss;
        const std::size_t item = order[b];
        if (opt.task == Task::Cls) {
          const Study& s = *data.studies[item];
          const auto pass = run_joint(tape, encode_image(tape, s.image, params, cfg), report_tokens[item], params, cfg,
                                      result.mask, true, &rng);
          const Var<T> logits = task_detail::head(tape, ad::gather_rows(pass.out.hidden, {pass.layout.cls()}), params, "head.cls");
          Matrix<T> y(1, kFindingCount);
          for (int i = 0; i < kFindingCount; ++i) y(0, i) = static_cast<T>(s.labels[static_cast<std::size_t>(i)]);
          loss = ad::scale(ad::bce_with_logits_sum(logits, y), static_cast<T>(1.0 / kFindingCount));
        } else if (opt.task == Task::Retrieval) {
          const IrmExample pair = sampler->sample(item, rng);
          const auto pass = run_joint(tape, encode_image(tape, data.studies[pair.image]->image, params, cfg),
                                      report_tokens[pair.report], params, cfg, result.mask, true, &rng);
          const Var<T> logit = task_detail::head(tape, pooled_cls(pass.out, pass.layout, cfg.language_cls), params, "head.match");
          Matrix<T> y(1, 1);
          y(0, 0) = static_cast<T>(pair.label);
          loss = ad::bce_with_logits_sum(logit, y);
        } else if (opt.task == Task::Vqa) {
          const VqaItem& q = *data.vqa[item];
          const int target = answer_index(answers, q.answer);
          if (target < 0) continue;
          const Study& s = *data.studies[data.study_index.at(q.study_id)];
          const auto pass = run_joint(tape, encode_image(tape, s.image, params, cfg),
                                      report_ids(q.question, vocab, cfg.max_len), params, cfg, result.mask, true, &rng);
          const Var<T> logits = task_detail::head(tape, ad::gather_rows(pass.out.hidden, {pass.layout.cls()}), params, "head.vqa");
          loss = ad::softmax_cross_entropy_sum(logits, {target});
        } else {
          std::vector<int> ids = report_tokens[item];
          if (static_cast<int>(ids.size()) >= cfg.max_len) ids.resize(static_cast<std::size_t>(cfg.max_len - 1));
          ids.push_back(token_id::kSep);
          const std::vector<int> positions = select_generation_targets(ids.size(), opt.gen_mask_rate, rng);
          std::vector<int> language = ids, originals;
          for (int p : positions) {
            originals.push_back(ids[static_cast<std::size_t>(p)]);
            language[static_cast<std::size_t>(p)] = token_id::kMask;
          }
          const auto pass = run_joint(tape, encode_image(tape, data.studies[item]->image, params, cfg), language, params,
                                      cfg, MaskScheme::S2S, true, &rng);
          std::vector<int> rows;
          for (int p : positions) rows.push_back(pass.layout.text_begin() + p);
          const Var<T> logits = mlm_logits(tape, ad::gather_rows(pass.out.hidden, rows), params, cfg);
          loss = ad::scale(ad::softmax_cross_entropy_sum(logits, originals), static_cast<T>(1.0 / static_cast<double>(rows.size())));
        }
        const double value = static_cast<double>(loss.value()(0, 0));
        if (!std::isfinite(value)) throw NumericError("fine-tuning diverged at step " + std::to_string(step));
        loss_sum += value;
        tape.backward(ad::scale(loss, static_cast<T>(1.0 / batch_size)));
        tape.add_parameter_gradients(grads);
      }
      result.step_loss.push_back(loss_sum / batch_size);
      epoch_sum += loss_sum;
      optimizer.step(params, grads, trainable);
      if (!params.all_finite()) throw NumericError("non-finite parameters after fine-tuning step " + std::to_string(step));
    }
    result.epoch_loss.push_back(epoch_sum / static_cast<double>(n));
  }
  result.params = std::move(params);
  return result;
}

}  // namespace medvill
