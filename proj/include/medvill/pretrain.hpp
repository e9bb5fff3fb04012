#pragma once

#include "medvill/corpus.hpp"
#include "medvill/model.hpp"
#include "medvill/optim.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace medvill {

/// Token corruption policy. Selected tokens become MASK, a random
/// non-reserved token, or stay unchanged.
struct MlmPolicy {
  double select_rate = 0.15;
  double mask_prob = 0.8;
  double random_prob = 0.1;
  double keep_prob = 0.1;

  void validate() const {
    if (!(select_rate > 0.0 && select_rate < 1.0)) throw ConfigError("MLM select rate must lie in (0, 1)");
    if (mask_prob < 0.0 || random_prob < 0.0 || keep_prob < 0.0 ||
        std::abs(mask_prob + random_prob + keep_prob - 1.0) > 1e-9) {
      throw ConfigError("MLM mask/random/keep probabilities must be non-negative and sum to 1");
    }
  }

  static MlmPolicy from(const RunConfig& run) {
    MlmPolicy p;
    p.select_rate = run.get_double("mlm.rate");
    p.mask_prob = run.get_double("mlm.mask_prob");
    p.random_prob = run.get_double("mlm.rand_prob");
    p.keep_prob = 1.0 - p.mask_prob - p.random_prob;
    p.validate();
    return p;
  }
};

enum class MlmAction { Mask, Random, Keep };

struct MlmCorruption {
  TokenSequence tokens;
  std::vector<int> positions;  // indices into tokens.ids
  std::vector<int> originals;
  std::vector<MlmAction> actions;
};

/// Selects each non-reserved token independently with `select_rate`. A
/// select_rate of exactly 0 is accepted here and yields no targets.
inline MlmCorruption corrupt_mlm(const TokenSequence& tokens, const MlmPolicy& policy, int vocab_size, Rng& rng) {
  MlmCorruption out;
  out.tokens = tokens;
  for (int i = 0; i < tokens.true_length; ++i) {
    const int id = tokens.ids[static_cast<std::size_t>(i)];
    if (Vocabulary::reserved(id)) continue;
    if (!rng.bernoulli(policy.select_rate)) continue;
    const double u = rng.uniform();
    MlmAction action = MlmAction::Keep;
    int replacement = id;
    if (u < policy.mask_prob) {
      action = MlmAction::Mask;
      replacement = token_id::kMask;
    } else if (u < policy.mask_prob + policy.random_prob) {
      if (vocab_size <= token_id::kReservedCount) throw DataError("random replacement needs a non-reserved vocabulary");
      action = MlmAction::Random;
      replacement = rng.uniform_int(token_id::kReservedCount, vocab_size - 1);
    }
    out.tokens.ids[static_cast<std::size_t>(i)] = replacement;
    out.positions.push_back(i);
    out.originals.push_back(id);
    out.actions.push_back(action);
  }
  return out;
}

struct MlmLoss {
  double value = 0.0;
  /// Set when there were no targets; value is then 0.
  bool empty = true;
};

/// Mean negative log-likelihood of the original tokens.
template <typename T>
MlmLoss loss_mlm(const Matrix<T>& logits, const std::vector<int>& targets) {
  if (targets.empty()) return {};
  Tape<T> tape(false);
  const T total = ad::softmax_cross_entropy_sum(tape.constant(logits), targets).value()(0, 0);
  return {static_cast<double>(total) / static_cast<double>(targets.size()), false};
}

/// Binary cross-entropy on sigmoid(logit), logit form.
inline double loss_irm(double logit, int y) {
  return std::max(logit, 0.0) - logit * y + std::log1p(std::exp(-std::abs(logit)));
}

struct IrmExample {
  std::size_t image = 0;   // index of the study providing the image
  std::size_t report = 0;  // index of the study providing the report
  int label = 1;
};

/// Pairs images with their own report (y = 1) or with a report drawn
/// uniformly from studies whose positive-label set differs (y = 0).
class IrmSampler {
 public:
  explicit IrmSampler(std::vector<LabelVector> labels) : labels_(std::move(labels)) {
    for (const auto& l : labels_) ++key_counts_[label_key(l)];
  }

  static IrmSampler from(const std::vector<const Study*>& studies) {
    std::vector<LabelVector> labels;
    for (const auto* s : studies) labels.push_back(s->labels);
    return IrmSampler(std::move(labels));
  }

  std::size_t size() const { return labels_.size(); }
  bool well_posed() const { return key_counts_.size() >= 2; }

  IrmExample sample(std::size_t anchor, Rng& rng) const {
    if (anchor >= labels_.size()) throw DataError("IRM anchor out of range");
    if (rng.bernoulli(0.5)) return {anchor, anchor, 1};
    return {anchor, negative_for(anchor, rng), 0};
  }

  IrmExample sample(Rng& rng) const {
    if (labels_.empty()) throw DataError("no valid negative: empty dataset");
    return sample(rng.index(labels_.size()), rng);
  }

  /// Uniform over studies with a different label set (rejection sampling).
  std::size_t negative_for(std::size_t anchor, Rng& rng) const {
    const std::string key = label_key(labels_[anchor]);
    if (key_counts_.at(key) == labels_.size()) {
      throw DataError("no valid negative: every study shares the anchor's label set");
    }
    for (;;) {
      const std::size_t j = rng.index(labels_.size());
      if (label_key(labels_[j]) != key) return j;
    }
  }

  const LabelVector& labels(std::size_t i) const { return labels_[i]; }

 private:
  std::vector<LabelVector> labels_;
  std::map<std::string, std::size_t> key_counts_;
};

/// Fixed scheme, or the Bi/S2S mixture.
struct SchemeSchedule {
  bool mixed = false;
  MaskScheme fixed = MaskScheme::BAR;
  MixedSchedule mixture;

  static SchemeSchedule parse(const std::string& name, double s2s_prob) {
    SchemeSchedule s;
    if (name == "bi_s2s") {
      s.mixed = true;
      s.mixture.s2s_prob = s2s_prob;
    } else {
      s.fixed = parse_mask_scheme(name);
    }
    return s;
  }

  MaskScheme draw(Rng& rng) const { return mixed ? sample_scheme(mixture, rng) : fixed; }
};

struct PretrainOptions {
  SchemeSchedule schedule;
  MlmPolicy mlm;
  AdamWConfig optim;
  int batch = 32;
  int epochs = 3;
  int sample_k = 11;
  std::uint64_t seed = 0;
  /// Re-checks every sampled negative against the label index.
  bool verify_negatives = false;

  static PretrainOptions from(const RunConfig& run) {
    PretrainOptions o;
    o.schedule = SchemeSchedule::parse(run.get("pretrain.scheme"), run.get_double("pretrain.s2s_prob"));
    o.mlm = MlmPolicy::from(run);
    o.optim.lr = run.get_double("optim.lr");
    o.optim.weight_decay = run.get_double("optim.weight_decay");
    o.batch = static_cast<int>(run.get_int("train.batch"));
    o.epochs = static_cast<int>(run.get_int("train.epochs"));
    o.sample_k = static_cast<int>(run.get_int("vis.sample_k"));
    o.seed = run.seed();
    return o;
  }
};

struct LossRecord {
  int step = 0;
  int epoch = 0;
  MaskScheme scheme = MaskScheme::Bi;
  double mlm_loss = 0.0;  // mean over the step's targets (0 when none)
  double irm_loss = 0.0;  // mean over the step's pairs
  std::size_t mlm_targets = 0;
  std::size_t pairs = 0;
};

inline void write_loss_csv(std::ostream& out, const std::vector<LossRecord>& log) {
  out << "step,epoch,scheme,mlm_loss,irm_loss\n";
  out.precision(10);
  for (const auto& r : log) {
    out << r.step << ',' << r.epoch << ',' << to_string(r.scheme) << ',' << r.mlm_loss << ',' << r.irm_loss << '\n';
  }
}

/// Per epoch: MLM loss averaged over all of the epoch's targets plus IRM loss
/// averaged over all of its pairs. Records without counts weigh one each.
inline std::vector<double> epoch_mean_loss(const std::vector<LossRecord>& log) {
  struct Acc {
    double mlm = 0.0, mlm_n = 0.0, irm = 0.0, irm_n = 0.0;
  };
  std::map<int, Acc> acc;
  for (const auto& r : log) {
    Acc& a = acc[r.epoch];
    const double targets = r.pairs ? static_cast<double>(r.mlm_targets) : 1.0;
    const double pairs = r.pairs ? static_cast<double>(r.pairs) : 1.0;
    a.mlm += r.mlm_loss * targets;
    a.mlm_n += targets;
    a.irm += r.irm_loss * pairs;
    a.irm_n += pairs;
  }
  std::vector<double> out;
  for (const auto& [_, a] : acc) out.push_back((a.mlm_n > 0.0 ? a.mlm / a.mlm_n : 0.0) + a.irm / a.irm_n);
  return out;
}

template <typename T>
struct PretrainResult {
  ModelParams<T> params;
  std::vector<LossRecord> log;
};

/// Report ids clipped to the usable language length.
inline std::vector<int> report_ids(const std::string& text, const Vocabulary& vocab, int max_len) {
  return tokenize(text, vocab, max_len).tokens();
}

/// Pre-training on `studies`: each epoch visits every study once as an IRM
/// anchor; matching pairs additionally carry the MLM objective. The step
/// minimises mean-MLM + mean-IRM with AdamW.
template <typename T>
PretrainResult<T> pretrain(const std::vector<const Study*>& studies, const Vocabulary& vocab, const ModelConfig& cfg,
                           ModelParams<T> params, const PretrainOptions& opt,
                           const std::function<void(int, const ModelParams<T>&)>& on_epoch = {}) {
  opt.mlm.validate();
  if (opt.batch < 1 || opt.epochs < 1) throw ConfigError("batch size and epochs must be positive");
  const IrmSampler sampler = IrmSampler::from(studies);
  if (!sampler.well_posed()) throw DataError("no valid negative: the dataset holds a single label set");
  std::vector<std::vector<int>> ids;
  for (const auto* s : studies) {
    ids.push_back(report_ids(s->report, vocab, cfg.max_len));
    if (ids.back().empty()) throw DataError("study " + s->id + " has an empty report");
  }

  AdamW<T> optimizer(opt.optim);
  PretrainResult<T> result;
  const std::size_t n = studies.size();
  const int steps_per_epoch = static_cast<int>((n + static_cast<std::size_t>(opt.batch) - 1) / static_cast<std::size_t>(opt.batch));
  int step = 0;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng(opt.seed, "pretrain:order", static_cast<std::uint64_t>(epoch)).shuffle(order.begin(), order.end());
    for (int s = 0; s < steps_per_epoch; ++s, ++step) {
      Rng step_rng(opt.seed, "pretrain:step", static_cast<std::uint64_t>(step));
      const MaskScheme scheme = opt.schedule.draw(step_rng);
      const std::size_t begin = static_cast<std::size_t>(s) * static_cast<std::size_t>(opt.batch);
      const std::size_t end = std::min(n, begin + static_cast<std::size_t>(opt.batch));

      struct Item {
        IrmExample pair;
        std::vector<int> language;
        MlmCorruption mlm;
      };
      std::vector<Item> items;
      std::size_t total_targets = 0;
      for (std::size_t b = begin; b < end; ++b) {
        Rng rng(opt.seed, "pretrain:example", static_cast<std::uint64_t>(step) * 100003u + b);
        Item item;
        item.pair = sampler.sample(order[b], rng);
        if (opt.verify_negatives && item.pair.label == 0 &&
            label_key(sampler.labels(item.pair.image)) == label_key(sampler.labels(item.pair.report))) {
          throw DataError("IRM negative shares the anchor's label set at step " + std::to_string(step));
        }
        if (item.pair.label == 1) {
          item.mlm = corrupt_mlm(pad_tokens(ids[item.pair.report], static_cast<int>(ids[item.pair.report].size())),
                                 opt.mlm, cfg.vocab_size, rng);
          item.language = item.mlm.tokens.ids;
          total_targets += item.mlm.positions.size();
        } else {
          item.language = ids[item.pair.report];
        }
        items.push_back(std::move(item));
      }

      std::map<std::string, Matrix<T>> grads;
      double mlm_sum = 0.0, irm_sum = 0.0;
      const double batch_size = static_cast<double>(items.size());
      try {
        for (std::size_t i = 0; i < items.size(); ++i) {
          const Item& item = items[i];
          Rng rng(opt.seed, "pretrain:stochastic", static_cast<std::uint64_t>(step) * 100003u + begin + i);
          Tape<T> tape;
          const VisualFeatures<T> full = encode_image(tape, studies[item.pair.image]->image, params, cfg);
          const VisualFeatures<T> visual = sample_visual(full, std::min(opt.sample_k, full.count()), rng);
          const SequenceLayout layout = build_layout(visual.count(), static_cast<int>(item.language.size()), scheme);
          const AttentionMask<T> mask = build_mask<T>(layout, scheme, static_cast<T>(cfg.neg));
          const JointInput<T> input = embed_joint(tape, visual, item.language, params, layout);
          const ContextualOutput<T> out = forward(tape, input, mask, params, cfg, true, &rng);

          const Var<T> irm_logit = ad::affine(pooled_cls(out, layout, cfg.language_cls),
                                              param(tape, params, "head.irm.weight"), param(tape, params, "head.irm.bias"));
          Matrix<T> y(1, 1);
          y(0, 0) = static_cast<T>(item.pair.label);
          const Var<T> irm = ad::bce_with_logits_sum(irm_logit, y);
          irm_sum += static_cast<double>(irm.value()(0, 0));
          Var<T> loss = ad::scale(irm, static_cast<T>(1.0 / batch_size));
          if (!item.mlm.positions.empty()) {
            std::vector<int> rows;
            for (int p : item.mlm.positions) rows.push_back(layout.text_begin() + p);
            const Var<T> logits = mlm_logits(tape, ad::gather_rows(out.hidden, rows), params, cfg);
            const Var<T> mlm = ad::softmax_cross_entropy_sum(logits, item.mlm.originals);
            mlm_sum += static_cast<double>(mlm.value()(0, 0));
            loss = ad::add(loss, ad::scale(mlm, static_cast<T>(1.0 / static_cast<double>(total_targets))));
          }
          tape.backward(loss);
          tape.add_parameter_gradients(grads);
        }
      } catch (const NumericError& e) {
        throw NumericError("pre-training diverged at step " + std::to_string(step) + ": " + e.what());
      }

      LossRecord rec;
      rec.step = step;
      rec.epoch = epoch;
      rec.scheme = scheme;
      rec.mlm_loss = total_targets ? mlm_sum / static_cast<double>(total_targets) : 0.0;
      rec.irm_loss = irm_sum / batch_size;
      rec.mlm_targets = total_targets;
      rec.pairs = items.size();
      if (!std::isfinite(rec.mlm_loss) || !std::isfinite(rec.irm_loss)) {
        throw NumericError("pre-training diverged at step " + std::to_string(step));
      }
      result.log.push_back(rec);
      optimizer.step(params, grads);
      if (!params.all_finite()) throw NumericError("pre-training diverged at step " + std::to_string(step) + ": non-finite parameters");
    }
    if (on_epoch) on_epoch(epoch, params);
  }
  result.params = std::move(params);
  return result;
}

}  // namespace medvill
