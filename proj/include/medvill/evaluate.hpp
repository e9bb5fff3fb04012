#pragma once

#include "medvill/report.hpp"
#include "medvill/tasks.hpp"

#include <map>
#include <memory>
#include <string>
#include <vector>

namespace medvill {

template <typename T>
std::vector<CachedVisual<T>> cache_split(const TaskData& data, const ModelParams<T>& params, const ModelConfig& cfg) {
  std::vector<CachedVisual<T>> out;
  out.reserve(data.studies.size());
  for (const auto* s : data.studies) out.push_back(cache_visual(s->image, params, cfg));
  return out;
}

struct ClsOutputs {
  std::vector<std::array<double, kFindingCount>> probabilities;
  std::vector<LabelVector> truths;
};

template <typename T>
ClsOutputs predict_cls(const TaskData& data, const Vocabulary& vocab, const ModelConfig& cfg, const ModelParams<T>& params) {
  ClsOutputs out;
  for (const auto* s : data.studies) {
    out.probabilities.push_back(classify(cache_visual(s->image, params, cfg), report_ids(s->report, vocab, cfg.max_len), params, cfg));
    out.truths.push_back(s->labels);
  }
  return out;
}

/// Micro AUROC and micro F1 (threshold 0.5) over studies.
inline EvalItems cls_items(std::shared_ptr<const ClsOutputs> o) {
  EvalItems items;
  items.count = o->truths.size();
  auto flatten = [o](const std::vector<std::size_t>& idx, std::vector<double>& scores, std::vector<int>& truths) {
    for (std::size_t i : idx)
      for (int j = 0; j < kFindingCount; ++j) {
        scores.push_back(o->probabilities[i][static_cast<std::size_t>(j)]);
        truths.push_back(o->truths[i][static_cast<std::size_t>(j)]);
      }
  };
  items.metrics.emplace_back("micro_auroc", [flatten](const std::vector<std::size_t>& idx) {
    std::vector<double> s;
    std::vector<int> t;
    flatten(idx, s, t);
    return micro_auroc(s, t);
  });
  items.metrics.emplace_back("micro_f1", [flatten](const std::vector<std::size_t>& idx) {
    std::vector<double> s;
    std::vector<int> t;
    flatten(idx, s, t);
    return micro_f1(threshold(s), t);
  });
  return items;
}

struct RetrievalOutputs {
  std::vector<RankedTrial> i2r;
  std::vector<RankedTrial> r2i;
};

/// Runs both retrieval directions over the split. Pair scores are computed
/// once and shared between directions.
template <typename T>
RetrievalOutputs predict_retrieval(const TaskData& data, const Vocabulary& vocab, const ModelConfig& cfg,
                                   const ModelParams<T>& params, int trials, std::uint64_t seed) {
  std::vector<LabelVector> labels;
  std::vector<std::vector<int>> reports;
  for (const auto* s : data.studies) {
    labels.push_back(s->labels);
    reports.push_back(report_ids(s->report, vocab, cfg.max_len));
  }
  const auto visual = cache_split(data, params, cfg);
  std::map<std::pair<int, int>, double> cache;
  auto score = [&](int image, int report) {
    auto [it, fresh] = cache.try_emplace({image, report}, 0.0);
    if (fresh) it->second = score_pair(visual[static_cast<std::size_t>(image)], reports[static_cast<std::size_t>(report)], params, cfg);
    return it->second;
  };
  RetrievalOutputs out;
  for (Direction d : {Direction::ImageToReport, Direction::ReportToImage}) {
    for (const auto& trial : build_trials(labels, d, trials, seed)) {
      std::vector<double> scores;
      for (int c : trial.candidates)
        scores.push_back(d == Direction::ImageToReport ? score(trial.query, c) : score(c, trial.query));
      (d == Direction::ImageToReport ? out.i2r : out.r2i).push_back(run_trial(trial, scores));
    }
  }
  return out;
}

inline EvalItems retrieval_items(std::shared_ptr<const RetrievalOutputs> o, int k = 5) {
  EvalItems items;
  items.count = o->i2r.size();
  for (const char* dir : {"i2r", "r2i"}) {
    const bool i2r = std::string(dir) == "i2r";
    auto pick = [o, i2r, k](const std::vector<std::size_t>& idx) {
      std::vector<RankedTrial> sel;
      for (std::size_t i : idx) sel.push_back(i2r ? o->i2r[i] : o->r2i[i]);
      return ranking_metrics(sel, k);
    };
    const std::string p = std::string(dir) + ".";
    items.metrics.emplace_back(p + "mrr", [pick](const std::vector<std::size_t>& idx) { return pick(idx).mrr; });
    items.metrics.emplace_back(p + "hit@5", [pick](const std::vector<std::size_t>& idx) { return pick(idx).hit; });
    items.metrics.emplace_back(p + "recall@5", [pick](const std::vector<std::size_t>& idx) { return pick(idx).recall; });
    items.metrics.emplace_back(p + "precision@5", [pick](const std::vector<std::size_t>& idx) { return pick(idx).precision; });
  }
  return items;
}

struct VqaOutputs {
  std::vector<bool> correct;
  std::vector<bool> closed;
  /// Gold answers missing from the answer table (counted wrong).
  std::vector<std::string> unseen;
};

template <typename T>
VqaOutputs predict_vqa(const TaskData& data, const Vocabulary& vocab, const std::vector<std::string>& answers,
                       const ModelConfig& cfg, const ModelParams<T>& params) {
  VqaOutputs out;
  std::map<std::string, CachedVisual<T>> visual;
  for (const auto* q : data.vqa) {
    auto it = visual.find(q->study_id);
    if (it == visual.end())
      it = visual.emplace(q->study_id, cache_visual(data.studies[data.study_index.at(q->study_id)]->image, params, cfg)).first;
    const std::vector<double> p = answer(it->second, report_ids(q->question, vocab, cfg.max_len), params, cfg);
    const int gold = answer_index(answers, q->answer);
    if (gold < 0) out.unseen.push_back(q->answer);
    const auto best = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
    out.correct.push_back(gold >= 0 && best == gold);
    out.closed.push_back(q->closed);
  }
  return out;
}

inline EvalItems vqa_items(std::shared_ptr<const VqaOutputs> o) {
  EvalItems items;
  items.count = o->correct.size();
  auto acc = [o](const std::vector<std::size_t>& idx, int want) {
    double hit = 0.0, n = 0.0;
    for (std::size_t i : idx) {
      if (want >= 0 && o->closed[i] != (want == 1)) continue;
      hit += o->correct[i] ? 1.0 : 0.0;
      n += 1.0;
    }
    if (n == 0.0) throw UndefinedMetric("no questions of the requested type in this sample");
    return hit / n;
  };
  items.metrics.emplace_back("accuracy", [acc](const std::vector<std::size_t>& idx) { return acc(idx, -1); });
  items.metrics.emplace_back("closed_accuracy", [acc](const std::vector<std::size_t>& idx) { return acc(idx, 1); });
  items.metrics.emplace_back("open_accuracy", [acc](const std::vector<std::size_t>& idx) { return acc(idx, 0); });
  return items;
}

struct GenOutputs {
  std::vector<std::string> ids;
  std::vector<std::string> generated;
  std::vector<std::string> references;
  std::vector<StopReason> stops;
  std::vector<SequenceNll> nll;
};

template <typename T>
GenOutputs predict_gen(const TaskData& data, const Vocabulary& vocab, const ModelConfig& cfg, const ModelParams<T>& params,
                       int max_len, bool with_nll = true) {
  GenOutputs out;
  for (const auto* s : data.studies) {
    const CachedVisual<T> visual = cache_visual(s->image, params, cfg);
    const Generation g = generate(visual, params, cfg, max_len);
    out.ids.push_back(s->id);
    out.generated.push_back(detokenize(g.ids, vocab));
    out.references.push_back(s->report);
    out.stops.push_back(g.stop);
    if (with_nll) out.nll.push_back(sequence_nll(visual, report_ids(s->report, vocab, cfg.max_len - 1), params, cfg));
  }
  return out;
}

/// Test-set perplexity (teacher forcing under S2S, SEP included).
template <typename T>
double perplexity(const TaskData& data, const Vocabulary& vocab, const ModelConfig& cfg, const ModelParams<T>& params) {
  double nll = 0.0;
  long long tokens = 0;
  for (const auto* s : data.studies) {
    const SequenceNll r = sequence_nll(cache_visual(s->image, params, cfg), report_ids(s->report, vocab, cfg.max_len - 1), params, cfg);
    nll += r.nll;
    tokens += r.tokens;
  }
  return perplexity_from_nll(nll, tokens);
}

inline EvalItems gen_items(std::shared_ptr<const GenOutputs> o, const FindingSpec& spec) {
  EvalItems items;
  items.count = o->generated.size();
  if (!o->nll.empty()) {
    items.metrics.emplace_back("perplexity", [o](const std::vector<std::size_t>& idx) {
      double nll = 0.0;
      long long n = 0;
      for (std::size_t i : idx) {
        nll += o->nll[i].nll;
        n += o->nll[i].tokens;
      }
      return perplexity_from_nll(nll, n);
    });
  }
  auto select = [o](const std::vector<std::size_t>& idx, std::vector<std::string>& g, std::vector<std::string>& r) {
    for (std::size_t i : idx) {
      g.push_back(o->generated[i]);
      r.push_back(o->references[i]);
    }
  };
  items.metrics.emplace_back("bleu4", [select](const std::vector<std::size_t>& idx) {
    std::vector<std::string> g, r;
    select(idx, g, r);
    return bleu4(g, r);
  });
  const std::array<std::string, 4> names{"ce_accuracy", "ce_precision", "ce_recall", "ce_f1"};
  for (std::size_t k = 0; k < names.size(); ++k) {
    items.metrics.emplace_back(names[k], [select, spec, k](const std::vector<std::size_t>& idx) {
      std::vector<std::string> g, r;
      select(idx, g, r);
      const ClinicalEfficacy ce = clinical_efficacy(g, r, spec);
      const std::array<double, 4> v{ce.accuracy, ce.precision, ce.recall, ce.f1};
      return v[k];
    });
  }
  return items;
}

}  // namespace medvill
