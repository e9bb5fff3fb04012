#pragma once

#include "medvill/corpus.hpp"
#include "medvill/error.hpp"
#include "medvill/text.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

namespace medvill {

/// Thrown by a metric that is undefined on its input (for example AUROC
/// with a single class). The bootstrap redraws on this error.
class UndefinedMetric : public NumericError {
 public:
  using NumericError::NumericError;
};

/// Positivity flags of a trial's candidates in ranked order.
struct RankedTrial {
  std::vector<bool> positive;

  int positives() const { return static_cast<int>(std::count(positive.begin(), positive.end(), true)); }
};

struct RankingMetrics {
  double mrr = 0.0;
  double hit = 0.0;
  double recall = 0.0;
  double precision = 0.0;
};

inline RankingMetrics ranking_metrics(const std::vector<RankedTrial>& trials, int k = 5) {
  if (trials.empty()) throw DataError("ranking metrics need at least one trial");
  if (k < 1) throw DataError("ranking cutoff must be >= 1");
  RankingMetrics m;
  for (const auto& t : trials) {
    const int total = t.positives();
    if (total == 0) throw DataError("retrieval trial without a positive candidate");
    const auto first = std::find(t.positive.begin(), t.positive.end(), true);
    m.mrr += 1.0 / static_cast<double>(first - t.positive.begin() + 1);
    const auto top_end = t.positive.begin() + std::min<std::ptrdiff_t>(k, static_cast<std::ptrdiff_t>(t.positive.size()));
    const int in_top = static_cast<int>(std::count(t.positive.begin(), top_end, true));
    m.hit += in_top > 0 ? 1.0 : 0.0;
    m.recall += static_cast<double>(in_top) / total;
    m.precision += static_cast<double>(in_top) / k;
  }
  const double n = static_cast<double>(trials.size());
  m.mrr /= n;
  m.hit /= n;
  m.recall /= n;
  m.precision /= n;
  return m;
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
inline double micro_auroc(const std::vector<double>& scores, const std::vector<int>& truths) {
  if (scores.size() != truths.size()) throw DataError("auroc: score and truth counts differ");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double numerator = 0.0, negatives_below = 0.0, pos_total = 0.0, neg_total = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    double pos = 0.0, neg = 0.0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (truths[order[j]] ? pos : neg) += 1.0;
      ++j;
    }
    numerator += pos * negatives_below + 0.5 * pos * neg;
    negatives_below += neg;
    pos_total += pos;
    neg_total += neg;
    i = j;
  }
  if (pos_total == 0.0 || neg_total == 0.0) throw UndefinedMetric("auroc undefined: only one class present");
  return numerator / (pos_total * neg_total);
}

struct Confusion {
  long long tp = 0, fp = 0, fn = 0, tn = 0;

  double precision() const { return tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0; }
  double recall() const { return tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0; }
  double f1() const {
    const double p = precision(), r = recall();
    return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
  }
  double accuracy() const {
    const long long n = tp + fp + fn + tn;
    return n ? static_cast<double>(tp + tn) / static_cast<double>(n) : 0.0;
  }
  void add(int predicted, int truth) {
    if (predicted && truth) ++tp;
    else if (predicted) ++fp;
    else if (truth) ++fn;
    else ++tn;
  }
};

/// Micro-pooled F1 over flattened binary predictions.
inline double micro_f1(const std::vector<int>& predictions, const std::vector<int>& truths) {
  if (predictions.size() != truths.size()) throw DataError("f1: prediction and truth counts differ");
  Confusion c;
  for (std::size_t i = 0; i < predictions.size(); ++i) c.add(predictions[i], truths[i]);
  return c.f1();
}

inline std::vector<int> threshold(const std::vector<double>& probabilities, double cut = 0.5) {
  std::vector<int> out;
  for (double p : probabilities) out.push_back(p >= cut ? 1 : 0);
  return out;
}

/// exp(mean negative log-likelihood).
inline double perplexity_from_nll(double nll_sum, long long token_count) {
  if (token_count <= 0) throw DataError("perplexity needs at least one reference token");
  return std::exp(nll_sum / static_cast<double>(token_count));
}

struct BleuOptions {
  /// Add-one smoothing of the 2..4-gram precisions. Off by default.
  bool smooth = false;
};

/// Corpus BLEU-4 with uniform weights and brevity penalty over pre-split
/// token lists.
inline double bleu4(const std::vector<std::vector<std::string>>& hypotheses,
                    const std::vector<std::vector<std::string>>& references, BleuOptions opt = {}) {
  if (hypotheses.empty()) throw DataError("bleu: empty corpus");
  if (hypotheses.size() != references.size()) throw DataError("bleu: hypothesis and reference counts differ");
  std::array<double, 4> matched{}, total{};
  double hyp_len = 0.0, ref_len = 0.0;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const auto& h = hypotheses[s];
    const auto& r = references[s];
    hyp_len += static_cast<double>(h.size());
    ref_len += static_cast<double>(r.size());
    for (std::size_t n = 1; n <= 4; ++n) {
      std::map<std::vector<std::string>, int> ref_counts, hyp_counts;
      for (std::size_t i = 0; i + n <= r.size(); ++i) ++ref_counts[{r.begin() + static_cast<std::ptrdiff_t>(i), r.begin() + static_cast<std::ptrdiff_t>(i + n)}];
      for (std::size_t i = 0; i + n <= h.size(); ++i) ++hyp_counts[{h.begin() + static_cast<std::ptrdiff_t>(i), h.begin() + static_cast<std::ptrdiff_t>(i + n)}];
      for (const auto& [gram, count] : hyp_counts) {
        auto it = ref_counts.find(gram);
        matched[n - 1] += std::min(count, it == ref_counts.end() ? 0 : it->second);
        total[n - 1] += count;
      }
    }
  }
  if (hyp_len == 0.0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    double m = matched[n], t = total[n];
    if (opt.smooth && n > 0) {
      m += 1.0;
      t += 1.0;
    }
    if (m == 0.0 || t == 0.0) return 0.0;
    log_sum += 0.25 * std::log(m / t);
  }
  const double bp = hyp_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / hyp_len);
  return bp * std::exp(log_sum);
}

inline double bleu4(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references,
                    BleuOptions opt = {}) {
  std::vector<std::vector<std::string>> h, r;
  for (const auto& s : hypotheses) h.push_back(split_words(s));
  for (const auto& s : references) r.push_back(split_words(s));
  return bleu4(h, r, opt);
}

struct ClinicalEfficacy {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Labels both sides with the rule labeler and micro-pools the 14-label
/// confusion counts, taking the reference labels as truth.
inline ClinicalEfficacy clinical_efficacy(const std::vector<std::string>& generated,
                                          const std::vector<std::string>& references, const FindingSpec& spec) {
  if (generated.size() != references.size()) throw DataError("clinical efficacy: report counts differ");
  Confusion c;
  for (std::size_t i = 0; i < generated.size(); ++i) {
    const LabelVector g = rule_labeler(generated[i], spec);
    const LabelVector r = rule_labeler(references[i], spec);
    for (std::size_t j = 0; j < g.size(); ++j) c.add(g[j], r[j]);
  }
  return {c.accuracy(), c.precision(), c.recall(), c.f1()};
}

}  // namespace medvill
