#pragma once

#include "medvill/stats.hpp"

#include <json.hpp>

#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace medvill {

/// Per-item evaluation outputs plus the metrics computed from any subset.
/// Each metric maps resampled item indices to a value.
struct EvalItems {
  std::size_t count = 0;
  std::vector<std::pair<std::string, std::function<double(const std::vector<std::size_t>&)>>> metrics;

  std::vector<std::size_t> all() const {
    std::vector<std::size_t> idx(count);
    for (std::size_t i = 0; i < count; ++i) idx[i] = i;
    return idx;
  }
};

struct MetricEntry {
  std::string name;
  double value = 0.0;
  BootstrapResult bootstrap;
  std::optional<double> p_value;
  std::string note;
};

struct MetricReport {
  std::string task;
  std::vector<MetricEntry> metrics;

  const MetricEntry& at(const std::string& name) const {
    for (const auto& m : metrics)
      if (m.name == name) return m;
    throw DataError("report has no metric '" + name + "'");
  }

  /// One JSON record per metric: name, value, mean, std, p_value.
  void write_jsonl(std::ostream& out) const {
    for (const auto& m : metrics) {
      nlohmann::ordered_json j;
      j["task"] = task;
      j["name"] = m.name;
      j["value"] = m.value;
      j["mean"] = m.bootstrap.mean;
      j["std"] = m.bootstrap.std;
      j["resamples"] = m.bootstrap.values.size();
      if (m.p_value) {
        j["p_value"] = *m.p_value;
        j["significant"] = *m.p_value < kSignificance;
      } else {
        j["p_value"] = nullptr;
      }
      if (!m.note.empty()) j["note"] = m.note;
      out << j.dump() << '\n';
    }
  }

  /// Long-format resample table: metric,resample,value.
  void write_csv(std::ostream& out) const {
    out << "metric,resample,value\n";
    out.precision(17);
    for (const auto& m : metrics)
      for (std::size_t r = 0; r < m.bootstrap.values.size(); ++r) out << m.name << ',' << r << ',' << m.bootstrap.values[r] << '\n';
  }
};

/// Point values on the full item set and bootstrap statistics per metric.
inline MetricReport build_report(const std::string& task, const EvalItems& items, std::uint64_t seed,
                                 int resamples = kBootstrapResamples) {
  MetricReport report;
  report.task = task;
  for (const auto& [name, fn] : items.metrics) {
    MetricEntry e;
    e.name = name;
    e.value = fn(items.all());
    e.bootstrap = bootstrap(fn, items.count, seed, resamples);
    report.metrics.push_back(std::move(e));
  }
  return report;
}

/// Attaches Welch p-values of `report` against `other`, metric by metric.
/// Undefined comparisons keep an empty p-value and say why.
inline void attach_comparison(MetricReport& report, const MetricReport& other) {
  for (auto& m : report.metrics) {
    const MetricEntry* peer = nullptr;
    for (const auto& o : other.metrics)
      if (o.name == m.name) peer = &o;
    if (!peer) {
      m.note = "no matching metric in comparison report";
      continue;
    }
    try {
      m.p_value = t_test(m.bootstrap.values, peer->bootstrap.values);
    } catch (const NumericError& e) {
      m.p_value.reset();
      m.note = e.what();
    }
  }
}

}  // namespace medvill
