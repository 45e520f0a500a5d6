#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "crystalmt/common.hpp"
#include "crystalmt/json_util.hpp"
#include "crystalmt/model.hpp"
#include "crystalmt/training.hpp"

namespace crystalmt::metrics {

inline double mae(const std::vector<double>& preds,
                  const std::vector<double>& targets) {
  if (preds.size() != targets.size() || preds.empty()) {
    throw DimensionError("mae: lengths " + std::to_string(preds.size()) +
                         " and " + std::to_string(targets.size()) +
                         " differ or are zero");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    acc += std::abs(preds[i] - targets[i]);
  }
  return acc / static_cast<double>(preds.size());
}

inline double pearson(const std::vector<double>& x,
                      const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw DimensionError("pearson: need two equal-length vectors of size >= 2");
  }
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) {
    throw ValueError("pearson: undefined for zero-variance input");
  }
  return sxy / std::sqrt(sxx * syy);
}

// Fractional ranks, 1-based; tied values share the average of their ranks.
inline std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size(), 0.0);
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

// Spearman's r_s: Pearson correlation of the rank vectors.
inline double spearman(const std::vector<double>& x,
                       const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw DimensionError("spearman: need two equal-length vectors of size >= 2");
  }
  try {
    return pearson(average_ranks(x), average_ranks(y));
  } catch (const ValueError&) {
    throw ValueError("spearman: undefined for all-tied input");
  }
}

enum class MetalClass { metal, non_metal };

// Room-temperature k_B*T criterion: band gap below 0.025 eV conducts.
inline MetalClass classify_metal(double band_gap_ev,
                                 double threshold_ev = 0.025) {
  if (!std::isfinite(band_gap_ev)) {
    throw ValueError("classify_metal: non-finite band gap");
  }
  return band_gap_ev < threshold_ev ? MetalClass::metal : MetalClass::non_metal;
}

// Probability that a random positive outranks a random negative, ties
// counted half (Mann-Whitney). Computed via the rank-sum identity.
inline double roc_auc(const std::vector<double>& scores,
                      const std::vector<bool>& positive) {
  if (scores.size() != positive.size() || scores.empty()) {
    throw DimensionError("roc_auc: scores and labels must align");
  }
  std::size_t n_pos = 0;
  for (bool p : positive) n_pos += p ? 1 : 0;
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw ValueError("roc_auc: both classes must be present");
  }
  const std::vector<double> ranks = average_ranks(scores);
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (positive[i]) rank_sum += ranks[i];
  }
  const double np = static_cast<double>(n_pos);
  const double nn = static_cast<double>(n_neg);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

struct TaskEval {
  std::string name;
  double mae = 0.0;                 // raw units
  std::optional<double> spearman;   // pred vs target; absent when undefined
};

struct EvalReport {
  std::string split_name;
  std::size_t count = 0;
  std::vector<TaskEval> tasks;
  double avg_mae = 0.0;
  // Pearson r between true target columns for each task pair (p, q), p < q.
  // Entries are null when undefined (constant column).
  std::vector<std::optional<double>> target_pearson;
  std::optional<double> metal_auc;
  std::optional<std::size_t> band_gap_task;
  double metal_threshold = 0.025;
  std::optional<double> improvement_pct;  // vs a supplied baseline avg MAE
};

struct EvalOptions {
  std::string split_name = "test";
  // Index of the band-gap task for metal/non-metal AUC; -1 disables.
  int band_gap_task = -1;
  double metal_threshold = 0.025;
  const EvalReport* baseline = nullptr;
};

// Forward every entry, denormalize, and compute the applicable measures.
// Correlations that are undefined on the given split (constant columns,
// single-class labels) are reported as absent rather than silent NaN.
inline EvalReport evaluate(const model::ModelParams& params,
                           const model::ModelConfig& mcfg,
                           const training::Normalizer& norm,
                           const training::Dataset& ds,
                           const std::vector<std::size_t>& indices,
                           const EvalOptions& opt = {}) {
  if (indices.empty()) throw ValueError("evaluate: empty split");
  const std::size_t p = ds.n_tasks();

  std::vector<std::vector<double>> preds(p), targets(p);
  for (std::size_t i : indices) {
    const model::Prediction out = model::predict(ds.entries[i].graph, params, mcfg);
    for (std::size_t t = 0; t < p; ++t) {
      preds[t].push_back(norm.denormalize(t, out.values[t]));
      targets[t].push_back(ds.entries[i].targets[t]);
    }
  }

  EvalReport rep;
  rep.split_name = opt.split_name;
  rep.count = indices.size();
  rep.metal_threshold = opt.metal_threshold;
  for (std::size_t t = 0; t < p; ++t) {
    TaskEval te;
    te.name = ds.property_names[t];
    te.mae = mae(preds[t], targets[t]);
    try {
      te.spearman = spearman(preds[t], targets[t]);
    } catch (const Error&) {
      te.spearman = std::nullopt;
    }
    rep.avg_mae += te.mae;
    rep.tasks.push_back(std::move(te));
  }
  rep.avg_mae /= static_cast<double>(p);

  for (std::size_t a = 0; a < p; ++a) {
    for (std::size_t b = a + 1; b < p; ++b) {
      try {
        rep.target_pearson.emplace_back(pearson(targets[a], targets[b]));
      } catch (const Error&) {
        rep.target_pearson.emplace_back(std::nullopt);
      }
    }
  }

  if (opt.band_gap_task >= 0) {
    const auto t = static_cast<std::size_t>(opt.band_gap_task);
    if (t >= p) throw ValueError("evaluate: band_gap_task out of range");
    rep.band_gap_task = t;
    std::vector<bool> non_metal;
    for (double gap : targets[t]) {
      non_metal.push_back(classify_metal(gap, opt.metal_threshold) ==
                          MetalClass::non_metal);
    }
    try {
      // positive class = non-metal, score = predicted band gap
      rep.metal_auc = roc_auc(preds[t], non_metal);
    } catch (const Error&) {
      rep.metal_auc = std::nullopt;
    }
  }

  if (opt.baseline) {
    if (opt.baseline->avg_mae > 0.0) {
      rep.improvement_pct =
          (opt.baseline->avg_mae - rep.avg_mae) / opt.baseline->avg_mae * 100.0;
    }
  }
  return rep;
}

inline double improvement_pct(double baseline_avg_mae, double avg_mae) {
  if (!(baseline_avg_mae > 0.0)) {
    throw ValueError("improvement_pct: baseline must be positive");
  }
  return (baseline_avg_mae - avg_mae) / baseline_avg_mae * 100.0;
}

inline json report_to_json(const EvalReport& r) {
  json j;
  j["schema_version"] = 1;
  j["split"] = r.split_name;
  j["count"] = r.count;
  j["avg_mae"] = r.avg_mae;
  j["tasks"] = json::array();
  for (const TaskEval& t : r.tasks) {
    json tj{{"name", t.name}, {"mae", t.mae}};
    tj["spearman"] = t.spearman ? json(*t.spearman) : json(nullptr);
    j["tasks"].push_back(tj);
  }
  j["target_pearson"] = json::array();
  for (const auto& v : r.target_pearson) {
    j["target_pearson"].push_back(v ? json(*v) : json(nullptr));
  }
  j["metal_threshold"] = r.metal_threshold;
  j["metal_auc"] = r.metal_auc ? json(*r.metal_auc) : json(nullptr);
  j["band_gap_task"] = r.band_gap_task ? json(*r.band_gap_task) : json(nullptr);
  j["improvement_pct"] =
      r.improvement_pct ? json(*r.improvement_pct) : json(nullptr);
  return j;
}

inline EvalReport report_from_json(const json& j) {
  EvalReport r;
  r.split_name = j.value("split", "");
  r.count = j.value("count", std::size_t{0});
  r.avg_mae = require_field(j, "avg_mae", "report").get<double>();
  for (const json& tj : require_field(j, "tasks", "report")) {
    TaskEval t;
    t.name = tj.value("name", "");
    t.mae = require_field(tj, "mae", "report task").get<double>();
    if (tj.contains("spearman") && !tj["spearman"].is_null()) {
      t.spearman = tj["spearman"].get<double>();
    }
    r.tasks.push_back(std::move(t));
  }
  if (j.contains("target_pearson")) {
    for (const json& v : j["target_pearson"]) {
      r.target_pearson.emplace_back(
          v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
    }
  }
  r.metal_threshold = j.value("metal_threshold", 0.025);
  if (j.contains("metal_auc") && !j["metal_auc"].is_null()) {
    r.metal_auc = j["metal_auc"].get<double>();
  }
  if (j.contains("band_gap_task") && !j["band_gap_task"].is_null()) {
    r.band_gap_task = j["band_gap_task"].get<std::size_t>();
  }
  if (j.contains("improvement_pct") && !j["improvement_pct"].is_null()) {
    r.improvement_pct = j["improvement_pct"].get<double>();
  }
  return r;
}

// Flat row for cross-run aggregation.
inline std::string report_csv_header(const std::vector<std::string>& names) {
  std::string h = "split,count";
  for (const std::string& n : names) h += ",mae_" + n;
  h += ",avg_mae";
  for (const std::string& n : names) h += ",spearman_" + n;
  h += ",metal_auc\n";
  return h;
}

inline std::string report_csv_row(const EvalReport& r) {
  std::string row = r.split_name + "," + std::to_string(r.count);
  for (const TaskEval& t : r.tasks) row += "," + format_double(t.mae);
  row += "," + format_double(r.avg_mae);
  for (const TaskEval& t : r.tasks) {
    row += ",";
    if (t.spearman) row += format_double(*t.spearman);
  }
  row += ",";
  if (r.metal_auc) row += format_double(*r.metal_auc);
  row += "\n";
  return row;
}

}  // namespace crystalmt::metrics
