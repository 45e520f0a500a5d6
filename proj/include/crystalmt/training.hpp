#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "crystalmt/autograd.hpp"
#include "crystalmt/common.hpp"
#include "crystalmt/graph.hpp"
#include "crystalmt/json_util.hpp"
#include "crystalmt/model.hpp"
#include "crystalmt/rng.hpp"

namespace crystalmt::training {

struct DatasetEntry {
  xtal::CrystalGraph graph;
  std::vector<double> targets;  // raw property values, one per task
};

struct Dataset {
  std::vector<DatasetEntry> entries;
  std::vector<std::string> property_names;
  std::vector<std::string> units;
  std::uint64_t content_hash = 0;

  std::size_t size() const { return entries.size(); }
  std::size_t n_tasks() const { return property_names.size(); }

  void validate() const {
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].targets.size() != property_names.size()) {
        throw ValueError("dataset: entry " + std::to_string(i) + " has " +
                         std::to_string(entries[i].targets.size()) +
                         " targets, expected " +
                         std::to_string(property_names.size()));
      }
      for (double t : entries[i].targets) {
        if (!std::isfinite(t)) {
          throw ValueError("dataset: non-finite target in entry " +
                           std::to_string(i));
        }
      }
    }
  }

  // Restriction to a subset of properties (shared graphs, selected targets).
  Dataset subset_tasks(const std::vector<std::string>& names) const {
    std::vector<std::size_t> cols;
    for (const std::string& n : names) {
      auto it = std::find(property_names.begin(), property_names.end(), n);
      if (it == property_names.end()) {
        throw ValueError("dataset: unknown property '" + n + "'");
      }
      cols.push_back(static_cast<std::size_t>(it - property_names.begin()));
    }
    Dataset out;
    out.property_names = names;
    for (std::size_t c : cols) out.units.push_back(units[c]);
    out.content_hash = content_hash;
    out.entries.reserve(entries.size());
    for (const DatasetEntry& e : entries) {
      DatasetEntry sub;
      sub.graph = e.graph;
      for (std::size_t c : cols) sub.targets.push_back(e.targets[c]);
      out.entries.push_back(std::move(sub));
    }
    return out;
  }
};

struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};

// floor with a tiny guard so exact products like 0.2*n never land one below
// the intended integer.
inline std::size_t ratio_floor(double ratio, std::size_t n) {
  return static_cast<std::size_t>(
      std::floor(ratio * static_cast<double>(n) + 1e-9));
}

// Uniform shuffle, sizes floor(r*n) with remainder entries going to train.
inline SplitIndices split_dataset(std::size_t n,
                                  const std::array<double, 3>& ratios,
                                  std::uint64_t seed) {
  const double sum = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ValueError("split: ratios sum to " + std::to_string(sum) +
                     ", expected 1");
  }
  const std::size_t n_val = ratio_floor(ratios[1], n);
  const std::size_t n_test = ratio_floor(ratios[2], n);
  const std::size_t n_train_floor = ratio_floor(ratios[0], n);
  if (n_train_floor == 0 || n_val == 0 || n_test == 0) {
    throw ValueError("split: n=" + std::to_string(n) +
                     " too small for nonempty train/val/test");
  }
  const std::size_t n_train = n - n_val - n_test;  // remainder goes to train

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(perm);

  SplitIndices s;
  s.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train),
               perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val),
                perm.end());
  return s;
}

// Per-task z-scoring fit on the training split. The loss runs on normalized
// targets; every reported MAE is denormalized back to raw units.
struct Normalizer {
  std::vector<double> mean, stddev;

  static Normalizer identity(std::size_t n_tasks) {
    Normalizer n;
    n.mean.assign(n_tasks, 0.0);
    n.stddev.assign(n_tasks, 1.0);
    return n;
  }

  double normalize(std::size_t task, double v) const {
    return (v - mean[task]) / stddev[task];
  }
  double denormalize(std::size_t task, double v) const {
    return v * stddev[task] + mean[task];
  }
  std::size_t n_tasks() const { return mean.size(); }
};

inline Normalizer fit_normalizer(const std::vector<std::vector<double>>& rows) {
  if (rows.size() < 2) {
    throw ValueError("fit_normalizer: need at least 2 training entries, got " +
                     std::to_string(rows.size()));
  }
  const std::size_t p = rows[0].size();
  Normalizer norm;
  norm.mean.assign(p, 0.0);
  norm.stddev.assign(p, 0.0);
  const double inv_n = 1.0 / static_cast<double>(rows.size());
  for (const auto& r : rows) {
    for (std::size_t t = 0; t < p; ++t) norm.mean[t] += r[t];
  }
  for (std::size_t t = 0; t < p; ++t) norm.mean[t] *= inv_n;
  for (const auto& r : rows) {
    for (std::size_t t = 0; t < p; ++t) {
      const double d = r[t] - norm.mean[t];
      norm.stddev[t] += d * d;
    }
  }
  for (std::size_t t = 0; t < p; ++t) {
    norm.stddev[t] = std::sqrt(norm.stddev[t] * inv_n);  // population std
    if (!(norm.stddev[t] > 0.0)) {
      throw ValueError("fit_normalizer: constant target column " +
                       std::to_string(t));
    }
  }
  return norm;
}

inline Normalizer fit_normalizer(const Dataset& ds,
                                 const std::vector<std::size_t>& train_idx) {
  std::vector<std::vector<double>> rows;
  rows.reserve(train_idx.size());
  for (std::size_t i : train_idx) rows.push_back(ds.entries[i].targets);
  return fit_normalizer(rows);
}

struct TrainConfig {
  std::vector<double> loss_weights;  // empty = all ones
  int batch_size = 32;
  double lr = 0.01;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double l2 = 0.0;  // weight decay on weights (not biases)
  int max_epochs = 100;
  int patience = 10;
  std::array<double, 3> split_ratios{0.6, 0.2, 0.2};
  std::uint64_t seed = 0;
  bool normalize_targets = true;

  std::vector<double> weights_for(std::size_t n_tasks) const {
    if (loss_weights.empty()) return std::vector<double>(n_tasks, 1.0);
    if (loss_weights.size() != n_tasks) {
      throw ValueError("train config: " + std::to_string(loss_weights.size()) +
                       " loss weights for " + std::to_string(n_tasks) +
                       " tasks");
    }
    return loss_weights;
  }

  void validate() const {
    if (batch_size < 1) throw ValueError("train config: batch_size < 1");
    if (patience < 1) throw ValueError("train config: patience < 1");
    if (max_epochs < 1) throw ValueError("train config: max_epochs < 1");
    if (!(lr > 0.0)) throw ValueError("train config: lr must be > 0");
    if (l2 < 0.0) throw ValueError("train config: l2 must be >= 0");
    for (double w : loss_weights) {
      if (!(w >= 0.0)) throw ValueError("train config: loss weights must be >= 0");
    }
  }
};

inline json train_config_to_json(const TrainConfig& c) {
  return json{{"loss_weights", c.loss_weights},
              {"batch_size", c.batch_size},
              {"lr", c.lr},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"eps", c.eps},
              {"l2", c.l2},
              {"max_epochs", c.max_epochs},
              {"patience", c.patience},
              {"split_ratios", c.split_ratios},
              {"seed", c.seed},
              {"normalize_targets", c.normalize_targets}};
}

inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.loss_weights = j.value("loss_weights", c.loss_weights);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.l2 = j.value("l2", c.l2);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  if (j.contains("split_ratios")) {
    const auto r = j["split_ratios"].get<std::vector<double>>();
    if (r.size() != 3) throw ParseError("train config: split_ratios needs 3 values");
    c.split_ratios = {r[0], r[1], r[2]};
  }
  c.seed = j.value("seed", c.seed);
  c.normalize_targets = j.value("normalize_targets", c.normalize_targets);
  c.validate();
  return c;
}

struct LossBreakdown {
  double total = 0.0;
  std::vector<double> per_task;
};

// L_p = (1/batch) sum (yhat_p - y_p)^2;  L = (1/|P|) sum_p w_p L_p.
inline LossBreakdown weighted_loss(
    const std::vector<std::vector<double>>& preds,
    const std::vector<std::vector<double>>& targets,
    const std::vector<double>& weights) {
  if (preds.size() != targets.size() || preds.empty()) {
    throw DimensionError("weighted_loss: batch sizes differ or are empty");
  }
  const std::size_t p = weights.size();
  LossBreakdown out;
  out.per_task.assign(p, 0.0);
  for (std::size_t b = 0; b < preds.size(); ++b) {
    if (preds[b].size() != p || targets[b].size() != p) {
      throw DimensionError("weighted_loss: row width does not match task count");
    }
    for (std::size_t t = 0; t < p; ++t) {
      const double d = preds[b][t] - targets[b][t];
      out.per_task[t] += d * d;
    }
  }
  const double inv_batch = 1.0 / static_cast<double>(preds.size());
  for (std::size_t t = 0; t < p; ++t) {
    out.per_task[t] *= inv_batch;
    out.total += weights[t] * out.per_task[t];
  }
  out.total /= static_cast<double>(p);
  return out;
}

// Same loss built on the tape for a batch of graphs; returns the scalar
// total-loss node, optionally exposing the per-task L_p nodes.
inline Var batch_loss(Tape& tape, const model::ParamVars& params,
                      const model::ModelConfig& cfg,
                      const std::vector<const DatasetEntry*>& batch,
                      const Normalizer& norm,
                      const std::vector<double>& weights,
                      std::vector<Var>* per_task_out = nullptr) {
  if (batch.empty()) throw ValueError("batch_loss: empty batch");
  const std::size_t n_tasks = weights.size();
  std::vector<std::vector<Var>> sq(n_tasks);
  for (const DatasetEntry* entry : batch) {
    const model::ForwardVars fwd = model::forward(tape, entry->graph, params, cfg);
    for (std::size_t t = 0; t < n_tasks; ++t) {
      const double y = norm.normalize(t, entry->targets[t]);
      Var diff = tape.sub(fwd.outputs[t], tape.constant(Tensor::scalar(y)));
      sq[t].push_back(tape.mul(diff, diff));
    }
  }
  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  Var total;
  for (std::size_t t = 0; t < n_tasks; ++t) {
    Var acc = sq[t][0];
    for (std::size_t b = 1; b < sq[t].size(); ++b) acc = tape.add(acc, sq[t][b]);
    Var task_loss = tape.scale(acc, inv_batch);
    if (per_task_out) per_task_out->push_back(task_loss);
    Var weighted = tape.scale(task_loss, weights[t]);
    total = (t == 0) ? weighted : tape.add(total, weighted);
  }
  return tape.scale(total, 1.0 / static_cast<double>(n_tasks));
}

struct AdamState {
  std::vector<std::vector<double>> m, v;
  long long step = 0;
};

inline AdamState make_adam_state(const model::ModelParams& p) {
  AdamState s;
  visit_params(p, [&](const std::string&, const Tensor& t, bool) {
    s.m.emplace_back(t.numel(), 0.0);
    s.v.emplace_back(t.numel(), 0.0);
  });
  return s;
}

// Standard Adam with bias correction; l2 adds l2*theta to weight gradients
// (biases are not decayed) before the moment updates.
inline void adam_step(model::ModelParams& params,
                      const std::vector<Tensor>& grads, AdamState& state,
                      const TrainConfig& cfg) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  std::size_t slot = 0;
  visit_params(params, [&](const std::string& name, Tensor& t, bool is_bias) {
    if (slot >= grads.size() || grads[slot].numel() != t.numel()) {
      throw DimensionError("adam_step: gradient for '" + name +
                           "' does not match parameter shape");
    }
    auto& m = state.m[slot];
    auto& v = state.v[slot];
    const auto& g = grads[slot].data;
    for (std::size_t i = 0; i < t.numel(); ++i) {
      double gi = g[i];
      if (!is_bias && cfg.l2 != 0.0) gi += cfg.l2 * t.data[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      t.data[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
    ++slot;
  });
}

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  std::vector<double> val_mae;  // denormalized, per task
  double avg_val_mae = 0.0;
};

struct RunHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double best_avg_val_mae = std::numeric_limits<double>::infinity();
  double wall_seconds = 0.0;
};

// epoch,train_loss,val_mae_<p1>,...,avg_val_mae. Doubles in shortest
// round-trip form; identical runs serialize byte-identically.
inline std::string history_to_csv(const RunHistory& h,
                                  const std::vector<std::string>& names) {
  std::string out = "epoch,train_loss";
  for (const std::string& n : names) out += ",val_mae_" + n;
  out += ",avg_val_mae\n";
  for (const EpochRecord& e : h.epochs) {
    out += std::to_string(e.epoch) + "," + format_double(e.train_loss);
    for (double v : e.val_mae) out += "," + format_double(v);
    out += "," + format_double(e.avg_val_mae) + "\n";
  }
  return out;
}

struct TrainResult {
  model::ModelParams params;  // best-validation parameters
  Normalizer normalizer;
  RunHistory history;
  SplitIndices split;
};

namespace detail {

inline std::vector<double> validation_mae(
    const Dataset& ds, const std::vector<std::size_t>& idx,
    const model::ModelParams& params, const model::ModelConfig& cfg,
    const Normalizer& norm) {
  const std::size_t p = ds.n_tasks();
  std::vector<double> mae(p, 0.0);
  for (std::size_t i : idx) {
    const model::Prediction pred = model::predict(ds.entries[i].graph, params, cfg);
    for (std::size_t t = 0; t < p; ++t) {
      const double raw = norm.denormalize(t, pred.values[t]);
      mae[t] += std::abs(raw - ds.entries[i].targets[t]);
    }
  }
  for (double& v : mae) v /= static_cast<double>(idx.size());
  return mae;
}

}  // namespace detail

// Mini-batch Adam over the training split with early stopping on the
// average denormalized validation MAE. Returns the parameters of the best
// validation epoch, not the last one. Deterministic for a given seed.
//
// fixed_split overrides the seeded split (paired experiments);
// train_override replaces the train index list (training-fraction sweeps).
inline TrainResult train(const Dataset& ds, const model::ModelConfig& mcfg,
                         const TrainConfig& tcfg,
                         const SplitIndices* fixed_split = nullptr,
                         const std::vector<std::size_t>* train_override = nullptr) {
  const auto t_start = std::chrono::steady_clock::now();
  mcfg.validate();
  tcfg.validate();
  ds.validate();
  if (ds.n_tasks() != static_cast<std::size_t>(mcfg.n_tasks)) {
    throw ValueError("train: model has " + std::to_string(mcfg.n_tasks) +
                     " tasks but dataset has " + std::to_string(ds.n_tasks()));
  }
  const std::vector<double> weights = tcfg.weights_for(ds.n_tasks());

  TrainResult result;
  result.split = fixed_split ? *fixed_split
                             : split_dataset(ds.size(), tcfg.split_ratios,
                                             tcfg.seed);
  if (train_override) result.split.train = *train_override;
  if (result.split.train.empty() || result.split.val.empty()) {
    throw ValueError("train: empty train or validation split");
  }

  result.normalizer = tcfg.normalize_targets
                          ? fit_normalizer(ds, result.split.train)
                          : Normalizer::identity(ds.n_tasks());

  const std::size_t d_a = ds.entries[0].graph.atom_feature_len();
  const std::size_t d_b = ds.entries[0].graph.bond_feature_len();
  model::ModelParams params = model::init_params(mcfg, d_a, d_b);
  AdamState adam = make_adam_state(params);

  Rng shuffle_rng(derive_seed(tcfg.seed, "shuffle"));
  std::vector<std::size_t> order = result.split.train;

  model::ModelParams best = params;
  int epochs_without_improvement = 0;

  for (int epoch = 1; epoch <= tcfg.max_epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(tcfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(tcfg.batch_size));
      std::vector<const DatasetEntry*> batch;
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(&ds.entries[order[i]]);
      }
      try {
        Tape tape;
        const model::ParamVars vars = bind_params(tape, params);
        Var loss = batch_loss(tape, vars, mcfg, batch, result.normalizer, weights);
        epoch_loss += tape.value(loss).data[0] * static_cast<double>(batch.size());
        tape.backward(loss);
        adam_step(params, model::collect_grads(tape, vars), adam, tcfg);
      } catch (const NumericError& e) {
        throw NumericError("train: epoch " + std::to_string(epoch) +
                           ", batch at entry " + std::to_string(start) + ": " +
                           e.what());
      }
    }
    epoch_loss /= static_cast<double>(order.size());

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = epoch_loss;
    rec.val_mae = detail::validation_mae(ds, result.split.val, params, mcfg,
                                         result.normalizer);
    rec.avg_val_mae =
        std::accumulate(rec.val_mae.begin(), rec.val_mae.end(), 0.0) /
        static_cast<double>(rec.val_mae.size());
    result.history.epochs.push_back(rec);

    if (rec.avg_val_mae < result.history.best_avg_val_mae) {
      result.history.best_avg_val_mae = rec.avg_val_mae;
      result.history.best_epoch = epoch;
      best = params;
      epochs_without_improvement = 0;
    } else {
      ++epochs_without_improvement;
      if (epochs_without_improvement >= tcfg.patience) break;
    }
  }

  result.params = std::move(best);
  result.history.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
          .count();
  return result;
}

}  // namespace crystalmt::training
