#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "sparseadapt/adapter.hpp"
#include "sparseadapt/dataset.hpp"
#include "sparseadapt/errors.hpp"
#include "sparseadapt/matrix.hpp"
#include "sparseadapt/merging.hpp"
#include "sparseadapt/model.hpp"
#include "sparseadapt/rng.hpp"
#include "sparseadapt/saliency.hpp"

namespace sparseadapt {

namespace detail {

/// SGD / Adam over named weight matrices. Updates touch only masked
/// coordinates; Adam moments are dense and persist across mask refreshes.
class Optimizer {
public:
  Optimizer(OptimizerKind kind, double lr) : kind_(kind), lr_(lr) {}

  void begin_step() { ++t_; }

  void step(const std::string& id, Matrix& w, const Matrix& grad, const SparseMask& mask) {
    require_same_shape(w, grad, "Optimizer::step");
    if (kind_ == OptimizerKind::Sgd) {
      mask.for_each_element([&](int r, int c) { w.at(r, c) -= lr_ * grad.at(r, c); });
      return;
    }
    AdamState& s = state(id, w);
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    mask.for_each_element([&](int r, int c) {
      const double g = grad.at(r, c);
      double& m = s.m.at(r, c);
      double& v = s.v.at(r, c);
      m = kBeta1 * m + (1.0 - kBeta1) * g;
      v = kBeta2 * v + (1.0 - kBeta2) * g * g;
      w.at(r, c) -= lr_ * (m / bc1) / (std::sqrt(v / bc2) + kEps);
    });
  }

  void step_dense(const std::string& id, Matrix& w, const Matrix& grad) {
    step(id, w, grad, SparseMask::full(w.rows, w.cols));
  }

  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

private:
  struct AdamState {
    Matrix m, v;
  };

  AdamState& state(const std::string& id, const Matrix& w) {
    auto it = states_.find(id);
    if (it == states_.end()) {
      it = states_.emplace(id, AdamState{Matrix(w.rows, w.cols), Matrix(w.rows, w.cols)}).first;
    }
    return it->second;
  }

  OptimizerKind kind_;
  double lr_;
  long t_ = 0;
  std::map<std::string, AdamState> states_;
};

/// Mean loss over a split, evaluated in chunks.
inline double split_loss(const Model& model, const std::map<std::string, Matrix>& overrides,
                         const std::vector<Example>& split) {
  if (split.empty()) throw InputError("split_loss: empty split");
  std::vector<size_t> order(split.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  const size_t chunk = 64;
  double total = 0.0;
  for (size_t b = 0; b < split.size(); b += chunk) {
    const size_t e = std::min(split.size(), b + chunk);
    const Batch batch = make_batch(split, order, b, e);
    total += forward_loss(model, overrides, batch) * static_cast<double>(e - b);
  }
  return total / static_cast<double>(split.size());
}

/// The GD pair in the refresh slot: coordinates inside the current mask rank
/// by travel from initialization (drop score), coordinates outside by
/// gradient magnitude (grow score).
inline ScoreField gd_refresh_field(const Matrix& w, const Matrix& g, const Matrix& w0,
                                   const SparseMask& current) {
  ScoreField grow = score(Criterion::GDGrow, w, g);
  const ScoreField drop = score(Criterion::GDDrop, w, g, &w0);
  current.for_each_element(
      [&](int r, int c) { grow.scores.at(r, c) = drop.scores.at(r, c); });
  grow.criterion = Criterion::GDDrop;
  return grow;
}

inline ScoreField refresh_field(TrainCriterion criterion, const Matrix& w, const Matrix& g,
                                const Matrix& w0, const SparseMask& current) {
  switch (criterion) {
    case TrainCriterion::MCS: return score(Criterion::MCS, w, g);
    case TrainCriterion::CS: return score(Criterion::CS, w, g);
    case TrainCriterion::GM: return score(Criterion::GM, w, g);
    case TrainCriterion::WM: return score(Criterion::WM, w, g);
    case TrainCriterion::GD: return gd_refresh_field(w, g, w0, current);
  }
  throw InputError("unknown criterion");
}

}  // namespace detail

/// Called after every optimizer step with the current trainable values and
/// masks; lets tests instrument the update rule without changing it.
using StepObserver = std::function<void(int epoch, int step_in_epoch,
                                        const std::map<std::string, Matrix>& values,
                                        const std::map<std::string, SparseMask>& masks)>;

namespace detail {

struct SparseLoop {
  const Model* model = nullptr;
  std::vector<std::string> layer_ids;
  const std::vector<Example>* train = nullptr;
  const std::vector<Example>* val = nullptr;
  TrainConfig cfg;
  bool allow_refresh = true;          // Algorithm-style epoch-1 mask refresh
  int epochs = -1;                    // -1: use cfg.epochs
  std::map<std::string, Matrix> init_values;
  std::map<std::string, SparseMask> init_masks;
  StepObserver observer;
};

struct SparseLoopResult {
  std::map<std::string, Matrix> values;
  std::map<std::string, SparseMask> masks;
  double final_train_loss = 0.0;
  double final_val_loss = 0.0;
};

/// Shared masked-delta training loop. Forward always uses W + values*mask;
/// when refreshing, gradients are taken at the unmasked W + values and used
/// for scoring only.
inline SparseLoopResult run_sparse_loop(SparseLoop lp) {
  lp.cfg.validate();
  if (lp.train->empty()) throw InputError("training requires a nonempty train split");
  if (lp.val->empty()) throw InputError("training requires a nonempty validation split");

  std::map<std::string, Matrix> values = std::move(lp.init_values);
  std::map<std::string, SparseMask> masks = std::move(lp.init_masks);
  const std::map<std::string, Matrix> initial_values = values;  // GD drop reference

  Optimizer opt(lp.cfg.optimizer, lp.cfg.learning_rate);
  Rng shuffle_rng = Rng(lp.cfg.seed).fork(2);
  const int epochs = lp.epochs >= 0 ? lp.epochs : lp.cfg.epochs;

  auto eval_overrides = [&]() {
    std::map<std::string, Matrix> over;
    for (const std::string& id : lp.layer_ids) {
      over.emplace(id, effective_weight(lp.model->weight(id), values.at(id), masks.at(id)));
    }
    return over;
  };

  SparseLoopResult best;
  double best_val = std::numeric_limits<double>::infinity();
  int bad_epochs = 0;
  double last_train_loss = 0.0;
  bool stopped_early = false;

  for (int epoch = 1; epoch <= epochs && !stopped_early; ++epoch) {
    std::vector<size_t> order(lp.train->size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle(order, shuffle_rng);

    int step_in_epoch = 0;
    for (size_t b = 0; b < order.size(); b += static_cast<size_t>(lp.cfg.batch_size)) {
      const size_t e = std::min(order.size(), b + static_cast<size_t>(lp.cfg.batch_size));
      const Batch batch = make_batch(*lp.train, order, b, e);
      ++step_in_epoch;

      LossGrads lg;
      try {
        lg = loss_and_grads(*lp.model, eval_overrides(), batch, lp.layer_ids);
      } catch (const NumericError& err) {
        throw NumericError(std::string(err.what()) + " (epoch " + std::to_string(epoch) +
                           ", step " + std::to_string(step_in_epoch) + ")");
      }
      last_train_loss = lg.loss;

      opt.begin_step();
      for (const std::string& id : lp.layer_ids) {
        opt.step(id, values.at(id), lg.grads.at(id), masks.at(id));
      }
      if (lp.observer) lp.observer(epoch, step_in_epoch, values, masks);

      if (lp.allow_refresh && epoch == 1 && step_in_epoch % lp.cfg.mask_refresh_interval == 0) {
        // Scoring pass on the same batch with the full, unmasked delta.
        std::map<std::string, Matrix> dense;
        for (const std::string& id : lp.layer_ids) {
          dense.emplace(id, add(lp.model->weight(id), values.at(id)));
        }
        const LossGrads dense_lg = loss_and_grads(*lp.model, dense, batch, lp.layer_ids);
        std::vector<ScoreField> fields;
        for (const std::string& id : lp.layer_ids) {
          fields.push_back(detail::refresh_field(lp.cfg.criterion, values.at(id),
                                                 dense_lg.grads.at(id), initial_values.at(id),
                                                 masks.at(id)));
        }
        std::vector<bool> active(lp.layer_ids.size(), true);
        if (lp.cfg.layer_drop) active = layer_drop(fields, lp.cfg.kr);
        for (size_t i = 0; i < lp.layer_ids.size(); ++i) {
          const std::string& id = lp.layer_ids[i];
          if (!active[i]) {
            masks.at(id) = SparseMask::empty_mask(values.at(id).rows, values.at(id).cols);
          } else if (lp.cfg.block_size) {
            masks.at(id) = block_mask(fields[i], lp.cfg.kr, *lp.cfg.block_size);
          } else {
            masks.at(id) = topk_mask(fields[i], lp.cfg.kr);
          }
        }
      }
    }

    const double val_loss = detail::split_loss(*lp.model, eval_overrides(), *lp.val);
    if (val_loss < best_val) {
      best_val = val_loss;
      best.values = values;
      best.masks = masks;
      best.final_train_loss = last_train_loss;
      bad_epochs = 0;
    } else if (lp.cfg.early_stop) {
      ++bad_epochs;
      if (bad_epochs >= std::max(1, lp.cfg.patience)) stopped_early = true;
    }
  }

  SparseLoopResult out;
  if (epochs == 0) {
    out.final_val_loss = detail::split_loss(*lp.model, eval_overrides(), *lp.val);
    out.values = std::move(values);
    out.masks = std::move(masks);
  } else if (lp.cfg.early_stop) {
    out = std::move(best);  // restore the best-validation snapshot
    out.final_val_loss = best_val;
  } else {
    out.final_train_loss = last_train_loss;
    out.final_val_loss = detail::split_loss(*lp.model, eval_overrides(), *lp.val);
    out.values = std::move(values);
    out.masks = std::move(masks);
  }

  // Discard unmasked weights: outside the final mask the delta is zero.
  for (auto& [id, v] : out.values) {
    const SparseMask& m = out.masks.at(id);
    Matrix kept(v.rows, v.cols);
    m.for_each_element([&](int r, int c) { kept.at(r, c) = v.at(r, c); });
    v = std::move(kept);
  }
  return out;
}

}  // namespace detail

/// Sparse adapter training: delta starts at zero under a full mask; during
/// epoch 1 the mask is rebuilt from saliency scores every
/// mask_refresh_interval steps (scored against the unmasked forward), then
/// frozen for the remaining epochs. Early stopping restores the best
/// validation snapshot.
inline Adapter train_sparse(const Model& model, const Dataset& task, const TrainConfig& cfg,
                            const StepObserver& observer = nullptr) {
  detail::SparseLoop lp;
  lp.model = &model;
  lp.layer_ids = adapted_layer_ids(model.config);
  if (lp.layer_ids.empty()) throw InputError("train_sparse: adapt_targets is empty");
  lp.train = &task.train;
  lp.val = &task.val;
  lp.cfg = cfg;
  lp.allow_refresh = true;
  lp.observer = observer;
  for (const std::string& id : lp.layer_ids) {
    const Matrix& w = model.weight(id);
    lp.init_values.emplace(id, Matrix(w.rows, w.cols));
    lp.init_masks.emplace(id, SparseMask::full(w.rows, w.cols));
  }
  detail::SparseLoopResult res = detail::run_sparse_loop(std::move(lp));

  Adapter a;
  a.task_id = task.task_id;
  a.config = cfg;
  a.final_train_loss = res.final_train_loss;
  a.final_val_loss = res.final_val_loss;
  for (const std::string& id : adapted_layer_ids(model.config)) {
    a.layers.emplace(id, LayerDelta{std::move(res.values.at(id)), std::move(res.masks.at(id))});
  }
  return a;
}

/// Dense training of the adapted layers; returns W_finetuned - W per layer.
inline TaskVector train_full(const Model& model, const Dataset& task, const TrainConfig& cfg) {
  detail::SparseLoop lp;
  lp.model = &model;
  lp.layer_ids = adapted_layer_ids(model.config);
  if (lp.layer_ids.empty()) throw InputError("train_full: adapt_targets is empty");
  lp.train = &task.train;
  lp.val = &task.val;
  lp.cfg = cfg;
  lp.cfg.kr = 1.0;
  lp.allow_refresh = false;
  for (const std::string& id : lp.layer_ids) {
    const Matrix& w = model.weight(id);
    lp.init_values.emplace(id, Matrix(w.rows, w.cols));
    lp.init_masks.emplace(id, SparseMask::full(w.rows, w.cols));
  }
  detail::SparseLoopResult res = detail::run_sparse_loop(std::move(lp));

  TaskVector tv;
  tv.task_id = task.task_id;
  for (auto& [id, v] : res.values) tv.layers.emplace(id, std::move(v));
  return tv;
}

/// One model trained on the shuffled union of all task training sets.
inline TaskVector train_multitask(const Model& model, const std::vector<Dataset>& tasks,
                                  const TrainConfig& cfg) {
  if (tasks.empty()) throw InputError("train_multitask: empty task list");
  Dataset unioned;
  unioned.task_id = "multitask";
  for (const Dataset& t : tasks) {
    unioned.train.insert(unioned.train.end(), t.train.begin(), t.train.end());
    unioned.val.insert(unioned.val.end(), t.val.begin(), t.val.end());
    unioned.test.insert(unioned.test.end(), t.test.begin(), t.test.end());
  }
  TaskVector tv = train_full(model, unioned, cfg);
  tv.task_id = "multitask";
  return tv;
}

/// LoRA training on the adapted layers: A seeded scaled-normal, B zero so
/// the initial forward equals the base model.
inline LoraAdapter train_lora(const Model& model, const Dataset& task, int rank, TrainConfig cfg) {
  cfg.validate();
  if (rank <= 0) throw InputError("train_lora: rank must be positive");
  const std::vector<std::string> ids = adapted_layer_ids(model.config);
  if (ids.empty()) throw InputError("train_lora: adapt_targets is empty");
  if (task.train.empty() || task.val.empty()) {
    throw InputError("train_lora: need train and val splits");
  }

  LoraAdapter lora;
  lora.task_id = task.task_id;
  lora.rank = rank;
  lora.alpha = 2.0 * rank;
  Rng wr = Rng(cfg.seed).fork(3);
  for (const std::string& id : ids) {
    const Matrix& w = model.weight(id);
    lora.layers[id] = {init_matrix(wr, w.rows, rank, InitScheme::ScaledNormal),
                       Matrix(rank, w.cols)};
  }

  detail::Optimizer opt(cfg.optimizer, cfg.learning_rate);
  Rng shuffle_rng = Rng(cfg.seed).fork(2);

  LoraAdapter best = lora;
  double best_val = std::numeric_limits<double>::infinity();
  int bad_epochs = 0;

  auto val_loss_now = [&]() {
    std::vector<size_t> order(task.val.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    const size_t chunk = 64;
    double total = 0.0;
    for (size_t b = 0; b < task.val.size(); b += chunk) {
      const size_t e = std::min(task.val.size(), b + chunk);
      total += loss_and_grads_lora(model, lora, make_batch(task.val, order, b, e), false).loss *
               static_cast<double>(e - b);
    }
    return total / static_cast<double>(task.val.size());
  };

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<size_t> order(task.train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle(order, shuffle_rng);
    for (size_t b = 0; b < order.size(); b += static_cast<size_t>(cfg.batch_size)) {
      const size_t e = std::min(order.size(), b + static_cast<size_t>(cfg.batch_size));
      const Batch batch = make_batch(task.train, order, b, e);
      const LossGrads lg = loss_and_grads_lora(model, lora, batch);
      opt.begin_step();
      for (const std::string& id : ids) {
        opt.step_dense(id + ".A", lora.layers[id].first, lg.grads.at(id + ".A"));
        opt.step_dense(id + ".B", lora.layers[id].second, lg.grads.at(id + ".B"));
      }
    }
    const double vl = val_loss_now();
    if (vl < best_val) {
      best_val = vl;
      best = lora;
      bad_epochs = 0;
    } else if (cfg.early_stop) {
      ++bad_epochs;
      if (bad_epochs >= std::max(1, cfg.patience)) break;
    }
  }
  return cfg.early_stop && cfg.epochs > 0 ? best : lora;
}

enum class RecycleMode { SparseOnly, Full };

using MergedDelta = std::variant<Adapter, TaskVector>;

/// Second-stage multitask tuning of a merged delta. SparseOnly updates only
/// the coordinates in the merged adapter's union mask; Full folds the
/// merged delta into the base weights and trains every layer densely,
/// returning a task vector relative to the original model.
inline MergedDelta recycle_finetune(const Model& model, const MergedDelta& merged,
                                    const std::vector<Dataset>& tasks, RecycleMode mode,
                                    int epochs, TrainConfig cfg) {
  if (tasks.empty()) throw InputError("recycle_finetune: empty task list");
  if (epochs < 0) throw InputError("recycle_finetune: epochs must be >= 0");
  if (epochs == 0) return merged;  // identity

  Dataset unioned;
  unioned.task_id = "recycled";
  for (const Dataset& t : tasks) {
    unioned.train.insert(unioned.train.end(), t.train.begin(), t.train.end());
    unioned.val.insert(unioned.val.end(), t.val.begin(), t.val.end());
  }

  if (mode == RecycleMode::SparseOnly) {
    const Adapter* merged_adapter = std::get_if<Adapter>(&merged);
    if (!merged_adapter) {
      throw InputError("recycle_finetune: sparse-only mode requires a sparse merged adapter");
    }
    detail::SparseLoop lp;
    lp.model = &model;
    lp.train = &unioned.train;
    lp.val = &unioned.val;
    lp.cfg = cfg;
    lp.allow_refresh = false;
    lp.epochs = epochs;
    for (const auto& [id, ld] : merged_adapter->layers) {
      lp.layer_ids.push_back(id);
      lp.init_values.emplace(id, ld.values);
      lp.init_masks.emplace(id, ld.mask);
    }
    detail::SparseLoopResult res = detail::run_sparse_loop(std::move(lp));
    Adapter out;
    out.task_id = "recycled";
    out.config = cfg;
    out.final_train_loss = res.final_train_loss;
    out.final_val_loss = res.final_val_loss;
    for (const auto& [id, ld] : merged_adapter->layers) {
      out.layers.emplace(id, LayerDelta{std::move(res.values.at(id)), std::move(res.masks.at(id))});
    }
    return out;
  }

  // Full mode: W <- W + merged delta, then everything trains.
  Model folded = std::visit([&](const auto& m) { return apply_merge(model, m); }, merged);
  detail::SparseLoop lp;
  lp.model = &folded;
  lp.layer_ids = all_layer_ids(model.config);
  lp.train = &unioned.train;
  lp.val = &unioned.val;
  lp.cfg = cfg;
  lp.cfg.kr = 1.0;
  lp.allow_refresh = false;
  lp.epochs = epochs;
  for (const std::string& id : lp.layer_ids) {
    const Matrix& w = folded.weight(id);
    lp.init_values.emplace(id, Matrix(w.rows, w.cols));
    lp.init_masks.emplace(id, SparseMask::full(w.rows, w.cols));
  }
  detail::SparseLoopResult res = detail::run_sparse_loop(std::move(lp));

  // tau = merged_delta + trained_delta, so adding tau to the original base
  // reproduces folded + trained weights.
  std::map<std::string, Matrix> merged_deltas;
  if (const Adapter* a = std::get_if<Adapter>(&merged)) {
    for (const auto& [id, ld] : a->layers) {
      Matrix d(ld.values.rows, ld.values.cols);
      ld.mask.for_each_element([&](int r, int c) { d.at(r, c) = ld.values.at(r, c); });
      merged_deltas.emplace(id, std::move(d));
    }
  } else {
    merged_deltas = std::get<TaskVector>(merged).layers;
  }
  TaskVector out;
  out.task_id = "recycled";
  for (const std::string& id : all_layer_ids(model.config)) {
    Matrix tau = std::move(res.values.at(id));
    auto it = merged_deltas.find(id);
    if (it != merged_deltas.end()) tau = add(it->second, tau);
    out.layers.emplace(id, std::move(tau));
  }
  return out;
}

}  // namespace sparseadapt
