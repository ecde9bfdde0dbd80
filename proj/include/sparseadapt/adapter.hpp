#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>

#include "sparseadapt/errors.hpp"
#include "sparseadapt/matrix.hpp"
#include "sparseadapt/saliency.hpp"

namespace sparseadapt {

enum class OptimizerKind { Sgd, Adam };

inline std::string optimizer_name(OptimizerKind k) {
  return k == OptimizerKind::Sgd ? "sgd" : "adam";
}

inline OptimizerKind optimizer_from_name(const std::string& s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adam") return OptimizerKind::Adam;
  throw InputError("unknown optimizer '" + s + "'");
}

/// Scoring tag used at mask-refresh time. GD plugs the grow/drop score pair
/// into the refresh slot: entries currently in the mask rank by travel from
/// init, entries outside by gradient magnitude.
enum class TrainCriterion { MCS, CS, GM, WM, GD };

inline std::string train_criterion_name(TrainCriterion c) {
  switch (c) {
    case TrainCriterion::MCS: return "mcs";
    case TrainCriterion::CS: return "cs";
    case TrainCriterion::GM: return "gm";
    case TrainCriterion::WM: return "wm";
    case TrainCriterion::GD: return "gd";
  }
  return "?";
}

inline TrainCriterion train_criterion_from_name(const std::string& s) {
  if (s == "mcs") return TrainCriterion::MCS;
  if (s == "cs") return TrainCriterion::CS;
  if (s == "gm") return TrainCriterion::GM;
  if (s == "wm") return TrainCriterion::WM;
  if (s == "gd") return TrainCriterion::GD;
  throw InputError("unknown train criterion '" + s + "'");
}

struct TrainConfig {
  double kr = 0.1;
  int epochs = 5;
  int mask_refresh_interval = 100;  // masks refresh only during epoch 1
  TrainCriterion criterion = TrainCriterion::MCS;
  std::optional<int> block_size;  // block-sparse masks when set
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  bool layer_drop = false;
  uint64_t seed = 0;
  int batch_size = 16;
  bool early_stop = true;
  int patience = 1;  // epochs without val improvement before stopping

  void validate() const {
    if (!(kr > 0.0 && kr <= 1.0)) throw InputError("TrainConfig: kr must be in (0,1]");
    if (epochs < 0) throw InputError("TrainConfig: epochs must be >= 0");
    if (mask_refresh_interval <= 0) throw InputError("TrainConfig: mask_refresh_interval must be positive");
    if (learning_rate <= 0.0) throw InputError("TrainConfig: learning_rate must be positive");
    if (batch_size <= 0) throw InputError("TrainConfig: batch_size must be positive");
    if (block_size && *block_size <= 0) throw InputError("TrainConfig: block_size must be positive");
    if (patience < 0) throw InputError("TrainConfig: patience must be >= 0");
  }
};

struct LayerDelta {
  Matrix values;    // dense storage of the trained delta (zero outside mask once finalized)
  SparseMask mask;
};

/// Trained sparse adapter: per-layer delta values and masks plus run metadata.
struct Adapter {
  std::string task_id;
  std::map<std::string, LayerDelta> layers;
  TrainConfig config;
  double final_train_loss = 0.0;
  double final_val_loss = 0.0;
};

/// Dense per-layer parameter difference W_finetuned - W.
struct TaskVector {
  std::string task_id;
  std::map<std::string, Matrix> layers;
};

}  // namespace sparseadapt
