#pragma once

#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sparseadapt/dataset.hpp"
#include "sparseadapt/errors.hpp"
#include "sparseadapt/matrix.hpp"
#include "sparseadapt/rng.hpp"
#include "sparseadapt/saliency.hpp"
#include "sparseadapt/tape.hpp"

namespace sparseadapt {

/// Layers an adapter may attach to. QKV is the fused query-key-value
/// projection; O the attention output projection; MLP the down projection
/// of the feed-forward block.
enum class AdaptTarget { QKV, O, MLP };

inline std::string adapt_target_name(AdaptTarget t) {
  switch (t) {
    case AdaptTarget::QKV: return "qkv";
    case AdaptTarget::O: return "o";
    case AdaptTarget::MLP: return "mlp";
  }
  return "?";
}

inline AdaptTarget adapt_target_from_name(const std::string& s) {
  if (s == "qkv") return AdaptTarget::QKV;
  if (s == "o") return AdaptTarget::O;
  if (s == "mlp") return AdaptTarget::MLP;
  throw InputError("unknown adapt target '" + s + "'");
}

struct ModelConfig {
  int num_layers = 4;
  int hidden_dim = 32;
  int num_heads = 2;
  int vocab_size = 16;
  int num_classes = 4;
  int seq_len = 8;
  std::vector<AdaptTarget> adapt_targets = {AdaptTarget::QKV};

  void validate() const {
    if (num_layers <= 0) throw InputError("ModelConfig: num_layers must be positive");
    if (hidden_dim <= 0) throw InputError("ModelConfig: hidden_dim must be positive");
    if (num_heads <= 0) throw InputError("ModelConfig: num_heads must be positive");
    if (hidden_dim % num_heads != 0) {
      throw InputError("ModelConfig: hidden_dim " + std::to_string(hidden_dim) +
                       " not divisible by num_heads " + std::to_string(num_heads));
    }
    if (vocab_size <= 0) throw InputError("ModelConfig: vocab_size must be positive");
    if (num_classes <= 1) throw InputError("ModelConfig: num_classes must be at least 2");
    if (seq_len <= 0) throw InputError("ModelConfig: seq_len must be positive");
  }
};

/// Frozen base network: embedding, per-block fused-QKV attention + MLP,
/// final classification head. Weights are immutable during adapter training.
struct Model {
  ModelConfig config;
  std::map<std::string, Matrix> weights;

  const Matrix& weight(const std::string& id) const {
    auto it = weights.find(id);
    if (it == weights.end()) throw InputError("Model: no layer '" + id + "'");
    return it->second;
  }
};

inline std::string block_layer_id(int block, AdaptTarget t) {
  const char* suffix = t == AdaptTarget::QKV ? "qkv" : (t == AdaptTarget::O ? "o" : "mlp_down");
  return "blk" + std::to_string(block) + "." + suffix;
}

/// Canonical ordered list of layer ids adapters attach to.
inline std::vector<std::string> adapted_layer_ids(const ModelConfig& cfg) {
  std::vector<std::string> ids;
  for (int i = 0; i < cfg.num_layers; ++i) {
    for (AdaptTarget t : {AdaptTarget::QKV, AdaptTarget::O, AdaptTarget::MLP}) {
      for (AdaptTarget want : cfg.adapt_targets) {
        if (t == want) ids.push_back(block_layer_id(i, t));
      }
    }
  }
  return ids;
}

/// All weight layer ids in forward order (embedding first, head last).
inline std::vector<std::string> all_layer_ids(const ModelConfig& cfg) {
  std::vector<std::string> ids{"embed"};
  for (int i = 0; i < cfg.num_layers; ++i) {
    const std::string p = "blk" + std::to_string(i) + ".";
    ids.push_back(p + "qkv");
    ids.push_back(p + "o");
    ids.push_back(p + "mlp_up");
    ids.push_back(p + "mlp_down");
  }
  ids.push_back("head");
  return ids;
}

/// Deterministic for a given rng seed: same seed, same weights, bitwise.
inline Model build_model(const ModelConfig& cfg, Rng rng) {
  cfg.validate();
  Model m;
  m.config = cfg;
  const int h = cfg.hidden_dim;
  m.weights.emplace("embed", init_matrix(rng, cfg.vocab_size, h, InitScheme::ScaledNormal));
  for (int i = 0; i < cfg.num_layers; ++i) {
    const std::string p = "blk" + std::to_string(i) + ".";
    m.weights.emplace(p + "qkv", init_matrix(rng, h, 3 * h, InitScheme::ScaledNormal));
    m.weights.emplace(p + "o", init_matrix(rng, h, h, InitScheme::ScaledNormal));
    m.weights.emplace(p + "mlp_up", init_matrix(rng, h, 4 * h, InitScheme::ScaledNormal));
    m.weights.emplace(p + "mlp_down", init_matrix(rng, 4 * h, h, InitScheme::ScaledNormal));
  }
  m.weights.emplace("head", init_matrix(rng, h, cfg.num_classes, InitScheme::ScaledNormal));
  return m;
}

/// W + delta restricted to the mask: entries outside the mask are copied
/// from the base bit-for-bit, never touched by arithmetic.
inline Matrix effective_weight(const Matrix& base, const Matrix& delta, const SparseMask& mask) {
  require_same_shape(base, delta, "effective_weight");
  if (mask.rows != base.rows || mask.cols != base.cols) {
    throw DimensionError("effective_weight: mask shape " + Matrix::shape_str(mask.rows, mask.cols) +
                         " vs weight " + base.shape());
  }
  Matrix out = base;
  mask.for_each_element([&](int r, int c) { out.at(r, c) += delta.at(r, c); });
  return out;
}

/// Per-layer low-rank pair; delta(A, B) = (alpha / rank) * A * B.
struct LoraAdapter {
  std::string task_id;
  int rank = 4;
  double alpha = 8.0;
  std::map<std::string, std::pair<Matrix, Matrix>> layers;  // id -> (A: d1 x r, B: r x d2)
};

inline Matrix lora_delta(const Matrix& a, const Matrix& b, int rank, double alpha) {
  if (a.cols != rank || b.rows != rank) {
    throw DimensionError("lora_delta: rank " + std::to_string(rank) + " does not compose " +
                         a.shape() + " x " + b.shape());
  }
  return scale(matmul(a, b), alpha / rank);
}

inline std::map<std::string, Matrix> lora_deltas(const LoraAdapter& lora) {
  std::map<std::string, Matrix> out;
  for (const auto& [id, ab] : lora.layers) {
    out.emplace(id, lora_delta(ab.first, ab.second, lora.rank, lora.alpha));
  }
  return out;
}

/// Maps a layer id to its tape variable. Lets callers swap in effective
/// weights (sparse), composed weights (LoRA), or plain constants.
using WeightResolver = std::function<GradientTape::Var(GradientTape&, const std::string&)>;

/// Records the full classification forward pass on the tape and returns the
/// logits var. `trace`, when given, collects (layer id, var) pairs so a
/// non-finite loss can be blamed on the first offending layer.
inline GradientTape::Var forward_logits(GradientTape& tape, const Model& m, const Batch& batch,
                                        const WeightResolver& resolve,
                                        std::vector<std::pair<std::string, GradientTape::Var>>* trace = nullptr) {
  if (batch.batch_size <= 0) throw InputError("forward: empty batch");
  if (batch.seq_len != m.config.seq_len) {
    throw InputError("forward: batch seq_len " + std::to_string(batch.seq_len) +
                     " != model seq_len " + std::to_string(m.config.seq_len));
  }
  const int B = batch.batch_size, S = batch.seq_len;
  auto record = [&](const std::string& id, GradientTape::Var v) {
    if (trace) trace->emplace_back(id, v);
    return v;
  };
  GradientTape::Var x = record("embed", tape.embedding(resolve(tape, "embed"), batch.tokens));
  for (int i = 0; i < m.config.num_layers; ++i) {
    const std::string p = "blk" + std::to_string(i) + ".";
    GradientTape::Var hn = tape.layer_norm(x);
    GradientTape::Var qkv = tape.matmul(hn, resolve(tape, p + "qkv"));
    GradientTape::Var att = record(p + "qkv", tape.attention(qkv, B, S, m.config.num_heads));
    GradientTape::Var o = record(p + "o", tape.matmul(att, resolve(tape, p + "o")));
    x = tape.add(x, o);
    GradientTape::Var hn2 = tape.layer_norm(x);
    GradientTape::Var up = record(p + "mlp_up", tape.relu(tape.matmul(hn2, resolve(tape, p + "mlp_up"))));
    GradientTape::Var down = record(p + "mlp_down", tape.matmul(up, resolve(tape, p + "mlp_down")));
    x = tape.add(x, down);
  }
  x = tape.layer_norm(x);
  GradientTape::Var pooled = tape.mean_pool(x, B, S);
  return record("head", tape.matmul(pooled, resolve(tape, "head")));
}

/// Resolver over base weights with optional per-layer overrides; ids in
/// `trainables` register as named tape parameters.
inline WeightResolver make_resolver(const Model& m, const std::map<std::string, Matrix>* overrides,
                                    const std::vector<std::string>* trainables) {
  return [&m, overrides, trainables](GradientTape& tape, const std::string& id) {
    const Matrix* w = nullptr;
    if (overrides) {
      auto it = overrides->find(id);
      if (it != overrides->end()) w = &it->second;
    }
    if (!w) w = &m.weight(id);
    if (trainables &&
        std::find(trainables->begin(), trainables->end(), id) != trainables->end()) {
      return tape.param(*w, id);
    }
    return tape.constant(*w);
  };
}

struct LossGrads {
  double loss = 0.0;
  std::map<std::string, Matrix> grads;  // one entry per requested trainable
};

namespace detail {
inline void throw_if_nonfinite(const GradientTape& tape, double loss,
                               const std::vector<std::pair<std::string, GradientTape::Var>>& trace) {
  if (std::isfinite(loss)) return;
  for (const auto& [id, v] : trace) {
    if (!tape.value(v).all_finite()) {
      throw NumericError("non-finite activation after layer '" + id + "'");
    }
  }
  throw NumericError("non-finite loss");
}
}  // namespace detail

/// Mean cross-entropy and exact gradients for every requested trainable.
/// Layers in `overrides` replace base weights for this evaluation (the use
/// case: effective weights W + dW). Base weights outside `trainables`
/// receive no gradient.
inline LossGrads loss_and_grads(const Model& m, const std::map<std::string, Matrix>& overrides,
                                const Batch& batch, const std::vector<std::string>& trainables) {
  if (batch.batch_size <= 0 || batch.labels.empty()) throw InputError("loss_and_grads: empty batch");
  for (const std::string& id : trainables) {
    if (m.weights.find(id) == m.weights.end() && overrides.find(id) == overrides.end()) {
      throw InputError("loss_and_grads: unknown trainable '" + id + "'");
    }
  }
  GradientTape tape;
  std::vector<std::pair<std::string, GradientTape::Var>> trace;
  GradientTape::Var logits =
      forward_logits(tape, m, batch, make_resolver(m, &overrides, &trainables), &trace);
  GradientTape::Var loss = tape.cross_entropy(logits, batch.labels);
  LossGrads out;
  out.loss = tape.scalar(loss);
  detail::throw_if_nonfinite(tape, out.loss, trace);
  if (!trainables.empty()) {
    tape.backward(loss);
    out.grads = tape.gradients();
  }
  return out;
}

/// Forward-only logits with optional weight overrides.
inline Matrix predict_logits(const Model& m, const std::map<std::string, Matrix>& overrides,
                             const Batch& batch) {
  GradientTape tape;
  GradientTape::Var logits = forward_logits(tape, m, batch, make_resolver(m, &overrides, nullptr));
  return tape.value(logits);
}

/// Mean cross-entropy without gradients.
inline double forward_loss(const Model& m, const std::map<std::string, Matrix>& overrides,
                           const Batch& batch) {
  GradientTape tape;
  std::vector<std::pair<std::string, GradientTape::Var>> trace;
  GradientTape::Var logits = forward_logits(tape, m, batch, make_resolver(m, &overrides, nullptr), &trace);
  const double loss = tape.scalar(tape.cross_entropy(logits, batch.labels));
  detail::throw_if_nonfinite(tape, loss, trace);
  return loss;
}

/// LoRA forward: effective weight W + (alpha/r) A B is composed on the tape
/// so backward yields exact dA, dB (keyed "<layer>.A", "<layer>.B").
inline LossGrads loss_and_grads_lora(const Model& m, const LoraAdapter& lora, const Batch& batch,
                                     bool with_grads = true) {
  if (batch.batch_size <= 0) throw InputError("loss_and_grads_lora: empty batch");
  if (lora.rank <= 0) throw InputError("loss_and_grads_lora: rank must be positive");
  GradientTape tape;
  WeightResolver resolve = [&](GradientTape& t, const std::string& id) {
    auto it = lora.layers.find(id);
    if (it == lora.layers.end()) return t.constant(m.weight(id));
    GradientTape::Var a = with_grads ? t.param(it->second.first, id + ".A") : t.constant(it->second.first);
    GradientTape::Var b = with_grads ? t.param(it->second.second, id + ".B") : t.constant(it->second.second);
    GradientTape::Var delta = t.scale(t.matmul(a, b), lora.alpha / lora.rank);
    return t.add(t.constant(m.weight(id)), delta);
  };
  std::vector<std::pair<std::string, GradientTape::Var>> trace;
  GradientTape::Var logits = forward_logits(tape, m, batch, resolve, &trace);
  GradientTape::Var loss = tape.cross_entropy(logits, batch.labels);
  LossGrads out;
  out.loss = tape.scalar(loss);
  detail::throw_if_nonfinite(tape, out.loss, trace);
  if (with_grads) {
    tape.backward(loss);
    out.grads = tape.gradients();
  }
  return out;
}

}  // namespace sparseadapt
