#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "sparseadapt/adapter.hpp"
#include "sparseadapt/errors.hpp"
#include "sparseadapt/matrix.hpp"
#include "sparseadapt/model.hpp"
#include "sparseadapt/saliency.hpp"

namespace sparseadapt {

enum class MergeMethod { SparseOverlap, Uniform, LoraAverage, TaskArithmetic, Ties, Breadcrumbs };

inline std::string merge_method_name(MergeMethod m) {
  switch (m) {
    case MergeMethod::SparseOverlap: return "sparse-overlap";
    case MergeMethod::Uniform: return "uniform";
    case MergeMethod::LoraAverage: return "lora-average";
    case MergeMethod::TaskArithmetic: return "task-arithmetic";
    case MergeMethod::Ties: return "ties";
    case MergeMethod::Breadcrumbs: return "breadcrumbs";
  }
  return "?";
}

inline MergeMethod merge_method_from_name(const std::string& s) {
  if (s == "sparse-overlap") return MergeMethod::SparseOverlap;
  if (s == "uniform") return MergeMethod::Uniform;
  if (s == "lora-average") return MergeMethod::LoraAverage;
  if (s == "task-arithmetic") return MergeMethod::TaskArithmetic;
  if (s == "ties") return MergeMethod::Ties;
  if (s == "breadcrumbs") return MergeMethod::Breadcrumbs;
  throw InputError("unknown merge method '" + s + "'");
}

struct MergeSpec {
  MergeMethod method = MergeMethod::SparseOverlap;
  double lambda = 0.4;
  double ties_trim_fraction = 0.2;
  double breadcrumbs_top = 0.01;     // beta: outlier fraction zeroed per vector
  double breadcrumbs_bottom = 0.14;  // gamma: negligible fraction zeroed per vector

  void validate() const {
    if (lambda <= 0.0) throw InputError("MergeSpec: lambda must be > 0");
    if (!(ties_trim_fraction > 0.0 && ties_trim_fraction <= 1.0)) {
      throw InputError("MergeSpec: ties trim fraction must be in (0,1]");
    }
    if (breadcrumbs_top < 0.0 || breadcrumbs_bottom < 0.0 ||
        breadcrumbs_top + breadcrumbs_bottom >= 1.0) {
      throw InputError("MergeSpec: breadcrumbs fractions must be >= 0 with beta + gamma < 1");
    }
  }
};

/// Per-coordinate count of how many masks selected the entry, floored at 1
/// so it can serve as a divisor.
inline Matrix overlap_factor(const std::vector<SparseMask>& masks) {
  if (masks.empty()) throw InputError("overlap_factor: empty mask list");
  const int rows = masks[0].rows, cols = masks[0].cols;
  for (const SparseMask& m : masks) {
    if (m.rows != rows || m.cols != cols) {
      throw DimensionError("overlap_factor: mask shapes disagree, " + Matrix::shape_str(rows, cols) +
                           " vs " + Matrix::shape_str(m.rows, m.cols));
    }
  }
  Matrix f(rows, cols);
  for (const SparseMask& m : masks) {
    m.for_each_element([&](int r, int c) { f.at(r, c) += 1.0; });
  }
  for (double& v : f.data) v = std::max(v, 1.0);
  return f;
}

namespace detail {

inline void require_same_layer_sets(const std::map<std::string, Matrix>& a,
                                    const std::map<std::string, Matrix>& b, const char* op) {
  if (a.size() != b.size()) throw InputError(std::string(op) + ": layer sets differ");
  for (const auto& [id, m] : a) {
    auto it = b.find(id);
    if (it == b.end()) throw InputError(std::string(op) + ": layer '" + id + "' missing");
    require_same_shape(m, it->second, op);
  }
}

/// Union of masks over one layer. Block structure is preserved when every
/// input is block-kind with one block size; otherwise the union is listed
/// element by element.
inline SparseMask union_mask(const std::vector<const SparseMask*>& masks) {
  const int rows = masks[0]->rows, cols = masks[0]->cols;
  bool all_block = true;
  for (const SparseMask* m : masks) {
    all_block = all_block && m->kind == MaskKind::Block && m->block_size == masks[0]->block_size;
  }
  SparseMask u = SparseMask::empty_mask(rows, cols);
  if (all_block) {
    u.kind = MaskKind::Block;
    u.block_size = masks[0]->block_size;
    for (const SparseMask* m : masks) u.coords.insert(u.coords.end(), m->coords.begin(), m->coords.end());
  } else {
    for (const SparseMask* m : masks) {
      m->for_each_element([&](int r, int c) {
        u.coords.push_back({static_cast<uint32_t>(r), static_cast<uint32_t>(c)});
      });
    }
  }
  std::sort(u.coords.begin(), u.coords.end());
  u.coords.erase(std::unique(u.coords.begin(), u.coords.end()), u.coords.end());
  return u;
}

}  // namespace detail

namespace detail {

/// Canonical accumulation: contributions are sorted ascending before
/// summing, so every merge is bitwise permutation-invariant in its inputs.
inline double sorted_sum(std::vector<double>& vals) {
  std::sort(vals.begin(), vals.end());
  double s = 0.0;
  for (double v : vals) s += v;
  return s;
}

/// Mean of the selecting values, evaluated as s + sum(v - s)/n with s the
/// smallest value. Algebraically (sum v)/n, but exact when all values agree
/// (merging N copies of an adapter is the identity) and when n == 1.
inline double shifted_mean(std::vector<double>& vals) {
  std::sort(vals.begin(), vals.end());
  const double s = vals[0];
  double diff = 0.0;
  for (double v : vals) diff += v - s;
  return s + diff / static_cast<double>(vals.size());
}

}  // namespace detail

/// Overlap-weighted sparse merge: per coordinate, the sum of the masked
/// deltas divided by the overlap count F_o (the mean over selecting tasks).
inline Adapter merge_sparse(const std::vector<Adapter>& adapters) {
  if (adapters.empty()) throw InputError("merge_sparse: empty adapter list");
  const Adapter& head = adapters[0];
  for (const Adapter& a : adapters) {
    if (a.layers.size() != head.layers.size()) throw InputError("merge_sparse: layer sets differ");
    for (const auto& [id, ld] : head.layers) {
      auto it = a.layers.find(id);
      if (it == a.layers.end()) throw InputError("merge_sparse: layer '" + id + "' missing");
      require_same_shape(ld.values, it->second.values, "merge_sparse");
    }
  }

  Adapter out;
  out.task_id = "merged";
  out.config = head.config;
  for (const auto& [id, head_ld] : head.layers) {
    const int rows = head_ld.values.rows, cols = head_ld.values.cols;
    std::vector<std::vector<double>> selected(static_cast<size_t>(rows) * cols);
    std::vector<const SparseMask*> masks;
    for (const Adapter& a : adapters) {
      const LayerDelta& ld = a.layers.at(id);
      masks.push_back(&ld.mask);
      ld.mask.for_each_element([&](int r, int c) {
        selected[static_cast<size_t>(r) * cols + c].push_back(ld.values.at(r, c));
      });
    }
    LayerDelta merged;
    merged.values = Matrix(rows, cols);
    for (size_t i = 0; i < selected.size(); ++i) {
      if (!selected[i].empty()) merged.values.data[i] = detail::shifted_mean(selected[i]);
    }
    merged.mask = detail::union_mask(masks);
    out.layers.emplace(id, std::move(merged));
  }
  return out;
}

namespace detail {
inline std::map<std::string, Matrix> sum_layers(const std::vector<TaskVector>& vectors,
                                                const char* op) {
  if (vectors.empty()) throw InputError(std::string(op) + ": empty task-vector list");
  for (const TaskVector& v : vectors) require_same_layer_sets(vectors[0].layers, v.layers, op);
  std::map<std::string, Matrix> out;
  std::vector<double> vals(vectors.size());
  for (const auto& [id, proto] : vectors[0].layers) {
    Matrix acc(proto.rows, proto.cols);
    for (size_t i = 0; i < acc.data.size(); ++i) {
      for (size_t n = 0; n < vectors.size(); ++n) vals[n] = vectors[n].layers.at(id).data[i];
      acc.data[i] = sorted_sum(vals);
    }
    out.emplace(id, std::move(acc));
  }
  return out;
}
}  // namespace detail

/// lambda * sum of task vectors.
inline TaskVector task_arithmetic(const std::vector<TaskVector>& vectors, double lambda) {
  std::map<std::string, Matrix> sums = detail::sum_layers(vectors, "task_arithmetic");
  TaskVector out;
  out.task_id = "merged";
  for (auto& [id, m] : sums) out.layers.emplace(id, scale(m, lambda));
  return out;
}

/// Coordinatewise arithmetic mean, computed as sum * (1/N) so that it is
/// bitwise identical to task_arithmetic with lambda = 1/N.
inline TaskVector merge_uniform(const std::vector<TaskVector>& vectors) {
  if (vectors.empty()) throw InputError("merge_uniform: empty task-vector list");
  return task_arithmetic(vectors, 1.0 / static_cast<double>(vectors.size()));
}

/// Mean of the materialized low-rank deltas.
inline TaskVector merge_lora(const std::vector<LoraAdapter>& loras) {
  if (loras.empty()) throw InputError("merge_lora: empty adapter list");
  std::vector<TaskVector> deltas;
  deltas.reserve(loras.size());
  for (const LoraAdapter& l : loras) {
    TaskVector tv;
    tv.task_id = l.task_id;
    tv.layers = lora_deltas(l);
    deltas.push_back(std::move(tv));
  }
  return merge_uniform(deltas);
}

/// TIES: per vector keep the top trim_fraction coordinates by magnitude
/// (per layer), elect each coordinate's sign by larger total magnitude,
/// average the surviving entries that strictly agree with the elected sign,
/// and scale by lambda. Zeros never agree with either sign.
inline TaskVector ties(const std::vector<TaskVector>& vectors, double lambda, double trim_fraction) {
  if (vectors.empty()) throw InputError("ties: empty task-vector list");
  if (!(trim_fraction > 0.0 && trim_fraction <= 1.0)) {
    throw InputError("ties: trim_fraction must be in (0,1]");
  }
  for (const TaskVector& v : vectors) detail::require_same_layer_sets(vectors[0].layers, v.layers, "ties");

  TaskVector out;
  out.task_id = "merged";
  for (const auto& [id, proto] : vectors[0].layers) {
    const size_t n = proto.data.size();
    const auto keep = static_cast<size_t>(std::floor(trim_fraction * static_cast<double>(n)));
    // Trimmed copies: everything outside each vector's top-k magnitudes is zeroed.
    std::vector<std::vector<double>> trimmed;
    for (const TaskVector& v : vectors) {
      const Matrix& m = v.layers.at(id);
      std::vector<double> mags(n);
      for (size_t i = 0; i < n; ++i) mags[i] = std::fabs(m.data[i]);
      std::vector<double> t(n, 0.0);
      if (keep > 0) {
        for (size_t i : detail::topk_indices(mags, keep)) t[i] = m.data[i];
      }
      trimmed.push_back(std::move(t));
    }
    Matrix merged(proto.rows, proto.cols);
    std::vector<double> vals;
    for (size_t i = 0; i < n; ++i) {
      vals.clear();
      for (const auto& t : trimmed) {
        if (t[i] != 0.0) vals.push_back(t[i]);
      }
      std::sort(vals.begin(), vals.end());
      double pos = 0.0, neg = 0.0;
      for (double v : vals) {
        if (v > 0.0) pos += v;
        if (v < 0.0) neg -= v;
      }
      const double sign = pos >= neg ? 1.0 : -1.0;
      double sum = 0.0;
      int cnt = 0;
      for (double v : vals) {
        if (v * sign > 0.0) {
          sum += v;
          ++cnt;
        }
      }
      merged.data[i] = cnt > 0 ? lambda * (sum / cnt) : 0.0;
    }
    out.layers.emplace(id, std::move(merged));
  }
  return out;
}

/// Breadcrumbs: per vector per layer, zero the top beta fraction by absolute
/// magnitude (outliers) and the bottom gamma fraction (negligible), then sum
/// the survivors and scale by lambda.
inline TaskVector breadcrumbs(const std::vector<TaskVector>& vectors, double lambda, double beta,
                              double gamma) {
  if (vectors.empty()) throw InputError("breadcrumbs: empty task-vector list");
  if (beta < 0.0 || gamma < 0.0 || beta + gamma >= 1.0) {
    throw InputError("breadcrumbs: need beta, gamma >= 0 and beta + gamma < 1");
  }
  for (const TaskVector& v : vectors) {
    detail::require_same_layer_sets(vectors[0].layers, v.layers, "breadcrumbs");
  }

  TaskVector out;
  out.task_id = "merged";
  for (const auto& [id, proto] : vectors[0].layers) {
    const size_t n = proto.data.size();
    const auto n_top = static_cast<size_t>(std::floor(beta * static_cast<double>(n)));
    const auto n_bot = static_cast<size_t>(std::floor(gamma * static_cast<double>(n)));
    // Per vector: survivors after dropping both magnitude extremes
    // (magnitude order, ties by lowest index).
    std::vector<std::vector<double>> survivors(n);
    for (const TaskVector& v : vectors) {
      const Matrix& m = v.layers.at(id);
      std::vector<size_t> order(n);
      std::iota(order.begin(), order.end(), size_t{0});
      std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        const double ma = std::fabs(m.data[a]), mb = std::fabs(m.data[b]);
        if (ma != mb) return ma > mb;
        return a < b;
      });
      for (size_t k = n_top; k < n - n_bot; ++k) survivors[order[k]].push_back(m.data[order[k]]);
    }
    Matrix acc(proto.rows, proto.cols);
    for (size_t i = 0; i < n; ++i) {
      if (!survivors[i].empty()) acc.data[i] = lambda * detail::sorted_sum(survivors[i]);
    }
    out.layers.emplace(id, std::move(acc));
  }
  return out;
}

/// Effective-weight overrides (layer id -> W + delta) for evaluation.
inline std::map<std::string, Matrix> delta_overrides(const Model& model, const Adapter& adapter) {
  std::map<std::string, Matrix> out;
  for (const auto& [id, ld] : adapter.layers) {
    out.emplace(id, effective_weight(model.weight(id), ld.values, ld.mask));
  }
  return out;
}

inline std::map<std::string, Matrix> delta_overrides(const Model& model, const TaskVector& tv) {
  std::map<std::string, Matrix> out;
  for (const auto& [id, delta] : tv.layers) {
    out.emplace(id, add(model.weight(id), delta));
  }
  return out;
}

/// New model whose adapted layers carry W + delta; the input model's storage
/// is never touched.
inline Model apply_merge(const Model& model, const Adapter& adapter) {
  Model out = model;
  for (auto& [id, w] : delta_overrides(model, adapter)) out.weights.at(id) = std::move(w);
  return out;
}

inline Model apply_merge(const Model& model, const TaskVector& tv) {
  Model out = model;
  for (auto& [id, w] : delta_overrides(model, tv)) out.weights.at(id) = std::move(w);
  return out;
}

}  // namespace sparseadapt
