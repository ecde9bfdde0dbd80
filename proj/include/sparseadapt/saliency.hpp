#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "sparseadapt/errors.hpp"
#include "sparseadapt/matrix.hpp"

namespace sparseadapt {

struct Coord {
  uint32_t row = 0;
  uint32_t col = 0;
  auto operator<=>(const Coord&) const = default;
};

enum class MaskKind { Element, Block };

/// Set of trainable coordinates within one matrix. Element masks list entry
/// coordinates; block masks list block-grid coordinates of disjoint,
/// grid-aligned block_size x block_size tiles. Coordinate lists are sorted.
struct SparseMask {
  int rows = 0;
  int cols = 0;
  MaskKind kind = MaskKind::Element;
  int block_size = 0;          // Block kind only
  std::vector<Coord> coords;   // element coords, or block-grid coords

  static SparseMask full(int rows, int cols) {
    SparseMask m;
    m.rows = rows;
    m.cols = cols;
    m.coords.reserve(static_cast<size_t>(rows) * cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c)
        m.coords.push_back({static_cast<uint32_t>(r), static_cast<uint32_t>(c)});
    return m;
  }

  static SparseMask empty_mask(int rows, int cols) {
    SparseMask m;
    m.rows = rows;
    m.cols = cols;
    return m;
  }

  /// Number of selected matrix entries (blocks expand to block_size^2 each).
  size_t num_elements() const {
    return kind == MaskKind::Element
               ? coords.size()
               : coords.size() * static_cast<size_t>(block_size) * block_size;
  }

  bool contains(int r, int c) const {
    Coord key;
    if (kind == MaskKind::Element) {
      key = {static_cast<uint32_t>(r), static_cast<uint32_t>(c)};
    } else {
      key = {static_cast<uint32_t>(r / block_size), static_cast<uint32_t>(c / block_size)};
    }
    return std::binary_search(coords.begin(), coords.end(), key);
  }

  /// Visits every selected (row, col) entry in sorted order for element
  /// masks; block masks visit block by block, row-major within each block.
  template <typename Fn>
  void for_each_element(Fn&& fn) const {
    if (kind == MaskKind::Element) {
      for (const Coord& c : coords) fn(static_cast<int>(c.row), static_cast<int>(c.col));
    } else {
      for (const Coord& b : coords)
        for (int r = 0; r < block_size; ++r)
          for (int c = 0; c < block_size; ++c)
            fn(static_cast<int>(b.row) * block_size + r, static_cast<int>(b.col) * block_size + c);
    }
  }

  /// Dense 0/1 indicator with the mask's shape.
  Matrix indicator() const {
    Matrix m(rows, cols);
    for_each_element([&](int r, int c) { m.at(r, c) = 1.0; });
    return m;
  }

  bool is_full() const { return num_elements() == static_cast<size_t>(rows) * cols; }

  bool operator==(const SparseMask&) const = default;
};

/// Scoring criteria for parameter selection. MCS is the signed product
/// w * dL/dw; CS its absolute value; GM and WM are gradient and weight
/// magnitudes; the GD pair scores drops by travel from init and grows by
/// gradient magnitude.
enum class Criterion { MCS, CS, GM, WM, GDDrop, GDGrow };

inline std::string criterion_name(Criterion c) {
  switch (c) {
    case Criterion::MCS: return "mcs";
    case Criterion::CS: return "cs";
    case Criterion::GM: return "gm";
    case Criterion::WM: return "wm";
    case Criterion::GDDrop: return "gd-drop";
    case Criterion::GDGrow: return "gd-grow";
  }
  return "?";
}

inline Criterion criterion_from_name(const std::string& s) {
  if (s == "mcs") return Criterion::MCS;
  if (s == "cs") return Criterion::CS;
  if (s == "gm") return Criterion::GM;
  if (s == "wm") return Criterion::WM;
  if (s == "gd-drop") return Criterion::GDDrop;
  if (s == "gd-grow") return Criterion::GDGrow;
  throw InputError("unknown criterion '" + s + "'");
}

/// Per-entry importance scores for one layer, tagged with the criterion
/// that produced them.
struct ScoreField {
  Matrix scores;
  Criterion criterion = Criterion::MCS;

  int rows() const { return scores.rows; }
  int cols() const { return scores.cols; }
};

/// Scores every entry of one layer. `initial_weights` is required for
/// GDDrop (travel from initialization) and ignored otherwise.
inline ScoreField score(Criterion criterion, const Matrix& weights, const Matrix& grads,
                        const Matrix* initial_weights = nullptr) {
  require_same_shape(weights, grads, "score");
  ScoreField f;
  f.criterion = criterion;
  f.scores = Matrix(weights.rows, weights.cols);
  switch (criterion) {
    case Criterion::MCS:
      for (size_t i = 0; i < weights.data.size(); ++i)
        f.scores.data[i] = weights.data[i] * grads.data[i];
      break;
    case Criterion::CS:
      for (size_t i = 0; i < weights.data.size(); ++i)
        f.scores.data[i] = std::fabs(weights.data[i] * grads.data[i]);
      break;
    case Criterion::GM:
    case Criterion::GDGrow:
      for (size_t i = 0; i < weights.data.size(); ++i) f.scores.data[i] = std::fabs(grads.data[i]);
      break;
    case Criterion::WM:
      for (size_t i = 0; i < weights.data.size(); ++i) f.scores.data[i] = std::fabs(weights.data[i]);
      break;
    case Criterion::GDDrop:
      if (initial_weights == nullptr) {
        throw InputError("score: GD-drop requires initial_weights");
      }
      require_same_shape(weights, *initial_weights, "score");
      for (size_t i = 0; i < weights.data.size(); ++i)
        f.scores.data[i] = std::fabs(weights.data[i] - initial_weights->data[i]);
      break;
  }
  return f;
}

namespace detail {
// Indices of the k largest values; ties broken by lowest index.
inline std::vector<size_t> topk_indices(const std::vector<double>& vals, size_t k) {
  std::vector<size_t> idx(vals.size());
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<long>(k), idx.end(),
                    [&](size_t a, size_t b) {
                      if (vals[a] != vals[b]) return vals[a] > vals[b];
                      return a < b;
                    });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}
}  // namespace detail

/// Keeps the k = max(1, floor(kr * d1 * d2)) highest-scoring entries;
/// ties broken by lowest linear index.
inline SparseMask topk_mask(const ScoreField& field, double kr) {
  if (!(kr > 0.0 && kr <= 1.0)) {
    throw InputError("topk_mask: kr must be in (0,1], got " + std::to_string(kr));
  }
  const size_t n = field.scores.data.size();
  const size_t k = std::max<size_t>(1, static_cast<size_t>(std::floor(kr * static_cast<double>(n))));
  SparseMask mask = SparseMask::empty_mask(field.rows(), field.cols());
  mask.coords.reserve(k);
  for (size_t i : detail::topk_indices(field.scores.data, k)) {
    mask.coords.push_back({static_cast<uint32_t>(i / field.cols()), static_cast<uint32_t>(i % field.cols())});
  }
  return mask;
}

/// Partitions the layer into disjoint B x B tiles, scores each tile by the
/// sum of its entry scores, and keeps the top N_B = floor(kr*d1*d2/B^2)
/// tiles; ties broken by lowest block index.
inline SparseMask block_mask(const ScoreField& field, double kr, int block_size) {
  if (!(kr > 0.0 && kr <= 1.0)) {
    throw InputError("block_mask: kr must be in (0,1], got " + std::to_string(kr));
  }
  const int d1 = field.rows(), d2 = field.cols();
  if (block_size <= 0 || d1 % block_size != 0 || d2 % block_size != 0) {
    throw InputError("block_mask: block size " + std::to_string(block_size) + " does not divide " +
                     field.scores.shape());
  }
  const int gr = d1 / block_size, gc = d2 / block_size;
  const double nb_exact = kr * static_cast<double>(d1) * d2 / (static_cast<double>(block_size) * block_size);
  const auto nb = static_cast<long>(std::floor(nb_exact));
  if (nb < 1) {
    throw InputError("block_mask: N_B = " + std::to_string(nb_exact) + " floors below 1");
  }
  std::vector<double> sums(static_cast<size_t>(gr) * gc, 0.0);
  for (int r = 0; r < d1; ++r)
    for (int c = 0; c < d2; ++c)
      sums[static_cast<size_t>(r / block_size) * gc + c / block_size] += field.scores.at(r, c);
  SparseMask mask = SparseMask::empty_mask(d1, d2);
  mask.kind = MaskKind::Block;
  mask.block_size = block_size;
  for (size_t i : detail::topk_indices(sums, static_cast<size_t>(nb))) {
    mask.coords.push_back({static_cast<uint32_t>(i / gc), static_cast<uint32_t>(i % gc)});
  }
  return mask;
}

/// Global layer-drop rule: the threshold is the k-th highest score over the
/// union of all layers (k = max(1, floor(kr * total entries))); a layer
/// stays active iff its maximum score reaches the threshold. The layer
/// holding the global maximum always survives.
inline std::vector<bool> layer_drop(const std::vector<ScoreField>& per_layer, double kr) {
  if (per_layer.empty()) throw InputError("layer_drop: no layers given");
  if (!(kr > 0.0 && kr <= 1.0)) {
    throw InputError("layer_drop: kr must be in (0,1], got " + std::to_string(kr));
  }
  std::vector<double> all;
  for (const ScoreField& f : per_layer) {
    all.insert(all.end(), f.scores.data.begin(), f.scores.data.end());
  }
  const size_t k =
      std::max<size_t>(1, static_cast<size_t>(std::floor(kr * static_cast<double>(all.size()))));
  std::nth_element(all.begin(), all.begin() + static_cast<long>(k - 1), all.end(), std::greater<>());
  const double threshold = all[k - 1];
  std::vector<bool> active(per_layer.size());
  bool any = false;
  for (size_t l = 0; l < per_layer.size(); ++l) {
    const double mx = *std::max_element(per_layer[l].scores.data.begin(), per_layer[l].scores.data.end());
    active[l] = mx >= threshold;
    any = any || active[l];
  }
  if (!any) {
    // Unreachable: the layer holding the global max always passes.
    throw NumericError("layer_drop: all layers fell below threshold");
  }
  return active;
}

}  // namespace sparseadapt
