#pragma once

#include <cmath>
#include <cstdint>

#include "sparseadapt/errors.hpp"
#include "sparseadapt/matrix.hpp"

namespace sparseadapt {

namespace detail {
// splitmix64 finalizer; fixed constants, pure integer math.
inline uint64_t mix64(uint64_t z) {
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ULL;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBULL;
  z ^= z >> 31;
  return z;
}
}  // namespace detail

/// Counter-based deterministic generator. Output i depends only on
/// (seed, i), so identical seed + identical call sequence reproduces the
/// stream on any platform. fork() derives an independent stream without
/// disturbing this one.
class Rng {
public:
  explicit Rng(uint64_t seed) : seed_(seed) {}

  uint64_t seed() const { return seed_; }

  uint64_t next_u64() {
    ++counter_;
    return detail::mix64(seed_ + counter_ * 0x9E3779B97F4A7C15ULL);
  }

  /// Uniform in [0, 1), 53-bit resolution.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform integer in [0, n).
  uint64_t next_below(uint64_t n) {
    if (n == 0) throw InputError("Rng::next_below: n must be > 0");
    // Modulo bias is < 2^-50 for desk-scale n; irrelevant here.
    return next_u64() % n;
  }

  /// Standard normal via Box-Muller; consumes exactly two draws per call.
  double next_normal() {
    const double u = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
    const double v = next_double();
    const double r = std::sqrt(-2.0 * std::log(u));
    return r * std::cos(2.0 * 3.14159265358979323846 * v);
  }

  /// Independent child stream identified by `stream`; pure function of
  /// (seed, stream), unaffected by how much of this stream was consumed.
  Rng fork(uint64_t stream) const {
    return Rng(detail::mix64(seed_ ^ detail::mix64(stream + 0x633D5D94E7A6FDA3ULL)));
  }

private:
  uint64_t seed_;
  uint64_t counter_ = 0;
};

enum class InitScheme { Zeros, ScaledNormal };

/// zeros: all-zero matrix. scaled-normal: iid normal entries with
/// standard deviation 1/sqrt(cols).
inline Matrix init_matrix(Rng& rng, int rows, int cols, InitScheme scheme) {
  if (rows <= 0 || cols <= 0) {
    throw InputError("init_matrix: dims must be positive, got " + Matrix::shape_str(rows, cols));
  }
  Matrix m(rows, cols);
  if (scheme == InitScheme::ScaledNormal) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(cols));
    for (double& v : m.data) v = rng.next_normal() * sd;
  }
  return m;
}

/// Deterministic in-place Fisher-Yates shuffle.
template <typename T>
void shuffle(std::vector<T>& items, Rng& rng) {
  for (size_t i = items.size(); i > 1; --i) {
    const size_t j = static_cast<size_t>(rng.next_below(i));
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace sparseadapt
