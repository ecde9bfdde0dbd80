#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <set>

#include "sparseadapt/rng.hpp"
#include "sparseadapt/saliency.hpp"

using namespace sparseadapt;

namespace {

ScoreField make_field(Matrix m, Criterion c = Criterion::MCS) {
  ScoreField f;
  f.scores = std::move(m);
  f.criterion = c;
  return f;
}

// Full-sort oracle: the k best (value desc, index asc) linear indices.
std::vector<size_t> topk_oracle(const std::vector<double>& vals, size_t k) {
  std::vector<size_t> idx(vals.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
    if (vals[a] != vals[b]) return vals[a] > vals[b];
    return a < b;
  });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::vector<size_t> mask_linear_indices(const SparseMask& m) {
  std::vector<size_t> out;
  m.for_each_element(
      [&](int r, int c) { out.push_back(static_cast<size_t>(r) * m.cols + c); });
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST_CASE("score criteria match their formulas") {
  const Matrix w = Matrix::from_rows({{2.0, 2.0}});
  const Matrix g = Matrix::from_rows({{3.0, -3.0}});

  const ScoreField mcs = score(Criterion::MCS, w, g);
  CHECK(mcs.scores.at(0, 0) == 6.0);
  CHECK(mcs.scores.at(0, 1) == -6.0);

  const ScoreField cs = score(Criterion::CS, w, g);
  CHECK(cs.scores.at(0, 0) == 6.0);
  CHECK(cs.scores.at(0, 1) == 6.0);

  const ScoreField gm = score(Criterion::GM, w, g);
  CHECK(gm.scores.at(0, 1) == 3.0);

  // WM on a fresh (all-zero) adapter scores zero everywhere.
  const ScoreField wm = score(Criterion::WM, Matrix(2, 2), Matrix(2, 2));
  CHECK(wm.scores == Matrix::zeros(2, 2));

  const Matrix w0 = Matrix::from_rows({{1.0, 5.0}});
  const ScoreField gd = score(Criterion::GDDrop, w, g, &w0);
  CHECK(gd.scores.at(0, 0) == 1.0);
  CHECK(gd.scores.at(0, 1) == 3.0);
  CHECK_THROWS_AS(score(Criterion::GDDrop, w, g), InputError);

  const ScoreField gg = score(Criterion::GDGrow, w, g);
  CHECK(gg.scores.at(0, 0) == 3.0);
}

TEST_CASE("CS equals |MCS| everywhere") {
  Rng rng(31);
  const Matrix w = init_matrix(rng, 9, 7, InitScheme::ScaledNormal);
  const Matrix g = init_matrix(rng, 9, 7, InitScheme::ScaledNormal);
  const ScoreField mcs = score(Criterion::MCS, w, g);
  const ScoreField cs = score(Criterion::CS, w, g);
  for (size_t i = 0; i < mcs.scores.data.size(); ++i) {
    CHECK(cs.scores.data[i] == std::fabs(mcs.scores.data[i]));
  }
}

TEST_CASE("topk_mask examples") {
  const ScoreField f = make_field(Matrix::from_rows({{5, 1}, {3, 2}}));
  const SparseMask m = topk_mask(f, 0.5);
  REQUIRE(m.coords.size() == 2);
  CHECK(m.coords[0] == Coord{0, 0});
  CHECK(m.coords[1] == Coord{1, 0});

  CHECK(topk_mask(f, 1.0).is_full());
  CHECK_THROWS_AS(topk_mask(f, 0.0), InputError);
  CHECK_THROWS_AS(topk_mask(f, 1.5), InputError);
}

TEST_CASE("topk_mask matches full-sort oracle") {
  Rng rng(32);
  const ScoreField f = make_field(init_matrix(rng, 16, 16, InitScheme::ScaledNormal));
  const SparseMask m = topk_mask(f, 0.1);
  REQUIRE(m.coords.size() == 25);  // floor(0.1 * 256)
  CHECK(mask_linear_indices(m) == topk_oracle(f.scores.data, 25));
}

TEST_CASE("topk cardinality property over random shapes") {
  Rng rng(33);
  for (int trial = 0; trial < 100; ++trial) {
    const int r = 1 + static_cast<int>(rng.next_below(12));
    const int c = 1 + static_cast<int>(rng.next_below(12));
    const double kr = std::min(1.0, rng.next_double() + 1e-3);
    const ScoreField f = make_field(init_matrix(rng, r, c, InitScheme::ScaledNormal));
    const SparseMask m = topk_mask(f, kr);
    const size_t expect =
        std::max<size_t>(1, static_cast<size_t>(std::floor(kr * static_cast<double>(r) * c)));
    CHECK(m.coords.size() == expect);
  }
}

TEST_CASE("raising a selected score never evicts it") {
  Rng rng(34);
  const ScoreField f = make_field(init_matrix(rng, 8, 8, InitScheme::ScaledNormal));
  const SparseMask before = topk_mask(f, 0.25);
  ScoreField raised = f;
  const Coord pick = before.coords[3];
  raised.scores.at(static_cast<int>(pick.row), static_cast<int>(pick.col)) += 10.0;
  const SparseMask after = topk_mask(raised, 0.25);
  CHECK(after.contains(static_cast<int>(pick.row), static_cast<int>(pick.col)));
}

TEST_CASE("permuting rows permutes the mask identically") {
  Rng rng(35);
  Matrix w = init_matrix(rng, 6, 5, InitScheme::ScaledNormal);
  Matrix g = init_matrix(rng, 6, 5, InitScheme::ScaledNormal);
  const std::vector<int> perm{3, 0, 5, 1, 4, 2};
  Matrix wp(6, 5), gp(6, 5);
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 5; ++c) {
      wp.at(r, c) = w.at(perm[r], c);
      gp.at(r, c) = g.at(perm[r], c);
    }
  const SparseMask m = topk_mask(score(Criterion::MCS, w, g), 0.3);
  const SparseMask mp = topk_mask(score(Criterion::MCS, wp, gp), 0.3);
  std::set<std::pair<int, int>> expect;
  for (const Coord& c : m.coords) {
    for (int r = 0; r < 6; ++r) {
      if (perm[r] == static_cast<int>(c.row)) expect.insert({r, static_cast<int>(c.col)});
    }
  }
  std::set<std::pair<int, int>> got;
  for (const Coord& c : mp.coords) got.insert({static_cast<int>(c.row), static_cast<int>(c.col)});
  CHECK(got == expect);
}

TEST_CASE("block_mask counts blocks per the N_B formula") {
  Rng rng(36);
  const ScoreField f = make_field(init_matrix(rng, 4, 4, InitScheme::ScaledNormal));
  // kr=0.5 on 4x4 with B=2: N_B = 0.5 * 16 / 4 = 2 blocks.
  const SparseMask m = block_mask(f, 0.5, 2);
  CHECK(m.kind == MaskKind::Block);
  CHECK(m.coords.size() == 2);
  CHECK(m.num_elements() == 8);
}

TEST_CASE("uniform block scores break ties toward block (0,0)") {
  ScoreField f = make_field(Matrix(4, 4));
  for (double& v : f.scores.data) v = 1.0;
  const SparseMask m = block_mask(f, 0.25, 2);  // exactly one block
  REQUIRE(m.coords.size() == 1);
  CHECK(m.coords[0] == Coord{0, 0});
}

TEST_CASE("block_mask matches exhaustive block-sum ranking") {
  Rng rng(37);
  const int d = 8, B = 2;
  const ScoreField f = make_field(init_matrix(rng, d, d, InitScheme::ScaledNormal));
  const SparseMask m = block_mask(f, 0.25, B);

  // Oracle: rank all blocks by summed score, ties by lowest block index.
  const int g = d / B;
  std::vector<double> sums(static_cast<size_t>(g) * g, 0.0);
  for (int r = 0; r < d; ++r)
    for (int c = 0; c < d; ++c) sums[static_cast<size_t>(r / B) * g + c / B] += f.scores.at(r, c);
  const size_t nb = static_cast<size_t>(std::floor(0.25 * d * d / (B * B)));
  const auto want = topk_oracle(sums, nb);
  std::vector<size_t> got;
  for (const Coord& bc : m.coords) got.push_back(static_cast<size_t>(bc.row) * g + bc.col);
  std::sort(got.begin(), got.end());
  CHECK(got == want);

  // Structure: disjoint grid-aligned blocks, element count N_B * B^2.
  std::set<std::pair<int, int>> elems;
  m.for_each_element([&](int r, int c) { elems.insert({r, c}); });
  CHECK(elems.size() == nb * B * B);
}

TEST_CASE("block_mask input validation") {
  Rng rng(38);
  const ScoreField f = make_field(init_matrix(rng, 4, 6, InitScheme::ScaledNormal));
  CHECK_THROWS_AS(block_mask(f, 0.5, 4), InputError);    // 4 does not divide 6
  CHECK_THROWS_AS(block_mask(f, 0.01, 2), InputError);   // N_B floors to 0
  CHECK_THROWS_AS(block_mask(f, -0.5, 2), InputError);
}

TEST_CASE("layer_drop drops exactly the layers below the global threshold") {
  ScoreField a = make_field(Matrix(2, 2));
  for (double& v : a.scores.data) v = 10.0;
  ScoreField b = make_field(Matrix(2, 2));
  for (double& v : b.scores.data) v = 1.0;

  // kr = 0.5 over 8 entries: threshold is the 4th highest = 10 -> b dropped.
  const std::vector<bool> active = layer_drop({a, b}, 0.5);
  REQUIRE(active.size() == 2);
  CHECK(active[0]);
  CHECK_FALSE(active[1]);

  // kr = 1: threshold is the global minimum -> nothing dropped.
  const std::vector<bool> none = layer_drop({a, b}, 1.0);
  CHECK(none[0]);
  CHECK(none[1]);

  CHECK_THROWS_AS(layer_drop({}, 0.5), InputError);
}

TEST_CASE("layer_drop matches concatenate-and-sort oracle") {
  Rng rng(39);
  std::vector<ScoreField> fields;
  for (int l = 0; l < 4; ++l)
    fields.push_back(make_field(init_matrix(rng, 5, 7, InitScheme::ScaledNormal)));
  const double kr = 0.1;
  const std::vector<bool> active = layer_drop(fields, kr);

  std::vector<double> all;
  for (const auto& f : fields) all.insert(all.end(), f.scores.data.begin(), f.scores.data.end());
  std::sort(all.begin(), all.end(), std::greater<>());
  const size_t k = std::max<size_t>(1, static_cast<size_t>(std::floor(kr * all.size())));
  const double threshold = all[k - 1];
  for (size_t l = 0; l < fields.size(); ++l) {
    const double mx = *std::max_element(fields[l].scores.data.begin(), fields[l].scores.data.end());
    CHECK(active[l] == (mx >= threshold));
  }
  CHECK(std::count(active.begin(), active.end(), true) >= 1);
}

TEST_CASE("mask element enumeration and contains agree") {
  Rng rng(40);
  const ScoreField f = make_field(init_matrix(rng, 6, 4, InitScheme::ScaledNormal));
  const SparseMask m = topk_mask(f, 0.3);
  size_t n = 0;
  m.for_each_element([&](int r, int c) {
    CHECK(m.contains(r, c));
    ++n;
  });
  CHECK(n == m.num_elements());
  double total = 0.0;
  for (double v : m.indicator().data) total += v;
  CHECK(total == static_cast<double>(m.num_elements()));
}
