#include <catch2/catch_amalgamated.hpp>

#include "sparseadapt/matrix.hpp"
#include "sparseadapt/rng.hpp"

using namespace sparseadapt;

namespace {

// Independent scalar-loop reference product.
Matrix matmul_reference(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows, b.cols);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < b.cols; ++j) {
      double s = 0.0;
      for (int k = 0; k < a.cols; ++k) s += a.at(i, k) * b.at(k, j);
      out.at(i, j) = s;
    }
  return out;
}

}  // namespace

TEST_CASE("matmul identity") {
  const Matrix id = Matrix::from_rows({{1, 0}, {0, 1}});
  const Matrix b = Matrix::from_rows({{3, 4}, {5, 6}});
  CHECK(matmul(id, b) == b);
}

TEST_CASE("matmul 1x2 by 2x1") {
  const Matrix a = Matrix::from_rows({{1, 2}});
  const Matrix b = Matrix::from_rows({{3}, {4}});
  const Matrix p = matmul(a, b);
  REQUIRE(p.rows == 1);
  REQUIRE(p.cols == 1);
  CHECK(p.at(0, 0) == 11.0);
}

TEST_CASE("matmul matches scalar-loop reference") {
  Rng rng(42);
  Matrix a = init_matrix(rng, 5, 7, InitScheme::ScaledNormal);
  Matrix b = init_matrix(rng, 7, 3, InitScheme::ScaledNormal);
  const Matrix p = matmul(a, b);
  const Matrix q = matmul_reference(a, b);
  for (size_t i = 0; i < p.data.size(); ++i) {
    const double denom = std::max(1e-300, std::fabs(q.data[i]));
    CHECK(std::fabs(p.data[i] - q.data[i]) / denom < 1e-12);
  }
}

TEST_CASE("matmul shape mismatch reports both shapes") {
  const Matrix a(2, 3);
  const Matrix b(2, 3);
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2x3") != std::string::npos);
  }
}

TEST_CASE("matmul output finite on random inputs") {
  Rng rng(7);
  Matrix a = init_matrix(rng, 8, 8, InitScheme::ScaledNormal);
  Matrix b = init_matrix(rng, 8, 8, InitScheme::ScaledNormal);
  CHECK(matmul(a, b).all_finite());
}

TEST_CASE("elementwise ops and transpose") {
  const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
  const Matrix b = Matrix::from_rows({{10, 20}, {30, 40}});
  CHECK(add(a, b) == Matrix::from_rows({{11, 22}, {33, 44}}));
  CHECK(sub(b, a) == Matrix::from_rows({{9, 18}, {27, 36}}));
  CHECK(hadamard(a, b) == Matrix::from_rows({{10, 40}, {90, 160}}));
  CHECK(scale(a, 2.0) == Matrix::from_rows({{2, 4}, {6, 8}}));
  CHECK(transpose(a) == Matrix::from_rows({{1, 3}, {2, 4}}));
  CHECK(max_abs(sub(a, b)) == 36.0);
}

TEST_CASE("matrix invariants") {
  CHECK_THROWS_AS(Matrix(0, 3), InputError);
  CHECK_THROWS_AS(Matrix(3, -1), InputError);
  const Matrix m(4, 5);
  CHECK(m.size() == 20);
  CHECK(m.all_finite());
}
