#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>

#include "sparseadapt/matrix.hpp"
#include "sparseadapt/rng.hpp"
#include "sparseadapt/tape.hpp"

using namespace sparseadapt;

namespace {

// Builds a scalar from any op output via fixed bilinear reduction
// r^T * out * c, so every entry of `out` influences the loss.
GradientTape::Var reduce_to_scalar(GradientTape& tape, GradientTape::Var v, const Matrix& r,
                                   const Matrix& c) {
  return tape.matmul(tape.matmul(tape.constant(r), v), tape.constant(c));
}

// Central finite difference d loss / d x[i] with h = 1e-4.
double central_diff(const std::function<double(const Matrix&)>& f, Matrix x, size_t i,
                    double h = 1e-4) {
  Matrix hi = x, lo = x;
  hi.data[i] += h;
  lo.data[i] -= h;
  return (f(hi) - f(lo)) / (2.0 * h);
}

void check_grad_matches_fd(const std::function<double(const Matrix&)>& f,
                           const std::function<Matrix(const Matrix&)>& grad_fn, const Matrix& x) {
  const Matrix g = grad_fn(x);
  for (size_t i = 0; i < x.data.size(); ++i) {
    const double fd = central_diff(f, x, i);
    const double a = g.data[i];
    if (std::fabs(fd) >= 1e-4) {
      CHECK(std::fabs(a - fd) / std::fabs(fd) < 1e-4);
    } else {
      CHECK(std::fabs(a - fd) < 1e-8);
    }
  }
}

}  // namespace

TEST_CASE("matmul gradient vs finite differences") {
  Rng rng(100);
  const Matrix a0 = init_matrix(rng, 3, 4, InitScheme::ScaledNormal);
  const Matrix b0 = init_matrix(rng, 4, 2, InitScheme::ScaledNormal);
  const Matrix r = init_matrix(rng, 1, 3, InitScheme::ScaledNormal);
  const Matrix c = init_matrix(rng, 2, 1, InitScheme::ScaledNormal);

  auto loss_wrt_a = [&](const Matrix& a) {
    GradientTape t;
    return t.scalar(reduce_to_scalar(t, t.matmul(t.param(a, "a"), t.constant(b0)), r, c));
  };
  auto grad_wrt_a = [&](const Matrix& a) {
    GradientTape t;
    GradientTape::Var s = reduce_to_scalar(t, t.matmul(t.param(a, "a"), t.constant(b0)), r, c);
    t.backward(s);
    return t.grad("a");
  };
  check_grad_matches_fd(loss_wrt_a, grad_wrt_a, a0);

  auto loss_wrt_b = [&](const Matrix& b) {
    GradientTape t;
    return t.scalar(reduce_to_scalar(t, t.matmul(t.constant(a0), t.param(b, "b")), r, c));
  };
  auto grad_wrt_b = [&](const Matrix& b) {
    GradientTape t;
    GradientTape::Var s = reduce_to_scalar(t, t.matmul(t.constant(a0), t.param(b, "b")), r, c);
    t.backward(s);
    return t.grad("b");
  };
  check_grad_matches_fd(loss_wrt_b, grad_wrt_b, b0);
}

TEST_CASE("layer_norm gradient vs finite differences") {
  Rng rng(101);
  const Matrix x0 = init_matrix(rng, 4, 6, InitScheme::ScaledNormal);
  const Matrix r = init_matrix(rng, 1, 4, InitScheme::ScaledNormal);
  const Matrix c = init_matrix(rng, 6, 1, InitScheme::ScaledNormal);
  auto loss = [&](const Matrix& x) {
    GradientTape t;
    return t.scalar(reduce_to_scalar(t, t.layer_norm(t.param(x, "x")), r, c));
  };
  auto grad = [&](const Matrix& x) {
    GradientTape t;
    GradientTape::Var s = reduce_to_scalar(t, t.layer_norm(t.param(x, "x")), r, c);
    t.backward(s);
    return t.grad("x");
  };
  check_grad_matches_fd(loss, grad, x0);
}

TEST_CASE("attention gradient vs finite differences") {
  Rng rng(102);
  const int batch = 2, seq = 3, heads = 2, hidden = 4;
  Matrix x0 = init_matrix(rng, batch * seq, 3 * hidden, InitScheme::ScaledNormal);
  const Matrix r = init_matrix(rng, 1, batch * seq, InitScheme::ScaledNormal);
  const Matrix c = init_matrix(rng, hidden, 1, InitScheme::ScaledNormal);
  auto loss = [&](const Matrix& x) {
    GradientTape t;
    return t.scalar(reduce_to_scalar(t, t.attention(t.param(x, "x"), batch, seq, heads), r, c));
  };
  auto grad = [&](const Matrix& x) {
    GradientTape t;
    GradientTape::Var s = reduce_to_scalar(t, t.attention(t.param(x, "x"), batch, seq, heads), r, c);
    t.backward(s);
    return t.grad("x");
  };
  check_grad_matches_fd(loss, grad, x0);
}

TEST_CASE("relu, softmax, mean_pool gradients vs finite differences") {
  Rng rng(103);
  const Matrix x0 = init_matrix(rng, 4, 5, InitScheme::ScaledNormal);
  const Matrix r4 = init_matrix(rng, 1, 4, InitScheme::ScaledNormal);
  const Matrix r2 = init_matrix(rng, 1, 2, InitScheme::ScaledNormal);
  const Matrix c5 = init_matrix(rng, 5, 1, InitScheme::ScaledNormal);

  auto relu_loss = [&](const Matrix& x) {
    GradientTape t;
    return t.scalar(reduce_to_scalar(t, t.relu(t.param(x, "x")), r4, c5));
  };
  auto relu_grad = [&](const Matrix& x) {
    GradientTape t;
    GradientTape::Var s = reduce_to_scalar(t, t.relu(t.param(x, "x")), r4, c5);
    t.backward(s);
    return t.grad("x");
  };
  check_grad_matches_fd(relu_loss, relu_grad, x0);

  auto sm_loss = [&](const Matrix& x) {
    GradientTape t;
    return t.scalar(reduce_to_scalar(t, t.softmax_rows(t.param(x, "x")), r4, c5));
  };
  auto sm_grad = [&](const Matrix& x) {
    GradientTape t;
    GradientTape::Var s = reduce_to_scalar(t, t.softmax_rows(t.param(x, "x")), r4, c5);
    t.backward(s);
    return t.grad("x");
  };
  check_grad_matches_fd(sm_loss, sm_grad, x0);

  auto mp_loss = [&](const Matrix& x) {
    GradientTape t;
    return t.scalar(reduce_to_scalar(t, t.mean_pool(t.param(x, "x"), 2, 2), r2, c5));
  };
  auto mp_grad = [&](const Matrix& x) {
    GradientTape t;
    GradientTape::Var s = reduce_to_scalar(t, t.mean_pool(t.param(x, "x"), 2, 2), r2, c5);
    t.backward(s);
    return t.grad("x");
  };
  check_grad_matches_fd(mp_loss, mp_grad, x0);
}

TEST_CASE("embedding gradient scatters into the table") {
  Rng rng(104);
  const Matrix table0 = init_matrix(rng, 5, 3, InitScheme::ScaledNormal);
  const std::vector<int> ids{0, 2, 2, 4};
  const Matrix r = init_matrix(rng, 1, 4, InitScheme::ScaledNormal);
  const Matrix c = init_matrix(rng, 3, 1, InitScheme::ScaledNormal);
  auto loss = [&](const Matrix& tb) {
    GradientTape t;
    return t.scalar(reduce_to_scalar(t, t.embedding(t.param(tb, "t"), ids), r, c));
  };
  auto grad = [&](const Matrix& tb) {
    GradientTape t;
    GradientTape::Var s = reduce_to_scalar(t, t.embedding(t.param(tb, "t"), ids), r, c);
    t.backward(s);
    return t.grad("t");
  };
  check_grad_matches_fd(loss, grad, table0);

  // Rows 1 and 3 never referenced: zero gradient.
  const Matrix g = grad(table0);
  for (int j = 0; j < 3; ++j) {
    CHECK(g.at(1, j) == 0.0);
    CHECK(g.at(3, j) == 0.0);
  }
}

TEST_CASE("cross_entropy gradient vs finite differences") {
  Rng rng(105);
  const Matrix z0 = init_matrix(rng, 4, 3, InitScheme::ScaledNormal);
  const std::vector<int> labels{0, 2, 1, 1};
  auto loss = [&](const Matrix& z) {
    GradientTape t;
    return t.scalar(t.cross_entropy(t.param(z, "z"), labels));
  };
  auto grad = [&](const Matrix& z) {
    GradientTape t;
    GradientTape::Var s = t.cross_entropy(t.param(z, "z"), labels);
    t.backward(s);
    return t.grad("z");
  };
  check_grad_matches_fd(loss, grad, z0);
}

TEST_CASE("cross_entropy of uniform logits equals ln(num_classes)") {
  GradientTape t;
  const Matrix z(1, 4);  // all-zero logits -> uniform softmax
  const double loss = t.scalar(t.cross_entropy(t.constant(z), {0}));
  CHECK(loss == std::log(4.0));
}

TEST_CASE("unrequested parameters receive zero gradient allocation") {
  GradientTape t;
  GradientTape::Var a = t.param(Matrix::from_rows({{1.0, 2.0}}), "a");
  GradientTape::Var dead = t.param(Matrix::from_rows({{5.0}}), "dead");
  (void)dead;
  GradientTape::Var s = t.matmul(a, t.constant(Matrix::from_rows({{1.0}, {1.0}})));
  t.backward(s);
  CHECK(t.grad("a") == Matrix::from_rows({{1.0, 1.0}}));
  CHECK(t.grad("dead") == Matrix::zeros(1, 1));
}

TEST_CASE("gradient accumulates over reused variables") {
  GradientTape t;
  GradientTape::Var a = t.param(Matrix::from_rows({{3.0}}), "a");
  GradientTape::Var s = t.add(a, a);  // d(2a)/da = 2
  t.backward(s);
  CHECK(t.grad("a") == Matrix::from_rows({{2.0}}));
}
