#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <set>

#include "sparseadapt/model.hpp"
#include "sparseadapt/rng.hpp"

using namespace sparseadapt;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.num_layers = 2;
  cfg.hidden_dim = 8;
  cfg.num_heads = 2;
  cfg.vocab_size = 8;
  cfg.num_classes = 3;
  cfg.seq_len = 4;
  return cfg;
}

Batch random_batch(const ModelConfig& cfg, Rng& rng, int n) {
  Batch b;
  b.batch_size = n;
  b.seq_len = cfg.seq_len;
  for (int i = 0; i < n * cfg.seq_len; ++i)
    b.tokens.push_back(static_cast<int>(rng.next_below(static_cast<uint64_t>(cfg.vocab_size))));
  for (int i = 0; i < n; ++i)
    b.labels.push_back(static_cast<int>(rng.next_below(static_cast<uint64_t>(cfg.num_classes))));
  return b;
}

// Naive numerical rank via row reduction with partial pivoting.
int numerical_rank(Matrix m, double tol = 1e-9) {
  int rank = 0;
  for (int col = 0; col < m.cols && rank < m.rows; ++col) {
    int pivot = -1;
    double best = tol;
    for (int r = rank; r < m.rows; ++r) {
      if (std::fabs(m.at(r, col)) > best) {
        best = std::fabs(m.at(r, col));
        pivot = r;
      }
    }
    if (pivot < 0) continue;
    for (int j = 0; j < m.cols; ++j) std::swap(m.at(rank, j), m.at(pivot, j));
    for (int r = 0; r < m.rows; ++r) {
      if (r == rank) continue;
      const double f = m.at(r, col) / m.at(rank, col);
      for (int j = 0; j < m.cols; ++j) m.at(r, j) -= f * m.at(rank, j);
    }
    ++rank;
  }
  return rank;
}

}  // namespace

TEST_CASE("build_model is deterministic per seed") {
  const ModelConfig cfg = small_config();
  const Model a = build_model(cfg, Rng(1));
  const Model b = build_model(cfg, Rng(1));
  REQUIRE(a.weights.size() == b.weights.size());
  for (const auto& [id, w] : a.weights) CHECK(w == b.weights.at(id));
  const Model c = build_model(cfg, Rng(2));
  CHECK_FALSE(c.weight("head") == a.weight("head"));
}

TEST_CASE("config validation rejects bad divisibility") {
  ModelConfig cfg = small_config();
  cfg.hidden_dim = 32;
  cfg.num_heads = 3;
  try {
    build_model(cfg, Rng(1));
    FAIL("expected InputError");
  } catch (const InputError& e) {
    CHECK(std::string(e.what()).find("divisible") != std::string::npos);
  }
}

TEST_CASE("forward produces finite logits of the right shape") {
  const ModelConfig cfg;  // defaults: 4 layers, width 32
  const Model m = build_model(cfg, Rng(3));
  Rng rng(4);
  const Batch batch = random_batch(cfg, rng, 5);
  const Matrix logits = predict_logits(m, {}, batch);
  CHECK(logits.rows == 5);
  CHECK(logits.cols == cfg.num_classes);
  CHECK(logits.all_finite());
}

TEST_CASE("model gradients match finite differences for every layer type") {
  const ModelConfig cfg = small_config();
  for (uint64_t seed : {11u, 12u, 13u}) {
    const Model m = build_model(cfg, Rng(seed));
    Rng rng(seed + 100);
    const Batch batch = random_batch(cfg, rng, 3);
    const std::vector<std::string> trainables = all_layer_ids(cfg);
    const LossGrads lg = loss_and_grads(m, {}, batch, trainables);
    REQUIRE(lg.grads.size() == trainables.size());
    for (const std::string& id : trainables) {
      const Matrix& w = m.weight(id);
      const Matrix& g = lg.grads.at(id);
      REQUIRE(g.rows == w.rows);
      REQUIRE(g.cols == w.cols);
      // Sample a few entries per matrix; FD over the whole model is slow.
      Rng pick(seed * 977 + std::hash<std::string>{}(id));
      for (int s = 0; s < 4; ++s) {
        const size_t i = static_cast<size_t>(pick.next_below(w.data.size()));
        const double h = 1e-4;
        std::map<std::string, Matrix> over;
        over[id] = w;
        over[id].data[i] += h;
        const double hi = forward_loss(m, over, batch);
        over[id].data[i] -= 2 * h;
        const double lo = forward_loss(m, over, batch);
        const double fd = (hi - lo) / (2 * h);
        if (std::fabs(fd) >= 1e-4) {
          CHECK(std::fabs(g.data[i] - fd) / std::fabs(fd) < 1e-4);
        } else {
          CHECK(std::fabs(g.data[i] - fd) < 1e-8);
        }
      }
    }
  }
}

TEST_CASE("base weights receive no gradient unless requested") {
  const ModelConfig cfg = small_config();
  const Model m = build_model(cfg, Rng(5));
  Rng rng(6);
  const Batch batch = random_batch(cfg, rng, 2);
  const LossGrads lg = loss_and_grads(m, {}, batch, {"blk0.qkv"});
  CHECK(lg.grads.size() == 1);
  CHECK(lg.grads.count("blk0.qkv") == 1);
}

TEST_CASE("empty batch and unknown trainable are rejected") {
  const ModelConfig cfg = small_config();
  const Model m = build_model(cfg, Rng(5));
  Batch empty;
  CHECK_THROWS_AS(loss_and_grads(m, {}, empty, {}), InputError);
  Rng rng(6);
  const Batch batch = random_batch(cfg, rng, 2);
  CHECK_THROWS_AS(loss_and_grads(m, {}, batch, {"blk9.qkv"}), InputError);
}

TEST_CASE("zero adapter leaves the loss bit-for-bit identical") {
  const ModelConfig cfg = small_config();
  const Model m = build_model(cfg, Rng(7));
  Rng rng(8);
  const Batch batch = random_batch(cfg, rng, 4);
  const double base_loss = forward_loss(m, {}, batch);

  const Matrix zero_delta(m.weight("blk0.qkv").rows, m.weight("blk0.qkv").cols);
  SparseMask mask = SparseMask::full(zero_delta.rows, zero_delta.cols);
  std::map<std::string, Matrix> over;
  over["blk0.qkv"] = effective_weight(m.weight("blk0.qkv"), zero_delta, mask);
  CHECK(forward_loss(m, over, batch) == base_loss);
}

TEST_CASE("uniform-logit head gives loss ln(num_classes)") {
  const ModelConfig cfg = small_config();
  const Model m = build_model(cfg, Rng(9));
  Rng rng(10);
  Batch batch = random_batch(cfg, rng, 1);
  std::map<std::string, Matrix> over;
  over["head"] = Matrix(cfg.hidden_dim, cfg.num_classes);  // zero head -> uniform logits
  CHECK(forward_loss(m, over, batch) == std::log(static_cast<double>(cfg.num_classes)));
}

TEST_CASE("effective_weight examples") {
  const Matrix base = Matrix::from_rows({{1, 2}, {3, 4}});
  const Matrix delta = Matrix::from_rows({{10, 99}, {99, 99}});

  SparseMask empty = SparseMask::empty_mask(2, 2);
  CHECK(effective_weight(base, delta, empty) == base);

  SparseMask full = SparseMask::full(2, 2);
  CHECK(effective_weight(base, scale(base, -1.0), full) == Matrix::zeros(2, 2));

  SparseMask one = SparseMask::empty_mask(2, 2);
  one.coords.push_back({0, 0});
  CHECK(effective_weight(base, delta, one) == Matrix::from_rows({{11, 2}, {3, 4}}));

  CHECK_THROWS_AS(effective_weight(base, Matrix(3, 2), full), DimensionError);
}

TEST_CASE("lora_delta basics") {
  // Zero A -> zero delta.
  CHECK(lora_delta(Matrix(2, 1), Matrix::from_rows({{3, 4}}), 1, 1.0) == Matrix::zeros(2, 2));

  // Rank-1 outer product.
  const Matrix a = Matrix::from_rows({{1}, {2}});
  const Matrix b = Matrix::from_rows({{3, 4}});
  CHECK(lora_delta(a, b, 1, 1.0) == Matrix::from_rows({{3, 4}, {6, 8}}));

  // Rank mismatch.
  CHECK_THROWS_AS(lora_delta(Matrix(2, 2), b, 1, 1.0), DimensionError);

  // Matrix rank of the delta is at most r.
  Rng rng(20);
  const int r = 3;
  const Matrix a2 = init_matrix(rng, 10, r, InitScheme::ScaledNormal);
  const Matrix b2 = init_matrix(rng, r, 12, InitScheme::ScaledNormal);
  CHECK(numerical_rank(lora_delta(a2, b2, r, 2.0 * r)) <= r);
}

TEST_CASE("lora gradients match finite differences") {
  const ModelConfig cfg = small_config();
  const Model m = build_model(cfg, Rng(21));
  Rng rng(22);
  const Batch batch = random_batch(cfg, rng, 3);

  LoraAdapter lora;
  lora.rank = 2;
  lora.alpha = 4.0;
  Rng wr(23);
  lora.layers["blk0.qkv"] = {init_matrix(wr, cfg.hidden_dim, 2, InitScheme::ScaledNormal),
                             init_matrix(wr, 2, 3 * cfg.hidden_dim, InitScheme::ScaledNormal)};

  const LossGrads lg = loss_and_grads_lora(m, lora, batch);
  for (const char* part : {"A", "B"}) {
    const Matrix& w = std::string(part) == "A" ? lora.layers["blk0.qkv"].first
                                               : lora.layers["blk0.qkv"].second;
    const Matrix& g = lg.grads.at(std::string("blk0.qkv.") + part);
    Rng pick(24);
    for (int s = 0; s < 5; ++s) {
      const size_t i = static_cast<size_t>(pick.next_below(w.data.size()));
      const double h = 1e-4;
      LoraAdapter mod = lora;
      Matrix& target = std::string(part) == "A" ? mod.layers["blk0.qkv"].first
                                                : mod.layers["blk0.qkv"].second;
      target.data[i] += h;
      const double hi = loss_and_grads_lora(m, mod, batch, false).loss;
      target.data[i] -= 2 * h;
      const double lo = loss_and_grads_lora(m, mod, batch, false).loss;
      const double fd = (hi - lo) / (2 * h);
      if (std::fabs(fd) >= 1e-4) {
        CHECK(std::fabs(g.data[i] - fd) / std::fabs(fd) < 1e-4);
      } else {
        CHECK(std::fabs(g.data[i] - fd) < 1e-8);
      }
    }
  }
}

TEST_CASE("zero-initialized LoRA B leaves forward equal to base") {
  const ModelConfig cfg = small_config();
  const Model m = build_model(cfg, Rng(25));
  Rng rng(26);
  const Batch batch = random_batch(cfg, rng, 3);

  LoraAdapter lora;
  lora.rank = 2;
  lora.alpha = 4.0;
  Rng wr(27);
  lora.layers["blk1.qkv"] = {init_matrix(wr, cfg.hidden_dim, 2, InitScheme::ScaledNormal),
                             Matrix(2, 3 * cfg.hidden_dim)};
  CHECK(loss_and_grads_lora(m, lora, batch, false).loss == forward_loss(m, {}, batch));
}

TEST_CASE("adapted_layer_ids covers targets in canonical order") {
  ModelConfig cfg = small_config();
  cfg.adapt_targets = {AdaptTarget::QKV, AdaptTarget::MLP};
  const auto ids = adapted_layer_ids(cfg);
  REQUIRE(ids.size() == 4);
  CHECK(ids[0] == "blk0.qkv");
  CHECK(ids[1] == "blk0.mlp_down");
  CHECK(ids[2] == "blk1.qkv");
  CHECK(ids[3] == "blk1.mlp_down");
}
