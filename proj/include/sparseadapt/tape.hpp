#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sparseadapt/errors.hpp"
#include "sparseadapt/matrix.hpp"

namespace sparseadapt {

/// Reverse-mode autodiff over layer-level matrix operations. Forward calls
/// append nodes to the recorded graph; backward() runs the closures in
/// reverse and accumulates gradients for every named parameter.
///
/// Granularity is deliberate: one node per layer op (matmul, layernorm,
/// attention, ...), not per scalar. Gradients are exact, not approximated.
class GradientTape {
public:
  using Var = int;

  /// Leaf the loss does not differentiate through (inputs, frozen weights).
  Var constant(Matrix v) { return push(std::move(v), false, {}); }

  /// Tracked leaf; its gradient is available by name after backward().
  Var param(Matrix v, std::string name) {
    const Var id = push(std::move(v), true, {});
    nodes_[id].name = std::move(name);
    param_ids_.push_back(id);
    return id;
  }

  const Matrix& value(Var v) const { return nodes_[v].value; }

  double scalar(Var v) const {
    const Matrix& m = nodes_[v].value;
    if (m.rows != 1 || m.cols != 1) {
      throw InputError("scalar: node is " + m.shape() + ", not 1x1");
    }
    return m.data[0];
  }

  Var matmul(Var a, Var b) {
    Var out = push(sparseadapt::matmul(value(a), value(b)), needs(a) || needs(b), [=, this] {
      const Matrix& g = nodes_[out_var_].grad;
      if (needs(a)) accumulate(a, sparseadapt::matmul(g, transpose(value(b))));
      if (needs(b)) accumulate(b, sparseadapt::matmul(transpose(value(a)), g));
    });
    return out;
  }

  Var add(Var a, Var b) {
    Var out = push(sparseadapt::add(value(a), value(b)), needs(a) || needs(b), [=, this] {
      const Matrix& g = nodes_[out_var_].grad;
      if (needs(a)) accumulate(a, g);
      if (needs(b)) accumulate(b, g);
    });
    return out;
  }

  Var scale(Var a, double s) {
    Var out = push(sparseadapt::scale(value(a), s), needs(a), [=, this] {
      if (needs(a)) accumulate(a, sparseadapt::scale(nodes_[out_var_].grad, s));
    });
    return out;
  }

  Var relu(Var a) {
    Matrix v = value(a);
    for (double& x : v.data) x = x > 0.0 ? x : 0.0;
    Var out = push(std::move(v), needs(a), [=, this] {
      if (!needs(a)) return;
      const Matrix& in = value(a);
      Matrix g = nodes_[out_var_].grad;
      for (size_t i = 0; i < g.data.size(); ++i) {
        if (in.data[i] <= 0.0) g.data[i] = 0.0;
      }
      accumulate(a, g);
    });
    return out;
  }

  /// Row-wise layer norm without learned gain/bias: y = (x - mean) / sqrt(var + eps).
  Var layer_norm(Var a, double eps = 1e-5) {
    const Matrix& x = value(a);
    Matrix y(x.rows, x.cols);
    std::vector<double> inv_sigma(static_cast<size_t>(x.rows));
    const int n = x.cols;
    for (int i = 0; i < x.rows; ++i) {
      double mu = 0.0;
      for (int j = 0; j < n; ++j) mu += x.at(i, j);
      mu /= n;
      double var = 0.0;
      for (int j = 0; j < n; ++j) {
        const double d = x.at(i, j) - mu;
        var += d * d;
      }
      var /= n;
      const double is = 1.0 / std::sqrt(var + eps);
      inv_sigma[static_cast<size_t>(i)] = is;
      for (int j = 0; j < n; ++j) y.at(i, j) = (x.at(i, j) - mu) * is;
    }
    Var out = push(std::move(y), needs(a), [=, this] {
      if (!needs(a)) return;
      const Matrix& yv = nodes_[out_var_].value;
      const Matrix& g = nodes_[out_var_].grad;
      Matrix dx(g.rows, g.cols);
      for (int i = 0; i < g.rows; ++i) {
        double gmean = 0.0, gymean = 0.0;
        for (int j = 0; j < n; ++j) {
          gmean += g.at(i, j);
          gymean += g.at(i, j) * yv.at(i, j);
        }
        gmean /= n;
        gymean /= n;
        const double is = inv_sigma[static_cast<size_t>(i)];
        for (int j = 0; j < n; ++j) {
          dx.at(i, j) = is * (g.at(i, j) - gmean - yv.at(i, j) * gymean);
        }
      }
      accumulate(a, dx);
    });
    return out;
  }

  /// Gathers rows of `table` by id; gradient scatters back into the table.
  Var embedding(Var table, std::vector<int> ids) {
    const Matrix& t = value(table);
    Matrix out_m(static_cast<int>(ids.size()), t.cols);
    for (size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= t.rows) {
        throw InputError("embedding: id " + std::to_string(ids[i]) + " out of range for " + t.shape());
      }
      for (int j = 0; j < t.cols; ++j) out_m.at(static_cast<int>(i), j) = t.at(ids[i], j);
    }
    Var out = push(std::move(out_m), needs(table), [=, this] {
      if (!needs(table)) return;
      const Matrix& g = nodes_[out_var_].grad;
      Matrix dt(value(table).rows, value(table).cols);
      for (size_t i = 0; i < ids.size(); ++i)
        for (int j = 0; j < g.cols; ++j) dt.at(ids[i], j) += g.at(static_cast<int>(i), j);
      accumulate(table, dt);
    });
    return out;
  }

  Var softmax_rows(Var a) {
    Matrix p = softmax_value(value(a));
    Var out = push(std::move(p), needs(a), [=, this] {
      if (!needs(a)) return;
      accumulate(a, softmax_backward(nodes_[out_var_].value, nodes_[out_var_].grad));
    });
    return out;
  }

  /// Multi-head scaled dot-product attention over a fused QKV activation.
  /// Input is (batch*seq) x 3H with columns [Q | K | V]; output is
  /// (batch*seq) x H. Examples never attend across each other.
  Var attention(Var qkv, int batch, int seq, int heads) {
    const Matrix& x = value(qkv);
    if (x.cols % 3 != 0) throw DimensionError("attention: qkv cols not divisible by 3, " + x.shape());
    const int h_dim = x.cols / 3;
    if (h_dim % heads != 0) {
      throw DimensionError("attention: hidden " + std::to_string(h_dim) + " not divisible by " +
                           std::to_string(heads) + " heads");
    }
    if (x.rows != batch * seq) {
      throw DimensionError("attention: rows " + std::to_string(x.rows) + " != batch*seq " +
                           std::to_string(batch * seq));
    }
    const int dh = h_dim / heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));

    auto probs = std::make_shared<std::vector<Matrix>>();
    probs->reserve(static_cast<size_t>(batch) * heads);
    Matrix out_m(x.rows, h_dim);
    for (int b = 0; b < batch; ++b) {
      for (int h = 0; h < heads; ++h) {
        const int qc = h * dh, kc = h_dim + h * dh, vc = 2 * h_dim + h * dh;
        // scores(i,j) = <Q_i, K_j> / sqrt(dh) over this example's rows
        Matrix scores(seq, seq);
        for (int i = 0; i < seq; ++i) {
          for (int j = 0; j < seq; ++j) {
            double s = 0.0;
            for (int d = 0; d < dh; ++d) s += x.at(b * seq + i, qc + d) * x.at(b * seq + j, kc + d);
            scores.at(i, j) = s * inv;
          }
        }
        Matrix p = softmax_value(scores);
        for (int i = 0; i < seq; ++i) {
          for (int d = 0; d < dh; ++d) {
            double s = 0.0;
            for (int j = 0; j < seq; ++j) s += p.at(i, j) * x.at(b * seq + j, vc + d);
            out_m.at(b * seq + i, qc + d) = s;
          }
        }
        probs->push_back(std::move(p));
      }
    }

    Var out = push(std::move(out_m), needs(qkv), [=, this] {
      if (!needs(qkv)) return;
      const Matrix& g = nodes_[out_var_].grad;
      const Matrix& xin = value(qkv);
      Matrix dx(xin.rows, xin.cols);
      for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
          const Matrix& p = (*probs)[static_cast<size_t>(b) * heads + h];
          const int qc = h * dh, kc = h_dim + h * dh, vc = 2 * h_dim + h * dh;
          // dV = P^T G_slice
          for (int j = 0; j < seq; ++j)
            for (int d = 0; d < dh; ++d) {
              double s = 0.0;
              for (int i = 0; i < seq; ++i) s += p.at(i, j) * g.at(b * seq + i, qc + d);
              dx.at(b * seq + j, vc + d) += s;
            }
          // dP = G_slice V^T, then softmax backward to get dScores
          Matrix dp(seq, seq);
          for (int i = 0; i < seq; ++i)
            for (int j = 0; j < seq; ++j) {
              double s = 0.0;
              for (int d = 0; d < dh; ++d) s += g.at(b * seq + i, qc + d) * xin.at(b * seq + j, vc + d);
              dp.at(i, j) = s;
            }
          Matrix ds = softmax_backward(p, dp);
          // dQ = dS K / sqrt(dh);  dK = dS^T Q / sqrt(dh)
          for (int i = 0; i < seq; ++i)
            for (int d = 0; d < dh; ++d) {
              double s = 0.0;
              for (int j = 0; j < seq; ++j) s += ds.at(i, j) * xin.at(b * seq + j, kc + d);
              dx.at(b * seq + i, qc + d) += s * inv;
            }
          for (int j = 0; j < seq; ++j)
            for (int d = 0; d < dh; ++d) {
              double s = 0.0;
              for (int i = 0; i < seq; ++i) s += ds.at(i, j) * xin.at(b * seq + i, qc + d);
              dx.at(b * seq + j, kc + d) += s * inv;
            }
        }
      }
      accumulate(qkv, dx);
    });
    return out;
  }

  /// Per-example mean over seq rows: (batch*seq) x H -> batch x H.
  Var mean_pool(Var a, int batch, int seq) {
    const Matrix& x = value(a);
    if (x.rows != batch * seq) {
      throw DimensionError("mean_pool: rows " + std::to_string(x.rows) + " != batch*seq " +
                           std::to_string(batch * seq));
    }
    Matrix out_m(batch, x.cols);
    for (int b = 0; b < batch; ++b)
      for (int j = 0; j < x.cols; ++j) {
        double s = 0.0;
        for (int i = 0; i < seq; ++i) s += x.at(b * seq + i, j);
        out_m.at(b, j) = s / seq;
      }
    Var out = push(std::move(out_m), needs(a), [=, this] {
      if (!needs(a)) return;
      const Matrix& g = nodes_[out_var_].grad;
      Matrix dx(batch * seq, g.cols);
      for (int b = 0; b < batch; ++b)
        for (int i = 0; i < seq; ++i)
          for (int j = 0; j < g.cols; ++j) dx.at(b * seq + i, j) = g.at(b, j) / seq;
      accumulate(a, dx);
    });
    return out;
  }

  /// Mean cross-entropy over the batch; logits (batch x classes) -> 1x1.
  Var cross_entropy(Var logits, std::vector<int> labels) {
    const Matrix& z = value(logits);
    if (static_cast<int>(labels.size()) != z.rows) {
      throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                           z.shape() + " logits");
    }
    for (int y : labels) {
      if (y < 0 || y >= z.cols) throw InputError("cross_entropy: label " + std::to_string(y) + " out of range");
    }
    auto p = std::make_shared<Matrix>(softmax_value(z));
    double loss = 0.0;
    for (int i = 0; i < z.rows; ++i) {
      double m = z.at(i, 0);
      for (int j = 1; j < z.cols; ++j) m = std::max(m, z.at(i, j));
      double lse = 0.0;
      for (int j = 0; j < z.cols; ++j) lse += std::exp(z.at(i, j) - m);
      loss += m + std::log(lse) - z.at(i, labels[static_cast<size_t>(i)]);
    }
    Matrix out_m(1, 1);
    out_m.data[0] = loss / z.rows;
    Var out = push(std::move(out_m), needs(logits), [=, this] {
      if (!needs(logits)) return;
      const double g = nodes_[out_var_].grad.data[0] / value(logits).rows;
      Matrix dz = *p;
      for (int i = 0; i < dz.rows; ++i) dz.at(i, labels[static_cast<size_t>(i)]) -= 1.0;
      for (double& v : dz.data) v *= g;
      accumulate(logits, dz);
    });
    return out;
  }

  /// Runs the recorded graph in reverse from `loss` (1x1). After this every
  /// named parameter owns a gradient of its own shape (zeros if unreached).
  void backward(Var loss) {
    if (nodes_[loss].value.rows != 1 || nodes_[loss].value.cols != 1) {
      throw InputError("backward: loss node must be 1x1, is " + nodes_[loss].value.shape());
    }
    ensure_grad(loss);
    nodes_[loss].grad.data[0] = 1.0;
    for (Var v = loss; v >= 0; --v) {
      Node& n = nodes_[v];
      if (n.needs_grad && n.backprop && n.grad.rows > 0) {
        out_var_ = v;
        n.backprop();
      }
    }
    for (Var p : param_ids_) ensure_grad(p);
  }

  bool has_param(const std::string& name) const { return find_param(name) >= 0; }

  /// Gradient of a named parameter; valid after backward().
  const Matrix& grad(const std::string& name) const {
    const Var p = find_param(name);
    if (p < 0) throw InputError("grad: no parameter named '" + name + "'");
    if (nodes_[p].grad.rows == 0) throw InputError("grad: backward() has not run");
    return nodes_[p].grad;
  }

  /// All named parameter gradients.
  std::map<std::string, Matrix> gradients() const {
    std::map<std::string, Matrix> out;
    for (Var p : param_ids_) {
      if (nodes_[p].grad.rows == 0) throw InputError("gradients: backward() has not run");
      out[nodes_[p].name] = nodes_[p].grad;
    }
    return out;
  }

  size_t num_nodes() const { return nodes_.size(); }

private:
  struct Node {
    Matrix value;
    Matrix grad;  // empty until touched in backward
    bool needs_grad = false;
    std::function<void()> backprop;  // null for leaves
    std::string name;                // params only
  };

  bool needs(Var v) const { return nodes_[v].needs_grad; }

  Var push(Matrix v, bool needs_grad, std::function<void()> backprop) {
    nodes_.push_back(Node{std::move(v), Matrix(), needs_grad, std::move(backprop), {}});
    return static_cast<Var>(nodes_.size() - 1);
  }

  void ensure_grad(Var v) {
    Node& n = nodes_[v];
    if (n.grad.rows == 0) n.grad = Matrix(n.value.rows, n.value.cols);
  }

  void accumulate(Var v, const Matrix& g) {
    ensure_grad(v);
    Node& n = nodes_[v];
    require_same_shape(n.grad, g, "accumulate");
    for (size_t i = 0; i < g.data.size(); ++i) n.grad.data[i] += g.data[i];
  }

  Var find_param(const std::string& name) const {
    for (Var p : param_ids_) {
      if (nodes_[p].name == name) return p;
    }
    return -1;
  }

  static Matrix softmax_value(const Matrix& z) {
    Matrix p(z.rows, z.cols);
    for (int i = 0; i < z.rows; ++i) {
      double m = z.at(i, 0);
      for (int j = 1; j < z.cols; ++j) m = std::max(m, z.at(i, j));
      double s = 0.0;
      for (int j = 0; j < z.cols; ++j) {
        const double e = std::exp(z.at(i, j) - m);
        p.at(i, j) = e;
        s += e;
      }
      for (int j = 0; j < z.cols; ++j) p.at(i, j) /= s;
    }
    return p;
  }

  // dScores(i,:) = P(i,:) * (dP(i,:) - <dP(i,:), P(i,:)>)
  static Matrix softmax_backward(const Matrix& p, const Matrix& dp) {
    Matrix ds(p.rows, p.cols);
    for (int i = 0; i < p.rows; ++i) {
      double dot = 0.0;
      for (int j = 0; j < p.cols; ++j) dot += dp.at(i, j) * p.at(i, j);
      for (int j = 0; j < p.cols; ++j) ds.at(i, j) = p.at(i, j) * (dp.at(i, j) - dot);
    }
    return ds;
  }

  std::vector<Node> nodes_;
  std::vector<Var> param_ids_;
  Var out_var_ = -1;
};

}  // namespace sparseadapt
