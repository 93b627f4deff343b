#include "wsr/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <unordered_set>

#include "wsr/errors.hpp"

namespace wsr::ad {

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

thread_local bool g_grad_enabled = true;

MapC view(const Node& n) { return MapC(n.value.data(), n.rows, n.cols); }
MapC grad_view(const Node& n) { return MapC(n.grad.data(), n.rows, n.cols); }
Map grad_map(Node& n) {
  n.ensure_grad();
  return Map(n.grad.data(), n.rows, n.cols);
}

std::string shape_str(const Tensor& t) {
  return std::to_string(t.rows()) + "x" + std::to_string(t.cols());
}

void require(bool cond, const char* op, const std::string& detail) {
  if (!cond) throw ShapeError(std::string(op) + ": " + detail);
}

// Creates an output node; records parents only when a gradient can flow.
NodePtr make_output(int rows, int cols, std::initializer_list<const Tensor*> inputs) {
  auto out = std::make_shared<Node>();
  out->rows = rows;
  out->cols = cols;
  out->value.assign(static_cast<std::size_t>(rows) * cols, 0.0);
  if (g_grad_enabled) {
    for (const Tensor* t : inputs) {
      if (t->requires_grad()) {
        out->requires_grad = true;
        break;
      }
    }
    if (out->requires_grad) {
      for (const Tensor* t : inputs) out->parents.push_back(t->shared());
    }
  }
  return out;
}

NodePtr make_output_many(int rows, int cols, std::span<const Tensor> inputs) {
  auto out = std::make_shared<Node>();
  out->rows = rows;
  out->cols = cols;
  out->value.assign(static_cast<std::size_t>(rows) * cols, 0.0);
  if (g_grad_enabled) {
    for (const Tensor& t : inputs) {
      if (t.requires_grad()) {
        out->requires_grad = true;
        break;
      }
    }
    if (out->requires_grad) {
      for (const Tensor& t : inputs) out->parents.push_back(t.shared());
    }
  }
  return out;
}

Node& parent(Node& n, std::size_t i) { return *n.parents[i]; }

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------- Tensor

Tensor Tensor::zeros(int rows, int cols, bool requires_grad) {
  return full(rows, cols, 0.0, requires_grad);
}

Tensor Tensor::full(int rows, int cols, double v, bool requires_grad) {
  if (rows < 0 || cols < 0) throw ShapeError("negative tensor shape");
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->value.assign(static_cast<std::size_t>(rows) * cols, v);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from(int rows, int cols, std::vector<double> values, bool requires_grad) {
  if (rows < 0 || cols < 0 ||
      values.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols)) {
    throw ShapeError("Tensor::from: value count does not match " + std::to_string(rows) +
                     "x" + std::to_string(cols));
  }
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v) { return full(1, 1, v); }

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(*this));
  return node_->value[0];
}

const std::vector<double>& Tensor::grad() const {
  node_->ensure_grad();
  return node_->grad;
}

bool Tensor::has_nonzero_grad() const {
  return std::any_of(node_->grad.begin(), node_->grad.end(),
                     [](double g) { return g != 0.0; });
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::backward() const {
  if (size() != 1) throw ShapeError("backward() requires a 1x1 tensor");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS for a topological ordering.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  // Intermediate gradients are no longer needed.
  for (Node* n : order) {
    if (n->backward) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

Tensor Tensor::detach() const { return clone(false); }

Tensor Tensor::clone(bool requires_grad) const {
  return from(rows(), cols(), node_->value, requires_grad);
}

// ---------------------------------------------------------------- Mask

Mask Mask::causal(int n, int prefix) {
  Mask m;
  m.rows = n;
  m.cols = prefix + n;
  m.allowed.assign(static_cast<std::size_t>(m.rows) * m.cols, 0);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < prefix + r + 1; ++c) m.allowed[static_cast<std::size_t>(r) * m.cols + c] = 1;
  }
  return m;
}

Mask Mask::key_padding(int query_rows, std::span<const std::uint8_t> keys) {
  Mask m;
  m.rows = query_rows;
  m.cols = static_cast<int>(keys.size());
  m.allowed.resize(static_cast<std::size_t>(m.rows) * m.cols);
  for (int r = 0; r < m.rows; ++r) {
    std::copy(keys.begin(), keys.end(), m.allowed.begin() + static_cast<std::ptrdiff_t>(r) * m.cols);
  }
  return m;
}

// ---------------------------------------------------------------- linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.cols() == b.rows(), "matmul", shape_str(a) + " * " + shape_str(b));
  auto out = make_output(a.rows(), b.cols(), {&a, &b});
  if (a.rows() > 0 && b.cols() > 0) {
    Map(out->value.data(), out->rows, out->cols).noalias() = view(*a.node()) * view(*b.node());
  }
  if (out->requires_grad) {
    out->backward = [](Node& o) {
      Node& pa = parent(o, 0);
      Node& pb = parent(o, 1);
      if (o.rows == 0 || o.cols == 0 || pa.cols == 0) return;
      if (pa.requires_grad) grad_map(pa).noalias() += grad_view(o) * view(pb).transpose();
      if (pb.requires_grad) grad_map(pb).noalias() += view(pa).transpose() * grad_view(o);
    };
  }
  return Tensor(out);
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require(a.cols() == b.cols(), "matmul_nt", shape_str(a) + " * " + shape_str(b) + "^T");
  auto out = make_output(a.rows(), b.rows(), {&a, &b});
  if (a.rows() > 0 && b.rows() > 0) {
    Map(out->value.data(), out->rows, out->cols).noalias() =
        view(*a.node()) * view(*b.node()).transpose();
  }
  if (out->requires_grad) {
    out->backward = [](Node& o) {
      Node& pa = parent(o, 0);
      Node& pb = parent(o, 1);
      if (o.rows == 0 || o.cols == 0 || pa.cols == 0) return;
      if (pa.requires_grad) grad_map(pa).noalias() += grad_view(o) * view(pb);
      if (pb.requires_grad) grad_map(pb).noalias() += grad_view(o).transpose() * view(pa);
    };
  }
  return Tensor(out);
}

Tensor transpose(const Tensor& a) {
  auto out = make_output(a.cols(), a.rows(), {&a});
  Map(out->value.data(), out->rows, out->cols) = view(*a.node()).transpose();
  if (out->requires_grad) {
    out->backward = [](Node& o) {
      grad_map(parent(o, 0)) += grad_view(o).transpose();
    };
  }
  return Tensor(out);
}

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add", shape_str(a) + " + " + shape_str(b));
  auto out = make_output(a.rows(), a.cols(), {&a, &b});
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] + bv[i];
  if (out->requires_grad) {
    out->backward = [](Node& o) {
      for (std::size_t k = 0; k < 2; ++k) {
        Node& p = parent(o, k);
        if (!p.requires_grad) continue;
        p.ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i];
      }
    };
  }
  return Tensor(out);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "sub", shape_str(a) + " - " + shape_str(b));
  auto out = make_output(a.rows(), a.cols(), {&a, &b});
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] - bv[i];
  if (out->requires_grad) {
    out->backward = [](Node& o) {
      Node& pa = parent(o, 0);
      Node& pb = parent(o, 1);
      if (pa.requires_grad) {
        pa.ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) pa.grad[i] += o.grad[i];
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) pb.grad[i] -= o.grad[i];
      }
    };
  }
  return Tensor(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "mul", shape_str(a) + " . " + shape_str(b));
  auto out = make_output(a.rows(), a.cols(), {&a, &b});
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] * bv[i];
  if (out->requires_grad) {
    out->backward = [](Node& o) {
      Node& pa = parent(o, 0);
      Node& pb = parent(o, 1);
      if (pa.requires_grad) {
        pa.ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) pa.grad[i] += o.grad[i] * pb.value[i];
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) pb.grad[i] += o.grad[i] * pa.value[i];
      }
    };
  }
  return Tensor(out);
}

Tensor scale(const Tensor& a, double s) {
  auto out = make_output(a.rows(), a.cols(), {&a});
  const auto& av = a.values();
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] * s;
  if (out->requires_grad) {
    out->backward = [s](Node& o) {
      Node& p = parent(o, 0);
      p.ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i] * s;
    };
  }
  return Tensor(out);
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  require(row.rows() == 1 && row.cols() == a.cols(), "add_row", shape_str(a) + " + " + shape_str(row));
  auto out = make_output(a.rows(), a.cols(), {&a, &row});
  const int cols = a.cols();
  const auto& av = a.values();
  const auto& rv = row.values();
  for (int r = 0; r < a.rows(); ++r) {
    for (int c = 0; c < cols; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * cols + c;
      out->value[i] = av[i] + rv[c];
    }
  }
  if (out->requires_grad) {
    out->backward = [](Node& o) {
      Node& pa = parent(o, 0);
      Node& pr = parent(o, 1);
      if (pa.requires_grad) {
        pa.ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) pa.grad[i] += o.grad[i];
      }
      if (pr.requires_grad) {
        pr.ensure_grad();
        for (int r = 0; r < o.rows; ++r) {
          for (int c = 0; c < o.cols; ++c) pr.grad[c] += o.grad[static_cast<std::size_t>(r) * o.cols + c];
        }
      }
    };
  }
  return Tensor(out);
}

Tensor relu(const Tensor& a) {
  auto out = make_output(a.rows(), a.cols(), {&a});
  const auto& av = a.values();
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] > 0.0 ? av[i] : 0.0;
  if (out->requires_grad) {
    out->backward = [](Node& o) {
      Node& p = parent(o, 0);
      p.ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        if (p.value[i] > 0.0) p.grad[i] += o.grad[i];
      }
    };
  }
  return Tensor(out);
}

Tensor gelu(const Tensor& a) {
  // tanh approximation
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c3 = 0.044715;
  auto out = make_output(a.rows(), a.cols(), {&a});
  const auto& av = a.values();
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double x = av[i];
    out->value[i] = 0.5 * x * (1.0 + std::tanh(k * (x + c3 * x * x * x)));
  }
  if (out->requires_grad) {
    out->backward = [](Node& o) {
      Node& p = parent(o, 0);
      p.ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        const double x = p.value[i];
        const double u = k * (x + c3 * x * x * x);
        const double t = std::tanh(u);
        const double du = k * (1.0 + 3.0 * c3 * x * x);
        const double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
        p.grad[i] += o.grad[i] * d;
      }
    };
  }
  return Tensor(out);
}

Tensor tanh(const Tensor& a) {
  auto out = make_output(a.rows(), a.cols(), {&a});
  const auto& av = a.values();
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = std::tanh(av[i]);
  if (out->requires_grad) {
    out->backward = [](Node& o) {
      Node& p = parent(o, 0);
      p.ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        const double y = o.value[i];
        p.grad[i] += o.grad[i] * (1.0 - y * y);
      }
    };
  }
  return Tensor(out);
}

// ---------------------------------------------------------------- softmax family

Tensor masked_softmax(const Tensor& scores, const Mask& mask) {
  if (!mask.empty()) {
    require(mask.rows == scores.rows() && mask.cols == scores.cols(), "masked_softmax",
            "mask " + std::to_string(mask.rows) + "x" + std::to_string(mask.cols) + " vs scores " +
                shape_str(scores));
  }
  auto out = make_output(scores.rows(), scores.cols(), {&scores});
  const int cols = scores.cols();
  const auto& sv = scores.values();
  for (int r = 0; r < scores.rows(); ++r) {
    const std::size_t base = static_cast<std::size_t>(r) * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < cols; ++c) {
      if (mask.at(r, c)) mx = std::max(mx, sv[base + c]);
    }
    if (mx == -std::numeric_limits<double>::infinity()) continue;  // fully masked row
    double total = 0.0;
    for (int c = 0; c < cols; ++c) {
      if (mask.at(r, c)) {
        const double e = std::exp(sv[base + c] - mx);
        out->value[base + c] = e;
        total += e;
      }
    }
    for (int c = 0; c < cols; ++c) out->value[base + c] /= total;
  }
  if (out->requires_grad) {
    out->backward = [](Node& o) {
      Node& p = parent(o, 0);
      p.ensure_grad();
      for (int r = 0; r < o.rows; ++r) {
        const std::size_t base = static_cast<std::size_t>(r) * o.cols;
        double dot = 0.0;
        for (int c = 0; c < o.cols; ++c) dot += o.grad[base + c] * o.value[base + c];
        for (int c = 0; c < o.cols; ++c) {
          p.grad[base + c] += o.value[base + c] * (o.grad[base + c] - dot);
        }
      }
    };
  }
  return Tensor(out);
}

Tensor softmax_rows(const Tensor& a) { return masked_softmax(a, Mask{}); }

Tensor log_softmax_rows(const Tensor& a) {
  auto out = make_output(a.rows(), a.cols(), {&a});
  const int cols = a.cols();
  const auto& av = a.values();
  for (int r = 0; r < a.rows(); ++r) {
    const std::size_t base = static_cast<std::size_t>(r) * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < cols; ++c) mx = std::max(mx, av[base + c]);
    double total = 0.0;
    for (int c = 0; c < cols; ++c) total += std::exp(av[base + c] - mx);
    const double lse = mx + std::log(total);
    for (int c = 0; c < cols; ++c) out->value[base + c] = av[base + c] - lse;
  }
  if (out->requires_grad) {
    out->backward = [](Node& o) {
      Node& p = parent(o, 0);
      p.ensure_grad();
      for (int r = 0; r < o.rows; ++r) {
        const std::size_t base = static_cast<std::size_t>(r) * o.cols;
        double gsum = 0.0;
        for (int c = 0; c < o.cols; ++c) gsum += o.grad[base + c];
        for (int c = 0; c < o.cols; ++c) {
          p.grad[base + c] += o.grad[base + c] - std::exp(o.value[base + c]) * gsum;
        }
      }
    };
  }
  return Tensor(out);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require(gamma.rows() == 1 && gamma.cols() == x.cols() && beta.rows() == 1 &&
              beta.cols() == x.cols(),
          "layer_norm", "affine params must be 1x" + std::to_string(x.cols()));
  auto out = make_output(x.rows(), x.cols(), {&x, &gamma, &beta});
  const int n = x.cols();
  const auto& xv = x.values();
  const auto& g = gamma.values();
  const auto& b = beta.values();
  // normalized activations and inverse std are kept for the backward pass
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(x.rows()));
  for (int r = 0; r < x.rows(); ++r) {
    const std::size_t base = static_cast<std::size_t>(r) * n;
    double mu = 0.0;
    for (int c = 0; c < n; ++c) mu += xv[base + c];
    mu /= n;
    double var = 0.0;
    for (int c = 0; c < n; ++c) {
      const double d = xv[base + c] - mu;
      var += d * d;
    }
    var /= n;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (int c = 0; c < n; ++c) {
      const double h = (xv[base + c] - mu) * is;
      (*xhat)[base + c] = h;
      out->value[base + c] = h * g[c] + b[c];
    }
  }
  if (out->requires_grad) {
    out->backward = [xhat, inv_std](Node& o) {
      Node& px = parent(o, 0);
      Node& pg = parent(o, 1);
      Node& pb = parent(o, 2);
      const int n = o.cols;
      if (pg.requires_grad) pg.ensure_grad();
      if (pb.requires_grad) pb.ensure_grad();
      if (px.requires_grad) px.ensure_grad();
      for (int r = 0; r < o.rows; ++r) {
        const std::size_t base = static_cast<std::size_t>(r) * n;
        double sum_dh = 0.0;
        double sum_dh_h = 0.0;
        for (int c = 0; c < n; ++c) {
          const double go = o.grad[base + c];
          const double h = (*xhat)[base + c];
          if (pg.requires_grad) pg.grad[c] += go * h;
          if (pb.requires_grad) pb.grad[c] += go;
          const double dh = go * pg.value[c];
          sum_dh += dh;
          sum_dh_h += dh * h;
        }
        if (!px.requires_grad) continue;
        const double is = (*inv_std)[r];
        for (int c = 0; c < n; ++c) {
          const double dh = o.grad[base + c] * pg.value[c];
          const double h = (*xhat)[base + c];
          px.grad[base + c] += is * (dh - sum_dh / n - h * sum_dh_h / n);
        }
      }
    };
  }
  return Tensor(out);
}

// ---------------------------------------------------------------- structural

Tensor concat_rows(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_rows", "no inputs");
  const int cols = parts.front().cols();
  int rows = 0;
  for (const auto& p : parts) {
    require(p.cols() == cols, "concat_rows", "column mismatch " + shape_str(p));
    rows += p.rows();
  }
  auto out = make_output_many(rows, cols, parts);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.values().begin(), p.values().end(), out->value.begin() + static_cast<std::ptrdiff_t>(off));
    off += p.size();
  }
  if (out->requires_grad) {
    out->backward = [](Node& o) {
      std::size_t off = 0;
      for (auto& pp : o.parents) {
        Node& p = *pp;
        const std::size_t n = p.value.size();
        if (p.requires_grad) {
          p.ensure_grad();
          for (std::size_t i = 0; i < n; ++i) p.grad[i] += o.grad[off + i];
        }
        off += n;
      }
    };
  }
  return Tensor(out);
}

Tensor concat_cols(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_cols", "no inputs");
  const int rows = parts.front().rows();
  int cols = 0;
  for (const auto& p : parts) {
    require(p.rows() == rows, "concat_cols", "row mismatch " + shape_str(p));
    cols += p.cols();
  }
  auto out = make_output_many(rows, cols, parts);
  int coff = 0;
  for (const auto& p : parts) {
    const int pc = p.cols();
    const auto& pv = p.values();
    for (int r = 0; r < rows; ++r) {
      std::copy(pv.begin() + static_cast<std::ptrdiff_t>(r) * pc,
                pv.begin() + static_cast<std::ptrdiff_t>(r + 1) * pc,
                out->value.begin() + static_cast<std::ptrdiff_t>(r) * cols + coff);
    }
    coff += pc;
  }
  if (out->requires_grad) {
    out->backward = [](Node& o) {
      int coff = 0;
      for (auto& pp : o.parents) {
        Node& p = *pp;
        if (p.requires_grad) {
          p.ensure_grad();
          for (int r = 0; r < o.rows; ++r) {
            for (int c = 0; c < p.cols; ++c) {
              p.grad[static_cast<std::size_t>(r) * p.cols + c] +=
                  o.grad[static_cast<std::size_t>(r) * o.cols + coff + c];
            }
          }
        }
        coff += p.cols;
      }
    };
  }
  return Tensor(out);
}

Tensor slice_rows(const Tensor& a, int begin, int count) {
  require(begin >= 0 && count >= 0 && begin + count <= a.rows(), "slice_rows",
          "range [" + std::to_string(begin) + ", +" + std::to_string(count) + ") of " + shape_str(a));
  auto out = make_output(count, a.cols(), {&a});
  const auto first = a.values().begin() + static_cast<std::ptrdiff_t>(begin) * a.cols();
  std::copy(first, first + static_cast<std::ptrdiff_t>(count) * a.cols(), out->value.begin());
  if (out->requires_grad) {
    out->backward = [begin](Node& o) {
      Node& p = parent(o, 0);
      p.ensure_grad();
      const std::size_t off = static_cast<std::size_t>(begin) * o.cols;
      for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[off + i] += o.grad[i];
    };
  }
  return Tensor(out);
}

Tensor slice_cols(const Tensor& a, int begin, int count) {
  require(begin >= 0 && count >= 0 && begin + count <= a.cols(), "slice_cols",
          "range [" + std::to_string(begin) + ", +" + std::to_string(count) + ") of " + shape_str(a));
  auto out = make_output(a.rows(), count, {&a});
  const auto& av = a.values();
  for (int r = 0; r < a.rows(); ++r) {
    for (int c = 0; c < count; ++c) {
      out->value[static_cast<std::size_t>(r) * count + c] = av[static_cast<std::size_t>(r) * a.cols() + begin + c];
    }
  }
  if (out->requires_grad) {
    out->backward = [begin](Node& o) {
      Node& p = parent(o, 0);
      p.ensure_grad();
      for (int r = 0; r < o.rows; ++r) {
        for (int c = 0; c < o.cols; ++c) {
          p.grad[static_cast<std::size_t>(r) * p.cols + begin + c] += o.grad[static_cast<std::size_t>(r) * o.cols + c];
        }
      }
    };
  }
  return Tensor(out);
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  const int cols = table.cols();
  for (int id : ids) {
    require(id >= 0 && id < table.rows(), "gather_rows",
            "index " + std::to_string(id) + " out of " + std::to_string(table.rows()));
  }
  auto out = make_output(static_cast<int>(ids.size()), cols, {&table});
  const auto& tv = table.values();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    std::copy(tv.begin() + static_cast<std::ptrdiff_t>(ids[r]) * cols,
              tv.begin() + static_cast<std::ptrdiff_t>(ids[r] + 1) * cols,
              out->value.begin() + static_cast<std::ptrdiff_t>(r) * cols);
  }
  if (out->requires_grad) {
    out->backward = [idx = std::vector<int>(ids.begin(), ids.end())](Node& o) {
      Node& p = parent(o, 0);
      p.ensure_grad();
      for (std::size_t r = 0; r < idx.size(); ++r) {
        for (int c = 0; c < o.cols; ++c) {
          p.grad[static_cast<std::size_t>(idx[r]) * o.cols + c] += o.grad[r * o.cols + c];
        }
      }
    };
  }
  return Tensor(out);
}

Tensor masked_mean_rows(const Tensor& a, std::span<const std::uint8_t> valid) {
  require(valid.empty() || static_cast<int>(valid.size()) == a.rows(), "masked_mean_rows",
          "mask length " + std::to_string(valid.size()) + " vs rows " + std::to_string(a.rows()));
  std::vector<int> rows;
  for (int r = 0; r < a.rows(); ++r) {
    if (valid.empty() || valid[r]) rows.push_back(r);
  }
  require(!rows.empty(), "masked_mean_rows", "no valid rows");
  const int cols = a.cols();
  auto out = make_output(1, cols, {&a});
  const auto& av = a.values();
  for (int r : rows) {
    for (int c = 0; c < cols; ++c) out->value[c] += av[static_cast<std::size_t>(r) * cols + c];
  }
  const double inv = 1.0 / static_cast<double>(rows.size());
  for (int c = 0; c < cols; ++c) out->value[c] *= inv;
  if (out->requires_grad) {
    out->backward = [rows = std::move(rows), inv](Node& o) {
      Node& p = parent(o, 0);
      p.ensure_grad();
      for (int r : rows) {
        for (int c = 0; c < o.cols; ++c) p.grad[static_cast<std::size_t>(r) * o.cols + c] += o.grad[c] * inv;
      }
    };
  }
  return Tensor(out);
}

Tensor sum(const Tensor& a) {
  auto out = make_output(1, 1, {&a});
  double s = 0.0;
  for (double v : a.values()) s += v;
  out->value[0] = s;
  if (out->requires_grad) {
    out->backward = [](Node& o) {
      Node& p = parent(o, 0);
      p.ensure_grad();
      for (double& g : p.grad) g += o.grad[0];
    };
  }
  return Tensor(out);
}

Tensor mean(const Tensor& a) {
  require(a.size() > 0, "mean", "empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor cross_entropy_sum(const Tensor& logits, std::span<const int> targets,
                         std::span<const std::uint8_t> include) {
  require(static_cast<int>(targets.size()) == logits.rows(), "cross_entropy_sum",
          "target count " + std::to_string(targets.size()) + " vs rows " + std::to_string(logits.rows()));
  require(include.empty() || include.size() == targets.size(), "cross_entropy_sum", "include length");
  std::vector<int> rows;
  for (int r = 0; r < logits.rows(); ++r) {
    if (!include.empty() && !include[r]) continue;
    require(targets[r] >= 0 && targets[r] < logits.cols(), "cross_entropy_sum",
            "target " + std::to_string(targets[r]) + " out of " + std::to_string(logits.cols()));
    rows.push_back(r);
  }
  if (rows.empty()) return Tensor::scalar(0.0);
  const int cols = logits.cols();
  auto out = make_output(1, 1, {&logits});
  const auto& lv = logits.values();
  auto probs = std::make_shared<std::vector<double>>(rows.size() * static_cast<std::size_t>(cols));
  double total = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::size_t base = static_cast<std::size_t>(rows[i]) * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < cols; ++c) mx = std::max(mx, lv[base + c]);
    double z = 0.0;
    for (int c = 0; c < cols; ++c) z += std::exp(lv[base + c] - mx);
    const double lse = mx + std::log(z);
    total += lse - lv[base + targets[rows[i]]];
    for (int c = 0; c < cols; ++c) (*probs)[i * cols + c] = std::exp(lv[base + c] - lse);
  }
  out->value[0] = total;
  if (out->requires_grad) {
    out->backward = [rows = std::move(rows), probs,
                     tgt = std::vector<int>(targets.begin(), targets.end())](Node& o) {
      Node& p = parent(o, 0);
      p.ensure_grad();
      const double g = o.grad[0];
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const std::size_t base = static_cast<std::size_t>(rows[i]) * o.parents[0]->cols;
        const int cols = p.cols;
        for (int c = 0; c < cols; ++c) p.grad[base + c] += g * (*probs)[i * cols + c];
        p.grad[base + tgt[rows[i]]] -= g;
      }
    };
  }
  return Tensor(out);
}

}  // namespace wsr::ad
