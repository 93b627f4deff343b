#pragma once

// Minimal reverse-mode automatic differentiation over row-major 2-D
// matrices. Every tensor is rows x cols of double; batched computations
// loop over items and concatenate. Graphs are built eagerly and released
// when the last handle to the output goes away.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace wsr::ad {

namespace detail {

struct Node {
  int rows = 0;
  int cols = 0;
  std::vector<double> value;
  std::vector<double> grad;  // lazily sized to value.size()
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(int rows, int cols, bool requires_grad = false);
  static Tensor full(int rows, int cols, double v, bool requires_grad = false);
  static Tensor from(int rows, int cols, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  int rows() const { return node_->rows; }
  int cols() const { return node_->cols; }
  std::size_t size() const { return node_->value.size(); }

  const std::vector<double>& values() const { return node_->value; }
  // Direct write access; only meaningful for leaves (parameters, inputs).
  std::vector<double>& mutable_values() { return node_->value; }
  double operator()(int r, int c) const {
    return node_->value[static_cast<std::size_t>(r) * node_->cols + c];
  }
  double item() const;

  // Gradient buffer; zeros when nothing has been accumulated yet.
  const std::vector<double>& grad() const;
  bool has_nonzero_grad() const;
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  void zero_grad();

  // Backpropagates from a 1x1 tensor.
  void backward() const;

  // New leaf with a copy of the values and no history.
  Tensor detach() const;
  Tensor clone(bool requires_grad) const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& shared() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

bool grad_enabled();

// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Row-major attention mask: nonzero = position allowed. Empty = all allowed.
struct Mask {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> allowed;

  bool empty() const { return allowed.empty(); }
  bool at(int r, int c) const {
    return allowed.empty() ||
           allowed[static_cast<std::size_t>(r) * cols + c] != 0;
  }
  static Mask causal(int n, int prefix = 0);
  static Mask key_padding(int query_rows, std::span<const std::uint8_t> keys);
};

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a * b^T
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_row(const Tensor& a, const Tensor& row);  // broadcast 1 x cols

Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor tanh(const Tensor& a);

// Row-wise softmax; masked entries are exactly zero. A row with no allowed
// entries is all zero.
Tensor masked_softmax(const Tensor& scores, const Mask& mask);
Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& a, int begin, int count);
Tensor slice_cols(const Tensor& a, int begin, int count);
Tensor gather_rows(const Tensor& table, std::span<const int> ids);

// Mean over rows flagged valid; 1 x cols. Invalid rows are skipped, not
// multiplied by zero.
Tensor masked_mean_rows(const Tensor& a, std::span<const std::uint8_t> valid);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Sum over included rows of -log softmax(logits)[target]; 1 x 1. Rows with
// include == 0 are skipped entirely.
Tensor cross_entropy_sum(const Tensor& logits, std::span<const int> targets,
                         std::span<const std::uint8_t> include = {});

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }

}  // namespace wsr::ad
