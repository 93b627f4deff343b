#include "wsr/nn.hpp"

#include <cmath>
#include <map>

#include "wsr/errors.hpp"

namespace wsr::nn {

Tensor normal_param(int rows, int cols, double stddev, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(rows) * cols);
  for (double& x : v) x = rng.normal(0.0, stddev);
  return Tensor::from(rows, cols, std::move(v), true);
}

Tensor xavier_param(int rows, int cols, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::vector<double> v(static_cast<std::size_t>(rows) * cols);
  for (double& x : v) x = rng.uniform(-limit, limit);
  return Tensor::from(rows, cols, std::move(v), true);
}

Tensor constant_param(int rows, int cols, double value) {
  return Tensor::full(rows, cols, value, true);
}

void copy_values(const ParamList& src, const ParamList& dst) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& p : src) by_name[p.name] = &p.tensor;
  for (const auto& p : dst) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw ShapeError("copy_values: missing parameter " + p.name);
    const Tensor& s = *it->second;
    if (s.rows() != p.tensor.rows() || s.cols() != p.tensor.cols()) {
      throw ShapeError("copy_values: shape mismatch for " + p.name);
    }
    Tensor t = p.tensor;
    t.mutable_values() = s.values();
  }
}

void set_trainable(const ParamList& params, bool flag) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.set_requires_grad(flag);
  }
}

void zero_grads(const ParamList& params) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

std::vector<Tensor> trainable_tensors(const ParamList& params) {
  std::vector<Tensor> out;
  for (const auto& p : params) {
    if (p.tensor.requires_grad()) out.push_back(p.tensor);
  }
  return out;
}

std::size_t parameter_count(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.size();
  return n;
}

// ---------------------------------------------------------------- Linear

Linear::Linear(int in_dim, int out_dim, Rng& rng, bool with_bias)
    : weight(xavier_param(in_dim, out_dim, rng)) {
  if (with_bias) bias = constant_param(1, out_dim, 0.0);
}

Tensor Linear::forward(const Tensor& x) const {
  Tensor y = ad::matmul(x, weight);
  return bias.defined() ? ad::add_row(y, bias) : y;
}

void Linear::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

// ---------------------------------------------------------------- LayerNorm

LayerNorm::LayerNorm(int dim) : gamma(constant_param(1, dim, 1.0)), beta(constant_param(1, dim, 0.0)) {}

Tensor LayerNorm::forward(const Tensor& x) const { return ad::layer_norm(x, gamma, beta); }

void LayerNorm::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

// ---------------------------------------------------------------- FeedForward

FeedForward::FeedForward(int dim, int hidden, Rng& rng) : fc1(dim, hidden, rng), fc2(hidden, dim, rng) {}

Tensor FeedForward::forward(const Tensor& x) const { return fc2.forward(ad::gelu(fc1.forward(x))); }

void FeedForward::collect(ParamList& out, const std::string& prefix) const {
  fc1.collect(out, prefix + ".fc1");
  fc2.collect(out, prefix + ".fc2");
}

// ---------------------------------------------------------------- attention

Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                      const ad::Mask& mask, AttentionWeights* weights) {
  if (q.cols() != k.cols() || k.cols() != v.cols() || k.rows() != v.rows()) {
    throw ShapeError("attention_core: q/k/v shapes disagree");
  }
  if (heads < 1 || q.cols() % heads != 0) {
    throw ShapeError("attention_core: width " + std::to_string(q.cols()) +
                     " not divisible by heads " + std::to_string(heads));
  }
  const int dh = q.cols() / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  if (weights != nullptr) {
    weights->rows = q.rows();
    weights->cols = k.rows();
    weights->values.assign(static_cast<std::size_t>(q.rows()) * k.rows(), 0.0);
  }
  std::vector<Tensor> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Tensor qh = heads == 1 ? q : ad::slice_cols(q, h * dh, dh);
    Tensor kh = heads == 1 ? k : ad::slice_cols(k, h * dh, dh);
    Tensor vh = heads == 1 ? v : ad::slice_cols(v, h * dh, dh);
    Tensor p = ad::masked_softmax(ad::scale(ad::matmul_nt(qh, kh), inv_sqrt), mask);
    if (weights != nullptr) {
      for (std::size_t i = 0; i < p.size(); ++i) weights->values[i] += p.values()[i] / heads;
    }
    outs.push_back(ad::matmul(p, vh));
  }
  return heads == 1 ? outs.front() : ad::concat_cols(outs);
}

MultiHeadAttention::MultiHeadAttention(int dim, int heads_, Rng& rng)
    : heads(heads_), q(dim, dim, rng), k(dim, dim, rng), v(dim, dim, rng), o(dim, dim, rng) {
  if (heads_ < 1 || dim % heads_ != 0) {
    throw ConfigError("attention width " + std::to_string(dim) + " not divisible by " +
                      std::to_string(heads_) + " heads");
  }
}

Tensor MultiHeadAttention::forward(const Tensor& query, const Tensor& key_value,
                                   const ad::Mask& mask, AttentionWeights* weights) const {
  Tensor ctx = attention_core(q.forward(query), k.forward(key_value), v.forward(key_value), heads,
                              mask, weights);
  return o.forward(ctx);
}

void MultiHeadAttention::collect(ParamList& out, const std::string& prefix) const {
  q.collect(out, prefix + ".q");
  k.collect(out, prefix + ".k");
  v.collect(out, prefix + ".v");
  o.collect(out, prefix + ".o");
}

}  // namespace wsr::nn
