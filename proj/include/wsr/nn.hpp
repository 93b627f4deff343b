#pragma once

#include <string>
#include <vector>

#include "wsr/rng.hpp"
#include "wsr/tensor.hpp"

namespace wsr::nn {

using ad::Tensor;

struct NamedParam {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedParam>;

Tensor normal_param(int rows, int cols, double stddev, Rng& rng);
Tensor xavier_param(int rows, int cols, Rng& rng);
Tensor constant_param(int rows, int cols, double value);

// Copies values by name; every name in dst must exist in src with equal shape.
void copy_values(const ParamList& src, const ParamList& dst);
void set_trainable(const ParamList& params, bool flag);
void zero_grads(const ParamList& params);
std::vector<Tensor> trainable_tensors(const ParamList& params);
std::size_t parameter_count(const ParamList& params);

class Linear {
 public:
  Linear() = default;
  Linear(int in_dim, int out_dim, Rng& rng, bool with_bias = true);

  Tensor forward(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;

  int in_dim() const { return weight.rows(); }
  int out_dim() const { return weight.cols(); }

  Tensor weight;  // in x out
  Tensor bias;    // 1 x out, undefined when built without bias
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(int dim);

  Tensor forward(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;

  Tensor gamma;
  Tensor beta;
};

class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(int dim, int hidden, Rng& rng);

  Tensor forward(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;

  Linear fc1;
  Linear fc2;
};

// Head-averaged attention probabilities, query rows x key columns.
struct AttentionWeights {
  int rows = 0;
  int cols = 0;
  std::vector<double> values;
};

// Scaled dot-product attention over already-projected q/k/v, split into
// `heads` column blocks. Masked keys receive exactly zero weight.
Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                      const ad::Mask& mask, AttentionWeights* weights = nullptr);

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(int dim, int heads, Rng& rng);

  Tensor forward(const Tensor& query, const Tensor& key_value, const ad::Mask& mask,
                 AttentionWeights* weights = nullptr) const;
  void collect(ParamList& out, const std::string& prefix) const;

  int heads = 1;
  Linear q;
  Linear k;
  Linear v;
  Linear o;
};

}  // namespace wsr::nn
