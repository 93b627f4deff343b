#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "wsr/corpus.hpp"
#include "wsr/nn.hpp"
#include "wsr/regions.hpp"
#include "wsr/rng.hpp"

namespace wsr::mrvit {

using ad::Tensor;

// Patch image -> d_c vector.
class Backbone {
 public:
  virtual ~Backbone() = default;
  virtual int output_dim() const = 0;
  virtual std::vector<double> extract(const corpus::Patch& patch) const = 0;
  virtual bool trainable() const { return false; }
  virtual std::string id() const = 0;
};

// Three conv3x3+ReLU+maxpool2 stages followed by global average pooling.
// Weights are drawn once from the seed and never updated.
class ConvBackbone : public Backbone {
 public:
  ConvBackbone(int out_dim, std::uint64_t seed, std::vector<int> channels = {8, 16});

  int output_dim() const override { return out_dim_; }
  std::vector<double> extract(const corpus::Patch& patch) const override;
  std::string id() const override;

 private:
  struct Conv {
    int in = 0;
    int out = 0;
    std::vector<float> weight;  // (9*in) x out, row-major
    std::vector<float> bias;
  };
  std::vector<Conv> stages_;
  int out_dim_;
  std::uint64_t seed_;
};

// Backbone outputs for every patch of a slide, computed once.
struct SlideTokens {
  std::string slide_id;
  int dim = 0;
  std::vector<std::vector<double>> level1;
  std::vector<std::vector<double>> level2;
};

SlideTokens extract_slide_tokens(const corpus::SlidePyramid& pyramid, const Backbone& backbone);

// F_C for one region: row i is the backbone output of slot i (row-major).
Tensor backbone_extract(const regions::Region& region, const corpus::SlidePyramid& pyramid,
                        const Backbone& backbone);
Tensor region_tokens(const regions::Region& region, const SlideTokens& tokens);

struct ViTConfig {
  int token_count = 16;
  int input_dim = 64;
  int embed_dim = 96;
  int depth = 2;
  int heads = 4;
  double mlp_ratio = 2.0;
  bool cls_token = true;
  int output_dim = 96;

  void validate() const;
};

void to_json(nlohmann::json& j, const ViTConfig& c);
void from_json(const nlohmann::json& j, ViTConfig& c);

class Encoder {
 public:
  virtual ~Encoder() = default;
  // tokens: n x input_dim. positions: grid slot of each row (empty = 0..n-1).
  virtual Tensor forward(const Tensor& tokens, std::span<const int> positions = {}) const = 0;
  virtual nn::ParamList parameters() const = 0;
  virtual int input_dim() const = 0;
  virtual int output_dim() const = 0;
  virtual int token_count() const = 0;
};

using EncoderFactory = std::function<std::unique_ptr<Encoder>(Rng&)>;

class EncoderBlock {
 public:
  EncoderBlock() = default;
  EncoderBlock(int dim, int heads, int hidden, Rng& rng);

  Tensor forward(const Tensor& x, nn::AttentionWeights* weights = nullptr) const;
  void collect(nn::ParamList& out, const std::string& prefix) const;

  nn::LayerNorm ln1;
  nn::MultiHeadAttention attn;
  nn::LayerNorm ln2;
  nn::FeedForward mlp;
};

// Pre-LN transformer encoder with a CLS token and learned positions;
// the output is the projected final CLS state.
class VisionTransformer : public Encoder {
 public:
  VisionTransformer(const ViTConfig& config, Rng& rng);

  Tensor forward(const Tensor& tokens, std::span<const int> positions = {}) const override;
  // Same, collecting head-averaged attention of every block.
  Tensor forward_with_attention(const Tensor& tokens, std::span<const int> positions,
                                std::vector<nn::AttentionWeights>* attention) const;
  nn::ParamList parameters() const override;
  int input_dim() const override { return config_.input_dim; }
  int output_dim() const override { return config_.output_dim; }
  int token_count() const override { return config_.token_count; }
  const ViTConfig& config() const { return config_; }

  nn::Linear token_proj;
  Tensor cls;        // 1 x embed
  Tensor pos;        // (token_count + 1) x embed; row 0 belongs to CLS
  std::vector<EncoderBlock> blocks;
  nn::LayerNorm norm;
  nn::Linear head;

 private:
  ViTConfig config_;
};

EncoderFactory vit_factory(const ViTConfig& config);

// Region features of one slide: enumerate -> assemble -> backbone -> encoder,
// in region enumeration order, under no-grad.
regions::FeatureMatrix encode_slide(const corpus::SlidePyramid& pyramid, const Backbone& backbone,
                                    const Encoder& vit_r, Rng& rng, const std::string& model_id = "");
regions::FeatureMatrix encode_slide(const corpus::SlidePyramid& pyramid, const SlideTokens& tokens,
                                    const Encoder& vit_r, Rng& rng, const std::string& model_id = "");

Tensor to_tensor(const regions::FeatureMatrix& m);
regions::FeatureMatrix to_feature_matrix(const Tensor& t);

}  // namespace wsr::mrvit
