#include "wsr/mrvit.hpp"

#include <cmath>
#include <numeric>

#include <Eigen/Dense>

#include "wsr/errors.hpp"

namespace wsr::mrvit {

using corpus::Patch;
using corpus::SlidePyramid;
using regions::FeatureMatrix;
using regions::Region;

// ---------------------------------------------------------------- backbone

ConvBackbone::ConvBackbone(int out_dim, std::uint64_t seed, std::vector<int> channels)
    : out_dim_(out_dim), seed_(seed) {
  if (out_dim < 1) throw ConfigError("backbone output dim must be positive");
  channels.insert(channels.begin(), 3);
  channels.push_back(out_dim);
  Rng rng(derive_seed(seed, "conv-backbone"));
  for (std::size_t s = 0; s + 1 < channels.size(); ++s) {
    Conv c;
    c.in = channels[s];
    c.out = channels[s + 1];
    const double stddev = std::sqrt(2.0 / (9.0 * c.in));
    c.weight.resize(static_cast<std::size_t>(9 * c.in * c.out));
    for (auto& w : c.weight) w = static_cast<float>(rng.normal(0.0, stddev));
    c.bias.assign(static_cast<std::size_t>(c.out), 0.0f);
    stages_.push_back(std::move(c));
  }
}

std::string ConvBackbone::id() const {
  return "conv" + std::to_string(stages_.size()) + "-d" + std::to_string(out_dim_) + "-s" +
         std::to_string(seed_);
}

std::vector<double> ConvBackbone::extract(const Patch& patch) const {
  using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  int h = patch.size;
  int w = patch.size;
  if (h < 1 || patch.pixels.size() != static_cast<std::size_t>(h * w * 3)) {
    throw ShapeError("backbone: patch is not size x size x 3");
  }
  // activations stored (h*w) x channels
  RowMat act(h * w, 3);
  for (int i = 0; i < h * w; ++i) {
    for (int ch = 0; ch < 3; ++ch) act(i, ch) = patch.pixels[static_cast<std::size_t>(i * 3 + ch)] - 0.5f;
  }
  for (const auto& conv : stages_) {
    RowMat cols = RowMat::Zero(h * w, 9 * conv.in);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const int row = y * w + x;
        for (int ky = 0; ky < 3; ++ky) {
          const int yy = y + ky - 1;
          if (yy < 0 || yy >= h) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int xx = x + kx - 1;
            if (xx < 0 || xx >= w) continue;
            cols.block(row, (ky * 3 + kx) * conv.in, 1, conv.in) = act.row(yy * w + xx);
          }
        }
      }
    }
    Eigen::Map<const RowMat> wm(conv.weight.data(), 9 * conv.in, conv.out);
    Eigen::Map<const Eigen::RowVectorXf> bias(conv.bias.data(), conv.out);
    RowMat out = cols * wm;
    out.rowwise() += bias;
    out = out.cwiseMax(0.0f);
    // 2x2 max pool (floor)
    const int h2 = std::max(1, h / 2);
    const int w2 = std::max(1, w / 2);
    RowMat pooled(h2 * w2, conv.out);
    for (int y = 0; y < h2; ++y) {
      for (int x = 0; x < w2; ++x) {
        Eigen::RowVectorXf m = out.row(std::min(2 * y, h - 1) * w + std::min(2 * x, w - 1));
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const int yy = 2 * y + dy;
            const int xx = 2 * x + dx;
            if (yy < h && xx < w) m = m.cwiseMax(out.row(yy * w + xx));
          }
        }
        pooled.row(y * w2 + x) = m;
      }
    }
    act = std::move(pooled);
    h = h2;
    w = w2;
  }
  const Eigen::RowVectorXf gap = act.colwise().mean();
  std::vector<double> result(static_cast<std::size_t>(out_dim_));
  for (int i = 0; i < out_dim_; ++i) {
    result[static_cast<std::size_t>(i)] = gap(i);
    if (!std::isfinite(result[static_cast<std::size_t>(i)])) throw NumericError("backbone produced non-finite output");
  }
  return result;
}

SlideTokens extract_slide_tokens(const SlidePyramid& pyr, const Backbone& backbone) {
  SlideTokens t;
  t.slide_id = pyr.slide_id;
  t.dim = backbone.output_dim();
  for (const auto& p : pyr.level1) t.level1.push_back(backbone.extract(p));
  for (const auto& p : pyr.level2) t.level2.push_back(backbone.extract(p));
  return t;
}

namespace {

Tensor stack_rows(const std::vector<const std::vector<double>*>& rows, int dim) {
  std::vector<double> v;
  v.reserve(rows.size() * static_cast<std::size_t>(dim));
  for (const auto* r : rows) {
    if (static_cast<int>(r->size()) != dim) throw ShapeError("backbone output width changed between calls");
    for (double x : *r) {
      if (!std::isfinite(x)) throw NumericError("non-finite backbone feature");
      v.push_back(x);
    }
  }
  return Tensor::from(static_cast<int>(rows.size()), dim, std::move(v));
}

}  // namespace


Tensor backbone_extract(const Region& region, const SlidePyramid& pyr, const Backbone& backbone) {
  regions::validate_region(region, pyr);
  std::vector<std::vector<double>> outs;
  outs.reserve(region.slots.size());
  for (const auto& s : region.slots) outs.push_back(backbone.extract(regions::token_patch(pyr, s)));
  std::vector<const std::vector<double>*> ptrs;
  for (const auto& o : outs) ptrs.push_back(&o);
  return stack_rows(ptrs, backbone.output_dim());
}

Tensor region_tokens(const Region& region, const SlideTokens& tokens) {
  std::vector<const std::vector<double>*> ptrs;
  for (const auto& s : region.slots) {
    const auto& level = s.scale == regions::Scale::Level2 ? tokens.level2 : tokens.level1;
    ptrs.push_back(&level.at(static_cast<std::size_t>(s.index)));
  }
  return stack_rows(ptrs, tokens.dim);
}

// ---------------------------------------------------------------- ViT

void ViTConfig::validate() const {
  if (token_count < 1 || input_dim < 1 || embed_dim < 1 || depth < 0 || heads < 1 || output_dim < 1 ||
      mlp_ratio <= 0.0) {
    throw ConfigError("ViT config has non-positive dimensions");
  }
  if (embed_dim % heads != 0) {
    throw ConfigError("ViT embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
                      std::to_string(heads));
  }
}

void to_json(nlohmann::json& j, const ViTConfig& c) {
  j = nlohmann::json{{"token_count", c.token_count}, {"input_dim", c.input_dim}, {"embed_dim", c.embed_dim},
                     {"depth", c.depth},             {"heads", c.heads},         {"mlp_ratio", c.mlp_ratio},
                     {"cls_token", c.cls_token},     {"output_dim", c.output_dim}};
}

void from_json(const nlohmann::json& j, ViTConfig& c) {
  c.token_count = j.value("token_count", c.token_count);
  c.input_dim = j.value("input_dim", c.input_dim);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.depth = j.value("depth", c.depth);
  c.heads = j.value("heads", c.heads);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.cls_token = j.value("cls_token", c.cls_token);
  c.output_dim = j.value("output_dim", c.output_dim);
}

EncoderBlock::EncoderBlock(int dim, int heads, int hidden, Rng& rng)
    : ln1(dim), attn(dim, heads, rng), ln2(dim), mlp(dim, hidden, rng) {}

Tensor EncoderBlock::forward(const Tensor& x, nn::AttentionWeights* weights) const {
  const Tensor h = ln1.forward(x);
  const Tensor a = x + attn.forward(h, h, ad::Mask{}, weights);
  return a + mlp.forward(ln2.forward(a));
}

void EncoderBlock::collect(nn::ParamList& out, const std::string& prefix) const {
  ln1.collect(out, prefix + ".ln1");
  attn.collect(out, prefix + ".attn");
  ln2.collect(out, prefix + ".ln2");
  mlp.collect(out, prefix + ".mlp");
}

VisionTransformer::VisionTransformer(const ViTConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  if (!config_.cls_token) throw ConfigError("ViT without a CLS token is not supported");
  token_proj = nn::Linear(config_.input_dim, config_.embed_dim, rng);
  cls = nn::normal_param(1, config_.embed_dim, 0.02, rng);
  pos = nn::normal_param(config_.token_count + 1, config_.embed_dim, 0.02, rng);
  const int hidden = std::max(1, static_cast<int>(std::lround(config_.embed_dim * config_.mlp_ratio)));
  for (int d = 0; d < config_.depth; ++d) blocks.emplace_back(config_.embed_dim, config_.heads, hidden, rng);
  norm = nn::LayerNorm(config_.embed_dim);
  head = nn::Linear(config_.embed_dim, config_.output_dim, rng);
}

Tensor VisionTransformer::forward(const Tensor& tokens, std::span<const int> positions) const {
  return forward_with_attention(tokens, positions, nullptr);
}

Tensor VisionTransformer::forward_with_attention(const Tensor& tokens, std::span<const int> positions,
                                                 std::vector<nn::AttentionWeights>* attention) const {
  if (tokens.cols() != config_.input_dim) {
    throw ShapeError("ViT expects token width " + std::to_string(config_.input_dim) + ", got " +
                     std::to_string(tokens.cols()));
  }
  std::vector<int> ids;  // rows of `pos`
  ids.push_back(0);
  if (positions.empty()) {
    if (tokens.rows() != config_.token_count) {
      throw ShapeError("ViT expects " + std::to_string(config_.token_count) + " tokens, got " +
                       std::to_string(tokens.rows()));
    }
    for (int i = 0; i < tokens.rows(); ++i) ids.push_back(i + 1);
  } else {
    if (static_cast<int>(positions.size()) != tokens.rows() || tokens.rows() > config_.token_count) {
      throw ShapeError("ViT positions do not match the token rows");
    }
    for (int p : positions) {
      if (p < 0 || p >= config_.token_count) throw ShapeError("ViT position out of range");
      ids.push_back(p + 1);
    }
  }
  const Tensor projected = token_proj.forward(tokens);
  const std::vector<Tensor> parts{cls, projected};
  Tensor x = ad::concat_rows(parts) + ad::gather_rows(pos, ids);
  if (attention != nullptr) attention->clear();
  for (const auto& b : blocks) {
    nn::AttentionWeights w;
    x = b.forward(x, attention != nullptr ? &w : nullptr);
    if (attention != nullptr) attention->push_back(std::move(w));
  }
  return head.forward(norm.forward(ad::slice_rows(x, 0, 1)));
}

nn::ParamList VisionTransformer::parameters() const {
  nn::ParamList out;
  token_proj.collect(out, "token_proj");
  out.push_back({"cls", cls});
  out.push_back({"pos", pos});
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(out, "blocks." + std::to_string(i));
  norm.collect(out, "norm");
  head.collect(out, "head");
  return out;
}

EncoderFactory vit_factory(const ViTConfig& config) {
  return [config](Rng& rng) -> std::unique_ptr<Encoder> { return std::make_unique<VisionTransformer>(config, rng); };
}

// ---------------------------------------------------------------- slide encoding

Tensor to_tensor(const FeatureMatrix& m) {
  std::vector<double> v(m.values.begin(), m.values.end());
  return Tensor::from(m.rows, m.dim, std::move(v));
}

FeatureMatrix to_feature_matrix(const Tensor& t) {
  FeatureMatrix m;
  m.rows = t.rows();
  m.dim = t.cols();
  m.values.reserve(t.size());
  for (double x : t.values()) m.values.push_back(static_cast<float>(x));
  return m;
}

namespace {

template <typename TokenFn>
FeatureMatrix encode_regions(const SlidePyramid& pyr, const Encoder& vit, Rng& rng, const std::string& model_id,
                             TokenFn&& tokens_of) {
  ad::NoGradGuard guard;
  FeatureMatrix out;
  out.dim = vit.output_dim();
  out.model_id = model_id;
  out.slide_id = pyr.slide_id;
  for (const auto& g : regions::enumerate_regions(pyr, pyr.grid)) {
    Region r = regions::assemble_region(g, pyr.grid, rng);
    r.slide_id = pyr.slide_id;
    const Tensor f = vit.forward(tokens_of(r));
    for (double x : f.values()) {
      if (!std::isfinite(x)) throw NumericError("encoder produced a non-finite feature for " + pyr.slide_id);
      out.values.push_back(static_cast<float>(x));
    }
    ++out.rows;
  }
  return out;
}

}  // namespace

FeatureMatrix encode_slide(const SlidePyramid& pyr, const Backbone& backbone, const Encoder& vit_r, Rng& rng,
                           const std::string& model_id) {
  return encode_regions(pyr, vit_r, rng, model_id,
                        [&](const Region& r) { return backbone_extract(r, pyr, backbone); });
}

FeatureMatrix encode_slide(const SlidePyramid& pyr, const SlideTokens& tokens, const Encoder& vit_r, Rng& rng,
                           const std::string& model_id) {
  return encode_regions(pyr, vit_r, rng, model_id, [&](const Region& r) { return region_tokens(r, tokens); });
}

}  // namespace wsr::mrvit
