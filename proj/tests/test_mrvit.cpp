#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "wsr/corpus.hpp"
#include "wsr/errors.hpp"
#include "wsr/mrvit.hpp"

using namespace wsr;
using namespace wsr::mrvit;
using wsr::testing::gradcheck;
using wsr::testing::random_tensor;

namespace {

class ZeroBackbone : public Backbone {
 public:
  int output_dim() const override { return 5; }
  std::vector<double> extract(const corpus::Patch&) const override { return std::vector<double>(5, 0.0); }
  std::string id() const override { return "zero"; }
};

// Mean colour per channel; cheap and slot-identifying for synthetic patches.
class MeanBackbone : public Backbone {
 public:
  int output_dim() const override { return 3; }
  std::vector<double> extract(const corpus::Patch& p) const override {
    std::vector<double> m(3, 0.0);
    for (std::size_t i = 0; i < p.pixels.size(); ++i) m[i % 3] += p.pixels[i];
    for (double& x : m) x /= static_cast<double>(p.pixels.size() / 3);
    return m;
  }
  std::string id() const override { return "mean"; }
};

corpus::SlidePyramid sample_pyramid(int rows2 = 2, int cols2 = 2) {
  auto dims = corpus::SizeConfig{};
  dims.level2_rows = rows2;
  dims.level2_cols = cols2;
  const auto c = corpus::generate_corpus(corpus::default_schemas(), 1, 3, dims);
  const auto& p = c.patients[0].patient;
  return corpus::render_slide(p, c.schema_of(p), 0, c.dims);
}

ViTConfig tiny(int tokens, int in) {
  ViTConfig c;
  c.token_count = tokens;
  c.input_dim = in;
  c.embed_dim = 8;
  c.depth = 2;
  c.heads = 2;
  c.mlp_ratio = 1.0;
  c.output_dim = 6;
  return c;
}


}  // namespace

TEST_CASE("backbone_extract: zero backbone, slot permutation, determinism") {
  const auto pyr = sample_pyramid();
  const auto g = regions::enumerate_regions(pyr, 4).front();
  const auto r = regions::assemble_region_at(g, 4, 3);

  const Tensor z = backbone_extract(r, pyr, ZeroBackbone{});
  CHECK(z.rows() == 16);
  CHECK(z.cols() == 5);
  for (double x : z.values()) CHECK(x == 0.0);

  MeanBackbone mb;
  const Tensor base = backbone_extract(r, pyr, mb);
  auto swapped = r;
  std::swap(swapped.slots[0], swapped.slots[7]);
  const Tensor perm = backbone_extract(swapped, pyr, mb);
  for (int c = 0; c < 3; ++c) {
    CHECK(perm(0, c) == base(7, c));
    CHECK(perm(7, c) == base(0, c));
    CHECK(perm(1, c) == base(1, c));
  }

  ConvBackbone conv(16, 1);
  const Tensor a = backbone_extract(r, pyr, conv);
  const Tensor b = backbone_extract(r, pyr, conv);
  CHECK(a.values() == b.values());
  CHECK(a.cols() == 16);
  const auto cached = extract_slide_tokens(pyr, conv);
  CHECK(region_tokens(r, cached).values() == a.values());
}

TEST_CASE("ViT output shape, eval determinism and attention rows") {
  Rng rng(1);
  ViTConfig cfg;
  cfg.input_dim = 12;
  VisionTransformer vit(cfg, rng);
  const Tensor x = random_tensor(16, 12, 4, false);
  const Tensor a = vit.forward(x);
  const Tensor b = vit.forward(x);
  CHECK(a.rows() == 1);
  CHECK(a.cols() == cfg.output_dim);
  CHECK(a.values() == b.values());

  std::vector<nn::AttentionWeights> att;
  vit.forward_with_attention(x, {}, &att);
  REQUIRE(att.size() == 2);
  for (const auto& w : att) {
    CHECK(w.rows == 17);
    for (int r = 0; r < w.rows; ++r) {
      double s = 0.0;
      for (int c = 0; c < w.cols; ++c) s += w.values[static_cast<std::size_t>(r * w.cols + c)];
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }

  CHECK_THROWS_AS(vit.forward(random_tensor(15, 12, 4, false)), ShapeError);
  CHECK_THROWS_AS(vit.forward(random_tensor(16, 11, 4, false)), ShapeError);
}

TEST_CASE("ViT property sweep over small configs") {
  Rng cfg_rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    ViTConfig c;
    c.heads = 1 + cfg_rng.uniform_int(3);
    c.embed_dim = c.heads * (1 + cfg_rng.uniform_int(4));
    c.token_count = 1 + cfg_rng.uniform_int(9);
    c.input_dim = 1 + cfg_rng.uniform_int(6);
    c.depth = cfg_rng.uniform_int(3);
    c.output_dim = 1 + cfg_rng.uniform_int(7);
    Rng rng(static_cast<std::uint64_t>(trial));
    VisionTransformer vit(c, rng);
    const Tensor out = vit.forward(random_tensor(c.token_count, c.input_dim, 3, false));
    CHECK(out.cols() == c.output_dim);
    for (double v : out.values()) CHECK(std::isfinite(v));
  }
  ViTConfig bad;
  bad.embed_dim = 10;
  bad.heads = 4;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("depth-0 ViT ignores its inputs") {
  Rng rng(2);
  ViTConfig cfg = tiny(4, 3);
  cfg.depth = 0;
  VisionTransformer vit(cfg, rng);
  const Tensor a = vit.forward(random_tensor(4, 3, 1, false));
  const Tensor b = vit.forward(random_tensor(4, 3, 2, false, 5.0));
  CHECK(a.values() == b.values());
}

TEST_CASE("token permutation changes the output with nonzero positions") {
  Rng rng(3);
  VisionTransformer vit(tiny(4, 3), rng);
  const Tensor x = random_tensor(4, 3, 1, false);
  const std::vector<int> order{3, 2, 1, 0};
  const Tensor perm = ad::gather_rows(x, order);
  const Tensor a = vit.forward(x);
  const Tensor b = vit.forward(perm);
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += std::abs(a.values()[i] - b.values()[i]);
  CHECK(d > 1e-9);
}

TEST_CASE("slide ViT accepts duplicate rows and token subsets keep positions") {
  Rng rng(4);
  VisionTransformer vit(tiny(4, 3), rng);
  Tensor x = random_tensor(1, 3, 1, false);
  const std::vector<int> dup{0, 0, 0, 0};
  CHECK(vit.forward(ad::gather_rows(x, dup)).cols() == 6);
  const std::vector<int> pos{1, 3};
  CHECK(vit.forward(random_tensor(2, 3, 2, false), pos).cols() == 6);
  const std::vector<int> bad{1, 4};
  CHECK_THROWS_AS(vit.forward(random_tensor(2, 3, 2, false), bad), ShapeError);
}

TEST_CASE("ViT gradients match finite differences at tiny dims") {
  for (int draw = 0; draw < 20; ++draw) {
    const bool region = draw % 2 == 0;  // region ViT (16 tokens) and slide ViT (4 tokens)
    Rng rng(100 + static_cast<std::uint64_t>(draw));
    VisionTransformer vit(tiny(region ? 16 : 4, region ? 8 : 6), rng);
    // nudge zero-initialised params away from special points
    for (auto& p : vit.parameters()) {
      auto& v = p.tensor.mutable_values();
      for (double& x : v) x += rng.normal(0.0, 0.1);
    }
    const Tensor x = random_tensor(vit.token_count(), vit.input_dim(), 500 + static_cast<std::uint64_t>(draw));
    const Tensor w = random_tensor(1, 6, 900 + static_cast<std::uint64_t>(draw), false);
    std::vector<Tensor> leaves{x};
    for (const auto& p : vit.parameters()) leaves.push_back(p.tensor);
    const double err = gradcheck([&] { return ad::sum(ad::mul(vit.forward(x), w)); }, leaves);
    CHECK(err < 1e-3);
  }
}

TEST_CASE("encode_slide counts, determinism and empty slides") {
  const auto pyr = sample_pyramid(2, 3);
  ConvBackbone conv(8, 1);
  Rng rng(1);
  ViTConfig cfg;
  cfg.input_dim = 8;
  VisionTransformer vit(cfg, rng);
  Rng r1(5);
  Rng r2(5);
  const auto a = encode_slide(pyr, conv, vit, r1);
  const auto tokens = extract_slide_tokens(pyr, conv);
  const auto b = encode_slide(pyr, tokens, vit, r2);
  CHECK(a.rows == 6);
  CHECK(a.dim == cfg.output_dim);
  CHECK(a.same_payload(b));

  corpus::SlidePyramid empty;
  empty.grid = 4;
  Rng r3(1);
  CHECK(encode_slide(empty, conv, vit, r3).rows == 0);
}
