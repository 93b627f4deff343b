#include <doctest.h>

#include <array>
#include <cmath>
#include <map>
#include <set>

#include "gradcheck.hpp"
#include "wsr/errors.hpp"
#include "wsr/optim.hpp"
#include "wsr/reportgen.hpp"

using namespace wsr;
using namespace wsr::reportgen;
using wsr::testing::gradcheck;
using wsr::testing::random_tensor;

namespace {

GeneratorConfig tiny_config() {
  GeneratorConfig c;
  c.input_dim = 6;
  c.organ_hidden = 5;
  c.tag_dim = 8;
  c.heads = 2;
  c.gd_depth = 1;
  c.ffn_hidden = 8;
  c.tag_cls_hidden = 7;
  c.lm_width = 8;
  c.lm_blocks = 2;
  c.lm_heads = 2;
  c.lm_ffn = 8;
  c.lm_max_positions = 16;
  c.max_len = 8;
  c.tag_counts = {4, 3};
  return c;
}

constexpr int kVocab = 20;

regions::FeatureMatrix slide(int rows, int dim, std::uint64_t seed) {
  Rng rng(seed);
  regions::FeatureMatrix m;
  m.rows = rows;
  m.dim = dim;
  for (int i = 0; i < rows * dim; ++i) m.values.push_back(static_cast<float>(rng.normal()));
  return m;
}

PatientFeatures random_patient(int rows, std::uint64_t seed) { return aggregate_patient({slide(rows, 6, seed)}); }

std::vector<int> random_sentence(Rng& rng) {
  std::vector<int> s{parsing::Vocab::kBos};
  const int n = 1 + rng.uniform_int(5);
  for (int i = 0; i < n; ++i) s.push_back(4 + rng.uniform_int(kVocab - 4));
  s.push_back(parsing::Vocab::kEos);
  return s;
}

Targets random_targets(int organ, int k, Rng& rng) {
  Targets t;
  t.organ = organ;
  for (int i = 0; i < k; ++i) {
    t.tag_mask.push_back(rng.bernoulli(0.7) ? 1 : 0);
    t.tag_classes.push_back(rng.uniform_int(27));
    t.sentence_ids.push_back(random_sentence(rng));
  }
  t.tag_mask[0] = 1;
  return t;
}

struct RandomBatch {
  std::vector<PatientFeatures> items;
  TagBatch tags;
  std::vector<Targets> targets;
};

RandomBatch random_batch(const ReportGenerator& gen, Rng& rng) {
  RandomBatch b;
  const int n = 2 + rng.uniform_int(2);
  std::vector<int> organs;
  std::vector<PatientFeatures> raw;
  for (int i = 0; i < n; ++i) {
    organs.push_back(i == 0 ? 0 : (i == 1 ? 1 : rng.uniform_int(2)));
    raw.push_back(random_patient(1 + rng.uniform_int(6), rng.engine()()));
  }
  b.items = pad_batch(raw);
  b.tags = select_tags_for(organs, gen.dictionary);
  for (int i = 0; i < n; ++i) b.targets.push_back(random_targets(organs[static_cast<std::size_t>(i)], b.tags.k[static_cast<std::size_t>(i)], rng));
  return b;
}

std::array<double, 4> losses(const ReportGenerator& gen, const RandomBatch& b) {
  const auto p = compute_losses(gen, b.items, b.tags, b.targets);
  return {p.organ.item(), p.tag.item(), p.sentence.item(), p.total.item()};
}

}  // namespace

TEST_CASE("aggregate and pad patients") {
  const auto pf = aggregate_patient({slide(3, 6, 1), slide(5, 6, 2)});
  CHECK(pf.length() == 8);
  CHECK(pf.valid_count() == 8);
  const auto padded = pad_batch({pf, aggregate_patient({slide(5, 6, 3)})});
  CHECK(padded[1].length() == 8);
  CHECK(padded[1].valid_count() == 5);
  for (int c = 0; c < 6; ++c) CHECK(padded[1].rows(7, c) == 0.0);
  CHECK(aggregate_patient({slide(4, 6, 1)}).valid_count() == 4);
  CHECK_THROWS_AS(aggregate_patient({slide(3, 6, 1), slide(3, 5, 2)}), ShapeError);
  CHECK_THROWS(aggregate_patient({}));
}

TEST_CASE("organ classifier: shape, duplication invariance, zero parameters") {
  Rng rng(1);
  ReportGenerator gen(tiny_config(), kVocab, rng);
  const auto pf = random_patient(4, 7);
  const Tensor a = gen.organ_cls.forward(pf);
  CHECK(a.cols() == 2);
  const std::vector<Tensor> twice{pf.rows, pf.rows};
  PatientFeatures dup{ad::concat_rows(twice), std::vector<std::uint8_t>(8, 1)};
  const Tensor b = gen.organ_cls.forward(dup);
  for (int i = 0; i < 2; ++i) CHECK(std::abs(a(0, i) - b(0, i)) < 1e-12);

  for (auto& p : nn::ParamList{{"w", gen.organ_cls.fc2.weight}, {"b", gen.organ_cls.fc2.bias}}) {
    std::fill(p.tensor.mutable_values().begin(), p.tensor.mutable_values().end(), 0.0);
  }
  Targets t;
  t.organ = 1;
  const int target = 1;
  const double ce = ad::cross_entropy_sum(gen.organ_cls.forward(pf), std::span<const int>(&target, 1)).item();
  CHECK(std::abs(ce - std::log(2.0)) < 1e-12);

  PatientFeatures masked = pf;
  std::fill(masked.valid.begin(), masked.valid.end(), 0);
  CHECK_THROWS_AS(gen.organ_cls.forward(masked), ShapeError);
}

TEST_CASE("tag selection: indexing, argmax invariance, K' padding, undetermined") {
  Rng rng(2);
  ReportGenerator gen(tiny_config(), kVocab, rng);
  const std::vector<std::vector<double>> logits{{0.1, 0.9}, {2.0, -1.0}};
  const auto b = select_tags(logits, gen.dictionary);
  CHECK(b.organ == std::vector<int>{1, 0});
  CHECK(b.k == std::vector<int>{3, 4});
  CHECK(b.tags[0].rows() == 4);
  CHECK(b.valid[0] == std::vector<std::uint8_t>{1, 1, 1, 0});
  for (int c = 0; c < 8; ++c) {
    CHECK(b.tags[0](3, c) == 0.0);
    CHECK(b.tags[0](0, c) == gen.dictionary.organ(1)(0, c));
    CHECK(b.tags[1](3, c) == gen.dictionary.organ(0)(3, c));
  }
  for (double c : {0.01, 1.0, 37.0}) {
    std::vector<std::vector<double>> scaled = logits;
    for (auto& row : scaled) {
      for (double& x : row) x *= c;
    }
    CHECK(select_tags(scaled, gen.dictionary).organ == b.organ);
  }
  const std::vector<std::vector<double>> flat{{0.0, 0.0}};
  CHECK_THROWS_AS(select_tags(flat, gen.dictionary, 0.9), ConfigError);
  const std::vector<int> truth{1};
  CHECK(select_tags(flat, gen.dictionary, 0.9, &truth).organ == std::vector<int>{1});
  CHECK(predict_organ(flat.front(), 0.9) == parsing::kUncertainOrgan);
}

TEST_CASE("tag features: shape, pad visual rows, H attention rows") {
  Rng rng(3);
  ReportGenerator gen(tiny_config(), kVocab, rng);
  auto items = pad_batch({random_patient(6, 1), random_patient(3, 2)});
  const auto tags = select_tags_for({0, 1}, gen.dictionary);
  nn::AttentionWeights w;
  const Tensor f = gen.tag_features(items[1], tags.tags[1], tags.valid[1], &w);
  CHECK(f.rows() == 4);
  CHECK(f.cols() == 8);
  for (int r = 0; r < w.rows; ++r) {
    double s = 0.0;
    for (int c = 0; c < w.cols; ++c) s += w.values[static_cast<std::size_t>(r * w.cols + c)];
    CHECK(std::abs(s - 1.0) < 1e-6);
    for (int c = 3; c < w.cols; ++c) CHECK(w.values[static_cast<std::size_t>(r * w.cols + c)] == 0.0);
  }
  auto perturbed = items[1];
  perturbed.rows = perturbed.rows.clone(false);
  for (int c = 0; c < 6; ++c) perturbed.rows.mutable_values()[static_cast<std::size_t>(4 * 6 + c)] = 1e3 * (c + 1);
  const Tensor g = gen.tag_features(perturbed, tags.tags[1], tags.valid[1]);
  CHECK(f.values() == g.values());
}

TEST_CASE("tag classification: masked gradients and uniform logits") {
  Rng rng(4);
  ReportGenerator gen(tiny_config(), kVocab, rng);
  const Tensor logits = random_tensor(4, 27, 1);
  const std::vector<int> cls{1, 2, 3, 4};
  const std::vector<std::uint8_t> include{1, 0, 1, 0};
  ad::cross_entropy_sum(logits, cls, include).backward();
  for (int c = 0; c < 27; ++c) {
    CHECK(logits.grad()[static_cast<std::size_t>(27 + c)] == 0.0);
    CHECK(logits.grad()[static_cast<std::size_t>(3 * 27 + c)] == 0.0);
  }
  const Tensor uniform = Tensor::zeros(3, 27);
  const std::vector<int> three{0, 13, 26};
  CHECK(std::abs(ad::cross_entropy_sum(uniform, three).item() / 3.0 - std::log(27.0)) < 1e-12);
  CHECK(gen.tag_cls.forward(random_tensor(2, 8, 1, false)).cols() == 27);
}

TEST_CASE("PSA reduces to causal self-attention without a condition") {
  for (int draw = 0; draw < 20; ++draw) {
    Rng rng(static_cast<std::uint64_t>(draw));
    PsaBlock b(8, 2, 8, rng);
    const Tensor text = random_tensor(5, 8, 100 + static_cast<std::uint64_t>(draw), false);
    const Tensor psa = psa_attention(text, Tensor{}, b.attn, b.cond_k, b.cond_v);
    const Tensor psa0 = psa_attention(text, Tensor::zeros(0, 8), b.attn, b.cond_k, b.cond_v);
    const Tensor ref = b.attn.forward(text, text, ad::Mask::causal(5));
    CHECK(psa.values() == ref.values());
    CHECK(psa0.values() == ref.values());
  }
}

TEST_CASE("PSA weights: convex combination, causal over text, condition always visible") {
  Rng rng(5);
  PsaBlock b(8, 2, 8, rng);
  nn::AttentionWeights w;
  psa_attention(random_tensor(1, 8, 1, false), random_tensor(1, 8, 2, false), b.attn, b.cond_k, b.cond_v, &w);
  CHECK(w.cols == 2);
  CHECK(std::abs(w.values[0] + w.values[1] - 1.0) < 1e-12);

  psa_attention(random_tensor(4, 8, 1, false), random_tensor(1, 8, 2, false), b.attn, b.cond_k, b.cond_v, &w);
  for (int t = 0; t < 4; ++t) {
    CHECK(w.values[static_cast<std::size_t>(t * 5)] > 0.0);
    double s = 0.0;
    for (int c = 0; c < 5; ++c) {
      const double v = w.values[static_cast<std::size_t>(t * 5 + c)];
      s += v;
      if (c - 1 > t) CHECK(v == 0.0);
    }
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("freeze contract: trainable set and bit-identical frozen base") {
  Rng rng(6);
  ReportGenerator gen(tiny_config(), kVocab, rng);
  gen.apply_freeze_policy();
  std::set<std::string> base_names;
  for (const auto& p : gen.lm.base_parameters()) base_names.insert(p.name);
  std::set<std::string> psa_names;
  for (const auto& p : gen.lm.psa_parameters()) psa_names.insert(p.name);
  for (const auto& p : gen.parameters()) {
    const bool lm_param = p.name.rfind("lm.", 0) == 0;
    CHECK(p.tensor.requires_grad() == (!lm_param || psa_names.count(p.name) == 1));
  }
  CHECK(psa_names.size() == 4);

  const auto trainable = gen.trainable_parameters();
  optim::AdamW opt(nn::trainable_tensors(trainable), {});
  std::vector<std::vector<double>> base_before;
  for (const auto& p : gen.lm.base_parameters()) base_before.push_back(p.tensor.values());
  std::map<std::string, bool> updated;
  Rng data(7);
  for (int step = 0; step < 10; ++step) {
    std::vector<std::vector<double>> psa_before;
    for (const auto& p : gen.lm.psa_parameters()) psa_before.push_back(p.tensor.values());
    nn::zero_grads(gen.parameters());
    const auto pf = random_patient(3, data.engine()());
    const auto parts = compute_losses(gen, pf, random_targets(step % 2, step % 2 ? 3 : 4, data));
    parts.total.backward();
    for (const auto& p : gen.lm.base_parameters()) CHECK_FALSE(p.tensor.has_nonzero_grad());
    opt.step();
    const auto psa = gen.lm.psa_parameters();
    for (std::size_t i = 0; i < psa.size(); ++i) {
      if (psa[i].tensor.values() != psa_before[i]) updated[psa[i].name] = true;
    }
  }
  const auto base_after = gen.lm.base_parameters();
  for (std::size_t i = 0; i < base_after.size(); ++i) CHECK(base_after[i].tensor.values() == base_before[i]);
  for (const auto& name : psa_names) CHECK(updated[name]);
}

TEST_CASE("language model shape and length limit") {
  Rng rng(8);
  ReportGenerator gen(tiny_config(), kVocab, rng);
  const std::vector<int> ids{1, 5, 6, 7};
  const Tensor logits = gen.lm.forward(ids, random_tensor(1, 8, 1, false));
  CHECK(logits.rows() == 4);
  CHECK(logits.cols() == kVocab);
  const std::vector<int> too_long(17, 5);
  CHECK_THROWS_AS(gen.lm.forward(too_long, Tensor{}), ShapeError);
}

TEST_CASE("total loss weights") {
  CHECK(total_loss(1, 1, 1) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(total_loss(0, 0, 0) == 0.0);
  CHECK(std::abs(total_loss(1, 0, 0) - 0.2) < 1e-15);
  Rng rng(9);
  for (int i = 0; i < 100; ++i) {
    const double a = rng.uniform(0, 10), b = rng.uniform(0, 10), c = rng.uniform(0, 10);
    CHECK(std::abs(total_loss(a, b, c) - (0.2 * a + 0.6 * b + 0.2 * c)) <= 1e-12);
    CHECK(std::abs(total_loss(Tensor::scalar(a), Tensor::scalar(b), Tensor::scalar(c)).item() -
                   (0.2 * a + 0.6 * b + 0.2 * c)) <= 1e-12);
  }
}

TEST_CASE("masking: pad visual rows never change any loss") {
  Rng rng(10);
  ReportGenerator gen(tiny_config(), kVocab, rng);
  int perturbed = 0;
  for (int trial = 0; trial < 50; ++trial) {
    auto b = random_batch(gen, rng);
    const auto before = losses(gen, b);
    for (auto& item : b.items) {
      item.rows = item.rows.clone(false);
      for (int r = 0; r < item.length(); ++r) {
        if (item.valid[static_cast<std::size_t>(r)] != 0) continue;
        ++perturbed;
        for (int c = 0; c < item.rows.cols(); ++c) {
          item.rows.mutable_values()[static_cast<std::size_t>(r * item.rows.cols() + c)] = rng.normal(0, 50);
        }
      }
    }
    CHECK(losses(gen, b) == before);
  }
  CHECK(perturbed > 0);
}

TEST_CASE("masking: pad tag rows never change any loss") {
  Rng rng(11);
  ReportGenerator gen(tiny_config(), kVocab, rng);
  int perturbed = 0;
  for (int trial = 0; trial < 50; ++trial) {
    auto b = random_batch(gen, rng);
    const auto before = losses(gen, b);
    for (std::size_t i = 0; i < b.tags.tags.size(); ++i) {
      b.tags.tags[i] = b.tags.tags[i].clone(false);
      for (int r = 0; r < b.tags.tags[i].rows(); ++r) {
        if (b.tags.valid[i][static_cast<std::size_t>(r)] != 0) continue;
        ++perturbed;
        for (int c = 0; c < 8; ++c) b.tags.tags[i].mutable_values()[static_cast<std::size_t>(r * 8 + c)] = rng.normal(0, 50);
      }
    }
    CHECK(losses(gen, b) == before);
  }
  CHECK(perturbed > 0);
}

TEST_CASE("masking: absent-tag targets never change any loss") {
  Rng rng(12);
  ReportGenerator gen(tiny_config(), kVocab, rng);
  int perturbed = 0;
  for (int trial = 0; trial < 50; ++trial) {
    auto b = random_batch(gen, rng);
    const auto before = losses(gen, b);
    for (auto& t : b.targets) {
      for (std::size_t i = 0; i < t.tag_mask.size(); ++i) {
        if (t.tag_mask[i] != 0) continue;
        ++perturbed;
        t.tag_classes[i] = (t.tag_classes[i] + 1 + rng.uniform_int(25)) % 27;
        t.sentence_ids[i] = random_sentence(rng);
      }
    }
    CHECK(losses(gen, b) == before);
  }
  CHECK(perturbed > 0);
}

TEST_CASE("G_d and H gradients match finite differences") {
  for (int draw = 0; draw < 20; ++draw) {
    Rng rng(200 + static_cast<std::uint64_t>(draw));
    DecoderBlock gd(8, 2, 8, rng);
    TagPooler h(8, 2, 8, rng);
    nn::ParamList params;
    gd.collect(params, "gd");
    h.collect(params, "h");
    for (auto& p : params) {
      for (double& x : p.tensor.mutable_values()) x += rng.normal(0.0, 0.1);
    }
    const Tensor visual = random_tensor(5, 8, 300 + static_cast<std::uint64_t>(draw));
    const Tensor tags = random_tensor(3, 8, 400 + static_cast<std::uint64_t>(draw));
    const std::vector<std::uint8_t> vv{1, 1, 1, 1, 0};
    const std::vector<std::uint8_t> tv{1, 1, 0};
    const Tensor w1 = random_tensor(5, 8, 500 + static_cast<std::uint64_t>(draw), false);
    const Tensor w2 = random_tensor(3, 8, 600 + static_cast<std::uint64_t>(draw), false);

    std::vector<Tensor> gd_leaves{visual, tags};
    for (const auto& p : params) {
      if (p.name.rfind("gd", 0) == 0) gd_leaves.push_back(p.tensor);
    }
    CHECK(gradcheck([&] { return ad::sum(ad::mul(gd.forward(visual, vv, tags, tv), w1)); }, gd_leaves) < 1e-3);

    std::vector<Tensor> h_leaves{visual, tags};
    for (const auto& p : params) {
      if (p.name.rfind("h.", 0) == 0) h_leaves.push_back(p.tensor);
    }
    CHECK(gradcheck([&] { return ad::sum(ad::mul(h.forward(tags, visual, vv), w2)); }, h_leaves) < 1e-3);
  }
}

TEST_CASE("loss weight override trains only the organ head") {
  Rng rng(13);
  ReportGenerator gen(tiny_config(), kVocab, rng);
  gen.apply_freeze_policy();
  Rng data(1);
  const auto parts = compute_losses(gen, random_patient(4, 3), random_targets(0, 4, data), LossWeights{1, 0, 0});
  parts.total.backward();
  for (const auto& p : gen.trainable_parameters()) {
    if (p.name.rfind("organ_cls", 0) == 0) continue;
    CHECK_MESSAGE(!p.tensor.has_nonzero_grad(), p.name);
  }
  CHECK(gen.organ_cls.fc2.weight.has_nonzero_grad());
}

TEST_CASE("generation contract") {
  Rng rng(14);
  ReportGenerator gen(tiny_config(), kVocab, rng);
  std::vector<std::string> words;
  for (int i = 4; i < kVocab; ++i) words.push_back("w" + std::to_string(i));
  parsing::Vocab vocab = parsing::Vocab::build(words);
  REQUIRE(vocab.size() == kVocab);
  const auto schemas = corpus::default_schemas();
  const auto pf = random_patient(5, 9);
  for (int beam : {1, 3}) {
    const auto r = generate(gen, pf, schemas, vocab, DecodeOptions{8, beam});
    REQUIRE_FALSE(r.undetermined);
    CHECK(static_cast<int>(r.sentences.size()) == schemas[static_cast<std::size_t>(r.organ)].tag_count());
    CHECK(r.tag_logits.size() == r.sentences.size());
    for (const auto& ids : r.sentence_ids) {
      CHECK(ids.size() <= 8);
      for (int id : ids) {
        CHECK(id != parsing::Vocab::kPad);
        CHECK(id != parsing::Vocab::kBos);
      }
    }
    for (const auto& a : r.attention) {
      double s = 0.0;
      for (double v : a.values) {
        CHECK(v >= 0.0);
        s += v;
      }
      CHECK(std::abs(s - 1.0) < 1e-6);
      CHECK(a.cols == 5);
    }
    CHECK(r.report.rfind("organ: ", 0) == 0);
  }
  auto cfg = tiny_config();
  cfg.organ_threshold = 0.999;
  Rng rng2(14);
  ReportGenerator unsure(cfg, kVocab, rng2);
  const auto u = generate(unsure, pf, schemas, vocab, DecodeOptions{8, 1});
  CHECK(u.undetermined);
  CHECK(u.sentences.empty());
}

TEST_CASE("greedy decoding of a warmed-up LM reproduces a memorised sentence") {
  Rng rng(15);
  LanguageModel lm(kVocab, 16, 1, 2, 16, 16, rng);
  const std::vector<int> s{parsing::Vocab::kBos, 5, 9, 7, 11, parsing::Vocab::kEos};
  warmup_language_model(lm, {s}, 150, 1e-2, rng);
  CHECK(decode(lm, Tensor{}, DecodeOptions{8, 1}) == std::vector<int>{5, 9, 7, 11});
  CHECK(decode(lm, Tensor{}, DecodeOptions{8, 3}) == std::vector<int>{5, 9, 7, 11});
}
