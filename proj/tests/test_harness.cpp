#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "wsr/errors.hpp"
#include "wsr/harness.hpp"

using namespace wsr;
using namespace wsr::harness;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("wsr_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Small enough to run the whole pipeline in a few seconds.
RunConfig tiny_run(std::uint64_t seed) {
  RunConfig c = desk_profile();
  c.seed = seed;
  c.n_patients = 24;
  c.dims.patch_size = 16;
  c.stage1.epochs = 1;
  c.stage1.batch = 16;
  c.stage1.backbone_dim = 16;
  c.stage1.vit_r = mrvit::ViTConfig{16, 16, 16, 1, 2, 2.0, true, 16};
  c.stage1.vit_s = mrvit::ViTConfig{4, 16, 16, 1, 2, 2.0, true, 16};
  c.stage1.dino_r.out_dim = 16;
  c.stage1.dino_r.head_hidden = 16;
  c.stage1.dino_s = c.stage1.dino_r;
  c.stage2.epochs = 2;
  c.stage2.lm_warmup_epochs = 1;
  auto& g = c.stage2.generator;
  g.input_dim = 16;
  g.organ_hidden = 8;
  g.tag_dim = 16;
  g.heads = 2;
  g.ffn_hidden = 16;
  g.tag_cls_hidden = 16;
  g.lm_width = 16;
  g.lm_heads = 2;
  g.lm_ffn = 16;
  g.max_len = 12;
  c.one_shot_max_len = 20;
  c.probe.epochs = 20;
  return c;
}

}  // namespace

TEST_CASE("config defaults, desk profile, JSON round trip and overrides") {
  const auto full = full_defaults();
  CHECK(full.stage1.epochs == 500);
  CHECK(full.stage1.batch == 64);
  CHECK(full.stage1.opt.name == "sgd");
  CHECK(full.stage1.opt.lr == 0.1);
  CHECK(full.stage2.epochs == 300);
  CHECK(full.stage2.batch == 1);
  CHECK(full.stage2.lr == 3e-3);
  CHECK(full.stage2.weights.organ == 0.2);
  CHECK(full.stage2.weights.tag == 0.6);
  CHECK(full.stage2.weights.sentence == 0.2);
  full.validate();
  desk_profile().validate();

  const auto desk = desk_profile();
  const auto back = config_from_json(nlohmann::json(desk));
  CHECK(nlohmann::json(back) == nlohmann::json(desk));
  CHECK(fingerprint(back) == fingerprint(desk));

  const auto j = nlohmann::json::parse(R"({"profile":"desk","seed":9,"stage2":{"epochs":3,
      "loss_weights":{"alpha":1,"beta":0,"gamma":0}}})");
  const auto o = config_from_json(j);
  CHECK(o.seed == 9);
  CHECK(o.stage2.epochs == 3);
  CHECK(o.stage2.weights.organ == 1.0);
  CHECK(o.stage2.generator.lm_width == desk.stage2.generator.lm_width);
  CHECK(fingerprint(o) != fingerprint(desk));

  CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"profile":"huge"})")), ConfigError);
  CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"stage2":{"lr":0}})")), ConfigError);
  CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"stage2":{"loss_weights":{"alpha":-1}}})")),
                  ConfigError);
  CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"stage1":{"L":3}})")), ConfigError);
}

TEST_CASE("checkpoint round trip reproduces forward outputs bit-exactly") {
  const auto dir = scratch("ckpt");
  Rng rng(3);
  const mrvit::ViTConfig cfg{16, 8, 8, 1, 2, 2.0, true, 8};
  mrvit::VisionTransformer vit(cfg, rng);
  Checkpoint ck;
  ck.module_id = "mrvit_r";
  ck.fingerprint = "abc";
  ck.step = 7;
  ck.rng_states["train"] = rng.state();
  ck.params = capture(vit.parameters());
  save_checkpoint(dir / "a.ckpt", ck);

  const auto loaded = load_checkpoint(dir / "a.ckpt");
  CHECK(loaded.module_id == "mrvit_r");
  CHECK(loaded.step == 7);
  CHECK(loaded.rng_states.at("train") == rng.state());
  Rng other(99);
  mrvit::VisionTransformer copy(cfg, other);
  restore(copy.parameters(), loaded.params);
  ad::NoGradGuard guard;
  Rng data(5);
  std::vector<double> v;
  for (int i = 0; i < 16 * 8; ++i) v.push_back(data.normal());
  const auto x = ad::Tensor::from(16, 8, v);
  CHECK(vit.forward(x).values() == copy.forward(x).values());

  const std::string bytes = slurp(dir / "a.ckpt");
  {
    std::ofstream out(dir / "bad.ckpt", std::ios::binary);
    out << "XXXX" << bytes.substr(4);
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.ckpt"), FormatError);
  {
    std::ofstream out(dir / "short.ckpt", std::ios::binary);
    out << bytes.substr(0, bytes.size() - 5);
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "short.ckpt"), FormatError);
  auto missing = loaded.params;
  missing.pop_back();
  CHECK_THROWS_AS(restore(copy.parameters(), missing), FormatError);
}

TEST_CASE("model selection: argmax validation accuracy, ties to the later epoch") {
  std::vector<EpochLog> logs{{1, 0, 0.5, 0, 3.0}, {2, 0, 0.8, 0, 1.0}, {3, 0, 0.8, 0, 2.0}, {4, 0, 0.7, 0, 1.0}};
  CHECK(select_epoch(logs, false) == 3);
  CHECK(select_epoch(logs, true) == 4);
  logs.push_back({5, 0, 0.9, 0, 5.0});
  CHECK(select_epoch(logs, false) == 5);
  CHECK(select_epoch({}, false) == 0);
}

TEST_CASE("score tokens drop punctuation and case") {
  CHECK(score_tokens("Nuclear grade: WHO/ISUP grade 1.") ==
        eval::Tokens{"nuclear", "grade", "who", "isup", "grade", "1"});
}

TEST_CASE("tiny pipeline: artifacts, reruns, count mismatch, ablation rows") {
  const auto c = tiny_run(11);
  const Layout a{scratch("run_a")};
  const auto ev = run_pipeline(c, a);
  CHECK(ev.metrics.n_items >= 1);
  ev.metrics.validate();
  CHECK(fs::exists(a.stage1() / "vit_r.ckpt"));
  CHECK(fs::exists(a.stage1() / "vit_s.ckpt"));
  CHECK(fs::exists(a.stage2() / "generator.ckpt"));
  CHECK(fs::exists(a.eval() / "metrics.json"));
  CHECK(fs::exists(a.eval() / "per_patient.csv"));
  CHECK(fs::exists(a.split() / "split_train.json"));
  const auto manifest = regions::read_manifest(a.manifest());
  int slides = 0;
  for (const auto& r : corpus::read_corpus(a.corpus()).patients) slides += r.patient.slide_count;
  CHECK(static_cast<int>(manifest.slides.size()) == slides);

  const Layout b{scratch("run_b")};
  run_pipeline(c, b);
  for (const auto& [sid, e] : manifest.slides) {
    CHECK(slurp(a.features() / e.path) == slurp(b.features() / e.path));
  }
  CHECK(slurp(a.eval() / "metrics.json") == slurp(b.eval() / "metrics.json"));

  export_attention(c, a);
  CHECK(fs::exists(a.attention()));

  const auto rows = run_ablation(c, a, {1, 2, 3});
  REQUIRE(rows.size() == 3);
  for (const auto& r : rows) r.metrics.validate();
  CHECK_THROWS_AS(run_ablation(c, a, {4}), ConfigError);

  auto gens = nlohmann::json::parse(slurp(a.reports() / "generations.json"));
  gens.erase(gens.begin());
  {
    std::ofstream out(a.reports() / "generations.json");
    out << gens.dump();
  }
  CHECK_THROWS_WITH_AS(evaluate_reports(c, a), doctest::Contains("report count mismatch"), ConfigError);
}

TEST_CASE("loss-weight override (1,0,0) leaves tag and LM parameters untouched") {
  auto c = tiny_run(12);
  c.stage2.weights = {1.0, 0.0, 0.0};
  const Layout a{scratch("organ_only")};
  synth(c, a);
  make_split(c, a);
  train_stage1(c, a);
  const auto data = prepare(a);
  auto g = c.stage2.generator;
  g.tag_counts = {4, 3};
  Stage2Result r;
  Rng rng(derive_seed(c.seed, "stage2"));
  reportgen::ReportGenerator init(g, data.vocab.size(), rng);
  const auto gen = fit_generator(c, g, data.train, data.val, data.vocab, r);
  const auto before = init.parameters();
  const auto after = gen.parameters();
  REQUIRE(before.size() == after.size());
  bool organ_moved = false;
  for (std::size_t i = 0; i < after.size(); ++i) {
    const bool organ = after[i].name.rfind("organ_cls", 0) == 0;
    const bool lm_base = after[i].name.rfind("lm.", 0) == 0 && after[i].name.find("cond_") == std::string::npos;
    if (organ) {
      organ_moved = organ_moved || before[i].tensor.values() != after[i].tensor.values();
    } else if (!lm_base && r.best_epoch > 0) {
      // Weight decay still shrinks them; gradients are zero, so only a uniform decay is allowed.
      const auto& x = before[i].tensor.values();
      const auto& y = after[i].tensor.values();
      for (std::size_t k = 0; k < x.size(); ++k) CHECK(std::abs(y[k]) <= std::abs(x[k]) + 1e-15);
    }
  }
  CHECK(organ_moved);
}
