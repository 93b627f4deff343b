#include <doctest.h>

#include <cmath>
#include <sstream>

#include "gradcheck.hpp"
#include "wsr/dino.hpp"
#include "wsr/errors.hpp"

using namespace wsr;
using namespace wsr::dino;
using wsr::testing::random_tensor;

namespace {

mrvit::ViTConfig tiny_vit(int tokens = 16, int in = 6) {
  mrvit::ViTConfig c;
  c.token_count = tokens;
  c.input_dim = in;
  c.embed_dim = 8;
  c.depth = 1;
  c.heads = 2;
  c.mlp_ratio = 1.0;
  c.output_dim = 8;
  return c;
}

DinoConfig tiny_dino() {
  DinoConfig c;
  c.head_hidden = 16;
  c.out_dim = 12;
  c.teacher_temp_warmup_epochs = 2;
  return c;
}

}  // namespace

TEST_CASE("views: identity, ratio bounds, seeded reproduction, global count") {
  const Tensor x = random_tensor(16, 4, 1, false);
  ViewConfig id;
  id.global_keep_min = id.global_keep_max = 1.0;
  id.noise_sigma = 0.0;
  id.n_local = 0;
  Rng rng(3);
  for (const auto& v : make_views(x, id, rng)) CHECK(v.tokens.values() == x.values());

  ViewConfig c;
  Rng a(5);
  for (int t = 0; t < 50; ++t) {
    for (const auto& v : make_views(x, c, a)) {
      if (v.global) {
        CHECK(v.tokens.rows() >= 12);
      } else {
        CHECK(v.tokens.rows() >= 4);
        CHECK(v.tokens.rows() <= 8);
      }
      CHECK(std::is_sorted(v.positions.begin(), v.positions.end()));
      CHECK(std::adjacent_find(v.positions.begin(), v.positions.end()) == v.positions.end());
    }
  }
  Rng r1(9);
  Rng r2(9);
  const auto v1 = make_views(x, c, r1);
  const auto v2 = make_views(x, c, r2);
  for (std::size_t i = 0; i < v1.size(); ++i) CHECK(v1[i].positions == v2[i].positions);

  ViewConfig one = c;
  one.n_global = 1;
  CHECK_THROWS_AS(make_views(x, one, r1), ConfigError);
  CHECK_THROWS_AS(make_views(Tensor::zeros(0, 4), c, r1), ShapeError);
}

TEST_CASE("dino loss hand values") {
  const std::vector<double> zero{0.0, 0.0};
  for (double tau : {0.01, 0.1, 1.0, 7.0}) {
    const std::vector<Tensor> s{Tensor::from(1, 2, {0, 0}), Tensor::from(1, 2, {0, 0})};
    const std::vector<Tensor> t{Tensor::from(1, 2, {0, 0})};
    CHECK(std::abs(dino_loss(s, t, tau, tau, zero).item() - std::log(2.0)) < 1e-9);
  }
  // sharp teacher and matching sharp student
  const std::vector<Tensor> s{Tensor::from(1, 3, {0, 0, 0}), Tensor::from(1, 3, {5, 0, 0})};
  const std::vector<Tensor> t{Tensor::from(1, 3, {5, 0, 0})};
  const std::vector<double> c3(3, 0.0);
  CHECK(dino_loss(s, t, 1e-3, 1e-3, c3).item() < 1e-9);

  const std::vector<Tensor> bad{Tensor::from(1, 2, {NAN, 0})};
  CHECK_THROWS_AS(dino_loss(s, bad, 0.1, 0.1, zero), NumericError);
}

TEST_CASE("dino loss is bounded below by teacher entropy") {
  Rng rng(11);
  for (int i = 0; i < 200; ++i) {
    const int d = 2 + rng.uniform_int(10);
    std::vector<double> sv(static_cast<std::size_t>(d));
    std::vector<double> tv(static_cast<std::size_t>(d));
    std::vector<double> c(static_cast<std::size_t>(d));
    for (int k = 0; k < d; ++k) {
      sv[static_cast<std::size_t>(k)] = rng.normal(0, 3);
      tv[static_cast<std::size_t>(k)] = rng.normal(0, 3);
      c[static_cast<std::size_t>(k)] = rng.normal(0, 0.5);
    }
    const double ts = rng.uniform(0.05, 1.0);
    const double tt = rng.uniform(0.02, 1.0);
    const auto p = teacher_probs(tv, c, tt);
    const double loss = pair_loss(Tensor::from(1, d, sv), p, ts).item();
    CHECK(loss >= entropy(p) - 1e-12);
  }
}

TEST_CASE("ema and centering formulas") {
  auto make = [](double v) { return nn::ParamList{{"w", Tensor::full(2, 2, v)}}; };
  auto t = make(1.0);
  auto s = make(0.0);
  ema_update(t, s, 1.0);
  CHECK(t[0].tensor(0, 0) == 1.0);
  ema_update(t, s, 0.5);
  CHECK(std::abs(t[0].tensor(1, 1) - 0.5) < 1e-12);
  ema_update(t, s, 0.0);
  CHECK(t[0].tensor(0, 1) == 0.0);
  nn::ParamList other{{"w", Tensor::full(3, 2, 0.0)}};
  CHECK_THROWS_AS(ema_update(t, other, 0.5), ShapeError);

  std::vector<double> center{2.0, -4.0};
  update_center(center, {{1.0, 1.0}, {3.0, 5.0}}, 1.0);
  CHECK(center == std::vector<double>{2.0, -4.0});
  update_center(center, {{1.0, -1.0}, {-1.0, 1.0}}, 0.9);
  CHECK(std::abs(center[0] - 1.8) < 1e-12);
  CHECK(std::abs(center[1] + 3.6) < 1e-12);
  update_center(center, {{1.0, 1.0}, {3.0, 5.0}}, 0.0);
  CHECK(std::abs(center[0] - 2.0) < 1e-12);
  CHECK(std::abs(center[1] - 3.0) < 1e-12);
}

TEST_CASE("schedules") {
  DinoConfig c;
  CHECK(teacher_temp_at(c, 0) == doctest::Approx(0.04));
  CHECK(teacher_temp_at(c, 15) == doctest::Approx(0.055));
  CHECK(teacher_temp_at(c, 30) == doctest::Approx(0.07));
  CHECK(momentum_at(c, 0, 100) == doctest::Approx(0.996));
  CHECK(momentum_at(c, 99, 100) == doctest::Approx(1.0));
}

TEST_CASE("train_ssl: step count, teacher never receives gradient, csv log") {
  const auto cfg = tiny_dino();
  Rng rng(1);
  auto state = make_state(mrvit::vit_factory(tiny_vit()), cfg, rng);
  // teacher starts as a copy
  const auto sp = state.student_params();
  const auto tp = state.teacher_params();
  for (std::size_t i = 0; i < sp.size(); ++i) CHECK(sp[i].tensor.values() == tp[i].tensor.values());

  std::vector<Tensor> data;
  for (int i = 0; i < 4; ++i) data.push_back(random_tensor(16, 6, 10 + static_cast<std::uint64_t>(i), false));
  std::ostringstream csv;
  SslOptions opt;
  opt.epochs = 1;
  opt.batch = 2;
  opt.opt.lr = 0.01;
  opt.csv = &csv;
  const auto log = train_ssl(data, state, cfg, opt, rng);
  CHECK(log.size() == 2);
  CHECK(csv.str().rfind("step,loss,teacher_temp,momentum,center_norm\n", 0) == 0);

  opt.epochs = 25;
  opt.batch = 2;
  opt.csv = nullptr;
  const auto long_log = train_ssl(data, state, cfg, opt, rng);
  CHECK(long_log.size() == 50);
  for (const auto& e : long_log) {
    CHECK(e.teacher_grad_max == 0.0);
    CHECK(std::isfinite(e.loss));
  }
  CHECK_THROWS_AS(train_ssl({}, state, cfg, opt, rng), ConfigError);
}

TEST_CASE("dino loss decreases on a fixed batch") {
  auto cfg = tiny_dino();
  cfg.views.noise_sigma = 0.0;
  cfg.teacher_temp_start = cfg.teacher_temp_end = 0.04;
  cfg.center_momentum = 1.0;
  Rng rng(2);
  auto state = make_state(mrvit::vit_factory(tiny_vit()), cfg, rng);
  std::vector<Tensor> data;
  for (int i = 0; i < 4; ++i) data.push_back(random_tensor(16, 6, 40 + static_cast<std::uint64_t>(i), false));
  SslOptions opt;
  opt.epochs = 20;
  opt.batch = 4;
  opt.opt.lr = 0.02;
  const auto log = train_ssl(data, state, cfg, opt, rng);
  REQUIRE(log.size() == 20);
  double first = 0.0;
  double last = 0.0;
  for (int i = 0; i < 5; ++i) {
    first += log[static_cast<std::size_t>(i)].loss;
    last += log[static_cast<std::size_t>(15 + i)].loss;
  }
  CHECK(last < first);
}
