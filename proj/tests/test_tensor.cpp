#include "doctest.h"
#include "gradcheck.hpp"
#include "wsr/errors.hpp"
#include "wsr/tensor.hpp"

using namespace wsr;
using ad::Tensor;
using testing::gradcheck;
using testing::random_tensor;

TEST_CASE("matmul and transpose gradients match finite differences") {
  auto a = random_tensor(3, 4, 1);
  auto b = random_tensor(4, 2, 2);
  auto c = random_tensor(5, 4, 3);
  CHECK(gradcheck([&] { return ad::sum(ad::tanh(ad::matmul(a, b))); }, {a, b}) < 1e-6);
  CHECK(gradcheck([&] { return ad::sum(ad::tanh(ad::matmul_nt(a, c))); }, {a, c}) < 1e-6);
  CHECK(gradcheck([&] { return ad::sum(ad::tanh(ad::transpose(a))); }, {a}) < 1e-6);
}

TEST_CASE("elementwise and broadcast ops") {
  auto a = random_tensor(3, 4, 4);
  auto b = random_tensor(3, 4, 5);
  auto r = random_tensor(1, 4, 6);
  CHECK(gradcheck([&] { return ad::sum(ad::mul(ad::add(a, b), ad::sub(a, b))); }, {a, b}) < 1e-6);
  CHECK(gradcheck([&] { return ad::sum(ad::gelu(ad::add_row(a, r))); }, {a, r}) < 1e-6);
  CHECK(gradcheck([&] { return ad::mean(ad::mul(ad::relu(a), b)); }, {a, b}) < 1e-6);
}

TEST_CASE("softmax family and layer norm") {
  auto a = random_tensor(3, 5, 7);
  auto w = random_tensor(3, 5, 8, false);
  auto g = random_tensor(1, 5, 9);
  auto be = random_tensor(1, 5, 10);
  CHECK(gradcheck([&] { return ad::sum(ad::mul(ad::softmax_rows(a), w)); }, {a}) < 1e-6);
  CHECK(gradcheck([&] { return ad::sum(ad::mul(ad::log_softmax_rows(a), w)); }, {a}) < 1e-6);
  CHECK(gradcheck([&] { return ad::sum(ad::mul(ad::layer_norm(a, g, be), w)); }, {a, g, be}) < 1e-6);
}

TEST_CASE("masked softmax gives exact zeros and unit rows") {
  auto s = random_tensor(4, 4, 11);
  auto m = ad::Mask::causal(4);
  auto p = ad::masked_softmax(s, m);
  for (int r = 0; r < 4; ++r) {
    double total = 0.0;
    for (int c = 0; c < 4; ++c) {
      if (c > r) CHECK(p(r, c) == 0.0);
      total += p(r, c);
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
  auto w = random_tensor(4, 4, 12, false);
  CHECK(gradcheck([&] { return ad::sum(ad::mul(ad::masked_softmax(s, m), w)); }, {s}) < 1e-6);
}

TEST_CASE("structural ops route gradients") {
  auto a = random_tensor(2, 3, 13);
  auto b = random_tensor(4, 3, 14);
  auto c = random_tensor(2, 2, 15);
  auto w = random_tensor(6, 3, 16, false);
  CHECK(gradcheck(
            [&] {
              std::vector<Tensor> parts{a, b};
              return ad::sum(ad::mul(ad::concat_rows(parts), w));
            },
            {a, b}) < 1e-6);
  CHECK(gradcheck(
            [&] {
              std::vector<Tensor> parts{a, c};
              return ad::sum(ad::tanh(ad::concat_cols(parts)));
            },
            {a, c}) < 1e-6);
  CHECK(gradcheck([&] { return ad::sum(ad::tanh(ad::slice_rows(b, 1, 2))); }, {b}) < 1e-6);
  CHECK(gradcheck([&] { return ad::sum(ad::tanh(ad::slice_cols(b, 1, 2))); }, {b}) < 1e-6);
  std::vector<int> ids{3, 0, 3};
  CHECK(gradcheck([&] { return ad::sum(ad::tanh(ad::gather_rows(b, ids))); }, {b}) < 1e-6);
  std::vector<std::uint8_t> valid{1, 0, 1, 1};
  CHECK(gradcheck([&] { return ad::sum(ad::tanh(ad::masked_mean_rows(b, valid))); }, {b}) < 1e-6);
}

TEST_CASE("cross entropy skips excluded rows") {
  auto logits = random_tensor(3, 4, 17);
  std::vector<int> targets{1, 3, 0};
  std::vector<std::uint8_t> include{1, 0, 1};
  CHECK(gradcheck([&] { return ad::cross_entropy_sum(logits, targets, include); }, {logits}) < 1e-6);
  logits.zero_grad();
  ad::cross_entropy_sum(logits, targets, include).backward();
  for (int c = 0; c < 4; ++c) CHECK(logits.grad()[4 + c] == 0.0);

  std::vector<std::uint8_t> none{0, 0, 0};
  auto zero = ad::cross_entropy_sum(logits, targets, none);
  CHECK(zero.item() == 0.0);
  CHECK_FALSE(zero.requires_grad());

  auto uniform = Tensor::zeros(1, 27);
  std::vector<int> t{5};
  CHECK(ad::cross_entropy_sum(uniform, t).item() == doctest::Approx(std::log(27.0)).epsilon(1e-12));
}

TEST_CASE("no-grad guard records nothing") {
  auto a = random_tensor(2, 2, 18);
  Tensor y;
  {
    ad::NoGradGuard guard;
    y = ad::sum(a);
  }
  CHECK_FALSE(y.requires_grad());
  CHECK(ad::grad_enabled());
}

TEST_CASE("shape errors are reported") {
  auto a = random_tensor(2, 3, 19);
  auto b = random_tensor(2, 3, 20);
  CHECK_THROWS_AS(ad::matmul(a, b), ShapeError);
  CHECK_THROWS_AS(ad::add(a, ad::transpose(b)), ShapeError);
  CHECK_THROWS_AS(ad::slice_rows(a, 1, 5), ShapeError);
}
