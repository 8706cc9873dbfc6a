#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mer/ops.hpp"
#include "testutil.hpp"

using namespace mer;
using mer::testing::gradcheck;
using mer::testing::random_signed;

TEST_CASE("matmul identity and orthogonal cases") {
  auto eye = Tensor<float>::from_data({2, 2}, {1, 0, 0, 1});
  auto m = Tensor<float>::from_data({2, 2}, {1, 2, 3, 4});
  auto y = matmul(eye, m);
  for (int i = 0; i < 4; ++i) CHECK(y.data()[i] == m.data()[i]);

  auto row = Tensor<float>::from_data({1, 2}, {1, 0});
  auto col = Tensor<float>::from_data({2, 1}, {0, 1});
  CHECK(matmul(row, col).data()[0] == 0.f);
}

TEST_CASE("matmul matches the elementwise triple-loop oracle exactly") {
  Rng rng(3);
  auto a = Tensor<double>::normal({3, 4}, rng);
  auto b = Tensor<double>::normal({4, 2}, rng);
  auto c = matmul(a, b);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 4; ++k) acc += a.data()[i * 4 + k] * b.data()[k * 2 + j];
      CHECK(c.data()[i * 2 + j] == doctest::Approx(acc).epsilon(1e-14));
    }
}

TEST_CASE("matmul dimension error names both shapes") {
  auto a = Tensor<float>::zeros({2, 3});
  auto b = Tensor<float>::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x2]") != std::string::npos);
  }
}

TEST_CASE("matmul transpose flags") {
  Rng rng(5);
  auto a = Tensor<double>::normal({4, 3}, rng);
  auto b = Tensor<double>::normal({4, 2}, rng);
  auto c = matmul(a, b, true, false);  // a^T b -> [3, 2]
  CHECK(c.dim(0) == 3);
  CHECK(c.dim(1) == 2);
  auto e = matmul(b, a, true, false);  // b^T a -> [2, 3]
  CHECK(e.dim(0) == 2);
  CHECK(e.dim(1) == 3);
}

template <typename T>
static void matmul_gradcheck_all_flags() {
  Rng rng(17);
  for (bool ta : {false, true})
    for (bool tb : {false, true}) {
      auto a = random_signed<T>(ta ? Shape{4, 3} : Shape{3, 4}, rng);
      auto b = random_signed<T>(tb ? Shape{2, 4} : Shape{4, 2}, rng);
      auto r = random_signed<T>({3, 2}, rng);
      auto fn = [&](std::vector<Tensor<T>>& in) {
        return sum_all(mul(matmul(in[0], in[1], ta, tb), r));
      };
      const double err = gradcheck<T>(fn, {a, b}, rng);
      INFO("ta=", ta, " tb=", tb);
      CHECK(err <= mer::testing::default_gradcheck<T>().rel_tol);
    }
}

TEST_CASE("matmul gradients pass finite differences (32 and 64 bit)") {
  matmul_gradcheck_all_flags<float>();
  matmul_gradcheck_all_flags<double>();
}

TEST_CASE("batched matmul value and gradients") {
  Rng rng(21);
  auto a = random_signed<double>({2, 3, 2, 4}, rng);
  auto b = random_signed<double>({2, 3, 4, 2}, rng);
  auto c = batched_matmul(a, b);
  // spot check one slice against matmul
  auto a0 = Tensor<double>::from_data({2, 4}, {a.data().begin(), a.data().begin() + 8});
  auto b0 = Tensor<double>::from_data({4, 2}, {b.data().begin(), b.data().begin() + 8});
  auto c0 = matmul(a0, b0);
  for (int i = 0; i < 4; ++i) CHECK(c.data()[i] == doctest::Approx(c0.data()[i]));

  auto r = random_signed<double>({2, 3, 2, 2}, rng);
  for (bool tb : {false, true}) {
    auto bb = tb ? random_signed<double>({2, 3, 2, 4}, rng) : b;
    auto fn = [&](std::vector<Tensor<double>>& in) {
      return sum_all(mul(batched_matmul(in[0], in[1], false, tb), r));
    };
    CHECK(gradcheck<double>(fn, {a, bb}, rng) <= 1e-5);
  }
}

TEST_CASE("broadcast add covers bias rows and scalars") {
  auto x = Tensor<float>::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  auto bias = Tensor<float>::from_data({3}, {10, 20, 30});
  auto y = add(x, bias);
  CHECK(y.data()[0] == 11.f);
  CHECK(y.data()[5] == 36.f);
  auto s = add(x, Tensor<float>::scalar(1.f));
  CHECK(s.data()[3] == 5.f);
  // middle-axis broadcast through the generic path
  auto m = Tensor<float>::from_data({2, 1, 2}, {1, 2, 3, 4});
  auto n = Tensor<float>::from_data({1, 3, 1}, {10, 20, 30});
  auto z = add(m, n);
  CHECK(z.shape() == Shape{2, 3, 2});
  CHECK(z.data()[0] == 11.f);   // (0,0,0): 1 + 10
  CHECK(z.data()[11] == 34.f);  // (1,2,1): 4 + 30
  CHECK_THROWS_AS(add(Tensor<float>::zeros({2, 3}), Tensor<float>::zeros({2, 2})),
                  ShapeError);
}

TEST_CASE("broadcast gradients reduce over the broadcast axes") {
  Rng rng(31);
  auto a = random_signed<double>({2, 3}, rng);
  auto b = random_signed<double>({3}, rng);
  auto fn = [&](std::vector<Tensor<double>>& in) {
    return sum_all(mul(add(in[0], in[1]), in[0]));
  };
  CHECK(gradcheck<double>(fn, {a, b}, rng) <= 1e-5);

  auto c = random_signed<double>({2, 1, 2}, rng);
  auto d = random_signed<double>({1, 3, 1}, rng);
  auto fn2 = [&](std::vector<Tensor<double>>& in) {
    return sum_all(mul(mul(in[0], in[1]), add(in[0], in[1])));
  };
  CHECK(gradcheck<double>(fn2, {c, d}, rng) <= 1e-5);
}

TEST_CASE("elementwise unary gradients") {
  Rng rng(41);
  auto x32 = random_signed<float>({3, 4}, rng);
  auto x64 = random_signed<double>({3, 4}, rng);
  auto run = [&](auto x, auto op) {
    using T = typename decltype(x)::value_type;
    Rng local(55);
    auto r = random_signed<T>(x.shape(), local);
    auto fn = [&](std::vector<Tensor<T>>& in) { return sum_all(mul(op(in[0]), r)); };
    return gradcheck<T>(fn, {x}, local);
  };
  CHECK(run(x32, [](auto& t) { return relu(t); }) <= 1e-3);
  CHECK(run(x64, [](auto& t) { return relu(t); }) <= 1e-5);
  CHECK(run(x32, [](auto& t) { return tanh_op(t); }) <= 1e-3);
  CHECK(run(x64, [](auto& t) { return tanh_op(t); }) <= 1e-5);
  CHECK(run(x32, [](auto& t) { return gelu(t); }) <= 1e-3);
  CHECK(run(x64, [](auto& t) { return gelu(t); }) <= 1e-5);
  CHECK(run(x64, [](auto& t) { return abs_op(t); }) <= 1e-5);
  CHECK(run(x64, [](auto& t) { return neg(t); }) <= 1e-5);
}

TEST_CASE("div gradients") {
  Rng rng(43);
  auto a = random_signed<double>({2, 3}, rng, 0.5, 1.5);
  auto b = random_signed<double>({2, 3}, rng, 0.5, 1.5);
  auto fn = [&](std::vector<Tensor<double>>& in) {
    return sum_all(div(in[0], in[1]));
  };
  CHECK(gradcheck<double>(fn, {a, b}, rng) <= 1e-5);
}

TEST_CASE("softmax of zeros is uniform") {
  auto y = softmax(Tensor<float>::from_data({3}, {0, 0, 0}), 0);
  for (float v : y.data()) CHECK(v == doctest::Approx(1.f / 3.f));
}

TEST_CASE("softmax is stable for extreme logits") {
  auto y = softmax(Tensor<float>::from_data({2}, {1000.f, 0.f}), 0);
  CHECK(y.data()[0] == doctest::Approx(1.f));
  CHECK(y.data()[1] == doctest::Approx(0.f));
  CHECK(std::isfinite(y.data()[0]));
}

TEST_CASE("softmax matches the direct exp/sum oracle") {
  auto y = softmax(Tensor<double>::from_data({3}, {1, 2, 3}), 0);
  double denom = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i)
    CHECK(y.data()[i] == doctest::Approx(std::exp(1.0 + i) / denom).epsilon(1e-12));
}

TEST_CASE("softmax outputs sum to one along the reduced axis") {
  Rng rng(53);
  for (int trial = 0; trial < 50; ++trial) {
    Shape shape = {1 + rng.uniform_int(1, 4), 1 + rng.uniform_int(1, 5),
                   1 + rng.uniform_int(1, 3)};
    auto x = Tensor<float>::normal(shape, rng, 0.0, 5.0);
    const int axis = static_cast<int>(rng.uniform_int(0, 2));
    auto p = softmax(x, axis);
    auto sums = sum_axis(p, axis);
    for (float s : sums.data()) CHECK(std::abs(s - 1.f) <= 1e-6f);
  }
}

TEST_CASE("softmax gradients pass finite differences") {
  Rng rng(61);
  auto x32 = Tensor<float>::normal({3, 5}, rng);
  auto x64 = Tensor<double>::normal({3, 5}, rng);
  auto r32 = random_signed<float>({3, 5}, rng);
  auto r64 = random_signed<double>({3, 5}, rng);
  auto fn32 = [&](std::vector<Tensor<float>>& in) {
    return sum_all(mul(softmax(in[0], 1), r32));
  };
  auto fn64 = [&](std::vector<Tensor<double>>& in) {
    return sum_all(mul(softmax(in[0], 1), r64));
  };
  CHECK(gradcheck<float>(fn32, {x32}, rng) <= 1e-3);
  CHECK(gradcheck<double>(fn64, {x64}, rng) <= 1e-5);
}

TEST_CASE("shape ops roundtrip and differentiate") {
  Rng rng(71);
  auto x = random_signed<double>({2, 3, 4}, rng);

  auto back = permute(permute(x, {2, 0, 1}), {1, 2, 0});
  for (std::int64_t i = 0; i < x.size(); ++i)
    CHECK(back.data()[i] == x.data()[i]);

  auto joined = concat({slice(x, 1, 0, 1), slice(x, 1, 1, 2)}, 1);
  for (std::int64_t i = 0; i < x.size(); ++i)
    CHECK(joined.data()[i] == x.data()[i]);

  auto r = random_signed<double>({4, 6}, rng);
  auto fn = [&](std::vector<Tensor<double>>& in) {
    auto y = permute(in[0], {2, 0, 1});        // [4,2,3]
    y = reshape(y, {4, 6});
    return sum_all(mul(y, r));
  };
  CHECK(gradcheck<double>(fn, {x}, rng) <= 1e-5);

  auto rs = random_signed<double>({2, 2, 4}, rng);
  auto fn2 = [&](std::vector<Tensor<double>>& in) {
    auto s = slice(in[0], 1, 1, 2);
    return sum_all(mul(s, rs));
  };
  CHECK(gradcheck<double>(fn2, {x}, rng) <= 1e-5);

  auto fn3 = [&](std::vector<Tensor<double>>& in) {
    auto c = concat({in[0], in[1]}, 2);
    return sum_all(mul(c, c));
  };
  auto a = random_signed<double>({2, 2, 3}, rng);
  auto b = random_signed<double>({2, 2, 2}, rng);
  CHECK(gradcheck<double>(fn3, {a, b}, rng) <= 1e-5);
}

TEST_CASE("reductions: values and gradients") {
  auto x = Tensor<double>::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(sum_all(x).item() == doctest::Approx(21.0));
  CHECK(mean_all(x).item() == doctest::Approx(3.5));
  auto s0 = sum_axis(x, 0);
  CHECK(s0.shape() == Shape{3});
  CHECK(s0.data()[0] == doctest::Approx(5.0));
  auto m1 = mean_axis(x, 1, true);
  CHECK(m1.shape() == Shape{2, 1});
  CHECK(m1.data()[1] == doctest::Approx(5.0));

  Rng rng(81);
  auto y = random_signed<double>({3, 4}, rng);
  auto r = random_signed<double>({4}, rng);
  auto fn = [&](std::vector<Tensor<double>>& in) {
    return sum_all(mul(sum_axis(in[0], 0), r));
  };
  CHECK(gradcheck<double>(fn, {y}, rng) <= 1e-5);
}

TEST_CASE("cross entropy of uniform prediction on 3 classes is ln 3") {
  auto logits = Tensor<double>::zeros({4, 3});
  auto loss = cross_entropy_mean(logits, {0, 1, 2, 0});
  CHECK(loss.item() == doctest::Approx(std::log(3.0)).epsilon(1e-12));
}

TEST_CASE("cross entropy gradients and input validation") {
  Rng rng(91);
  auto logits = Tensor<double>::normal({5, 3}, rng);
  std::vector<int> labels = {0, 2, 1, 1, 0};
  auto fn = [&](std::vector<Tensor<double>>& in) {
    return cross_entropy_mean(in[0], labels);
  };
  CHECK(gradcheck<double>(fn, {logits}, rng) <= 1e-5);
  CHECK_THROWS_AS(cross_entropy_mean(logits, {0, 1}), UsageError);
  CHECK_THROWS_AS(cross_entropy_mean(logits, {0, 1, 2, 3, 0}), UsageError);
}

TEST_CASE("scale_gradient is the identity forward and scales backward") {
  auto x = Tensor<double>::from_data({3}, {1, 2, 3});
  x.set_requires_grad(true);
  auto y = scale_gradient(x, 1e-6);
  for (int i = 0; i < 3; ++i) CHECK(y.data()[i] == x.data()[i]);
  sum_all(y).backward();
  for (double g : x.grad()) CHECK(g == doctest::Approx(1e-6));

  x.zero_grad();
  sum_all(scale_gradient(x, 0.0)).backward();
  for (double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("normalize_max_abs rescales per sample and differentiates") {
  auto x = Tensor<double>::from_data({2, 3}, {0.5, -2.0, 1.0, 0.1, 0.2, -0.4});
  auto y = normalize_max_abs(x, 1e-6);
  CHECK(y.data()[1] == doctest::Approx(-1.0));
  CHECK(y.data()[0] == doctest::Approx(0.25));
  CHECK(y.data()[5] == doctest::Approx(-1.0));
  CHECK(y.data()[3] == doctest::Approx(0.25));

  Rng rng(101);
  auto z = random_signed<double>({2, 4}, rng);
  auto r = random_signed<double>({2, 4}, rng);
  auto fn = [&](std::vector<Tensor<double>>& in) {
    return sum_all(mul(normalize_max_abs(in[0], 1e-6), r));
  };
  CHECK(gradcheck<double>(fn, {z}, rng) <= 1e-5);

  // below the floor the op is a plain division by the floor
  auto tiny = Tensor<double>::from_data({1, 2}, {1e-9, -2e-9});
  auto yt = normalize_max_abs(tiny, 1e-6);
  CHECK(yt.data()[0] == doctest::Approx(1e-3));
}
