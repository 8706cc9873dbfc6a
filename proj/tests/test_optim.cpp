#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mer/checkpoint.hpp"
#include "mer/optim.hpp"
#include "testutil.hpp"

#include <cstdio>
#include <filesystem>

using namespace mer;

TEST_CASE("one Adam step on f(x) = x^2 from x = 1 moves downhill") {
  auto x = Tensor<double>::from_data({1}, {1.0});
  x.set_requires_grad(true);
  Adam<double> opt({{"x", x}});
  opt.zero_grad();
  mul(x, x).backward();
  opt.step(0.1);
  CHECK(x.data()[0] < 1.0);
}

TEST_CASE("cosine schedule endpoints") {
  CHECK(cosine_anneal(0, 100, 0.5) == doctest::Approx(0.5));
  CHECK(cosine_anneal(100, 100, 0.5) == doctest::Approx(0.0));
  CHECK(cosine_anneal(50, 100, 0.5) == doctest::Approx(0.25));
  // steps past the horizon stay at zero
  CHECK(cosine_anneal(150, 100, 0.5) == doctest::Approx(0.0));
}

TEST_CASE("Adam reaches the minimum of a 2-d quadratic within 1e-3") {
  auto x = Tensor<double>::from_data({2}, {2.0, -1.5});
  x.set_requires_grad(true);
  Adam<double> opt({{"x", x}});
  const double target0 = 0.3, target1 = -0.7;
  for (int step = 0; step < 200; ++step) {
    opt.zero_grad();
    auto d = sub(x, Tensor<double>::from_data({2}, {target0, target1}));
    auto w = Tensor<double>::from_data({2}, {1.0, 2.0});
    sum_all(mul(w, mul(d, d))).backward();
    opt.step(0.05);
  }
  CHECK(std::abs(x.data()[0] - target0) <= 1e-3);
  CHECK(std::abs(x.data()[1] - target1) <= 1e-3);
}

TEST_CASE("Adam leaves parameters without gradients untouched") {
  auto a = Tensor<double>::from_data({1}, {1.0});
  auto b = Tensor<double>::from_data({1}, {2.0});
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  Adam<double> opt({{"a", a}, {"b", b}});
  opt.zero_grad();
  mul(a, a).backward();
  opt.step(0.1);
  CHECK(a.data()[0] != 1.0);
  CHECK(b.data()[0] == 2.0);
}

TEST_CASE("checkpoint round trip preserves parameters and buffers") {
  namespace fs = std::filesystem;
  const std::string path =
      (fs::temp_directory_path() / "mer_ckpt_test.bin").string();

  Rng rng(7);
  auto w = Tensor<float>::normal({3, 2}, rng);
  auto b = Tensor<float>::normal({3}, rng);
  std::vector<float> running = {0.25f, -1.5f};

  std::vector<CheckpointEntry<float>> entries;
  entries.push_back({"layer.weight", w.shape(),
                     {w.data().begin(), w.data().end()}});
  entries.push_back({"layer.bias", b.shape(), {b.data().begin(), b.data().end()}});
  entries.push_back({"bn.running_mean", {2}, running});
  save_checkpoint(path, entries);

  auto loaded = load_checkpoint<float>(path);
  CHECK(loaded.size() == 3);
  CHECK(loaded.at("layer.weight").shape == Shape{3, 2});
  for (int i = 0; i < 6; ++i)
    CHECK(loaded.at("layer.weight").values[i] == w.data()[i]);

  ParamList<float> params = {{"layer.weight", Tensor<float>::zeros({3, 2})},
                             {"layer.bias", Tensor<float>::zeros({3})}};
  std::vector<float> rm(2, 0.f);
  std::vector<std::pair<std::string, std::vector<float>*>> buffers = {
      {"bn.running_mean", &rm}};
  apply_checkpoint(loaded, params, buffers);
  CHECK(params[0].tensor.data()[0] == w.data()[0]);
  CHECK(rm[1] == -1.5f);

  std::remove(path.c_str());
}

TEST_CASE("checkpoint mismatches raise version errors") {
  namespace fs = std::filesystem;
  const std::string path =
      (fs::temp_directory_path() / "mer_ckpt_test2.bin").string();
  std::vector<CheckpointEntry<float>> entries;
  entries.push_back({"w", {2}, {1.f, 2.f}});
  save_checkpoint(path, entries);
  auto loaded = load_checkpoint<float>(path);

  std::vector<std::pair<std::string, std::vector<float>*>> no_buffers;

  // missing parameter
  ParamList<float> missing = {{"other", Tensor<float>::zeros({2})}};
  CHECK_THROWS_AS(apply_checkpoint(loaded, missing, no_buffers), VersionError);

  // shape mismatch
  ParamList<float> wrong_shape = {{"w", Tensor<float>::zeros({3})}};
  CHECK_THROWS_AS(apply_checkpoint(loaded, wrong_shape, no_buffers),
                  VersionError);

  // dtype mismatch surfaces on load
  CHECK_THROWS_AS(load_checkpoint<double>(path), VersionError);

  std::remove(path.c_str());
}

TEST_CASE("checkpoint files start with the documented magic") {
  namespace fs = std::filesystem;
  const std::string path =
      (fs::temp_directory_path() / "mer_ckpt_test3.bin").string();
  save_checkpoint<float>(path, {{"x", {1}, {0.f}}});
  std::ifstream is(path, std::ios::binary);
  char magic[8];
  is.read(magic, 8);
  CHECK(std::string(magic, 8) == "MERCKPT1");
  std::remove(path.c_str());
}
