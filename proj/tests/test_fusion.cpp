#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mer/fusion.hpp"
#include "testutil.hpp"

using namespace mer;
using mer::testing::gradcheck;
using mer::testing::random_signed;

namespace {

template <typename T>
void set_values(Tensor<T>& t, const std::vector<T>& v) {
  REQUIRE(t.size() == static_cast<std::int64_t>(v.size()));
  std::copy(v.begin(), v.end(), t.mutable_data().begin());
}

template <typename T>
void zero_bias(Linear<T>& lin) {
  for (auto& v : lin.bias().mutable_data()) v = T(0);
}

}  // namespace

// ---------------------------------------------------------------------------
// patch embedding behaviour (via TokenFusionModule's embedding stage)
// ---------------------------------------------------------------------------

TEST_CASE("patch embedding maps 25 patches to 25 tokens of length 256") {
  Rng rng(1);
  FusionModuleConfig cfg;
  cfg.embed_dim = 256;
  cfg.heads = 8;
  cfg.depth = 0;
  cfg.n_tokens = 25;
  cfg.in_dim = 18 * 18 * 4;
  TokenFusionModule<float> module(cfg, rng);
  auto tokens = Tensor<float>::zeros({2, 25, cfg.in_dim});
  auto embedded = module.embed_only(tokens);
  CHECK(embedded.shape() == Shape{2, 25, 256});
}

TEST_CASE("embedding of zero patches is bias plus positional table") {
  Rng rng(3);
  FusionModuleConfig cfg;
  cfg.embed_dim = 8;
  cfg.heads = 2;
  cfg.depth = 0;
  cfg.n_tokens = 3;
  cfg.in_dim = 5;
  TokenFusionModule<double> module(cfg, rng);
  ParamList<double> params;
  module.collect_params("m", params);
  const Tensor<double>* bias = nullptr;
  const Tensor<double>* pos = nullptr;
  for (auto& p : params) {
    if (p.name == "m.embed.bias") bias = &p.tensor;
    if (p.name == "m.pos") pos = &p.tensor;
  }
  REQUIRE(bias != nullptr);
  REQUIRE(pos != nullptr);
  auto out = module.embed_only(Tensor<double>::zeros({1, 3, 5}));
  for (int n = 0; n < 3; ++n)
    for (int c = 0; c < 8; ++c)
      CHECK(out.data()[n * 8 + c] ==
            doctest::Approx(bias->data()[c] + pos->data()[n * 8 + c]));
}

TEST_CASE("one-hot patches pick out weight columns") {
  Rng rng(5);
  FusionModuleConfig cfg;
  cfg.embed_dim = 6;
  cfg.heads = 2;
  cfg.depth = 0;
  cfg.n_tokens = 2;
  cfg.in_dim = 4;
  cfg.pos_embed = false;
  TokenFusionModule<double> module(cfg, rng);
  ParamList<double> params;
  module.collect_params("m", params);
  const Tensor<double>* weight = nullptr;
  const Tensor<double>* bias = nullptr;
  for (auto& p : params) {
    if (p.name == "m.embed.weight") weight = &p.tensor;
    if (p.name == "m.embed.bias") bias = &p.tensor;
  }
  REQUIRE(weight != nullptr);
  auto x = Tensor<double>::zeros({1, 2, 4});
  x.mutable_data()[0 * 4 + 2] = 1.0;  // token 0 = e_2
  auto out = module.embed_only(x);
  for (int c = 0; c < 6; ++c)
    CHECK(out.data()[c] ==
          doctest::Approx(weight->data()[c * 4 + 2] + bias->data()[c]));
}

// ---------------------------------------------------------------------------
// attention blocks
// ---------------------------------------------------------------------------

TEST_CASE("single-token attention reduces to the value path") {
  Rng rng(7);
  MultiHeadAttention<double> attn(4, 2, rng);
  zero_bias(attn.qkv());
  zero_bias(attn.out_proj());
  // identity output projection isolates the context vector
  set_values(attn.out_proj().weight(),
             {1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1.});
  auto x = Tensor<double>::from_data({1, 1, 4}, {0.3, -0.8, 1.1, 0.5});
  auto y = attn.forward(x);
  // softmax over one token is 1, so the context equals V = Wv x
  auto w = attn.qkv().weight().data();
  for (int c = 0; c < 4; ++c) {
    double v = 0;
    for (int j = 0; j < 4; ++j) v += w[(8 + c) * 4 + j] * x.data()[j];
    CHECK(y.data()[c] == doctest::Approx(v).epsilon(1e-12));
  }
}

TEST_CASE("two-token single-head attention matches a hand oracle") {
  Rng rng(9);
  MultiHeadAttention<double> attn(2, 1, rng);
  zero_bias(attn.qkv());
  zero_bias(attn.out_proj());
  set_values(attn.out_proj().weight(), {1., 0., 0., 1.});
  // simple fixed projections
  set_values(attn.qkv().weight(), {1., 0., 0., 1.,    // Wq = I
                                   0., 1., 1., 0.,    // Wk = swap
                                   2., 0., 0., 2.});  // Wv = 2I
  auto x = Tensor<double>::from_data({1, 2, 2}, {0.5, -0.2, 1.0, 0.7});
  auto y = attn.forward(x);

  // oracle
  const double q[2][2] = {{0.5, -0.2}, {1.0, 0.7}};
  const double k[2][2] = {{-0.2, 0.5}, {0.7, 1.0}};
  const double v[2][2] = {{1.0, -0.4}, {2.0, 1.4}};
  const double inv_sqrt_c = 1.0 / std::sqrt(2.0);
  for (int i = 0; i < 2; ++i) {
    double s0 = (q[i][0] * k[0][0] + q[i][1] * k[0][1]) * inv_sqrt_c;
    double s1 = (q[i][0] * k[1][0] + q[i][1] * k[1][1]) * inv_sqrt_c;
    const double m = std::max(s0, s1);
    const double e0 = std::exp(s0 - m), e1 = std::exp(s1 - m);
    const double p0 = e0 / (e0 + e1), p1 = e1 / (e0 + e1);
    for (int c = 0; c < 2; ++c) {
      const double expect = p0 * v[0][c] + p1 * v[1][c];
      CHECK(y.data()[i * 2 + c] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("transformer layer is permutation equivariant") {
  Rng rng(11);
  TransformerLayer<double> layer(8, 2, 2.0, rng);
  auto x = Tensor<double>::normal({1, 4, 8}, rng);
  auto y = layer.forward(x);
  // swap tokens 1 and 3
  std::vector<double> permuted(x.data().begin(), x.data().end());
  for (int c = 0; c < 8; ++c) std::swap(permuted[1 * 8 + c], permuted[3 * 8 + c]);
  auto y2 = layer.forward(Tensor<double>::from_data({1, 4, 8}, permuted));
  for (int c = 0; c < 8; ++c) {
    CHECK(y2.data()[1 * 8 + c] == doctest::Approx(y.data()[3 * 8 + c]).epsilon(1e-10));
    CHECK(y2.data()[3 * 8 + c] == doctest::Approx(y.data()[1 * 8 + c]).epsilon(1e-10));
    CHECK(y2.data()[0 * 8 + c] == doctest::Approx(y.data()[0 * 8 + c]).epsilon(1e-10));
  }
}

TEST_CASE("attention block gradients pass finite differences") {
  Rng rng(13);
  TransformerLayer<double> layer(4, 2, 1.0, rng);
  auto x = random_signed<double>({2, 3, 4}, rng, 0.3, 0.9);
  auto r = random_signed<double>({2, 3, 4}, rng);
  auto fn = [&](std::vector<Tensor<double>>& in) {
    return sum_all(mul(layer.forward(in[0]), r));
  };
  CHECK(gradcheck<double>(fn, {x}, rng) <= 1e-5);
}

// ---------------------------------------------------------------------------
// fusion layers
// ---------------------------------------------------------------------------

TEST_CASE("singleton fusion returns the value row for both variants") {
  for (auto kind : {FusionKind::kBeforeAttention, FusionKind::kAfterAttention}) {
    Rng rng(17);
    FusionLayer<double> fusion(kind, 4, 2, 1, rng);
    zero_bias(fusion.qkv());
    auto x = Tensor<double>::from_data({1, 1, 4}, {0.2, -0.5, 0.9, 0.4});
    auto y = fusion.forward(x, /*training=*/true);
    CHECK(y.shape() == Shape{1, 4});
    auto w = fusion.qkv().weight().data();
    for (int c = 0; c < 4; ++c) {
      double v = 0;
      for (int j = 0; j < 4; ++j) v += w[(8 + c) * 4 + j] * x.data()[j];
      CHECK(y.data()[c] == doctest::Approx(v).epsilon(1e-12));
    }
  }
}

TEST_CASE("equal mixing weights combine queries into their arithmetic mean") {
  Rng rng(19);
  auto q = Tensor<double>::normal({2, 2, 5, 4}, rng);
  auto w = Tensor<double>::full({2, 5}, 1.0 / 5.0);
  auto mixed = head_token_mix(q, w);
  auto mean = mean_axis(q, 2, true);
  for (std::int64_t i = 0; i < mixed.size(); ++i)
    CHECK(std::abs(mixed.data()[i] - mean.data()[i]) <=
          1e-13 * std::max(1.0, std::abs(mean.data()[i])));
}

TEST_CASE("before-attention fusion matches a hand oracle on a 2-token instance") {
  Rng rng(23);
  FusionLayer<double> fusion(FusionKind::kBeforeAttention, 2, 1, 2, rng);
  zero_bias(fusion.qkv());
  set_values(fusion.qkv().weight(), {1., 0., 0., 1.,    // Wq = I
                                     0., 1., 1., 0.,    // Wk = swap
                                     2., 0., 0., 2.});  // Wv = 2I
  set_values(fusion.mix_weights(), {0.3, 0.7});
  // inference mode with unit running stats: BN is x / sqrt(1 + eps)
  auto y = fusion.forward(
      Tensor<double>::from_data({1, 2, 2}, {0.5, -0.2, 1.0, 0.7}), false);

  const double q[2][2] = {{0.5, -0.2}, {1.0, 0.7}};
  const double k[2][2] = {{-0.2, 0.5}, {0.7, 1.0}};
  const double v[2][2] = {{1.0, -0.4}, {2.0, 1.4}};
  const double qbar[2] = {0.3 * q[0][0] + 0.7 * q[1][0],
                          0.3 * q[0][1] + 0.7 * q[1][1]};
  double logits[2];
  for (int j = 0; j < 2; ++j)
    logits[j] = (qbar[0] * k[j][0] + qbar[1] * k[j][1]) / std::sqrt(1.0 + 1e-5);
  const double m = std::max(logits[0], logits[1]);
  const double e0 = std::exp(logits[0] - m), e1 = std::exp(logits[1] - m);
  const double p0 = e0 / (e0 + e1), p1 = e1 / (e0 + e1);
  for (int c = 0; c < 2; ++c)
    CHECK(y.data()[c] ==
          doctest::Approx(p0 * v[0][c] + p1 * v[1][c]).epsilon(1e-10));
}

TEST_CASE("after-attention fusion with equal weights averages attention outputs") {
  Rng rng(29);
  FusionLayer<double> fusion(FusionKind::kAfterAttention, 4, 2, 3, rng);
  auto x = Tensor<double>::normal({2, 3, 4}, rng);
  auto y = fusion.forward(x, true);
  CHECK(y.shape() == Shape{2, 4});
  // oracle: rebuild attention outputs from the layer's own projections, then
  // average across tokens (mix weights are 1/n at construction)
  auto qkv = fusion.qkv().forward(x);
  auto q = mer::detail::split_heads(slice(qkv, 2, 0, 4), 2);
  auto k = mer::detail::split_heads(slice(qkv, 2, 4, 4), 2);
  auto v = mer::detail::split_heads(slice(qkv, 2, 8, 4), 2);
  auto probs = softmax(scale(batched_matmul(q, k, false, true),
                             1.0 / std::sqrt(2.0)), -1);
  auto ctx = batched_matmul(probs, v);              // [2, 2, 3, 2]
  auto averaged = mean_axis(ctx, 2);                // [2, 2, 2]
  for (std::int64_t i = 0; i < y.size(); ++i)
    CHECK(y.data()[i] == doctest::Approx(averaged.data()[i]).epsilon(1e-10));
}

TEST_CASE("fusion weights are probability vectors") {
  Rng rng(31);
  FusionLayer<float> fusion(FusionKind::kBeforeAttention, 8, 2, 5, rng);
  for (int trial = 0; trial < 100; ++trial) {
    auto x = Tensor<float>::normal({3, 5, 8}, rng, 0.0, 2.0);
    fusion.forward(x, true);
    auto w = fusion.last_weights();
    CHECK(w.shape() == Shape{3, 2, 1, 5});
    for (std::int64_t b = 0; b < 3; ++b)
      for (std::int64_t h = 0; h < 2; ++h) {
        float sum = 0.f;
        for (std::int64_t j = 0; j < 5; ++j) {
          const float p = w.data()[(b * 2 + h) * 5 + j];
          CHECK(p >= 0.f);
          sum += p;
        }
        CHECK(std::abs(sum - 1.f) <= 1e-6f);
      }
  }
}

TEST_CASE("constant token sequences give uniform fusion weights") {
  Rng rng(37);
  FusionModuleConfig cfg;
  cfg.embed_dim = 8;
  cfg.heads = 2;
  cfg.depth = 1;
  cfg.n_tokens = 9;
  cfg.in_dim = 0;
  TokenFusionModule<double> module(cfg, rng);
  // each sample repeats one vector nine times
  auto x = Tensor<double>::zeros({2, 9, 8});
  Rng vr(41);
  for (int b = 0; b < 2; ++b) {
    std::vector<double> vec(8);
    for (auto& v : vec) v = vr.normal();
    for (int n = 0; n < 9; ++n)
      for (int c = 0; c < 8; ++c)
        x.mutable_data()[(b * 9 + n) * 8 + c] = vec[c];
  }
  module.forward(x, /*training=*/true);
  auto w = module.fusion().last_weights();
  for (std::int64_t i = 0; i < w.size(); ++i)
    CHECK(w.data()[i] == doctest::Approx(1.0 / 9.0).epsilon(1e-9));
}

TEST_CASE("fusion layers differentiate") {
  Rng rng(43);
  for (auto kind : {FusionKind::kBeforeAttention, FusionKind::kAfterAttention}) {
    FusionLayer<double> fusion(kind, 4, 2, 3, rng);
    auto x = random_signed<double>({2, 3, 4}, rng, 0.3, 0.9);
    auto r = random_signed<double>({2, 4}, rng);
    auto fn = [&](std::vector<Tensor<double>>& in) {
      return sum_all(mul(fusion.forward(in[0], true), r));
    };
    CHECK(gradcheck<double>(fn, {x}, rng) <= 1e-5);
  }
}

TEST_CASE("fusion module rejects wrong token counts") {
  Rng rng(47);
  FusionModuleConfig cfg;
  cfg.embed_dim = 8;
  cfg.heads = 2;
  cfg.depth = 1;
  cfg.n_tokens = 9;
  cfg.in_dim = 0;
  TokenFusionModule<double> module(cfg, rng);
  CHECK_THROWS_AS(module.forward(Tensor<double>::zeros({1, 7, 8}), true),
                  UsageError);
}

// ---------------------------------------------------------------------------
// classifier head
// ---------------------------------------------------------------------------

TEST_CASE("classification helpers: ties, confident logits, uniform entropy") {
  auto probs = softmax(Tensor<double>::from_data({3}, {0, 0, 0}), 0);
  for (double p : probs.data()) CHECK(p == doctest::Approx(1.0 / 3.0));
  std::vector<double> tie = {0.0, 0.0, 0.0};
  CHECK(argmax_label<double>(tie) == 0);  // lowest index wins ties

  auto confident = softmax(Tensor<double>::from_data({3}, {10, 0, 0}), 0);
  CHECK(confident.data()[0] == doctest::Approx(1.0).epsilon(1e-4));
  std::vector<double> conf = {10.0, 0.0, 0.0};
  CHECK(argmax_label<double>(conf) == 0);

  auto uniform_ce = cross_entropy_mean(Tensor<double>::zeros({1, 3}), {1});
  CHECK(uniform_ce.item() == doctest::Approx(std::log(3.0)));
}

TEST_CASE("classifier head produces logits of the configured arity") {
  Rng rng(53);
  ClassifierHead<float> head(16, 8, 3, rng);
  auto y = head.forward(Tensor<float>::normal({4, 16}, rng));
  CHECK(y.shape() == Shape{4, 3});
}

// ---------------------------------------------------------------------------
// FLOP accounting
// ---------------------------------------------------------------------------

TEST_CASE("before-attention fusion needs strictly fewer MACs for n >= 2") {
  for (std::int64_t n : {2, 9, 25}) {
    auto before = fusion_layer_flops(FusionKind::kBeforeAttention, n, 256, 8);
    auto after = fusion_layer_flops(FusionKind::kAfterAttention, n, 256, 8);
    CHECK(before.total() < after.total());
    // score computation is O(n*c) per head vs O(n^2*c)
    CHECK(before.scores * n == after.scores);
  }
}

TEST_CASE("both variants cost the same for a single token") {
  auto before = fusion_layer_flops(FusionKind::kBeforeAttention, 1, 256, 8);
  auto after = fusion_layer_flops(FusionKind::kAfterAttention, 1, 256, 8);
  CHECK(before.scores == after.scores);
  CHECK(before.total() == after.total());
}

TEST_CASE("symbolic counts match an instrumented execution tally") {
  const std::int64_t n = 3, dim = 8, heads = 2, c = dim / heads;
  Rng rng(59);
  std::vector<double> x(n * dim), wq(3 * dim * dim), mix(heads * n, 1.0 / n);
  for (auto& v : x) v = rng.normal();
  for (auto& v : wq) v = rng.normal();

  std::int64_t macs = 0;
  // qkv projection
  std::vector<double> qkv(n * 3 * dim, 0.0);
  for (std::int64_t t = 0; t < n; ++t)
    for (std::int64_t o = 0; o < 3 * dim; ++o)
      for (std::int64_t i = 0; i < dim; ++i) {
        qkv[t * 3 * dim + o] += wq[o * dim + i] * x[t * dim + i];
        ++macs;
      }
  auto head_val = [&](std::int64_t which, std::int64_t h, std::int64_t t,
                      std::int64_t cc) {
    return qkv[t * 3 * dim + which * dim + h * c + cc];
  };
  // query mixing
  std::vector<double> qbar(heads * c, 0.0);
  for (std::int64_t h = 0; h < heads; ++h)
    for (std::int64_t t = 0; t < n; ++t)
      for (std::int64_t cc = 0; cc < c; ++cc) {
        qbar[h * c + cc] += mix[h * n + t] * head_val(0, h, t, cc);
        ++macs;
      }
  // scores and value weighting
  std::vector<double> logits(heads * n, 0.0), fused(heads * c, 0.0);
  for (std::int64_t h = 0; h < heads; ++h) {
    for (std::int64_t t = 0; t < n; ++t)
      for (std::int64_t cc = 0; cc < c; ++cc) {
        logits[h * n + t] += qbar[h * c + cc] * head_val(1, h, t, cc);
        ++macs;
      }
    // softmax omitted from the tally (not multiply-accumulate work)
    for (std::int64_t t = 0; t < n; ++t)
      for (std::int64_t cc = 0; cc < c; ++cc) {
        fused[h * c + cc] += logits[h * n + t] * head_val(2, h, t, cc);
        ++macs;
      }
  }
  auto symbolic = fusion_layer_flops(FusionKind::kBeforeAttention, n, dim, heads);
  CHECK(macs == symbolic.total());

  // after-variant tally: full score matrix and weighting, then token mixing
  std::int64_t macs_after = n * 3 * dim * dim;  // identical projection work
  macs_after += 2 * heads * n * n * c;          // executed loops below
  std::int64_t counted = 0;
  for (std::int64_t h = 0; h < heads; ++h)
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < n; ++j)
        for (std::int64_t cc = 0; cc < c; ++cc) counted += 2;  // score + weight
  CHECK(counted == 2 * heads * n * n * c);
  macs_after += heads * n * c;  // output mixing
  auto symbolic_after =
      fusion_layer_flops(FusionKind::kAfterAttention, n, dim, heads);
  CHECK(macs_after == symbolic_after.total());
}
