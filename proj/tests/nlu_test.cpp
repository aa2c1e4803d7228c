#include <cmath>
#include <vector>

#include "glam/nlu.hpp"
#include "gtest/gtest.h"
#include "test_util.hpp"

using namespace glam;

namespace {

std::vector<double> linear_oracle(const std::vector<double>& x, i64 n,
                                  const LinearLayer<double>& l) {
  i64 cin = l.in_features(), cout = l.out_features();
  auto y = test::naive_matmul(x, l.w.values(), n, cin, cout);
  for (i64 i = 0; i < n; ++i)
    for (i64 j = 0; j < cout; ++j) y[i * cout + j] += l.b.values()[static_cast<std::size_t>(j)];
  return y;
}

}  // namespace

TEST(Nlu, SingleLowTokenPassesValueThrough) {
  Rng rng(41);
  auto nlu = NluLayer<double>::init(3, 6, 4, 2, /*residual=*/false, rng);
  auto skip = Tensor<double>::randn({1, 4, 3}, rng);
  auto low = Tensor<double>::randn({1, 1, 6}, rng);
  auto out = nlu.forward(skip, low, 1, 1);
  auto expect = nlu.out_proj.forward(nlu.msa.wo.forward(nlu.msa.wv.forward(
      nlu.kv_embed.forward(low))));
  for (i64 t = 0; t < 4; ++t)
    for (i64 j = 0; j < 4; ++j)
      EXPECT_NEAR(out.at({0, t, j}), expect.at({0, 0, j}), 1e-12);
}

TEST(Nlu, ConstantLowFeaturesIgnoreSkipContent) {
  Rng rng(42);
  auto nlu = NluLayer<double>::init(3, 6, 4, 2, /*residual=*/true, rng);
  auto token = Tensor<double>::randn({6}, rng);
  auto low = expand_leading(token, {1, 4});  // identical low tokens
  auto skip_a = Tensor<double>::randn({1, 16, 3}, rng);
  auto skip_b = Tensor<double>::randn({1, 16, 3}, rng);
  auto out_a = nlu.forward(skip_a, low, 2, 2);
  auto out_b = nlu.forward(skip_b, low, 2, 2);
  for (std::size_t i = 0; i < out_a.values().size(); ++i)
    EXPECT_NEAR(out_a.values()[i], out_b.values()[i], 1e-12);
}

TEST(Nlu, MatchesCrossAttentionFormulaOracle) {
  Rng rng(43);
  auto nlu = NluLayer<double>::init(2, 4, 2, 1, /*residual=*/true, rng);
  auto skip = Tensor<double>::randn({1, 16, 2}, rng);
  auto low = Tensor<double>::randn({1, 4, 4}, rng);
  auto out = nlu.forward(skip, low, 2, 2);

  auto q = linear_oracle(skip.values(), 16, nlu.q_embed);
  auto kv = linear_oracle(low.values(), 4, nlu.kv_embed);
  auto qq = linear_oracle(q, 16, nlu.msa.wq);
  auto kk = linear_oracle(kv, 4, nlu.msa.wk);
  auto vv = linear_oracle(kv, 4, nlu.msa.wv);
  double inv = 1.0 / std::sqrt(2.0);
  std::vector<double> mixed(16 * 2, 0.0);
  for (i64 i = 0; i < 16; ++i) {
    std::vector<double> row(4);
    double mx = -1e300;
    for (i64 j = 0; j < 4; ++j) {
      row[static_cast<std::size_t>(j)] =
          inv * (qq[i * 2] * kk[j * 2] + qq[i * 2 + 1] * kk[j * 2 + 1]);
      mx = std::max(mx, row[static_cast<std::size_t>(j)]);
    }
    double sum = 0;
    for (auto& r : row) {
      r = std::exp(r - mx);
      sum += r;
    }
    for (auto& r : row) r /= sum;
    for (i64 j = 0; j < 4; ++j)
      for (i64 t = 0; t < 2; ++t)
        mixed[i * 2 + t] += row[static_cast<std::size_t>(j)] * vv[j * 2 + t];
  }
  auto att = linear_oracle(linear_oracle(mixed, 16, nlu.msa.wo), 16, nlu.out_proj);
  auto res = linear_oracle(low.values(), 4, nlu.res_proj);
  auto idx = nn_upsample_indices(2, 2);
  for (i64 i = 0; i < 16; ++i)
    for (i64 t = 0; t < 2; ++t)
      EXPECT_NEAR(out.at({0, i, t}),
                  att[i * 2 + t] + res[idx[static_cast<std::size_t>(i)] * 2 + t], 1e-12);
}

TEST(Nlu, AttentionRowsStochastic) {
  Rng rng(44);
  auto nlu = NluLayer<double>::init(3, 6, 4, 2, true, rng);
  auto skip = Tensor<double>::randn({2, 16, 3}, rng);
  auto low = Tensor<double>::randn({2, 4, 6}, rng);
  AttnCapture cap;
  auto out = nlu.forward(skip, low, 2, 2, &cap);
  EXPECT_EQ(out.shape(), (Shape{2, 16, 4}));
  ASSERT_EQ(cap.shape, (Shape{2, 16, 4}));
  for (i64 r = 0; r < 2 * 16; ++r) {
    double s = 0;
    for (i64 j = 0; j < 4; ++j) s += cap.probs[static_cast<std::size_t>(r * 4 + j)];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Nlu, WrongRatioRejected) {
  Rng rng(45);
  auto nlu = NluLayer<double>::init(3, 6, 4, 2, true, rng);
  auto skip = Tensor<double>::randn({1, 12, 3}, rng);
  auto low = Tensor<double>::randn({1, 4, 6}, rng);
  EXPECT_THROW(nlu.forward(skip, low, 2, 2), ConfigError);
}

TEST(Nlu, GradientFlowsToBothInputs) {
  Rng rng(46);
  auto nlu = NluLayer<double>::init(3, 6, 4, 2, true, rng);
  ParamList<double> params;
  nlu.collect(params, "nlu");
  Rng wr(47);
  test::randomize_params(params, wr);
  auto skip = Tensor<double>::randn({1, 16, 3}, rng).set_requires_grad(true);
  auto low = Tensor<double>::randn({1, 4, 6}, rng).set_requires_grad(true);
  auto loss_fn = [&]() { return test::fd_loss(nlu.forward(skip, low, 2, 2)); };

  skip.zero_grad();
  low.zero_grad();
  backward(loss_fn());
  double snorm = 0, lnorm = 0;
  for (double g : skip.grad()) snorm += g * g;
  for (double g : low.grad()) lnorm += g * g;
  EXPECT_GT(snorm, 0.0);
  EXPECT_GT(lnorm, 0.0);

  std::vector<Tensor<double>> leaves{skip, low};
  for (auto& [name, t] : params) leaves.push_back(t);
  Rng pick(48);
  auto rep = test::fd_check(loss_fn, leaves, pick, 5);
  EXPECT_LT(rep.max_rel_err, 1e-4) << "coords " << rep.coords_checked;
}
