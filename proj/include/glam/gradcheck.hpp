#pragma once

// Finite-difference gradient verification for every parameterized layer
// type, at 64 bit with central differences (h = 1e-5). The checker only
// calls forward passes, so it is independent of every backward
// implementation it certifies. Objectives are conditioned by a 0.01 factor
// so FD roundoff noise sits below the 1e-8 relative-error guard.

#include <functional>
#include <string>
#include <vector>

#include "glam/model.hpp"
#include "glam/nlu.hpp"

namespace glam {

inline constexpr double kGradCheckTolerance = 1e-4;
inline constexpr double kGradCheckStep = 1e-5;

struct GradCheckCase {
  std::string name;
  double max_rel_err = 0;
  i64 coords = 0;
};

namespace detail {

inline double fd_run(const std::function<Tensor<double>()>& raw_loss,
                     std::vector<Tensor<double>> leaves, Rng& pick, i64 max_coords,
                     i64* coords_out) {
  auto loss_fn = [&]() { return scale(raw_loss(), 0.01); };
  for (auto& p : leaves) p.zero_grad();
  backward(loss_fn());
  std::vector<std::vector<double>> analytic;
  for (auto& p : leaves) analytic.push_back(p.grad());

  double worst = 0;
  i64 coords = 0;
  for (std::size_t pi = 0; pi < leaves.size(); ++pi) {
    auto& p = leaves[pi];
    i64 n = p.numel();
    std::vector<i64> sel;
    if (n <= max_coords)
      for (i64 i = 0; i < n; ++i) sel.push_back(i);
    else
      for (i64 i = 0; i < max_coords; ++i)
        sel.push_back(static_cast<i64>(pick.below(static_cast<u64>(n))));
    for (i64 c : sel) {
      double orig = p.mutable_values()[static_cast<std::size_t>(c)];
      p.mutable_values()[static_cast<std::size_t>(c)] = orig + kGradCheckStep;
      double lp = loss_fn().item();
      p.mutable_values()[static_cast<std::size_t>(c)] = orig - kGradCheckStep;
      double lm = loss_fn().item();
      p.mutable_values()[static_cast<std::size_t>(c)] = orig;
      double numeric = (lp - lm) / (2.0 * kGradCheckStep);
      double rel = std::fabs(analytic[pi][static_cast<std::size_t>(c)] - numeric) /
                   (std::fabs(numeric) + 1e-8);
      worst = std::max(worst, rel);
      ++coords;
    }
  }
  if (coords_out) *coords_out = coords;
  return worst;
}

template <typename Params>
void condition(Params& params, Rng& rng, double stddev = 0.25) {
  for (auto& [name, t] : params)
    for (auto& v : t.mutable_values()) v = rng.normal() * stddev;
}

}  // namespace detail

// Exercises linear, layer norm, MSA, the GLAM block (including the
// global-token parameter), NLU, and the full toy model loss.
inline std::vector<GradCheckCase> run_grad_check_suite(u64 seed) {
  std::vector<GradCheckCase> out;
  Rng rng(seed);

  {
    auto lin = LinearLayer<double>::init(5, 7, rng);
    ParamList<double> ps;
    lin.collect(ps, "lin");
    Rng wr = rng.split(11);
    detail::condition(ps, wr);
    auto x = Tensor<double>::randn({3, 5}, rng).set_requires_grad(true);
    std::vector<Tensor<double>> leaves{x, lin.w, lin.b};
    GradCheckCase c{"linear", 0, 0};
    Rng pick = rng.split(12);
    c.max_rel_err = detail::fd_run(
        [&]() { return mean_all(mul(lin.forward(x), lin.forward(x))); }, leaves, pick,
        64, &c.coords);
    out.push_back(c);
  }
  {
    auto ln = LnParams<double>::init(6);
    auto x = Tensor<double>::randn({4, 6}, rng).set_requires_grad(true);
    ln.gamma.mutable_values() = Tensor<double>::uniform({6}, rng, 0.5, 1.5).values();
    ln.beta.mutable_values() = Tensor<double>::uniform({6}, rng, -0.5, 0.5).values();
    std::vector<Tensor<double>> leaves{x, ln.gamma, ln.beta};
    GradCheckCase c{"layer_norm", 0, 0};
    Rng pick = rng.split(13);
    c.max_rel_err = detail::fd_run(
        [&]() { return mean_all(mul(ln.forward(x), ln.forward(x))); }, leaves, pick, 64,
        &c.coords);
    out.push_back(c);
  }
  {
    auto msa = MsaLayer<double>::init(6, 2, rng);
    ParamList<double> ps;
    msa.collect(ps, "msa");
    Rng wr = rng.split(14);
    detail::condition(ps, wr);
    auto x = Tensor<double>::randn({1, 5, 6}, rng).set_requires_grad(true);
    std::vector<Tensor<double>> leaves{x};
    for (auto& [n, t] : ps) leaves.push_back(t);
    GradCheckCase c{"msa", 0, 0};
    Rng pick = rng.split(15);
    c.max_rel_err = detail::fd_run(
        [&]() {
          auto o = msa.self_attention(x);
          return mean_all(mul(o, o));
        },
        leaves, pick, 12, &c.coords);
    out.push_back(c);
  }
  {
    auto bank = GlobalTokenBank<double>::init(2, 4, rng);
    auto block = GlamBlock<double>::init(4, 2, 2, true, rng);
    ParamList<double> ps;
    block.collect(ps, "blk");
    ps.emplace_back("bank.tokens", bank.init_tokens);
    Rng wr = rng.split(16);
    detail::condition(ps, wr);
    auto visual = Tensor<double>::randn({1, 4, 4, 4}, rng).set_requires_grad(true);
    std::vector<Tensor<double>> leaves{visual};
    for (auto& [n, t] : ps) leaves.push_back(t);
    GradCheckCase c{"glam_block+global_tokens", 0, 0};
    Rng pick = rng.split(17);
    c.max_rel_err = detail::fd_run(
        [&]() {
          auto z = concat_globals(visual, bank.working(1, 4));
          auto o = block.forward(z);
          return mean_all(mul(o, o));
        },
        leaves, pick, 6, &c.coords);
    out.push_back(c);
  }
  {
    auto nlu = NluLayer<double>::init(3, 6, 4, 2, true, rng);
    ParamList<double> ps;
    nlu.collect(ps, "nlu");
    Rng wr = rng.split(18);
    detail::condition(ps, wr);
    auto skip = Tensor<double>::randn({1, 16, 3}, rng).set_requires_grad(true);
    auto low = Tensor<double>::randn({1, 4, 6}, rng).set_requires_grad(true);
    std::vector<Tensor<double>> leaves{skip, low};
    for (auto& [n, t] : ps) leaves.push_back(t);
    GradCheckCase c{"nlu", 0, 0};
    Rng pick = rng.split(19);
    c.max_rel_err = detail::fd_run(
        [&]() {
          auto o = nlu.forward(skip, low, 2, 2);
          return mean_all(mul(o, o));
        },
        leaves, pick, 8, &c.coords);
    out.push_back(c);
  }
  {
    ModelConfig cfg;
    cfg.img_h = cfg.img_w = 16;
    cfg.patch = 4;
    cfg.chans = 4;
    cfg.window = 2;
    cfg.ng = 2;
    cfg.classes = 5;
    cfg.heads = 2;
    cfg.depths = {1, 1};
    Rng mr = rng.split(20);
    auto model = SegModel<double>::build(cfg, mr);
    auto ps = model.params();
    Rng wr = rng.split(21);
    detail::condition(ps, wr, 0.15);
    Rng dr = rng.split(22);
    auto img = Tensor<double>::uniform({1, 16, 16, 3}, dr, 0.0, 1.0);
    std::vector<int> labels(16);
    for (std::size_t i = 0; i < labels.size(); ++i)
      labels[i] = static_cast<int>(i % cfg.classes);
    labels[5] = -1;
    std::vector<Tensor<double>> leaves;
    for (auto& [n, t] : ps) leaves.push_back(t);
    GradCheckCase c{"toy_model_loss", 0, 0};
    Rng pick = rng.split(23);
    c.max_rel_err = detail::fd_run(
        [&]() { return seg_loss(model.forward(img), labels, -1); }, leaves, pick, 3,
        &c.coords);
    out.push_back(c);
  }
  return out;
}

}  // namespace glam
