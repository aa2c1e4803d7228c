#pragma once

// Patch embedding, non-overlapping window partition/merge, and 2x2 patch
// merging. Token order between stages is always row-major over the patch
// grid; partition/merge reorder into window-major blocks and back.

#include <string>
#include <vector>

#include "glam/nn.hpp"

namespace glam {

// Visual tokens arranged as windows x patches, with enough bookkeeping to
// map (window, patch) back to grid coordinates.
template <typename T>
struct WindowedFeatureMap {
  Tensor<T> tokens;  // [B, N_r, N_p, C]
  int grid_h = 0;    // patch grid
  int grid_w = 0;
  int window = 0;  // M, with N_p = M^2
  int stage = 0;

  i64 num_windows() const { return tokens.dim(1); }
  i64 patches_per_window() const { return tokens.dim(2); }
  int windows_h() const { return grid_h / window; }
  int windows_w() const { return grid_w / window; }

  // Grid position of patch p inside window w.
  std::pair<int, int> patch_coords(i64 w, i64 p) const {
    int wr = static_cast<int>(w) / windows_w();
    int wc = static_cast<int>(w) % windows_w();
    int pr = static_cast<int>(p) / window;
    int pc = static_cast<int>(p) % window;
    return {wr * window + pr, wc * window + pc};
  }
};

// Token permutation taking row-major grid order to window-major order:
// entry t is the grid index of the t-th token in window order.
inline std::vector<i64> window_permutation(int grid_h, int grid_w, int m) {
  std::vector<i64> perm;
  perm.reserve(static_cast<std::size_t>(grid_h) * grid_w);
  for (int wr = 0; wr < grid_h / m; ++wr)
    for (int wc = 0; wc < grid_w / m; ++wc)
      for (int pr = 0; pr < m; ++pr)
        for (int pc = 0; pc < m; ++pc)
          perm.push_back(static_cast<i64>(wr * m + pr) * grid_w + (wc * m + pc));
  return perm;
}

inline std::vector<i64> invert_permutation(const std::vector<i64>& perm) {
  std::vector<i64> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[static_cast<std::size_t>(perm[i])] = static_cast<i64>(i);
  return inv;
}

template <typename T>
WindowedFeatureMap<T> window_partition(const Tensor<T>& tokens, int grid_h, int grid_w,
                                       int m, int stage = 0) {
  if (tokens.rank() != 3)
    throw ShapeError("window_partition expects [B, HW, C], got " +
                     shape_str(tokens.shape()));
  if (grid_h % m != 0 || grid_w % m != 0)
    throw ConfigError("window side " + std::to_string(m) + " does not divide grid " +
                      std::to_string(grid_h) + "x" + std::to_string(grid_w));
  if (tokens.dim(1) != static_cast<i64>(grid_h) * grid_w)
    throw ShapeError("token count " + std::to_string(tokens.dim(1)) +
                     " does not match grid " + std::to_string(grid_h) + "x" +
                     std::to_string(grid_w));
  i64 b = tokens.dim(0);
  i64 c = tokens.dim(2);
  i64 nr = static_cast<i64>(grid_h / m) * (grid_w / m);
  i64 np = static_cast<i64>(m) * m;
  auto perm = window_permutation(grid_h, grid_w, m);
  WindowedFeatureMap<T> wfm;
  wfm.tokens = reshape(index_select(tokens, 1, perm), {b, nr, np, c});
  wfm.grid_h = grid_h;
  wfm.grid_w = grid_w;
  wfm.window = m;
  wfm.stage = stage;
  return wfm;
}

template <typename T>
Tensor<T> window_merge(const WindowedFeatureMap<T>& wfm) {
  const Tensor<T>& t = wfm.tokens;
  if (t.rank() != 4)
    throw ContractError("window_merge expects [B, N_r, N_p, C], got " +
                        shape_str(t.shape()));
  i64 b = t.dim(0);
  i64 c = t.dim(3);
  i64 hw = static_cast<i64>(wfm.grid_h) * wfm.grid_w;
  if (t.dim(1) * t.dim(2) != hw ||
      t.dim(1) != static_cast<i64>(wfm.grid_h / wfm.window) * (wfm.grid_w / wfm.window))
    throw ContractError("window grid metadata inconsistent with tokens " +
                        shape_str(t.shape()));
  auto inv = invert_permutation(window_permutation(wfm.grid_h, wfm.grid_w, wfm.window));
  return index_select(reshape(t, {b, hw, c}), 1, inv);
}

// Learned patchification: p x p x 3 pixel blocks, flattened, linearly
// projected, plus a learned absolute positional table. This is the only
// place positional information enters the model.
template <typename T>
struct PatchEmbed {
  int patch = 0;
  int img_h = 0, img_w = 0;
  LinearLayer<T> proj;   // [p*p*3, C]
  Tensor<T> pos;         // [(H/p)*(W/p), C]
  std::vector<i64> gather;  // pixel gather map, [tokens * p * p * 3]

  static PatchEmbed init(int img_h, int img_w, int patch, i64 c, Rng& rng) {
    if (patch <= 0 || img_h % patch != 0 || img_w % patch != 0)
      throw ConfigError("image " + std::to_string(img_h) + "x" + std::to_string(img_w) +
                        " not divisible by patch " + std::to_string(patch) +
                        "; valid sizes are multiples of " + std::to_string(patch));
    PatchEmbed e;
    e.patch = patch;
    e.img_h = img_h;
    e.img_w = img_w;
    e.proj = LinearLayer<T>::init(static_cast<i64>(patch) * patch * 3, c, rng);
    i64 tokens = static_cast<i64>(img_h / patch) * (img_w / patch);
    e.pos = Tensor<T>::trunc_normal({tokens, c}, rng, 0.02).set_requires_grad(true);
    e.gather.reserve(static_cast<std::size_t>(tokens) * patch * patch * 3);
    int gw = img_w / patch;
    for (i64 t = 0; t < tokens; ++t) {
      int pr = static_cast<int>(t) / gw;
      int pc = static_cast<int>(t) % gw;
      for (int y = 0; y < patch; ++y)
        for (int x = 0; x < patch; ++x)
          for (int ch = 0; ch < 3; ++ch)
            e.gather.push_back(
                (static_cast<i64>(pr * patch + y) * img_w + (pc * patch + x)) * 3 + ch);
    }
    return e;
  }

  i64 num_tokens() const { return pos.dim(0); }

  Tensor<T> forward(const Tensor<T>& image) const {
    if (image.rank() != 4 || image.dim(1) != img_h || image.dim(2) != img_w ||
        image.dim(3) != 3)
      throw ConfigError("patch_embed expects [B, " + std::to_string(img_h) + ", " +
                        std::to_string(img_w) + ", 3], got " + shape_str(image.shape()));
    i64 b = image.dim(0);
    i64 tokens = num_tokens();
    i64 flat = static_cast<i64>(patch) * patch * 3;
    auto patches = reshape(
        index_select(reshape(image, {b, static_cast<i64>(img_h) * img_w * 3}), 1, gather),
        {b, tokens, flat});
    return add(proj.forward(patches), pos);
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    proj.collect(out, prefix + ".proj");
    out.emplace_back(prefix + ".pos", pos);
  }
};

// 2x2 space-to-depth downsampling with linear projection 4C -> 2C.
template <typename T>
struct PatchMerging {
  LinearLayer<T> reduce;  // [4C, 2C]

  static PatchMerging init(i64 c, Rng& rng) {
    PatchMerging m;
    m.reduce = LinearLayer<T>::init(4 * c, 2 * c, rng);
    return m;
  }

  // tokens: [B, HW, C] in row-major grid order; both sides must be even.
  Tensor<T> forward(const Tensor<T>& tokens, int grid_h, int grid_w) const {
    if (grid_h % 2 != 0 || grid_w % 2 != 0)
      throw ConfigError("patch_merging needs even grid sides, got " +
                        std::to_string(grid_h) + "x" + std::to_string(grid_w));
    if (tokens.dim(1) != static_cast<i64>(grid_h) * grid_w)
      throw ShapeError("token count " + std::to_string(tokens.dim(1)) +
                       " does not match grid " + std::to_string(grid_h) + "x" +
                       std::to_string(grid_w));
    i64 b = tokens.dim(0);
    i64 c = tokens.dim(2);
    std::vector<i64> order;
    order.reserve(static_cast<std::size_t>(grid_h) * grid_w);
    for (int r = 0; r < grid_h; r += 2)
      for (int col = 0; col < grid_w; col += 2)
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx)
            order.push_back(static_cast<i64>(r + dy) * grid_w + (col + dx));
    auto grouped = reshape(index_select(tokens, 1, order),
                           {b, static_cast<i64>(grid_h / 2) * (grid_w / 2), 4 * c});
    return reduce.forward(grouped);
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    reduce.collect(out, prefix + ".reduce");
  }
};

}  // namespace glam
