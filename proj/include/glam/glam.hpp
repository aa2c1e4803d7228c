#pragma once

// The GLAM transformer: learned global tokens concatenated per window, a
// window transformer step (W-MSA) followed by a global transformer step
// (G-MSA) over the flattened global sequence, and the algebra that turns
// the captured attention blocks into the induced full-range attention of a
// global token.

#include <optional>
#include <string>
#include <vector>

#include "glam/nn.hpp"

namespace glam {

// Learned N_g x C global-token parameter of one stage. Working copies are
// identical across windows before the first block; they diverge after it.
template <typename T>
struct GlobalTokenBank {
  Tensor<T> init_tokens;  // [N_g, C]

  static GlobalTokenBank init(i64 ng, i64 c, Rng& rng) {
    GlobalTokenBank b;
    b.init_tokens = Tensor<T>::trunc_normal({ng, c}, rng, 0.02).set_requires_grad(true);
    return b;
  }

  i64 ng() const { return init_tokens.dim(0); }

  // [B, N_r, N_g, C] copies; gradients flow back into the shared parameter.
  Tensor<T> working(i64 b, i64 nr) const { return expand_leading(init_tokens, {b, nr}); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".tokens", init_tokens);
  }
};

// Captured attention of one GLAM block, in double precision and detached
// from the graph. a is the per-window matrix [N_r, S, S] with S = N_g+N_p
// (globals occupy rows/cols 0..N_g-1); b_mat is the global matrix
// [(N_r*N_g), (N_r*N_g)].
struct AttentionRecord {
  int nr = 0, ng = 0, np = 0;
  bool bare = false;
  bool head_averaged = false;
  std::vector<double> a;
  std::vector<double> b_mat;

  i64 seq() const { return ng + np; }
  double a_at(i64 r, i64 i, i64 j) const {
    return a[static_cast<std::size_t>((r * seq() + i) * seq() + j)];
  }
  double b_at(i64 i, i64 j) const {
    return b_mat[static_cast<std::size_t>(i * static_cast<i64>(nr) * ng + j)];
  }
  // Attention coefficient from global token k of window r to global token j
  // of window n.
  double b_block(i64 r, i64 k, i64 n, i64 j) const {
    return b_at(r * ng + k, n * ng + j);
  }
  bool has_global() const { return !b_mat.empty(); }
};

// One GLAM-transformer block. The window step runs a full pre-norm
// transformer sub-block on each window's (globals || visual) sequence; the
// global step runs one on the flattened global sequence. Disabling the
// global step (the no-G-MSA ablation) drops that sub-block entirely.
template <typename T>
struct GlamBlock {
  i64 ng = 0;
  bool gmsa_enabled = true;
  TransformerBlock<T> w_block;
  std::optional<TransformerBlock<T>> g_block;

  static GlamBlock init(i64 c, int heads, i64 ng, bool gmsa, Rng& rng) {
    GlamBlock b;
    b.ng = ng;
    b.gmsa_enabled = gmsa && ng > 0;
    b.w_block = TransformerBlock<T>::init(c, heads, rng);
    if (b.gmsa_enabled) b.g_block = TransformerBlock<T>::init(c, heads, rng);
    return b;
  }

  // z: [B, N_r, N_g+N_p, C] -> same shape. Captures, when requested, the
  // head-averaged attention of batch element 0.
  Tensor<T> forward(const Tensor<T>& z, AttentionRecord* rec = nullptr) const {
    if (z.rank() != 4)
      throw ShapeError("glam_block expects [B, N_r, S, C], got " + shape_str(z.shape()));
    i64 b = z.dim(0);
    i64 nr = z.dim(1);
    i64 s = z.dim(2);
    i64 c = z.dim(3);
    i64 np = s - ng;
    if (np <= 0)
      throw ShapeError("sequence length " + std::to_string(s) +
                       " too short for " + std::to_string(ng) + " global tokens");

    AttnCapture wcap;
    Tensor<T> zhat = w_block.forward(z, rec ? &wcap : nullptr);
    if (rec) {
      rec->nr = static_cast<int>(nr);
      rec->ng = static_cast<int>(ng);
      rec->np = static_cast<int>(np);
      rec->bare = false;
      rec->head_averaged = true;
      rec->a.assign(wcap.probs.begin(), wcap.probs.begin() + nr * s * s);
      rec->b_mat.clear();
    }
    if (!gmsa_enabled || ng == 0) return zhat;

    Tensor<T> ghat = slice(zhat, 2, 0, ng);
    Tensor<T> what = slice(zhat, 2, ng, np);
    AttnCapture gcap;
    Tensor<T> gflat = reshape(ghat, {b, nr * ng, c});
    Tensor<T> gout = g_block->forward(gflat, rec ? &gcap : nullptr);
    if (rec)
      rec->b_mat.assign(gcap.probs.begin(), gcap.probs.begin() + (nr * ng) * (nr * ng));
    return concat(std::vector<Tensor<T>>{reshape(gout, {b, nr, ng, c}), what}, 2);
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    w_block.collect(out, prefix + ".w");
    if (g_block) g_block->collect(out, prefix + ".g");
  }
};

// Globals occupy sequence slots 0..N_g-1, visual tokens the rest.
template <typename T>
Tensor<T> concat_globals(const Tensor<T>& visual, const Tensor<T>& globals) {
  if (!globals.defined() || globals.numel() == 0) return visual;
  if (visual.dim(-1) != globals.dim(-1))
    throw ConfigError("concat_globals: channel dims differ, " +
                      shape_str(visual.shape()) + " vs " + shape_str(globals.shape()));
  return concat(std::vector<Tensor<T>>{globals, visual}, -2);
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_globals(const Tensor<T>& z, i64 ng) {
  i64 s = z.dim(-2);
  return {slice(z, -2, 0, ng), slice(z, -2, ng, s - ng)};
}

// ---- bare diagnostic mode ---------------------------------------------------
//
// Single head, identity value and output projections, no LN/MLP/residual:
// the two attention applications become plain row-stochastic matrix
// products, which makes the global-embedding composition and the induced
// attention literally checkable. Training never uses this mode.

template <typename T>
struct BareGlamParams {
  Tensor<T> wq_w, wk_w;  // window-step query/key projections [C, C]
  Tensor<T> wq_g, wk_g;  // global-step projections

  static BareGlamParams init(i64 c, Rng& rng) {
    double s = 1.0 / std::sqrt(static_cast<double>(c));
    BareGlamParams p;
    p.wq_w = Tensor<T>::randn({c, c}, rng, s);
    p.wk_w = Tensor<T>::randn({c, c}, rng, s);
    p.wq_g = Tensor<T>::randn({c, c}, rng, s);
    p.wk_g = Tensor<T>::randn({c, c}, rng, s);
    return p;
  }
};

template <typename T>
struct BareGlamResult {
  Tensor<T> g_out;  // [N_r, N_g, C]
  Tensor<T> w_hat;  // [N_r, N_p, C]
};

// g: [N_r, N_g, C], w: [N_r, N_p, C].
template <typename T>
BareGlamResult<T> bare_glam_forward(const BareGlamParams<T>& p, const Tensor<T>& g,
                                    const Tensor<T>& w, AttentionRecord* rec = nullptr) {
  if (g.rank() != 3 || w.rank() != 3 || g.dim(0) != w.dim(0) || g.dim(2) != w.dim(2))
    throw ShapeError("bare_glam_forward: incompatible shapes " + shape_str(g.shape()) +
                     " / " + shape_str(w.shape()));
  i64 nr = g.dim(0);
  i64 ng = g.dim(1);
  i64 np = w.dim(1);
  i64 c = g.dim(2);
  T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(c)));

  Tensor<T> z = concat(std::vector<Tensor<T>>{g, w}, 1);  // [N_r, S, C]
  Tensor<T> a = softmax_rows(
      matmul(scale(matmul(z, p.wq_w), inv), transpose_last2(matmul(z, p.wk_w))));
  Tensor<T> zhat = matmul(a, z);

  Tensor<T> gflat = reshape(slice(zhat, 1, 0, ng), {nr * ng, c});
  Tensor<T> b = softmax_rows(matmul(scale(matmul(gflat, p.wq_g), inv),
                                    transpose_last2(matmul(gflat, p.wk_g))));
  Tensor<T> gout = matmul(b, gflat);

  if (rec) {
    rec->nr = static_cast<int>(nr);
    rec->ng = static_cast<int>(ng);
    rec->np = static_cast<int>(np);
    rec->bare = true;
    rec->head_averaged = false;
    rec->a.assign(a.values().begin(), a.values().end());
    rec->b_mat.assign(b.values().begin(), b.values().end());
  }
  BareGlamResult<T> out;
  out.g_out = reshape(gout, {nr, ng, c});
  out.w_hat = slice(zhat, 1, ng, np);
  return out;
}

// Explicit composition of the captured blocks:
//   g_r = sum_n B_rn (A_n,gg g_n + A_n,gw w_n)
// computed by plain index loops, independent of the two-step forward it is
// checked against. Returns [N_r, N_g, C] values.
inline std::vector<double> bare_global_embedding(const AttentionRecord& rec,
                                                 const Tensor<double>& g_prev,
                                                 const Tensor<double>& w_prev) {
  if (!rec.bare)
    throw ContractError("bare_global_embedding requires a bare-mode record");
  i64 nr = rec.nr, ng = rec.ng, np = rec.np;
  i64 c = g_prev.dim(2);
  if (g_prev.dim(0) != nr || g_prev.dim(1) != ng || w_prev.dim(0) != nr ||
      w_prev.dim(1) != np)
    throw ShapeError("bare_global_embedding: token shapes do not match record");

  const auto& gv = g_prev.values();
  const auto& wv = w_prev.values();

  // Eq.-(4) step: per-window embeddings A_n,gg g_n + A_n,gw w_n.
  std::vector<double> ghat(static_cast<std::size_t>(nr * ng * c), 0.0);
  for (i64 n = 0; n < nr; ++n)
    for (i64 j = 0; j < ng; ++j)
      for (i64 ch = 0; ch < c; ++ch) {
        double acc = 0;
        for (i64 i = 0; i < ng; ++i)
          acc += rec.a_at(n, j, i) * gv[static_cast<std::size_t>((n * ng + i) * c + ch)];
        for (i64 i = 0; i < np; ++i)
          acc += rec.a_at(n, j, ng + i) *
                 wv[static_cast<std::size_t>((n * np + i) * c + ch)];
        ghat[static_cast<std::size_t>((n * ng + j) * c + ch)] = acc;
      }

  // Eq.-(5) step: mix through the global attention matrix.
  std::vector<double> out(static_cast<std::size_t>(nr * ng * c), 0.0);
  for (i64 r = 0; r < nr; ++r)
    for (i64 k = 0; k < ng; ++k)
      for (i64 ch = 0; ch < c; ++ch) {
        double acc = 0;
        for (i64 n = 0; n < nr; ++n)
          for (i64 j = 0; j < ng; ++j)
            acc += rec.b_block(r, k, n, j) *
                   ghat[static_cast<std::size_t>((n * ng + j) * c + ch)];
        out[static_cast<std::size_t>((r * ng + k) * c + ch)] = acc;
      }
  return out;
}

// Induced full-range attention of global token k in window r: the weight it
// places on visual token i of window r' is sum_j b_{k,r,j,r'} a_{j,r',i+N_g},
// plus a scalar mass routed through previous-step global tokens. The two
// masses sum to exactly one because every row of A and B is stochastic.
struct InducedAttention {
  int k = 0, r = 0;
  int nr = 0, np = 0;
  std::vector<double> patch_weights;  // [N_r * N_p], window-major
  double patch_mass = 0;
  double global_mass = 0;

  double weight(i64 window, i64 patch) const {
    return patch_weights[static_cast<std::size_t>(window * np + patch)];
  }
};

// Composition without the bare-mode requirement; used for diagnostics on
// head-averaged records from real models as well.
inline InducedAttention compose_induced_attention(const AttentionRecord& rec, i64 k,
                                                  i64 r) {
  if (k < 0 || k >= rec.ng)
    throw IndexError("global token index " + std::to_string(k) + " out of range [0, " +
                     std::to_string(rec.ng) + ")");
  if (r < 0 || r >= rec.nr)
    throw IndexError("window index " + std::to_string(r) + " out of range [0, " +
                     std::to_string(rec.nr) + ")");
  if (!rec.has_global())
    throw ContractError("record has no global attention matrix (G-MSA disabled?)");

  i64 nr = rec.nr, ng = rec.ng, np = rec.np;
  InducedAttention ind;
  ind.k = static_cast<int>(k);
  ind.r = static_cast<int>(r);
  ind.nr = static_cast<int>(nr);
  ind.np = static_cast<int>(np);
  ind.patch_weights.assign(static_cast<std::size_t>(nr * np), 0.0);
  for (i64 rp = 0; rp < nr; ++rp) {
    for (i64 j = 0; j < ng; ++j) {
      double bkj = rec.b_block(r, k, rp, j);
      for (i64 i = 0; i < np; ++i)
        ind.patch_weights[static_cast<std::size_t>(rp * np + i)] +=
            bkj * rec.a_at(rp, j, ng + i);
      for (i64 i = 0; i < ng; ++i) ind.global_mass += bkj * rec.a_at(rp, j, i);
    }
  }
  for (double w : ind.patch_weights) ind.patch_mass += w;
  return ind;
}

inline InducedAttention induced_attention(const AttentionRecord& rec, i64 k, i64 r) {
  if (!rec.bare)
    throw ContractError("induced_attention requires a bare-mode record");
  return compose_induced_attention(rec, k, r);
}

}  // namespace glam
