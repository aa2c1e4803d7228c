#pragma once

// Non-Local Upsampling: queries come from the skip connection (fine grid,
// 4n tokens), keys and values from the low-resolution semantic features
// (n tokens), attention computed over the full low-res token set. An
// optional residual adds the nearest-neighbor-upsampled, channel-projected
// low-res features.

#include <string>
#include <vector>

#include "glam/nn.hpp"

namespace glam {

// Coarse-token index for each fine-grid position, row-major.
inline std::vector<i64> nn_upsample_indices(int low_h, int low_w) {
  std::vector<i64> idx;
  idx.reserve(static_cast<std::size_t>(4) * low_h * low_w);
  for (int r = 0; r < 2 * low_h; ++r)
    for (int c = 0; c < 2 * low_w; ++c)
      idx.push_back(static_cast<i64>(r / 2) * low_w + (c / 2));
  return idx;
}

template <typename T>
struct NluLayer {
  LinearLayer<T> q_embed;   // C_skip -> C
  LinearLayer<T> kv_embed;  // C_low  -> C
  MsaLayer<T> msa;          // cross attention at width C
  LinearLayer<T> out_proj;  // C -> C
  LinearLayer<T> res_proj;  // C_low -> C, residual path
  bool residual = true;

  static NluLayer init(i64 c_skip, i64 c_low, i64 c, int heads, bool residual,
                       Rng& rng) {
    NluLayer n;
    n.q_embed = LinearLayer<T>::init(c_skip, c, rng);
    n.kv_embed = LinearLayer<T>::init(c_low, c, rng);
    n.msa = MsaLayer<T>::init(c, heads, rng);
    n.out_proj = LinearLayer<T>::init(c, c, rng);
    n.res_proj = LinearLayer<T>::init(c_low, c, rng);
    n.residual = residual;
    return n;
  }

  // skip: [B, 4n, C_skip], low: [B, n, C_low] on grid low_h x low_w.
  Tensor<T> forward(const Tensor<T>& skip, const Tensor<T>& low, int low_h, int low_w,
                    AttnCapture* cap = nullptr) const {
    if (low.dim(1) != static_cast<i64>(low_h) * low_w)
      throw ShapeError("nlu: low tokens " + std::to_string(low.dim(1)) +
                       " do not match grid " + std::to_string(low_h) + "x" +
                       std::to_string(low_w));
    if (skip.dim(1) != 4 * low.dim(1))
      throw ConfigError("nlu: skip token count " + std::to_string(skip.dim(1)) +
                        " must be exactly 4x low count " + std::to_string(low.dim(1)));
    Tensor<T> q = q_embed.forward(skip);
    Tensor<T> kv = kv_embed.forward(low);
    Tensor<T> out = out_proj.forward(msa.attention(q, kv, cap));
    if (residual) {
      auto idx = nn_upsample_indices(low_h, low_w);
      out = add(out, index_select(res_proj.forward(low), 1, idx));
    }
    return out;
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    q_embed.collect(out, prefix + ".q_embed");
    kv_embed.collect(out, prefix + ".kv_embed");
    msa.collect(out, prefix + ".msa");
    out_proj.collect(out, prefix + ".out_proj");
    res_proj.collect(out, prefix + ".res_proj");
  }
};

}  // namespace glam
