#pragma once

// Transformer building blocks: linear layers, multi-head self/cross
// attention with optional attention-probability capture, and the pre-norm
// transformer block (LN -> MSA -> residual, LN -> MLP -> residual).

#include <string>
#include <utility>
#include <vector>

#include "glam/tensor.hpp"

namespace glam {

template <typename T>
using ParamList = std::vector<std::pair<std::string, Tensor<T>>>;

// Head-averaged attention probabilities, exported as plain doubles so
// diagnostics never touch the autodiff graph.
struct AttnCapture {
  Shape shape;  // [..., n_q, n_kv]
  std::vector<double> probs;
};

template <typename T>
struct LinearLayer {
  Tensor<T> w;  // [in, out]
  Tensor<T> b;  // [out]

  static LinearLayer init(i64 in, i64 out, Rng& rng) {
    LinearLayer l;
    l.w = Tensor<T>::trunc_normal({in, out}, rng, 0.02).set_requires_grad(true);
    l.b = Tensor<T>::zeros({out}).set_requires_grad(true);
    return l;
  }

  i64 in_features() const { return w.dim(0); }
  i64 out_features() const { return w.dim(1); }

  Tensor<T> forward(const Tensor<T>& x) const { return add(matmul(x, w), b); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".w", w);
    out.emplace_back(prefix + ".b", b);
  }
};

template <typename T>
struct LnParams {
  Tensor<T> gamma, beta;

  static LnParams init(i64 c) {
    LnParams p;
    p.gamma = Tensor<T>::full({c}, T(1)).set_requires_grad(true);
    p.beta = Tensor<T>::zeros({c}).set_requires_grad(true);
    return p;
  }

  Tensor<T> forward(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }
};

template <typename T>
struct MsaLayer {
  int heads = 1;
  LinearLayer<T> wq, wk, wv, wo;

  static MsaLayer init(i64 c, int heads, Rng& rng) {
    if (heads <= 0 || c % heads != 0)
      throw ConfigError("attention channels " + std::to_string(c) +
                        " not divisible by " + std::to_string(heads) + " heads");
    MsaLayer m;
    m.heads = heads;
    m.wq = LinearLayer<T>::init(c, c, rng);
    m.wk = LinearLayer<T>::init(c, c, rng);
    m.wv = LinearLayer<T>::init(c, c, rng);
    m.wo = LinearLayer<T>::init(c, c, rng);
    return m;
  }

  i64 channels() const { return wq.in_features(); }

  // q_src: [..., n_q, C], kv_src: [..., n_kv, C] with identical leading
  // dims. Per-head softmax(q k^T / sqrt(d)) v, heads concatenated through
  // the output projection.
  Tensor<T> attention(const Tensor<T>& q_src, const Tensor<T>& kv_src,
                      AttnCapture* cap = nullptr) const {
    i64 c = channels();
    if (q_src.dim(-1) != c || kv_src.dim(-1) != c)
      throw ConfigError("attention: channel dims " + shape_str(q_src.shape()) + " / " +
                        shape_str(kv_src.shape()) + " do not match layer width " +
                        std::to_string(c));
    i64 d = c / heads;
    T inv_sqrt_d = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));

    Tensor<T> q = wq.forward(q_src);
    Tensor<T> k = wk.forward(kv_src);
    Tensor<T> v = wv.forward(kv_src);

    std::vector<Tensor<T>> head_outs;
    head_outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      Tensor<T> qh = scale(slice(q, -1, h * d, d), inv_sqrt_d);
      Tensor<T> kh = slice(k, -1, h * d, d);
      Tensor<T> vh = slice(v, -1, h * d, d);
      Tensor<T> probs = softmax_rows(matmul(qh, transpose_last2(kh)));
      if (cap) {
        const auto& pv = probs.values();
        if (cap->probs.empty()) {
          cap->shape = probs.shape();
          cap->probs.assign(pv.size(), 0.0);
        }
        for (std::size_t i = 0; i < pv.size(); ++i)
          cap->probs[i] += static_cast<double>(pv[i]);
      }
      head_outs.push_back(matmul(probs, vh));
    }
    if (cap)
      for (auto& p : cap->probs) p /= static_cast<double>(heads);
    return wo.forward(concat(head_outs, -1));
  }

  Tensor<T> self_attention(const Tensor<T>& z, AttnCapture* cap = nullptr) const {
    return attention(z, z, cap);
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    wq.collect(out, prefix + ".wq");
    wk.collect(out, prefix + ".wk");
    wv.collect(out, prefix + ".wv");
    wo.collect(out, prefix + ".wo");
  }
};

// Pre-norm transformer block, GELU MLP with hidden ratio 4.
template <typename T>
struct TransformerBlock {
  LnParams<T> norm1, norm2;
  MsaLayer<T> msa;
  LinearLayer<T> fc1, fc2;

  static TransformerBlock init(i64 c, int heads, Rng& rng) {
    TransformerBlock b;
    b.norm1 = LnParams<T>::init(c);
    b.norm2 = LnParams<T>::init(c);
    b.msa = MsaLayer<T>::init(c, heads, rng);
    b.fc1 = LinearLayer<T>::init(c, 4 * c, rng);
    b.fc2 = LinearLayer<T>::init(4 * c, c, rng);
    return b;
  }

  Tensor<T> forward(const Tensor<T>& z, AttnCapture* cap = nullptr) const {
    Tensor<T> h = add(z, msa.self_attention(norm1.forward(z), cap));
    Tensor<T> m = fc2.forward(gelu(fc1.forward(norm2.forward(h))));
    return add(h, m);
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    norm1.collect(out, prefix + ".norm1");
    norm2.collect(out, prefix + ".norm2");
    msa.collect(out, prefix + ".msa");
    fc1.collect(out, prefix + ".fc1");
    fc2.collect(out, prefix + ".fc2");
  }
};

}  // namespace glam
