#pragma once

// Analytic parameter and forward-FLOP accounting (exact integers, checked
// against live enumeration and an instrumented op counter), plus attention
// map export as CSV / PGM heatmap / metadata sidecar.
//
// FLOP conventions (multiply-add = 2): matmul 2mkn, elementwise 1 per
// element, gelu 6, softmax 5 and layer norm 8 per element; data movement is
// free. Counts are per forward pass at batch 1; the loss is not included.

#include <string>
#include <vector>

#include "glam/glam.hpp"
#include "glam/model.hpp"
#include "glam/serialize.hpp"

namespace glam {

namespace cost {

inline i64 params_linear(i64 cin, i64 cout) { return cin * cout + cout; }
inline i64 params_block(i64 c) { return 12 * c * c + 13 * c; }

inline u64 flops_linear(i64 rows, i64 cin, i64 cout) {
  return 2ull * static_cast<u64>(rows) * cin * cout + static_cast<u64>(rows) * cout;
}

// The part of attention that is quadratic in sequence length: q k^T, the
// row softmax, and probs * v. This is what windowing buys back.
inline u64 flops_attention_quadratic(i64 lead, i64 n, i64 c, int heads) {
  return 4ull * lead * n * n * c + 5ull * heads * lead * n * n;
}

inline u64 flops_msa_self(i64 lead, i64 n, i64 c, int heads) {
  u64 f = 0;
  f += 4 * flops_linear(lead * n, c, c);              // q, k, v, o projections
  f += static_cast<u64>(lead) * n * c;                // query scaling
  f += flops_attention_quadratic(lead, n, c, heads);
  return f;
}

inline u64 flops_msa_cross(i64 lead, i64 nq, i64 nkv, i64 c, int heads) {
  u64 f = 0;
  f += flops_linear(lead * nq, c, c);                 // q
  f += 2 * flops_linear(lead * nkv, c, c);            // k, v
  f += flops_linear(lead * nq, c, c);                 // o
  f += static_cast<u64>(lead) * nq * c;               // query scaling
  f += 4ull * lead * nq * nkv * c;
  f += 5ull * heads * lead * nq * nkv;
  return f;
}

inline u64 flops_block(i64 lead, i64 n, i64 c, int heads) {
  u64 f = 0;
  f += 8ull * lead * n * c;  // norm1
  f += flops_msa_self(lead, n, c, heads);
  f += static_cast<u64>(lead) * n * c;  // residual
  f += 8ull * lead * n * c;             // norm2
  f += flops_linear(lead * n, c, 4 * c);
  f += 6ull * lead * n * 4 * c;  // gelu
  f += flops_linear(lead * n, 4 * c, c);
  f += static_cast<u64>(lead) * n * c;  // residual
  return f;
}

}  // namespace cost

struct CostRow {
  std::string name;
  i64 params = 0;
  u64 flops = 0;
};

// Per-stage quadratic attention cost against a hypothetical full-image MSA
// over all N_r * N_p tokens (projections are linear in token count and
// excluded from the comparison).
struct AttentionCostRow {
  std::string stage;
  u64 windowed_glam = 0;  // W-MSA (+ G-MSA) quadratic flops, all blocks
  u64 full_equiv = 0;     // same-depth full-attention quadratic flops
};

struct CostReport {
  std::vector<CostRow> rows;
  std::vector<AttentionCostRow> attention;
  i64 total_params = 0;
  u64 total_flops = 0;

  std::string to_csv() const {
    std::string out = "module,params,flops\n";
    for (const auto& r : rows)
      out += r.name + "," + std::to_string(r.params) + "," + std::to_string(r.flops) +
             "\n";
    out += "total," + std::to_string(total_params) + "," + std::to_string(total_flops) +
           "\n";
    for (const auto& a : attention)
      out += a.stage + ".full_attention_equiv,0," + std::to_string(a.full_equiv) + "\n";
    return out;
  }
};

namespace detail {

struct StageCost {
  i64 params = 0;
  u64 flops = 0;
  u64 attn_flops = 0;       // MSA sub-modules only
  u64 full_attn_flops = 0;  // hypothetical unwindowed MSA
};

inline StageCost stage_cost(const ModelConfig& cfg, int s) {
  StageCost out;
  i64 c = cfg.stage_chans(s);
  int m = cfg.stage_heads(s);
  i64 nr = static_cast<i64>(cfg.grid_h(s) / cfg.window) * (cfg.grid_w(s) / cfg.window);
  i64 np = static_cast<i64>(cfg.window) * cfg.window;
  i64 ng = cfg.stage_glam(s) ? cfg.ng : 0;
  i64 seq = ng + np;
  bool gmsa = cfg.gmsa && ng > 0;
  int depth = cfg.depths[static_cast<std::size_t>(s)];

  out.params = (ng > 0 ? ng * c : 0);  // global token bank
  for (int b = 0; b < depth; ++b) {
    out.params += cost::params_block(c) + (gmsa ? cost::params_block(c) : 0);
    out.flops += cost::flops_block(nr, seq, c, m);
    out.attn_flops += cost::flops_attention_quadratic(nr, seq, c, m);
    if (gmsa) {
      out.flops += cost::flops_block(1, nr * ng, c, m);
      out.attn_flops += cost::flops_attention_quadratic(1, nr * ng, c, m);
    }
    out.full_attn_flops += cost::flops_attention_quadratic(1, nr * np, c, m);
  }
  return out;
}

}  // namespace detail

// Closed-form parameter and forward-FLOP accounting for a config, exactly
// matching SegModel::build / SegModel::forward at batch 1.
inline CostReport analyze_cost(const ModelConfig& cfg) {
  cfg.validate();
  CostReport rep;
  auto push = [&](const std::string& name, i64 params, u64 flops) {
    rep.rows.push_back({name, params, flops});
    rep.total_params += params;
    rep.total_flops += flops;
  };

  int s_count = cfg.n_stages();
  i64 n0 = static_cast<i64>(cfg.grid_h(0)) * cfg.grid_w(0);
  // Patch embedding: projection of p*p*3 pixels plus the positional table.
  {
    i64 flat = static_cast<i64>(cfg.patch) * cfg.patch * 3;
    i64 params = cost::params_linear(flat, cfg.chans) + n0 * cfg.chans;
    u64 flops = cost::flops_linear(n0, flat, cfg.chans) + static_cast<u64>(n0) * cfg.chans;
    push("embed", params, flops);
  }
  for (int s = 0; s < s_count; ++s) {
    auto sc = detail::stage_cost(cfg, s);
    push("enc" + std::to_string(s), sc.params, sc.flops);
    rep.attention.push_back({"enc" + std::to_string(s), sc.attn_flops, sc.full_attn_flops});
    if (s + 1 < s_count) {
      i64 c = cfg.stage_chans(s);
      i64 rows = static_cast<i64>(cfg.grid_h(s)) * cfg.grid_w(s) / 4;
      push("merge" + std::to_string(s), cost::params_linear(4 * c, 2 * c),
           cost::flops_linear(rows, 4 * c, 2 * c));
    }
  }
  for (int s = s_count - 2; s >= 0; --s) {
    i64 cs = cfg.stage_chans(s);
    i64 cl = cfg.stage_chans(s + 1);
    int m = cfg.stage_heads(s);
    i64 n_low = static_cast<i64>(cfg.grid_h(s + 1)) * cfg.grid_w(s + 1);
    if (cfg.nlu) {
      i64 params = cost::params_linear(cs, cs) + cost::params_linear(cl, cs) +
                   4 * cost::params_linear(cs, cs) + cost::params_linear(cs, cs) +
                   cost::params_linear(cl, cs);
      u64 flops = cost::flops_linear(4 * n_low, cs, cs)   // q_embed
                  + cost::flops_linear(n_low, cl, cs)     // kv_embed
                  + cost::flops_msa_cross(1, 4 * n_low, n_low, cs, m)
                  + cost::flops_linear(4 * n_low, cs, cs)  // out_proj
                  + cost::flops_linear(n_low, cl, cs)      // res_proj
                  + 4ull * n_low * cs;                     // residual add
      push("nlu" + std::to_string(s), params, flops);
    } else {
      push("expand" + std::to_string(s), cost::params_linear(cl, cs),
           cost::flops_linear(n_low, cl, cs));
    }
    if (cfg.decoder_symmetric) {
      auto sc = detail::stage_cost(cfg, s);
      push("dec" + std::to_string(s), sc.params, sc.flops);
      rep.attention.push_back(
          {"dec" + std::to_string(s), sc.attn_flops, sc.full_attn_flops});
    }
  }
  push("head", cost::params_linear(cfg.chans, cfg.classes),
       cost::flops_linear(n0, cfg.chans, cfg.classes));
  return rep;
}

inline CostReport count_params(const ModelConfig& cfg) { return analyze_cost(cfg); }
inline CostReport count_flops(const ModelConfig& cfg) { return analyze_cost(cfg); }

// ---- attention export -------------------------------------------------------

namespace detail {

inline void write_text_file(const std::string& path, const std::string& content) {
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  if (std::fwrite(content.data(), 1, content.size(), f.get()) != content.size())
    throw IoError("short write to '" + path + "'");
}

}  // namespace detail

// 8-bit binary PGM, min-max normalized; a flat map renders as all zeros.
inline void write_pgm(const std::string& path, const std::vector<double>& values,
                      int height, int width, double* out_min = nullptr,
                      double* out_max = nullptr) {
  if (static_cast<std::size_t>(height) * width != values.size())
    throw ShapeError("pgm: " + std::to_string(values.size()) + " values for " +
                     std::to_string(height) + "x" + std::to_string(width));
  double lo = values[0], hi = values[0];
  for (double v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (out_min) *out_min = lo;
  if (out_max) *out_max = hi;
  std::string header = "P5\n" + std::to_string(width) + " " + std::to_string(height) +
                       "\n255\n";
  std::string body(values.size(), '\0');
  double span = hi - lo;
  for (std::size_t i = 0; i < values.size(); ++i) {
    int q = span > 0 ? static_cast<int>(std::lround((values[i] - lo) / span * 255.0)) : 0;
    body[i] = static_cast<char>(static_cast<unsigned char>(q));
  }
  detail::write_text_file(path, header + body);
}

struct AttentionExport {
  std::string csv_path, pgm_path, meta_path;
  std::vector<double> grid;  // [grid_h * grid_w] spatial weights
  double patch_mass = 0, global_mass = 0;
};

namespace detail {

// Spreads window-major patch weights onto the spatial grid.
inline std::vector<double> weights_to_grid(const std::vector<double>& w, int grid_h,
                                           int grid_w, int window) {
  std::vector<double> grid(static_cast<std::size_t>(grid_h) * grid_w, 0.0);
  int ww = grid_w / window;
  i64 np = static_cast<i64>(window) * window;
  for (std::size_t t = 0; t < w.size(); ++t) {
    i64 win = static_cast<i64>(t) / np;
    i64 p = static_cast<i64>(t) % np;
    int row = static_cast<int>(win) / ww * window + static_cast<int>(p) / window;
    int col = static_cast<int>(win) % ww * window + static_cast<int>(p) % window;
    grid[static_cast<std::size_t>(row) * grid_w + col] = w[t];
  }
  return grid;
}

inline std::string attention_csv(const std::vector<double>& w, int grid_h, int grid_w,
                                 int window) {
  std::string csv = "win_index,patch_index,row,col,weight\n";
  int ww = grid_w / window;
  i64 np = static_cast<i64>(window) * window;
  for (std::size_t t = 0; t < w.size(); ++t) {
    i64 win = static_cast<i64>(t) / np;
    i64 p = static_cast<i64>(t) % np;
    int row = static_cast<int>(win) / ww * window + static_cast<int>(p) / window;
    int col = static_cast<int>(win) % ww * window + static_cast<int>(p) % window;
    csv += std::to_string(win) + "," + std::to_string(p) + "," + std::to_string(row) +
           "," + std::to_string(col) + "," + fmt_g(w[t]) + "\n";
  }
  return csv;
}

}  // namespace detail

// Induced attention of global token (k, r) at a capture stage, exported as
// raw CSV weights, a PGM heatmap at the stage's resolution, and a metadata
// sidecar of `key: value` lines.
template <typename T>
AttentionExport export_attention(const SegModel<T>& model, const Tensor<T>& image,
                                 int stage, i64 k, i64 r, const std::string& out_dir,
                                 const std::string& base_name) {
  CaptureRequest cap;
  cap.stage = stage;
  model.forward(image, &cap);
  const AttentionRecord& rec = cap.record;
  auto ind = compose_induced_attention(rec, k, r);

  AttentionExport ex;
  ex.patch_mass = ind.patch_mass;
  ex.global_mass = ind.global_mass;
  ex.grid = detail::weights_to_grid(ind.patch_weights, cap.grid_h, cap.grid_w,
                                    cap.window);
  ex.csv_path = out_dir + "/" + base_name + ".csv";
  ex.pgm_path = out_dir + "/" + base_name + ".pgm";
  ex.meta_path = out_dir + "/" + base_name + ".meta";

  detail::write_text_file(
      ex.csv_path,
      detail::attention_csv(ind.patch_weights, cap.grid_h, cap.grid_w, cap.window));
  double lo = 0, hi = 0;
  write_pgm(ex.pgm_path, ex.grid, cap.grid_h, cap.grid_w, &lo, &hi);
  std::string meta;
  meta += "mode: global_token\n";
  meta += "stage: " + std::to_string(stage) + "\n";
  meta += "token_k: " + std::to_string(k) + "\n";
  meta += "window_r: " + std::to_string(r) + "\n";
  meta += "nr: " + std::to_string(rec.nr) + "\n";
  meta += "ng: " + std::to_string(rec.ng) + "\n";
  meta += "np: " + std::to_string(rec.np) + "\n";
  meta += "grid_h: " + std::to_string(cap.grid_h) + "\n";
  meta += "grid_w: " + std::to_string(cap.grid_w) + "\n";
  meta += "window: " + std::to_string(cap.window) + "\n";
  meta += std::string("head_averaged: ") + (rec.head_averaged ? "true" : "false") + "\n";
  meta += std::string("bare: ") + (rec.bare ? "true" : "false") + "\n";
  meta += "patch_mass: " + fmt_g(ind.patch_mass, 12) + "\n";
  meta += "global_mass: " + fmt_g(ind.global_mass, 12) + "\n";
  meta += "norm_min: " + fmt_g(lo, 12) + "\n";
  meta += "norm_max: " + fmt_g(hi, 12) + "\n";
  detail::write_text_file(ex.meta_path, meta);
  return ex;
}

// W-MSA attention row of visual patch (i, r): weights over its own window's
// patches (other windows are zero by construction), with the mass placed on
// global tokens recorded in the sidecar.
template <typename T>
AttentionExport export_patch_attention(const SegModel<T>& model, const Tensor<T>& image,
                                       int stage, i64 patch, i64 r,
                                       const std::string& out_dir,
                                       const std::string& base_name) {
  CaptureRequest cap;
  cap.stage = stage;
  model.forward(image, &cap);
  const AttentionRecord& rec = cap.record;
  if (patch < 0 || patch >= rec.np)
    throw IndexError("patch index " + std::to_string(patch) + " out of range [0, " +
                     std::to_string(rec.np) + ")");
  if (r < 0 || r >= rec.nr)
    throw IndexError("window index " + std::to_string(r) + " out of range [0, " +
                     std::to_string(rec.nr) + ")");

  std::vector<double> weights(static_cast<std::size_t>(rec.nr) * rec.np, 0.0);
  double patch_mass = 0, global_mass = 0;
  for (i64 j = 0; j < rec.np; ++j) {
    double w = rec.a_at(r, rec.ng + patch, rec.ng + j);
    weights[static_cast<std::size_t>(r * rec.np + j)] = w;
    patch_mass += w;
  }
  for (i64 j = 0; j < rec.ng; ++j) global_mass += rec.a_at(r, rec.ng + patch, j);

  AttentionExport ex;
  ex.patch_mass = patch_mass;
  ex.global_mass = global_mass;
  ex.grid = detail::weights_to_grid(weights, cap.grid_h, cap.grid_w, cap.window);
  ex.csv_path = out_dir + "/" + base_name + ".csv";
  ex.pgm_path = out_dir + "/" + base_name + ".pgm";
  ex.meta_path = out_dir + "/" + base_name + ".meta";
  detail::write_text_file(
      ex.csv_path, detail::attention_csv(weights, cap.grid_h, cap.grid_w, cap.window));
  double lo = 0, hi = 0;
  write_pgm(ex.pgm_path, ex.grid, cap.grid_h, cap.grid_w, &lo, &hi);
  std::string meta;
  meta += "mode: patch\n";
  meta += "stage: " + std::to_string(stage) + "\n";
  meta += "patch_i: " + std::to_string(patch) + "\n";
  meta += "window_r: " + std::to_string(r) + "\n";
  meta += "nr: " + std::to_string(rec.nr) + "\n";
  meta += "ng: " + std::to_string(rec.ng) + "\n";
  meta += "np: " + std::to_string(rec.np) + "\n";
  meta += "grid_h: " + std::to_string(cap.grid_h) + "\n";
  meta += "grid_w: " + std::to_string(cap.grid_w) + "\n";
  meta += "window: " + std::to_string(cap.window) + "\n";
  meta += std::string("head_averaged: ") + (rec.head_averaged ? "true" : "false") + "\n";
  meta += std::string("bare: ") + (rec.bare ? "true" : "false") + "\n";
  meta += "patch_mass: " + fmt_g(patch_mass, 12) + "\n";
  meta += "global_mass: " + fmt_g(global_mass, 12) + "\n";
  meta += "norm_min: " + fmt_g(lo, 12) + "\n";
  meta += "norm_max: " + fmt_g(hi, 12) + "\n";
  detail::write_text_file(ex.meta_path, meta);
  return ex;
}

}  // namespace glam
