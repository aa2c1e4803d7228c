#pragma once

// The U-shape segmentation network: patch embedding, encoder stages of
// GLAM blocks with patch merging between them, a decoder of non-local
// upsampling plus GLAM blocks, and a linear per-patch classification head.
// Also the training loss and segmentation metrics.

#include <optional>
#include <string>
#include <vector>

#include "glam/glam.hpp"
#include "glam/nlu.hpp"
#include "glam/windowing.hpp"

namespace glam {

struct ModelConfig {
  int img_h = 64, img_w = 64;
  int patch = 4;
  int chans = 32;
  int window = 4;
  int ng = 4;
  int classes = 5;
  int heads = 2;
  std::vector<int> depths{2, 2};
  std::vector<int> glam_stages;  // 0/1 per stage; empty means all 1
  bool gmsa = true;
  bool nlu = true;
  bool nlu_residual = true;
  bool decoder_symmetric = true;

  int n_stages() const { return static_cast<int>(depths.size()); }
  int grid_h(int s) const { return (img_h / patch) >> s; }
  int grid_w(int s) const { return (img_w / patch) >> s; }
  i64 stage_chans(int s) const { return static_cast<i64>(chans) << s; }
  int stage_heads(int s) const { return heads << s; }
  bool stage_glam(int s) const {
    if (glam_stages.empty()) return true;
    return glam_stages[static_cast<std::size_t>(s)] != 0;
  }
  // Capture points: encoder stages 0..S-1, then decoder stages in forward
  // (coarse-to-fine) order.
  int capture_points() const {
    return n_stages() + (decoder_symmetric ? n_stages() - 1 : 0);
  }

  void validate() const {
    if (patch <= 0 || img_h <= 0 || img_w <= 0 || img_h % patch != 0 ||
        img_w % patch != 0)
      throw ConfigError("image " + std::to_string(img_h) + "x" + std::to_string(img_w) +
                        " must be positive and divisible by patch " +
                        std::to_string(patch));
    if (depths.empty()) throw ConfigError("at least one stage is required");
    for (int d : depths)
      if (d < 1) throw ConfigError("every stage needs at least one block");
    if (!glam_stages.empty() && glam_stages.size() != depths.size())
      throw ConfigError("glam_stages must match the number of stages");
    if (chans <= 0 || heads <= 0 || chans % heads != 0)
      throw ConfigError("channels " + std::to_string(chans) +
                        " must be divisible by heads " + std::to_string(heads));
    if (ng < 0) throw ConfigError("ng must be nonnegative");
    if (classes < 1) throw ConfigError("at least one class is required");
    for (int s = 0; s < n_stages(); ++s) {
      if (s > 0 && (grid_h(s - 1) % 2 != 0 || grid_w(s - 1) % 2 != 0))
        throw ConfigError("stage " + std::to_string(s - 1) +
                          " grid must have even sides for patch merging");
      if (grid_h(s) < window || grid_w(s) < window || grid_h(s) % window != 0 ||
          grid_w(s) % window != 0)
        throw ConfigError("stage " + std::to_string(s) + " grid " +
                          std::to_string(grid_h(s)) + "x" + std::to_string(grid_w(s)) +
                          " is not divisible by window " + std::to_string(window));
    }
  }
};

// Attention capture request for one forward pass.
struct CaptureRequest {
  int stage = 0;  // capture-point index
  AttentionRecord record;
  // Window bookkeeping of the captured stage, for spatial export.
  int grid_h = 0, grid_w = 0, window = 0;
  bool done = false;
};

// One resolution level: window partition, optional global tokens, a chain
// of GLAM blocks, inverse merge. Tokens enter and leave in row-major grid
// order.
template <typename T>
struct SegStage {
  int grid_h = 0, grid_w = 0, window = 0;
  i64 ng = 0;
  std::optional<GlobalTokenBank<T>> bank;
  std::vector<GlamBlock<T>> blocks;

  static SegStage init(int grid_h, int grid_w, int window, i64 c, int heads, i64 ng,
                       bool use_glam, bool gmsa, int depth, Rng& rng) {
    SegStage s;
    s.grid_h = grid_h;
    s.grid_w = grid_w;
    s.window = window;
    s.ng = use_glam ? ng : 0;
    if (use_glam && ng > 0) s.bank = GlobalTokenBank<T>::init(ng, c, rng);
    for (int i = 0; i < depth; ++i)
      s.blocks.push_back(GlamBlock<T>::init(c, heads, s.ng, gmsa, rng));
    return s;
  }

  Tensor<T> forward(const Tensor<T>& tokens, CaptureRequest* cap = nullptr) const {
    auto wfm = window_partition(tokens, grid_h, grid_w, window);
    Tensor<T> z = wfm.tokens;
    if (bank) z = concat_globals(z, bank->working(z.dim(0), wfm.num_windows()));
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      bool want = cap && i + 1 == blocks.size();
      z = blocks[i].forward(z, want ? &cap->record : nullptr);
      if (want) {
        cap->grid_h = grid_h;
        cap->grid_w = grid_w;
        cap->window = window;
        cap->done = true;
      }
    }
    if (bank) z = split_globals(z, ng).second;
    wfm.tokens = z;
    return window_merge(wfm);
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    if (bank) bank->collect(out, prefix + ".bank");
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(out, prefix + ".blk" + std::to_string(i));
  }
};

template <typename T>
struct SegModel {
  ModelConfig cfg;
  PatchEmbed<T> embed;
  std::vector<SegStage<T>> enc;
  std::vector<PatchMerging<T>> merges;
  std::vector<NluLayer<T>> nlus;        // indexed by target stage, used when cfg.nlu
  std::vector<LinearLayer<T>> expands;  // nearest-neighbor + linear baseline
  std::vector<SegStage<T>> dec;         // indexed by target stage
  LinearLayer<T> head;

  static SegModel build(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    SegModel m;
    m.cfg = cfg;
    int s_count = cfg.n_stages();
    m.embed = PatchEmbed<T>::init(cfg.img_h, cfg.img_w, cfg.patch, cfg.chans, rng);
    for (int s = 0; s < s_count; ++s) {
      m.enc.push_back(SegStage<T>::init(cfg.grid_h(s), cfg.grid_w(s), cfg.window,
                                        cfg.stage_chans(s), cfg.stage_heads(s), cfg.ng,
                                        cfg.stage_glam(s), cfg.gmsa, cfg.depths[s], rng));
      if (s + 1 < s_count) m.merges.push_back(PatchMerging<T>::init(cfg.stage_chans(s), rng));
    }
    if (s_count > 1) {
      m.nlus.resize(s_count - 1);
      m.expands.resize(s_count - 1);
      if (cfg.decoder_symmetric) m.dec.resize(s_count - 1);
      for (int s = s_count - 2; s >= 0; --s) {
        if (cfg.nlu)
          m.nlus[s] = NluLayer<T>::init(cfg.stage_chans(s), cfg.stage_chans(s + 1),
                                        cfg.stage_chans(s), cfg.stage_heads(s),
                                        cfg.nlu_residual, rng);
        else
          m.expands[s] =
              LinearLayer<T>::init(cfg.stage_chans(s + 1), cfg.stage_chans(s), rng);
        if (cfg.decoder_symmetric)
          m.dec[s] = SegStage<T>::init(cfg.grid_h(s), cfg.grid_w(s), cfg.window,
                                       cfg.stage_chans(s), cfg.stage_heads(s), cfg.ng,
                                       cfg.stage_glam(s), cfg.gmsa, cfg.depths[s], rng);
      }
    }
    m.head = LinearLayer<T>::init(cfg.chans, cfg.classes, rng);
    return m;
  }

  // image: [B, H, W, 3] -> logits [B, (H/p)*(W/p), K].
  Tensor<T> forward(const Tensor<T>& image, CaptureRequest* cap = nullptr) const {
    int s_count = cfg.n_stages();
    Tensor<T> x = embed.forward(image);
    std::vector<Tensor<T>> skips(static_cast<std::size_t>(s_count));
    int point = 0;
    for (int s = 0; s < s_count; ++s) {
      bool want = cap && cap->stage == point;
      x = enc[s].forward(x, want ? cap : nullptr);
      ++point;
      skips[static_cast<std::size_t>(s)] = x;
      if (s + 1 < s_count) x = merges[s].forward(x, cfg.grid_h(s), cfg.grid_w(s));
    }
    for (int s = s_count - 2; s >= 0; --s) {
      if (cfg.nlu)
        x = nlus[s].forward(skips[static_cast<std::size_t>(s)], x, cfg.grid_h(s + 1),
                            cfg.grid_w(s + 1));
      else
        x = index_select(expands[s].forward(x), 1,
                         nn_upsample_indices(cfg.grid_h(s + 1), cfg.grid_w(s + 1)));
      if (cfg.decoder_symmetric) {
        bool want = cap && cap->stage == point;
        x = dec[s].forward(x, want ? cap : nullptr);
        ++point;
      }
    }
    auto logits = head.forward(x);
    if (cap && !cap->done)
      throw IndexError("capture stage " + std::to_string(cap->stage) +
                       " out of range [0, " + std::to_string(point) + ")");
    return logits;
  }

  ParamList<T> params() const {
    ParamList<T> out;
    embed.collect(out, "embed");
    for (std::size_t s = 0; s < enc.size(); ++s)
      enc[s].collect(out, "enc" + std::to_string(s));
    for (std::size_t s = 0; s < merges.size(); ++s)
      merges[s].collect(out, "merge" + std::to_string(s));
    for (int s = static_cast<int>(cfg.n_stages()) - 2; s >= 0; --s) {
      if (cfg.nlu)
        nlus[s].collect(out, "nlu" + std::to_string(s));
      else
        expands[s].collect(out, "expand" + std::to_string(s));
      if (cfg.decoder_symmetric) dec[s].collect(out, "dec" + std::to_string(s));
    }
    head.collect(out, "head");
    return out;
  }

  i64 param_count() const {
    i64 total = 0;
    for (const auto& [name, t] : params()) total += t.numel();
    return total;
  }
};

template <typename T>
Tensor<T> seg_loss(const Tensor<T>& logits, const std::vector<int>& labels,
                   int ignore_index = -1) {
  return softmax_cross_entropy(logits, labels, ignore_index);
}

// Majority vote of pixel labels within each patch cell; ignored pixels do
// not vote, ties go to the smaller class index, all-ignored cells stay
// ignored.
inline std::vector<int> downsample_labels(const std::vector<int>& pixel_labels, int img_h,
                                          int img_w, int patch, int classes,
                                          int ignore_index = -1) {
  int gh = img_h / patch, gw = img_w / patch;
  std::vector<int> out(static_cast<std::size_t>(gh) * gw, ignore_index);
  std::vector<int> hist(static_cast<std::size_t>(classes));
  for (int r = 0; r < gh; ++r)
    for (int c = 0; c < gw; ++c) {
      std::fill(hist.begin(), hist.end(), 0);
      for (int y = 0; y < patch; ++y)
        for (int x = 0; x < patch; ++x) {
          int lbl = pixel_labels[static_cast<std::size_t>(r * patch + y) * img_w +
                                 (c * patch + x)];
          if (lbl != ignore_index) ++hist[static_cast<std::size_t>(lbl)];
        }
      int best = ignore_index, best_count = 0;
      for (int k = 0; k < classes; ++k)
        if (hist[static_cast<std::size_t>(k)] > best_count) {
          best = k;
          best_count = hist[static_cast<std::size_t>(k)];
        }
      out[static_cast<std::size_t>(r) * gw + c] = best;
    }
  return out;
}

struct SegMetrics {
  std::vector<double> iou, dice;  // valid where present[c]
  std::vector<bool> present;      // class appears in prediction or truth
  double miou = 0, mdice = 0, pixel_acc = 0;
};

inline SegMetrics compute_metrics(const std::vector<int>& pred,
                                  const std::vector<int>& truth, int classes,
                                  int ignore_index = -1) {
  if (pred.size() != truth.size())
    throw ShapeError("metrics: prediction and truth sizes differ");
  std::vector<i64> tp(static_cast<std::size_t>(classes), 0),
      fp(static_cast<std::size_t>(classes), 0), fn(static_cast<std::size_t>(classes), 0);
  i64 correct = 0, counted = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (truth[i] == ignore_index) continue;
    ++counted;
    if (pred[i] == truth[i]) {
      ++correct;
      ++tp[static_cast<std::size_t>(truth[i])];
    } else {
      ++fp[static_cast<std::size_t>(pred[i])];
      ++fn[static_cast<std::size_t>(truth[i])];
    }
  }
  SegMetrics m;
  m.iou.assign(static_cast<std::size_t>(classes), 0.0);
  m.dice.assign(static_cast<std::size_t>(classes), 0.0);
  m.present.assign(static_cast<std::size_t>(classes), false);
  double iou_sum = 0, dice_sum = 0;
  int present_count = 0;
  for (int k = 0; k < classes; ++k) {
    auto idx = static_cast<std::size_t>(k);
    i64 denom = tp[idx] + fp[idx] + fn[idx];
    if (denom == 0) continue;  // absent from both prediction and truth
    m.present[idx] = true;
    m.iou[idx] = static_cast<double>(tp[idx]) / static_cast<double>(denom);
    m.dice[idx] = 2.0 * static_cast<double>(tp[idx]) /
                  static_cast<double>(2 * tp[idx] + fp[idx] + fn[idx]);
    iou_sum += m.iou[idx];
    dice_sum += m.dice[idx];
    ++present_count;
  }
  m.miou = present_count ? iou_sum / present_count : 0.0;
  m.mdice = present_count ? dice_sum / present_count : 0.0;
  m.pixel_acc = counted ? static_cast<double>(correct) / static_cast<double>(counted) : 0.0;
  return m;
}

// Per-row argmax over the class axis of logits values.
template <typename T>
std::vector<int> argmax_classes(const Tensor<T>& logits) {
  i64 k = logits.dim(-1);
  i64 rows = logits.numel() / k;
  std::vector<int> out(static_cast<std::size_t>(rows));
  const auto& v = logits.values();
  for (i64 r = 0; r < rows; ++r) {
    int best = 0;
    T best_v = v[static_cast<std::size_t>(r * k)];
    for (i64 j = 1; j < k; ++j)
      if (v[static_cast<std::size_t>(r * k + j)] > best_v) {
        best_v = v[static_cast<std::size_t>(r * k + j)];
        best = static_cast<int>(j);
      }
    out[static_cast<std::size_t>(r)] = best;
  }
  return out;
}

}  // namespace glam
