#pragma once

// Synthetic long-range-dependency segmentation task ("key-patch"): a
// colored key square in one corner window decides which of two classes the
// white target rectangles in other windows receive. Local texture alone
// cannot label a target; the key is always in a different window by
// construction. Optional distractor shapes carry window-local classes.

#include <optional>
#include <string>
#include <vector>

#include "glam/rng.hpp"
#include "glam/serialize.hpp"

namespace glam {

// Class layout: 0 background, 1 target under key A, 2 target under key B,
// 3 / 4 distractors.
struct TaskConfig {
  int img_h = 64, img_w = 64;
  int win_px = 16;  // window size in pixels at the finest stage (M * p)
  int targets_min = 1, targets_max = 3;
  int distractors_min = 1, distractors_max = 2;
  double noise = 0.02;
  // Alternate key colors by sample index instead of drawing them, pinning
  // the key-blind accuracy ceiling at one half.
  bool balanced_keys = false;

  static constexpr int kClasses = 5;
  static constexpr int kTargetA = 1;
  static constexpr int kTargetB = 2;

  int windows_h() const { return img_h / win_px; }
  int windows_w() const { return img_w / win_px; }

  void validate() const {
    if (win_px <= 4 || img_h % win_px != 0 || img_w % win_px != 0)
      throw GenerationError("window " + std::to_string(win_px) +
                            "px must divide the image and exceed 4px");
    int windows = windows_h() * windows_w();
    if (windows < 2)
      throw GenerationError(
          "key and targets cannot be separated: the image holds only " +
          std::to_string(windows) + " window(s)");
    if (targets_min < 1 || targets_max < targets_min || distractors_min < 0 ||
        distractors_max < distractors_min)
      throw GenerationError("invalid shape count ranges");
    if (windows - 1 < targets_min)
      throw GenerationError("not enough non-key windows for " +
                            std::to_string(targets_min) + " target(s)");
  }
};

struct Sample {
  std::vector<float> image;  // [H * W * 3]
  std::vector<int> labels;   // [H * W]
};

namespace palette {
inline constexpr float kBackground[3] = {0.08f, 0.09f, 0.10f};
inline constexpr float kKeyA[3] = {0.90f, 0.15f, 0.10f};
inline constexpr float kKeyB[3] = {0.10f, 0.25f, 0.90f};
inline constexpr float kTarget[3] = {0.95f, 0.95f, 0.95f};
inline constexpr float kDistractorC[3] = {0.15f, 0.80f, 0.20f};
inline constexpr float kDistractorD[3] = {0.85f, 0.80f, 0.10f};
}  // namespace palette

// force_key (0 = A, 1 = B) substitutes the key-color draw without touching
// any other random choice; the key color comes from its own child stream.
inline Sample generate_sample(const TaskConfig& task, u64 seed,
                              std::optional<int> force_key = std::nullopt) {
  task.validate();
  Rng base(seed);
  Rng rng_key = base.split(1);
  Rng rng = base.split(2);
  int key_color = force_key ? *force_key : (rng_key.coin() ? 1 : 0);

  int h = task.img_h, w = task.img_w, wp = task.win_px;
  int wh = task.windows_h(), ww = task.windows_w();

  Sample s;
  s.image.resize(static_cast<std::size_t>(h) * w * 3);
  s.labels.assign(static_cast<std::size_t>(h) * w, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        s.image[static_cast<std::size_t>((y * w + x) * 3 + c)] =
            palette::kBackground[c] +
            static_cast<float>(rng.uniform(-task.noise, task.noise));

  auto fill_rect = [&](int y0, int x0, int rh, int rw, const float* color, int label) {
    for (int y = y0; y < y0 + rh; ++y)
      for (int x = x0; x < x0 + rw; ++x) {
        for (int c = 0; c < 3; ++c)
          s.image[static_cast<std::size_t>((y * w + x) * 3 + c)] = color[c];
        if (label >= 0) s.labels[static_cast<std::size_t>(y * w + x)] = label;
      }
  };

  // Key square in the top-left corner window (augmentation rotates it to
  // the other corners); the key itself stays background in the label map.
  int key_win = 0;
  fill_rect(2, 2, wp - 4, wp - 4, key_color ? palette::kKeyB : palette::kKeyA, -1);

  // Shapes land in distinct non-key windows.
  std::vector<int> free_windows;
  for (int win = 0; win < wh * ww; ++win)
    if (win != key_win) free_windows.push_back(win);
  rng.shuffle(free_windows.begin(), free_windows.end());

  int n_targets = rng.range_int(task.targets_min,
                                std::min(task.targets_max,
                                         static_cast<int>(free_windows.size())));
  int n_distract = rng.range_int(task.distractors_min, task.distractors_max);
  n_distract = std::min<int>(n_distract,
                             static_cast<int>(free_windows.size()) - n_targets);

  std::size_t next_win = 0;
  auto place_shape = [&](const float* color, int label) {
    int win = free_windows[next_win++];
    int wr = win / ww, wc = win % ww;
    int rh = rng.range_int(wp / 3, wp - 2);
    int rw = rng.range_int(wp / 3, wp - 2);
    int y0 = wr * wp + rng.range_int(1, wp - rh - 1);
    int x0 = wc * wp + rng.range_int(1, wp - rw - 1);
    fill_rect(y0, x0, rh, rw, color, label);
  };
  int target_class = key_color ? TaskConfig::kTargetB : TaskConfig::kTargetA;
  for (int i = 0; i < n_targets; ++i) place_shape(palette::kTarget, target_class);
  for (int i = 0; i < n_distract; ++i) {
    bool d = rng.coin();
    place_shape(d ? palette::kDistractorD : palette::kDistractorC, d ? 4 : 3);
  }
  return s;
}

// Deterministic per-sample seeds derived from (seed, split tag, index), so
// generation order does not matter.
inline std::vector<Sample> generate(const TaskConfig& task, u64 seed, int n,
                                    u64 split_tag = 0) {
  if (n < 1) throw GenerationError("cannot generate fewer than one sample");
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    std::optional<int> forced;
    if (task.balanced_keys) forced = i % 2;
    out.push_back(generate_sample(
        task, mix_seed(mix_seed(seed, split_tag), static_cast<u64>(i)), forced));
  }
  return out;
}

// Label-consistent augmentation: horizontal flip and 90-degree rotations
// (rotations only for square images).
inline Sample augment_sample(const Sample& s, int img_h, int img_w, bool flip,
                             int rot_quarter) {
  Sample out = s;
  auto apply = [&](auto&& pos_map, int h, int w) {
    Sample next;
    next.image.resize(out.image.size());
    next.labels.resize(out.labels.size());
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        auto [sy, sx] = pos_map(y, x);
        for (int c = 0; c < 3; ++c)
          next.image[static_cast<std::size_t>((y * w + x) * 3 + c)] =
              out.image[static_cast<std::size_t>((sy * w + sx) * 3 + c)];
        next.labels[static_cast<std::size_t>(y * w + x)] =
            out.labels[static_cast<std::size_t>(sy * w + sx)];
      }
    out = std::move(next);
  };
  if (flip)
    apply([&](int y, int x) { return std::pair{y, img_w - 1 - x}; }, img_h, img_w);
  if (img_h == img_w)
    for (int k = 0; k < (rot_quarter & 3); ++k)
      apply([&](int y, int x) { return std::pair{x, img_h - 1 - y}; }, img_h, img_w);
  return out;
}

// ---- on-disk dataset --------------------------------------------------------

inline std::string sample_filename(const std::string& split, int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%05d.glam", split.c_str(), index);
  return buf;
}

inline void save_sample(const std::string& path, const Sample& s, int img_h, int img_w) {
  std::vector<TensorRecord> recs;
  recs.push_back(TensorRecord::make<float>("image", {img_h, img_w, 3}, s.image));
  std::vector<std::int32_t> lbl(s.labels.begin(), s.labels.end());
  recs.push_back(TensorRecord::make<std::int32_t>("labels", {img_h, img_w}, lbl));
  write_records(path, recs);
}

inline Sample load_sample(const std::string& path, int img_h, int img_w) {
  auto recs = read_records(path);
  if (recs.size() != 2 || recs[0].name != "image" || recs[1].name != "labels")
    throw IoError("'" + path + "' is not a dataset sample");
  if (recs[0].shape != Shape{img_h, img_w, 3} || recs[1].shape != Shape{img_h, img_w})
    throw IoError("'" + path + "' extents do not match the task config");
  Sample s;
  s.image = recs[0].as<float>();
  auto lbl = recs[1].as<std::int32_t>();
  s.labels.assign(lbl.begin(), lbl.end());
  return s;
}

}  // namespace glam
