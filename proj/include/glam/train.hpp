#pragma once

// Optimizer and training driver: Adam with decoupled weight decay, a
// polynomial learning-rate schedule over total steps, deterministic
// shuffling/augmentation, CSV logging.

#include <cmath>
#include <string>
#include <vector>

#include "glam/data.hpp"
#include "glam/model.hpp"

namespace glam {

struct TrainConfig {
  int epochs = 10;
  int batch = 8;
  i64 steps = 0;  // when > 0, overrides epochs * batches as the schedule length
  double lr0 = 6e-5;
  double poly_power = 1.0;
  double weight_decay = 0.01;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  u64 seed = 0;
  bool augment = true;
};

inline double poly_lr(double lr0, double power, i64 t, i64 total) {
  double frac = 1.0 - static_cast<double>(t) / static_cast<double>(total);
  if (power == 1.0) return lr0 * frac;  // exact, no pow() rounding
  return lr0 * std::pow(frac, power);
}

// Adam with decoupled weight decay: both the moment step and the decay term
// lr * wd * p are computed from the pre-update parameter.
template <typename T>
struct AdamW {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.01;
  i64 t = 0;
  std::vector<std::vector<T>> m, v;

  static AdamW from(const TrainConfig& cfg) {
    AdamW a;
    a.beta1 = cfg.beta1;
    a.beta2 = cfg.beta2;
    a.eps = cfg.eps;
    a.weight_decay = cfg.weight_decay;
    return a;
  }

  void init(const ParamList<T>& params) {
    m.clear();
    v.clear();
    t = 0;
    for (const auto& [name, p] : params) {
      m.emplace_back(p.values().size(), T(0));
      v.emplace_back(p.values().size(), T(0));
    }
  }

  void step(ParamList<T>& params, double lr) {
    if (m.size() != params.size())
      throw ContractError("optimizer state does not match parameter list");
    ++t;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i].second;
      if (!p.has_grad())
        throw ContractError("parameter '" + params[i].first + "' has no gradient");
      const auto& g = p.grad();
      auto& pv = p.mutable_values();
      auto& mi = m[i];
      auto& vi = v[i];
      for (std::size_t j = 0; j < pv.size(); ++j) {
        double gj = static_cast<double>(g[j]);
        double mj = beta1 * static_cast<double>(mi[j]) + (1.0 - beta1) * gj;
        double vj = beta2 * static_cast<double>(vi[j]) + (1.0 - beta2) * gj * gj;
        mi[j] = static_cast<T>(mj);
        vi[j] = static_cast<T>(vj);
        double update = lr * (mj / bc1) / (std::sqrt(vj / bc2) + eps) +
                        lr * weight_decay * static_cast<double>(pv[j]);
        pv[j] = static_cast<T>(static_cast<double>(pv[j]) - update);
      }
    }
  }
};

struct TrainLogRow {
  i64 step = 0;
  double lr = 0, loss = 0, miou = 0;
};

inline std::string train_log_csv(const std::vector<TrainLogRow>& rows) {
  std::string out = "step,lr,loss,miou\n";
  for (const auto& r : rows)
    out += std::to_string(r.step) + "," + fmt_g(r.lr) + "," + fmt_g(r.loss) + "," +
           fmt_g(r.miou) + "\n";
  return out;
}

// Assembles a batch into tensors: images [B, H, W, 3] and patch-grid labels
// (majority vote) concatenated over the batch.
template <typename T>
std::pair<Tensor<T>, std::vector<int>> batch_tensors(const std::vector<Sample>& samples,
                                                     const std::vector<int>& indices,
                                                     const TaskConfig& task, int patch) {
  i64 b = static_cast<i64>(indices.size());
  i64 hw3 = static_cast<i64>(task.img_h) * task.img_w * 3;
  std::vector<T> img(static_cast<std::size_t>(b * hw3));
  std::vector<int> labels;
  for (i64 i = 0; i < b; ++i) {
    const Sample& s = samples[static_cast<std::size_t>(indices[static_cast<std::size_t>(i)])];
    for (i64 j = 0; j < hw3; ++j)
      img[static_cast<std::size_t>(i * hw3 + j)] =
          static_cast<T>(s.image[static_cast<std::size_t>(j)]);
    auto ds = downsample_labels(s.labels, task.img_h, task.img_w, patch,
                                TaskConfig::kClasses, -1);
    labels.insert(labels.end(), ds.begin(), ds.end());
  }
  return {Tensor<T>::from_values({b, task.img_h, task.img_w, 3}, std::move(img)),
          labels};
}

template <typename T>
struct TrainResult {
  std::vector<TrainLogRow> log;
  i64 total_steps = 0;
};

// Single-threaded deterministic training loop. Aborts with a NumericError
// naming the step if the loss stops being finite.
template <typename T>
TrainResult<T> train_model(SegModel<T>& model, const std::vector<Sample>& data,
                           const TaskConfig& task, const TrainConfig& cfg) {
  if (data.empty()) throw ConfigError("training needs at least one sample");
  int batch = std::min<int>(cfg.batch, static_cast<int>(data.size()));
  i64 per_epoch = (static_cast<i64>(data.size()) + batch - 1) / batch;
  i64 total = cfg.steps > 0 ? cfg.steps : static_cast<i64>(cfg.epochs) * per_epoch;
  if (total < 1) throw ConfigError("schedule needs at least one step");

  auto params = model.params();
  auto opt = AdamW<T>::from(cfg);
  opt.init(params);

  Rng order_rng = Rng(cfg.seed).split(3);
  Rng aug_rng = Rng(cfg.seed).split(4);
  std::vector<int> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::size_t cursor = order.size();  // force initial shuffle

  TrainResult<T> result;
  result.total_steps = total;
  std::vector<Sample> staged(static_cast<std::size_t>(batch));
  std::vector<int> staged_idx(static_cast<std::size_t>(batch));
  for (i64 t = 0; t < total; ++t) {
    for (int i = 0; i < batch; ++i) {
      if (cursor >= order.size()) {
        order_rng.shuffle(order.begin(), order.end());
        cursor = 0;
      }
      int idx = order[cursor++];
      if (cfg.augment) {
        bool flip = aug_rng.coin();
        int rot = static_cast<int>(aug_rng.below(4));
        staged[static_cast<std::size_t>(i)] =
            augment_sample(data[static_cast<std::size_t>(idx)], task.img_h, task.img_w,
                           flip, rot);
      } else {
        staged[static_cast<std::size_t>(i)] = data[static_cast<std::size_t>(idx)];
      }
      staged_idx[static_cast<std::size_t>(i)] = i;
    }
    auto [images, labels] = batch_tensors<T>(staged, staged_idx, task, model.cfg.patch);
    double lr = poly_lr(cfg.lr0, cfg.poly_power, t, total);
    Tensor<T> logits, loss;
    try {
      logits = model.forward(images);
      loss = seg_loss(logits, labels, -1);
    } catch (const NumericError& e) {
      throw NumericError("training aborted at step " + std::to_string(t) + ": " +
                         e.what());
    }
    double loss_v = static_cast<double>(loss.item());
    if (!std::isfinite(loss_v))
      throw NumericError("training aborted at step " + std::to_string(t) +
                         ": non-finite loss");
    backward(loss);
    opt.step(params, lr);
    for (auto& [name, p] : params) p.zero_grad();

    auto pred = argmax_classes(logits);
    auto metrics = compute_metrics(pred, labels, TaskConfig::kClasses, -1);
    result.log.push_back({t, lr, loss_v, metrics.miou});
  }
  return result;
}

struct EvalResult {
  SegMetrics metrics;
  double target_acc = 0;  // accuracy on patches whose truth is a target class
  i64 target_patches = 0;
};

template <typename T>
EvalResult eval_model(const SegModel<T>& model, const std::vector<Sample>& data,
                      const TaskConfig& task, int batch = 8) {
  if (data.empty()) throw ConfigError("evaluation needs at least one sample");
  std::vector<int> all_pred, all_truth;
  for (std::size_t start = 0; start < data.size();
       start += static_cast<std::size_t>(batch)) {
    std::vector<int> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + batch); ++i)
      idx.push_back(static_cast<int>(i));
    std::vector<Sample> chunk;
    for (int i : idx) chunk.push_back(data[static_cast<std::size_t>(i)]);
    std::vector<int> local(chunk.size());
    for (std::size_t i = 0; i < chunk.size(); ++i) local[i] = static_cast<int>(i);
    auto [images, labels] = batch_tensors<T>(chunk, local, task, model.cfg.patch);
    auto logits = model.forward(images);
    auto pred = argmax_classes(logits);
    all_pred.insert(all_pred.end(), pred.begin(), pred.end());
    all_truth.insert(all_truth.end(), labels.begin(), labels.end());
  }
  EvalResult r;
  r.metrics = compute_metrics(all_pred, all_truth, TaskConfig::kClasses, -1);
  i64 hit = 0;
  for (std::size_t i = 0; i < all_truth.size(); ++i) {
    if (all_truth[i] == TaskConfig::kTargetA || all_truth[i] == TaskConfig::kTargetB) {
      ++r.target_patches;
      if (all_pred[i] == all_truth[i]) ++hit;
    }
  }
  r.target_acc = r.target_patches
                     ? static_cast<double>(hit) / static_cast<double>(r.target_patches)
                     : 0.0;
  return r;
}

}  // namespace glam
