#pragma once

// Training loop: AdamW with decoupled weight decay, continuous exponential
// learning-rate decay, label-smoothed cross entropy, gradient accumulation,
// and rotation-vote evaluation with confusion-matrix metrics.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "kpx/data.hpp"
#include "kpx/network.hpp"
#include "kpx/tensor.hpp"

namespace kpx {

struct OptimizerConfig {
  double lr = 5e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
  double decay_factor = 0.1;   // lr multiplier applied over decay_epochs
  double decay_epochs = 60.0;
};

// Continuous exponential schedule: lr(e) = lr0 * factor^(e / decay_epochs).
inline double lr_schedule(const OptimizerConfig& cfg, double epoch) {
  return cfg.lr * std::pow(cfg.decay_factor, epoch / cfg.decay_epochs);
}

// Decoupled weight decay: the decay term is applied directly to the weights,
// not mixed into the gradient moments.
template <typename T>
class AdamW {
 public:
  explicit AdamW(OptimizerConfig cfg) : cfg_(cfg) {}

  void step(Model<T>& model, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    model.visit_params([this, lr, bc1, bc2](const std::string& name,
                                            const std::string&, Tensor<T>& p) {
      auto& slot = slots_[name];
      if (slot.m.size() != p.size()) {
        slot.m.assign(p.size(), 0.0);
        slot.v.assign(p.size(), 0.0);
      }
      auto& vals = p.values();
      auto& grad = p.grad();
      for (std::size_t i = 0; i < vals.size(); ++i) {
        const double g = double(grad[i]);
        if (!std::isfinite(g))
          throw std::runtime_error("optimizer: non-finite gradient in " +
                                   name);
        slot.m[i] = cfg_.beta1 * slot.m[i] + (1.0 - cfg_.beta1) * g;
        slot.v[i] = cfg_.beta2 * slot.v[i] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = slot.m[i] / bc1;
        const double vhat = slot.v[i] / bc2;
        double w = double(vals[i]);
        w -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                   cfg_.weight_decay * w);
        if (!std::isfinite(w))
          throw std::runtime_error("optimizer: non-finite update in " + name);
        vals[i] = T(w);
      }
    });
  }

  const OptimizerConfig& config() const { return cfg_; }

 private:
  struct Slot {
    std::vector<double> m, v;
  };
  OptimizerConfig cfg_;
  std::unordered_map<std::string, Slot> slots_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Loss and metrics

// Mean label-smoothed cross entropy over rows. Targets are
// (1 - s) * one_hot + s / n_class; backward is (softmax - target) / N.
template <typename T>
Tensor<T> cross_entropy(Tensor<T> logits, const std::vector<int>& labels,
                        double smoothing) {
  if (logits.shape().size() != 2 || logits.shape()[0] != labels.size())
    throw std::invalid_argument("cross_entropy: logits " +
                                shape_str(logits.shape()) + " vs " +
                                std::to_string(labels.size()) + " labels");
  const std::size_t N = logits.shape()[0], C = logits.shape()[1];
  for (int l : labels)
    if (l < 0 || std::size_t(l) >= C)
      throw std::invalid_argument("cross_entropy: label " + std::to_string(l) +
                                  " outside [0," + std::to_string(C) + ")");
  auto probs = std::make_shared<std::vector<T>>(softmax_rows(logits));
  const T off = T(smoothing / double(C));
  const T on = T(1.0 - smoothing) + off;
  T loss = T(0);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t c = 0; c < C; ++c) {
      const T t = (std::size_t(labels[i]) == c) ? on : off;
      if (t != T(0))
        loss -= t * std::log(std::max((*probs)[i * C + c],
                                      std::numeric_limits<T>::min()));
    }
  loss /= T(N);
  auto ln = logits.node();
  auto labs = std::make_shared<std::vector<int>>(labels);
  return make_op_node<T>(
      {1}, {loss}, {ln}, [ln, probs, labs, N, C, on, off](TensorNode<T>& n) {
        const T g = n.grad[0] / T(N);
        for (std::size_t i = 0; i < N; ++i)
          for (std::size_t c = 0; c < C; ++c) {
            const T t = (std::size_t((*labs)[i]) == c) ? on : off;
            ln->grad[i * C + c] += g * ((*probs)[i * C + c] - t);
          }
      });
}

template <typename T>
std::vector<int> argmax_rows(const std::vector<T>& probs, std::size_t C) {
  std::vector<int> out(probs.size() / C);
  for (std::size_t i = 0; i < out.size(); ++i) {
    int best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (probs[i * C + c] > probs[i * C + best]) best = int(c);
    out[i] = best;
  }
  return out;
}

struct Metrics {
  double accuracy = 0.0;  // overall
  double mean_class_accuracy = 0.0;
  double mean_iou = 0.0;
  std::vector<std::size_t> confusion;  // n_class x n_class, [true][pred]
};

// Classes absent from both ground truth and predictions are excluded from
// the mean class accuracy and mean IoU.
inline Metrics metrics_from_confusion(const std::vector<std::size_t>& conf,
                                      std::size_t n_class) {
  if (conf.size() != n_class * n_class)
    throw std::invalid_argument("metrics: confusion must be n_class^2");
  Metrics m;
  m.confusion = conf;
  std::size_t total = 0, correct = 0;
  double acc_sum = 0.0, iou_sum = 0.0;
  std::size_t acc_n = 0, iou_n = 0;
  for (std::size_t i = 0; i < n_class; ++i) {
    std::size_t row = 0, col = 0;
    for (std::size_t j = 0; j < n_class; ++j) {
      row += conf[i * n_class + j];
      col += conf[j * n_class + i];
      total += conf[i * n_class + j];
    }
    correct += conf[i * n_class + i];
    if (row > 0) {
      acc_sum += double(conf[i * n_class + i]) / double(row);
      ++acc_n;
    }
    const std::size_t uni = row + col - conf[i * n_class + i];
    if (uni > 0) {
      iou_sum += double(conf[i * n_class + i]) / double(uni);
      ++iou_n;
    }
  }
  m.accuracy = total ? double(correct) / double(total) : 0.0;
  m.mean_class_accuracy = acc_n ? acc_sum / double(acc_n) : 0.0;
  m.mean_iou = iou_n ? iou_sum / double(iou_n) : 0.0;
  return m;
}

// ---------------------------------------------------------------------------
// Datasets

// A pool of scenes (segmentation: per-point labels in cloud.labels;
// classification: one label per element).
struct Dataset {
  StackedCloud cloud;
  std::vector<int> element_labels;  // classification only
  HeadKind task = HeadKind::segmentation;

  std::size_t scenes() const { return cloud.elements(); }
};

inline Dataset synth_dataset(HeadKind task, std::size_t scenes,
                             std::size_t points_per_primitive,
                             std::uint64_t seed, double noise_sigma = 0.0) {
  Dataset d;
  d.task = task;
  if (task == HeadKind::segmentation)
    d.cloud = synth_segmentation(scenes, points_per_primitive, seed,
                                 noise_sigma);
  else
    d.cloud = synth_classification(scenes, points_per_primitive, seed,
                                   &d.element_labels, noise_sigma);
  return d;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t steps_per_epoch = 50;
  std::size_t accum_steps = 2;     // gradient accumulation before each update
  std::size_t batch_elements = 1;  // scenes stacked per step
  double smoothing = 0.2;          // overridden per task by train_loop callers
  std::uint64_t seed = 0;
  std::string csv_path;            // optional "epoch,step,lr,loss,acc" log
  AugmentationConfig augment;
  OptimizerConfig optimizer;
};

struct TrainResult {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_accuracy;  // running accuracy on training batches
  double final_lr = 0.0;
};

// Prepares one training batch: slice, augment, subsample to the model's base
// cell, attach features. Labels come back per subsampled point (segmentation)
// or per element (classification).
template <typename T>
StackedCloud prepare_batch(const Dataset& data, Model<T>& model,
                           const std::vector<std::size_t>& scene_ids,
                           const AugmentationConfig* aug, std::mt19937_64& rng,
                           std::vector<int>* labels_out) {
  std::vector<StackedCloud> parts;
  labels_out->clear();
  for (auto id : scene_ids) {
    StackedCloud one = slice_element(data.cloud, id);
    if (aug) augment(one, *aug, rng);
    auto [sub, map] = grid_subsample(one, model.config().cell0);
    (void)map;
    attach_height_features(sub);
    if (data.task == HeadKind::segmentation) {
      labels_out->insert(labels_out->end(), sub.labels.begin(),
                         sub.labels.end());
    } else {
      labels_out->push_back(data.element_labels[id]);
      sub.labels.clear();
    }
    parts.push_back(std::move(sub));
  }
  return stack_clouds(parts);
}

template <typename T>
TrainResult train_loop(Model<T>& model, const Dataset& data,
                       const TrainConfig& cfg) {
  if (data.scenes() == 0)
    throw std::invalid_argument("train: dataset has no scenes");
  if (cfg.accum_steps == 0)
    throw std::invalid_argument("train: accum_steps must be >= 1");
  AdamW<T> opt(cfg.optimizer);
  std::mt19937_64 rng(cfg.seed);
  std::mt19937_64 droppath_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  std::uniform_int_distribution<std::size_t> pick(0, data.scenes() - 1);
  std::ofstream csv;
  if (!cfg.csv_path.empty()) {
    csv.open(cfg.csv_path);
    if (!csv)
      throw std::runtime_error("train: cannot open log " + cfg.csv_path);
    csv << "epoch,step,lr,loss,acc\n";
  }
  auto aug = cfg.augment;
  aug.normalize_unit_sphere =
      data.task == HeadKind::classification;
  TrainResult res;
  std::size_t accum = 0;
  const std::size_t C = model.config().n_class;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    for (std::size_t step = 0; step < cfg.steps_per_epoch; ++step) {
      std::vector<std::size_t> ids(cfg.batch_elements);
      for (auto& id : ids) id = pick(rng);
      std::vector<int> labels;
      StackedCloud batch = prepare_batch(data, model, ids, &aug, rng, &labels);
      Tensor<T> logits = model.forward(batch, true, droppath_rng);
      Tensor<T> loss = cross_entropy(logits, labels, cfg.smoothing);
      const double lval = double(loss.item());
      if (!std::isfinite(lval))
        throw std::runtime_error("train: non-finite loss at epoch " +
                                 std::to_string(epoch) + " step " +
                                 std::to_string(step));
      // accumulated gradients average over the accumulation window
      backward(scale(loss, T(1.0 / double(cfg.accum_steps))));
      const double frac_epoch =
          double(epoch) + double(step) / double(cfg.steps_per_epoch);
      const double lr = lr_schedule(cfg.optimizer, frac_epoch);
      if (++accum == cfg.accum_steps) {
        opt.step(model, lr);
        model.visit_params([](const std::string&, const std::string&,
                              Tensor<T>& p) { p.zero_grad(); });
        accum = 0;
      }
      auto preds = argmax_rows(logits.values(), C);
      for (std::size_t i = 0; i < preds.size(); ++i)
        correct += preds[i] == labels[i];
      seen += preds.size();
      loss_sum += lval;
      res.final_lr = lr;
      if (csv)
        csv << epoch << "," << step << "," << lr << "," << lval << ","
            << (preds.empty() ? 0.0
                              : double(correct) / double(seen))
            << "\n";
    }
    res.epoch_loss.push_back(loss_sum / double(cfg.steps_per_epoch));
    res.epoch_accuracy.push_back(seen ? double(correct) / double(seen) : 0.0);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Evaluation with rotation voting

// Each scene is evaluated under n_votes rotations about the vertical axis
// (angles 2*pi*v / n_votes); per-class probabilities are averaged before the
// argmax. n_votes = 1 is a plain evaluation.
template <typename T>
Metrics evaluate_voting(Model<T>& model, const Dataset& data,
                        std::size_t n_votes = 1) {
  if (n_votes == 0) throw std::invalid_argument("evaluate: n_votes >= 1");
  const std::size_t C = model.config().n_class;
  std::vector<std::size_t> conf(C * C, 0);
  std::mt19937_64 dummy(0);
  for (std::size_t e = 0; e < data.scenes(); ++e) {
    StackedCloud base = slice_element(data.cloud, e);
    if (data.task == HeadKind::classification) {
      AugmentationConfig norm;
      norm.scale_lo = norm.scale_hi = 1.0;
      norm.flip_prob = 0.0;
      norm.jitter_sigma = 0.0;
      norm.rotate = false;
      norm.normalize_unit_sphere = true;
      std::mt19937_64 r(0);
      augment(base, norm, r);
    }
    // subsample once, rotate the subsampled cloud per vote: point identity
    // is preserved across votes so the probabilities can be averaged
    auto [sub, map] = grid_subsample(base, model.config().cell0);
    (void)map;
    std::vector<int> labels;
    if (data.task == HeadKind::segmentation)
      labels = sub.labels;
    else
      labels = {data.element_labels[e]};
    std::vector<T> acc_probs;
    for (std::size_t v = 0; v < n_votes; ++v) {
      StackedCloud rotated = sub;
      rotate_z(rotated, 2.0 * M_PI * double(v) / double(n_votes));
      attach_height_features(rotated);
      Tensor<T> logits = model.forward(rotated, false, dummy);
      auto probs = softmax_rows(logits);
      if (acc_probs.empty()) acc_probs.assign(probs.size(), T(0));
      for (std::size_t i = 0; i < probs.size(); ++i) acc_probs[i] += probs[i];
    }
    auto preds = argmax_rows(acc_probs, C);
    for (std::size_t i = 0; i < preds.size(); ++i)
      if (labels[i] >= 0 && std::size_t(labels[i]) < C)
        conf[std::size_t(labels[i]) * C + std::size_t(preds[i])]++;
  }
  return metrics_from_confusion(conf, C);
}

}  // namespace kpx
