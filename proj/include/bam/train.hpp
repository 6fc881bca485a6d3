#pragma once

#include <atomic>
#include <cmath>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "bam/config.hpp"
#include "bam/generalized.hpp"
#include "bam/metrics.hpp"
#include "bam/model.hpp"

namespace bam {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

struct TrainResult {
  std::vector<double> epoch_losses;
  double validation_score = -1.0;  // best held-out score, when selection ran
};

namespace detail {

inline void check_finite_loss(double loss, const std::string& stage, int epoch, int step) {
  if (!std::isfinite(loss))
    throw std::runtime_error(stage + ": loss diverged (non-finite) at epoch " +
                             std::to_string(epoch) + " step " + std::to_string(step));
}

inline void augment_sample(RgbImage& image, LabelMap& mask, Rng& rng, bool crop) {
  if (rng.bernoulli(0.5)) flip_horizontal(image, mask);
  if (crop && rng.bernoulli(0.5)) random_crop_resize(image, mask, rng);
}

template <typename Body>
void run_indexed(int count, int workers, const Body& body) {
  if (workers <= 1 || count <= 1) {
    for (int i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  for (int w = 0; w < std::min(workers, count); ++w)
    pool.emplace_back([&] {
      for (int i = next.fetch_add(1); i < count; i = next.fetch_add(1)) body(i);
    });
  for (auto& t : pool) t.join();
}

/// Batch-mean gradients computed one sample per graph, possibly across
/// workers; per-sample gradients merge in index order so results are
/// bit-identical for any worker count.
template <typename S, typename BuildLoss>
double batch_gradients(ParamStore<S>& params, int batch, int workers,
                       const BuildLoss& build_loss, Grads<S>& out) {
  std::vector<Grads<S>> partial(static_cast<std::size_t>(batch), Grads<S>(params.size()));
  std::vector<double> losses(static_cast<std::size_t>(batch), 0.0);
  run_indexed(batch, workers, [&](int b) {
    Graph<S> g;
    ParamUser<S> p(g, params);
    Var<S> loss = build_loss(b, g, p);
    losses[static_cast<std::size_t>(b)] = static_cast<double>(loss.val()[0]);
    g.backward(loss, &partial[static_cast<std::size_t>(b)]);
  });
  for (int b = 0; b < batch; ++b) out.add(partial[static_cast<std::size_t>(b)]);
  const S inv = S(1) / static_cast<S>(batch);
  for (auto& slot : out.slots)
    if (slot.size()) slot.data *= inv;
  double mean = 0;
  for (double l : losses) mean += l;
  return mean / batch;
}

}  // namespace detail

/// Stage 1: standard supervised training of encoder + base learner on the
/// fold's base classes (novel pixels relabeled background). SGD with poly
/// lr decay; aborts on a non-finite loss.
template <typename S>
TrainResult pretrain_base(BamModel<S>& model, const Dataset& data, const ClassSplit& split,
                          const TrainConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(mix_seed(seed, 0xba5e));
  const int n = static_cast<int>(data.images.size());
  if (n == 0) throw std::invalid_argument("pretrain: empty dataset");

  const int steps_per_epoch = std::max(1, n / cfg.batch_size);
  const std::int64_t total_steps = static_cast<std::int64_t>(steps_per_epoch) * cfg.epochs;
  SgdOptions<S> opt;
  opt.momentum = static_cast<S>(cfg.momentum);
  opt.weight_decay = static_cast<S>(cfg.weight_decay);

  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  TrainResult result;
  std::int64_t step_index = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int i = n - 1; i > 0; --i) {
      const int j = static_cast<int>(rng.uniform_int(0, i));
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    double epoch_loss = 0.0;
    for (int step = 0; step < steps_per_epoch; ++step) {
      // Samples and augmentation draws come from the sequential stream;
      // forward/backward runs per sample across workers.
      std::vector<RgbImage> images;
      std::vector<LabelMap> labels;
      for (int b = 0; b < cfg.batch_size; ++b) {
        const int idx = order[static_cast<std::size_t>((step * cfg.batch_size + b) % n)];
        RgbImage img = data.images[static_cast<std::size_t>(idx)];
        LabelMap sem = data.masks[static_cast<std::size_t>(idx)];
        if (cfg.augment) detail::augment_sample(img, sem, rng, true);
        images.push_back(std::move(img));
        labels.push_back(remap_for_base_training(sem, split));
      }

      Grads<S> grads = model.params().make_grads();
      const double loss_value = detail::batch_gradients(
          model.params(), cfg.batch_size, cfg.workers,
          [&](int b, Graph<S>& g, ParamUser<S>& p) {
            (void)p;
            return model.stage1_loss(g, {&images[static_cast<std::size_t>(b)]},
                                     {&labels[static_cast<std::size_t>(b)]});
          },
          grads);
      detail::check_finite_loss(loss_value, "pretrain", epoch, step);
      clip_grad_norm(grads, cfg.max_grad_norm);
      opt.lr = poly_lr(static_cast<S>(cfg.lr), step_index, total_steps);
      sgd_step(model.params(), grads, opt);
      ++step_index;
      epoch_loss += loss_value;
    }
    result.epoch_losses.push_back(epoch_loss / steps_per_epoch);
  }
  return result;
}

namespace detail {

/// Base-class episodic score on held-out images, with the training-time
/// channel-exclusion semantics. Used for stage-2 model selection.
template <typename S>
double validation_score(BamModel<S>& model, const Dataset& val_data, const ClassSplit& split,
                        const TrainConfig& cfg, std::uint64_t seed) {
  IouAccumulator acc;
  const bool meta_only = cfg.train_objective == "meta-only";
  model.psi_stat().median();  // flush before parallel reads
  std::vector<std::pair<LabelMap, LabelMap>> results(
      static_cast<std::size_t>(cfg.validation_episodes));
  std::vector<int> classes(static_cast<std::size_t>(cfg.validation_episodes), -1);
  detail::run_indexed(cfg.validation_episodes, cfg.workers, [&](int e) {
    Rng rng(mix_seed(seed, 0xa11d + static_cast<std::uint64_t>(e)));
    Episode ep;
    try {
      ep = sample_episode(val_data, split.base_classes, cfg.shots, rng);
    } catch (const std::exception&) {
      return;  // class exhausted on a tiny validation slice
    }
    int dense_id = 0;
    for (std::size_t i = 0; i < split.base_classes.size(); ++i)
      if (split.base_classes[i] == ep.class_id) dense_id = static_cast<int>(i) + 1;
    Graph<S> g;
    ParamUser<S> p(g, model.params(), /*all_frozen=*/true);
    auto vars = model.episode_forward(g, p, ep, dense_id);
    const Tensor<S>& prob = meta_only ? vars.meta_prob.val() : vars.final_prob.val();
    results[static_cast<std::size_t>(e)] = {base_argmax_mask(prob), ep.query_mask};
    classes[static_cast<std::size_t>(e)] = ep.class_id;
  });
  for (std::size_t e = 0; e < results.size(); ++e)
    if (classes[e] >= 0) acc.add_binary(results[e].first, results[e].second, classes[e]);
  return acc.mean_iou(split.base_classes);
}

}  // namespace detail

/// Stage 2: episodic training of the meta learner and ensemble over the
/// fold's base classes. The encoder and base learner are frozen; constant
/// learning rate. `train_objective = meta-only` drops the ensemble term and
/// trains the plain prototype baseline. When a validation fraction is set,
/// a held-out image slice is scored periodically and the best snapshot is
/// restored at the end.
template <typename S>
TrainResult meta_train(BamModel<S>& model, const Dataset& data, const ClassSplit& split,
                       const TrainConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const bool meta_only = cfg.train_objective == "meta-only";
  model.freeze_for_meta_training();
  Rng rng(mix_seed(seed, 0x3e7a));

  // Held-out image slice for model selection.
  Dataset train_view;
  Dataset val_view;
  const int n_images = static_cast<int>(data.images.size());
  int n_val = cfg.validation_fraction > 0
                  ? static_cast<int>(n_images * cfg.validation_fraction)
                  : 0;
  if (n_val < (cfg.shots + 1) * 2) n_val = 0;  // slice too thin to score
  const Dataset* train_data = &data;
  if (n_val > 0) {
    std::vector<int> ids(static_cast<std::size_t>(n_images));
    for (int i = 0; i < n_images; ++i) ids[static_cast<std::size_t>(i)] = i;
    for (int i = n_images - 1; i > 0; --i) {
      const int j = static_cast<int>(rng.uniform_int(0, i));
      std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(j)]);
    }
    train_view.num_classes = val_view.num_classes = data.num_classes;
    for (int i = 0; i < n_images; ++i) {
      Dataset& dst = i < n_val ? val_view : train_view;
      dst.images.push_back(data.images[static_cast<std::size_t>(ids[static_cast<std::size_t>(i)])]);
      dst.masks.push_back(data.masks[static_cast<std::size_t>(ids[static_cast<std::size_t>(i)])]);
    }
    train_view.rebuild_index();
    val_view.rebuild_index();
    train_data = &train_view;
  }

  const int steps_per_epoch = std::max(1, cfg.episodes_per_epoch / cfg.batch_size);
  SgdOptions<S> opt;
  opt.lr = static_cast<S>(cfg.lr);
  opt.momentum = static_cast<S>(cfg.momentum);
  opt.weight_decay = static_cast<S>(cfg.weight_decay);

  double best_score = -1.0;
  std::vector<Tensor<S>> best_params;
  double best_psi_median = 1.0;
  std::int64_t best_psi_count = 0;
  auto maybe_validate = [&](int epoch) {
    if (n_val == 0) return;
    if ((epoch + 1) % cfg.validate_every != 0 && epoch + 1 != cfg.epochs) return;
    const double score =
        detail::validation_score(model, val_view, split, cfg, mix_seed(seed, 0x5c02e));
    if (score > best_score) {
      best_score = score;
      best_params.clear();
      for (const auto& e : model.params().entries()) best_params.push_back(e.value);
      best_psi_median = model.psi_stat().median();
      best_psi_count = model.psi_stat().count();
    }
  };

  TrainResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (int step = 0; step < steps_per_epoch; ++step) {
      // Episodes are drawn and augmented from the sequential stream; the
      // squash statistic is snapshotted for the whole step and updated
      // afterwards (single writer).
      std::vector<Episode> episodes;
      for (int b = 0; b < cfg.batch_size; ++b) {
        int shots = cfg.shots;
        if (cfg.shots > 1 && cfg.mixed_shot_fraction > 0 &&
            rng.bernoulli(cfg.mixed_shot_fraction))
          shots = 1;
        Episode ep = sample_episode(*train_data, split.base_classes, shots, rng);
        for (int k = 0; k < ep.shot_count; ++k) {
          auto& smask = ep.support_masks[static_cast<std::size_t>(k)];
          if (cfg.augment)
            detail::augment_sample(ep.support_images[static_cast<std::size_t>(k)], smask, rng,
                                   false);
          if (cfg.annotation_mode == "bbox") smask = mask_to_bbox(smask);
        }
        if (cfg.augment) detail::augment_sample(ep.query_image, ep.query_mask, rng, false);
        episodes.push_back(std::move(ep));
      }
      model.psi_stat().median();  // flush the lazy sort before parallel reads

      std::vector<std::vector<double>> psi_obs(static_cast<std::size_t>(cfg.batch_size));
      Grads<S> grads = model.params().make_grads();
      const double loss_value = detail::batch_gradients(
          model.params(), cfg.batch_size, cfg.workers,
          [&](int b, Graph<S>& g, ParamUser<S>& p) {
            const Episode& ep = episodes[static_cast<std::size_t>(b)];
            // The target is a base class here; only the remaining base
            // categories may feed the ensemble's background evidence.
            int dense_id = 0;
            for (std::size_t i = 0; i < split.base_classes.size(); ++i)
              if (split.base_classes[i] == ep.class_id) dense_id = static_cast<int>(i) + 1;
            auto vars = model.episode_forward(g, p, ep, dense_id);
            psi_obs[static_cast<std::size_t>(b)] = vars.psi_per_shot;
            return meta_only ? meta_loss(vars.meta_prob, ep.query_mask)
                             : model.episode_loss(vars, ep.query_mask);
          },
          grads);
      for (const auto& obs : psi_obs)
        for (double v : obs) model.psi_stat().observe(v);
      detail::check_finite_loss(loss_value, "meta-train", epoch, step);
      clip_grad_norm(grads, cfg.max_grad_norm);
      sgd_step(model.params(), grads, opt);
      epoch_loss += loss_value;
    }
    result.epoch_losses.push_back(epoch_loss / steps_per_epoch);
    maybe_validate(epoch);
  }
  if (best_score >= 0 && !best_params.empty()) {
    auto& entries = model.params().entries();
    for (std::size_t i = 0; i < entries.size(); ++i) entries[i].value = best_params[i];
    model.psi_stat().restore(best_psi_median, best_psi_count);
    result.validation_score = best_score;
  }
  return result;
}

struct EvalOptions {
  int episodes = 200;
  int shots = 1;
  LearnerPath path = LearnerPath::kBam;
  std::string annotation_mode = "mask";  // bbox applies to support masks only
  int workers = 2;
};

namespace detail {

inline void apply_annotation_mode(Episode& ep, const std::string& mode) {
  if (mode != "bbox") return;
  for (auto& m : ep.support_masks) m = mask_to_bbox(m);
}

}  // namespace detail

/// Standard FSS evaluation over novel-class episodes: class-wise mIoU
/// (pooled counters) plus FB-IoU. Episodes are derived from (seed, index),
/// so results are independent of worker scheduling.
template <typename S>
MetricsRecord evaluate(BamModel<S>& model, const Dataset& data, const ClassSplit& split,
                       const EvalOptions& opt, std::uint64_t seed) {
  struct EpisodeCounts {
    int class_id = 0;
    bool fallback = false;
    LabelMap pred, gt;
  };
  std::vector<EpisodeCounts> results(static_cast<std::size_t>(opt.episodes));
  model.psi_stat().median();  // flush the lazy sort before parallel reads

  detail::run_indexed(opt.episodes, opt.workers, [&](int e) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(e)));
    Episode ep = sample_episode(data, split.novel_classes, opt.shots, rng);
    detail::apply_annotation_mode(ep, opt.annotation_mode);
    EvalOutput<S> out = model.eval_episode(ep, opt.path);
    auto& slot = results[static_cast<std::size_t>(e)];
    slot.class_id = ep.class_id;
    slot.fallback = out.map_fallback;
    slot.pred = std::move(out.pred_mask);
    slot.gt = std::move(ep.query_mask);
  });

  IouAccumulator iou;
  FbIouAccumulator fb;
  MetricsRecord rec;
  for (const auto& r : results) {
    iou.add_binary(r.pred, r.gt, r.class_id);
    fb.add(r.pred, r.gt);
    rec.map_fallbacks += r.fallback;
  }
  rec.per_class_iou = iou.per_class();
  rec.miou = iou.mean_iou(split.novel_classes);
  rec.fb_iou = fb.value();
  rec.fold = split.fold_index;
  rec.seed = seed;
  rec.episodes = opt.episodes;
  return rec;
}

/// One episode's inputs to the generalized merge, cached so tau sweeps can
/// re-fuse without re-running the network.
struct GeneralizedDump {
  Tensor<double> fg_prob;  // {1,H,W}
  LabelMap base_mask;      // dense ids 0..N_b
  LabelMap gt_original;    // original class ids, other novel classes zeroed
  int class_id = 0;
};

template <typename S>
std::vector<GeneralizedDump> collect_generalized_dumps(BamModel<S>& model, const Dataset& data,
                                                       const ClassSplit& split,
                                                       const EvalOptions& opt,
                                                       std::uint64_t seed) {
  std::vector<GeneralizedDump> dumps(static_cast<std::size_t>(opt.episodes));
  model.psi_stat().median();  // flush the lazy sort before parallel reads
  detail::run_indexed(opt.episodes, opt.workers, [&](int e) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(e)));
    Episode ep = sample_episode(data, split.novel_classes, opt.shots, rng);
    detail::apply_annotation_mode(ep, opt.annotation_mode);
    EvalOutput<S> out = model.eval_episode(
        ep, opt.path == LearnerPath::kMetaOnly ? LearnerPath::kMetaOnly : LearnerPath::kBam);

    GeneralizedDump d;
    d.class_id = ep.class_id;
    const Tensor<S>& fg = opt.path == LearnerPath::kMetaOnly ? out.meta_fg : out.final_fg;
    d.fg_prob = fg.template cast<double>();
    d.base_mask = base_argmax_mask(out.base_prob);
    // Ground truth in original ids: keep base classes and this episode's
    // class; other novel classes count as background.
    d.gt_original = ep.query_semantic;
    for (auto& v : d.gt_original.labels) {
      if (v == 0 || v == ep.class_id) continue;
      bool is_base = false;
      for (int b : split.base_classes) is_base |= (b == v);
      if (!is_base) v = 0;
    }
    dumps[static_cast<std::size_t>(e)] = std::move(d);
  });
  return dumps;
}

/// Generalized FSS evaluation: merge the fused binary output with the base
/// learner's multi-class mask and score mIoU over novel, base, and all
/// classes.
inline MetricsRecord score_generalized(const std::vector<GeneralizedDump>& dumps,
                                       const ClassSplit& split, double tau, bool alt_scheme) {
  std::vector<GeneralizedMask> preds;
  std::vector<LabelMap> gts;
  for (const auto& d : dumps) {
    preds.push_back(alt_scheme
                        ? fuse_generalized_alt(d.fg_prob, d.base_mask, tau, split.base_classes,
                                               d.class_id)
                        : fuse_generalized(d.fg_prob, d.base_mask, tau, split.base_classes,
                                           d.class_id));
    gts.push_back(d.gt_original);
  }
  auto [n, b, a] = generalized_miou(preds, gts, split);
  MetricsRecord rec;
  rec.miou = a;
  rec.miou_n = n;
  rec.miou_b = b;
  rec.miou_a = a;
  rec.fold = split.fold_index;
  rec.episodes = static_cast<int>(dumps.size());
  return rec;
}

template <typename S>
MetricsRecord evaluate_generalized(BamModel<S>& model, const Dataset& data,
                                   const ClassSplit& split, const EvalOptions& opt, double tau,
                                   bool alt_scheme, std::uint64_t seed) {
  auto dumps = collect_generalized_dumps(model, data, split, opt, seed);
  MetricsRecord rec = score_generalized(dumps, split, tau, alt_scheme);
  rec.seed = seed;
  return rec;
}

/// Observe scene-difference values over sampled episodes without training;
/// refreshes the squash statistic when evaluating a tap the stat never saw.
template <typename S>
void calibrate_psi(BamModel<S>& model, const Dataset& data, const ClassSplit& split,
                   int episodes, int shots, std::uint64_t seed) {
  for (int e = 0; e < episodes; ++e) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(e)));
    Episode ep = sample_episode(data, split.base_classes, shots, rng);
    Graph<S> g;
    ParamUser<S> p(g, model.params(), /*all_frozen=*/true);
    BlockFeatures<S> fq =
        model.encoder().forward(p, g.constant(to_tensor<S>(ep.query_image)));
    GramSignature<S> gq =
        gram_matrix(fq.tap(model.config().gram_tap).val(), model.config().gram_normalized);
    for (int k = 0; k < ep.shot_count; ++k) {
      BlockFeatures<S> fs = model.encoder().forward(
          p, g.constant(to_tensor<S>(ep.support_images[static_cast<std::size_t>(k)])));
      const S psi = adjustment_factor(
          gram_matrix(fs.tap(model.config().gram_tap).val(), model.config().gram_normalized),
          gq);
      model.psi_stat().observe(static_cast<double>(psi));
    }
  }
}

}  // namespace bam
