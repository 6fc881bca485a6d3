#pragma once

#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bam/base_learner.hpp"
#include "bam/checkpoint.hpp"
#include "bam/encoder.hpp"
#include "bam/ensemble.hpp"
#include "bam/episodic.hpp"
#include "bam/meta_learner.hpp"
#include "bam/nn.hpp"

namespace bam {

enum class LearnerPath { kBam, kMetaOnly, kBaseOnly };
enum class KshotFusion { kReweight, kFeatureAvg, kMaskAvg, kMaskOr };

LearnerPath learner_path_from_name(const std::string& name);
KshotFusion kshot_fusion_from_name(const std::string& name);
std::string kshot_fusion_name(KshotFusion fusion);

struct ModelConfig {
  EncoderConfig encoder;
  int num_base_classes = 0;
  int reduce_channels = 256;
  int base_width = 64;
  int meta_width = 64;
  std::vector<int> ppm_sizes = {1, 2, 3, 6};
  std::vector<int> aspp_dilations = {1, 6, 12};
  bool prior_enabled = true;
  PriorWiring prior_wiring = PriorWiring::kGuidance;
  int gram_tap = 2;  // B1..B4
  bool gram_normalized = true;
  bool psi_enabled = true;
  bool ensemble_identity_init = true;
  int shots = 1;
  int kshot_reduction = 1;
  KshotFusion kshot_fusion = KshotFusion::kReweight;
  bool kshot_reweight_all = true;  // false: eta reweights psi only
  double lambda = 1.0;
  std::uint64_t init_seed = 1;

  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);

  /// Desk-scale preset: 64-channel heads on the default small encoder.
  static ModelConfig desk(int num_base_classes) {
    ModelConfig c;
    c.num_base_classes = num_base_classes;
    c.reduce_channels = 64;
    return c;
  }
};

/// Per-episode evaluation products.
template <typename S>
struct EvalOutput {
  LabelMap pred_mask;    // binary prediction of the selected learner path
  Tensor<S> final_fg;    // {1,H,W} softmaxed foreground of the fused output
  Tensor<S> meta_fg;     // {1,H,W}
  Tensor<S> base_prob;   // {1+N_b,H,W}
  double psi = 0.0;
  bool map_fallback = false;
};

/// The two-learner system: a shared encoder, a supervised base head, a
/// prototype-guided meta head, and the psi-conditioned ensemble that fuses
/// them.
template <typename S>
class BamModel {
 public:
  explicit BamModel(const ModelConfig& config)
      : config_(config), init_rng_(config.init_seed) {
    encoder_ = std::make_unique<Encoder<S>>(params_, config.encoder, init_rng_);
    typename BaseLearner<S>::Config bcfg;
    bcfg.in_channels = config.encoder.widths[3];
    bcfg.num_base_classes = config.num_base_classes;
    bcfg.width = config.base_width;
    bcfg.pool_sizes = config.ppm_sizes;
    bcfg.norm_groups = config.encoder.norm_groups;
    base_ = std::make_unique<BaseLearner<S>>(params_, bcfg, init_rng_);
    typename MetaLearner<S>::Config mcfg;
    mcfg.b2_channels = config.encoder.widths[1];
    mcfg.b3_channels = config.encoder.widths[2];
    mcfg.reduce_channels = config.reduce_channels;
    mcfg.width = config.meta_width;
    mcfg.aspp_dilations = config.aspp_dilations;
    mcfg.norm_groups = config.encoder.norm_groups;
    mcfg.prior_enabled = config.prior_enabled;
    mcfg.prior_wiring = config.prior_wiring;
    meta_ = std::make_unique<MetaLearner<S>>(params_, mcfg, init_rng_);
    ensemble_ = std::make_unique<EnsembleModule<S>>(params_, config.ensemble_identity_init,
                                                    config.psi_enabled, init_rng_);
    if (config.shots > 1)
      reweighter_ = std::make_unique<KshotReweighter<S>>(params_, config.shots,
                                                         config.kshot_reduction, init_rng_);
  }

  ParamStore<S>& params() { return params_; }
  const ParamStore<S>& params() const { return params_; }
  const ModelConfig& config() const { return config_; }
  const Encoder<S>& encoder() const { return *encoder_; }
  const BaseLearner<S>& base_learner() const { return *base_; }
  const MetaLearner<S>& meta_learner() const { return *meta_; }
  const EnsembleModule<S>& ensemble() const { return *ensemble_; }
  PsiStat& psi_stat() { return psi_stat_; }
  const PsiStat& psi_stat() const { return psi_stat_; }

  /// Stage-2 freezing: the shared encoder and the base learner stay fixed.
  void freeze_for_meta_training() {
    params_.set_trainable_prefix("encoder/", false);
    params_.set_trainable_prefix("base/", false);
  }

  // -- Stage 1 ---------------------------------------------------------------

  /// Mean supervised cross-entropy over a batch of (image, dense label)
  /// samples.
  Var<S> stage1_loss(Graph<S>& g, const std::vector<const RgbImage*>& images,
                     const std::vector<const LabelMap*>& labels) {
    if (images.empty() || images.size() != labels.size())
      throw std::invalid_argument("stage1: bad batch");
    ParamUser<S> p(g, params_);
    std::vector<Var<S>> losses;
    for (std::size_t i = 0; i < images.size(); ++i) {
      Var<S> img = g.constant(to_tensor<S>(*images[i]));
      BlockFeatures<S> feats = encoder_->forward(p, img);
      Var<S> prob = base_->forward_prob(p, feats.b4, images[i]->height, images[i]->width);
      losses.push_back(base_loss(prob, *labels[i]));
    }
    return mean_of(losses);
  }

  /// Base probability map for one image (no gradients).
  Tensor<S> base_prob(const RgbImage& image) {
    Graph<S> g;
    ParamUser<S> p(g, params_, /*all_frozen=*/true);
    BlockFeatures<S> feats = encoder_->forward(p, g.constant(to_tensor<S>(image)));
    return base_->forward_prob(p, feats.b4, image.height, image.width).val();
  }

  // -- Stage 2 / shared episode plumbing --------------------------------------

  template <typename T>
  struct EpisodeVars {
    Var<T> meta_prob;       // {2,H,W} softmax
    Var<T> final_prob;      // {2,H,W} softmax of the ensemble scores
    Var<T> base_prob_node;  // {1+N_b,H,W} softmax
    double psi = 0.0;
    std::vector<double> psi_per_shot;
    bool map_fallback = false;
  };

  /// Build the full two-learner forward for one episode inside `g`. Safe to
  /// run concurrently over read-only parameters; raw per-shot psi values are
  /// reported in the result and the caller owns any squash-statistic update
  /// (single writer).
  ///
  /// `exclude_base_channel`: during meta-training the episode's class IS a
  /// base class, and the base learner must contribute only the REMAINING
  /// base categories; passing the target's dense id (1..N_b) drops that
  /// channel from the foreground aggregation. 0 means no exclusion (meta-
  /// testing, where the class is novel).
  EpisodeVars<S> episode_forward(Graph<S>& g, ParamUser<S>& p, const Episode& ep,
                                 int exclude_base_channel = 0) {
    const int shots = ep.shot_count;
    const int out_h = ep.query_image.height, out_w = ep.query_image.width;

    BlockFeatures<S> fq = encoder_->forward(p, g.constant(to_tensor<S>(ep.query_image)));
    Var<S> f_meta_q = meta_->reduce(p, fq.b2, fq.b3);

    std::vector<Var<S>> prototypes;
    std::vector<Var<S>> priors;
    std::vector<Var<S>> psi_consts;
    std::vector<double> psi_raw;
    bool fallback = false;
    GramSignature<S> gram_q = gram_matrix(fq.tap(config_.gram_tap).val(), config_.gram_normalized);

    for (int i = 0; i < shots; ++i) {
      const auto& simg = ep.support_images[static_cast<std::size_t>(i)];
      const auto& smask = ep.support_masks[static_cast<std::size_t>(i)];
      BlockFeatures<S> fs = encoder_->forward(p, g.constant(to_tensor<S>(simg)));
      Var<S> f_meta_s = meta_->reduce(p, fs.b2, fs.b3);
      PrototypeResult<S> proto = masked_average_pooling(f_meta_s, smask);
      fallback = fallback || proto.fallback_used;
      prototypes.push_back(proto.vector);
      if (config_.prior_enabled)
        priors.push_back(g.constant(prior_map(fs.b4.val(), fq.b4.val(), smask)));
      const S psi = adjustment_factor(
          gram_matrix(fs.tap(config_.gram_tap).val(), config_.gram_normalized), gram_q);
      psi_raw.push_back(static_cast<double>(psi));
      psi_consts.push_back(g.constant(Tensor<S>::scalar(psi)));
    }

    // Shot weights: learned for the reweighting scheme, uniform otherwise.
    Var<S> eta;
    const bool reweight = config_.kshot_fusion == KshotFusion::kReweight && shots > 1;
    if (reweight) {
      if (!reweighter_ || reweighter_->shots() != shots)
        throw std::invalid_argument("kshot: model was built for a different shot count");
      std::vector<S> psi_s(psi_raw.begin(), psi_raw.end());
      eta = reweighter_->weights(g, p, psi_s);
    } else {
      eta = g.constant(Tensor<S>::full({shots}, S(1) / static_cast<S>(shots)));
    }
    Var<S> uniform = g.constant(Tensor<S>::full({shots}, S(1) / static_cast<S>(shots)));
    Var<S> feature_eta = (reweight && !config_.kshot_reweight_all) ? uniform : eta;

    Var<S> prototype = shots == 1 ? prototypes[0] : lincomb(prototypes, feature_eta);
    std::optional<Var<S>> prior;
    if (config_.prior_enabled)
      prior = shots == 1 ? priors[0] : lincomb(priors, feature_eta);
    Var<S> psi_var = shots == 1 ? psi_consts[0] : lincomb(psi_consts, eta);

    EpisodeVars<S> out;
    out.map_fallback = fallback;
    out.psi_per_shot = psi_raw;
    out.psi = static_cast<double>(psi_var.val()[0]);
    out.meta_prob = meta_->forward_prob(p, prototype, f_meta_q, prior, out_h, out_w);

    Var<S> base_prob_map = base_->forward_prob(p, fq.b4, out_h, out_w);
    Var<S> base_fg = aggregate_base_foreground(base_prob_map);
    if (exclude_base_channel > 0) {
      if (exclude_base_channel > config_.num_base_classes)
        throw std::invalid_argument("episode: excluded channel out of range");
      base_fg = sub(base_fg, slice_channels(base_prob_map, exclude_base_channel,
                                            exclude_base_channel + 1));
    }
    Var<S> psi_squashed = squash(psi_var, static_cast<S>(psi_stat_.median()));
    Var<S> scores = ensemble_->forward_scores(p, out.meta_prob, base_fg, psi_squashed);
    out.final_prob = softmax_channels(scores);
    out.base_prob_node = base_prob_map;
    return out;
  }

  /// Stage-2 objective for one episode.
  Var<S> episode_loss(const EpisodeVars<S>& vars, const LabelMap& gt) const {
    return total_loss(vars.final_prob, vars.meta_prob, gt, static_cast<S>(config_.lambda));
  }

  // -- Evaluation --------------------------------------------------------------

  EvalOutput<S> eval_episode(const Episode& ep, LearnerPath path) {
    if (path != LearnerPath::kBaseOnly &&
        (config_.kshot_fusion == KshotFusion::kMaskAvg ||
         config_.kshot_fusion == KshotFusion::kMaskOr) &&
        ep.shot_count > 1)
      return eval_episode_maskwise(ep, path);

    Graph<S> g;
    ParamUser<S> p(g, params_, /*all_frozen=*/true);
    if (path == LearnerPath::kBaseOnly) return eval_base_only(g, p, ep);

    EpisodeVars<S> vars = episode_forward(g, p, ep);
    EvalOutput<S> out;
    out.psi = vars.psi;
    out.map_fallback = vars.map_fallback;
    out.base_prob = vars.base_prob_node.val();
    out.meta_fg = slice_tensor_channel(vars.meta_prob.val(), 1);
    out.final_fg = slice_tensor_channel(vars.final_prob.val(), 1);
    const Tensor<S>& chosen =
        path == LearnerPath::kMetaOnly ? vars.meta_prob.val() : vars.final_prob.val();
    out.pred_mask = base_argmax_mask(chosen);
    return out;
  }

 private:
  /// Per-shot forward passes fused at the prediction level (the mask-avg /
  /// mask-or baselines). The probability surface reported for downstream
  /// fusion is the mean (avg) or pointwise max (or) of the per-shot maps.
  EvalOutput<S> eval_episode_maskwise(const Episode& ep, LearnerPath path) {
    const int h = ep.query_image.height, w = ep.query_image.width;
    Tensor<S> fg_acc({1, h, w});
    Tensor<S> meta_acc({1, h, w});
    LabelMap or_mask(h, w);
    EvalOutput<S> out;
    double psi_sum = 0.0;
    for (int i = 0; i < ep.shot_count; ++i) {
      Episode single;
      single.class_id = ep.class_id;
      single.shot_count = 1;
      single.support_images = {ep.support_images[static_cast<std::size_t>(i)]};
      single.support_masks = {ep.support_masks[static_cast<std::size_t>(i)]};
      single.query_image = ep.query_image;
      single.query_mask = ep.query_mask;
      single.query_semantic = ep.query_semantic;

      Graph<S> g;
      ParamUser<S> p(g, params_, /*all_frozen=*/true);
      EpisodeVars<S> vars = episode_forward(g, p, single);
      Tensor<S> fg = slice_tensor_channel(
          path == LearnerPath::kMetaOnly ? vars.meta_prob.val() : vars.final_prob.val(), 1);
      Tensor<S> mfg = slice_tensor_channel(vars.meta_prob.val(), 1);
      psi_sum += vars.psi;
      out.map_fallback = out.map_fallback || vars.map_fallback;
      if (i == 0) out.base_prob = vars.base_prob_node.val();
      if (config_.kshot_fusion == KshotFusion::kMaskAvg) {
        fg_acc.data += fg.data / static_cast<S>(ep.shot_count);
        meta_acc.data += mfg.data / static_cast<S>(ep.shot_count);
      } else {
        fg_acc.data = fg_acc.data.max(fg.data);
        meta_acc.data = meta_acc.data.max(mfg.data);
        LabelMap m = base_argmax_mask(
            path == LearnerPath::kMetaOnly ? vars.meta_prob.val() : vars.final_prob.val());
        for (std::size_t px = 0; px < or_mask.labels.size(); ++px)
          or_mask.labels[px] |= m.labels[px];
      }
    }
    out.psi = psi_sum / ep.shot_count;
    out.final_fg = fg_acc;
    out.meta_fg = meta_acc;
    if (config_.kshot_fusion == KshotFusion::kMaskAvg) {
      LabelMap mask(h, w);
      for (std::int64_t i = 0; i < fg_acc.size(); ++i)
        mask.labels[static_cast<std::size_t>(i)] = fg_acc.data[i] > S(0.5) ? 1 : 0;
      out.pred_mask = mask;
    } else {
      out.pred_mask = or_mask;
    }
    return out;
  }

  EvalOutput<S> eval_base_only(Graph<S>& g, ParamUser<S>& p, const Episode& ep) {
    BlockFeatures<S> fq = encoder_->forward(p, g.constant(to_tensor<S>(ep.query_image)));
    Var<S> prob = base_->forward_prob(p, fq.b4, ep.query_image.height, ep.query_image.width);
    Var<S> fg = aggregate_base_foreground(prob);
    EvalOutput<S> out;
    out.base_prob = prob.val();
    out.final_fg = fg.val();
    out.meta_fg = fg.val();
    out.pred_mask = LabelMap(ep.query_image.height, ep.query_image.width);
    for (std::int64_t i = 0; i < fg.val().size(); ++i)
      out.pred_mask.labels[static_cast<std::size_t>(i)] = fg.val().data[i] > S(0.5) ? 1 : 0;
    return out;
  }

  static Tensor<S> slice_tensor_channel(const Tensor<S>& t, int channel) {
    const int h = t.dim(1), w = t.dim(2);
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    Tensor<S> out({1, h, w});
    out.data = t.data.segment(channel * plane, plane);
    return out;
  }

 public:
  // -- Checkpointing ------------------------------------------------------------

  CheckpointData to_checkpoint(const std::string& stage, const ClassSplit& split,
                               int num_classes, const std::string& train_config_text) const {
    CheckpointData data;
    data.stage = stage;
    data.split = split;
    data.num_classes = num_classes;
    data.psi_median = psi_stat_.median();
    data.psi_count = psi_stat_.count() > 0 ? psi_stat_.count() : psi_stat_.restored_count();
    data.model_config_text = config_.to_text();
    data.train_config_text = train_config_text;
    for (const auto& e : params_.entries())
      data.params.emplace_back(e.name, e.value.template cast<float>());
    return data;
  }

  /// Load parameters by name. Shot-reweighter entries may be absent or
  /// differently sized (evaluating at a different K); anything else must
  /// match exactly.
  void load_params(const CheckpointData& data) {
    std::map<std::string, const Tensor<float>*> by_name;
    for (const auto& [name, tensor] : data.params) by_name[name] = &tensor;
    for (auto& e : params_.entries()) {
      auto it = by_name.find(e.name);
      const bool kshot = e.name.rfind("ens/kshot/", 0) == 0;
      if (it == by_name.end()) {
        if (kshot) continue;
        throw std::runtime_error("checkpoint: missing parameter " + e.name);
      }
      if (it->second->shape != e.value.shape) {
        if (kshot) continue;
        throw std::runtime_error("checkpoint: shape mismatch for " + e.name);
      }
      e.value = it->second->template cast<S>();
      e.momentum = Tensor<S>::zeros(e.value.shape);
    }
    psi_stat_.restore(data.psi_median, data.psi_count);
  }

 private:
  ModelConfig config_;
  Rng init_rng_;
  ParamStore<S> params_;
  std::unique_ptr<Encoder<S>> encoder_;
  std::unique_ptr<BaseLearner<S>> base_;
  std::unique_ptr<MetaLearner<S>> meta_;
  std::unique_ptr<EnsembleModule<S>> ensemble_;
  std::unique_ptr<KshotReweighter<S>> reweighter_;
  PsiStat psi_stat_;
};

}  // namespace bam
