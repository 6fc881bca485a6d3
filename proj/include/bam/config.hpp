#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace bam {

/// Two-stage training and evaluation settings. Desk-scale defaults; the
/// benchmark() preset restores full-scale schedules (1000 episodes, 5
/// seeds, paper learning rates).
struct TrainConfig {
  std::string stage = "pretrain";  // pretrain | meta

  // Schedules. Stage 1 uses poly lr decay; stage 2 keeps lr constant.
  int epochs = 12;
  int batch_size = 12;       // images per step (stage 1) / episodes per step (stage 2)
  double lr = 2.5e-3;        // stage-1 default; meta preset switches to 5e-2
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double max_grad_norm = 10.0;  // global-norm clip; 0 disables
  int episodes_per_epoch = 96;  // stage 2

  int fold = 0;
  int num_folds = 3;
  int shots = 1;
  double lambda = 1.0;
  std::vector<std::uint64_t> seeds = {1, 2, 3};

  std::string annotation_mode = "mask";  // mask | bbox
  bool augment = true;

  // Ablation knobs.
  bool pretrain_init = true;          // load stage-1 weights before stage 2
  bool psi_enabled = true;
  bool ensemble_identity_init = true;
  bool prior_enabled = true;
  std::string prior_wiring = "guidance";  // guidance | post-aspp
  int gram_tap = 2;                       // 1..4
  bool gram_normalized = true;
  std::string kshot_fusion = "reweight";  // reweight | feature-avg | mask-avg | mask-or
  std::string kshot_reweight_scope = "all";  // all | psi-only
  int kshot_reduction = 1;
  // Fraction of stage-2 episodes downgraded to 1-shot when shots > 1, so
  // the decoder keeps seeing un-averaged prototypes while the shot
  // reweighter still trains on full K-shot episodes.
  double mixed_shot_fraction = 0.0;

  // Stage-2 model selection: a slice of training images is held out, scored
  // with base-class episodes every few epochs, and the best snapshot wins.
  // A zero fraction trains to the last step instead.
  double validation_fraction = 0.15;
  int validate_every = 3;
  int validation_episodes = 96;
  std::string train_objective = "bam";  // bam | meta-only

  // Evaluation.
  int eval_episodes = 200;
  std::string learner = "bam";  // bam | meta-only | base-only
  double tau = 0.9;
  std::string fusion_scheme = "main";  // main | alt
  int workers = 2;

  // Data / model scale.
  int image_size = 64;
  int num_classes = 6;
  int reduce_channels = 64;
  int head_width = 64;
  std::uint64_t init_seed = 1;

  void validate() const;

  static TrainConfig meta_defaults();
  /// Paper-scale schedule: 100/200 epochs, 1000 eval episodes, 5 seeds.
  static TrainConfig benchmark(const std::string& stage);
};

/// Plain `key = value` declarative config; '#' starts a comment.
std::map<std::string, std::string> parse_config_file(const std::string& path);
std::map<std::string, std::string> parse_config_text(const std::string& text);

/// Overlay parsed keys onto a config. Unknown keys throw.
void apply_config(TrainConfig& config, const std::map<std::string, std::string>& kv);

/// Serialize every field as key=value lines (round-trips through
/// parse/apply).
std::string config_to_text(const TrainConfig& config);

}  // namespace bam
