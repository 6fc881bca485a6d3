// Command-line harness: synthetic data generation, two-stage training,
// episodic evaluation, generalized evaluation, and the Gram FLOPs helper.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>

#include "CLI11.hpp"
#include "bam/checkpoint.hpp"
#include "bam/config.hpp"
#include "bam/image_io.hpp"
#include "bam/model.hpp"
#include "bam/report.hpp"
#include "bam/train.hpp"

namespace {

using namespace bam;

using Scalar = float;

struct CommonArgs {
  std::string config_file;
  std::map<std::string, std::string> overrides;
};

TrainConfig resolve_config(const std::string& config_file,
                           const std::map<std::string, std::string>& overrides,
                           const std::string& stage) {
  TrainConfig cfg = stage == "meta" ? TrainConfig::meta_defaults() : TrainConfig{};
  cfg.stage = stage;
  if (!config_file.empty()) apply_config(cfg, parse_config_file(config_file));
  apply_config(cfg, overrides);
  cfg.validate();
  return cfg;
}

ModelConfig model_config_from(const TrainConfig& cfg, int num_base, std::uint64_t seed) {
  ModelConfig mc = ModelConfig::desk(num_base);
  mc.reduce_channels = cfg.reduce_channels;
  mc.base_width = cfg.head_width;
  mc.meta_width = cfg.head_width;
  mc.prior_enabled = cfg.prior_enabled;
  mc.prior_wiring =
      cfg.prior_wiring == "post-aspp" ? PriorWiring::kPostAspp : PriorWiring::kGuidance;
  mc.gram_tap = cfg.gram_tap;
  mc.gram_normalized = cfg.gram_normalized;
  mc.psi_enabled = cfg.psi_enabled;
  mc.ensemble_identity_init = cfg.ensemble_identity_init;
  mc.shots = cfg.shots;
  mc.kshot_reduction = cfg.kshot_reduction;
  mc.kshot_fusion = kshot_fusion_from_name(cfg.kshot_fusion);
  mc.kshot_reweight_all = cfg.kshot_reweight_scope != "psi-only";
  mc.lambda = cfg.lambda;
  mc.init_seed = seed;
  return mc;
}

ClassSplit split_for(const Dataset& data, const TrainConfig& cfg) {
  return split_folds(data.num_classes, cfg.fold, cfg.num_folds);
}

int cmd_synth_data(const std::string& out_dir, int classes, int images, std::uint64_t seed,
                   int size, int folds, int shapes_min, int shapes_max, double noise) {
  SceneSpec spec;
  spec.canvas_size = size;
  spec.shape_classes = default_shape_classes(classes);
  spec.min_shapes_per_image = shapes_min;
  spec.max_shapes_per_image = shapes_max;
  spec.noise_level = noise;
  Dataset data = Dataset::generate(spec, images, seed);
  data.save(out_dir, folds);
  std::cout << "wrote " << images << " scenes (" << classes << " classes, " << folds
            << " folds) to " << out_dir << "\n";
  return 0;
}

int cmd_pretrain(const TrainConfig& cfg, const std::string& data_dir, const std::string& out) {
  Dataset data = Dataset::load(data_dir);
  ClassSplit split = split_for(data, cfg);
  const std::uint64_t seed = cfg.seeds.front();
  BamModel<Scalar> model(
      model_config_from(cfg, static_cast<int>(split.base_classes.size()), seed));
  TrainResult result = pretrain_base(model, data, split, cfg, seed);
  for (std::size_t e = 0; e < result.epoch_losses.size(); ++e)
    std::cout << "epoch " << e << "  loss " << result.epoch_losses[e] << "\n";
  save_checkpoint(out, model.to_checkpoint("pretrain", split, data.num_classes,
                                           config_to_text(cfg)));
  std::cout << "saved stage-1 checkpoint to " << out << "\n";
  return 0;
}

int cmd_meta_train(const TrainConfig& cfg, const std::string& data_dir,
                   const std::string& init_ckpt, const std::string& out) {
  Dataset data = Dataset::load(data_dir);
  ClassSplit split = split_for(data, cfg);
  const std::uint64_t seed = cfg.seeds.front();

  ModelConfig mc = model_config_from(cfg, static_cast<int>(split.base_classes.size()), seed);
  if (cfg.pretrain_init) {
    if (init_ckpt.empty())
      throw std::runtime_error("meta-train: --init checkpoint required (or set pretrain_init=false)");
    CheckpointData stage1 = load_checkpoint(init_ckpt);
    ModelConfig base_mc = ModelConfig::from_text(stage1.model_config_text);
    // Stage-2 inherits the trained trunk's architecture; ablation knobs and
    // the shot setting come from this run's config.
    base_mc.prior_enabled = mc.prior_enabled;
    base_mc.prior_wiring = mc.prior_wiring;
    base_mc.gram_tap = mc.gram_tap;
    base_mc.gram_normalized = mc.gram_normalized;
    base_mc.psi_enabled = mc.psi_enabled;
    base_mc.ensemble_identity_init = mc.ensemble_identity_init;
    base_mc.shots = mc.shots;
    base_mc.kshot_reduction = mc.kshot_reduction;
    base_mc.kshot_fusion = mc.kshot_fusion;
    base_mc.kshot_reweight_all = mc.kshot_reweight_all;
    base_mc.lambda = mc.lambda;
    base_mc.init_seed = seed;
    BamModel<Scalar> model(base_mc);
    // Tolerant load: stage-1 checkpoints lack meta/ensemble entries.
    std::map<std::string, const Tensor<float>*> by_name;
    for (const auto& [name, tensor] : stage1.params) by_name[name] = &tensor;
    for (auto& e : model.params().entries()) {
      auto it = by_name.find(e.name);
      if (it == by_name.end()) continue;
      if (it->second->shape != e.value.shape)
        throw std::runtime_error("meta-train: stage-1 shape mismatch for " + e.name);
      e.value = *it->second;
    }
    TrainResult result = meta_train(model, data, split, cfg, seed);
    for (std::size_t e = 0; e < result.epoch_losses.size(); ++e)
      std::cout << "epoch " << e << "  loss " << result.epoch_losses[e] << "\n";
    save_checkpoint(out, model.to_checkpoint("meta", split, data.num_classes,
                                             config_to_text(cfg)));
  } else {
    BamModel<Scalar> model(mc);
    TrainResult result = meta_train(model, data, split, cfg, seed);
    for (std::size_t e = 0; e < result.epoch_losses.size(); ++e)
      std::cout << "epoch " << e << "  loss " << result.epoch_losses[e] << "\n";
    save_checkpoint(out, model.to_checkpoint("meta", split, data.num_classes,
                                             config_to_text(cfg)));
  }
  std::cout << "saved stage-2 checkpoint to " << out << "\n";
  return 0;
}

BamModel<Scalar> model_from_checkpoint(const std::string& path, const TrainConfig& cfg,
                                       ClassSplit* split_out, int* num_classes_out) {
  CheckpointData ckpt = load_checkpoint(path);
  ModelConfig mc = ModelConfig::from_text(ckpt.model_config_text);
  // Evaluation-time knobs that do not touch stored parameters.
  mc.kshot_fusion = kshot_fusion_from_name(cfg.kshot_fusion);
  mc.kshot_reweight_all = cfg.kshot_reweight_scope != "psi-only";
  if (cfg.shots > 1 && mc.shots == 1) mc.shots = cfg.shots;  // uniform-weight K-shot eval
  BamModel<Scalar> model(mc);
  model.load_params(ckpt);
  if (split_out) *split_out = ckpt.split;
  if (num_classes_out) *num_classes_out = ckpt.num_classes;
  return model;
}

int cmd_evaluate(const TrainConfig& cfg, const std::string& data_dir, const std::string& ckpt,
                 const std::string& out_json, const std::string& plot_path, bool tap_sweep) {
  Dataset data = Dataset::load(data_dir);
  ClassSplit split;
  int num_classes = 0;
  BamModel<Scalar> model = model_from_checkpoint(ckpt, cfg, &split, &num_classes);
  if (num_classes != data.num_classes)
    std::cout << "note: checkpoint was trained with " << num_classes
              << " classes; dataset has " << data.num_classes << "\n";

  EvalOptions opt;
  opt.episodes = cfg.eval_episodes;
  opt.shots = cfg.shots;
  opt.path = learner_path_from_name(cfg.learner);
  opt.annotation_mode = cfg.annotation_mode;
  opt.workers = cfg.workers;

  ResultsTable table;
  table.title = "standard " + std::to_string(cfg.shots) + "-shot, fold-" +
                std::to_string(split.fold_index) + ", learner " + cfg.learner;
  table.columns = {};
  std::vector<double> mious, fbs;
  for (std::uint64_t seed : cfg.seeds) {
    MetricsRecord rec = evaluate(model, data, split, opt, seed);
    table.columns.push_back("seed-" + std::to_string(seed));
    mious.push_back(rec.miou);
    fbs.push_back(rec.fb_iou);
  }
  table.columns.push_back("mean");
  auto with_mean = [](std::vector<double> v) {
    v.push_back(std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()));
    return v;
  };
  table.rows = {{"mIoU", with_mean(mious)}, {"FB-IoU", with_mean(fbs)}};
  std::cout << table.to_text();
  if (!out_json.empty()) table.save_json(out_json);

  if (tap_sweep) {
    // Accuracy against the analytic operation count of each tap choice.
    CurveSeries curve;
    curve.name = "mIoU vs FLOPs";
    ResultsTable taps;
    taps.title = "gram tap sweep";
    taps.columns = {"flops", "mIoU"};
    for (int tap = 1; tap <= 4; ++tap) {
      CheckpointData raw = load_checkpoint(ckpt);
      ModelConfig mc = ModelConfig::from_text(raw.model_config_text);
      mc.gram_tap = tap;
      BamModel<Scalar> tap_model(mc);
      tap_model.load_params(raw);
      // the squash median was fit for the trained tap; refit for others
      if (tap != ModelConfig::from_text(raw.model_config_text).gram_tap)
        calibrate_psi(tap_model, data, split, 32, cfg.shots, cfg.seeds.front());
      MetricsRecord rec = evaluate(tap_model, data, split, opt, cfg.seeds.front());
      const auto& enc = tap_model.config().encoder;
      int spatial = data.images.front().height;
      for (int b = 0; b < tap; ++b) spatial /= enc.strides[static_cast<std::size_t>(b)];
      const std::uint64_t flops =
          gram_flops(static_cast<std::uint64_t>(enc.widths[static_cast<std::size_t>(tap - 1)]),
                     static_cast<std::uint64_t>(spatial), static_cast<std::uint64_t>(spatial));
      curve.points.emplace_back(static_cast<double>(flops) / 1e6, rec.miou);
      taps.rows.push_back({"B" + std::to_string(tap),
                           {static_cast<double>(flops) / 1e6, rec.miou}});
      std::cout << "tap B" << tap << "  flops " << flops_display(flops) << "  mIoU "
                << rec.miou << "\n";
    }
    if (!plot_path.empty())
      write_svg_plot(plot_path, "accuracy vs gram-tap cost", "MFLOPs", "mIoU", {curve});
  }
  return 0;
}

int cmd_evaluate_generalized(const TrainConfig& cfg, const std::string& data_dir,
                             const std::string& ckpt, const std::string& out_json,
                             const std::string& sweep_spec, const std::string& plot_path) {
  Dataset data = Dataset::load(data_dir);
  ClassSplit split;
  BamModel<Scalar> model = model_from_checkpoint(ckpt, cfg, &split, nullptr);

  EvalOptions opt;
  opt.episodes = cfg.eval_episodes;
  opt.shots = cfg.shots;
  opt.annotation_mode = cfg.annotation_mode;
  opt.workers = cfg.workers;
  const bool alt = cfg.fusion_scheme == "alt";

  ResultsTable table;
  table.title = "generalized " + std::to_string(cfg.shots) + "-shot, fold-" +
                std::to_string(split.fold_index) + ", tau " + std::to_string(cfg.tau) +
                ", scheme " + cfg.fusion_scheme;
  table.columns = {"mIoU_n", "mIoU_b", "mIoU_a"};
  for (const std::string learner : {"bam", "bam-without-ensemble"}) {
    opt.path = learner == "bam" ? LearnerPath::kBam : LearnerPath::kMetaOnly;
    std::vector<double> n_vals, b_vals, a_vals;
    for (std::uint64_t seed : cfg.seeds) {
      MetricsRecord rec = evaluate_generalized(model, data, split, opt, cfg.tau, alt, seed);
      n_vals.push_back(rec.miou_n.value());
      b_vals.push_back(rec.miou_b.value());
      a_vals.push_back(rec.miou_a.value());
    }
    auto mean = [](const std::vector<double>& v) {
      return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };
    table.rows.push_back({learner, {mean(n_vals), mean(b_vals), mean(a_vals)}});
  }
  std::cout << table.to_text();
  if (!out_json.empty()) table.save_json(out_json);

  if (!sweep_spec.empty()) {
    double lo = 0.5, hi = 0.95, step = 0.05;
    std::sscanf(sweep_spec.c_str(), "%lf:%lf:%lf", &lo, &hi, &step);
    opt.path = LearnerPath::kBam;
    auto dumps = collect_generalized_dumps(model, data, split, opt, cfg.seeds.front());
    CurveSeries cn{"mIoU_n", {}}, cb{"mIoU_b", {}}, ca{"mIoU_a", {}};
    ResultsTable sweep;
    sweep.title = "tau sweep (" + cfg.fusion_scheme + ")";
    sweep.columns = {"mIoU_n", "mIoU_b", "mIoU_a"};
    for (double tau = lo; tau <= hi + 1e-9; tau += step) {
      MetricsRecord rec = score_generalized(dumps, split, tau, alt);
      cn.points.emplace_back(tau, rec.miou_n.value());
      cb.points.emplace_back(tau, rec.miou_b.value());
      ca.points.emplace_back(tau, rec.miou_a.value());
      sweep.rows.push_back({"tau=" + std::to_string(tau),
                            {rec.miou_n.value(), rec.miou_b.value(), rec.miou_a.value()}});
    }
    std::cout << sweep.to_text();
    if (!out_json.empty()) {
      const std::string sweep_path =
          out_json.substr(0, out_json.find_last_of('.')) + "_tau_sweep.json";
      sweep.save_json(sweep_path);
    }
    if (!plot_path.empty())
      write_svg_plot(plot_path, "generalized merge threshold sweep", "tau", "mIoU",
                     {cn, cb, ca});
  }
  return 0;
}

int cmd_flops(std::uint64_t channels, std::uint64_t height, std::uint64_t width) {
  const std::uint64_t count = gram_flops(channels, height, width);
  std::cout << "gram flops(C=" << channels << ", H=" << height << ", W=" << width
            << ") = " << count << " (" << flops_display(count) << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"two-learner few-shot segmentation harness"};
  app.require_subcommand(1);

  // synth-data ---------------------------------------------------------------
  auto* synth = app.add_subcommand("synth-data", "generate a shapes-world dataset");
  std::string out_dir;
  int classes = 6, images = 240, size = 64, folds = 3, shapes_min = 2, shapes_max = 4;
  std::uint64_t synth_seed = 1;
  double noise = 0.02;
  synth->add_option("--out", out_dir, "output directory")->required();
  synth->add_option("--classes", classes, "number of shape classes (1..8)");
  synth->add_option("--images", images, "number of scenes");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--size", size, "canvas size (>= 32)");
  synth->add_option("--folds", folds, "fold count written to folds.json");
  synth->add_option("--shapes-min", shapes_min, "min shapes per scene");
  synth->add_option("--shapes-max", shapes_max, "max shapes per scene");
  synth->add_option("--noise", noise, "additive noise level");

  // shared train/eval options --------------------------------------------------
  auto add_common = [](CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_file, "key = value config file");
    auto opt = [cmd, &args](const std::string& flag, const std::string& key) {
      cmd->add_option_function<std::string>(
          flag, [key, &args](const std::string& v) { args.overrides[key] = v; });
    };
    opt("--epochs", "epochs");
    opt("--batch-size", "batch_size");
    opt("--lr", "lr");
    opt("--fold", "fold");
    opt("--num-folds", "num_folds");
    opt("--shots", "shots");
    opt("--lambda", "lambda");
    opt("--seeds", "seeds");
    opt("--episodes", "eval_episodes");
    opt("--episodes-per-epoch", "episodes_per_epoch");
    opt("--learner", "learner");
    opt("--annotation", "annotation_mode");
    opt("--tau", "tau");
    opt("--scheme", "fusion_scheme");
    opt("--workers", "workers");
    opt("--gram-tap", "gram_tap");
    opt("--kshot-fusion", "kshot_fusion");
    opt("--kshot-reweight-scope", "kshot_reweight_scope");
    opt("--mixed-shot-fraction", "mixed_shot_fraction");
    opt("--objective", "train_objective");
    opt("--prior-wiring", "prior_wiring");
    opt("--reduce-channels", "reduce_channels");
    opt("--head-width", "head_width");
    cmd->add_flag_function("--no-psi",
                           [&args](std::int64_t) { args.overrides["psi_enabled"] = "false"; });
    cmd->add_flag_function("--no-ensemble-init", [&args](std::int64_t) {
      args.overrides["ensemble_identity_init"] = "false";
    });
    cmd->add_flag_function("--no-prior",
                           [&args](std::int64_t) { args.overrides["prior_enabled"] = "false"; });
    cmd->add_flag_function("--no-augment",
                           [&args](std::int64_t) { args.overrides["augment"] = "false"; });
    cmd->add_flag_function("--no-pretrain", [&args](std::int64_t) {
      args.overrides["pretrain_init"] = "false";
    });
    cmd->add_flag_function("--raw-gram", [&args](std::int64_t) {
      args.overrides["gram_normalized"] = "false";
    });
  };

  auto* pretrain = app.add_subcommand("pretrain-base", "stage 1: supervised base training");
  std::string pre_data, pre_out = "stage1.bam";
  CommonArgs pre_args;
  pretrain->add_option("--data", pre_data, "dataset directory")->required();
  pretrain->add_option("--out", pre_out, "checkpoint output path");
  add_common(pretrain, pre_args);

  auto* meta = app.add_subcommand("meta-train", "stage 2: episodic meta + ensemble training");
  std::string meta_data, meta_init, meta_out = "stage2.bam";
  CommonArgs meta_args;
  meta->add_option("--data", meta_data, "dataset directory")->required();
  meta->add_option("--init", meta_init, "stage-1 checkpoint");
  meta->add_option("--out", meta_out, "checkpoint output path");
  add_common(meta, meta_args);

  auto* eval_cmd = app.add_subcommand("evaluate", "episodic evaluation on novel classes");
  std::string eval_data, eval_ckpt, eval_json, eval_plot;
  bool tap_sweep = false;
  CommonArgs eval_args;
  eval_cmd->add_option("--data", eval_data, "dataset directory")->required();
  eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint")->required();
  eval_cmd->add_option("--out", eval_json, "machine-readable results path");
  eval_cmd->add_option("--plot", eval_plot, "SVG plot path");
  eval_cmd->add_flag("--tap-sweep", tap_sweep, "evaluate every gram tap (accuracy vs FLOPs)");
  add_common(eval_cmd, eval_args);

  auto* gen_cmd = app.add_subcommand("evaluate-generalized",
                                     "generalized evaluation (base + novel pixels)");
  std::string gen_data, gen_ckpt, gen_json, gen_plot, gen_sweep;
  CommonArgs gen_args;
  gen_cmd->add_option("--data", gen_data, "dataset directory")->required();
  gen_cmd->add_option("--ckpt", gen_ckpt, "checkpoint")->required();
  gen_cmd->add_option("--out", gen_json, "machine-readable results path");
  gen_cmd->add_option("--plot", gen_plot, "SVG plot path");
  gen_cmd->add_option("--tau-sweep", gen_sweep, "sweep spec lo:hi:step");
  add_common(gen_cmd, gen_args);

  auto* flops_cmd = app.add_subcommand("flops", "Gram-based indicator operation count");
  std::uint64_t fc = 512, fh = 60, fw = 60;
  flops_cmd->add_option("--channels", fc, "feature channels");
  flops_cmd->add_option("--height", fh, "feature height");
  flops_cmd->add_option("--width", fw, "feature width");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed())
      return cmd_synth_data(out_dir, classes, images, synth_seed, size, folds, shapes_min,
                            shapes_max, noise);
    if (pretrain->parsed())
      return cmd_pretrain(resolve_config(pre_args.config_file, pre_args.overrides, "pretrain"),
                          pre_data, pre_out);
    if (meta->parsed())
      return cmd_meta_train(resolve_config(meta_args.config_file, meta_args.overrides, "meta"),
                            meta_data, meta_init, meta_out);
    if (eval_cmd->parsed())
      return cmd_evaluate(resolve_config(eval_args.config_file, eval_args.overrides, "meta"),
                          eval_data, eval_ckpt, eval_json, eval_plot, tap_sweep);
    if (gen_cmd->parsed())
      return cmd_evaluate_generalized(
          resolve_config(gen_args.config_file, gen_args.overrides, "meta"), gen_data, gen_ckpt,
          gen_json, gen_sweep, gen_plot);
    if (flops_cmd->parsed()) return cmd_flops(fc, fh, fw);
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 0;
}
