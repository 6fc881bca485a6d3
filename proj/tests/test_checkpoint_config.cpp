#include "doctest.h"

#include "bam/checkpoint.hpp"
#include "bam/config.hpp"
#include "bam/model.hpp"
#include "bam/report.hpp"

using namespace bam;

TEST_CASE("checkpoint round-trips parameters bit-exactly") {
  ModelConfig cfg = ModelConfig::desk(4);
  cfg.encoder.widths = {4, 4, 8, 8};
  cfg.encoder.norm_groups = 2;
  cfg.reduce_channels = 8;
  cfg.base_width = 8;
  cfg.meta_width = 8;
  cfg.aspp_dilations = {1, 2};
  cfg.ppm_sizes = {1, 2};
  cfg.init_seed = 42;
  BamModel<float> model(cfg);
  model.psi_stat().observe(2.5);
  model.psi_stat().observe(3.5);

  ClassSplit split = split_folds(6, 1, 3);
  CheckpointData data = model.to_checkpoint("pretrain", split, 6, "epochs = 3\n");
  save_checkpoint("/tmp/bam_test_ckpt.bin", data);
  CheckpointData back = load_checkpoint("/tmp/bam_test_ckpt.bin");

  CHECK(back.stage == "pretrain");
  CHECK(back.num_classes == 6);
  CHECK(back.split.fold_index == 1);
  CHECK(back.split.novel_classes == split.novel_classes);
  CHECK(back.psi_median == doctest::Approx(3.0));
  CHECK(back.params.size() == data.params.size());
  for (std::size_t i = 0; i < back.params.size(); ++i) {
    CHECK(back.params[i].first == data.params[i].first);
    CHECK((back.params[i].second.data == data.params[i].second.data).all());
  }

  // loading into a freshly built model restores every value
  BamModel<float> other(ModelConfig::from_text(back.model_config_text));
  other.load_params(back);
  CHECK(other.params().hash_prefix("") == model.params().hash_prefix(""));
  CHECK(other.psi_stat().median() == doctest::Approx(3.0));
}

TEST_CASE("checkpoint loading validates names and shapes") {
  ModelConfig cfg = ModelConfig::desk(2);
  cfg.encoder.widths = {4, 4, 8, 8};
  cfg.encoder.norm_groups = 2;
  cfg.reduce_channels = 8;
  cfg.base_width = 8;
  cfg.meta_width = 8;
  cfg.aspp_dilations = {1};
  cfg.ppm_sizes = {1, 2};
  BamModel<float> model(cfg);
  ClassSplit split = split_folds(6, 0, 3);
  CheckpointData data = model.to_checkpoint("meta", split, 6, "");
  data.params.erase(data.params.begin());  // drop a required entry
  CHECK_THROWS(model.load_params(data));

  // a missing shot-reweighter entry is tolerated (different eval K)
  ModelConfig cfg5 = cfg;
  cfg5.shots = 5;
  BamModel<float> model5(cfg5);
  CheckpointData data1 = model.to_checkpoint("meta", split, 6, "");
  model5.load_params(data1);  // no throw: kshot params keep their init
}

TEST_CASE("model config text round-trips") {
  ModelConfig cfg = ModelConfig::desk(7);
  cfg.encoder.strides = {2, 2, 2, 1};
  cfg.prior_wiring = PriorWiring::kPostAspp;
  cfg.gram_tap = 3;
  cfg.psi_enabled = false;
  cfg.shots = 5;
  cfg.kshot_fusion = KshotFusion::kMaskAvg;
  cfg.lambda = 0.5;
  ModelConfig back = ModelConfig::from_text(cfg.to_text());
  CHECK(back.encoder.strides == cfg.encoder.strides);
  CHECK(back.num_base_classes == 7);
  CHECK(back.prior_wiring == PriorWiring::kPostAspp);
  CHECK(back.gram_tap == 3);
  CHECK_FALSE(back.psi_enabled);
  CHECK(back.shots == 5);
  CHECK(back.kshot_fusion == KshotFusion::kMaskAvg);
  CHECK(back.lambda == doctest::Approx(0.5));
}

TEST_CASE("train config parses, validates, and round-trips") {
  TrainConfig cfg;
  auto kv = parse_config_text("epochs = 9\nlr = 0.5 # comment\nseeds = 4,5,6\n");
  apply_config(cfg, kv);
  CHECK(cfg.epochs == 9);
  CHECK(cfg.lr == doctest::Approx(0.5));
  CHECK(cfg.seeds == std::vector<std::uint64_t>{4, 5, 6});

  TrainConfig back;
  apply_config(back, parse_config_text(config_to_text(cfg)));
  CHECK(config_to_text(back) == config_to_text(cfg));

  CHECK_THROWS(apply_config(cfg, parse_config_text("unknown_key = 1\n")));
  TrainConfig bad;
  bad.lr = -1;
  CHECK_THROWS(bad.validate());
  TrainConfig bad2;
  bad2.shots = 0;
  CHECK_THROWS(bad2.validate());
  TrainConfig bad3;
  bad3.lambda = -0.5;
  CHECK_THROWS(bad3.validate());
}

TEST_CASE("results tables round-trip losslessly through json") {
  ResultsTable t;
  t.title = "standard 1-shot";
  t.columns = {"fold-0", "fold-1", "mean"};
  t.rows = {{"meta-only", {0.512345678901234, 0.6, 0.5561728394506171}},
            {"bam", {0.55, 0.62, 0.585}}};
  ResultsTable back = ResultsTable::from_json_text(t.to_json_text());
  CHECK(back.title == t.title);
  CHECK(back.columns == t.columns);
  REQUIRE(back.rows.size() == 2);
  for (std::size_t r = 0; r < 2; ++r) {
    CHECK(back.rows[r].first == t.rows[r].first);
    for (std::size_t c = 0; c < 3; ++c)
      CHECK(back.rows[r].second[c] == t.rows[r].second[c]);  // exact
  }
  CHECK_FALSE(t.to_text().empty());
}
