#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "bam/episodic.hpp"
#include "bam/tensor.hpp"

namespace bam {

/// Versioned parameter container shared by stage-1 and stage-2 artifacts:
/// a name -> shaped float array dictionary plus the fold's class-id table
/// and the configs that produced it. Layout: magic "BAMCKPT1", format
/// version, a JSON manifest (names, shapes, offsets, metadata), then raw
/// little-endian float32 data.
struct CheckpointData {
  std::string stage;  // pretrain | meta
  std::vector<std::pair<std::string, Tensor<float>>> params;
  ClassSplit split;
  int num_classes = 0;
  double psi_median = 1.0;
  std::int64_t psi_count = 0;
  std::string model_config_text;
  std::string train_config_text;
};

void save_checkpoint(const std::string& path, const CheckpointData& data);
CheckpointData load_checkpoint(const std::string& path);

}  // namespace bam
