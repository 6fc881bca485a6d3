#include "bam/model.hpp"

#include <sstream>
#include <stdexcept>

#include "bam/config.hpp"

namespace bam {

LearnerPath learner_path_from_name(const std::string& name) {
  if (name == "bam") return LearnerPath::kBam;
  if (name == "meta-only") return LearnerPath::kMetaOnly;
  if (name == "base-only") return LearnerPath::kBaseOnly;
  throw std::invalid_argument("unknown learner path: " + name);
}

KshotFusion kshot_fusion_from_name(const std::string& name) {
  if (name == "reweight") return KshotFusion::kReweight;
  if (name == "feature-avg") return KshotFusion::kFeatureAvg;
  if (name == "mask-avg") return KshotFusion::kMaskAvg;
  if (name == "mask-or") return KshotFusion::kMaskOr;
  throw std::invalid_argument("unknown kshot fusion: " + name);
}

std::string kshot_fusion_name(KshotFusion fusion) {
  switch (fusion) {
    case KshotFusion::kReweight: return "reweight";
    case KshotFusion::kFeatureAvg: return "feature-avg";
    case KshotFusion::kMaskAvg: return "mask-avg";
    case KshotFusion::kMaskOr: return "mask-or";
  }
  return "reweight";
}

namespace {

std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

std::vector<int> parse_ints(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stoi(tok));
  return out;
}

}  // namespace

std::string ModelConfig::to_text() const {
  std::ostringstream out;
  out << "widths = " << encoder.widths[0] << "," << encoder.widths[1] << ","
      << encoder.widths[2] << "," << encoder.widths[3] << "\n";
  out << "strides = " << encoder.strides[0] << "," << encoder.strides[1] << ","
      << encoder.strides[2] << "," << encoder.strides[3] << "\n";
  out << "norm_groups = " << encoder.norm_groups << "\n";
  out << "num_base_classes = " << num_base_classes << "\n";
  out << "reduce_channels = " << reduce_channels << "\n";
  out << "base_width = " << base_width << "\n";
  out << "meta_width = " << meta_width << "\n";
  out << "ppm_sizes = " << join_ints(ppm_sizes) << "\n";
  out << "aspp_dilations = " << join_ints(aspp_dilations) << "\n";
  out << "prior_enabled = " << (prior_enabled ? "true" : "false") << "\n";
  out << "prior_wiring = " << (prior_wiring == PriorWiring::kGuidance ? "guidance" : "post-aspp")
      << "\n";
  out << "gram_tap = " << gram_tap << "\n";
  out << "gram_normalized = " << (gram_normalized ? "true" : "false") << "\n";
  out << "psi_enabled = " << (psi_enabled ? "true" : "false") << "\n";
  out << "ensemble_identity_init = " << (ensemble_identity_init ? "true" : "false") << "\n";
  out << "shots = " << shots << "\n";
  out << "kshot_reduction = " << kshot_reduction << "\n";
  out << "kshot_fusion = " << kshot_fusion_name(kshot_fusion) << "\n";
  out << "kshot_reweight_all = " << (kshot_reweight_all ? "true" : "false") << "\n";
  out << "lambda = " << lambda << "\n";
  out << "init_seed = " << init_seed << "\n";
  return out.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  auto kv = parse_config_text(text);
  ModelConfig c;
  auto get = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw std::invalid_argument("model config: missing key " + key);
    return it->second;
  };
  auto widths = parse_ints(get("widths"));
  auto strides = parse_ints(get("strides"));
  if (widths.size() != 4 || strides.size() != 4)
    throw std::invalid_argument("model config: widths/strides must have 4 entries");
  for (int i = 0; i < 4; ++i) {
    c.encoder.widths[static_cast<std::size_t>(i)] = widths[static_cast<std::size_t>(i)];
    c.encoder.strides[static_cast<std::size_t>(i)] = strides[static_cast<std::size_t>(i)];
  }
  c.encoder.norm_groups = std::stoi(get("norm_groups"));
  c.num_base_classes = std::stoi(get("num_base_classes"));
  c.reduce_channels = std::stoi(get("reduce_channels"));
  c.base_width = std::stoi(get("base_width"));
  c.meta_width = std::stoi(get("meta_width"));
  c.ppm_sizes = parse_ints(get("ppm_sizes"));
  c.aspp_dilations = parse_ints(get("aspp_dilations"));
  c.prior_enabled = get("prior_enabled") == "true";
  c.prior_wiring =
      get("prior_wiring") == "post-aspp" ? PriorWiring::kPostAspp : PriorWiring::kGuidance;
  c.gram_tap = std::stoi(get("gram_tap"));
  c.gram_normalized = get("gram_normalized") == "true";
  c.psi_enabled = get("psi_enabled") == "true";
  c.ensemble_identity_init = get("ensemble_identity_init") == "true";
  c.shots = std::stoi(get("shots"));
  c.kshot_reduction = std::stoi(get("kshot_reduction"));
  c.kshot_fusion = kshot_fusion_from_name(get("kshot_fusion"));
  c.kshot_reweight_all = get("kshot_reweight_all") == "true";
  c.lambda = std::stod(get("lambda"));
  c.init_seed = std::stoull(get("init_seed"));
  return c;
}

}  // namespace bam
