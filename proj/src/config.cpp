#include "bam/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace bam {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw std::invalid_argument("config: bad boolean value: " + v);
}

std::vector<std::uint64_t> parse_seed_list(const std::string& v) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(v);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (!tok.empty()) seeds.push_back(std::stoull(tok));
  }
  if (seeds.empty()) throw std::invalid_argument("config: empty seed list");
  return seeds;
}

std::string seeds_to_string(const std::vector<std::uint64_t>& seeds) {
  std::string out;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(seeds[i]);
  }
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  if (lr <= 0) throw std::invalid_argument("config: lr must be positive");
  if (lambda < 0) throw std::invalid_argument("config: lambda must be non-negative");
  if (shots < 1) throw std::invalid_argument("config: shots must be >= 1");
  if (epochs < 1) throw std::invalid_argument("config: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
  if (fold < 0 || fold >= num_folds) throw std::invalid_argument("config: fold out of range");
  if (gram_tap < 1 || gram_tap > 4) throw std::invalid_argument("config: gram_tap must be 1..4");
  if (tau < 0 || tau > 1) throw std::invalid_argument("config: tau must be in [0, 1]");
  if (shots % kshot_reduction != 0)
    throw std::invalid_argument("config: shots must be divisible by kshot_reduction");
  if (annotation_mode != "mask" && annotation_mode != "bbox")
    throw std::invalid_argument("config: annotation_mode must be mask or bbox");
  if (seeds.empty()) throw std::invalid_argument("config: at least one seed required");
}

TrainConfig TrainConfig::meta_defaults() {
  TrainConfig c;
  c.stage = "meta";
  c.epochs = 6;
  c.batch_size = 8;
  c.lr = 5e-2;
  return c;
}

TrainConfig TrainConfig::benchmark(const std::string& stage) {
  TrainConfig c;
  c.stage = stage;
  if (stage == "pretrain") {
    c.epochs = 100;
    c.batch_size = 12;
    c.lr = 2.5e-3;
  } else {
    c.epochs = 200;
    c.batch_size = 8;
    c.lr = 5e-2;
  }
  c.eval_episodes = 1000;
  c.seeds = {1, 2, 3, 4, 5};
  c.num_folds = 4;
  c.reduce_channels = 256;
  return c;
}

std::map<std::string, std::string> parse_config_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: missing '=' on line " + std::to_string(lineno));
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

std::map<std::string, std::string> parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

void apply_config(TrainConfig& c, const std::map<std::string, std::string>& kv) {
  for (const auto& [key, value] : kv) {
    if (key == "stage") c.stage = value;
    else if (key == "epochs") c.epochs = std::stoi(value);
    else if (key == "batch_size") c.batch_size = std::stoi(value);
    else if (key == "lr") c.lr = std::stod(value);
    else if (key == "momentum") c.momentum = std::stod(value);
    else if (key == "weight_decay") c.weight_decay = std::stod(value);
    else if (key == "max_grad_norm") c.max_grad_norm = std::stod(value);
    else if (key == "episodes_per_epoch") c.episodes_per_epoch = std::stoi(value);
    else if (key == "fold") c.fold = std::stoi(value);
    else if (key == "num_folds") c.num_folds = std::stoi(value);
    else if (key == "shots") c.shots = std::stoi(value);
    else if (key == "lambda") c.lambda = std::stod(value);
    else if (key == "seeds") c.seeds = parse_seed_list(value);
    else if (key == "annotation_mode") c.annotation_mode = value;
    else if (key == "augment") c.augment = parse_bool(value);
    else if (key == "pretrain_init") c.pretrain_init = parse_bool(value);
    else if (key == "psi_enabled") c.psi_enabled = parse_bool(value);
    else if (key == "ensemble_identity_init") c.ensemble_identity_init = parse_bool(value);
    else if (key == "prior_enabled") c.prior_enabled = parse_bool(value);
    else if (key == "prior_wiring") c.prior_wiring = value;
    else if (key == "gram_tap") c.gram_tap = std::stoi(value);
    else if (key == "gram_normalized") c.gram_normalized = parse_bool(value);
    else if (key == "kshot_fusion") c.kshot_fusion = value;
    else if (key == "kshot_reweight_scope") c.kshot_reweight_scope = value;
    else if (key == "kshot_reduction") c.kshot_reduction = std::stoi(value);
    else if (key == "mixed_shot_fraction") c.mixed_shot_fraction = std::stod(value);
    else if (key == "validation_fraction") c.validation_fraction = std::stod(value);
    else if (key == "validate_every") c.validate_every = std::stoi(value);
    else if (key == "validation_episodes") c.validation_episodes = std::stoi(value);
    else if (key == "train_objective") c.train_objective = value;
    else if (key == "eval_episodes") c.eval_episodes = std::stoi(value);
    else if (key == "learner") c.learner = value;
    else if (key == "tau") c.tau = std::stod(value);
    else if (key == "fusion_scheme") c.fusion_scheme = value;
    else if (key == "workers") c.workers = std::stoi(value);
    else if (key == "image_size") c.image_size = std::stoi(value);
    else if (key == "num_classes") c.num_classes = std::stoi(value);
    else if (key == "reduce_channels") c.reduce_channels = std::stoi(value);
    else if (key == "head_width") c.head_width = std::stoi(value);
    else if (key == "init_seed") c.init_seed = std::stoull(value);
    else throw std::invalid_argument("config: unknown key: " + key);
  }
}

std::string config_to_text(const TrainConfig& c) {
  std::ostringstream out;
  out << "stage = " << c.stage << "\n";
  out << "epochs = " << c.epochs << "\n";
  out << "batch_size = " << c.batch_size << "\n";
  out << "lr = " << c.lr << "\n";
  out << "momentum = " << c.momentum << "\n";
  out << "weight_decay = " << c.weight_decay << "\n";
  out << "max_grad_norm = " << c.max_grad_norm << "\n";
  out << "episodes_per_epoch = " << c.episodes_per_epoch << "\n";
  out << "fold = " << c.fold << "\n";
  out << "num_folds = " << c.num_folds << "\n";
  out << "shots = " << c.shots << "\n";
  out << "lambda = " << c.lambda << "\n";
  out << "seeds = " << seeds_to_string(c.seeds) << "\n";
  out << "annotation_mode = " << c.annotation_mode << "\n";
  out << "augment = " << (c.augment ? "true" : "false") << "\n";
  out << "pretrain_init = " << (c.pretrain_init ? "true" : "false") << "\n";
  out << "psi_enabled = " << (c.psi_enabled ? "true" : "false") << "\n";
  out << "ensemble_identity_init = " << (c.ensemble_identity_init ? "true" : "false") << "\n";
  out << "prior_enabled = " << (c.prior_enabled ? "true" : "false") << "\n";
  out << "prior_wiring = " << c.prior_wiring << "\n";
  out << "gram_tap = " << c.gram_tap << "\n";
  out << "gram_normalized = " << (c.gram_normalized ? "true" : "false") << "\n";
  out << "kshot_fusion = " << c.kshot_fusion << "\n";
  out << "kshot_reweight_scope = " << c.kshot_reweight_scope << "\n";
  out << "kshot_reduction = " << c.kshot_reduction << "\n";
  out << "mixed_shot_fraction = " << c.mixed_shot_fraction << "\n";
  out << "validation_fraction = " << c.validation_fraction << "\n";
  out << "validate_every = " << c.validate_every << "\n";
  out << "validation_episodes = " << c.validation_episodes << "\n";
  out << "train_objective = " << c.train_objective << "\n";
  out << "eval_episodes = " << c.eval_episodes << "\n";
  out << "learner = " << c.learner << "\n";
  out << "tau = " << c.tau << "\n";
  out << "fusion_scheme = " << c.fusion_scheme << "\n";
  out << "workers = " << c.workers << "\n";
  out << "image_size = " << c.image_size << "\n";
  out << "num_classes = " << c.num_classes << "\n";
  out << "reduce_channels = " << c.reduce_channels << "\n";
  out << "head_width = " << c.head_width << "\n";
  out << "init_seed = " << c.init_seed << "\n";
  return out.str();
}

}  // namespace bam
