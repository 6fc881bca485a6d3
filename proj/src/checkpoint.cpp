#include "bam/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace bam {

using nlohmann::json;

namespace {
constexpr char kMagic[8] = {'B', 'A', 'M', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kFormatVersion = 1;
}  // namespace

void save_checkpoint(const std::string& path, const CheckpointData& data) {
  json header;
  header["stage"] = data.stage;
  header["psi_median"] = data.psi_median;
  header["psi_count"] = data.psi_count;
  header["num_classes"] = data.num_classes;
  header["split"] = {{"fold_index", data.split.fold_index},
                     {"num_folds", data.split.num_folds},
                     {"base", data.split.base_classes},
                     {"novel", data.split.novel_classes}};
  header["model_config"] = data.model_config_text;
  header["train_config"] = data.train_config_text;

  json plist = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : data.params) {
    plist.push_back({{"name", name},
                     {"shape", tensor.shape},
                     {"offset", offset},
                     {"count", tensor.size()}});
    offset += static_cast<std::uint64_t>(tensor.size());
  }
  header["params"] = plist;
  const std::string htext = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open for write: " + path);
  out.write(kMagic, 8);
  const std::uint32_t ver = kFormatVersion;
  out.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
  const std::uint64_t hlen = htext.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  for (const auto& [name, tensor] : data.params)
    out.write(reinterpret_cast<const char*>(tensor.data.data()),
              static_cast<std::streamsize>(tensor.size() * sizeof(float)));
  if (!out) throw std::runtime_error("checkpoint: write failed: " + path);
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  std::uint32_t ver = 0;
  in.read(reinterpret_cast<char*>(&ver), sizeof(ver));
  if (ver != kFormatVersion)
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(ver));
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string htext(hlen, '\0');
  in.read(htext.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw std::runtime_error("checkpoint: truncated header in " + path);
  json header = json::parse(htext);

  CheckpointData data;
  data.stage = header.at("stage").get<std::string>();
  data.psi_median = header.at("psi_median").get<double>();
  data.psi_count = header.at("psi_count").get<std::int64_t>();
  data.num_classes = header.at("num_classes").get<int>();
  const auto& split = header.at("split");
  data.split.fold_index = split.at("fold_index").get<int>();
  data.split.num_folds = split.at("num_folds").get<int>();
  data.split.base_classes = split.at("base").get<std::vector<int>>();
  data.split.novel_classes = split.at("novel").get<std::vector<int>>();
  data.model_config_text = header.at("model_config").get<std::string>();
  data.train_config_text = header.at("train_config").get<std::string>();

  for (const auto& p : header.at("params")) {
    Tensor<float> t(p.at("shape").get<std::vector<int>>());
    if (t.size() != p.at("count").get<std::int64_t>())
      throw std::runtime_error("checkpoint: manifest count mismatch");
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!in) throw std::runtime_error("checkpoint: truncated data in " + path);
    data.params.emplace_back(p.at("name").get<std::string>(), std::move(t));
  }
  return data;
}

}  // namespace bam
