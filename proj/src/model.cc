#include "lymphdet/model.h"

#include <bit>
#include <cstring>
#include <fstream>

namespace lymphdet {
namespace {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little,
              "checkpoint tensors are written in native little-endian order");

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return nlohmann::json::parse(in);
}

}  // namespace

void save_checkpoint(const Model& model, const fs::path& dir) {
  fs::create_directories(dir);
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& t : model.params.tensors) {
    const std::string file = t.name + ".f32";
    std::ofstream out(dir / file, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + (dir / file).string());
    out.write(reinterpret_cast<const char*>(t.values.data()),
              static_cast<std::streamsize>(t.values.size() * sizeof(float)));
    layers.push_back({{"name", t.name},
                      {"shape", t.shape},
                      {"file", file},
                      {"kind", t.is_kernel ? "kernel" : "bias"}});
  }
  write_json(dir / "manifest.json", {{"format", "lymphdet-f32-le"}, {"layers", layers}});

  const ModelMetadata& m = model.meta;
  write_json(dir / "metadata.json", {{"model_id", m.model_id},
                                     {"parent_id", m.parent_id},
                                     {"epoch", m.epoch},
                                     {"threshold", m.threshold},
                                     {"created_ms", m.created_ms},
                                     {"config", model.config}});
  if (m.stain) {
    write_json(dir / "stain.json", *m.stain);
  } else {
    fs::remove(dir / "stain.json");
  }
}

Model load_checkpoint(const fs::path& dir) {
  Model model;
  const nlohmann::json meta = read_json(dir / "metadata.json");
  meta.at("config").get_to(model.config);
  model.meta.model_id = meta.value("model_id", std::string{});
  model.meta.parent_id = meta.value("parent_id", std::string{});
  model.meta.epoch = meta.value("epoch", 0);
  model.meta.threshold = meta.value("threshold", kDefaultThreshold);
  model.meta.created_ms = meta.value("created_ms", int64_t{0});
  if (fs::exists(dir / "stain.json")) {
    model.meta.stain = read_json(dir / "stain.json").get<StainReference>();
  }

  // The manifest must match the layout implied by the config.
  model.params = FcnNetwork<float>(model.config).zero_params();
  const nlohmann::json manifest = read_json(dir / "manifest.json");
  const auto& layers = manifest.at("layers");
  if (layers.size() != model.params.tensors.size()) {
    throw std::runtime_error("checkpoint manifest does not match its config");
  }
  for (size_t i = 0; i < layers.size(); ++i) {
    auto& t = model.params.tensors[i];
    if (layers[i].at("name").get<std::string>() != t.name ||
        layers[i].at("shape").get<std::vector<int>>() != t.shape) {
      throw std::runtime_error("checkpoint layer " + std::to_string(i) +
                               " does not match the network layout");
    }
    const fs::path file = dir / layers[i].at("file").get<std::string>();
    std::ifstream in(file, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + file.string());
    in.read(reinterpret_cast<char*>(t.values.data()),
            static_cast<std::streamsize>(t.values.size() * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(t.values.size() * sizeof(float))) {
      throw std::runtime_error("truncated tensor file " + file.string());
    }
    if (in.peek() != std::char_traits<char>::eof()) {
      throw std::runtime_error("oversized tensor file " + file.string());
    }
  }
  return model;
}

}  // namespace lymphdet
