#include "lymphdet/store.h"

#include <algorithm>
#include <chrono>
#include <fstream>

#include <fmt/format.h>

namespace lymphdet {

namespace fs = std::filesystem;

namespace {

constexpr const char* kStatusNames[] = {"training", "ready", "finetuning"};

std::vector<nlohmann::json> read_jsonl(const fs::path& path) {
  std::vector<nlohmann::json> out;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  }
  return out;
}

void append_line(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out << j.dump() << '\n';
}

}  // namespace

std::string to_string(ModelStatus status) {
  return kStatusNames[static_cast<int>(status)];
}

ModelStatus parse_status(const std::string& text) {
  for (int i = 0; i < 3; ++i) {
    if (text == kStatusNames[i]) return static_cast<ModelStatus>(i);
  }
  throw InvalidInput("unknown model status: " + text);
}

const RegistryEntry* Registry::find(const std::string& model_id) const {
  for (const auto& e : models) {
    if (e.model_id == model_id) return &e;
  }
  return nullptr;
}

RegistryEntry* Registry::find(const std::string& model_id) {
  for (auto& e : models) {
    if (e.model_id == model_id) return &e;
  }
  return nullptr;
}

nlohmann::json to_json(const RegistryEntry& e) {
  return {{"model_id", e.model_id},
          {"parent_id", e.parent_id.empty() ? nlohmann::json() : nlohmann::json(e.parent_id)},
          {"path", e.path},
          {"threshold", e.threshold},
          {"created", e.created_ms},
          {"status", to_string(e.status)}};
}

nlohmann::json to_json(const Registry& registry) {
  nlohmann::json models = nlohmann::json::array();
  for (const auto& e : registry.models) models.push_back(to_json(e));
  return {{"active", registry.active.empty() ? nlohmann::json() : nlohmann::json(registry.active)},
          {"models", models}};
}

Registry parse_registry(const nlohmann::json& j) {
  Registry r;
  if (j.contains("active") && j["active"].is_string()) r.active = j["active"];
  for (const auto& m : j.at("models")) {
    RegistryEntry e;
    e.model_id = m.at("model_id");
    if (m.contains("parent_id") && m["parent_id"].is_string()) e.parent_id = m["parent_id"];
    e.path = m.at("path");
    e.threshold = m.at("threshold");
    e.created_ms = m.at("created");
    e.status = parse_status(m.at("status"));
    r.models.push_back(std::move(e));
  }
  if (!r.active.empty() && !r.find(r.active)) {
    throw InvalidInput("registry names unknown active model " + r.active);
  }
  return r;
}

int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

bool valid_identifier(const std::string& id) {
  if (id.empty() || id.size() > 128) return false;
  return std::all_of(id.begin(), id.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
  });
}

DataStore::DataStore(fs::path root) : root_(std::move(root)) {
  for (const char* sub : {"images", "models", "detections", "probmaps", "overlays"}) {
    fs::create_directories(root_ / sub);
  }
  for (const auto& j : read_jsonl(root_ / "annotations.jsonl")) {
    records_.push_back(parse_record(j));
  }
  for (const auto& j : read_jsonl(root_ / "consumed.jsonl")) {
    marks_.push_back({j.at("first").get<size_t>(), j.at("last").get<size_t>(),
                      j.at("model_id").get<std::string>()});
  }
  image_counter_ = image_ids().size();
}

fs::path DataStore::image_path(const std::string& id) const {
  return root_ / "images" / (id + ".png");
}

fs::path DataStore::normalized_path(const std::string& id, const std::string& key) const {
  return root_ / "images" / (id + ".norm-" + key + ".png");
}

std::string DataStore::add_image(const RgbImage& image, std::optional<std::string> id) {
  std::lock_guard lock(mu_);
  if (id) {
    if (!valid_identifier(*id)) throw InvalidInput("invalid image id: " + *id);
    if (fs::exists(image_path(*id))) throw InvalidInput("image id already exists: " + *id);
  } else {
    do {
      id = fmt::format("fov-{:06d}", ++image_counter_);
    } while (fs::exists(image_path(*id)));
  }
  const fs::path tmp = root_ / "images" / (*id + ".tmp.png");
  write_rgb(tmp, image);
  fs::rename(tmp, image_path(*id));
  return *id;
}

bool DataStore::has_image(const std::string& id) const {
  return valid_identifier(id) && fs::exists(image_path(id));
}

RgbImage DataStore::image(const std::string& id) const {
  if (!has_image(id)) throw InvalidInput("unknown image: " + id);
  return read_rgb(image_path(id));
}

std::pair<int, int> DataStore::image_size(const std::string& id) const {
  const RgbImage img = image(id);
  return {img.height(), img.width()};
}

std::vector<std::string> DataStore::image_ids() const {
  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(root_ / "images")) {
    const std::string name = entry.path().filename().string();
    if (name.size() > 4 && name.ends_with(".png") && name.find('.') == name.size() - 4) {
      ids.push_back(name.substr(0, name.size() - 4));
    }
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

size_t DataStore::append_corrections(const std::vector<AnnotationRecord>& records) {
  std::lock_guard lock(mu_);
  {
    std::ofstream out(root_ / "annotations.jsonl", std::ios::app);
    if (!out) throw std::runtime_error("cannot open annotation log");
    for (const auto& r : records) out << to_json(r).dump() << '\n';
    out.flush();
    if (!out) throw std::runtime_error("failed writing annotation log");
  }
  records_.insert(records_.end(), records.begin(), records.end());
  const size_t consumed = marks_.empty() ? 0 : marks_.back().last;
  return records_.size() - consumed;
}

std::vector<CorrectionRecord> DataStore::corrections() const {
  std::lock_guard lock(mu_);
  std::vector<CorrectionRecord> out;
  out.reserve(records_.size());
  for (size_t i = 0; i < records_.size(); ++i) out.push_back({records_[i], i, {}});
  for (const Mark& m : marks_) {
    for (size_t i = m.first; i < m.last && i < out.size(); ++i) out[i].consumed_by = m.model_id;
  }
  return out;
}

size_t DataStore::correction_count() const {
  std::lock_guard lock(mu_);
  return records_.size();
}

size_t DataStore::unconsumed_count() const {
  std::lock_guard lock(mu_);
  const size_t consumed = marks_.empty() ? 0 : marks_.back().last;
  return records_.size() - consumed;
}

void DataStore::mark_consumed(size_t first, size_t last, const std::string& model_id) {
  std::lock_guard lock(mu_);
  const size_t consumed = marks_.empty() ? 0 : marks_.back().last;
  if (first != consumed || last < first || last > records_.size()) {
    throw InvalidInput(fmt::format("bad consumption range [{}, {})", first, last));
  }
  if (first == last) return;
  append_line(root_ / "consumed.jsonl",
              {{"first", first}, {"last", last}, {"model_id", model_id}, {"time", now_ms()}});
  marks_.push_back({first, last, model_id});
}

Registry DataStore::registry() const {
  std::lock_guard lock(mu_);
  const fs::path path = root_ / "models" / "registry.json";
  if (!fs::exists(path)) return {};
  std::ifstream in(path);
  return parse_registry(nlohmann::json::parse(in));
}

void DataStore::write_registry(const Registry& registry) {
  std::lock_guard lock(mu_);
  const fs::path path = root_ / "models" / "registry.json";
  const fs::path tmp = root_ / "models" / "registry.json.tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << to_json(registry).dump(2) << '\n';
    out.flush();
    if (!out) throw std::runtime_error("failed writing registry");
  }
  fs::rename(tmp, path);
}

std::string DataStore::next_model_id() const {
  const Registry r = registry();
  int n = static_cast<int>(r.models.size());
  std::string id;
  do {
    id = fmt::format("model-{:04d}", ++n);
  } while (r.find(id) || fs::exists(model_dir(id)));
  return id;
}

fs::path DataStore::model_dir(const std::string& model_id) const {
  return root_ / "models" / model_id;
}

fs::path DataStore::detections_path(const std::string& image_id,
                                    const std::string& model_id) const {
  return root_ / "detections" / (image_id + "__" + model_id + ".jsonl");
}

fs::path DataStore::probmap_path(const std::string& image_id,
                                 const std::string& model_id) const {
  return root_ / "probmaps" / (image_id + "__" + model_id + ".png");
}

fs::path DataStore::overlay_path(const std::string& image_id) const {
  return root_ / "overlays" / (image_id + ".png");
}

}  // namespace lymphdet
