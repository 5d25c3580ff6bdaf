#include "lymphdet/annotation.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "lymphdet/geometry.h"

namespace lymphdet {

std::string to_string(AnnotationKind kind) {
  switch (kind) {
    case AnnotationKind::kPositivePoint: return "PP";
    case AnnotationKind::kPositiveScribble: return "PS";
    case AnnotationKind::kNegativePoint: return "NP";
    case AnnotationKind::kNegativeScribble: return "NS";
  }
  return "?";
}

std::optional<AnnotationKind> parse_kind(const std::string& text) {
  if (text == "PP") return AnnotationKind::kPositivePoint;
  if (text == "PS") return AnnotationKind::kPositiveScribble;
  if (text == "NP") return AnnotationKind::kNegativePoint;
  if (text == "NS") return AnnotationKind::kNegativeScribble;
  return std::nullopt;
}

std::string to_string(DataSource source) {
  switch (source) {
    case DataSource::kPublic: return "public";
    case DataSource::kInHouse: return "in_house";
    case DataSource::kCorrection: return "correction";
  }
  return "?";
}

DataSource parse_source(const std::string& text) {
  if (text == "public") return DataSource::kPublic;
  if (text == "in_house") return DataSource::kInHouse;
  if (text == "correction") return DataSource::kCorrection;
  throw InvalidInput("unknown data source '" + text + "'");
}

nlohmann::json to_json(const AnnotationRecord& record) {
  nlohmann::json points = nlohmann::json::array();
  for (const Pixel& p : record.points) points.push_back({p.row, p.col});
  return {{"fov_id", record.fov_id},
          {"kind", to_string(record.kind)},
          {"points", points},
          {"timestamp", record.timestamp},
          {"author", record.author}};
}

AnnotationRecord parse_record(const nlohmann::json& j) {
  std::vector<std::string> bad;
  AnnotationRecord rec;
  if (!j.is_object()) throw AnnotationFormatError("record must be an object", {"record"});

  if (j.contains("fov_id") && j["fov_id"].is_string() &&
      !j["fov_id"].get<std::string>().empty()) {
    rec.fov_id = j["fov_id"].get<std::string>();
  } else {
    bad.push_back("fov_id");
  }

  std::optional<AnnotationKind> kind;
  if (j.contains("kind") && j["kind"].is_string()) {
    kind = parse_kind(j["kind"].get<std::string>());
  }
  if (kind) {
    rec.kind = *kind;
  } else {
    bad.push_back("kind");
  }

  bool points_ok = j.contains("points") && j["points"].is_array() &&
                   !j["points"].empty();
  if (points_ok) {
    for (const auto& p : j["points"]) {
      if (!p.is_array() || p.size() != 2 || !p[0].is_number_integer() ||
          !p[1].is_number_integer()) {
        points_ok = false;
        break;
      }
      rec.points.push_back({p[0].get<int>(), p[1].get<int>()});
    }
  }
  if (points_ok && kind &&
      (*kind == AnnotationKind::kPositivePoint ||
       *kind == AnnotationKind::kNegativePoint) &&
      rec.points.size() != 1) {
    points_ok = false;
  }
  if (!points_ok) bad.push_back("points");

  if (j.contains("timestamp")) {
    if (j["timestamp"].is_number_integer()) {
      rec.timestamp = j["timestamp"].get<int64_t>();
    } else {
      bad.push_back("timestamp");
    }
  }
  if (j.contains("author")) {
    if (j["author"].is_string()) {
      rec.author = j["author"].get<std::string>();
    } else {
      bad.push_back("author");
    }
  }

  if (!bad.empty()) {
    std::string msg = "malformed annotation record:";
    for (const auto& f : bad) msg += " " + f;
    throw AnnotationFormatError(msg, std::move(bad));
  }
  return rec;
}

std::vector<AnnotationRecord> read_records(const std::filesystem::path& path) {
  std::vector<AnnotationRecord> out;
  std::ifstream in(path);
  if (!in) return out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(parse_record(nlohmann::json::parse(line)));
  }
  return out;
}

void append_record(const std::filesystem::path& path,
                   const AnnotationRecord& record) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out << to_json(record).dump() << '\n';
}

void write_records(const std::filesystem::path& path,
                   const std::vector<AnnotationRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  for (const auto& r : records) out << to_json(r).dump() << '\n';
}

void add_record(AnnotationSet& set, const AnnotationRecord& record) {
  switch (record.kind) {
    case AnnotationKind::kPositivePoint:
      set.positive_points.insert(set.positive_points.end(),
                                 record.points.begin(), record.points.end());
      break;
    case AnnotationKind::kNegativePoint:
      set.negative_points.insert(set.negative_points.end(),
                                 record.points.begin(), record.points.end());
      break;
    case AnnotationKind::kPositiveScribble:
      set.positive_scribbles.push_back(record.points);
      break;
    case AnnotationKind::kNegativeScribble:
      set.negative_scribbles.push_back(record.points);
      break;
  }
}

std::vector<AnnotationRecord> to_records(const AnnotationSet& set) {
  std::vector<AnnotationRecord> out;
  for (const Pixel& p : set.positive_points) {
    out.push_back({set.fov_id, AnnotationKind::kPositivePoint, {p}, 0, ""});
  }
  for (const auto& s : set.positive_scribbles) {
    out.push_back({set.fov_id, AnnotationKind::kPositiveScribble, s, 0, ""});
  }
  for (const Pixel& p : set.negative_points) {
    out.push_back({set.fov_id, AnnotationKind::kNegativePoint, {p}, 0, ""});
  }
  for (const auto& s : set.negative_scribbles) {
    out.push_back({set.fov_id, AnnotationKind::kNegativeScribble, s, 0, ""});
  }
  return out;
}

std::map<std::string, AnnotationSet> group_by_fov(
    const std::vector<AnnotationRecord>& records, DataSource source) {
  std::map<std::string, AnnotationSet> out;
  for (const auto& rec : records) {
    AnnotationSet& set = out[rec.fov_id];
    set.fov_id = rec.fov_id;
    set.source = source;
    add_record(set, rec);
  }
  return out;
}

std::vector<Pixel> rasterize_polyline(const Polyline& line) {
  std::vector<Pixel> out;
  if (line.empty()) return out;
  out.push_back(line.front());
  for (size_t i = 1; i < line.size(); ++i) {
    int r0 = line[i - 1].row, c0 = line[i - 1].col;
    const int r1 = line[i].row, c1 = line[i].col;
    const int dr = std::abs(r1 - r0), dc = std::abs(c1 - c0);
    const int sr = r0 < r1 ? 1 : -1, sc = c0 < c1 ? 1 : -1;
    int err = dc - dr;
    while (r0 != r1 || c0 != c1) {
      const int e2 = 2 * err;
      if (e2 > -dr) {
        err -= dr;
        c0 += sc;
      }
      if (e2 < dc) {
        err += dc;
        r0 += sr;
      }
      out.push_back({r0, c0});
    }
  }
  return out;
}

namespace {

void paint_scribbles(const std::vector<Polyline>& lines, BinaryMask& mask) {
  for (const auto& line : lines) {
    for (const Pixel& p : rasterize_polyline(line)) {
      if (!mask.contains(p)) {
        throw InvalidInput("scribble pixel (" + std::to_string(p.row) + "," +
                           std::to_string(p.col) + ") is outside the image");
      }
      mask.at(p.row, p.col) = 1;
    }
  }
}

}  // namespace

CompiledMaps compile_maps(const AnnotationSet& annotations, int height,
                          int width, int r1) {
  if (r1 <= 5) throw InvalidInput("dilation radius r1 must exceed 5");
  BinaryMask core(height, width, 1, 0);      // PP dilated by r1-5
  BinaryMask positive(height, width, 1, 0);  // PP dilated by r1, plus PS
  BinaryMask negative(height, width, 1, 0);  // NP dilated by r1+5, plus NS
  BinaryMask scribble(height, width, 1, 0);  // PS only
  disk_dilate_into(annotations.positive_points, r1 - 5, core);
  disk_dilate_into(annotations.positive_points, r1, positive);
  disk_dilate_into(annotations.negative_points, r1 + 5, negative);
  paint_scribbles(annotations.positive_scribbles, scribble);
  paint_scribbles(annotations.negative_scribbles, negative);

  CompiledMaps maps{LabelMap(height, width, 1, kLabelIgnore),
                    WeightMap(height, width, 1, 0.0f)};
  for (size_t i = 0; i < maps.labels.size(); ++i) {
    if (negative.values()[i]) {
      maps.labels.values()[i] = kLabelNegative;
      maps.weights.values()[i] = 1.0f;
    } else if (scribble.values()[i] || core.values()[i]) {
      maps.labels.values()[i] = kLabelPositive;
      maps.weights.values()[i] = 1.0f;
    } else if (positive.values()[i]) {
      maps.labels.values()[i] = kLabelPositive;
      maps.weights.values()[i] = 0.5f;
    }
  }
  return maps;
}

void write_label_png(const std::filesystem::path& path, const LabelMap& labels) {
  GrayImage out(labels.height(), labels.width(), 1);
  for (size_t i = 0; i < out.size(); ++i) {
    const uint8_t l = labels.values()[i];
    out.values()[i] = l == kLabelPositive ? 255 : (l == kLabelNegative ? 128 : 0);
  }
  write_gray(path, out);
}

void write_weight_png(const std::filesystem::path& path,
                      const WeightMap& weights) {
  GrayImage out(weights.height(), weights.width(), 1);
  for (size_t i = 0; i < out.size(); ++i) {
    const float w = weights.values()[i];
    out.values()[i] = w >= 1.0f ? 255 : (w > 0.0f ? 128 : 0);
  }
  write_gray(path, out);
}

std::vector<int> tile_offsets(int extent, int patch, int stride) {
  if (extent < patch) throw InvalidInput("image is smaller than the tile size");
  if (stride < 1) throw InvalidInput("tile stride must be positive");
  std::vector<int> out;
  for (int pos = 0; pos + patch <= extent; pos += stride) out.push_back(pos);
  if (out.back() + patch < extent) out.push_back(extent - patch);
  return out;
}

namespace {

bool in_window(Pixel p, Pixel origin, int size) {
  return p.row >= origin.row && p.col >= origin.col &&
         p.row < origin.row + size && p.col < origin.col + size;
}

Pixel shift(Pixel p, Pixel origin) {
  return {p.row - origin.row, p.col - origin.col};
}

// Splits a rasterized stroke into runs that stay inside the window.
void clip_scribbles(const std::vector<Polyline>& lines, Pixel origin, int size,
                    std::vector<Polyline>& out) {
  for (const auto& line : lines) {
    Polyline run;
    for (const Pixel& p : rasterize_polyline(line)) {
      if (in_window(p, origin, size)) {
        run.push_back(shift(p, origin));
      } else if (!run.empty()) {
        out.push_back(std::move(run));
        run.clear();
      }
    }
    if (!run.empty()) out.push_back(std::move(run));
  }
}

bool any_in_center(const AnnotationSet& a, Pixel center_origin, int center) {
  auto point_hit = [&](const std::vector<Pixel>& pts) {
    return std::any_of(pts.begin(), pts.end(), [&](Pixel p) {
      return in_window(p, center_origin, center);
    });
  };
  auto line_hit = [&](const std::vector<Polyline>& lines) {
    return std::any_of(lines.begin(), lines.end(), [&](const Polyline& l) {
      return point_hit(rasterize_polyline(l));
    });
  };
  return point_hit(a.positive_points) || point_hit(a.negative_points) ||
         line_hit(a.positive_scribbles) || line_hit(a.negative_scribbles);
}

}  // namespace

std::vector<Tile> tile_fov(const RgbImage& fov, const AnnotationSet& annotations,
                           const TileOptions& options) {
  if (fov.height() < options.patch || fov.width() < options.patch) {
    throw InvalidInput("FOV is smaller than the tile size");
  }
  if (options.center > options.patch) {
    throw InvalidInput("tile center region exceeds the tile");
  }
  const int margin = (options.patch - options.center) / 2;
  std::vector<Tile> tiles;
  for (int row : tile_offsets(fov.height(), options.patch, options.stride)) {
    for (int col : tile_offsets(fov.width(), options.patch, options.stride)) {
      const Pixel origin{row, col};
      if (!any_in_center(annotations, {row + margin, col + margin},
                         options.center)) {
        continue;
      }
      Tile tile;
      tile.origin = origin;
      tile.image = RgbImage(options.patch, options.patch, fov.channels());
      for (int r = 0; r < options.patch; ++r) {
        std::copy_n(&fov.at(row + r, col), options.patch * fov.channels(),
                    &tile.image.at(r, 0));
      }
      AnnotationSet& a = tile.annotations;
      a.fov_id = annotations.fov_id + "@" + std::to_string(row) + "_" +
                 std::to_string(col);
      a.source = annotations.source;
      for (const Pixel& p : annotations.positive_points) {
        if (in_window(p, origin, options.patch)) a.positive_points.push_back(shift(p, origin));
      }
      for (const Pixel& p : annotations.negative_points) {
        if (in_window(p, origin, options.patch)) a.negative_points.push_back(shift(p, origin));
      }
      clip_scribbles(annotations.positive_scribbles, origin, options.patch,
                     a.positive_scribbles);
      clip_scribbles(annotations.negative_scribbles, origin, options.patch,
                     a.negative_scribbles);
      tiles.push_back(std::move(tile));
    }
  }
  return tiles;
}

SplitIndices split_dataset(size_t n, double ratio, uint64_t seed) {
  if (n < 2) throw InvalidInput("need at least two items to split");
  if (!(ratio > 0.0 && ratio < 1.0)) throw InvalidInput("split ratio must be in (0,1)");
  const auto wanted = static_cast<size_t>(std::llround(ratio * static_cast<double>(n)));
  const size_t n_train = std::clamp<size_t>(wanted, 1, n - 1);
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  SplitIndices split;
  split.train.assign(order.begin(), order.begin() + static_cast<long>(n_train));
  split.validation.assign(order.begin() + static_cast<long>(n_train), order.end());
  return split;
}

}  // namespace lymphdet
