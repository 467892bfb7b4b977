#include "semmask/pointcloud_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "class_map_default.hpp"
#include "semmask/rng.hpp"

namespace semmask {

namespace {

std::vector<std::byte> read_file_bytes(const std::filesystem::path &path) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) {
    throw Error(ErrorCode::MissingFile, path.string());
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<std::byte> bytes(raw.size());
  std::memcpy(bytes.data(), raw.data(), raw.size());
  return bytes;
}

float load_f32_le(const std::byte *p) {
  std::uint32_t u = 0;
  std::memcpy(&u, p, 4);
  if constexpr (std::endian::native == std::endian::big) {
    u = (u >> 24) | ((u >> 8) & 0xFF00U) | ((u << 8) & 0xFF0000U) | (u << 24);
  }
  return std::bit_cast<float>(u);
}

void store_f32_le(std::byte *p, float f) {
  auto u = std::bit_cast<std::uint32_t>(f);
  if constexpr (std::endian::native == std::endian::big) {
    u = (u >> 24) | ((u >> 8) & 0xFF00U) | ((u << 8) & 0xFF0000U) | (u << 24);
  }
  std::memcpy(p, &u, 4);
}

Vec3 vec3_from_json(const nlohmann::json &j, const char *what) {
  if (!j.is_array() || j.size() != 3) {
    throw Error(ErrorCode::ParseError, std::string(what) + " must be a 3-element array");
  }
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

nlohmann::json vec3_to_json(const Vec3 &v) { return nlohmann::json::array({v.x, v.y, v.z}); }

}  // namespace

ScanLayout scan_layout_from_name(std::string_view name) {
  if (name == "xyzi4") return ScanLayout::Xyzi4;
  if (name == "xyzir5") return ScanLayout::Xyzir5;
  throw Error(ErrorCode::InvalidArgument, "unknown scan layout '" + std::string(name) + "'");
}

std::size_t record_bytes(ScanLayout layout) { return layout == ScanLayout::Xyzi4 ? 16 : 20; }

PointCloud decode_scan(std::span<const std::byte> bytes, ScanLayout layout) {
  const std::size_t stride = record_bytes(layout);
  if (bytes.size() % stride != 0) {
    throw Error(ErrorCode::TruncatedFile, std::to_string(bytes.size()) + " bytes is not a multiple of " +
                                              std::to_string(stride));
  }
  const std::size_t n = bytes.size() / stride;
  PointCloud cloud;
  cloud.points.resize(n);
  if (layout == ScanLayout::Xyzir5) cloud.rings.emplace(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::byte *rec = bytes.data() + i * stride;
    Point &pt = cloud.points[i];
    pt.position = {load_f32_le(rec), load_f32_le(rec + 4), load_f32_le(rec + 8)};
    pt.intensity = load_f32_le(rec + 12);
    if (!is_finite(pt.position)) {
      throw Error(ErrorCode::NonFiniteValue, "non-finite coordinate at point " + std::to_string(i));
    }
    if (cloud.rings) (*cloud.rings)[i] = load_f32_le(rec + 16);
  }
  return cloud;
}

PointCloud read_scan(const std::filesystem::path &path, ScanLayout layout) {
  const auto bytes = read_file_bytes(path);
  PointCloud cloud = decode_scan(bytes, layout);
  cloud.frame_id = path.filename().string();
  return cloud;
}

std::vector<std::byte> encode_scan(const PointCloud &cloud, ScanLayout layout) {
  const std::size_t stride = record_bytes(layout);
  std::vector<std::byte> out(cloud.size() * stride);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    std::byte *rec = out.data() + i * stride;
    const Point &pt = cloud.points[i];
    store_f32_le(rec, static_cast<float>(pt.position.x));
    store_f32_le(rec + 4, static_cast<float>(pt.position.y));
    store_f32_le(rec + 8, static_cast<float>(pt.position.z));
    store_f32_le(rec + 12, static_cast<float>(pt.intensity));
    if (layout == ScanLayout::Xyzir5) {
      const float ring = cloud.rings && cloud.rings->size() == cloud.size() ? (*cloud.rings)[i] : 0.0F;
      store_f32_le(rec + 16, ring);
    }
  }
  return out;
}

void write_scan(const std::filesystem::path &path, const PointCloud &cloud, ScanLayout layout) {
  const auto bytes = encode_scan(cloud, layout);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<std::uint8_t> decode_labels(std::span<const std::byte> bytes, std::size_t expected_count) {
  if (bytes.size() != expected_count) {
    throw Error(ErrorCode::CountMismatch, "label file holds " + std::to_string(bytes.size()) +
                                              " labels, expected " + std::to_string(expected_count));
  }
  std::vector<std::uint8_t> labels(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    labels[i] = std::to_integer<std::uint8_t>(bytes[i]);
    if (labels[i] >= kNumRawLabels) {
      throw Error(ErrorCode::LabelOutOfRange,
                  "label " + std::to_string(labels[i]) + " at point " + std::to_string(i));
    }
  }
  return labels;
}

std::vector<std::uint8_t> read_labels(const std::filesystem::path &path, std::size_t expected_count) {
  return decode_labels(read_file_bytes(path), expected_count);
}

void normalize_intensity(PointCloud &cloud) {
  double max_i = 0.0;
  for (const auto &p : cloud.points) max_i = std::max(max_i, p.intensity);
  if (max_i <= 1.0) return;
  for (auto &p : cloud.points) p.intensity /= 255.0;
}

ClassMap ClassMap::nuscenes_default() {
  static const ClassMap map = from_json(nlohmann::json::parse(detail::kDefaultClassMapJson));
  return map;
}

ClassMap ClassMap::identity() {
  std::array<ClassId, kNumRawLabels> t{};
  for (std::size_t i = 0; i < kNumRawLabels; ++i) {
    t[i] = i < kNumDetectionClasses ? static_cast<ClassId>(i) : kBackground;
  }
  return ClassMap(t);
}

ClassMap ClassMap::from_json(const nlohmann::json &j) {
  if (!j.is_object() || !j.contains("raw_to_detection") || !j["raw_to_detection"].is_object()) {
    throw Error(ErrorCode::ParseError, "class map needs a 'raw_to_detection' object");
  }
  const auto &entries = j["raw_to_detection"];
  std::array<ClassId, kNumRawLabels> table{};
  for (std::size_t raw = 0; raw < kNumRawLabels; ++raw) {
    const auto key = std::to_string(raw);
    if (!entries.contains(key)) {
      throw Error(ErrorCode::UnmappedLabel, "class map has no entry for raw label " + key);
    }
    table[raw] = class_from_name(entries[key].get<std::string>());
  }
  for (const auto &[key, value] : entries.items()) {
    std::size_t pos = 0;
    unsigned long id = 0;
    try {
      id = std::stoul(key, &pos);
    } catch (const std::exception &) {
      pos = 0;
    }
    if (pos != key.size() || id >= kNumRawLabels) {
      throw Error(ErrorCode::LabelOutOfRange, "class map key '" + key + "' is not a raw label id");
    }
  }
  return ClassMap(table);
}

ClassMap ClassMap::load(const std::filesystem::path &path) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) throw Error(ErrorCode::MissingFile, path.string());
  std::ifstream in(path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception &e) {
    throw Error(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
  return from_json(j);
}

nlohmann::json ClassMap::to_json() const {
  nlohmann::json entries = nlohmann::json::object();
  for (std::size_t raw = 0; raw < kNumRawLabels; ++raw) {
    entries[std::to_string(raw)] = std::string(class_name(table_[raw]));
  }
  return {{"version", 1}, {"raw_to_detection", entries}};
}

ClassId ClassMap::operator()(std::uint8_t raw) const {
  if (raw >= kNumRawLabels) {
    throw Error(ErrorCode::UnmappedLabel, "raw label " + std::to_string(raw) + " has no class map entry");
  }
  return table_[raw];
}

PointCloud map_labels(const PointCloud &cloud, const ClassMap &map) {
  if (!cloud.labeled()) throw Error(ErrorCode::UnmappedLabel, "cloud has no labels to map");
  PointCloud out = cloud;
  std::vector<std::uint8_t> mapped(cloud.labels->size());
  std::transform(cloud.labels->begin(), cloud.labels->end(), mapped.begin(),
                 [&](std::uint8_t raw) { return map(raw); });
  if (cloud.label_space == LabelSpace::Raw) out.raw_labels = cloud.labels;
  out.labels = std::move(mapped);
  out.label_space = LabelSpace::Detection;
  return out;
}

void SceneSpec::validate() const {
  if (!(extent.x > 0.0 && extent.y > 0.0 && extent.z > 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "scene extent must be positive");
  }
  if (!(ground_density >= 0.0) || !std::isfinite(ground_density)) {
    throw Error(ErrorCode::InvalidArgument, "ground density must be non-negative");
  }
  for (const auto &o : objects) {
    if (o.class_id >= kNumMappedLabels) throw Error(ErrorCode::InvalidArgument, "object class out of range");
    for (std::size_t a = 0; a < 3; ++a) {
      if (!(o.size[a] >= 0.0) || o.bounds_max[a] < o.bounds_min[a]) {
        throw Error(ErrorCode::InvalidArgument, "object size/bounds invalid");
      }
    }
  }
}

std::size_t SceneSpec::expected_point_count() const {
  std::size_t total = static_cast<std::size_t>(round_half_even(ground_density * extent.x * extent.y));
  for (const auto &o : objects) total += o.count * o.points_per_object;
  return total;
}

SceneSpec SceneSpec::from_json(const nlohmann::json &j) {
  SceneSpec spec;
  try {
    spec.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("extent")) spec.extent = vec3_from_json(j["extent"], "extent");
    spec.ground_density = j.value("ground_density", 0.0);
    for (const auto &o : j.value("objects", nlohmann::json::array())) {
      SceneObject obj;
      const auto &cls = o.at("class");
      obj.class_id = cls.is_string() ? class_from_name(cls.get<std::string>()) : cls.get<ClassId>();
      obj.count = o.value("count", std::size_t{1});
      obj.points_per_object = o.at("points_per_object").get<std::size_t>();
      if (o.contains("size")) obj.size = vec3_from_json(o["size"], "size");
      obj.bounds_min = vec3_from_json(o.at("bounds_min"), "bounds_min");
      obj.bounds_max = vec3_from_json(o.at("bounds_max"), "bounds_max");
      spec.objects.push_back(obj);
    }
  } catch (const nlohmann::json::exception &e) {
    throw Error(ErrorCode::ParseError, std::string("scene spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

SceneSpec SceneSpec::load(const std::filesystem::path &path) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) throw Error(ErrorCode::MissingFile, path.string());
  std::ifstream in(path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception &e) {
    throw Error(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
  return from_json(j);
}

nlohmann::json SceneSpec::to_json() const {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto &o : objects) {
    objs.push_back({{"class", std::string(class_name(o.class_id))},
                    {"count", o.count},
                    {"points_per_object", o.points_per_object},
                    {"size", vec3_to_json(o.size)},
                    {"bounds_min", vec3_to_json(o.bounds_min)},
                    {"bounds_max", vec3_to_json(o.bounds_max)}});
  }
  return {{"seed", seed}, {"extent", vec3_to_json(extent)}, {"ground_density", ground_density},
          {"objects", objs}};
}

PointCloud generate_scene(const SceneSpec &spec) {
  spec.validate();
  Rng rng(spec.seed);
  PointCloud cloud;
  cloud.labels.emplace();
  cloud.label_space = LabelSpace::Detection;
  cloud.frame_id = "synthetic-" + std::to_string(spec.seed);
  cloud.points.reserve(spec.expected_point_count());
  cloud.labels->reserve(spec.expected_point_count());

  const auto n_ground = static_cast<std::size_t>(round_half_even(spec.ground_density * spec.extent.x * spec.extent.y));
  for (std::size_t i = 0; i < n_ground; ++i) {
    Point p;
    p.position = {rng.uniform(0.0, spec.extent.x), rng.uniform(0.0, spec.extent.y), rng.uniform(0.0, 0.05)};
    p.intensity = rng.uniform();
    cloud.points.push_back(p);
    cloud.labels->push_back(kBackground);
  }
  for (const auto &obj : spec.objects) {
    for (std::size_t k = 0; k < obj.count; ++k) {
      Vec3 center;
      for (std::size_t a = 0; a < 3; ++a) center[a] = rng.uniform(obj.bounds_min[a], obj.bounds_max[a]);
      for (std::size_t i = 0; i < obj.points_per_object; ++i) {
        Point p;
        for (std::size_t a = 0; a < 3; ++a) {
          p.position[a] = center[a] + obj.size[a] * (rng.uniform() - 0.5);
        }
        p.intensity = rng.uniform();
        cloud.points.push_back(p);
        cloud.labels->push_back(obj.class_id);
      }
    }
  }
  return cloud;
}

}  // namespace semmask
