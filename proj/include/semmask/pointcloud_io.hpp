#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "semmask/common.hpp"

namespace semmask {

struct Point {
  Vec3 position;
  double intensity = 0.0;
};

enum class LabelSpace { Raw, Detection };

/// Labeled (or unlabeled) points of one sweep.
struct PointCloud {
  std::vector<Point> points;
  /// One label per point when present. Raw ids are 0..31, detection ids 0..10.
  std::optional<std::vector<std::uint8_t>> labels;
  LabelSpace label_space = LabelSpace::Raw;
  /// Raw lidarseg labels kept after map_labels, for raw-space supervision.
  std::optional<std::vector<std::uint8_t>> raw_labels;
  /// Ring channel of xyzir5 scans; pass-through metadata so scans can be written back.
  std::optional<std::vector<float>> rings;
  std::string frame_id;

  std::size_t size() const { return points.size(); }
  bool labeled() const { return labels.has_value(); }
};

enum class ScanLayout { Xyzi4, Xyzir5 };

ScanLayout scan_layout_from_name(std::string_view name);
std::size_t record_bytes(ScanLayout layout);

/// Decodes little-endian float32 records. Intensity is passed through unchanged.
PointCloud read_scan(const std::filesystem::path &path, ScanLayout layout = ScanLayout::Xyzir5);
PointCloud decode_scan(std::span<const std::byte> bytes, ScanLayout layout);
std::vector<std::byte> encode_scan(const PointCloud &cloud, ScanLayout layout);
void write_scan(const std::filesystem::path &path, const PointCloud &cloud, ScanLayout layout);

/// One unsigned byte per point, values < 32.
std::vector<std::uint8_t> read_labels(const std::filesystem::path &path, std::size_t expected_count);
std::vector<std::uint8_t> decode_labels(std::span<const std::byte> bytes, std::size_t expected_count);

/// Divides intensities by 255 when any exceeds 1.
void normalize_intensity(PointCloud &cloud);

/// Table from raw lidarseg id (0..31) to detection class id (0..9) or kBackground.
class ClassMap {
 public:
  ClassMap() = default;
  explicit ClassMap(std::array<ClassId, kNumRawLabels> table) : table_(table) {}

  /// The shipped nuScenes lidarseg to detection table (data/class_map_default.json).
  static ClassMap nuscenes_default();
  /// Maps i -> i for i < 10 and everything else to background.
  static ClassMap identity();

  static ClassMap from_json(const nlohmann::json &j);
  static ClassMap load(const std::filesystem::path &path);
  nlohmann::json to_json() const;

  ClassId operator()(std::uint8_t raw) const;
  const std::array<ClassId, kNumRawLabels> &table() const { return table_; }

  friend bool operator==(const ClassMap &, const ClassMap &) = default;

 private:
  std::array<ClassId, kNumRawLabels> table_{};
};

/// Replaces raw labels by detection ids; the raw labels move to `raw_labels`.
PointCloud map_labels(const PointCloud &cloud, const ClassMap &map);

struct SceneObject {
  ClassId class_id = kBackground;
  std::size_t count = 0;              // number of object instances
  std::size_t points_per_object = 0;  // sampled uniformly inside each instance box
  Vec3 size{1.0, 1.0, 1.0};           // instance box dimensions (m)
  Vec3 bounds_min;                    // box the instance centers are drawn from
  Vec3 bounds_max;
};

/// Synthetic scene recipe. Ground points lie in [0, ex) x [0, ey) near z = 0.
struct SceneSpec {
  std::uint64_t seed = 0;
  Vec3 extent{16.0, 16.0, 4.0};
  std::vector<SceneObject> objects;
  double ground_density = 0.0;  // points per square meter

  void validate() const;
  std::size_t expected_point_count() const;

  static SceneSpec from_json(const nlohmann::json &j);
  static SceneSpec load(const std::filesystem::path &path);
  nlohmann::json to_json() const;
};

/// Deterministic for a fixed seed. Labels are in detection space.
PointCloud generate_scene(const SceneSpec &spec);

}  // namespace semmask
