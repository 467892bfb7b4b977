#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace semmask {

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  double &operator[](std::size_t i) { return i == 0 ? x : (i == 1 ? y : z); }
  double operator[](std::size_t i) const { return i == 0 ? x : (i == 1 ? y : z); }

  friend Vec3 operator+(const Vec3 &a, const Vec3 &b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Vec3 operator-(const Vec3 &a, const Vec3 &b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend Vec3 operator*(const Vec3 &a, double s) { return {a.x * s, a.y * s, a.z * s}; }
  friend bool operator==(const Vec3 &, const Vec3 &) = default;
};

inline double squared_norm(const Vec3 &v) { return v.x * v.x + v.y * v.y + v.z * v.z; }
inline double norm(const Vec3 &v) { return std::sqrt(squared_norm(v)); }
inline bool is_finite(const Vec3 &v) {
  return std::isfinite(v.x) && std::isfinite(v.y) && std::isfinite(v.z);
}

/// Integer grid coordinates of a voxel. Ordered lexicographically (x, y, z).
struct VoxelIndex {
  std::int32_t x = 0;
  std::int32_t y = 0;
  std::int32_t z = 0;

  friend auto operator<=>(const VoxelIndex &, const VoxelIndex &) = default;
};

struct VoxelIndexHash {
  std::size_t operator()(const VoxelIndex &v) const noexcept {
    std::uint64_t h = static_cast<std::uint32_t>(v.x);
    h = h * 0x9E3779B97F4A7C15ULL ^ static_cast<std::uint32_t>(v.y);
    h = h * 0x9E3779B97F4A7C15ULL ^ static_cast<std::uint32_t>(v.z);
    return static_cast<std::size_t>(h ^ (h >> 29));
  }
};

std::string to_string(const VoxelIndex &v);

// Detection classes, numbered in importance-table row order. The same order is
// the default tie-break priority inside an importance level.
using ClassId = std::uint8_t;
inline constexpr ClassId kNumDetectionClasses = 10;
inline constexpr ClassId kBackground = 10;
inline constexpr ClassId kNumMappedLabels = 11;  // 10 detection + background
inline constexpr ClassId kNumRawLabels = 32;
/// Label value marking an individual point as unlabeled; never counted.
inline constexpr std::uint8_t kIgnoreLabel = 255;

inline constexpr std::array<std::string_view, kNumMappedLabels> kClassNames = {
    "car",          "pedestrian", "construction_vehicle", "motorcycle", "truck", "bus",
    "traffic_cone", "barrier",    "trailer",              "bicycle",    "background"};

std::string_view class_name(ClassId id);
/// Throws Error(InvalidArgument) for unknown names.
ClassId class_from_name(std::string_view name);

enum class Group : std::uint8_t { High = 0, Medium = 1, Low = 2, Background = 3 };
inline constexpr std::size_t kNumGroups = 4;
inline constexpr std::array<Group, kNumGroups> kAllGroups = {Group::High, Group::Medium, Group::Low,
                                                            Group::Background};

std::string_view group_name(Group g);  // "High", "Medium", ...
Group group_from_name(std::string_view name);  // case-insensitive

/// Round-half-to-even. Every masking budget goes through this.
inline std::int64_t round_half_even(double v) {
  const double fl = std::floor(v);
  const double diff = v - fl;
  auto r = static_cast<std::int64_t>(fl);
  if (diff > 0.5) return r + 1;
  if (diff < 0.5) return r;
  return (r % 2 == 0) ? r : r + 1;
}

/// Budget for a ratio over n items: round_half_even(rho * n).
inline std::size_t masking_budget(double rho, std::size_t n) {
  return static_cast<std::size_t>(round_half_even(rho * static_cast<double>(n)));
}

enum class Exec { Serial, Parallel };

enum class ErrorCode {
  // pointcloud_io
  TruncatedFile,
  NonFiniteValue,
  CountMismatch,
  LabelOutOfRange,
  UnmappedLabel,
  // voxelizer
  UnknownVoxel,
  UnlabeledGrid,
  IncompleteLevels,
  // masking
  TargetExceedsBudget,
  InfeasibleBudget,
  GridMismatch,
  // recon_metrics
  EmptySet,
  EmptyDomain,
  MissingClass,
  DomainMismatch,
  // losses_and_head
  MissingFeature,
  DimensionMismatch,
  EmptyBatch,
  ShapeMismatch,
  // toy_pipeline
  EmptyCorpus,
  MissingLevel,
  PolicyCountError,
  BudgetMismatch,
  // plumbing
  MissingFile,
  ParseError,
  InvalidArgument,
  IoError,
};

std::string_view error_code_name(ErrorCode code);

/// True for errors that come from bad input files or invocation rather than from
/// the data itself. The CLI maps these to exit code 2.
bool is_usage_error(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string &what)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace semmask
