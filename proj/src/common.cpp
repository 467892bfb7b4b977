#include "semmask/common.hpp"

#include <algorithm>
#include <cctype>
#include <numbers>
#include <numeric>

#include "semmask/rng.hpp"

namespace semmask {

std::string to_string(const VoxelIndex &v) {
  return "(" + std::to_string(v.x) + "," + std::to_string(v.y) + "," + std::to_string(v.z) + ")";
}

std::string_view class_name(ClassId id) {
  if (id >= kNumMappedLabels) throw Error(ErrorCode::InvalidArgument, "class id " + std::to_string(id));
  return kClassNames[id];
}

ClassId class_from_name(std::string_view name) {
  for (ClassId i = 0; i < kNumMappedLabels; ++i) {
    if (kClassNames[i] == name) return i;
  }
  throw Error(ErrorCode::InvalidArgument, "unknown class name '" + std::string(name) + "'");
}

std::string_view group_name(Group g) {
  switch (g) {
    case Group::High: return "High";
    case Group::Medium: return "Medium";
    case Group::Low: return "Low";
    case Group::Background: return "Background";
  }
  return "?";
}

Group group_from_name(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "high") return Group::High;
  if (lower == "medium") return Group::Medium;
  if (lower == "low") return Group::Low;
  if (lower == "background") return Group::Background;
  throw Error(ErrorCode::InvalidArgument, "unknown importance group '" + std::string(name) + "'");
}

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::CountMismatch: return "CountMismatch";
    case ErrorCode::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorCode::UnmappedLabel: return "UnmappedLabel";
    case ErrorCode::UnknownVoxel: return "UnknownVoxel";
    case ErrorCode::UnlabeledGrid: return "UnlabeledGrid";
    case ErrorCode::IncompleteLevels: return "IncompleteLevels";
    case ErrorCode::TargetExceedsBudget: return "TargetExceedsBudget";
    case ErrorCode::InfeasibleBudget: return "InfeasibleBudget";
    case ErrorCode::GridMismatch: return "GridMismatch";
    case ErrorCode::EmptySet: return "EmptySet";
    case ErrorCode::EmptyDomain: return "EmptyDomain";
    case ErrorCode::MissingClass: return "MissingClass";
    case ErrorCode::DomainMismatch: return "DomainMismatch";
    case ErrorCode::MissingFeature: return "MissingFeature";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::EmptyBatch: return "EmptyBatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::EmptyCorpus: return "EmptyCorpus";
    case ErrorCode::MissingLevel: return "MissingLevel";
    case ErrorCode::PolicyCountError: return "PolicyCountError";
    case ErrorCode::BudgetMismatch: return "BudgetMismatch";
    case ErrorCode::MissingFile: return "MissingFile";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::IoError: return "IoError";
  }
  return "UnknownError";
}

bool is_usage_error(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingFile:
    case ErrorCode::ParseError:
    case ErrorCode::InvalidArgument:
    case ErrorCode::IoError:
    case ErrorCode::TruncatedFile:
    case ErrorCode::CountMismatch:
    case ErrorCode::PolicyCountError:
      return true;
    default:
      return false;
  }
}

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, Rng &rng) {
  if (k > n) throw Error(ErrorCode::InvalidArgument, "cannot draw more items than available");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(perm[i], perm[j]);
  }
  perm.resize(k);
  return perm;
}

}  // namespace semmask
