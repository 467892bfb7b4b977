#include "semmask/recon_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

namespace semmask {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<std::string> split_csv_line(const std::string &line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    if (!cell.empty() && cell.back() == '\r') cell.pop_back();
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_number(const std::string &s, const char *what) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception &) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw Error(ErrorCode::ParseError, std::string("bad ") + what + " '" + s + "'");
  return v;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

}  // namespace

double chamfer_directional(std::span<const Vec3> a, std::span<const Vec3> b, ChamferVariant variant) {
  if (a.empty() || b.empty()) throw Error(ErrorCode::EmptySet, "chamfer distance of an empty point set");
  return kernels::chamfer_directional(a, b, variant);
}

double occupancy_accuracy(const OccupancyMap &predicted, const OccupancyMap &truth,
                          std::span<const VoxelIndex> domain) {
  if (domain.empty()) throw Error(ErrorCode::EmptyDomain, "occupancy accuracy over an empty domain");
  auto bit = [](const OccupancyMap &m, const VoxelIndex &v) {
    auto it = m.find(v);
    return it != m.end() && it->second;
  };
  std::size_t agree = 0;
  for (const auto &v : domain) agree += bit(predicted, v) == bit(truth, v) ? 1 : 0;
  return static_cast<double>(agree) / static_cast<double>(domain.size());
}

nlohmann::json ReconMetrics::to_json() const {
  auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
  return {{"chamfer_gt_to_pred", num(chamfer_gt_to_pred)},
          {"chamfer_pred_to_gt", num(chamfer_pred_to_gt)},
          {"occupancy_accuracy", num(occupancy_accuracy)},
          {"evaluated_voxels", evaluated_voxels},
          {"unreconstructed_voxels", unreconstructed_voxels}};
}

ReconMetrics evaluate_reconstruction(const VoxelGrid &truth, const Reconstruction &recon,
                                     const MaskAssignment &assignment, const ReconstructionEvalConfig &config) {
  const auto split = apply_mask(truth, assignment);

  // Gather ground-truth and predicted point sets of the masked voxels.
  std::vector<std::vector<Vec3>> gt_sets;
  std::vector<const std::vector<Vec3> *> pred_sets;
  ReconMetrics m;
  for (const Voxel *v : split.masked) {
    auto it = recon.points.find(v->index);
    if (it == recon.points.end() || it->second.empty()) {
      ++m.unreconstructed_voxels;
      continue;
    }
    std::vector<Vec3> gt;
    gt.reserve(v->point_ids.size());
    for (auto id : v->point_ids) gt.push_back(truth.source().points[id].position);
    gt_sets.push_back(std::move(gt));
    pred_sets.push_back(&it->second);
  }
  m.evaluated_voxels = gt_sets.size();

  if (gt_sets.empty()) {
    m.chamfer_gt_to_pred = kNaN;
    m.chamfer_pred_to_gt = kNaN;
  } else if (config.aggregation == ChamferAggregation::Global) {
    std::vector<Vec3> all_gt;
    std::vector<Vec3> all_pred;
    for (std::size_t i = 0; i < gt_sets.size(); ++i) {
      all_gt.insert(all_gt.end(), gt_sets[i].begin(), gt_sets[i].end());
      all_pred.insert(all_pred.end(), pred_sets[i]->begin(), pred_sets[i]->end());
    }
    m.chamfer_gt_to_pred = semmask::chamfer_directional(all_gt, all_pred, config.variant);
    m.chamfer_pred_to_gt = semmask::chamfer_directional(all_pred, all_gt, config.variant);
  } else {
    std::vector<kernels::PointSetPair> forward;
    std::vector<kernels::PointSetPair> backward;
    for (std::size_t i = 0; i < gt_sets.size(); ++i) {
      forward.push_back({gt_sets[i], *pred_sets[i]});
      backward.push_back({*pred_sets[i], gt_sets[i]});
    }
    const auto f = kernels::chamfer_batch(forward, config.variant, config.exec);
    const auto b = kernels::chamfer_batch(backward, config.variant, config.exec);
    // Summed in ascending voxel order for bit-stable results.
    double sf = 0.0;
    double sb = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) {
      sf += f[i];
      sb += b[i];
    }
    m.chamfer_gt_to_pred = sf / static_cast<double>(f.size());
    m.chamfer_pred_to_gt = sb / static_cast<double>(b.size());
  }

  OccupancyMap truth_occ;
  std::set<VoxelIndex> domain;
  for (const auto &v : truth.voxels()) {
    truth_occ[v.index] = true;
    domain.insert(v.index);
    if (!recon.occupancy.contains(v.index)) {
      throw Error(ErrorCode::DomainMismatch, "no occupancy prediction for occupied voxel " + to_string(v.index));
    }
  }
  for (const auto &[idx, occ] : recon.occupancy) domain.insert(idx);
  const std::vector<VoxelIndex> dom(domain.begin(), domain.end());
  m.occupancy_accuracy = dom.empty() ? 1.0 : occupancy_accuracy(recon.occupancy, truth_occ, dom);
  return m;
}

const ImportanceRow &ImportanceReport::row(ClassId c) const {
  for (const auto &r : rows) {
    if (r.class_id == c) return r;
  }
  throw Error(ErrorCode::MissingClass, std::string(class_name(c)) + " not in report");
}

LevelMap ImportanceReport::levels() const {
  LevelMap out;
  for (const auto &r : rows) out[r.class_id] = r.level;
  return out;
}

void ImportanceReport::write_csv(std::ostream &out) const {
  out << "class,chamfer_gt_to_pred,chamfer_pred_to_gt,occupancy_accuracy,mean_rank,level,weight\n";
  for (const auto &r : rows) {
    out << class_name(r.class_id) << ',' << fmt(r.metrics.chamfer_gt_to_pred) << ','
        << fmt(r.metrics.chamfer_pred_to_gt) << ',' << fmt(r.metrics.occupancy_accuracy) << ','
        << fmt(r.mean_rank) << ',' << level_name(r.level) << ',' << fmt(r.weight) << '\n';
  }
  out << "background,,,,,Background," << fmt(background_weight) << '\n';
}

nlohmann::json ImportanceReport::to_json() const {
  nlohmann::json rows_j = nlohmann::json::array();
  for (const auto &r : rows) {
    nlohmann::json j = {{"class", std::string(class_name(r.class_id))},
                        {"metrics", r.metrics.to_json()},
                        {"rank_gt_to_pred", r.rank_gt_to_pred},
                        {"rank_pred_to_gt", r.rank_pred_to_gt},
                        {"mean_rank", r.mean_rank},
                        {"level", std::string(level_name(r.level))},
                        {"weight", r.weight}};
    if (r.rank_occupancy) j["rank_occupancy"] = *r.rank_occupancy;
    rows_j.push_back(j);
  }
  return {{"rows", rows_j}, {"background", {{"level", "Background"}, {"weight", background_weight}}}};
}

ImportanceReport ImportanceReport::read_csv(std::istream &in) {
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::ParseError, "empty importance report");
  const auto header = split_csv_line(line);
  const std::vector<std::string> expected = {"class",     "chamfer_gt_to_pred", "chamfer_pred_to_gt",
                                             "occupancy_accuracy", "mean_rank", "level", "weight"};
  if (header != expected) throw Error(ErrorCode::ParseError, "unexpected importance report header");
  ImportanceReport report;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != expected.size()) {
      throw Error(ErrorCode::ParseError, "line " + std::to_string(line_no) + ": expected 7 columns");
    }
    if (cells[0] == "background") {
      report.background_weight = parse_number(cells[6], "weight");
      continue;
    }
    ImportanceRow r;
    r.class_id = class_from_name(cells[0]);
    r.metrics.chamfer_gt_to_pred = parse_number(cells[1], "chamfer_gt_to_pred");
    r.metrics.chamfer_pred_to_gt = parse_number(cells[2], "chamfer_pred_to_gt");
    r.metrics.occupancy_accuracy = parse_number(cells[3], "occupancy_accuracy");
    r.mean_rank = parse_number(cells[4], "mean_rank");
    r.level = level_from_name(cells[5]);
    r.weight = parse_number(cells[6], "weight");
    report.rows.push_back(r);
  }
  std::sort(report.rows.begin(), report.rows.end(),
            [](const ImportanceRow &a, const ImportanceRow &b) { return a.class_id < b.class_id; });
  return report;
}

std::vector<double> fractional_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    // Positions i..j (0-based) share ranks i+1..j+1.
    const double avg = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

ImportanceReport rank_importance(const std::map<ClassId, ReconMetrics> &per_class, const RankingConfig &config,
                                 std::span<const ClassId> expected_classes) {
  for (ClassId c : expected_classes) {
    if (!per_class.contains(c)) throw Error(ErrorCode::MissingClass, "no metrics for " + std::string(class_name(c)));
  }
  if (per_class.empty()) throw Error(ErrorCode::MissingClass, "no classes to rank");

  std::vector<ClassId> classes;
  std::vector<double> gt_to_pred;
  std::vector<double> pred_to_gt;
  std::vector<double> neg_occupancy;
  for (const auto &[c, m] : per_class) {
    if (c >= kNumDetectionClasses) throw Error(ErrorCode::InvalidArgument, "only detection classes are ranked");
    if (std::isnan(m.chamfer_gt_to_pred) || std::isnan(m.chamfer_pred_to_gt) ||
        (config.include_occupancy && std::isnan(m.occupancy_accuracy))) {
      throw Error(ErrorCode::InvalidArgument, "metrics for " + std::string(class_name(c)) + " are not available");
    }
    classes.push_back(c);
    gt_to_pred.push_back(m.chamfer_gt_to_pred);
    pred_to_gt.push_back(m.chamfer_pred_to_gt);
    neg_occupancy.push_back(-m.occupancy_accuracy);
  }
  const auto r1 = fractional_ranks(gt_to_pred);
  const auto r2 = fractional_ranks(pred_to_gt);
  const auto r3 = fractional_ranks(neg_occupancy);

  ImportanceReport report;
  report.background_weight = config.weights[static_cast<std::size_t>(Group::Background)];
  for (std::size_t i = 0; i < classes.size(); ++i) {
    ImportanceRow row;
    row.class_id = classes[i];
    row.metrics = per_class.at(classes[i]);
    row.rank_gt_to_pred = r1[i];
    row.rank_pred_to_gt = r2[i];
    if (config.include_occupancy) {
      row.rank_occupancy = r3[i];
      row.mean_rank = (r1[i] + r2[i] + r3[i]) / 3.0;
    } else {
      row.mean_rank = (r1[i] + r2[i]) / 2.0;
    }
    row.level = row.mean_rank >= config.high_threshold     ? Level::High
                : row.mean_rank >= config.medium_threshold ? Level::Medium
                                                           : Level::Low;
    row.weight = config.weights[static_cast<std::size_t>(group_of(row.level))];
    report.rows.push_back(row);
  }
  return report;
}

std::map<ClassId, ReconMetrics> read_metrics_csv(std::istream &in) {
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::ParseError, "empty metrics csv");
  const auto header = split_csv_line(line);
  auto column = [&](const std::string &name) -> std::optional<std::size_t> {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) return std::nullopt;
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto c_class = column("class");
  const auto c_gt = column("chamfer_gt_to_pred");
  const auto c_pred = column("chamfer_pred_to_gt");
  const auto c_occ = column("occupancy_accuracy");
  if (!c_class || !c_gt || !c_pred) {
    throw Error(ErrorCode::ParseError, "metrics csv needs class, chamfer_gt_to_pred and chamfer_pred_to_gt columns");
  }
  std::map<ClassId, ReconMetrics> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line);
    if (cells.size() < header.size()) {
      throw Error(ErrorCode::ParseError, "line " + std::to_string(line_no) + ": too few columns");
    }
    if (cells[*c_class] == "background" || cells[*c_gt].empty()) continue;
    ReconMetrics m;
    m.chamfer_gt_to_pred = parse_number(cells[*c_gt], "chamfer_gt_to_pred");
    m.chamfer_pred_to_gt = parse_number(cells[*c_pred], "chamfer_pred_to_gt");
    m.occupancy_accuracy = c_occ && !cells[*c_occ].empty() ? parse_number(cells[*c_occ], "occupancy_accuracy") : kNaN;
    out[class_from_name(cells[*c_class])] = m;
  }
  return out;
}

}  // namespace semmask
