#include "relalign/types.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>
#include <utility>

namespace relalign {

bool BoundingBox::valid() const {
  const auto in_unit = [](double v) { return std::isfinite(v) && v >= 0.0 && v <= 1.0; };
  return in_unit(x_min) && in_unit(y_min) && in_unit(x_max) && in_unit(y_max) && x_min < x_max && y_min < y_max;
}

double iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

BoundingBox union_box(const BoundingBox& a, const BoundingBox& b) {
  return {std::min(a.x_min, b.x_min), std::min(a.y_min, b.y_min), std::max(a.x_max, b.x_max),
          std::max(a.y_max, b.y_max)};
}

std::vector<GridComponent> label_components(std::span<const int> labels, int rows, int cols, int background,
                                            int min_cells) {
  if (std::ssize(labels) != std::ptrdiff_t(rows) * cols) throw std::invalid_argument("label_components: grid size");
  std::vector<bool> seen(labels.size(), false);
  std::vector<GridComponent> out;
  std::vector<int> stack;
  for (int start = 0; start < rows * cols; ++start) {
    if (seen[std::size_t(start)] || labels[std::size_t(start)] == background) continue;
    GridComponent comp;
    comp.label = labels[std::size_t(start)];
    int r0 = rows, r1 = -1, c0 = cols, c1 = -1;
    stack.assign(1, start);
    seen[std::size_t(start)] = true;
    while (!stack.empty()) {
      const int cell = stack.back();
      stack.pop_back();
      comp.cells.push_back(cell);
      const int r = cell / cols, c = cell % cols;
      r0 = std::min(r0, r), r1 = std::max(r1, r), c0 = std::min(c0, c), c1 = std::max(c1, c);
      const int neighbours[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
      for (const auto& nb : neighbours) {
        if (nb[0] < 0 || nb[0] >= rows || nb[1] < 0 || nb[1] >= cols) continue;
        const int next = nb[0] * cols + nb[1];
        if (seen[std::size_t(next)] || labels[std::size_t(next)] != comp.label) continue;
        seen[std::size_t(next)] = true;
        stack.push_back(next);
      }
    }
    if (std::ssize(comp.cells) < min_cells) continue;
    std::sort(comp.cells.begin(), comp.cells.end());
    comp.box = {double(c0) / cols, double(r0) / rows, double(c1 + 1) / cols, double(r1 + 1) / rows};
    out.push_back(std::move(comp));
  }
  return out;
}

FeatureGrid::CellRange FeatureGrid::cells_of(const BoundingBox& box) const {
  // Cells whose centers fall inside the box; degenerate boxes snap to the nearest cell.
  auto lo = [](double v, int n) { return std::clamp(static_cast<int>(std::ceil(v * n - 0.5)), 0, n - 1); };
  auto hi = [](double v, int n) { return std::clamp(static_cast<int>(std::floor(v * n - 0.5)) + 1, 1, n); };
  CellRange r{lo(box.y_min, height), hi(box.y_max, height), lo(box.x_min, width), hi(box.x_max, width)};
  if (r.row_end <= r.row_begin) r.row_end = r.row_begin + 1;
  if (r.col_end <= r.col_begin) r.col_end = r.col_begin + 1;
  return r;
}

Eigen::VectorXd FeatureGrid::region_mean(const BoundingBox& box) const {
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(channels);
  const CellRange r = cells_of(box);
  for (int row = r.row_begin; row < r.row_end; ++row)
    for (int col = r.col_begin; col < r.col_end; ++col) {
      const auto c = cell(row, col);
      for (int k = 0; k < channels; ++k) acc[k] += c[k];
    }
  return acc / double((r.row_end - r.row_begin) * (r.col_end - r.col_begin));
}

int SceneSample::entity_index(int instance_id) const {
  for (std::size_t i = 0; i < entities.size(); ++i)
    if (entities[i].instance_id == instance_id) return static_cast<int>(i);
  return -1;
}

bool PredicateDistribution::valid(double tolerance) const {
  if (probs.empty()) return false;
  double total = 0.0;
  for (double p : probs) {
    if (!std::isfinite(p) || p < 0.0) return false;
    total += p;
  }
  return std::abs(total - 1.0) <= tolerance;
}

PredicateDistribution PredicateDistribution::uniform(int num_classes) {
  return {std::vector<double>(std::size_t(num_classes), 1.0 / num_classes)};
}

bool RelationFeatureBatch::valid() const { return features.rows() >= 1 && features.allFinite(); }

bool ValidationVerdict::has(const std::string& code) const {
  return std::any_of(violations.begin(), violations.end(), [&](const Violation& v) { return v.code == code; });
}

ValidationVerdict validate_sample(const SceneSample& sample, int num_object_classes, int num_predicates) {
  ValidationVerdict verdict;
  auto add = [&](std::string code, std::string detail) { verdict.violations.push_back({std::move(code), std::move(detail)}); };

  const FeatureGrid& grid = sample.feature_grid;
  if (grid.height <= 0 || grid.width <= 0 || grid.channels <= 0 ||
      grid.data.size() != std::size_t(grid.height) * grid.width * grid.channels)
    add("bad grid", "feature grid shape does not match its data");
  if (!std::all_of(grid.data.begin(), grid.data.end(), [](double v) { return std::isfinite(v); }))
    add("non-finite feature", "feature grid has a non-finite entry");

  std::set<int> instances;
  for (const Entity& e : sample.entities) {
    if (!instances.insert(e.instance_id).second)
      add("duplicate instance", "instance_id " + std::to_string(e.instance_id) + " repeats");
    if (!e.box.valid()) add("bad box", "entity " + std::to_string(e.instance_id) + " has an invalid box");
    if (e.class_id < 0 || (num_object_classes > 0 && e.class_id >= num_object_classes))
      add("bad class", "entity " + std::to_string(e.instance_id) + " class " + std::to_string(e.class_id));
  }

  std::set<std::pair<int, int>> pairs;
  for (const RelationTriplet& r : sample.relations) {
    const std::string tag = "(" + std::to_string(r.subject_id) + "," + std::to_string(r.object_id) + ")";
    if (r.subject_id == r.object_id) add("self-loop", "relation " + tag + " is a self-loop");
    if (!instances.contains(r.subject_id) || !instances.contains(r.object_id))
      add("dangling reference", "relation " + tag + " references a missing entity");
    if (!pairs.insert({r.subject_id, r.object_id}).second) add("duplicate pair", "relation " + tag + " repeats");
    if (r.predicate_id == kBackgroundPredicate)
      add("background predicate", "relation " + tag + " carries the background predicate");
    else if (r.predicate_id < 0 || (num_predicates > 0 && r.predicate_id >= num_predicates))
      add("bad predicate", "relation " + tag + " predicate " + std::to_string(r.predicate_id));
  }
  return verdict;
}

}  // namespace relalign
