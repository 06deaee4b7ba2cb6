#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace relalign {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Predicate index reserved for "no relation" in every predicate distribution.
inline constexpr int kBackgroundPredicate = 0;

/// Axis-aligned box in normalized [0,1] image coordinates.
struct BoundingBox {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
  bool valid() const;

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

double iou(const BoundingBox& a, const BoundingBox& b);
BoundingBox union_box(const BoundingBox& a, const BoundingBox& b);

/// 4-connected region of equal labels on a row-major grid.
struct GridComponent {
  int label = 0;
  BoundingBox box;         // normalized to the grid
  std::vector<int> cells;  // row-major indices
};

/// Components of non-background labels with at least `min_cells` cells, in
/// order of their first cell.
std::vector<GridComponent> label_components(std::span<const int> labels, int rows, int cols, int background,
                                            int min_cells = 1);

struct Entity {
  BoundingBox box;
  int class_id = 0;
  int instance_id = 0;

  friend bool operator==(const Entity&, const Entity&) = default;
};

struct RelationTriplet {
  int subject_id = 0;
  int object_id = 0;
  int predicate_id = 0;

  friend bool operator==(const RelationTriplet&, const RelationTriplet&) = default;
};

/// H x W x C grid of real features, stored row-major with channels innermost.
struct FeatureGrid {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> data;

  FeatureGrid() = default;
  FeatureGrid(int h, int w, int c) : height(h), width(w), channels(c), data(std::size_t(h) * w * c, 0.0) {}

  double& at(int row, int col, int ch) { return data[(std::size_t(row) * width + col) * channels + ch]; }
  double at(int row, int col, int ch) const { return data[(std::size_t(row) * width + col) * channels + ch]; }
  std::span<const double> cell(int row, int col) const {
    return {data.data() + (std::size_t(row) * width + col) * channels, std::size_t(channels)};
  }

  /// Cell index range covered by a normalized box (at least one cell).
  struct CellRange {
    int row_begin, row_end, col_begin, col_end;
  };
  CellRange cells_of(const BoundingBox& box) const;

  /// Mean feature vector over the cells covered by `box`.
  Eigen::VectorXd region_mean(const BoundingBox& box) const;

  friend bool operator==(const FeatureGrid&, const FeatureGrid&) = default;
};

struct SceneSample {
  std::int64_t sample_id = 0;
  FeatureGrid feature_grid;
  std::vector<Entity> entities;
  std::vector<RelationTriplet> relations;

  /// Position of the entity with this instance id, or -1.
  int entity_index(int instance_id) const;

  friend bool operator==(const SceneSample&, const SceneSample&) = default;
};

/// Probability vector over predicate classes; index 0 is background.
struct PredicateDistribution {
  std::vector<double> probs;

  std::size_t size() const { return probs.size(); }
  bool valid(double tolerance = 1e-6) const;
  static PredicateDistribution uniform(int num_classes);

  friend bool operator==(const PredicateDistribution&, const PredicateDistribution&) = default;
};

/// N x d relation feature matrix flowing into a relation predictor.
struct RelationFeatureBatch {
  Matrix features;

  Eigen::Index size() const { return features.rows(); }
  Eigen::Index width() const { return features.cols(); }
  bool valid() const;
};

struct Violation {
  std::string code;
  std::string detail;
};

struct ValidationVerdict {
  std::vector<Violation> violations;

  bool ok() const { return violations.empty(); }
  bool has(const std::string& code) const;
  friend bool operator==(const ValidationVerdict& a, const ValidationVerdict& b) {
    if (a.violations.size() != b.violations.size()) return false;
    for (std::size_t i = 0; i < a.violations.size(); ++i)
      if (a.violations[i].code != b.violations[i].code || a.violations[i].detail != b.violations[i].detail)
        return false;
    return true;
  }
};

/// Checks every structural invariant of a sample. Class-range checks run only
/// when the corresponding count is positive.
ValidationVerdict validate_sample(const SceneSample& sample, int num_object_classes = 0, int num_predicates = 0);

}  // namespace relalign
