#pragma once

#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "relalign/datagen.hpp"
#include "relalign/types.hpp"

namespace relalign {

enum class EvalMode { PredCls, SgCls, SgDet };

std::string to_string(EvalMode mode);
EvalMode parse_eval_mode(const std::string& text);

inline constexpr double kDefaultIouThreshold = 0.5;

struct PredictedTriplet {
  int subject_class = 0;
  BoundingBox subject_box;
  int object_class = 0;
  BoundingBox object_box;
  int predicate_id = 1;
  double score = 0.0;
};

/// Relation candidate for one ordered pair of predicted entities.
struct ScoredPair {
  int subject_index = 0;  // entity indices within the prediction, used by the graph constraint
  int object_index = 0;
  int subject_class = 0;
  BoundingBox subject_box;
  int object_class = 0;
  BoundingBox object_box;
  double pair_score = 1.0;             // product of entity confidences
  std::vector<double> predicate_probs;  // includes background at 0
};

/// Turns pair candidates into ranked triplets. With the graph constraint only
/// the best non-background predicate of each ordered entity pair survives
/// (across candidates that share the pair); without it every non-background
/// predicate is emitted. Output is sorted by descending score, ties stable.
std::vector<PredictedTriplet> expand_pairs(std::span<const ScoredPair> pairs, bool graph_constraint);

/// Stable sort by descending score.
void rank_predictions(std::vector<PredictedTriplet>& predictions);

/// Greedy scan of the top-k predictions. A prediction consumes the unmatched
/// compatible ground-truth triplet with the highest min(subject IoU, object
/// IoU), lowest index on ties. Compatible means equal subject class, object
/// class and predicate, and in SgDet both IoUs >= iou_threshold.
/// Returns matched gt indices in ascending order. Throws on k <= 0.
std::vector<int> match_triplets(std::span<const PredictedTriplet> ranked, const SceneSample& gt, EvalMode mode, int k,
                                double iou_threshold = kDefaultIouThreshold);

/// Per-image match outcome, one entry per ground-truth triplet.
struct ImageMatches {
  std::vector<int> gt_predicates;
  std::vector<bool> matched;
};

ImageMatches image_matches(std::span<const PredictedTriplet> ranked, const SceneSample& gt, EvalMode mode, int k,
                           double iou_threshold = kDefaultIouThreshold);

/// Image-wise recall averaged over images with at least one gt triplet.
double recall_at_k(std::span<const ImageMatches> images);

/// Dataset-level recall per predicate id; NaN where a predicate has no gt.
std::vector<double> per_predicate_recall(std::span<const ImageMatches> images, int num_predicates);

/// Mean of per-predicate recalls over predicates with at least one gt.
double mean_recall_at_k(std::span<const ImageMatches> images, int num_predicates);
double mean_of_defined(std::span<const double> per_predicate);

/// Mean per-predicate recall within each bucket; buckets with no defined
/// predicate report 0.
std::map<std::string, double> partition_recall(std::span<const double> per_predicate, const PartitionSpec& partition);

struct EvalReport {
  EvalMode mode = EvalMode::PredCls;
  int num_images = 0;
  std::map<int, double> recall_at;
  std::map<int, double> mean_recall_at;
  std::map<int, std::vector<double>> per_predicate_recall;  // K -> recall by predicate id (NaN if no gt)
  std::map<std::string, double> partition_recall;           // at K = kPartitionK

  static constexpr int kPartitionK = 100;

  double mr(int k) const { return mean_recall_at.at(k); }
  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  /// Rows of `metric,mode,K,value` with header.
  std::string to_csv() const;
  /// Rows of `predicate_id,partition,K,recall` with header.
  std::string per_predicate_csv(const PartitionSpec& partition) const;
};

using Predictor = std::function<std::vector<PredictedTriplet>(const SceneSample&)>;

/// Runs `predict` on every sample and aggregates all metrics for `ks`.
EvalReport evaluate_predictions(std::span<const SceneSample> split, const Predictor& predict, EvalMode mode,
                                std::span<const int> ks, const PartitionSpec& partition, int num_predicates,
                                double iou_threshold = kDefaultIouThreshold);

}  // namespace relalign
