#include "relalign/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace relalign {

std::string to_string(EvalMode mode) {
  switch (mode) {
    case EvalMode::PredCls: return "predcls";
    case EvalMode::SgCls: return "sgcls";
    case EvalMode::SgDet: return "sgdet";
  }
  return "?";
}

EvalMode parse_eval_mode(const std::string& text) {
  if (text == "predcls") return EvalMode::PredCls;
  if (text == "sgcls") return EvalMode::SgCls;
  if (text == "sgdet") return EvalMode::SgDet;
  throw std::invalid_argument("unknown evaluation mode '" + text + "' (expected predcls, sgcls or sgdet)");
}

void rank_predictions(std::vector<PredictedTriplet>& predictions) {
  std::stable_sort(predictions.begin(), predictions.end(),
                   [](const PredictedTriplet& a, const PredictedTriplet& b) { return a.score > b.score; });
}

std::vector<PredictedTriplet> expand_pairs(std::span<const ScoredPair> pairs, bool graph_constraint) {
  std::vector<PredictedTriplet> out;
  auto triplet = [](const ScoredPair& p, int k) {
    return PredictedTriplet{p.subject_class, p.subject_box, p.object_class, p.object_box, k,
                            p.pair_score * p.predicate_probs[std::size_t(k)]};
  };
  if (!graph_constraint) {
    for (const ScoredPair& p : pairs)
      for (int k = 1; k < static_cast<int>(p.predicate_probs.size()); ++k) out.push_back(triplet(p, k));
  } else {
    std::map<std::pair<int, int>, std::size_t> best;  // ordered entity pair -> slot in `out`
    for (const ScoredPair& p : pairs) {
      if (p.predicate_probs.size() < 2) continue;
      int k_best = 1;
      for (int k = 2; k < static_cast<int>(p.predicate_probs.size()); ++k)
        if (p.predicate_probs[std::size_t(k)] > p.predicate_probs[std::size_t(k_best)]) k_best = k;
      const PredictedTriplet t = triplet(p, k_best);
      const auto key = std::make_pair(p.subject_index, p.object_index);
      const auto it = best.find(key);
      if (it == best.end()) {
        best.emplace(key, out.size());
        out.push_back(t);
      } else if (t.score > out[it->second].score) {
        out[it->second] = t;
      }
    }
  }
  rank_predictions(out);
  return out;
}

std::vector<int> match_triplets(std::span<const PredictedTriplet> ranked, const SceneSample& gt, EvalMode mode, int k,
                                double iou_threshold) {
  if (k <= 0) throw std::invalid_argument("match_triplets: K must be positive");
  const std::size_t n_gt = gt.relations.size();
  std::vector<bool> used(n_gt, false);
  const std::size_t limit = std::min<std::size_t>(ranked.size(), std::size_t(k));
  for (std::size_t i = 0; i < limit; ++i) {
    const PredictedTriplet& p = ranked[i];
    int chosen = -1;
    double chosen_overlap = -1.0;
    for (std::size_t g = 0; g < n_gt; ++g) {
      if (used[g]) continue;
      const RelationTriplet& r = gt.relations[g];
      if (r.predicate_id != p.predicate_id) continue;
      const Entity& s = gt.entities[std::size_t(gt.entity_index(r.subject_id))];
      const Entity& o = gt.entities[std::size_t(gt.entity_index(r.object_id))];
      if (s.class_id != p.subject_class || o.class_id != p.object_class) continue;
      const double overlap = std::min(iou(s.box, p.subject_box), iou(o.box, p.object_box));
      if (mode == EvalMode::SgDet && !(iou(s.box, p.subject_box) >= iou_threshold &&
                                       iou(o.box, p.object_box) >= iou_threshold))
        continue;
      if (overlap > chosen_overlap) {
        chosen = static_cast<int>(g);
        chosen_overlap = overlap;
      }
    }
    if (chosen >= 0) used[std::size_t(chosen)] = true;
  }
  std::vector<int> matched;
  for (std::size_t g = 0; g < n_gt; ++g)
    if (used[g]) matched.push_back(static_cast<int>(g));
  return matched;
}

ImageMatches image_matches(std::span<const PredictedTriplet> ranked, const SceneSample& gt, EvalMode mode, int k,
                           double iou_threshold) {
  ImageMatches m;
  m.matched.assign(gt.relations.size(), false);
  for (const RelationTriplet& r : gt.relations) m.gt_predicates.push_back(r.predicate_id);
  for (int g : match_triplets(ranked, gt, mode, k, iou_threshold)) m.matched[std::size_t(g)] = true;
  return m;
}

double recall_at_k(std::span<const ImageMatches> images) {
  double total = 0.0;
  int counted = 0;
  for (const ImageMatches& im : images) {
    if (im.matched.empty()) continue;
    total += double(std::count(im.matched.begin(), im.matched.end(), true)) / double(im.matched.size());
    ++counted;
  }
  return counted > 0 ? total / counted : 0.0;
}

std::vector<double> per_predicate_recall(std::span<const ImageMatches> images, int num_predicates) {
  std::vector<double> hits(std::size_t(num_predicates), 0.0);
  std::vector<double> totals(std::size_t(num_predicates), 0.0);
  for (const ImageMatches& im : images)
    for (std::size_t g = 0; g < im.gt_predicates.size(); ++g) {
      const int k = im.gt_predicates[g];
      if (k < 0 || k >= num_predicates) continue;
      totals[std::size_t(k)] += 1.0;
      if (im.matched[g]) hits[std::size_t(k)] += 1.0;
    }
  std::vector<double> recall(std::size_t(num_predicates), std::numeric_limits<double>::quiet_NaN());
  for (int k = 1; k < num_predicates; ++k)
    if (totals[std::size_t(k)] > 0.0) recall[std::size_t(k)] = hits[std::size_t(k)] / totals[std::size_t(k)];
  return recall;
}

double mean_of_defined(std::span<const double> values) {
  double total = 0.0;
  int n = 0;
  for (double v : values)
    if (!std::isnan(v)) {
      total += v;
      ++n;
    }
  return n > 0 ? total / n : 0.0;
}

double mean_recall_at_k(std::span<const ImageMatches> images, int num_predicates) {
  return mean_of_defined(per_predicate_recall(images, num_predicates));
}

std::map<std::string, double> partition_recall(std::span<const double> per_predicate, const PartitionSpec& partition) {
  auto bucket = [&](const std::vector<int>& ids) {
    std::vector<double> values;
    for (int k : ids)
      if (k >= 0 && std::size_t(k) < per_predicate.size()) values.push_back(per_predicate[std::size_t(k)]);
    return mean_of_defined(values);
  };
  return {{"head", bucket(partition.head)}, {"body", bucket(partition.body)}, {"tail", bucket(partition.tail)}};
}

EvalReport evaluate_predictions(std::span<const SceneSample> split, const Predictor& predict, EvalMode mode,
                                std::span<const int> ks, const PartitionSpec& partition, int num_predicates,
                                double iou_threshold) {
  std::vector<int> all_ks(ks.begin(), ks.end());
  if (std::find(all_ks.begin(), all_ks.end(), EvalReport::kPartitionK) == all_ks.end())
    all_ks.push_back(EvalReport::kPartitionK);
  std::map<int, std::vector<ImageMatches>> by_k;
  for (const SceneSample& sample : split) {
    std::vector<PredictedTriplet> ranked = predict(sample);
    rank_predictions(ranked);
    for (int k : all_ks) by_k[k].push_back(image_matches(ranked, sample, mode, k, iou_threshold));
  }
  EvalReport report;
  report.mode = mode;
  report.num_images = static_cast<int>(split.size());
  for (int k : all_ks) {
    const auto& images = by_k[k];
    auto per_pred = per_predicate_recall(images, num_predicates);
    report.recall_at[k] = recall_at_k(images);
    report.mean_recall_at[k] = mean_of_defined(per_pred);
    if (k == EvalReport::kPartitionK) report.partition_recall = partition_recall(per_pred, partition);
    report.per_predicate_recall[k] = std::move(per_pred);
  }
  return report;
}

namespace {

nlohmann::json nan_to_null(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }

}  // namespace

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["mode"] = to_string(mode);
  j["num_images"] = num_images;
  for (const auto& [k, v] : recall_at) j["recall_at"][std::to_string(k)] = v;
  for (const auto& [k, v] : mean_recall_at) j["mean_recall_at"][std::to_string(k)] = v;
  for (const auto& [k, values] : per_predicate_recall) {
    nlohmann::json arr = nlohmann::json::array();
    for (double v : values) arr.push_back(nan_to_null(v));
    j["per_predicate_recall"][std::to_string(k)] = std::move(arr);
  }
  j["partition_recall"] = partition_recall;
  return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  r.mode = parse_eval_mode(j.at("mode").get<std::string>());
  r.num_images = j.value("num_images", 0);
  for (const auto& [k, v] : j.at("recall_at").items()) r.recall_at[std::stoi(k)] = v.get<double>();
  for (const auto& [k, v] : j.at("mean_recall_at").items()) r.mean_recall_at[std::stoi(k)] = v.get<double>();
  if (j.contains("per_predicate_recall"))
    for (const auto& [k, arr] : j.at("per_predicate_recall").items()) {
      std::vector<double> values;
      for (const auto& v : arr) values.push_back(v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>());
      r.per_predicate_recall[std::stoi(k)] = std::move(values);
    }
  if (j.contains("partition_recall")) r.partition_recall = j.at("partition_recall").get<std::map<std::string, double>>();
  return r;
}

std::string EvalReport::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  const std::string m = to_string(mode);
  out << "metric,mode,K,value\n";
  for (const auto& [k, v] : recall_at) out << "R," << m << ',' << k << ',' << v << '\n';
  for (const auto& [k, v] : mean_recall_at) out << "mR," << m << ',' << k << ',' << v << '\n';
  for (const char* bucket : {"head", "body", "tail"})
    if (partition_recall.contains(bucket))
      out << bucket << ',' << m << ',' << kPartitionK << ',' << partition_recall.at(bucket) << '\n';
  return out.str();
}

std::string EvalReport::per_predicate_csv(const PartitionSpec& partition) const {
  std::ostringstream out;
  out.precision(17);
  out << "predicate_id,partition,K,recall\n";
  for (const auto& [k, values] : per_predicate_recall)
    for (std::size_t id = 1; id < values.size(); ++id)
      out << id << ',' << partition.bucket_of(int(id)) << ',' << k << ',' << values[id] << '\n';
  return out.str();
}

}  // namespace relalign
