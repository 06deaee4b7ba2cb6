#pragma once

// Brute-force evaluation oracle for small scenes. Shares no code with the
// metrics module beyond the data types and iou().

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <vector>

#include "relalign/datagen.hpp"
#include "relalign/metrics.hpp"
#include "relalign/rng.hpp"

namespace relalign::oracle {

struct MicroCase {
  SceneSample scene;
  std::vector<PredictedTriplet> predictions;  // unranked
};

/// Random scene with <= max_entities entities drawn from few classes (so
/// class collisions are common) and <= max_predictions predictions, some
/// copied from ground truth with jittered boxes, some random, with
/// quantized scores so ties occur.
inline MicroCase micro_case(Rng& rng, int num_object_classes, int num_predicates, int max_entities = 5,
                            int max_predictions = 6) {
  MicroCase c;
  c.scene.sample_id = std::int64_t(rng.next_u64() >> 1);
  c.scene.feature_grid = FeatureGrid(1, 1, 1);
  const int n = rng.between(2, max_entities);
  for (int i = 0; i < n; ++i) {
    const double x = rng.uniform(0.0, 0.6), y = rng.uniform(0.0, 0.6);
    c.scene.entities.push_back(
        {{x, y, x + rng.uniform(0.15, 0.4), y + rng.uniform(0.15, 0.4)}, rng.between(0, num_object_classes - 1), i + 1});
  }
  for (int s = 1; s <= n; ++s)
    for (int o = 1; o <= n; ++o)
      if (s != o && rng.bernoulli(0.3)) c.scene.relations.push_back({s, o, rng.between(1, num_predicates - 1)});

  auto jitter = [&](const BoundingBox& b) {
    const double d = rng.bernoulli(0.7) ? 0.02 : 0.15;
    BoundingBox j{b.x_min + rng.uniform(-d, d), b.y_min + rng.uniform(-d, d), b.x_max + rng.uniform(-d, d),
                  b.y_max + rng.uniform(-d, d)};
    if (j.x_max <= j.x_min) j.x_max = j.x_min + 0.05;
    if (j.y_max <= j.y_min) j.y_max = j.y_min + 0.05;
    return j;
  };
  const int m = rng.between(0, max_predictions);
  for (int i = 0; i < m; ++i) {
    PredictedTriplet p;
    const Entity* s = &c.scene.entities[rng.below(std::uint64_t(n))];
    const Entity* o = &c.scene.entities[rng.below(std::uint64_t(n))];
    p.predicate_id = rng.between(1, num_predicates - 1);
    if (!c.scene.relations.empty() && rng.bernoulli(0.7)) {
      const RelationTriplet& r = c.scene.relations[rng.below(c.scene.relations.size())];
      s = &c.scene.entities[std::size_t(c.scene.entity_index(r.subject_id))];
      o = &c.scene.entities[std::size_t(c.scene.entity_index(r.object_id))];
      if (rng.bernoulli(0.8)) p.predicate_id = r.predicate_id;
    }
    p.subject_class = s->class_id;
    p.object_class = o->class_id;
    p.subject_box = jitter(s->box);
    p.object_box = jitter(o->box);
    p.score = double(rng.between(0, 5)) / 5.0;
    c.predictions.push_back(p);
  }
  return c;
}

/// Maximum number of disjoint (prediction, gt) pairs in a 0/1 compatibility matrix, by exhaustive search.
inline int max_assignment(const std::vector<std::vector<bool>>& ok, std::size_t pred, std::vector<bool>& used) {
  if (pred == ok.size()) return 0;
  int best = max_assignment(ok, pred + 1, used);  // prediction unmatched
  for (std::size_t g = 0; g < used.size(); ++g) {
    if (used[g] || !ok[pred][g]) continue;
    used[g] = true;
    best = std::max(best, 1 + max_assignment(ok, pred + 1, used));
    used[g] = false;
  }
  return best;
}

/// Matched gt count per predicate id for the top-k predictions of one image.
inline std::map<int, int> matched_per_predicate(const MicroCase& c, EvalMode mode, int k, double threshold = 0.5) {
  std::vector<std::size_t> order(c.predictions.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return c.predictions[a].score > c.predictions[b].score; });
  if (order.size() > std::size_t(k)) order.resize(std::size_t(k));

  std::map<int, int> out;
  std::map<int, std::vector<std::size_t>> gts;
  for (std::size_t g = 0; g < c.scene.relations.size(); ++g) gts[c.scene.relations[g].predicate_id].push_back(g);
  for (const auto& [pred_id, gt_ids] : gts) {
    std::vector<std::vector<bool>> ok;
    for (std::size_t i : order) {
      const PredictedTriplet& p = c.predictions[i];
      if (p.predicate_id != pred_id) continue;
      std::vector<bool> row;
      for (std::size_t g : gt_ids) {
        const RelationTriplet& r = c.scene.relations[g];
        const Entity& s = c.scene.entities[std::size_t(c.scene.entity_index(r.subject_id))];
        const Entity& o = c.scene.entities[std::size_t(c.scene.entity_index(r.object_id))];
        bool compatible = s.class_id == p.subject_class && o.class_id == p.object_class;
        if (mode == EvalMode::SgDet)
          compatible = compatible && iou(s.box, p.subject_box) >= threshold && iou(o.box, p.object_box) >= threshold;
        row.push_back(compatible);
      }
      ok.push_back(row);
    }
    std::vector<bool> used(gt_ids.size(), false);
    out[pred_id] = max_assignment(ok, 0, used);
  }
  return out;
}

struct OracleReport {
  std::map<int, double> recall_at;
  std::map<int, double> mean_recall_at;
  std::map<std::string, double> partition_recall;  // at K = 100
};

inline OracleReport evaluate(const std::vector<MicroCase>& cases, EvalMode mode, const std::vector<int>& ks,
                             const PartitionSpec& partition, int num_predicates) {
  OracleReport rep;
  std::vector<int> all = ks;
  if (std::find(all.begin(), all.end(), 100) == all.end()) all.push_back(100);
  for (int k : all) {
    double recall_sum = 0.0;
    int images = 0;
    std::vector<double> hit(std::size_t(num_predicates), 0.0), total(std::size_t(num_predicates), 0.0);
    for (const MicroCase& c : cases) {
      const auto matched = matched_per_predicate(c, mode, k);
      int image_hits = 0;
      for (const auto& [p, m] : matched) image_hits += m, hit[std::size_t(p)] += m;
      for (const RelationTriplet& r : c.scene.relations) total[std::size_t(r.predicate_id)] += 1;
      if (c.scene.relations.empty()) continue;
      recall_sum += double(image_hits) / double(c.scene.relations.size());
      ++images;
    }
    rep.recall_at[k] = images ? recall_sum / images : 0.0;
    double mr = 0.0;
    int defined = 0;
    std::vector<double> per(std::size_t(num_predicates), std::nan(""));
    for (int p = 1; p < num_predicates; ++p)
      if (total[std::size_t(p)] > 0) {
        per[std::size_t(p)] = hit[std::size_t(p)] / total[std::size_t(p)];
        mr += per[std::size_t(p)];
        ++defined;
      }
    rep.mean_recall_at[k] = defined ? mr / defined : 0.0;
    if (k == 100) {
      for (const auto& [name, ids] : {std::pair{"head", &partition.head}, std::pair{"body", &partition.body},
                                      std::pair{"tail", &partition.tail}}) {
        double s = 0.0;
        int n = 0;
        for (int p : *ids)
          if (!std::isnan(per[std::size_t(p)])) s += per[std::size_t(p)], ++n;
        rep.partition_recall[name] = n ? s / n : 0.0;
      }
    }
  }
  return rep;
}

}  // namespace relalign::oracle
