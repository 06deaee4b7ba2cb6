#include <doctest.h>

#include <cmath>

#include "metrics_oracle.hpp"
#include "relalign/metrics.hpp"
#include "test_util.hpp"

using namespace relalign;
using relalign::testing::entity;
using relalign::testing::micro_sample;

namespace {

PredictedTriplet triplet(const SceneSample& s, int subject_id, int object_id, int predicate, double score) {
  const Entity& a = s.entities[std::size_t(s.entity_index(subject_id))];
  const Entity& b = s.entities[std::size_t(s.entity_index(object_id))];
  return {a.class_id, a.box, b.class_id, b.box, predicate, score};
}

// A, B, C with classes 0, 1, 2 and relations (A,r1,B), (B,r2,C).
SceneSample abc() {
  return micro_sample(0, {entity(1, 0, 0, 0, .3, .3), entity(2, 1, .4, .4, .7, .7), entity(3, 2, .7, 0, 1, .3)},
                      {{1, 2, 1}, {2, 3, 2}});
}

PartitionSpec three_way() { return {{1}, {2}, {3}}; }

}  // namespace

TEST_CASE("match_triplets basic contracts") {
  const SceneSample s = abc();
  CHECK(match_triplets({}, s, EvalMode::PredCls, 5).empty());
  const std::vector<PredictedTriplet> one = {triplet(s, 1, 2, 1, 0.9)};
  CHECK(match_triplets(one, s, EvalMode::PredCls, 1) == std::vector<int>{0});
  CHECK_THROWS_AS(match_triplets(one, s, EvalMode::PredCls, 0), std::invalid_argument);

  // top-2 holds (A,r1,B) and a wrong predicate; only gt 0 matches
  const std::vector<PredictedTriplet> two = {triplet(s, 1, 2, 1, 0.9), triplet(s, 2, 3, 3, 0.8),
                                             triplet(s, 2, 3, 2, 0.1)};
  CHECK(match_triplets(two, s, EvalMode::PredCls, 2) == std::vector<int>{0});
  const ImageMatches m = image_matches(two, s, EvalMode::PredCls, 2);
  CHECK(recall_at_k(std::span<const ImageMatches>(&m, 1)) == 0.5);
  CHECK(match_triplets(two, s, EvalMode::PredCls, 3) == std::vector<int>{0, 1});
}

TEST_CASE("each gt and each prediction is used at most once") {
  const SceneSample s = abc();
  const std::vector<PredictedTriplet> dup = {triplet(s, 1, 2, 1, 0.9), triplet(s, 1, 2, 1, 0.8)};
  CHECK(match_triplets(dup, s, EvalMode::PredCls, 10) == std::vector<int>{0});
}

TEST_CASE("sgdet requires IoU >= threshold on both boxes") {
  const SceneSample s = abc();
  PredictedTriplet p = triplet(s, 1, 2, 1, 1.0);
  CHECK(match_triplets({&p, 1}, s, EvalMode::SgDet, 1) == std::vector<int>{0});
  p.object_box = {0.55, 0.55, 0.85, 0.85};  // IoU with B = 0.0225/0.1575 < 0.5
  CHECK(match_triplets({&p, 1}, s, EvalMode::SgDet, 1).empty());
  CHECK(match_triplets({&p, 1}, s, EvalMode::PredCls, 1) == std::vector<int>{0});
  p.subject_class = 2;
  CHECK(match_triplets({&p, 1}, s, EvalMode::PredCls, 1).empty());
}

TEST_CASE("recall and mean recall arithmetic") {
  ImageMatches full{{1, 2}, {true, true}}, half{{1, 3}, {true, false}}, empty{{}, {}};
  const std::vector<ImageMatches> images = {full, half, empty};
  CHECK(recall_at_k(images) == doctest::Approx(0.75));
  const auto per = per_predicate_recall(images, 4);
  CHECK(std::isnan(per[0]));
  CHECK(per[1] == 1.0);
  CHECK(per[2] == 1.0);
  CHECK(per[3] == 0.0);
  CHECK(mean_recall_at_k(images, 4) == doctest::Approx(2.0 / 3.0));
  const std::vector<ImageMatches> none = {ImageMatches{{1}, {false}}};
  CHECK(recall_at_k(none) == 0.0);
  const std::vector<double> two = {std::nan(""), 1.0, 0.0};
  CHECK(mean_of_defined(two) == 0.5);
}

TEST_CASE("partition recall buckets") {
  const std::vector<double> per = {std::nan(""), 0.8, 0.4, 0.0};
  const auto r = partition_recall(per, three_way());
  CHECK(r.at("head") == 0.8);
  CHECK(r.at("body") == 0.4);
  CHECK(r.at("tail") == 0.0);
  const std::vector<double> uniform = {std::nan(""), 0.3, 0.3, 0.3};
  for (const auto& [bucket, v] : partition_recall(uniform, three_way())) CHECK(v == 0.3);
  const std::vector<double> undefined_tail = {std::nan(""), 0.5, 0.5, std::nan("")};
  CHECK(partition_recall(undefined_tail, three_way()).at("tail") == 0.0);
}

TEST_CASE("hand-built 3-predicate dataset against a counting oracle") {
  const SceneSample a = abc();
  SceneSample b = micro_sample(1, {entity(1, 0, 0, 0, .5, .5), entity(2, 0, .5, .5, 1, 1)}, {{1, 2, 3}, {2, 1, 1}});
  const std::vector<SceneSample> split = {a, b};
  auto predict = [&](const SceneSample& s) -> std::vector<PredictedTriplet> {
    if (s.sample_id == 0) return {triplet(s, 1, 2, 1, 0.5), triplet(s, 2, 3, 3, 0.9)};
    return {triplet(s, 2, 1, 1, 0.7)};
  };
  const std::vector<int> ks = {1, 2};
  const EvalReport r = evaluate_predictions(split, predict, EvalMode::PredCls, ks, three_way(), 4);
  // K=1: image a top-1 is the wrong (B,r3,C) -> 0/2; image b matches (2,r1,1) -> 1/2.
  CHECK(r.recall_at.at(1) == 0.25);
  // per predicate at K=1: r1 1/2, r2 0/1, r3 0/1
  CHECK(r.mean_recall_at.at(1) == doctest::Approx((0.5 + 0.0 + 0.0) / 3.0));
  // K=2: a gets (A,r1,B) -> 1/2; b unchanged 1/2. r1 2/2, r2 0/1, r3 0/1.
  CHECK(r.recall_at.at(2) == 0.5);
  CHECK(r.mean_recall_at.at(2) == doctest::Approx(1.0 / 3.0));
  CHECK(r.partition_recall.at("head") == 1.0);
}

TEST_CASE("perfect and background-only predictors") {
  const Corpus corpus = generate_corpus(relalign::testing::tiny_spec(10));
  const PartitionSpec part = compute_partition(corpus.train, 16);
  const std::vector<int> ks = {20, 50, 100};
  auto perfect = [](const SceneSample& s) {
    std::vector<PredictedTriplet> out;
    for (const RelationTriplet& r : s.relations) out.push_back(triplet(s, r.subject_id, r.object_id, r.predicate_id, 1.0));
    return out;
  };
  for (EvalMode mode : {EvalMode::PredCls, EvalMode::SgCls, EvalMode::SgDet}) {
    const EvalReport r = evaluate_predictions(corpus.val, perfect, mode, ks, part, 16);
    for (int k : ks) {
      CHECK(r.recall_at.at(k) == 1.0);
      CHECK(r.mean_recall_at.at(k) == 1.0);
    }
  }
  // Background-only scores: expand_pairs drops predicate 0, leaving nothing to rank.
  auto background = [](const SceneSample& s) {
    std::vector<ScoredPair> pairs;
    for (std::size_t i = 0; i < s.entities.size(); ++i)
      for (std::size_t j = 0; j < s.entities.size(); ++j) {
        if (i == j) continue;
        ScoredPair p{int(i), int(j), s.entities[i].class_id, s.entities[i].box, s.entities[j].class_id,
                     s.entities[j].box, 1.0, std::vector<double>(16, 0.0)};
        p.predicate_probs[0] = 1.0;
        pairs.push_back(p);
      }
    std::vector<PredictedTriplet> out = expand_pairs(pairs, true);
    std::erase_if(out, [](const PredictedTriplet& t) { return t.score <= 0.0; });
    return out;
  };
  const EvalReport r = evaluate_predictions(corpus.val, background, EvalMode::PredCls, ks, part, 16);
  for (int k : ks) CHECK(r.recall_at.at(k) == 0.0);
}

TEST_CASE("graph constraint keeps one predicate per ordered pair") {
  ScoredPair p{0, 1, 3, {0, 0, .5, .5}, 4, {.5, .5, 1, 1}, 0.5, {0.1, 0.2, 0.6, 0.1}};
  ScoredPair q{1, 0, 4, {.5, .5, 1, 1}, 3, {0, 0, .5, .5}, 1.0, {0.7, 0.25, 0.0, 0.05}};
  const std::vector<ScoredPair> pairs = {p, q};
  const auto constrained = expand_pairs(pairs, true);
  REQUIRE(constrained.size() == 2);
  CHECK(constrained[0].predicate_id == 2);
  CHECK(constrained[0].score == doctest::Approx(0.3));
  CHECK(constrained[1].predicate_id == 1);
  CHECK(constrained[1].score == doctest::Approx(0.25));
  const auto free = expand_pairs(pairs, false);
  CHECK(free.size() == 6);
  for (std::size_t i = 1; i < free.size(); ++i) CHECK(free[i - 1].score >= free[i].score);
  for (const auto& t : free) CHECK(t.predicate_id != 0);
}

TEST_CASE("ranking is stable on ties") {
  std::vector<PredictedTriplet> preds(4);
  for (int i = 0; i < 4; ++i) preds[std::size_t(i)].predicate_id = i + 1, preds[std::size_t(i)].score = i % 2 ? 0.5 : 0.9;
  rank_predictions(preds);
  CHECK(preds[0].predicate_id == 1);
  CHECK(preds[1].predicate_id == 3);
  CHECK(preds[2].predicate_id == 2);
  CHECK(preds[3].predicate_id == 4);
}

TEST_CASE("recalls are monotone in K and mR lies within per-predicate bounds") {
  Rng rng(3, 0);
  std::vector<oracle::MicroCase> cases;
  for (int i = 0; i < 60; ++i) cases.push_back(oracle::micro_case(rng, 3, 5, 5, 8));
  std::vector<SceneSample> split;
  for (auto& c : cases) split.push_back(c.scene);
  auto predict = [&](const SceneSample& s) {
    for (auto& c : cases)
      if (c.scene.sample_id == s.sample_id) return c.predictions;
    return std::vector<PredictedTriplet>{};
  };
  const std::vector<int> ks = {1, 2, 3, 5, 8};
  const PartitionSpec part{{1}, {2, 3}, {4}};
  for (EvalMode mode : {EvalMode::PredCls, EvalMode::SgDet}) {
    const EvalReport r = evaluate_predictions(split, predict, mode, ks, part, 5);
    for (std::size_t i = 1; i < ks.size(); ++i) {
      CHECK(r.recall_at.at(ks[i]) >= r.recall_at.at(ks[i - 1]));
      CHECK(r.mean_recall_at.at(ks[i]) >= r.mean_recall_at.at(ks[i - 1]));
    }
    for (int k : ks) {
      double lo = 1.0, hi = 0.0;
      for (double v : r.per_predicate_recall.at(k))
        if (!std::isnan(v)) lo = std::min(lo, v), hi = std::max(hi, v);
      CHECK(r.mean_recall_at.at(k) >= lo);
      CHECK(r.mean_recall_at.at(k) <= hi);
    }
  }
}

TEST_CASE("permuting predictions with distinct scores leaves recall unchanged") {
  Rng rng(4, 0);
  for (int trial = 0; trial < 100; ++trial) {
    oracle::MicroCase c = oracle::micro_case(rng, 3, 5);
    for (std::size_t i = 0; i < c.predictions.size(); ++i) c.predictions[i].score = 0.1 * double(i) + 0.01;
    std::vector<PredictedTriplet> a = c.predictions, b = c.predictions;
    std::reverse(b.begin(), b.end());
    rank_predictions(a);
    rank_predictions(b);
    for (int k : {1, 3, 6})
      CHECK(match_triplets(a, c.scene, EvalMode::SgDet, k) == match_triplets(b, c.scene, EvalMode::SgDet, k));
  }
}

TEST_CASE("greedy match count equals exhaustive assignment on micro cases") {
  Rng rng(5, 0);
  int checked = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const oracle::MicroCase c = oracle::micro_case(rng, 2, 4);
    std::vector<PredictedTriplet> ranked = c.predictions;
    rank_predictions(ranked);
    for (EvalMode mode : {EvalMode::PredCls, EvalMode::SgDet})
      for (int k : {1, 2, 4, 6}) {
        int expected = 0;
        for (const auto& [p, m] : oracle::matched_per_predicate(c, mode, k)) expected += m;
        const int got = int(match_triplets(ranked, c.scene, mode, k).size());
        CHECK_MESSAGE(got == expected, "trial " << trial << " mode " << to_string(mode) << " K " << k);
        ++checked;
      }
  }
  CHECK(checked == 4000);
}

TEST_CASE("5-image end-to-end report equals the oracle") {
  Rng rng(6, 0);
  std::vector<oracle::MicroCase> cases;
  for (int i = 0; i < 5; ++i) cases.push_back(oracle::micro_case(rng, 3, 6));
  std::vector<SceneSample> split;
  for (auto& c : cases) split.push_back(c.scene);
  auto predict = [&](const SceneSample& s) {
    for (auto& c : cases)
      if (c.scene.sample_id == s.sample_id) return c.predictions;
    return std::vector<PredictedTriplet>{};
  };
  const PartitionSpec part{{1}, {2, 3}, {4, 5}};
  const std::vector<int> ks = {1, 2, 3, 6};
  for (EvalMode mode : {EvalMode::PredCls, EvalMode::SgCls, EvalMode::SgDet}) {
    const EvalReport r = evaluate_predictions(split, predict, mode, ks, part, 6);
    const oracle::OracleReport o = oracle::evaluate(cases, mode, ks, part, 6);
    CHECK(r.recall_at == o.recall_at);
    CHECK(r.mean_recall_at == o.mean_recall_at);
    CHECK(r.partition_recall == o.partition_recall);
  }
}

TEST_CASE("eval report serialization") {
  const SceneSample s = abc();
  const std::vector<SceneSample> split = {s};
  const std::vector<int> ks = {1, 2};
  const EvalReport r = evaluate_predictions(
      split, [&](const SceneSample& x) { return std::vector<PredictedTriplet>{triplet(x, 1, 2, 1, 0.5)}; },
      EvalMode::PredCls, ks, three_way(), 4);
  const EvalReport back = EvalReport::from_json(r.to_json());
  CHECK(back.recall_at == r.recall_at);
  CHECK(back.mean_recall_at == r.mean_recall_at);
  CHECK(back.partition_recall == r.partition_recall);
  CHECK(std::isnan(back.per_predicate_recall.at(1)[0]));
  const std::string csv = r.to_csv();
  CHECK(csv.rfind("metric,mode,K,value\n", 0) == 0);
  CHECK(csv.find("R,predcls,2,0.5") != std::string::npos);
  const std::string per = r.per_predicate_csv(three_way());
  CHECK(per.rfind("predicate_id,partition,K,recall\n", 0) == 0);
  CHECK(parse_eval_mode("sgdet") == EvalMode::SgDet);
  CHECK_THROWS(parse_eval_mode("detection"));
}
