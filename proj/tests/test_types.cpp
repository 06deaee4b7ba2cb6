#include <doctest.h>

#include <set>

#include "relalign/codec.hpp"
#include "relalign/datagen.hpp"
#include "relalign/rng.hpp"
#include "test_util.hpp"

using namespace relalign;
using relalign::testing::entity;
using relalign::testing::micro_sample;

TEST_CASE("rng streams are reproducible and independent") {
  Rng a(42, 1), b(42, 1), c(42, 2);
  for (int i = 0; i < 100; ++i) {
    const std::uint64_t x = a.next_u64();
    CHECK(x == b.next_u64());
    CHECK(x != c.next_u64());
  }
  CHECK(a.counter() == 100);
  CHECK(Rng(3, 0).split(5) == Rng(3, 0).split(5));
  CHECK_FALSE(Rng(3, 0).split(5) == Rng(3, 0).split(6));
}

TEST_CASE("rng draw is a pure function of seed, stream and counter") {
  Rng r(9, 4);
  r.next_u64();
  const std::uint64_t second = r.next_u64();
  const std::uint64_t key = mix64(9) ^ mix64(~std::uint64_t(4));
  CHECK(second == mix64(key + 2 * 0x9e3779b97f4a7c15ULL));
}

TEST_CASE("rng uniform, below and normal moments") {
  Rng r(1, 0);
  const int n = 200000;
  double sum = 0, sq = 0, usum = 0;
  std::vector<int> hist(7, 0);
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    sum += z;
    sq += z * z;
    const double u = r.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    usum += u;
    ++hist[r.below(7)];
  }
  CHECK(std::abs(sum / n) < 0.01);
  CHECK(std::abs(sq / n - 1.0) < 0.02);
  CHECK(std::abs(usum / n - 0.5) < 0.005);
  for (int h : hist) CHECK(std::abs(h - n / 7.0) < 4.0 * std::sqrt(n / 7.0));
  for (int i = 0; i < 1000; ++i) {
    const int v = r.between(-2, 3);
    REQUIRE(v >= -2);
    REQUIRE(v <= 3);
  }
  CHECK_FALSE(r.bernoulli(0.0));
  CHECK(r.bernoulli(1.0));
}

TEST_CASE("iou and union box") {
  const BoundingBox a{0.0, 0.0, 0.5, 0.5}, b{0.25, 0.25, 0.75, 0.75}, far{0.8, 0.8, 1.0, 1.0};
  CHECK(iou(a, a) == doctest::Approx(1.0));
  CHECK(iou(a, b) == doctest::Approx(0.0625 / (0.25 + 0.25 - 0.0625)));
  CHECK(iou(a, far) == 0.0);
  CHECK(union_box(a, far) == BoundingBox{0.0, 0.0, 1.0, 1.0});
  CHECK(a.valid());
  CHECK_FALSE(BoundingBox{0.5, 0.0, 0.5, 1.0}.valid());
  CHECK_FALSE(BoundingBox{0.0, 0.0, 1.1, 1.0}.valid());
}

TEST_CASE("feature grid cell ranges and region means") {
  FeatureGrid g(4, 4, 1);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) g.at(r, c, 0) = r * 4 + c;
  const auto range = g.cells_of({0.25, 0.5, 0.75, 1.0});
  CHECK(range.row_begin == 2);
  CHECK(range.row_end == 4);
  CHECK(range.col_begin == 1);
  CHECK(range.col_end == 3);
  // cells (2,1) (2,2) (3,1) (3,2) = 9, 10, 13, 14
  CHECK(g.region_mean({0.25, 0.5, 0.75, 1.0})(0) == doctest::Approx(11.5));
  const auto tiny = g.cells_of({0.3, 0.3, 0.31, 0.31});
  CHECK(tiny.row_end - tiny.row_begin >= 1);
  CHECK(tiny.col_end - tiny.col_begin >= 1);
}

TEST_CASE("label components are 4-connected regions") {
  // 0 1 1 0
  // 0 0 1 2
  // 3 0 0 2
  // 3 3 0 1
  const std::vector<int> labels = {0, 1, 1, 0, 0, 0, 1, 2, 3, 0, 0, 2, 3, 3, 0, 1};
  const auto comps = label_components(labels, 4, 4, 0);
  REQUIRE(comps.size() == 4);
  CHECK(comps[0].label == 1);
  CHECK(comps[0].cells == std::vector<int>{1, 2, 6});
  CHECK(comps[0].box == BoundingBox{0.25, 0.0, 0.75, 0.5});
  CHECK(comps[1].label == 2);
  CHECK(comps[2].label == 3);
  CHECK(comps[2].cells == std::vector<int>{8, 12, 13});
  CHECK(comps[3].label == 1);
  CHECK(comps[3].cells == std::vector<int>{15});
  CHECK(label_components(labels, 4, 4, 0, 2).size() == 3);
  CHECK_THROWS_AS(label_components(labels, 3, 4, 0), std::invalid_argument);
}

TEST_CASE("validate_sample reports each violated invariant") {
  CHECK(validate_sample(micro_sample(0, {entity(1, 0, 0, 0, .5, .5)}, {})).ok());

  const SceneSample loop = micro_sample(1, {entity(1, 0, 0, 0, .5, .5), entity(2, 1, .5, .5, 1, 1)}, {{1, 1, 3}});
  CHECK(validate_sample(loop).has("self-loop"));

  const SceneSample dangling = micro_sample(2, {entity(1, 0, 0, 0, .5, .5)}, {{1, 9, 3}});
  CHECK(validate_sample(dangling).has("dangling reference"));

  SceneSample many = micro_sample(3, {entity(1, 0, 0, 0, .5, .5), entity(1, 12, .5, .5, 1, 1)}, {{1, 2, 0}});
  many.feature_grid.data[0] = std::nan("");
  const ValidationVerdict v = validate_sample(many, 10, 16);
  CHECK(v.has("duplicate instance"));
  CHECK(v.has("bad class"));
  CHECK(v.has("background predicate"));
  CHECK(v.has("non-finite feature"));
  CHECK(v.has("dangling reference"));

  const SceneSample dup =
      micro_sample(4, {entity(1, 0, 0, 0, .5, .5), entity(2, 1, .5, .5, 1, 1)}, {{1, 2, 3}, {1, 2, 4}});
  CHECK(validate_sample(dup).has("duplicate pair"));
  CHECK(validate_sample(dup, 10, 4).has("bad predicate"));
}

TEST_CASE("validate_sample is pure") {
  const SceneSample s = micro_sample(5, {entity(1, 0, 0, 0, .5, .5)}, {{1, 1, 2}, {1, 3, 2}});
  CHECK(validate_sample(s) == validate_sample(s));
}

TEST_CASE("sample encoding round-trips field for field") {
  CorpusSpec spec = relalign::testing::tiny_spec(12);
  const Corpus corpus = generate_corpus(spec);
  for (const SceneSample& s : corpus.train) {
    const std::string line = encode_sample(s);
    CHECK(line.find('\n') == std::string::npos);
    CHECK(decode_sample(line) == s);
  }
}

TEST_CASE("sample encoding uses the canonical field names") {
  const SceneSample s = micro_sample(3, {entity(1, 2, 0, 0, .5, .5), entity(4, 1, .5, .5, 1, 1)}, {{1, 4, 5}});
  const auto j = nlohmann::json::parse(encode_sample(s));
  std::set<std::string> keys;
  for (const auto& [k, v] : j.items()) keys.insert(k);
  CHECK(keys == std::set<std::string>{"sample_id", "feature_grid", "entities", "relations"});
  CHECK(j["feature_grid"].size() == 4);
  CHECK(j["feature_grid"][0].size() == 4);
  CHECK(j["feature_grid"][0][0].size() == 2);
  CHECK(j["entities"][0]["box"] == nlohmann::json::array({0.0, 0.0, 0.5, 0.5}));
  CHECK(j["relations"][0]["predicate_id"] == 5);
}

TEST_CASE("malformed lines are rejected") {
  CHECK_THROWS_AS(decode_sample("{"), DataError);
  CHECK_THROWS_AS(decode_sample(R"({"sample_id": 1})"), DataError);
}
