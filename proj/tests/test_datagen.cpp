#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>

#include "relalign/codec.hpp"
#include "relalign/datagen.hpp"
#include "test_util.hpp"

using namespace relalign;
using relalign::testing::entity;
using relalign::testing::micro_sample;

namespace {

std::string encode_all(const Corpus& c) {
  std::string out;
  for (const auto* split : {&c.train, &c.val, &c.test})
    for (const SceneSample& s : *split) out += encode_sample(s) + "\n";
  return out;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("relalign_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("corpus generation is deterministic and seed dependent") {
  const CorpusSpec spec = relalign::testing::tiny_spec(30);
  const std::string a = encode_all(generate_corpus(spec));
  CHECK(a == encode_all(generate_corpus(spec)));
  CorpusSpec other = spec;
  other.seed += 1;
  CHECK(a != encode_all(generate_corpus(other)));
}

TEST_CASE("samples depend only on (seed, sample_id)") {
  const CorpusSpec spec = relalign::testing::tiny_spec(30);
  const Corpus corpus = generate_corpus(spec);
  const PlantedSignals signals = planted_signals(spec);
  CHECK(generate_sample(spec, signals, 17) == corpus.train[17]);
  CHECK(generate_sample(spec, signals, 30 + 3) == corpus.val[3]);
  CHECK(corpus.test.front().sample_id == 50);
}

TEST_CASE("generated samples satisfy every type invariant") {
  const CorpusSpec spec = relalign::testing::tiny_spec(80);
  const Corpus corpus = generate_corpus(spec);
  for (const auto* split : {&corpus.train, &corpus.val, &corpus.test})
    for (const SceneSample& s : *split) {
      const ValidationVerdict v = validate_sample(s, spec.num_object_classes, spec.num_predicates);
      CHECK_MESSAGE(v.ok(), "sample " << s.sample_id << ": " << (v.ok() ? "" : v.violations[0].detail));
      CHECK(int(s.entities.size()) <= spec.max_entities);
      CHECK(s.feature_grid.height == spec.height);
      CHECK(s.feature_grid.channels == spec.channels);
    }
}

TEST_CASE("spec validation rejects impossible corpora") {
  CorpusSpec spec;
  spec.max_entities = 1;
  CHECK_THROWS_AS(generate_corpus(spec), std::invalid_argument);
  spec = CorpusSpec{};
  spec.num_predicates = 1;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = CorpusSpec{};
  spec.zipf_s = -0.5;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = CorpusSpec{};
  spec.n_val = 0;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}

TEST_CASE("zipf weights") {
  const auto w = zipf_weights(5, 1.0);
  REQUIRE(w.size() == 5);
  CHECK(w[0] == 0.0);
  const double z = 1.0 + 0.5 + 1.0 / 3 + 0.25;
  CHECK(w[1] == doctest::Approx(1.0 / z));
  CHECK(w[4] == doctest::Approx(0.25 / z));
  for (double v : zipf_weights(4, 0.0)) CHECK((v == 0.0 || v == doctest::Approx(1.0 / 3)));
}

TEST_CASE("zipf_s = 0 gives uniform predicate counts (3 sigma)") {
  CorpusSpec spec;
  spec.n_train = 3000;
  spec.n_val = spec.n_test = 1;
  spec.num_predicates = 4;
  spec.zipf_s = 0.0;
  const Corpus corpus = generate_corpus(spec);
  const auto counts = predicate_counts(corpus.train, 4);
  const double n = double(counts[1] + counts[2] + counts[3]);
  const double sigma = std::sqrt(n * (1.0 / 3) * (2.0 / 3));
  CHECK(counts[0] == 0);
  for (int k = 1; k < 4; ++k) CHECK(std::abs(double(counts[k]) - n / 3) < 3 * sigma);
}

TEST_CASE("zipf_s = 1 gives a rank-1 / rank-2 ratio near 2") {
  CorpusSpec spec;
  spec.n_train = 5000;
  spec.n_val = spec.n_test = 1;
  const Corpus corpus = generate_corpus(spec);
  auto counts = predicate_counts(corpus.train, spec.num_predicates);
  std::sort(counts.begin() + 1, counts.end(), std::greater<>());
  const double ratio = double(counts[1]) / double(counts[2]);
  CHECK(ratio == doctest::Approx(2.0).epsilon(0.1));
}

TEST_CASE("predicate prior oracles") {
  const std::vector<SceneSample> one = {
      micro_sample(0, {entity(1, 2, 0, 0, .5, .5), entity(2, 5, .5, .5, 1, 1)}, {{1, 2, 3}})};
  const PredicatePrior p = compute_predicate_prior(one, 6, 5, 0.0);
  CHECK(std::vector<double>(p.row(2, 5).begin(), p.row(2, 5).end()) == std::vector<double>{0, 0, 0, 1, 0});
  // unobserved pair falls back to the global marginal, here the same one-hot
  CHECK(std::vector<double>(p.row(0, 1).begin(), p.row(0, 1).end()) == std::vector<double>{0, 0, 0, 1, 0});

  const std::vector<SceneSample> two = {micro_sample(
      0, {entity(1, 2, 0, 0, .5, .5), entity(2, 5, .5, .5, 1, 1), entity(3, 2, 0, .5, .5, 1)}, {{1, 2, 1}, {3, 2, 2}})};
  const PredicatePrior q = compute_predicate_prior(two, 6, 5, 0.0);
  CHECK(std::vector<double>(q.row(2, 5).begin(), q.row(2, 5).end()) == std::vector<double>{0, 0.5, 0.5, 0, 0});
}

TEST_CASE("predicate prior rows are distributions with smoothing") {
  const Corpus corpus = generate_corpus(relalign::testing::tiny_spec(100));
  const PredicatePrior p = compute_predicate_prior(corpus.train, 10, 16);
  for (int s = 0; s < 10; ++s)
    for (int o = 0; o < 10; ++o) {
      double sum = 0;
      for (double v : p.row(s, o)) {
        CHECK(v > 0.0);
        sum += v;
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
  // independent count oracle for one observed pair
  std::map<std::pair<int, int>, std::vector<double>> counts;
  for (const SceneSample& smp : corpus.train)
    for (const RelationTriplet& r : smp.relations) {
      const int s = smp.entities[std::size_t(smp.entity_index(r.subject_id))].class_id;
      const int o = smp.entities[std::size_t(smp.entity_index(r.object_id))].class_id;
      auto& row = counts[{s, o}];
      row.resize(16, 0.0);
      row[std::size_t(r.predicate_id)] += 1.0;
    }
  const auto& [key, row] = *counts.begin();
  double total = 0;
  for (double c : row) total += c + kPriorSmoothing;
  for (int k = 0; k < 16; ++k)
    CHECK(p.at(key.first, key.second, k) == doctest::Approx((row[std::size_t(k)] + kPriorSmoothing) / total));
}

TEST_CASE("partition sizes, tie-break and frequency order") {
  std::vector<SceneSample> uniform;
  for (int k = 1; k < 16; ++k)
    uniform.push_back(micro_sample(k, {entity(1, 0, 0, 0, .5, .5), entity(2, 1, .5, .5, 1, 1)}, {{1, 2, k}}));
  const PartitionSpec p = compute_partition(uniform, 16, 0.2, 0.4);
  CHECK(p.head == std::vector<int>{1, 2, 3});
  CHECK(p.body == std::vector<int>{4, 5, 6, 7, 8, 9});
  CHECK(p.tail == std::vector<int>{10, 11, 12, 13, 14, 15});
  CHECK(p.bucket_of(1) == "head");
  CHECK(p.bucket_of(9) == "body");
  CHECK(p.bucket_of(15) == "tail");
  CHECK(p.bucket_of(0).empty());

  const Corpus corpus = generate_corpus(relalign::testing::tiny_spec(300));
  const PartitionSpec q = compute_partition(corpus.train, 16);
  // independent frequency scan
  std::vector<std::pair<long, int>> freq;
  std::vector<long> c(16, 0);
  for (const SceneSample& s : corpus.train)
    for (const RelationTriplet& r : s.relations) ++c[std::size_t(r.predicate_id)];
  for (int k = 1; k < 16; ++k) freq.push_back({-c[std::size_t(k)], k});
  std::sort(freq.begin(), freq.end());
  std::vector<int> head;
  for (int i = 0; i < 3; ++i) head.push_back(freq[std::size_t(i)].second);
  CHECK(q.head == head);
  std::vector<int> all = q.head;
  all.insert(all.end(), q.body.begin(), q.body.end());
  all.insert(all.end(), q.tail.begin(), q.tail.end());
  std::sort(all.begin(), all.end());
  std::vector<int> expected(15);
  std::iota(expected.begin(), expected.end(), 1);
  CHECK(all == expected);
}

TEST_CASE("bundle write and load round-trip") {
  const CorpusBundle b = make_bundle(relalign::testing::tiny_spec(20));
  const auto dir = temp_dir("bundle");
  write_corpus(dir, b);
  const CorpusBundle c = load_corpus(dir);
  CHECK(c.spec == b.spec);
  CHECK(c.corpus.train == b.corpus.train);
  CHECK(c.corpus.test == b.corpus.test);
  CHECK(c.prior == b.prior);
  CHECK(c.partition == b.partition);
  CHECK(corpus_spec_from_json(to_json(b.spec)) == b.spec);
}

TEST_CASE("corrupt corpus files carry file and line context") {
  const CorpusBundle b = make_bundle(relalign::testing::tiny_spec(5));
  const auto dir = temp_dir("corrupt");
  write_corpus(dir, b);
  {
    std::ofstream out(dir / "val.jsonl", std::ios::app);
    out << "{not json\n";
  }
  try {
    load_corpus(dir);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    const std::string what = e.what();
    CHECK(what.find("val.jsonl:21") != std::string::npos);
  }
}
