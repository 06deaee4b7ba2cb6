#include "relalign/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "relalign/codec.hpp"
#include "relalign/rng.hpp"

namespace relalign {

namespace {

constexpr std::uint64_t kSignatureStream = 0xC0FFEE00ULL << 32;

Eigen::RowVectorXd unit_vector(Rng& rng, int dim) {
  Eigen::RowVectorXd v(dim);
  for (int i = 0; i < dim; ++i) v[i] = rng.normal();
  return v / v.norm();
}

std::vector<int> distinct_classes(Rng& rng, int count, int num_classes) {
  std::vector<int> all(static_cast<std::size_t>(num_classes));
  std::iota(all.begin(), all.end(), 0);
  for (int i = num_classes - 1; i > 0; --i) std::swap(all[std::size_t(i)], all[rng.below(std::uint64_t(i) + 1)]);
  all.resize(std::size_t(std::min(count, num_classes)));
  return all;
}

int sample_discrete(Rng& rng, std::span<const double> cumulative) {
  const double u = rng.uniform() * cumulative.back();
  const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
  return static_cast<int>(std::min<std::ptrdiff_t>(it - cumulative.begin(), std::ssize(cumulative) - 1));
}

struct CellRect {
  int row, col, h, w;
  bool near(const CellRect& o) const {
    // Overlapping or closer than one free cell.
    return row < o.row + o.h + 1 && o.row < row + h + 1 && col < o.col + o.w + 1 && o.col < col + w + 1;
  }
};

void add_signal(FeatureGrid& grid, const BoundingBox& box, const Eigen::RowVectorXd& signal) {
  const auto r = grid.cells_of(box);
  for (int row = r.row_begin; row < r.row_end; ++row)
    for (int col = r.col_begin; col < r.col_end; ++col)
      for (int k = 0; k < grid.channels; ++k) grid.at(row, col, k) += signal[k];
}

}  // namespace

void CorpusSpec::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("invalid CorpusSpec: " + what); };
  if (n_train < 1 || n_val < 1 || n_test < 1) fail("sample counts must be >= 1");
  if (num_object_classes < 1) fail("num_object_classes must be >= 1");
  if (num_predicates < 2) fail("num_predicates must be >= 2");
  if (height < 1 || width < 1 || channels < 1) fail("grid shape must be positive");
  if (max_entities < 2) fail("max_entities must be >= 2 so a relation is possible");
  if (zipf_s < 0.0) fail("zipf_s must be >= 0");
  if (min_box_cells < 1 || max_box_cells < min_box_cells) fail("box size range");
  if (2 * min_box_cells + 1 > std::max(height, width)) fail("grid too small for two entities");
  if (class_affinity < 0.0 || class_affinity > 1.0) fail("class_affinity must be in [0,1]");
}

nlohmann::json to_json(const CorpusSpec& s) {
  return {{"n_train", s.n_train},
          {"n_val", s.n_val},
          {"n_test", s.n_test},
          {"num_object_classes", s.num_object_classes},
          {"num_predicates", s.num_predicates},
          {"height", s.height},
          {"width", s.width},
          {"channels", s.channels},
          {"max_entities", s.max_entities},
          {"zipf_s", s.zipf_s},
          {"seed", s.seed},
          {"min_box_cells", s.min_box_cells},
          {"max_box_cells", s.max_box_cells},
          {"entity_signal", s.entity_signal},
          {"relation_signal", s.relation_signal},
          {"role_signal", s.role_signal},
          {"noise", s.noise},
          {"class_affinity", s.class_affinity}};
}

CorpusSpec corpus_spec_from_json(const nlohmann::json& j) {
  CorpusSpec s;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("n_train", s.n_train);
  get("n_val", s.n_val);
  get("n_test", s.n_test);
  get("num_object_classes", s.num_object_classes);
  get("num_predicates", s.num_predicates);
  get("height", s.height);
  get("width", s.width);
  get("channels", s.channels);
  get("max_entities", s.max_entities);
  get("zipf_s", s.zipf_s);
  get("seed", s.seed);
  get("min_box_cells", s.min_box_cells);
  get("max_box_cells", s.max_box_cells);
  get("entity_signal", s.entity_signal);
  get("relation_signal", s.relation_signal);
  get("role_signal", s.role_signal);
  get("noise", s.noise);
  get("class_affinity", s.class_affinity);
  return s;
}

std::string CorpusSpec::hash() const {
  std::uint64_t h = 0x243f6a8885a308d3ULL;
  for (unsigned char c : to_json(*this).dump()) h = mix64(h ^ c);
  std::ostringstream out;
  out << std::hex;
  out.width(16);
  out.fill('0');
  out << h;
  return out.str();
}

PlantedSignals planted_signals(const CorpusSpec& spec) {
  Rng rng(spec.seed, kSignatureStream);
  PlantedSignals s;
  s.class_signature = Matrix(spec.num_object_classes, spec.channels);
  for (int c = 0; c < spec.num_object_classes; ++c) s.class_signature.row(c) = unit_vector(rng, spec.channels);
  s.predicate_signature = Matrix::Zero(spec.num_predicates, spec.channels);
  s.role_signature = Matrix::Zero(spec.num_predicates, spec.channels);
  s.preferred_subjects.resize(std::size_t(spec.num_predicates));
  s.preferred_objects.resize(std::size_t(spec.num_predicates));
  for (int k = 1; k < spec.num_predicates; ++k) {
    s.predicate_signature.row(k) = unit_vector(rng, spec.channels);
    s.role_signature.row(k) = unit_vector(rng, spec.channels);
    s.preferred_subjects[std::size_t(k)] = distinct_classes(rng, 2, spec.num_object_classes);
    s.preferred_objects[std::size_t(k)] = distinct_classes(rng, 2, spec.num_object_classes);
  }
  return s;
}

std::vector<double> zipf_weights(int num_predicates, double exponent) {
  std::vector<double> w(std::size_t(num_predicates), 0.0);
  double total = 0.0;
  for (int k = 1; k < num_predicates; ++k) total += w[std::size_t(k)] = std::pow(double(k), -exponent);
  for (double& v : w) v /= total;
  return w;
}

SceneSample generate_sample(const CorpusSpec& spec, const PlantedSignals& signals, std::int64_t sample_id) {
  Rng rng(spec.seed, static_cast<std::uint64_t>(sample_id));
  SceneSample sample;
  sample.sample_id = sample_id;
  sample.feature_grid = FeatureGrid(spec.height, spec.width, spec.channels);

  // Box placement with a one-cell gap between entities.
  const int target = rng.between(2, spec.max_entities);
  std::vector<CellRect> rects;
  for (int attempt = 0; attempt < 400 && std::ssize(rects) < target; ++attempt) {
    const int h = rng.between(spec.min_box_cells, std::min(spec.max_box_cells, spec.height));
    const int w = rng.between(spec.min_box_cells, std::min(spec.max_box_cells, spec.width));
    const CellRect cand{rng.between(0, spec.height - h), rng.between(0, spec.width - w), h, w};
    if (std::none_of(rects.begin(), rects.end(), [&](const CellRect& r) { return r.near(cand); }))
      rects.push_back(cand);
  }
  if (rects.size() < 2) {
    // Deterministic fallback: opposite corners with minimum size.
    const int m = spec.min_box_cells;
    rects = {{0, 0, m, m}, {spec.height - m, spec.width - m, m, m}};
  }
  const int n = static_cast<int>(rects.size());
  std::vector<int> classes(std::size_t(n), -1);
  for (int i = 0; i < n; ++i) {
    const CellRect& r = rects[std::size_t(i)];
    sample.entities.push_back({{double(r.col) / spec.width, double(r.row) / spec.height,
                                double(r.col + r.w) / spec.width, double(r.row + r.h) / spec.height},
                               -1,
                               i});
  }

  // Relations: predicate ~ Zipf, endpoints uniform over unused ordered pairs.
  const std::vector<double> weights = zipf_weights(spec.num_predicates, spec.zipf_s);
  std::vector<double> cumulative(weights.size());
  std::partial_sum(weights.begin(), weights.end(), cumulative.begin());
  std::vector<std::pair<int, int>> free_pairs;
  for (int s = 0; s < n; ++s)
    for (int o = 0; o < n; ++o)
      if (s != o) free_pairs.emplace_back(s, o);
  const int n_rel = rng.between(1, n);
  auto assign_class = [&](int entity, const std::vector<int>& preferred) {
    if (classes[std::size_t(entity)] >= 0) return;
    if (!preferred.empty() && rng.bernoulli(spec.class_affinity))
      classes[std::size_t(entity)] = preferred[rng.below(preferred.size())];
    else
      classes[std::size_t(entity)] = static_cast<int>(rng.below(std::uint64_t(spec.num_object_classes)));
  };
  for (int r = 0; r < n_rel && !free_pairs.empty(); ++r) {
    const int k = sample_discrete(rng, cumulative);
    const std::size_t pick = rng.below(free_pairs.size());
    const auto [s, o] = free_pairs[pick];
    free_pairs.erase(free_pairs.begin() + std::ptrdiff_t(pick));
    assign_class(s, signals.preferred_subjects[std::size_t(k)]);
    assign_class(o, signals.preferred_objects[std::size_t(k)]);
    sample.relations.push_back({s, o, k});
  }
  for (int i = 0; i < n; ++i) {
    assign_class(i, {});
    sample.entities[std::size_t(i)].class_id = classes[std::size_t(i)];
  }

  // Feature grid: noise plus planted signals.
  FeatureGrid& grid = sample.feature_grid;
  for (double& v : grid.data) v = spec.noise * rng.normal();
  for (const Entity& e : sample.entities)
    add_signal(grid, e.box, spec.entity_signal * signals.class_signature.row(e.class_id));
  for (const RelationTriplet& t : sample.relations) {
    const BoundingBox& sb = sample.entities[std::size_t(t.subject_id)].box;
    const BoundingBox& ob = sample.entities[std::size_t(t.object_id)].box;
    add_signal(grid, union_box(sb, ob), spec.relation_signal * signals.predicate_signature.row(t.predicate_id));
    add_signal(grid, sb, spec.role_signal * signals.role_signature.row(t.predicate_id));
  }
  return sample;
}

Corpus generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  const PlantedSignals signals = planted_signals(spec);
  Corpus corpus;
  std::int64_t id = 0;
  auto fill = [&](std::vector<SceneSample>& split, int count) {
    split.reserve(std::size_t(count));
    for (int i = 0; i < count; ++i) split.push_back(generate_sample(spec, signals, id++));
  };
  fill(corpus.train, spec.n_train);
  fill(corpus.val, spec.n_val);
  fill(corpus.test, spec.n_test);
  return corpus;
}

std::vector<std::int64_t> predicate_counts(std::span<const SceneSample> samples, int num_predicates) {
  std::vector<std::int64_t> counts(std::size_t(num_predicates), 0);
  for (const SceneSample& s : samples)
    for (const RelationTriplet& t : s.relations)
      if (t.predicate_id >= 0 && t.predicate_id < num_predicates) ++counts[std::size_t(t.predicate_id)];
  return counts;
}

PredicatePrior compute_predicate_prior(std::span<const SceneSample> train, int num_object_classes,
                                       int num_predicates, double smoothing) {
  PredicatePrior prior{num_object_classes, num_predicates,
                       std::vector<double>(std::size_t(num_object_classes) * num_object_classes * num_predicates, 0.0)};
  std::vector<double> global(std::size_t(num_predicates), 0.0);
  for (const SceneSample& s : train)
    for (const RelationTriplet& t : s.relations) {
      const int sc = s.entities[std::size_t(s.entity_index(t.subject_id))].class_id;
      const int oc = s.entities[std::size_t(s.entity_index(t.object_id))].class_id;
      prior.at(sc, oc, t.predicate_id) += 1.0;
      global[std::size_t(t.predicate_id)] += 1.0;
    }
  auto normalize = [&](std::span<double> row) {
    double total = 0.0;
    for (double& v : row) total += (v += smoothing);
    if (total <= 0.0) {
      for (double& v : row) v = 1.0 / double(row.size());
      return;
    }
    for (double& v : row) v /= total;
  };
  normalize(global);
  for (int sc = 0; sc < num_object_classes; ++sc)
    for (int oc = 0; oc < num_object_classes; ++oc) {
      std::span<double> row(prior.table.data() + (std::size_t(sc) * num_object_classes + oc) * num_predicates,
                            std::size_t(num_predicates));
      const bool observed = std::any_of(row.begin(), row.end(), [](double v) { return v > 0.0; });
      if (observed)
        normalize(row);
      else
        std::copy(global.begin(), global.end(), row.begin());
    }
  return prior;
}

std::string PartitionSpec::bucket_of(int predicate_id) const {
  auto in = [&](const std::vector<int>& v) { return std::find(v.begin(), v.end(), predicate_id) != v.end(); };
  if (in(head)) return "head";
  if (in(body)) return "body";
  if (in(tail)) return "tail";
  return "";
}

PartitionSpec compute_partition(std::span<const SceneSample> train, int num_predicates, double head_frac,
                                double body_frac) {
  if (!(head_frac > 0.0 && head_frac < 1.0 && body_frac > 0.0 && body_frac < 1.0 && head_frac + body_frac < 1.0))
    throw std::invalid_argument("partition fractions must lie in (0,1) and sum below 1");
  const std::vector<std::int64_t> counts = predicate_counts(train, num_predicates);
  std::vector<int> ids;
  for (int k = 1; k < num_predicates; ++k) ids.push_back(k);
  std::stable_sort(ids.begin(), ids.end(),
                   [&](int a, int b) { return counts[std::size_t(a)] > counts[std::size_t(b)]; });
  const int n = static_cast<int>(ids.size());
  // The epsilon absorbs representation error such as 0.2 * 15 = 3.0000000000000004.
  const int n_head = std::min(n, static_cast<int>(std::ceil(head_frac * n - 1e-9)));
  const int n_body = std::min(n - n_head, static_cast<int>(std::ceil(body_frac * n - 1e-9)));
  PartitionSpec p;
  p.head.assign(ids.begin(), ids.begin() + n_head);
  p.body.assign(ids.begin() + n_head, ids.begin() + n_head + n_body);
  p.tail.assign(ids.begin() + n_head + n_body, ids.end());
  return p;
}

nlohmann::json to_json(const PredicatePrior& prior) {
  return {{"num_object_classes", prior.num_object_classes},
          {"num_predicates", prior.num_predicates},
          {"table", prior.table}};
}

PredicatePrior predicate_prior_from_json(const nlohmann::json& j) {
  PredicatePrior p{j.at("num_object_classes").get<int>(), j.at("num_predicates").get<int>(),
                   j.at("table").get<std::vector<double>>()};
  if (p.table.size() != std::size_t(p.num_object_classes) * p.num_object_classes * p.num_predicates)
    throw DataError("predicate prior table has the wrong size");
  return p;
}

nlohmann::json to_json(const PartitionSpec& p) { return {{"head", p.head}, {"body", p.body}, {"tail", p.tail}}; }

PartitionSpec partition_from_json(const nlohmann::json& j) {
  return {j.at("head").get<std::vector<int>>(), j.at("body").get<std::vector<int>>(),
          j.at("tail").get<std::vector<int>>()};
}

CorpusBundle make_bundle(const CorpusSpec& spec) {
  CorpusBundle b{spec, generate_corpus(spec), {}, {}};
  b.prior = compute_predicate_prior(b.corpus.train, spec.num_object_classes, spec.num_predicates);
  b.partition = compute_partition(b.corpus.train, spec.num_predicates);
  return b;
}

void write_corpus(const std::filesystem::path& dir, const CorpusBundle& b) {
  std::filesystem::create_directories(dir);
  write_jsonl(dir / "train.jsonl", b.corpus.train);
  write_jsonl(dir / "val.jsonl", b.corpus.val);
  write_jsonl(dir / "test.jsonl", b.corpus.test);
  const nlohmann::json meta{{"corpus_spec", to_json(b.spec)},
                            {"corpus_spec_hash", b.spec.hash()},
                            {"predicate_prior", to_json(b.prior)},
                            {"partition", to_json(b.partition)}};
  std::ofstream out(dir / "meta.json");
  if (!out) throw DataError((dir / "meta.json").string() + ": cannot open for writing");
  out << meta.dump(1) << '\n';
}

CorpusBundle load_corpus(const std::filesystem::path& dir) {
  const auto meta_path = dir / "meta.json";
  std::ifstream in(meta_path);
  if (!in) throw DataError(meta_path.string() + ": cannot open");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(meta_path.string() + ": " + e.what());
  }
  CorpusBundle b;
  b.spec = corpus_spec_from_json(meta.at("corpus_spec"));
  b.prior = predicate_prior_from_json(meta.at("predicate_prior"));
  b.partition = partition_from_json(meta.at("partition"));
  const int c_obj = b.spec.num_object_classes;
  const int c_pred = b.spec.num_predicates;
  b.corpus.train = read_jsonl(dir / "train.jsonl", c_obj, c_pred);
  b.corpus.val = read_jsonl(dir / "val.jsonl", c_obj, c_pred);
  b.corpus.test = read_jsonl(dir / "test.jsonl", c_obj, c_pred);
  return b;
}

}  // namespace relalign
