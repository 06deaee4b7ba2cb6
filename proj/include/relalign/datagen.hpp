#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "relalign/types.hpp"

namespace relalign {

/// Parameters of the synthetic long-tail scene-graph corpus.
///
/// Each entity plants its class signature on every cell of its box; each
/// relation plants its predicate signature on the union of its two boxes and
/// a role signature on the subject box, so predicates are learnable and
/// directional. All signatures are unit vectors scaled by the *_signal fields.
struct CorpusSpec {
  int n_train = 2000;
  int n_val = 400;
  int n_test = 400;
  int num_object_classes = 10;
  int num_predicates = 16;  // includes background
  int height = 16;
  int width = 16;
  int channels = 32;
  int max_entities = 6;
  double zipf_s = 1.0;
  std::uint64_t seed = 0;

  int min_box_cells = 2;
  int max_box_cells = 5;
  double entity_signal = 3.0;
  double relation_signal = 1.0;
  double role_signal = 1.0;
  double noise = 1.0;
  double class_affinity = 0.7;  // chance a fresh endpoint takes a predicate-preferred class

  void validate() const;  // throws std::invalid_argument
  std::string hash() const;

  friend bool operator==(const CorpusSpec&, const CorpusSpec&) = default;
};

nlohmann::json to_json(const CorpusSpec& spec);
CorpusSpec corpus_spec_from_json(const nlohmann::json& j);

struct Corpus {
  std::vector<SceneSample> train;
  std::vector<SceneSample> val;
  std::vector<SceneSample> test;
};

/// Class and predicate signatures shared by every sample of a corpus.
struct PlantedSignals {
  Matrix class_signature;      // C_obj x channels
  Matrix predicate_signature;  // C_pred x channels (row 0 unused)
  Matrix role_signature;       // C_pred x channels (row 0 unused)
  std::vector<std::vector<int>> preferred_subjects;  // per predicate
  std::vector<std::vector<int>> preferred_objects;
};

PlantedSignals planted_signals(const CorpusSpec& spec);

/// Normalized Zipf weights over predicates 1..C_pred-1 (index 0 holds 0).
std::vector<double> zipf_weights(int num_predicates, double exponent);

/// One sample; its randomness depends only on (spec.seed, sample_id).
SceneSample generate_sample(const CorpusSpec& spec, const PlantedSignals& signals, std::int64_t sample_id);

/// Train ids are [0, n_train), val ids follow, then test ids.
Corpus generate_corpus(const CorpusSpec& spec);

/// C_obj x C_obj x C_pred table; every (subject, object) row is a distribution.
struct PredicatePrior {
  int num_object_classes = 0;
  int num_predicates = 0;
  std::vector<double> table;

  std::span<const double> row(int subject_class, int object_class) const {
    return {table.data() + (std::size_t(subject_class) * num_object_classes + object_class) * num_predicates,
            std::size_t(num_predicates)};
  }
  double& at(int s, int o, int k) {
    return table[(std::size_t(s) * num_object_classes + o) * num_predicates + k];
  }
  double at(int s, int o, int k) const {
    return table[(std::size_t(s) * num_object_classes + o) * num_predicates + k];
  }

  friend bool operator==(const PredicatePrior&, const PredicatePrior&) = default;
};

inline constexpr double kPriorSmoothing = 1e-3;

/// Empirical predicate distribution per (subject class, object class) with
/// additive smoothing; unobserved pairs fall back to the global marginal.
PredicatePrior compute_predicate_prior(std::span<const SceneSample> train, int num_object_classes,
                                       int num_predicates, double smoothing = kPriorSmoothing);

struct PartitionSpec {
  std::vector<int> head;
  std::vector<int> body;
  std::vector<int> tail;

  /// "head", "body", "tail", or "" for ids outside the partition.
  std::string bucket_of(int predicate_id) const;

  friend bool operator==(const PartitionSpec&, const PartitionSpec&) = default;
};

/// Sorts non-background predicates by descending train frequency (ties by
/// ascending id) and cuts ceil(head_frac*n) head and ceil(body_frac*n) body ids.
PartitionSpec compute_partition(std::span<const SceneSample> train, int num_predicates, double head_frac = 0.2,
                                double body_frac = 0.4);

/// Count of ground-truth triplets per predicate id.
std::vector<std::int64_t> predicate_counts(std::span<const SceneSample> samples, int num_predicates);

nlohmann::json to_json(const PredicatePrior& prior);
PredicatePrior predicate_prior_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PartitionSpec& partition);
PartitionSpec partition_from_json(const nlohmann::json& j);

/// Corpus plus its derived tables, as stored on disk.
struct CorpusBundle {
  CorpusSpec spec;
  Corpus corpus;
  PredicatePrior prior;
  PartitionSpec partition;
};

CorpusBundle make_bundle(const CorpusSpec& spec);

/// Writes train.jsonl, val.jsonl, test.jsonl and meta.json into `dir`.
void write_corpus(const std::filesystem::path& dir, const CorpusBundle& bundle);
CorpusBundle load_corpus(const std::filesystem::path& dir);

}  // namespace relalign
