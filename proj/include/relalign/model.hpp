#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "relalign/align.hpp"
#include "relalign/autodiff.hpp"
#include "relalign/datagen.hpp"
#include "relalign/masking.hpp"
#include "relalign/metrics.hpp"

namespace relalign {

enum class ModelFamily { MiniSgtr, MiniMotifs };

std::string to_string(ModelFamily family);
ModelFamily parse_model_family(const std::string& text);  // "mini-sgtr" | "mini_sgtr" | "mini-motifs" | ...

/// Raised when a model family cannot run in the requested evaluation mode.
class UnsupportedModeError : public std::invalid_argument {
 public:
  UnsupportedModeError(ModelFamily family, EvalMode mode)
      : std::invalid_argument(to_string(family) + " does not support " + to_string(mode)) {}
};

/// Invalid model setup, e.g. SGDet with a detector that was never pre-trained.
class ConfigurationError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Original and mirrored relation predictors. Every parameter of the
/// mirrored branch is the same storage as the original's except the untied
/// head(s). The mirrored branch never runs dropout.
template <class Original, class Mirror>
struct PredictorPair {
  Original original;
  Mirror mirrored;
  MaskConfig mask_cfg;
  AlignConfig align_cfg;
  std::uint64_t mirrored_calls = 0;  // incremented by every mirrored forward
};

/// Where a parameter sits relative to the alignment branch.
enum class ParameterGroup {
  Upstream,      // feature extractor / detector side: never receives alignment gradient
  Shared,        // relation predictor weights tied between both branches
  OriginalHead,  // original projection head(s)
  UntiedHead,    // mirrored-only projection head(s); empty when tied
  Frozen,        // pre-trained and excluded from optimization
};

/// Randomness consumed by one training forward. Dropout and masking use
/// separate streams so that disabling alignment leaves the dropout stream
/// untouched.
struct StepRandomness {
  Rng dropout;
  Rng mask;
};

/// Per-sample loss graph pieces.
struct LossTerms {
  ad::Tensor original;  // L_original
  ad::Tensor align;     // raw L_align (undefined when alignment is off)
};

/// A trainable scene-graph model family wrapping a PredictorPair.
class SceneGraphModel {
 public:
  virtual ~SceneGraphModel() = default;

  virtual ModelFamily family() const = 0;
  virtual bool supports(EvalMode mode) const = 0;
  virtual int num_predicates() const = 0;

  /// Every parameter, in a stable order with unique names.
  virtual ad::ParameterList parameters() const = 0;
  virtual ad::ParameterList parameter_group(ParameterGroup group) const = 0;
  /// Parameters the optimizer updates (everything except Frozen).
  ad::ParameterList trainable_parameters() const;

  virtual const AlignConfig& align_config() const = 0;
  virtual const MaskConfig& mask_config() const = 0;
  virtual void set_align_config(const AlignConfig& cfg) = 0;

  /// Builds the loss graph for one sample, original plus alignment.
  virtual LossTerms losses(const SceneSample& sample, EvalMode mode, StepRandomness& rng) = 0;

  /// Inference with the original branch only.
  virtual std::vector<ScoredPair> predict_pairs(const SceneSample& sample, EvalMode mode) const = 0;

  virtual std::uint64_t mirrored_forward_calls() const = 0;

  /// Architecture and setup needed to rebuild the model (no parameters).
  virtual nlohmann::json config_json() const = 0;

  /// Non-parameter state a checkpoint must carry (e.g. a prior table).
  virtual nlohmann::json state_json() const { return nlohmann::json::object(); }
  virtual void load_state_json(const nlohmann::json& /*state*/) {}

  /// Hook for families with a two-stage detector; no-op by default.
  virtual void prepare(const CorpusBundle& /*bundle*/, EvalMode /*mode*/) {}
};

/// Name -> value snapshot of every parameter.
struct ParameterSnapshot {
  std::vector<std::pair<std::string, Matrix>> values;

  static ParameterSnapshot of(const SceneGraphModel& model);
  void restore(SceneGraphModel& model) const;
  const Matrix& at(const std::string& name) const;
};

std::vector<PredictedTriplet> predict_triplets(const SceneGraphModel& model, const SceneSample& sample, EvalMode mode,
                                               bool graph_constraint = true);

/// Evaluates the original branch of `model` on `split`. Throws
/// UnsupportedModeError if the family does not support `mode`.
EvalReport evaluate(const SceneGraphModel& model, std::span<const SceneSample> split, EvalMode mode,
                    std::span<const int> ks, const PartitionSpec& partition, bool graph_constraint = true);

}  // namespace relalign
