#pragma once

#include <vector>

#include "relalign/detector.hpp"
#include "relalign/model.hpp"
#include "relalign/nn.hpp"

namespace relalign {

struct MotifsConfig {
  int channels = 32;
  int num_object_classes = 10;
  int num_predicates = 16;

  int hidden = 64;          // LSTM hidden size per direction
  int label_embedding = 32;
  int pair_width = 64;      // per-role width of the post-context projection
  int relation_width = 64;  // width of relation features and of the post_cat output
  int mlp_hidden = 64;      // hidden width of the mirrored 3-layer head
  double dropout = 0.1;

  int stub_epochs = 150;
  double stub_lr = 0.5;
  int stub_max_samples = 400;

  static MotifsConfig for_corpus(const CorpusSpec& spec);
  void validate() const;
  nlohmann::json to_json() const;
  static MotifsConfig from_json(const nlohmann::json& j);
};

/// Geometry appended to region features: x_min, y_min, x_max, y_max, area.
inline constexpr int kBoxGeometryWidth = 5;

/// Two-stage relation model with bidirectional LSTM contexts (original branch).
struct MiniMotifs {
  MotifsConfig config;
  DetectorStub stub;
  nn::BiLstm object_context;
  nn::Linear object_classifier;  // 2h -> C_obj
  ad::Tensor label_embedding;    // C_obj x e
  nn::Linear relation_feature;   // union mean + two geometries -> relation_width
  nn::BiLstm edge_context;
  nn::Linear post_emb;      // 2h -> 2 * pair_width (subject half, object half)
  nn::Linear post_cat;      // 2 * pair_width -> relation_width
  nn::Linear rel_compress;  // relation_width -> C_pred
  Matrix log_prior;         // (C_obj * C_obj) x C_pred, row s * C_obj + o

  MiniMotifs() = default;
  MiniMotifs(const MotifsConfig& config, Rng& rng);

  void set_prior(const PredicatePrior& prior);
  int edge_input_width() const;
};

struct MotifsMirror {
  nn::BiLstm edge_context;  // same storage as the original's
  nn::Linear post_emb;
  HeadMode head_mode = HeadMode::Untied;
  nn::Mlp untied_head;      // (2 * pair_width + relation_width) -> mlp -> mlp -> C_pred
  nn::Linear post_cat;      // tied mode: the original's layers
  nn::Linear rel_compress;
};

using MotifsPair = PredictorPair<MiniMotifs, MotifsMirror>;

MotifsPair make_motifs_pair(const MotifsConfig& config, const AlignConfig& align, const MaskConfig& mask,
                            std::uint64_t seed);

/// Entities seen by the relation model in one mode.
struct MotifsEntities {
  std::vector<BoundingBox> boxes;
  std::vector<int> source_index;    // position in sample.entities (or proposal index in sgdet)
  std::vector<int> gt_labels;       // -1 where no ground-truth entity is matched
  std::vector<int> gt_entity;       // matched ground-truth entity index or -1
  std::vector<double> stub_scores;  // sgdet only
};

/// Entities in x-center order (ties by source index).
MotifsEntities motifs_entities(const MiniMotifs& model, const SceneSample& sample, EvalMode mode);

struct MotifsForward {
  MotifsEntities entities;
  std::vector<std::pair<int, int>> pairs;  // ordered (subject, object) positions into entities
  ad::Tensor object_logits;                // N x C_obj
  std::vector<int> object_labels;          // labels fed to the edge context
  ad::Tensor edge_input;                   // N x edge_input_width
  ad::Tensor relation_features;            // pairs x relation_width: the matrix R
  ad::Tensor pair_representation;          // pairs x 2 * pair_width, before any head
  ad::Tensor relation_logits;              // pairs x C_pred, prior included
  ad::Tensor relation_probs;
};

/// Original forward. Throws ConfigurationError for sgdet with an untrained stub.
MotifsForward motifs_forward_original(const MiniMotifs& model, const SceneSample& sample, EvalMode mode,
                                      Rng* dropout_rng);

struct MotifsMirrorOutput {
  ad::Tensor edge_input;           // masked
  ad::Tensor relation_features;    // masked
  ad::Tensor pair_representation;  // before the head
  ad::Tensor relation_probs;
};

/// Mirrored forward on gradient-isolated, row-masked copies of the edge
/// context input and relation features. No dropout and no prior.
MotifsMirrorOutput motifs_forward_mirrored(MotifsPair& pair, const MotifsForward& original, Rng& rng);
MotifsMirrorOutput motifs_forward_mirrored(MotifsPair& pair, const SceneSample& sample, EvalMode mode, Rng& rng);

class MotifsModel final : public SceneGraphModel {
 public:
  MotifsModel(const MotifsConfig& config, const AlignConfig& align, const MaskConfig& mask, std::uint64_t seed);

  ModelFamily family() const override { return ModelFamily::MiniMotifs; }
  bool supports(EvalMode) const override { return true; }
  int num_predicates() const override { return pair_.original.config.num_predicates; }
  ad::ParameterList parameters() const override;
  ad::ParameterList parameter_group(ParameterGroup group) const override;
  const AlignConfig& align_config() const override { return pair_.align_cfg; }
  const MaskConfig& mask_config() const override { return pair_.mask_cfg; }
  void set_align_config(const AlignConfig& cfg) override { pair_.align_cfg = cfg; }
  LossTerms losses(const SceneSample& sample, EvalMode mode, StepRandomness& rng) override;
  std::vector<ScoredPair> predict_pairs(const SceneSample& sample, EvalMode mode) const override;
  std::uint64_t mirrored_forward_calls() const override { return pair_.mirrored_calls; }
  nlohmann::json config_json() const override;
  void prepare(const CorpusBundle& bundle, EvalMode mode) override;
  nlohmann::json state_json() const override;
  void load_state_json(const nlohmann::json& state) override;

  MotifsPair& pair() { return pair_; }
  const MotifsPair& pair() const { return pair_; }
  void set_prior(const PredicatePrior& prior) { pair_.original.set_prior(prior); }
  void mark_stub_pretrained(bool value) { pair_.original.stub.pretrained = value; }

  /// Pair labels for the relation loss: gt predicate, else background.
  std::vector<int> pair_labels(const MotifsForward& forward, const SceneSample& sample) const;

 private:
  MotifsPair pair_;
  std::uint64_t seed_;
};

}  // namespace relalign
