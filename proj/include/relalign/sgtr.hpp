#pragma once

#include <vector>

#include "relalign/detector.hpp"
#include "relalign/model.hpp"
#include "relalign/nn.hpp"

namespace relalign {

/// Dimensions of the one-stage transformer model. Defaults are desk scale.
struct SgtrConfig {
  int grid_height = 16;
  int grid_width = 16;
  int channels = 32;
  int patch = 2;  // stride-`patch` patch embedding (a strided convolution)
  int num_object_classes = 10;
  int num_predicates = 16;

  int d_model = 64;
  int heads = 4;
  int ff_hidden = 128;
  int encoder_layers = 1;
  int entity_layers = 2;
  int decoder_layers = 3;
  int num_entity_queries = 10;
  int num_predicate_queries = 20;
  double dropout = 0.1;

  double no_object_weight = 0.1;   // class weight of unmatched queries
  double box_weight = 2.0;         // L1 box loss weight
  int stub_epochs = 150;           // detector pre-training
  double stub_lr = 0.5;
  int stub_max_samples = 400;
  bool align_all_layers = false;   // diagnostic: align every decoder layer instead of the last

  static SgtrConfig for_corpus(const CorpusSpec& spec);
  void validate() const;
  nlohmann::json to_json() const;
  static SgtrConfig from_json(const nlohmann::json& j);
};

struct TransformerEncoderLayer {
  nn::MultiHeadAttention attention;
  nn::LayerNorm norm1;
  nn::FeedForward feed_forward;
  nn::LayerNorm norm2;

  TransformerEncoderLayer() = default;
  TransformerEncoderLayer(int width, int heads, int hidden, Rng& rng);
  ad::Tensor operator()(const ad::Tensor& x, const nn::Dropout& dropout) const;
  void collect(ad::ParameterList& out, const std::string& prefix) const;
};

/// Self-attention, cross-attention over one memory, feed-forward.
struct TransformerDecoderLayer {
  nn::MultiHeadAttention self_attention;
  nn::LayerNorm norm1;
  nn::MultiHeadAttention cross_attention;
  nn::LayerNorm norm2;
  nn::FeedForward feed_forward;
  nn::LayerNorm norm3;

  TransformerDecoderLayer() = default;
  TransformerDecoderLayer(int width, int heads, int hidden, Rng& rng);
  ad::Tensor operator()(const ad::Tensor& x, const ad::Tensor& memory, const nn::Dropout& dropout) const;
  void collect(ad::ParameterList& out, const std::string& prefix) const;
};

/// Self-attention, then cross-attention over image features, then over
/// entity features, then feed-forward.
struct PredicateDecoderLayer {
  nn::MultiHeadAttention self_attention;
  nn::LayerNorm norm1;
  nn::MultiHeadAttention image_attention;
  nn::LayerNorm norm2;
  nn::MultiHeadAttention entity_attention;
  nn::LayerNorm norm3;
  nn::FeedForward feed_forward;
  nn::LayerNorm norm4;

  PredicateDecoderLayer() = default;
  PredicateDecoderLayer(int width, int heads, int hidden, Rng& rng);
  /// `masking` applies to the two cross-attention blocks only; each block
  /// draws its own mask.
  ad::Tensor operator()(const ad::Tensor& x, const ad::Tensor& image, const ad::Tensor& entities,
                        const nn::Dropout& dropout, const nn::AttentionMasking& masking) const;
  void collect(ad::ParameterList& out, const std::string& prefix) const;
};

/// Structural predicate decoder: learned predicate queries refined by a stack
/// of PredicateDecoderLayer. Returns the query states after every layer.
struct PredicateDecoder {
  ad::Tensor queries;
  std::vector<PredicateDecoderLayer> layers;

  std::vector<ad::Tensor> operator()(const ad::Tensor& image, const ad::Tensor& entities, const nn::Dropout& dropout,
                                     const nn::AttentionMasking& masking = {}) const;
  void collect(ad::ParameterList& out, const std::string& prefix) const;
};

/// Label heads on predicate-query states.
struct SgtrLabelHeads {
  nn::Linear relation;  // -> C_pred
  nn::Linear subject;   // -> C_obj + 1 (last = no object)
  nn::Linear object;

  void collect(ad::ParameterList& out, const std::string& prefix) const;
};

struct SgtrLayerPrediction {
  ad::Tensor query_states;     // N_q x d, before any head
  ad::Tensor relation_logits;  // N_q x C_pred
  ad::Tensor subject_logits;   // N_q x (C_obj + 1)
  ad::Tensor object_logits;
  ad::Tensor boxes;  // N_q x 8: subject then object (cx, cy, w, h) in (0,1)
};

struct SgtrForward {
  std::vector<DetectorStub::Proposal> proposals;  // at most N_e regions seeding the entity queries
  ad::Tensor image_features;   // relation-refined tokens: predicate decoder input
  ad::Tensor entity_features;  // decoded entity states: predicate decoder input
  ad::Tensor entity_logits;    // N_e x (C_obj + 1)
  ad::Tensor entity_boxes;     // N_e x 4 (cx, cy, w, h)
  std::vector<SgtrLayerPrediction> layers;
};

/// One-stage transformer scene-graph model (original branch).
struct MiniSgtr {
  SgtrConfig config;
  // feature extractor
  nn::Linear patch_embed;
  ad::Tensor position;  // fixed 2-D sine encoding, not trained
  std::vector<TransformerEncoderLayer> encoder;
  // entity node generator
  DetectorStub detector;      // pre-trained, frozen region proposer
  ad::Tensor entity_queries;  // added, by rank, to the pooled state of each proposal
  std::vector<TransformerDecoderLayer> entity_decoder;
  nn::Linear entity_class;
  nn::Linear entity_box;
  // predicate node generator
  nn::Linear relation_encoder;
  PredicateDecoder predicate_decoder;
  SgtrLabelHeads heads;
  nn::Linear box_head;  // -> 8

  MiniSgtr() = default;
  MiniSgtr(const SgtrConfig& config, Rng& rng);

  /// Flattened non-overlapping patches: (H/p * W/p) x (p*p*C).
  Matrix patchify(const FeatureGrid& grid) const;

  void collect_upstream(ad::ParameterList& out) const;
  void collect_shared(ad::ParameterList& out) const;
  void collect_heads(ad::ParameterList& out) const;
};

/// Mirrored predicate decoder: the original decoder (same storage) with
/// its own label heads.
struct SgtrMirror {
  PredicateDecoder decoder;
  SgtrLabelHeads heads;
  HeadMode head_mode = HeadMode::Untied;
};

using SgtrPair = PredictorPair<MiniSgtr, SgtrMirror>;

SgtrPair make_sgtr_pair(const SgtrConfig& config, const AlignConfig& align, const MaskConfig& mask,
                        std::uint64_t seed);

/// Full original forward with predictions at every decoder layer. With
/// dropout off (`dropout_rng` null) the result does not depend on any RNG.
SgtrForward sgtr_forward_original(const MiniSgtr& model, const SceneSample& sample, Rng* dropout_rng);

struct SgtrMirrorOutput {
  std::vector<ad::Tensor> query_states;  // per layer, before any head
  ad::Tensor relation_probs;             // last layer, mirrored heads
  ad::Tensor subject_probs;
  ad::Tensor object_probs;
};

/// Mirrored forward on gradient-isolated inputs. Dropout is off; each
/// cross-attention block of each layer draws an independent mask from `rng`.
SgtrMirrorOutput sgtr_forward_mirrored(SgtrPair& pair, const ad::Tensor& image_features,
                                       const ad::Tensor& entity_features, Rng& rng);
/// Convenience overload that computes the decoder inputs from `sample`.
SgtrMirrorOutput sgtr_forward_mirrored(SgtrPair& pair, const SceneSample& sample, Rng& rng);

/// Mirrored distributions for one decoder layer (diagnostic for all-layer alignment).
SgtrMirrorOutput sgtr_mirror_heads_at(const SgtrPair& pair, const SgtrMirrorOutput& out, std::size_t layer);

struct SgtrAlignTarget {
  AlignTarget relation;
  AlignTarget subject;
  AlignTarget object;
};

/// Dropout-free original decoder pass on the given inputs, last layer only,
/// captured as plain values.
SgtrAlignTarget sgtr_alignment_target(const MiniSgtr& model, const ad::Tensor& image_features,
                                      const ad::Tensor& entity_features);
SgtrAlignTarget sgtr_alignment_target(const MiniSgtr& model, const SceneSample& sample);

/// Detector proposals ordered by decreasing area (ties keep detection
/// order), at most `count`.
std::vector<DetectorStub::Proposal> entity_proposals(const DetectorStub& detector, const FeatureGrid& grid,
                                                     int count);

/// Greedy assignment of rows to columns by ascending cost. Returns, per row,
/// the assigned column or -1.
std::vector<int> greedy_assignment(const Matrix& cost);

class SgtrModel final : public SceneGraphModel {
 public:
  SgtrModel(const SgtrConfig& config, const AlignConfig& align, const MaskConfig& mask, std::uint64_t seed);

  ModelFamily family() const override { return ModelFamily::MiniSgtr; }
  bool supports(EvalMode mode) const override { return mode == EvalMode::SgDet; }
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
  nlohmann::json state_json() const override;
  void load_state_json(const nlohmann::json& state) override;
  /// Pre-trains the entity proposer on the training split unless already done.
  void prepare(const CorpusBundle& bundle, EvalMode mode) override;

  SgtrPair& pair() { return pair_; }
  const SgtrPair& pair() const { return pair_; }

  /// Supervised set-prediction loss of one layer's predictions.
  ad::Tensor layer_loss(const SgtrLayerPrediction& layer, const SceneSample& sample,
                        std::vector<int>* assignment = nullptr) const;
  ad::Tensor entity_loss(const SgtrForward& forward, const SceneSample& sample) const;

 private:
  SgtrPair pair_;
  std::uint64_t seed_;
};

}  // namespace relalign
