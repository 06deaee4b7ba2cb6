#pragma once

#include <span>
#include <string>
#include <vector>

#include "relalign/autodiff.hpp"
#include "relalign/nn.hpp"
#include "relalign/types.hpp"

namespace relalign {

/// What the mirrored branch is trained against.
enum class TargetMode {
  SelfSupervised,  // KL to the gradient-isolated original distributions
  Supervised,      // cross-entropy to ground truth
  Off,             // mirrored branch not run
};

/// Whether the mirrored branch owns its projection head.
enum class HeadMode { Untied, Tied };

std::string to_string(TargetMode mode);
std::string to_string(HeadMode mode);
TargetMode parse_target_mode(const std::string& text);  // "ssa" | "sa" | "off" (long names accepted)
HeadMode parse_head_mode(const std::string& text);      // "untied" | "tied"

struct AlignConfig {
  double lambda_weight = 10.0;
  double p = 0.1;
  TargetMode target_mode = TargetMode::SelfSupervised;
  HeadMode head_mode = HeadMode::Untied;

  void validate() const;

  friend bool operator==(const AlignConfig&, const AlignConfig&) = default;
};

/// Floor applied to mirrored probabilities inside log().
inline constexpr double kProbabilityFloor = 1e-12;

/// Gradient-isolated alignment target. Holds plain values only, so nothing
/// computed from it can reach the parameters that produced it.
class AlignTarget {
 public:
  AlignTarget() = default;
  explicit AlignTarget(std::vector<PredicateDistribution> distributions);
  /// Snapshot of a probability tensor (rows are distributions).
  static AlignTarget from_probabilities(const ad::Tensor& probs);

  const std::vector<PredicateDistribution>& distributions() const { return distributions_; }
  std::size_t size() const { return distributions_.size(); }
  Matrix as_matrix() const;
  bool gradient_isolated() const { return true; }

 private:
  std::vector<PredicateDistribution> distributions_;
};

/// Mean over relations of KL(target_i || masked_i), 0 log 0 := 0, masked
/// probabilities floored at kProbabilityFloor. Throws std::invalid_argument
/// on length or class-count mismatch.
double kl_alignment_loss(const AlignTarget& target, std::span<const PredicateDistribution> masked);

/// Differentiable variant; gradient flows only into `masked_probs`.
ad::Tensor kl_alignment_loss(const AlignTarget& target, const ad::Tensor& masked_probs);

/// l_original + lambda * l_align; returns l_original unchanged when the target mode is Off.
double combine_losses(double l_original, double l_align, const AlignConfig& cfg);
ad::Tensor combine_losses(const ad::Tensor& l_original, const ad::Tensor& l_align, const AlignConfig& cfg);

/// Mean cross-entropy of masked distributions against one-hot labels.
double supervised_alignment_loss(std::span<const int> labels, std::span<const PredicateDistribution> masked);
ad::Tensor supervised_alignment_loss(std::span<const int> labels, const ad::Tensor& masked_probs,
                                     std::span<const double> weights = {});

/// Projection head of the mirrored branch. Untied: fresh parameters of the
/// original's shape. Tied: the original head itself (same storage).
nn::Linear build_untied_head(const nn::Linear& original, HeadMode mode, Rng& rng);

}  // namespace relalign
