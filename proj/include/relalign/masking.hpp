#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "relalign/rng.hpp"
#include "relalign/types.hpp"

namespace relalign {

/// Value written into masked attention logits before the softmax.
inline constexpr double kMaskedLogit = -std::numeric_limits<double>::infinity();

struct MaskConfig {
  double p = 0.1;
  std::uint64_t seed = 0;
  bool rescale = false;  // must stay false: masked inputs are never rescaled

  void validate() const;  // throws std::invalid_argument

  friend bool operator==(const MaskConfig&, const MaskConfig&) = default;
};

/// One Bernoulli(p) draw per row, in row order. true = row is zeroed.
std::vector<bool> draw_row_mask(Eigen::Index rows, double p, Rng& rng);

/// Row-wise masking: each relation vector is independently replaced by the
/// zero vector with probability p and otherwise copied verbatim.
RelationFeatureBatch mask_features(const RelationFeatureBatch& batch, const MaskConfig& cfg, Rng& rng);

/// Per-entry attention mask with 1.0 at masked positions. Draws are made in
/// row-major order, one per entry. A row whose every entry was drawn masked
/// is cleared to all zeros, so each row keeps at least one finite logit.
Matrix draw_attention_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng);

/// Applies draw_attention_mask to a score matrix, writing kMaskedLogit.
Matrix mask_attention_logits(const Matrix& scores, const MaskConfig& cfg, Rng& rng);

}  // namespace relalign
