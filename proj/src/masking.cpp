#include "relalign/masking.hpp"

#include <stdexcept>

namespace relalign {

void MaskConfig::validate() const {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("MaskConfig.p must lie in [0,1]");
  if (rescale) throw std::invalid_argument("MaskConfig.rescale is not supported; masking never rescales");
}

std::vector<bool> draw_row_mask(Eigen::Index rows, double p, Rng& rng) {
  std::vector<bool> masked(static_cast<std::size_t>(rows));
  for (Eigen::Index i = 0; i < rows; ++i) masked[std::size_t(i)] = rng.bernoulli(p);
  return masked;
}

RelationFeatureBatch mask_features(const RelationFeatureBatch& batch, const MaskConfig& cfg, Rng& rng) {
  cfg.validate();
  RelationFeatureBatch out = batch;
  const std::vector<bool> masked = draw_row_mask(batch.features.rows(), cfg.p, rng);
  for (Eigen::Index i = 0; i < out.features.rows(); ++i)
    if (masked[std::size_t(i)]) out.features.row(i).setZero();
  return out;
}

Matrix draw_attention_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
  Matrix mask(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    bool all = true;
    for (Eigen::Index j = 0; j < cols; ++j) {
      const bool m = rng.bernoulli(p);
      mask(i, j) = m ? 1.0 : 0.0;
      all = all && m;
    }
    if (all) mask.row(i).setZero();
  }
  return mask;
}

Matrix mask_attention_logits(const Matrix& scores, const MaskConfig& cfg, Rng& rng) {
  cfg.validate();
  const Matrix mask = draw_attention_mask(scores.rows(), scores.cols(), cfg.p, rng);
  return (mask.array() != 0.0).select(Matrix::Constant(scores.rows(), scores.cols(), kMaskedLogit), scores);
}

}  // namespace relalign
