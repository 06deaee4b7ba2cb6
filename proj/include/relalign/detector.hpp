#pragma once

#include <span>
#include <vector>

#include "relalign/nn.hpp"
#include "relalign/types.hpp"

namespace relalign {

/// Per-cell linear classifier over the feature grid (C_obj classes plus
/// background). Proposals are 4-connected components of equal arg-max class.
struct DetectorStub {
  nn::Linear classifier;  // channels -> C_obj + 1
  bool pretrained = false;

  struct Proposal {
    BoundingBox box;
    std::vector<double> class_probs;  // length C_obj
  };

  Matrix cell_logits(const FeatureGrid& grid) const;  // (H*W) x (C_obj+1)
  std::vector<Proposal> propose(const FeatureGrid& grid, int min_cells = 2) const;
  /// Class distribution over the cells covered by `box`.
  std::vector<double> classify(const FeatureGrid& grid, const BoundingBox& box) const;
};

/// Fits the stub with full-batch gradient descent on per-cell labels and
/// marks it pretrained. Returns the final training cross-entropy.
double pretrain_detector_stub(DetectorStub& stub, std::span<const SceneSample> train, int num_object_classes,
                              int epochs, double lr, int max_samples);

}  // namespace relalign
