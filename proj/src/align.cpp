#include "relalign/align.hpp"

#include <cmath>
#include <stdexcept>

namespace relalign {

std::string to_string(TargetMode mode) {
  switch (mode) {
    case TargetMode::SelfSupervised: return "ssa";
    case TargetMode::Supervised: return "sa";
    case TargetMode::Off: return "off";
  }
  return "?";
}

std::string to_string(HeadMode mode) { return mode == HeadMode::Untied ? "untied" : "tied"; }

TargetMode parse_target_mode(const std::string& text) {
  if (text == "ssa" || text == "self_supervised") return TargetMode::SelfSupervised;
  if (text == "sa" || text == "supervised") return TargetMode::Supervised;
  if (text == "off") return TargetMode::Off;
  throw std::invalid_argument("unknown alignment mode '" + text + "' (expected ssa, sa or off)");
}

HeadMode parse_head_mode(const std::string& text) {
  if (text == "untied" || text == "uph") return HeadMode::Untied;
  if (text == "tied" || text == "ph") return HeadMode::Tied;
  throw std::invalid_argument("unknown head mode '" + text + "' (expected untied or tied)");
}

void AlignConfig::validate() const {
  if (!(lambda_weight >= 0.0) || !std::isfinite(lambda_weight))
    throw std::invalid_argument("AlignConfig.lambda_weight must be finite and >= 0");
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("AlignConfig.p must lie in [0,1]");
}

AlignTarget::AlignTarget(std::vector<PredicateDistribution> distributions)
    : distributions_(std::move(distributions)) {}

AlignTarget AlignTarget::from_probabilities(const ad::Tensor& probs) {
  const Matrix& m = probs.value();
  std::vector<PredicateDistribution> rows;
  rows.reserve(std::size_t(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    rows.push_back({std::vector<double>(m.row(i).data(), m.row(i).data() + m.cols())});
  return AlignTarget(std::move(rows));
}

Matrix AlignTarget::as_matrix() const {
  if (distributions_.empty()) return Matrix(0, 0);
  const auto cols = static_cast<Eigen::Index>(distributions_.front().size());
  Matrix m(static_cast<Eigen::Index>(distributions_.size()), cols);
  for (std::size_t i = 0; i < distributions_.size(); ++i) {
    if (static_cast<Eigen::Index>(distributions_[i].size()) != cols)
      throw std::invalid_argument("AlignTarget rows differ in class count");
    for (Eigen::Index k = 0; k < cols; ++k) m(Eigen::Index(i), k) = distributions_[i].probs[std::size_t(k)];
  }
  return m;
}

namespace {

double kl_term(std::span<const double> target, std::span<const double> masked) {
  double total = 0.0;
  for (std::size_t k = 0; k < target.size(); ++k)
    if (target[k] > 0.0) total += target[k] * (std::log(target[k]) - std::log(std::max(masked[k], kProbabilityFloor)));
  return total;
}

}  // namespace

double kl_alignment_loss(const AlignTarget& target, std::span<const PredicateDistribution> masked) {
  const auto& t = target.distributions();
  if (t.size() != masked.size()) throw std::invalid_argument("kl_alignment_loss: length mismatch");
  if (t.empty()) throw std::invalid_argument("kl_alignment_loss: empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i].size() != masked[i].size()) throw std::invalid_argument("kl_alignment_loss: class count mismatch");
    total += kl_term(t[i].probs, masked[i].probs);
  }
  return total / double(t.size());
}

ad::Tensor kl_alignment_loss(const AlignTarget& target, const ad::Tensor& masked_probs) {
  if (static_cast<Eigen::Index>(target.size()) != masked_probs.rows())
    throw std::invalid_argument("kl_alignment_loss: length mismatch");
  return ad::kl_rows(target.as_matrix(), masked_probs, kProbabilityFloor);
}

double combine_losses(double l_original, double l_align, const AlignConfig& cfg) {
  if (cfg.target_mode == TargetMode::Off) return l_original;
  return l_original + cfg.lambda_weight * l_align;
}

ad::Tensor combine_losses(const ad::Tensor& l_original, const ad::Tensor& l_align, const AlignConfig& cfg) {
  if (cfg.target_mode == TargetMode::Off || !l_align.defined()) return l_original;
  return ad::add(l_original, ad::scale(l_align, cfg.lambda_weight));
}

double supervised_alignment_loss(std::span<const int> labels, std::span<const PredicateDistribution> masked) {
  if (labels.size() != masked.size()) throw std::invalid_argument("supervised_alignment_loss: length mismatch");
  if (labels.empty()) throw std::invalid_argument("supervised_alignment_loss: empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || std::size_t(labels[i]) >= masked[i].size())
      throw std::out_of_range("supervised_alignment_loss: label out of range");
    total -= std::log(std::max(masked[i].probs[std::size_t(labels[i])], kProbabilityFloor));
  }
  return total / double(labels.size());
}

ad::Tensor supervised_alignment_loss(std::span<const int> labels, const ad::Tensor& masked_probs,
                                     std::span<const double> weights) {
  return ad::prob_cross_entropy(masked_probs, labels, weights, kProbabilityFloor);
}

nn::Linear build_untied_head(const nn::Linear& original, HeadMode mode, Rng& rng) {
  if (mode == HeadMode::Tied) return original;
  return original.fresh_copy(rng);
}

}  // namespace relalign
