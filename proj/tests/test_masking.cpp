#include <doctest.h>

#include <cmath>

#include "relalign/autodiff.hpp"
#include "relalign/masking.hpp"
#include "test_util.hpp"

using namespace relalign;
using relalign::testing::random_matrix;

namespace {

RelationFeatureBatch batch(Eigen::Index n, Eigen::Index d, std::uint64_t seed = 1) {
  Rng rng(seed, 0);
  // strictly nonzero rows so a zero row can only come from masking
  Matrix m = random_matrix(n, d, rng).array().abs() + 0.1;
  return {m};
}

double correlation(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = double(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += a[i], mb += b[i];
  ma /= n, mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

TEST_CASE("feature masking at p = 0 and p = 1") {
  const RelationFeatureBatch r = batch(20, 4);
  Rng a(3, 0), b(3, 0);
  CHECK(mask_features(r, {0.0, 0, false}, a).features == r.features);
  CHECK(mask_features(r, {1.0, 0, false}, b).features == Matrix::Zero(20, 4));
}

TEST_CASE("feature masking zeroes whole rows and copies the rest verbatim") {
  const RelationFeatureBatch r = batch(500, 6);
  Rng rng(4, 0);
  const Matrix m = mask_features(r, {0.3, 0, false}, rng).features;
  int zeroed = 0;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    if (m.row(i).isZero(0.0)) {
      ++zeroed;
    } else {
      CHECK(m.row(i) == r.features.row(i));
    }
  }
  CHECK(zeroed > 0);
  CHECK(zeroed < 500);
}

TEST_CASE("feature masking rate: p = 0.1 over 100000 rows") {
  const RelationFeatureBatch r = batch(100000, 4);
  Rng rng(5, 0);
  const Matrix m = mask_features(r, {0.1, 0, false}, rng).features;
  long zeroed = 0;
  for (Eigen::Index i = 0; i < m.rows(); ++i) zeroed += m.row(i).isZero(0.0);
  const double frac = double(zeroed) / 100000.0;
  CHECK(frac >= 0.097);
  CHECK(frac <= 0.103);
}

TEST_CASE("masking is deterministic and advances the state") {
  const RelationFeatureBatch r = batch(50, 3);
  Rng a(6, 0), b(6, 0);
  const Matrix first = mask_features(r, {0.5, 0, false}, a).features;
  CHECK(first == mask_features(r, {0.5, 0, false}, b).features);
  CHECK(a == b);
  CHECK(a.counter() > 0);
  CHECK(mask_features(r, {0.5, 0, false}, a).features != first);
}

TEST_CASE("attention masking: p = 0 is identity and masked entries get zero probability") {
  Rng rng(7, 0);
  const Matrix s = random_matrix(8, 5, rng);
  Rng z(1, 0);
  CHECK(mask_attention_logits(s, {0.0, 0, false}, z) == s);

  Matrix row(1, 3);
  row << 1.0, 2.0, 3.0;
  Matrix masked = row;
  masked(0, 1) = kMaskedLogit;
  const Matrix probs = ad::softmax_rows(ad::Tensor::constant(masked)).value();
  CHECK(probs(0, 1) == 0.0);
  CHECK(probs(0, 0) == doctest::Approx(std::exp(1.0) / (std::exp(1.0) + std::exp(3.0))));
  CHECK(probs(0, 2) == doctest::Approx(std::exp(3.0) / (std::exp(1.0) + std::exp(3.0))));
}

TEST_CASE("attention masking keeps a finite entry in every row") {
  Rng rng(8, 0);
  const Matrix s = random_matrix(2000, 3, rng);
  Rng m(9, 0);
  const Matrix out = mask_attention_logits(s, {0.6, 0, false}, m);
  int untouched = 0;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    int finite = 0;
    for (Eigen::Index j = 0; j < out.cols(); ++j) {
      if (std::isfinite(out(i, j))) {
        ++finite;
        CHECK(out(i, j) == s(i, j));
      } else {
        CHECK(out(i, j) == kMaskedLogit);
      }
    }
    CHECK(finite >= 1);
    untouched += finite == 3;
  }
  CHECK(untouched > 0);
  Rng all(10, 0);
  CHECK(mask_attention_logits(s, {1.0, 0, false}, all) == s);
  CHECK(ad::softmax_rows(ad::Tensor::constant(out)).value().allFinite());
}

TEST_CASE("attention masking rate: p = 0.1 over 10^6 entries") {
  Rng r(11, 0);
  const Matrix mask = draw_attention_mask(100000, 10, 0.1, r);
  long masked = 0, counted = 0;
  for (Eigen::Index i = 0; i < mask.rows(); ++i) {
    const double row_sum = mask.row(i).sum();
    masked += long(row_sum);
    counted += 10;
  }
  const double frac = double(masked) / double(counted);
  CHECK(frac >= 0.097);
  CHECK(frac <= 0.103);
}

TEST_CASE("mask indicators of distinct rows and entries are uncorrelated") {
  Rng r(12, 0);
  const std::vector<bool> rows = draw_row_mask(100001, 0.3, r);
  std::vector<double> a, b;
  for (std::size_t i = 0; i + 1 < rows.size(); ++i) a.push_back(rows[i]), b.push_back(rows[i + 1]);
  CHECK(std::abs(correlation(a, b)) < 0.02);

  Rng s(13, 0);
  // Wide rows, so the all-masked fallback never fires.
  const Matrix m = draw_attention_mask(2000, 51, 0.3, s);
  std::vector<double> c0, c1;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j + 1 < m.cols(); ++j) c0.push_back(m(i, j)), c1.push_back(m(i, j + 1));
  CHECK(std::abs(correlation(c0, c1)) < 0.02);
}

TEST_CASE("mask config validation") {
  CHECK_THROWS_AS((MaskConfig{1.5, 0, false}).validate(), std::invalid_argument);
  CHECK_THROWS_AS((MaskConfig{-0.1, 0, false}).validate(), std::invalid_argument);
  CHECK_THROWS_AS((MaskConfig{0.1, 0, true}).validate(), std::invalid_argument);
  CHECK_NOTHROW((MaskConfig{0.1, 0, false}).validate());
}
