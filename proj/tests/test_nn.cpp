#include <doctest.h>

#include "relalign/nn.hpp"
#include "test_util.hpp"

using namespace relalign;
using relalign::testing::max_gradient_error;
using relalign::testing::random_matrix;

namespace {

std::vector<ad::Tensor> tensors(const ad::ParameterList& ps) {
  std::vector<ad::Tensor> out;
  for (const auto& p : ps) out.push_back(p.tensor);
  return out;
}

ad::Tensor probe(const ad::Tensor& t) {
  Rng rng(123, 0);
  return ad::sum(ad::mul(t, ad::Tensor::constant(random_matrix(t.rows(), t.cols(), rng))));
}

}  // namespace

TEST_CASE("linear, mlp and feed-forward gradients") {
  Rng rng(1, 0);
  const ad::Tensor x = ad::Tensor::constant(random_matrix(3, 4, rng));
  nn::Linear lin(4, 2, rng);
  nn::Mlp mlp({4, 5, 5, 3}, rng);
  nn::FeedForward ff(4, 6, rng);
  ad::ParameterList ps;
  lin.collect(ps, "lin");
  CHECK(ps.size() == 2);
  CHECK(ps[0].name == "lin.weight");
  CHECK(max_gradient_error(tensors(ps), [&] { return probe(lin(x)); }) < 1e-6);
  ps.clear();
  mlp.collect(ps, "mlp");
  CHECK(ps.size() == 6);
  CHECK(max_gradient_error(tensors(ps), [&] { return probe(mlp(x)); }) < 1e-6);
  ps.clear();
  ff.collect(ps, "ff");
  CHECK(max_gradient_error(tensors(ps), [&] { return probe(ff(x)); }) < 1e-6);
}

TEST_CASE("fresh copies never share storage") {
  Rng rng(2, 0);
  nn::Linear a(3, 3, rng);
  nn::Linear b = a.fresh_copy(rng);
  CHECK_FALSE(a.weight.same_storage(b.weight));
  CHECK(a.weight.rows() == b.weight.rows());
  CHECK(a.weight.value() != b.weight.value());
  nn::Linear c = a;  // plain copies alias the same parameters
  CHECK(c.weight.same_storage(a.weight));
}

TEST_CASE("attention output and gradient") {
  Rng rng(3, 0);
  nn::MultiHeadAttention mha(8, 2, rng);
  const ad::Tensor q = ad::Tensor::parameter(random_matrix(3, 8, rng));
  const ad::Tensor mem = ad::Tensor::parameter(random_matrix(5, 8, rng));
  ad::ParameterList ps;
  mha.collect(ps, "mha");
  auto ts = tensors(ps);
  ts.push_back(q);
  ts.push_back(mem);
  CHECK(mha(q, mem).rows() == 3);
  CHECK(mha(q, mem).cols() == 8);
  CHECK(max_gradient_error(ts, [&] { return probe(mha(q, mem)); }) < 1e-6);
  // A fixed mask (same rng state every call) keeps the function differentiable.
  CHECK(max_gradient_error(ts, [&] {
          Rng mask_rng(4, 0);
          return probe(mha(q, mem, {0.3, &mask_rng}));
        }) < 1e-6);
}

TEST_CASE("attention masking changes outputs and falls back on full masks") {
  Rng rng(5, 0);
  nn::MultiHeadAttention mha(8, 2, rng);
  const ad::Tensor q = ad::Tensor::constant(random_matrix(4, 8, rng));
  const ad::Tensor mem = ad::Tensor::constant(random_matrix(6, 8, rng));
  const Matrix plain = mha(q, mem).value();
  Rng zero(1, 0), all(1, 0), some(1, 0);
  CHECK(mha(q, mem, {0.0, &zero}).value() == plain);
  CHECK(mha(q, mem, {1.0, &all}).value() == plain);
  CHECK(mha(q, mem, {0.5, &some}).value() != plain);
  CHECK(mha(q, mem, {0.5, nullptr}).value() == plain);
}

TEST_CASE("lstm and bilstm gradients and direction") {
  Rng rng(6, 0);
  nn::BiLstm bi(3, 4, rng);
  const ad::Tensor seq = ad::Tensor::parameter(random_matrix(5, 3, rng));
  ad::ParameterList ps;
  bi.collect(ps, "bi");
  auto ts = tensors(ps);
  ts.push_back(seq);
  const ad::Tensor out = bi(seq);
  CHECK(out.rows() == 5);
  CHECK(out.cols() == 8);
  CHECK(max_gradient_error(ts, [&] { return probe(bi(seq)); }) < 1e-6);
  // The forward half at step 0 only sees row 0.
  Matrix changed = seq.value();
  changed.row(4).setConstant(3.0);
  const Matrix other = bi(ad::Tensor::constant(changed)).value();
  CHECK(other.block(0, 0, 1, 4) == out.value().block(0, 0, 1, 4));
  CHECK(other.block(0, 4, 1, 4) != out.value().block(0, 4, 1, 4));
}

TEST_CASE("layer norm normalizes rows") {
  nn::LayerNorm ln(6);
  Rng rng(7, 0);
  const Matrix y = ln(ad::Tensor::constant(random_matrix(3, 6, rng, 4.0))).value();
  for (Eigen::Index r = 0; r < 3; ++r) {
    CHECK(y.row(r).mean() == doctest::Approx(0.0).epsilon(1e-9));
    CHECK((y.row(r).array().square().mean()) == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("dropout switch") {
  Rng rng(8, 0);
  const ad::Tensor x = ad::Tensor::constant(Matrix::Ones(4, 4));
  CHECK_FALSE(nn::Dropout{0.5, nullptr}.active());
  CHECK(nn::Dropout{0.5, nullptr}(x).value() == x.value());
  CHECK(nn::Dropout{0.5, &rng}(x).value() != x.value());
}
