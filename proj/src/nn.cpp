#include "relalign/nn.hpp"

#include <cmath>
#include <stdexcept>

#include "relalign/masking.hpp"

namespace relalign::nn {

Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
  return m;
}

Linear::Linear(int in, int out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(double(in));
  weight = Tensor::parameter(uniform_matrix(in, out, bound, rng));
  bias = Tensor::parameter(uniform_matrix(1, out, bound, rng));
}

void Linear::collect(ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

LayerNorm::LayerNorm(int width)
    : gamma(Tensor::parameter(Matrix::Ones(1, width))), beta(Tensor::parameter(Matrix::Zero(1, width))) {}

void LayerNorm::collect(ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

Mlp::Mlp(const std::vector<int>& widths, Rng& rng) {
  if (widths.size() < 2) throw std::invalid_argument("Mlp needs at least input and output widths");
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) layers.emplace_back(widths[i], widths[i + 1], rng);
}

Tensor Mlp::operator()(const Tensor& x) const {
  Tensor h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i](h);
    if (i + 1 < layers.size()) h = ad::relu(h);
  }
  return h;
}

void Mlp::collect(ParameterList& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(out, prefix + "." + std::to_string(i));
}

MultiHeadAttention::MultiHeadAttention(int width, int heads_, Rng& rng)
    : query(width, width, rng), key(width, width, rng), value(width, width, rng), output(width, width, rng),
      heads(heads_) {
  if (heads_ < 1 || width % heads_ != 0) throw std::invalid_argument("attention width must divide by heads");
}

Tensor MultiHeadAttention::operator()(const Tensor& queries, const Tensor& memory,
                                      const AttentionMasking& masking) const {
  const Tensor q = query(queries);
  const Tensor k = key(memory);
  const Tensor v = value(memory);
  const Eigen::Index width = q.cols();
  const Eigen::Index head_width = width / heads;
  const double inv_sqrt = 1.0 / std::sqrt(double(head_width));

  std::vector<Tensor> scores;
  scores.reserve(std::size_t(heads));
  for (int h = 0; h < heads; ++h)
    scores.push_back(ad::scale(
        ad::matmul_bt(ad::slice_cols(q, h * head_width, head_width), ad::slice_cols(k, h * head_width, head_width)),
        inv_sqrt));
  Tensor stacked = heads == 1 ? scores.front() : ad::concat_rows(scores);
  if (masking.rng != nullptr) {
    const Matrix mask = draw_attention_mask(stacked.rows(), stacked.cols(), masking.p, *masking.rng);
    if (mask.any()) stacked = ad::masked_fill(stacked, mask, kMaskedLogit);
  }
  const Tensor weights = ad::softmax_rows(stacked);

  const Eigen::Index m = queries.rows();
  std::vector<Tensor> outputs;
  outputs.reserve(std::size_t(heads));
  for (int h = 0; h < heads; ++h)
    outputs.push_back(ad::matmul(ad::slice_rows(weights, h * m, m), ad::slice_cols(v, h * head_width, head_width)));
  return output(heads == 1 ? outputs.front() : ad::concat_cols(outputs));
}

void MultiHeadAttention::collect(ParameterList& out, const std::string& prefix) const {
  query.collect(out, prefix + ".query");
  key.collect(out, prefix + ".key");
  value.collect(out, prefix + ".value");
  output.collect(out, prefix + ".output");
}

FeedForward::FeedForward(int width, int hidden, Rng& rng) : up(width, hidden, rng), down(hidden, width, rng) {}

void FeedForward::collect(ParameterList& out, const std::string& prefix) const {
  up.collect(out, prefix + ".up");
  down.collect(out, prefix + ".down");
}

Lstm::Lstm(int in, int hidden_, Rng& rng) : hidden(hidden_) {
  const double bound = 1.0 / std::sqrt(double(hidden_));
  input_weight = Tensor::parameter(uniform_matrix(in, 4 * hidden_, bound, rng));
  hidden_weight = Tensor::parameter(uniform_matrix(hidden_, 4 * hidden_, bound, rng));
  Matrix b = uniform_matrix(1, 4 * hidden_, bound, rng);
  b.middleCols(hidden_, hidden_).array() += 1.0;  // forget-gate bias
  bias = Tensor::parameter(std::move(b));
}

Tensor Lstm::operator()(const Tensor& sequence, bool reverse) const {
  const Eigen::Index steps = sequence.rows();
  const Tensor projected = ad::add_row(ad::matmul(sequence, input_weight), bias);
  Tensor h = Tensor::constant(Matrix::Zero(1, hidden));
  Tensor c = Tensor::constant(Matrix::Zero(1, hidden));
  std::vector<Tensor> outputs(static_cast<std::size_t>(steps));
  for (Eigen::Index s = 0; s < steps; ++s) {
    const Eigen::Index t = reverse ? steps - 1 - s : s;
    const Tensor gates = ad::add(ad::slice_rows(projected, t, 1), ad::matmul(h, hidden_weight));
    const Tensor i = ad::sigmoid(ad::slice_cols(gates, 0, hidden));
    const Tensor f = ad::sigmoid(ad::slice_cols(gates, hidden, hidden));
    const Tensor g = ad::tanh(ad::slice_cols(gates, 2 * hidden, hidden));
    const Tensor o = ad::sigmoid(ad::slice_cols(gates, 3 * hidden, hidden));
    c = ad::add(ad::mul(f, c), ad::mul(i, g));
    h = ad::mul(o, ad::tanh(c));
    outputs[std::size_t(t)] = h;
  }
  return ad::concat_rows(outputs);
}

void Lstm::collect(ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".input_weight", input_weight});
  out.push_back({prefix + ".hidden_weight", hidden_weight});
  out.push_back({prefix + ".bias", bias});
}

Tensor BiLstm::operator()(const Tensor& sequence) const {
  const Tensor parts[] = {forward_cell(sequence), backward_cell(sequence, true)};
  return ad::concat_cols(parts);
}

void BiLstm::collect(ParameterList& out, const std::string& prefix) const {
  forward_cell.collect(out, prefix + ".forward");
  backward_cell.collect(out, prefix + ".backward");
}

}  // namespace relalign::nn
