#pragma once

#include <string>
#include <vector>

#include "relalign/autodiff.hpp"

namespace relalign::nn {

using ad::ParameterList;
using ad::Tensor;

/// Uniform(-bound, bound) matrix.
Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng);

/// Dropout switch threaded through forwards. Disabled when rng is null.
struct Dropout {
  double p = 0.0;
  Rng* rng = nullptr;

  bool active() const { return rng != nullptr && p > 0.0; }
  Tensor operator()(const Tensor& x) const { return active() ? ad::dropout(x, p, *rng) : x; }
};

/// Source of per-entry attention-logit masks. Disabled when rng is null.
struct AttentionMasking {
  double p = 0.0;
  Rng* rng = nullptr;
};

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // 1 x out

  Linear() = default;
  Linear(int in, int out, Rng& rng);

  Tensor operator()(const Tensor& x) const { return ad::add_row(ad::matmul(x, weight), bias); }
  void collect(ParameterList& out, const std::string& prefix) const;
  /// Fresh parameters of the same shape (no shared storage).
  Linear fresh_copy(Rng& rng) const { return Linear(int(weight.rows()), int(weight.cols()), rng); }
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  LayerNorm() = default;
  explicit LayerNorm(int width);

  Tensor operator()(const Tensor& x) const { return ad::layer_norm_rows(x, gamma, beta); }
  void collect(ParameterList& out, const std::string& prefix) const;
};

/// Linear layers with ReLU between them (not after the last).
struct Mlp {
  std::vector<Linear> layers;

  Mlp() = default;
  Mlp(const std::vector<int>& widths, Rng& rng);

  Tensor operator()(const Tensor& x) const;
  void collect(ParameterList& out, const std::string& prefix) const;
};

struct MultiHeadAttention {
  Linear query;
  Linear key;
  Linear value;
  Linear output;
  int heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(int width, int heads, Rng& rng);

  /// Scaled dot-product attention of `queries` (M x d) over `memory` (L x d).
  /// With masking enabled, one mask covering all heads is drawn per call:
  /// the per-head score blocks are stacked into an (heads*M) x L matrix.
  Tensor operator()(const Tensor& queries, const Tensor& memory, const AttentionMasking& masking = {}) const;
  void collect(ParameterList& out, const std::string& prefix) const;
};

struct FeedForward {
  Linear up;
  Linear down;

  FeedForward() = default;
  FeedForward(int width, int hidden, Rng& rng);

  Tensor operator()(const Tensor& x, const Dropout& dropout = {}) const { return down(dropout(ad::relu(up(x)))); }
  void collect(ParameterList& out, const std::string& prefix) const;
};

/// Single-layer LSTM over the rows of a T x in sequence; returns T x hidden.
struct Lstm {
  Tensor input_weight;   // in x 4h   (gate order i, f, g, o)
  Tensor hidden_weight;  // h x 4h
  Tensor bias;           // 1 x 4h
  int hidden = 0;

  Lstm() = default;
  Lstm(int in, int hidden, Rng& rng);

  Tensor operator()(const Tensor& sequence, bool reverse = false) const;
  void collect(ParameterList& out, const std::string& prefix) const;
};

/// Forward and backward LSTMs, outputs concatenated: T x 2h.
struct BiLstm {
  Lstm forward_cell;
  Lstm backward_cell;

  BiLstm() = default;
  BiLstm(int in, int hidden, Rng& rng) : forward_cell(in, hidden, rng), backward_cell(in, hidden, rng) {}

  Tensor operator()(const Tensor& sequence) const;
  void collect(ParameterList& out, const std::string& prefix) const;
};

}  // namespace relalign::nn
