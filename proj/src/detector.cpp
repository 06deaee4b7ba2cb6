#include "relalign/detector.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace relalign {

namespace {

std::vector<double> softmax(const Eigen::RowVectorXd& logits) {
  const double m = logits.maxCoeff();
  std::vector<double> p(std::size_t(logits.size()));
  double total = 0.0;
  for (Eigen::Index k = 0; k < logits.size(); ++k) total += p[std::size_t(k)] = std::exp(logits[k] - m);
  for (double& v : p) v /= total;
  return p;
}

}  // namespace

Matrix DetectorStub::cell_logits(const FeatureGrid& grid) const {
  const Eigen::Map<const Matrix> cells(grid.data.data(), Eigen::Index(grid.height) * grid.width, grid.channels);
  Matrix logits = cells * classifier.weight.value();
  logits.rowwise() += classifier.bias.value().row(0);
  return logits;
}

std::vector<double> DetectorStub::classify(const FeatureGrid& grid, const BoundingBox& box) const {
  const Matrix logits = cell_logits(grid);
  const FeatureGrid::CellRange r = grid.cells_of(box);
  Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(logits.cols());
  for (int row = r.row_begin; row < r.row_end; ++row)
    for (int col = r.col_begin; col < r.col_end; ++col) mean += logits.row(Eigen::Index(row) * grid.width + col);
  mean /= double((r.row_end - r.row_begin) * (r.col_end - r.col_begin));
  std::vector<double> probs = softmax(mean.head(logits.cols() - 1));
  return probs;
}

std::vector<DetectorStub::Proposal> DetectorStub::propose(const FeatureGrid& grid, int min_cells) const {
  const Matrix logits = cell_logits(grid);
  const int background = int(logits.cols()) - 1;
  const int h = grid.height, w = grid.width;
  std::vector<int> label(std::size_t(h) * w);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best = 0;
    logits.row(i).maxCoeff(&best);
    label[std::size_t(i)] = int(best);
  }
  std::vector<Proposal> out;
  for (const GridComponent& comp : label_components(label, h, w, background, min_cells)) {
    Proposal p;
    p.box = comp.box;
    p.class_probs = classify(grid, p.box);
    out.push_back(std::move(p));
  }
  return out;
}

double pretrain_detector_stub(DetectorStub& stub, std::span<const SceneSample> train, int num_object_classes,
                              int epochs, double lr, int max_samples) {
  if (train.empty()) throw std::invalid_argument("pretrain_detector_stub: empty training set");
  const std::size_t n_samples = std::min<std::size_t>(train.size(), std::size_t(max_samples));
  const int channels = train.front().feature_grid.channels;
  const int classes = num_object_classes + 1;
  std::vector<Matrix> blocks;
  std::vector<int> labels;
  for (std::size_t s = 0; s < n_samples; ++s) {
    const FeatureGrid& grid = train[s].feature_grid;
    std::vector<int> cell_label(std::size_t(grid.height) * grid.width, num_object_classes);
    for (const Entity& e : train[s].entities) {
      const FeatureGrid::CellRange r = grid.cells_of(e.box);
      for (int row = r.row_begin; row < r.row_end; ++row)
        for (int col = r.col_begin; col < r.col_end; ++col)
          cell_label[std::size_t(row) * grid.width + col] = e.class_id;
    }
    blocks.push_back(Eigen::Map<const Matrix>(grid.data.data(), Eigen::Index(cell_label.size()), channels));
    labels.insert(labels.end(), cell_label.begin(), cell_label.end());
  }
  Matrix x(Eigen::Index(labels.size()), channels);
  Eigen::Index offset = 0;
  for (const Matrix& b : blocks) {
    x.middleRows(offset, b.rows()) = b;
    offset += b.rows();
  }
  // Background dominates the cells; balance classes by inverse frequency.
  std::vector<double> counts(std::size_t(classes), 0.0);
  for (int l : labels) counts[std::size_t(l)] += 1.0;
  Eigen::VectorXd weight(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    weight[i] = double(labels.size()) / (classes * std::max(1.0, counts[std::size_t(labels[std::size_t(i)])]));
  const double weight_total = weight.sum();

  Matrix& w = stub.classifier.weight.mutable_value();
  Matrix& b = stub.classifier.bias.mutable_value();
  Matrix w_velocity = Matrix::Zero(w.rows(), w.cols());
  Matrix b_velocity = Matrix::Zero(1, b.cols());
  double loss = 0.0;
  for (int epoch = 0; epoch <= epochs; ++epoch) {
    Matrix logits = x * w;
    logits.rowwise() += b.row(0);
    Matrix grad(logits.rows(), logits.cols());
    loss = 0.0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      const double m = logits.row(i).maxCoeff();
      const Eigen::RowVectorXd e = (logits.row(i).array() - m).exp();
      const double z = e.sum();
      grad.row(i) = e / z;
      const int y = labels[std::size_t(i)];
      loss += weight[i] * (std::log(z) + m - logits(i, y));
      grad(i, y) -= 1.0;
      grad.row(i) *= weight[i] / weight_total;
    }
    loss /= weight_total;
    if (epoch == epochs) break;
    w_velocity = 0.9 * w_velocity + x.transpose() * grad;
    b_velocity = 0.9 * b_velocity + grad.colwise().sum();
    w -= lr * w_velocity;
    b -= lr * b_velocity;
  }
  stub.pretrained = true;
  return loss;
}

}  // namespace relalign
