#include "relalign/sgtr.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace relalign {

namespace {

constexpr std::uint64_t kInitStream = 0x5347'5452'0001ULL;
constexpr std::uint64_t kMirrorHeadStream = 0x5347'5452'0002ULL;
constexpr std::uint64_t kDetectorStream = 0x5347'5452'0003ULL;

Matrix to_cxcywh(const BoundingBox& b) {
  Matrix m(1, 4);
  m << 0.5 * (b.x_min + b.x_max), 0.5 * (b.y_min + b.y_max), b.width(), b.height();
  return m;
}

BoundingBox from_cxcywh(const double* v) {
  BoundingBox b{v[0] - 0.5 * v[2], v[1] - 0.5 * v[3], v[0] + 0.5 * v[2], v[1] + 0.5 * v[3]};
  b.x_min = std::clamp(b.x_min, 0.0, 1.0);
  b.y_min = std::clamp(b.y_min, 0.0, 1.0);
  b.x_max = std::clamp(b.x_max, 0.0, 1.0);
  b.y_max = std::clamp(b.y_max, 0.0, 1.0);
  return b;
}

double l1(const double* a, const Matrix& b) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < b.cols(); ++i) s += std::abs(a[i] - b(0, i));
  return s;
}

ad::Tensor residual(const nn::LayerNorm& norm, const ad::Tensor& x, const ad::Tensor& update,
                    const nn::Dropout& dropout) {
  return norm(ad::add(x, dropout(update)));
}

// Fourier features of normalized (y, x) points: sin/cos(pi * 2^j * y) in the
// first half of the width, the same in x for the second half.
Matrix fourier_positions(const std::vector<std::array<double, 2>>& points, int width) {
  Matrix out = Matrix::Zero(Eigen::Index(points.size()), width);
  const int half = width / 2;
  for (std::size_t n = 0; n < points.size(); ++n)
    for (int k = 0; k < width; ++k) {
      const bool along_y = k < half;
      const int i = along_y ? k : k - half;
      const double angle = std::numbers::pi * std::ldexp(1.0, i / 2) * points[n][along_y ? 0 : 1];
      out(Eigen::Index(n), k) = i % 2 == 0 ? std::sin(angle) : std::cos(angle);
    }
  return out;
}

std::vector<std::array<double, 2>> cell_centres(int rows, int cols) {
  std::vector<std::array<double, 2>> out;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out.push_back({(r + 0.5) / rows, (c + 0.5) / cols});
  return out;
}

double logit(double p) {
  p = std::clamp(p, 1e-4, 1.0 - 1e-4);
  return std::log(p / (1.0 - p));
}

ad::Tensor learned(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  return ad::Tensor::parameter(nn::uniform_matrix(rows, cols, 1.0, rng));
}

}  // namespace

SgtrConfig SgtrConfig::for_corpus(const CorpusSpec& spec) {
  SgtrConfig c;
  c.grid_height = spec.height;
  c.grid_width = spec.width;
  c.channels = spec.channels;
  c.num_object_classes = spec.num_object_classes;
  c.num_predicates = spec.num_predicates;
  return c;
}

void SgtrConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("SgtrConfig: ") + what);
  };
  need(grid_height > 0 && grid_width > 0 && channels > 0, "grid shape must be positive");
  need(patch >= 1 && grid_height % patch == 0 && grid_width % patch == 0, "patch must divide the grid");
  need(num_object_classes >= 1 && num_predicates >= 2, "class counts");
  need(d_model >= 1 && heads >= 1 && d_model % heads == 0, "d_model must divide by heads");
  need(ff_hidden >= 1, "ff_hidden must be positive");
  need(encoder_layers >= 0 && entity_layers >= 1, "layer counts");
  need(decoder_layers >= 2, "decoder_layers must be >= 2");
  need(num_entity_queries >= 2 && num_predicate_queries >= 1, "query counts");
  need(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0,1)");
  need(no_object_weight >= 0.0 && box_weight >= 0.0, "loss weights must be nonnegative");
  need(stub_epochs >= 0 && stub_lr > 0.0 && stub_max_samples >= 1, "detector training settings");
}

nlohmann::json SgtrConfig::to_json() const {
  return {{"grid_height", grid_height},
          {"grid_width", grid_width},
          {"channels", channels},
          {"patch", patch},
          {"num_object_classes", num_object_classes},
          {"num_predicates", num_predicates},
          {"d_model", d_model},
          {"heads", heads},
          {"ff_hidden", ff_hidden},
          {"encoder_layers", encoder_layers},
          {"entity_layers", entity_layers},
          {"decoder_layers", decoder_layers},
          {"num_entity_queries", num_entity_queries},
          {"num_predicate_queries", num_predicate_queries},
          {"dropout", dropout},
          {"no_object_weight", no_object_weight},
          {"box_weight", box_weight},
          {"stub_epochs", stub_epochs},
          {"stub_lr", stub_lr},
          {"stub_max_samples", stub_max_samples},
          {"align_all_layers", align_all_layers}};
}

SgtrConfig SgtrConfig::from_json(const nlohmann::json& j) {
  SgtrConfig c;
  c.grid_height = j.value("grid_height", c.grid_height);
  c.grid_width = j.value("grid_width", c.grid_width);
  c.channels = j.value("channels", c.channels);
  c.patch = j.value("patch", c.patch);
  c.num_object_classes = j.value("num_object_classes", c.num_object_classes);
  c.num_predicates = j.value("num_predicates", c.num_predicates);
  c.d_model = j.value("d_model", c.d_model);
  c.heads = j.value("heads", c.heads);
  c.ff_hidden = j.value("ff_hidden", c.ff_hidden);
  c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
  c.entity_layers = j.value("entity_layers", c.entity_layers);
  c.decoder_layers = j.value("decoder_layers", c.decoder_layers);
  c.num_entity_queries = j.value("num_entity_queries", c.num_entity_queries);
  c.num_predicate_queries = j.value("num_predicate_queries", c.num_predicate_queries);
  c.dropout = j.value("dropout", c.dropout);
  c.no_object_weight = j.value("no_object_weight", c.no_object_weight);
  c.box_weight = j.value("box_weight", c.box_weight);
  c.stub_epochs = j.value("stub_epochs", c.stub_epochs);
  c.stub_lr = j.value("stub_lr", c.stub_lr);
  c.stub_max_samples = j.value("stub_max_samples", c.stub_max_samples);
  c.align_all_layers = j.value("align_all_layers", c.align_all_layers);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Blocks

TransformerEncoderLayer::TransformerEncoderLayer(int width, int heads, int hidden, Rng& rng)
    : attention(width, heads, rng), norm1(width), feed_forward(width, hidden, rng), norm2(width) {}

ad::Tensor TransformerEncoderLayer::operator()(const ad::Tensor& x, const nn::Dropout& dropout) const {
  const ad::Tensor h = residual(norm1, x, attention(x, x), dropout);
  return residual(norm2, h, feed_forward(h, dropout), dropout);
}

void TransformerEncoderLayer::collect(ad::ParameterList& out, const std::string& prefix) const {
  attention.collect(out, prefix + ".attention");
  norm1.collect(out, prefix + ".norm1");
  feed_forward.collect(out, prefix + ".ff");
  norm2.collect(out, prefix + ".norm2");
}

TransformerDecoderLayer::TransformerDecoderLayer(int width, int heads, int hidden, Rng& rng)
    : self_attention(width, heads, rng),
      norm1(width),
      cross_attention(width, heads, rng),
      norm2(width),
      feed_forward(width, hidden, rng),
      norm3(width) {}

ad::Tensor TransformerDecoderLayer::operator()(const ad::Tensor& x, const ad::Tensor& memory,
                                               const nn::Dropout& dropout) const {
  ad::Tensor h = residual(norm1, x, self_attention(x, x), dropout);
  h = residual(norm2, h, cross_attention(h, memory), dropout);
  return residual(norm3, h, feed_forward(h, dropout), dropout);
}

void TransformerDecoderLayer::collect(ad::ParameterList& out, const std::string& prefix) const {
  self_attention.collect(out, prefix + ".self_attention");
  norm1.collect(out, prefix + ".norm1");
  cross_attention.collect(out, prefix + ".cross_attention");
  norm2.collect(out, prefix + ".norm2");
  feed_forward.collect(out, prefix + ".ff");
  norm3.collect(out, prefix + ".norm3");
}

PredicateDecoderLayer::PredicateDecoderLayer(int width, int heads, int hidden, Rng& rng)
    : self_attention(width, heads, rng),
      norm1(width),
      image_attention(width, heads, rng),
      norm2(width),
      entity_attention(width, heads, rng),
      norm3(width),
      feed_forward(width, hidden, rng),
      norm4(width) {}

ad::Tensor PredicateDecoderLayer::operator()(const ad::Tensor& x, const ad::Tensor& image,
                                             const ad::Tensor& entities, const nn::Dropout& dropout,
                                             const nn::AttentionMasking& masking) const {
  ad::Tensor h = residual(norm1, x, self_attention(x, x), dropout);
  h = residual(norm2, h, image_attention(h, image, masking), dropout);
  h = residual(norm3, h, entity_attention(h, entities, masking), dropout);
  return residual(norm4, h, feed_forward(h, dropout), dropout);
}

void PredicateDecoderLayer::collect(ad::ParameterList& out, const std::string& prefix) const {
  self_attention.collect(out, prefix + ".self_attention");
  norm1.collect(out, prefix + ".norm1");
  image_attention.collect(out, prefix + ".image_attention");
  norm2.collect(out, prefix + ".norm2");
  entity_attention.collect(out, prefix + ".entity_attention");
  norm3.collect(out, prefix + ".norm3");
  feed_forward.collect(out, prefix + ".ff");
  norm4.collect(out, prefix + ".norm4");
}

std::vector<ad::Tensor> PredicateDecoder::operator()(const ad::Tensor& image, const ad::Tensor& entities,
                                                     const nn::Dropout& dropout,
                                                     const nn::AttentionMasking& masking) const {
  std::vector<ad::Tensor> states;
  states.reserve(layers.size());
  ad::Tensor q = queries;
  for (const PredicateDecoderLayer& layer : layers) {
    q = layer(q, image, entities, dropout, masking);
    states.push_back(q);
  }
  return states;
}

void PredicateDecoder::collect(ad::ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".queries", queries});
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(out, prefix + ".layer" + std::to_string(i));
}

void SgtrLabelHeads::collect(ad::ParameterList& out, const std::string& prefix) const {
  relation.collect(out, prefix + ".relation");
  subject.collect(out, prefix + ".subject");
  object.collect(out, prefix + ".object");
}

// ---------------------------------------------------------------------------
// Model

MiniSgtr::MiniSgtr(const SgtrConfig& cfg, Rng& rng) : config(cfg) {
  cfg.validate();
  const int d = cfg.d_model;
  const int classes = cfg.num_object_classes + 1;
  patch_embed = nn::Linear(cfg.patch * cfg.patch * cfg.channels, d, rng);
  position = ad::Tensor::constant(fourier_positions(cell_centres(cfg.grid_height / cfg.patch, cfg.grid_width / cfg.patch), d));
  Rng detector_rng = rng.split(kDetectorStream);
  detector.classifier = nn::Linear(cfg.channels, classes, detector_rng);
  for (int i = 0; i < cfg.encoder_layers; ++i) encoder.emplace_back(d, cfg.heads, cfg.ff_hidden, rng);
  entity_queries = learned(cfg.num_entity_queries, d, rng);
  for (int i = 0; i < cfg.entity_layers; ++i) entity_decoder.emplace_back(d, cfg.heads, cfg.ff_hidden, rng);
  entity_class = nn::Linear(d, classes, rng);
  entity_box = nn::Linear(d, 4, rng);
  entity_box.weight.mutable_value().setZero();  // boxes start at the proposal
  entity_box.bias.mutable_value().setZero();
  relation_encoder = nn::Linear(d, d, rng);
  predicate_decoder.queries = learned(cfg.num_predicate_queries, d, rng);
  for (int i = 0; i < cfg.decoder_layers; ++i)
    predicate_decoder.layers.emplace_back(d, cfg.heads, cfg.ff_hidden, rng);
  heads.relation = nn::Linear(d, cfg.num_predicates, rng);
  heads.subject = nn::Linear(d, classes, rng);
  heads.object = nn::Linear(d, classes, rng);
  box_head = nn::Linear(d, 8, rng);
}

Matrix MiniSgtr::patchify(const FeatureGrid& grid) const {
  const int p = config.patch;
  if (grid.height != config.grid_height || grid.width != config.grid_width || grid.channels != config.channels)
    throw std::invalid_argument("feature grid shape does not match the model");
  const int rows = grid.height / p;
  const int cols = grid.width / p;
  Matrix out(rows * cols, p * p * grid.channels);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      Eigen::Index k = 0;
      for (int dr = 0; dr < p; ++dr)
        for (int dc = 0; dc < p; ++dc)
          for (double v : grid.cell(r * p + dr, c * p + dc)) out(r * cols + c, k++) = v;
    }
  return out;
}

void MiniSgtr::collect_upstream(ad::ParameterList& out) const {
  patch_embed.collect(out, "sgtr.patch_embed");
  for (std::size_t i = 0; i < encoder.size(); ++i) encoder[i].collect(out, "sgtr.encoder" + std::to_string(i));
  out.push_back({"sgtr.entity_queries", entity_queries});
  for (std::size_t i = 0; i < entity_decoder.size(); ++i)
    entity_decoder[i].collect(out, "sgtr.entity_decoder" + std::to_string(i));
  entity_class.collect(out, "sgtr.entity_class");
  entity_box.collect(out, "sgtr.entity_box");
  relation_encoder.collect(out, "sgtr.relation_encoder");
}

void MiniSgtr::collect_shared(ad::ParameterList& out) const { predicate_decoder.collect(out, "sgtr.predicate_decoder"); }

void MiniSgtr::collect_heads(ad::ParameterList& out) const {
  heads.collect(out, "sgtr.heads");
  box_head.collect(out, "sgtr.box_head");
}

SgtrPair make_sgtr_pair(const SgtrConfig& config, const AlignConfig& align, const MaskConfig& mask,
                        std::uint64_t seed) {
  align.validate();
  mask.validate();
  Rng init(seed, kInitStream);
  Rng head_rng(seed, kMirrorHeadStream);
  SgtrPair pair;
  pair.original = MiniSgtr(config, init);
  pair.mask_cfg = mask;
  pair.align_cfg = align;
  pair.mirrored.decoder = pair.original.predicate_decoder;
  pair.mirrored.head_mode = align.head_mode;
  pair.mirrored.heads.relation = build_untied_head(pair.original.heads.relation, align.head_mode, head_rng);
  pair.mirrored.heads.subject = build_untied_head(pair.original.heads.subject, align.head_mode, head_rng);
  pair.mirrored.heads.object = build_untied_head(pair.original.heads.object, align.head_mode, head_rng);
  return pair;
}

SgtrForward sgtr_forward_original(const MiniSgtr& model, const SceneSample& sample, Rng* dropout_rng) {
  const nn::Dropout dropout{model.config.dropout, dropout_rng};
  SgtrForward out;
  ad::Tensor tokens = ad::add(model.patch_embed(ad::Tensor::constant(model.patchify(sample.feature_grid))),
                              model.position);
  for (const auto& layer : model.encoder) tokens = layer(tokens, dropout);

  if (!model.detector.pretrained) throw ConfigurationError("mini-sgtr requires a pre-trained entity proposer");
  const int n_e = model.config.num_entity_queries;
  const int cols = model.config.grid_width / model.config.patch;
  out.proposals = entity_proposals(model.detector, sample.feature_grid, n_e);
  // Query i starts from the mean state of the tokens under proposal i (unused
  // queries start from their embedding alone) and predicts its box relative to
  // the proposal's box.
  Matrix pooling = Matrix::Zero(n_e, tokens.rows());
  Matrix box_bias(n_e, 4);
  box_bias.rowwise() = Eigen::RowVector4d(0.0, 0.0, logit(0.2), logit(0.2));
  for (std::size_t i = 0; i < out.proposals.size(); ++i) {
    const BoundingBox& box = out.proposals[i].box;
    const FeatureGrid::CellRange r = sample.feature_grid.cells_of(box);
    for (int row = r.row_begin / model.config.patch; row <= (r.row_end - 1) / model.config.patch; ++row)
      for (int col = r.col_begin / model.config.patch; col <= (r.col_end - 1) / model.config.patch; ++col)
        pooling(Eigen::Index(i), row * cols + col) = 1.0;
    pooling.row(Eigen::Index(i)) /= pooling.row(Eigen::Index(i)).sum();
    const Matrix b = to_cxcywh(box);
    for (int k = 0; k < 4; ++k) box_bias(Eigen::Index(i), k) = logit(b(0, k));
  }
  ad::Tensor entities = ad::add(ad::matmul(ad::Tensor::constant(std::move(pooling)), tokens), model.entity_queries);
  for (const auto& layer : model.entity_decoder) entities = layer(entities, tokens, dropout);
  out.entity_logits = model.entity_class(entities);
  out.entity_boxes = ad::sigmoid(ad::add_const(model.entity_box(entities), box_bias));

  out.image_features = ad::relu(model.relation_encoder(tokens));
  out.entity_features = entities;
  for (const ad::Tensor& states : model.predicate_decoder(out.image_features, out.entity_features, dropout)) {
    SgtrLayerPrediction p;
    p.query_states = states;
    p.relation_logits = model.heads.relation(states);
    p.subject_logits = model.heads.subject(states);
    p.object_logits = model.heads.object(states);
    p.boxes = ad::sigmoid(model.box_head(states));
    out.layers.push_back(std::move(p));
  }
  return out;
}

SgtrMirrorOutput sgtr_forward_mirrored(SgtrPair& pair, const ad::Tensor& image_features,
                                       const ad::Tensor& entity_features, Rng& rng) {
  ++pair.mirrored_calls;
  const nn::AttentionMasking masking{pair.mask_cfg.p, &rng};
  SgtrMirrorOutput out;
  out.query_states = pair.mirrored.decoder(ad::detach(image_features), ad::detach(entity_features), nn::Dropout{},
                                           masking);
  SgtrMirrorOutput last = sgtr_mirror_heads_at(pair, out, out.query_states.size() - 1);
  out.relation_probs = last.relation_probs;
  out.subject_probs = last.subject_probs;
  out.object_probs = last.object_probs;
  return out;
}

SgtrMirrorOutput sgtr_forward_mirrored(SgtrPair& pair, const SceneSample& sample, Rng& rng) {
  const SgtrForward original = sgtr_forward_original(pair.original, sample, nullptr);
  return sgtr_forward_mirrored(pair, original.image_features, original.entity_features, rng);
}

SgtrMirrorOutput sgtr_mirror_heads_at(const SgtrPair& pair, const SgtrMirrorOutput& out, std::size_t layer) {
  const ad::Tensor& states = out.query_states.at(layer);
  SgtrMirrorOutput r;
  r.relation_probs = ad::softmax_rows(pair.mirrored.heads.relation(states));
  r.subject_probs = ad::softmax_rows(pair.mirrored.heads.subject(states));
  r.object_probs = ad::softmax_rows(pair.mirrored.heads.object(states));
  return r;
}

namespace {

std::vector<SgtrAlignTarget> targets_per_layer(const MiniSgtr& model, const ad::Tensor& image,
                                               const ad::Tensor& entities) {
  ad::NoGradGuard no_grad;
  std::vector<SgtrAlignTarget> targets;
  for (const ad::Tensor& states : model.predicate_decoder(ad::detach(image), ad::detach(entities), nn::Dropout{})) {
    targets.push_back({AlignTarget::from_probabilities(ad::softmax_rows(model.heads.relation(states))),
                       AlignTarget::from_probabilities(ad::softmax_rows(model.heads.subject(states))),
                       AlignTarget::from_probabilities(ad::softmax_rows(model.heads.object(states)))});
  }
  return targets;
}

}  // namespace

SgtrAlignTarget sgtr_alignment_target(const MiniSgtr& model, const ad::Tensor& image_features,
                                      const ad::Tensor& entity_features) {
  return targets_per_layer(model, image_features, entity_features).back();
}

SgtrAlignTarget sgtr_alignment_target(const MiniSgtr& model, const SceneSample& sample) {
  ad::NoGradGuard no_grad;
  const SgtrForward f = sgtr_forward_original(model, sample, nullptr);
  return sgtr_alignment_target(model, f.image_features, f.entity_features);
}

std::vector<DetectorStub::Proposal> entity_proposals(const DetectorStub& detector, const FeatureGrid& grid,
                                                     int count) {
  std::vector<DetectorStub::Proposal> out = detector.propose(grid);
  std::stable_sort(out.begin(), out.end(), [](const DetectorStub::Proposal& a, const DetectorStub::Proposal& b) {
    return a.box.area() > b.box.area();
  });
  if (std::ssize(out) > count) out.resize(std::size_t(count));
  return out;
}

std::vector<int> greedy_assignment(const Matrix& cost) {
  struct Entry {
    double cost;
    int row, col;
  };
  std::vector<Entry> entries;
  entries.reserve(std::size_t(cost.size()));
  for (Eigen::Index r = 0; r < cost.rows(); ++r)
    for (Eigen::Index c = 0; c < cost.cols(); ++c) entries.push_back({cost(r, c), int(r), int(c)});
  std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.cost < b.cost; });
  std::vector<int> row_to_col(std::size_t(cost.rows()), -1);
  std::vector<bool> col_used(std::size_t(cost.cols()), false);
  for (const Entry& e : entries) {
    if (row_to_col[std::size_t(e.row)] >= 0 || col_used[std::size_t(e.col)]) continue;
    row_to_col[std::size_t(e.row)] = e.col;
    col_used[std::size_t(e.col)] = true;
  }
  return row_to_col;
}

// ---------------------------------------------------------------------------
// SgtrModel

SgtrModel::SgtrModel(const SgtrConfig& config, const AlignConfig& align, const MaskConfig& mask, std::uint64_t seed)
    : pair_(make_sgtr_pair(config, align, mask, seed)), seed_(seed) {}

ad::ParameterList SgtrModel::parameter_group(ParameterGroup group) const {
  ad::ParameterList out;
  switch (group) {
    case ParameterGroup::Upstream: pair_.original.collect_upstream(out); break;
    case ParameterGroup::Shared: pair_.original.collect_shared(out); break;
    case ParameterGroup::OriginalHead: pair_.original.collect_heads(out); break;
    case ParameterGroup::UntiedHead:
      if (pair_.mirrored.head_mode == HeadMode::Untied) pair_.mirrored.heads.collect(out, "mirror.heads");
      break;
    case ParameterGroup::Frozen: pair_.original.detector.classifier.collect(out, "sgtr.detector"); break;
  }
  return out;
}

ad::ParameterList SgtrModel::parameters() const {
  ad::ParameterList out;
  for (ParameterGroup g : {ParameterGroup::Frozen, ParameterGroup::Upstream, ParameterGroup::Shared,
                           ParameterGroup::OriginalHead, ParameterGroup::UntiedHead}) {
    ad::ParameterList part = parameter_group(g);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

nlohmann::json SgtrModel::config_json() const {
  return {{"family", to_string(family())}, {"seed", seed_}, {"sgtr", pair_.original.config.to_json()}};
}

nlohmann::json SgtrModel::state_json() const { return {{"detector_pretrained", pair_.original.detector.pretrained}}; }

void SgtrModel::load_state_json(const nlohmann::json& state) {
  pair_.original.detector.pretrained = state.value("detector_pretrained", false);
}

void SgtrModel::prepare(const CorpusBundle& bundle, EvalMode mode) {
  if (!supports(mode)) throw UnsupportedModeError(family(), mode);
  MiniSgtr& m = pair_.original;
  if (m.detector.pretrained) return;
  pretrain_detector_stub(m.detector, bundle.corpus.train, m.config.num_object_classes, m.config.stub_epochs,
                         m.config.stub_lr, m.config.stub_max_samples);
}

ad::Tensor SgtrModel::entity_loss(const SgtrForward& forward, const SceneSample& sample) const {
  const SgtrConfig& cfg = pair_.original.config;
  const Eigen::Index n = forward.entity_logits.rows();
  const std::size_t g = sample.entities.size();
  Matrix probs;
  {
    ad::NoGradGuard no_grad;
    probs = ad::softmax_rows(ad::detach(forward.entity_logits)).value();
  }
  const Matrix& boxes = forward.entity_boxes.value();
  Matrix cost(n, Eigen::Index(g));
  std::vector<Matrix> gt_boxes;
  for (const Entity& e : sample.entities) gt_boxes.push_back(to_cxcywh(e.box));
  for (Eigen::Index i = 0; i < n; ++i)
    for (std::size_t j = 0; j < g; ++j)
      cost(i, Eigen::Index(j)) = -probs(i, sample.entities[j].class_id) + l1(&boxes(i, 0), gt_boxes[j]);
  const std::vector<int> assignment = greedy_assignment(cost);

  std::vector<int> labels(std::size_t(n), cfg.num_object_classes);
  std::vector<double> weights(std::size_t(n), cfg.no_object_weight);
  std::vector<double> box_weights(std::size_t(n), 0.0);
  Matrix box_target = Matrix::Zero(n, 4);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int j = assignment[std::size_t(i)];
    if (j < 0) continue;
    labels[std::size_t(i)] = sample.entities[std::size_t(j)].class_id;
    weights[std::size_t(i)] = 1.0;
    box_weights[std::size_t(i)] = 1.0;
    box_target.row(i) = gt_boxes[std::size_t(j)];
  }
  return ad::add(ad::cross_entropy(forward.entity_logits, labels, weights),
                 ad::scale(ad::l1_rows(forward.entity_boxes, box_target, box_weights), cfg.box_weight));
}

ad::Tensor SgtrModel::layer_loss(const SgtrLayerPrediction& layer, const SceneSample& sample,
                                 std::vector<int>* assignment_out) const {
  const SgtrConfig& cfg = pair_.original.config;
  const Eigen::Index n = layer.relation_logits.rows();
  const std::size_t g = sample.relations.size();

  struct GtTriplet {
    int subject_class, object_class, predicate;
    Matrix boxes;  // 1 x 8
  };
  std::vector<GtTriplet> gt;
  for (const RelationTriplet& r : sample.relations) {
    const Entity& s = sample.entities[std::size_t(sample.entity_index(r.subject_id))];
    const Entity& o = sample.entities[std::size_t(sample.entity_index(r.object_id))];
    Matrix b(1, 8);
    b << to_cxcywh(s.box), to_cxcywh(o.box);
    gt.push_back({s.class_id, o.class_id, r.predicate_id, std::move(b)});
  }

  Matrix p_rel, p_sub, p_obj;
  {
    ad::NoGradGuard no_grad;
    p_rel = ad::softmax_rows(ad::detach(layer.relation_logits)).value();
    p_sub = ad::softmax_rows(ad::detach(layer.subject_logits)).value();
    p_obj = ad::softmax_rows(ad::detach(layer.object_logits)).value();
  }
  const Matrix& boxes = layer.boxes.value();
  Matrix cost(n, Eigen::Index(g));
  for (Eigen::Index i = 0; i < n; ++i)
    for (std::size_t j = 0; j < g; ++j) {
      const GtTriplet& t = gt[j];
      cost(i, Eigen::Index(j)) = -(p_rel(i, t.predicate) + p_sub(i, t.subject_class) + p_obj(i, t.object_class)) +
                                 l1(&boxes(i, 0), t.boxes);
    }
  const std::vector<int> assignment = greedy_assignment(cost);
  if (assignment_out != nullptr) *assignment_out = assignment;

  std::vector<int> rel_labels(std::size_t(n), kBackgroundPredicate);
  std::vector<int> sub_labels(std::size_t(n), cfg.num_object_classes);
  std::vector<int> obj_labels(std::size_t(n), cfg.num_object_classes);
  std::vector<double> weights(std::size_t(n), cfg.no_object_weight);
  std::vector<double> box_weights(std::size_t(n), 0.0);
  Matrix box_target = Matrix::Zero(n, 8);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int j = assignment[std::size_t(i)];
    if (j < 0) continue;
    const GtTriplet& t = gt[std::size_t(j)];
    rel_labels[std::size_t(i)] = t.predicate;
    sub_labels[std::size_t(i)] = t.subject_class;
    obj_labels[std::size_t(i)] = t.object_class;
    weights[std::size_t(i)] = 1.0;
    box_weights[std::size_t(i)] = 1.0;
    box_target.row(i) = t.boxes;
  }
  const ad::Tensor parts[] = {ad::cross_entropy(layer.relation_logits, rel_labels, weights),
                              ad::cross_entropy(layer.subject_logits, sub_labels, weights),
                              ad::cross_entropy(layer.object_logits, obj_labels, weights),
                              ad::scale(ad::l1_rows(layer.boxes, box_target, box_weights), cfg.box_weight)};
  return parts[0] + parts[1] + parts[2] + parts[3];
}

LossTerms SgtrModel::losses(const SceneSample& sample, EvalMode mode, StepRandomness& rng) {
  if (!supports(mode)) throw UnsupportedModeError(family(), mode);
  const SgtrForward forward = sgtr_forward_original(pair_.original, sample, &rng.dropout);
  LossTerms terms;
  terms.original = entity_loss(forward, sample);
  std::vector<int> last_assignment;
  for (std::size_t l = 0; l < forward.layers.size(); ++l)
    terms.original = ad::add(terms.original,
                             layer_loss(forward.layers[l], sample,
                                        l + 1 == forward.layers.size() ? &last_assignment : nullptr));

  const AlignConfig& align = pair_.align_cfg;
  if (align.target_mode == TargetMode::Off) return terms;

  // Mirror inputs and targets come from a dropout-free pass so the mirror never sees the dropout stream.
  SgtrForward clean;
  {
    ad::NoGradGuard no_grad;
    clean = sgtr_forward_original(pair_.original, sample, nullptr);
  }
  const SgtrMirrorOutput mirrored = sgtr_forward_mirrored(pair_, clean.image_features, clean.entity_features, rng.mask);
  const std::size_t last = mirrored.query_states.size() - 1;
  const std::size_t first = pair_.original.config.align_all_layers ? 0 : last;

  if (align.target_mode == TargetMode::SelfSupervised) {
    const auto targets = targets_per_layer(pair_.original, clean.image_features, clean.entity_features);
    for (std::size_t l = first; l <= last; ++l) {
      const SgtrMirrorOutput m = sgtr_mirror_heads_at(pair_, mirrored, l);
      const ad::Tensor kl = kl_alignment_loss(targets[l].relation, m.relation_probs) +
                            kl_alignment_loss(targets[l].subject, m.subject_probs) +
                            kl_alignment_loss(targets[l].object, m.object_probs);
      terms.align = terms.align.defined() ? ad::add(terms.align, kl) : kl;
    }
    return terms;
  }

  // Supervised arm: the mirror is trained on the labels the original's last layer was matched to.
  const SgtrConfig& cfg = pair_.original.config;
  const std::size_t n = last_assignment.size();
  std::vector<int> rel(n, kBackgroundPredicate), sub(n, cfg.num_object_classes), obj(n, cfg.num_object_classes);
  std::vector<double> weights(n, cfg.no_object_weight);
  for (std::size_t i = 0; i < n; ++i) {
    const int j = last_assignment[i];
    if (j < 0) continue;
    const RelationTriplet& r = sample.relations[std::size_t(j)];
    rel[i] = r.predicate_id;
    sub[i] = sample.entities[std::size_t(sample.entity_index(r.subject_id))].class_id;
    obj[i] = sample.entities[std::size_t(sample.entity_index(r.object_id))].class_id;
    weights[i] = 1.0;
  }
  for (std::size_t l = first; l <= last; ++l) {
    const SgtrMirrorOutput m = sgtr_mirror_heads_at(pair_, mirrored, l);
    const ad::Tensor ce = supervised_alignment_loss(rel, m.relation_probs, weights) +
                          supervised_alignment_loss(sub, m.subject_probs, weights) +
                          supervised_alignment_loss(obj, m.object_probs, weights);
    terms.align = terms.align.defined() ? ad::add(terms.align, ce) : ce;
  }
  return terms;
}

std::vector<ScoredPair> SgtrModel::predict_pairs(const SceneSample& sample, EvalMode mode) const {
  if (!supports(mode)) throw UnsupportedModeError(family(), mode);
  ad::NoGradGuard no_grad;
  const SgtrConfig& cfg = pair_.original.config;
  const SgtrForward f = sgtr_forward_original(pair_.original, sample, nullptr);
  const SgtrLayerPrediction& last = f.layers.back();

  const Matrix ent_probs = ad::softmax_rows(f.entity_logits).value();
  const Matrix& ent_boxes = f.entity_boxes.value();
  const Matrix rel = ad::softmax_rows(last.relation_logits).value();
  const Matrix sub = ad::softmax_rows(last.subject_logits).value();
  const Matrix obj = ad::softmax_rows(last.object_logits).value();
  const Matrix& q_boxes = last.boxes.value();
  const int c_obj = cfg.num_object_classes;
  const Eigen::Index n_ent = ent_probs.rows();

  std::vector<int> ent_class(static_cast<std::size_t>(n_ent));
  std::vector<double> ent_score(static_cast<std::size_t>(n_ent));
  std::vector<BoundingBox> ent_box(static_cast<std::size_t>(n_ent));
  for (Eigen::Index e = 0; e < n_ent; ++e) {
    Eigen::Index best = 0;
    ent_probs.row(e).head(c_obj).maxCoeff(&best);
    ent_class[std::size_t(e)] = int(best);
    ent_score[std::size_t(e)] = ent_probs(e, best);
    ent_box[std::size_t(e)] = from_cxcywh(&ent_boxes(e, 0));
  }

  auto pick = [&](const Matrix& label, Eigen::Index q, int box_offset, int exclude) {
    int best = -1;
    double best_score = -1.0;
    for (Eigen::Index e = 0; e < n_ent; ++e) {
      if (int(e) == exclude) continue;
      const double agreement = label.row(q).head(c_obj).dot(ent_probs.row(e).head(c_obj));
      double dist = 0.0;
      for (int k = 0; k < 4; ++k) dist += std::abs(q_boxes(q, box_offset + k) - ent_boxes(e, k));
      const double score = agreement * std::exp(-dist);
      if (score > best_score) {
        best_score = score;
        best = int(e);
      }
    }
    return best;
  };

  std::vector<ScoredPair> pairs;
  pairs.reserve(std::size_t(rel.rows()));
  for (Eigen::Index q = 0; q < rel.rows(); ++q) {
    const int s = pick(sub, q, 0, -1);
    const int o = pick(obj, q, 4, s);
    if (s < 0 || o < 0) continue;
    ScoredPair p;
    p.subject_index = s;
    p.object_index = o;
    p.subject_class = ent_class[std::size_t(s)];
    p.object_class = ent_class[std::size_t(o)];
    p.subject_box = ent_box[std::size_t(s)];
    p.object_box = ent_box[std::size_t(o)];
    p.pair_score = ent_score[std::size_t(s)] * ent_score[std::size_t(o)];
    p.predicate_probs.assign(rel.row(q).data(), rel.row(q).data() + rel.cols());
    pairs.push_back(std::move(p));
  }
  return pairs;
}

}  // namespace relalign
