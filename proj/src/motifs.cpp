#include "relalign/motifs.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "relalign/codec.hpp"
#include "relalign/masking.hpp"

namespace relalign {

namespace {

constexpr std::uint64_t kInitStream = 0x4d4f'5449'0001ULL;
constexpr std::uint64_t kMirrorHeadStream = 0x4d4f'5449'0002ULL;
constexpr std::uint64_t kStubStream = 0x4d4f'5449'0003ULL;

void geometry(const BoundingBox& b, double* out) {
  out[0] = b.x_min;
  out[1] = b.y_min;
  out[2] = b.x_max;
  out[3] = b.y_max;
  out[4] = b.area();
}

Matrix entity_features(const FeatureGrid& grid, const std::vector<BoundingBox>& boxes) {
  Matrix m(Eigen::Index(boxes.size()), grid.channels + kBoxGeometryWidth);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const Eigen::Index r = Eigen::Index(i);
    m.row(r).head(grid.channels) = grid.region_mean(boxes[i]).transpose();
    geometry(boxes[i], &m(r, grid.channels));
  }
  return m;
}

Matrix pair_geometry_features(const FeatureGrid& grid, const std::vector<BoundingBox>& boxes,
                              const std::vector<std::pair<int, int>>& pairs) {
  const int c = grid.channels;
  Matrix m(Eigen::Index(pairs.size()), c + 2 * kBoxGeometryWidth);
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const Eigen::Index r = Eigen::Index(p);
    const BoundingBox& s = boxes[std::size_t(pairs[p].first)];
    const BoundingBox& o = boxes[std::size_t(pairs[p].second)];
    m.row(r).head(c) = grid.region_mean(union_box(s, o)).transpose();
    geometry(s, &m(r, c));
    geometry(o, &m(r, c + kBoxGeometryWidth));
  }
  return m;
}

ad::Tensor mask_rows(const ad::Tensor& x, double p, Rng& rng) {
  const std::vector<bool> mask = draw_row_mask(x.rows(), p, rng);
  if (std::none_of(mask.begin(), mask.end(), [](bool m) { return m; })) return x;
  std::vector<double> keep(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) keep[i] = mask[i] ? 0.0 : 1.0;
  return ad::scale_rows(x, keep);
}

}  // namespace

MotifsConfig MotifsConfig::for_corpus(const CorpusSpec& spec) {
  MotifsConfig c;
  c.channels = spec.channels;
  c.num_object_classes = spec.num_object_classes;
  c.num_predicates = spec.num_predicates;
  return c;
}

void MotifsConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("MotifsConfig: ") + what);
  };
  need(channels > 0, "channels must be positive");
  need(num_object_classes >= 1 && num_predicates >= 2, "class counts");
  need(hidden > 0 && label_embedding > 0 && pair_width > 0 && relation_width > 0 && mlp_hidden > 0,
       "widths must be positive");
  need(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0,1)");
  need(stub_epochs >= 0 && stub_lr > 0.0 && stub_max_samples >= 1, "stub training settings");
}

nlohmann::json MotifsConfig::to_json() const {
  return {{"channels", channels},
          {"num_object_classes", num_object_classes},
          {"num_predicates", num_predicates},
          {"hidden", hidden},
          {"label_embedding", label_embedding},
          {"pair_width", pair_width},
          {"relation_width", relation_width},
          {"mlp_hidden", mlp_hidden},
          {"dropout", dropout},
          {"stub_epochs", stub_epochs},
          {"stub_lr", stub_lr},
          {"stub_max_samples", stub_max_samples}};
}

MotifsConfig MotifsConfig::from_json(const nlohmann::json& j) {
  MotifsConfig c;
  c.channels = j.value("channels", c.channels);
  c.num_object_classes = j.value("num_object_classes", c.num_object_classes);
  c.num_predicates = j.value("num_predicates", c.num_predicates);
  c.hidden = j.value("hidden", c.hidden);
  c.label_embedding = j.value("label_embedding", c.label_embedding);
  c.pair_width = j.value("pair_width", c.pair_width);
  c.relation_width = j.value("relation_width", c.relation_width);
  c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
  c.dropout = j.value("dropout", c.dropout);
  c.stub_epochs = j.value("stub_epochs", c.stub_epochs);
  c.stub_lr = j.value("stub_lr", c.stub_lr);
  c.stub_max_samples = j.value("stub_max_samples", c.stub_max_samples);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Model

MiniMotifs::MiniMotifs(const MotifsConfig& cfg, Rng& rng) : config(cfg) {
  cfg.validate();
  const int entity_width = cfg.channels + kBoxGeometryWidth;
  Rng stub_rng = rng.split(kStubStream);
  stub.classifier = nn::Linear(cfg.channels, cfg.num_object_classes + 1, stub_rng);
  object_context = nn::BiLstm(entity_width, cfg.hidden, rng);
  object_classifier = nn::Linear(2 * cfg.hidden, cfg.num_object_classes, rng);
  label_embedding = ad::Tensor::parameter(nn::uniform_matrix(cfg.num_object_classes, cfg.label_embedding, 1.0, rng));
  relation_feature = nn::Linear(cfg.channels + 2 * kBoxGeometryWidth, cfg.relation_width, rng);
  edge_context = nn::BiLstm(edge_input_width(), cfg.hidden, rng);
  post_emb = nn::Linear(2 * cfg.hidden, 2 * cfg.pair_width, rng);
  post_cat = nn::Linear(2 * cfg.pair_width, cfg.relation_width, rng);
  rel_compress = nn::Linear(cfg.relation_width, cfg.num_predicates, rng);
  log_prior = Matrix::Zero(Eigen::Index(cfg.num_object_classes) * cfg.num_object_classes, cfg.num_predicates);
}

int MiniMotifs::edge_input_width() const {
  return config.channels + kBoxGeometryWidth + 2 * config.hidden + config.label_embedding;
}

void MiniMotifs::set_prior(const PredicatePrior& prior) {
  if (prior.num_object_classes != config.num_object_classes || prior.num_predicates != config.num_predicates)
    throw std::invalid_argument("predicate prior does not match the model's class counts");
  for (int s = 0; s < prior.num_object_classes; ++s)
    for (int o = 0; o < prior.num_object_classes; ++o)
      for (int k = 0; k < prior.num_predicates; ++k)
        log_prior(Eigen::Index(s) * config.num_object_classes + o, k) =
            std::log(std::max(prior.at(s, o, k), kProbabilityFloor));
}

MotifsPair make_motifs_pair(const MotifsConfig& config, const AlignConfig& align, const MaskConfig& mask,
                            std::uint64_t seed) {
  align.validate();
  mask.validate();
  Rng init(seed, kInitStream);
  Rng head_rng(seed, kMirrorHeadStream);
  MotifsPair pair;
  pair.original = MiniMotifs(config, init);
  pair.mask_cfg = mask;
  pair.align_cfg = align;
  pair.mirrored.edge_context = pair.original.edge_context;
  pair.mirrored.post_emb = pair.original.post_emb;
  pair.mirrored.head_mode = align.head_mode;
  // Always drawn so the init stream of the rest of the model is the same in both head modes.
  nn::Mlp untied({2 * config.pair_width + config.relation_width, config.mlp_hidden, config.mlp_hidden,
                  config.num_predicates},
                 head_rng);
  if (align.head_mode == HeadMode::Untied) {
    pair.mirrored.untied_head = std::move(untied);
  } else {
    pair.mirrored.post_cat = pair.original.post_cat;
    pair.mirrored.rel_compress = pair.original.rel_compress;
  }
  return pair;
}

MotifsEntities motifs_entities(const MiniMotifs& model, const SceneSample& sample, EvalMode mode) {
  MotifsEntities out;
  std::vector<BoundingBox> boxes;
  std::vector<int> gt_entity;
  std::vector<double> scores;
  if (mode == EvalMode::SgDet) {
    if (!model.stub.pretrained) throw ConfigurationError("sgdet requires a pre-trained detector stub");
    for (const auto& p : model.stub.propose(sample.feature_grid)) {
      boxes.push_back(p.box);
      scores.push_back(*std::max_element(p.class_probs.begin(), p.class_probs.end()));
      int best = -1;
      double best_iou = kDefaultIouThreshold;
      for (std::size_t g = 0; g < sample.entities.size(); ++g) {
        const double v = iou(p.box, sample.entities[g].box);
        if (v >= best_iou) {
          best_iou = v;
          best = int(g);
        }
      }
      gt_entity.push_back(best);
    }
  } else {
    for (std::size_t g = 0; g < sample.entities.size(); ++g) {
      boxes.push_back(sample.entities[g].box);
      gt_entity.push_back(int(g));
    }
  }
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return boxes[std::size_t(a)].x_min + boxes[std::size_t(a)].x_max <
           boxes[std::size_t(b)].x_min + boxes[std::size_t(b)].x_max;
  });
  for (int i : order) {
    out.boxes.push_back(boxes[std::size_t(i)]);
    out.source_index.push_back(i);
    const int g = gt_entity[std::size_t(i)];
    out.gt_entity.push_back(g);
    out.gt_labels.push_back(g >= 0 ? sample.entities[std::size_t(g)].class_id : -1);
    if (!scores.empty()) out.stub_scores.push_back(scores[std::size_t(i)]);
  }
  return out;
}

MotifsForward motifs_forward_original(const MiniMotifs& model, const SceneSample& sample, EvalMode mode,
                                      Rng* dropout_rng) {
  const MotifsConfig& cfg = model.config;
  const nn::Dropout dropout{cfg.dropout, dropout_rng};
  MotifsForward f;
  f.entities = motifs_entities(model, sample, mode);
  const int n = int(f.entities.boxes.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i != j) f.pairs.emplace_back(i, j);
  if (n == 0) return f;

  const ad::Tensor features = ad::Tensor::constant(entity_features(sample.feature_grid, f.entities.boxes));
  const ad::Tensor obj_ctx = model.object_context(features);
  f.object_logits = model.object_classifier(obj_ctx);
  if (mode == EvalMode::PredCls) {
    f.object_labels = f.entities.gt_labels;
  } else {
    const Matrix& logits = f.object_logits.value();
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      Eigen::Index best = 0;
      logits.row(i).maxCoeff(&best);
      f.object_labels.push_back(int(best));
    }
  }
  const ad::Tensor edge_parts[] = {features, obj_ctx, ad::gather_rows(model.label_embedding, f.object_labels)};
  f.edge_input = ad::concat_cols(edge_parts);
  if (f.pairs.empty()) return f;

  const ad::Tensor edge_ctx = dropout(model.edge_context(f.edge_input));
  const ad::Tensor reps = model.post_emb(edge_ctx);
  std::vector<int> subjects, objects;
  for (const auto& [s, o] : f.pairs) subjects.push_back(s), objects.push_back(o);
  const ad::Tensor pair_parts[] = {ad::gather_rows(ad::slice_cols(reps, 0, cfg.pair_width), subjects),
                                   ad::gather_rows(ad::slice_cols(reps, cfg.pair_width, cfg.pair_width), objects)};
  f.pair_representation = ad::concat_cols(pair_parts);
  f.relation_features = ad::relu(model.relation_feature(
      ad::Tensor::constant(pair_geometry_features(sample.feature_grid, f.entities.boxes, f.pairs))));

  const ad::Tensor fused = ad::mul(model.post_cat(f.pair_representation), dropout(f.relation_features));
  Matrix bias(Eigen::Index(f.pairs.size()), cfg.num_predicates);
  for (std::size_t p = 0; p < f.pairs.size(); ++p) {
    const int s = f.object_labels[std::size_t(f.pairs[p].first)];
    const int o = f.object_labels[std::size_t(f.pairs[p].second)];
    bias.row(Eigen::Index(p)) = model.log_prior.row(Eigen::Index(s) * cfg.num_object_classes + o);
  }
  f.relation_logits = ad::add_const(model.rel_compress(fused), bias);
  f.relation_probs = ad::softmax_rows(f.relation_logits);
  return f;
}

MotifsMirrorOutput motifs_forward_mirrored(MotifsPair& pair, const MotifsForward& original, Rng& rng) {
  ++pair.mirrored_calls;
  const MotifsConfig& cfg = pair.original.config;
  MotifsMirrorOutput out;
  if (original.pairs.empty()) return out;
  const MotifsMirror& m = pair.mirrored;
  out.edge_input = mask_rows(ad::detach(original.edge_input), pair.mask_cfg.p, rng);
  out.relation_features = mask_rows(ad::detach(original.relation_features), pair.mask_cfg.p, rng);

  const ad::Tensor reps = m.post_emb(m.edge_context(out.edge_input));
  std::vector<int> subjects, objects;
  for (const auto& [s, o] : original.pairs) subjects.push_back(s), objects.push_back(o);
  const ad::Tensor pair_parts[] = {ad::gather_rows(ad::slice_cols(reps, 0, cfg.pair_width), subjects),
                                   ad::gather_rows(ad::slice_cols(reps, cfg.pair_width, cfg.pair_width), objects)};
  out.pair_representation = ad::concat_cols(pair_parts);

  ad::Tensor logits;
  if (m.head_mode == HeadMode::Untied) {
    const ad::Tensor head_in[] = {out.pair_representation, out.relation_features};
    logits = m.untied_head(ad::concat_cols(head_in));
  } else {
    logits = m.rel_compress(ad::mul(m.post_cat(out.pair_representation), out.relation_features));
  }
  out.relation_probs = ad::softmax_rows(logits);
  return out;
}

MotifsMirrorOutput motifs_forward_mirrored(MotifsPair& pair, const SceneSample& sample, EvalMode mode, Rng& rng) {
  const MotifsForward f = motifs_forward_original(pair.original, sample, mode, nullptr);
  return motifs_forward_mirrored(pair, f, rng);
}

// ---------------------------------------------------------------------------
// MotifsModel

MotifsModel::MotifsModel(const MotifsConfig& config, const AlignConfig& align, const MaskConfig& mask,
                         std::uint64_t seed)
    : pair_(make_motifs_pair(config, align, mask, seed)), seed_(seed) {
  // The prior pushes background towards log(eps); start the background logit level with it.
  pair_.original.rel_compress.bias.mutable_value()(0, kBackgroundPredicate) = -std::log(kPriorSmoothing) + 2.0;
}

ad::ParameterList MotifsModel::parameter_group(ParameterGroup group) const {
  const MiniMotifs& m = pair_.original;
  ad::ParameterList out;
  switch (group) {
    case ParameterGroup::Upstream:
      m.object_context.collect(out, "motifs.object_context");
      m.object_classifier.collect(out, "motifs.object_classifier");
      out.push_back({"motifs.label_embedding", m.label_embedding});
      m.relation_feature.collect(out, "motifs.relation_feature");
      break;
    case ParameterGroup::Shared:
      m.edge_context.collect(out, "motifs.edge_context");
      m.post_emb.collect(out, "motifs.post_emb");
      break;
    case ParameterGroup::OriginalHead:
      m.post_cat.collect(out, "motifs.post_cat");
      m.rel_compress.collect(out, "motifs.rel_compress");
      break;
    case ParameterGroup::UntiedHead:
      if (pair_.mirrored.head_mode == HeadMode::Untied) pair_.mirrored.untied_head.collect(out, "mirror.mlp");
      break;
    case ParameterGroup::Frozen: m.stub.classifier.collect(out, "motifs.stub"); break;
  }
  return out;
}

ad::ParameterList MotifsModel::parameters() const {
  ad::ParameterList out;
  for (ParameterGroup g : {ParameterGroup::Frozen, ParameterGroup::Upstream, ParameterGroup::Shared,
                           ParameterGroup::OriginalHead, ParameterGroup::UntiedHead}) {
    ad::ParameterList part = parameter_group(g);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

nlohmann::json MotifsModel::config_json() const {
  return {{"family", to_string(family())},
          {"seed", seed_},
          {"motifs", pair_.original.config.to_json()},
          {"stub_pretrained", pair_.original.stub.pretrained}};
}

nlohmann::json MotifsModel::state_json() const {
  return {{"log_prior", matrix_to_json(pair_.original.log_prior)}, {"stub_pretrained", pair_.original.stub.pretrained}};
}

void MotifsModel::load_state_json(const nlohmann::json& state) {
  Matrix prior = matrix_from_json(state.at("log_prior"));
  if (prior.rows() != pair_.original.log_prior.rows() || prior.cols() != pair_.original.log_prior.cols())
    throw DataError("checkpoint prior has the wrong shape");
  pair_.original.log_prior = std::move(prior);
  pair_.original.stub.pretrained = state.value("stub_pretrained", false);
}

void MotifsModel::prepare(const CorpusBundle& bundle, EvalMode mode) {
  set_prior(bundle.prior);
  if (mode == EvalMode::SgDet && !pair_.original.stub.pretrained) {
    const MotifsConfig& cfg = pair_.original.config;
    pretrain_detector_stub(pair_.original.stub, bundle.corpus.train, cfg.num_object_classes, cfg.stub_epochs,
                           cfg.stub_lr, cfg.stub_max_samples);
  }
}

std::vector<int> MotifsModel::pair_labels(const MotifsForward& f, const SceneSample& sample) const {
  std::vector<int> labels(f.pairs.size(), kBackgroundPredicate);
  for (std::size_t p = 0; p < f.pairs.size(); ++p) {
    const int gs = f.entities.gt_entity[std::size_t(f.pairs[p].first)];
    const int go = f.entities.gt_entity[std::size_t(f.pairs[p].second)];
    if (gs < 0 || go < 0) continue;
    const int sid = sample.entities[std::size_t(gs)].instance_id;
    const int oid = sample.entities[std::size_t(go)].instance_id;
    for (const RelationTriplet& r : sample.relations)
      if (r.subject_id == sid && r.object_id == oid) labels[p] = r.predicate_id;
  }
  return labels;
}

LossTerms MotifsModel::losses(const SceneSample& sample, EvalMode mode, StepRandomness& rng) {
  const MotifsForward f = motifs_forward_original(pair_.original, sample, mode, &rng.dropout);
  LossTerms terms;
  const std::vector<int> labels = pair_labels(f, sample);
  terms.original = f.pairs.empty() ? ad::Tensor::scalar(0.0) : ad::cross_entropy(f.relation_logits, labels);
  if (mode != EvalMode::PredCls && f.object_logits.defined()) {
    std::vector<int> obj_labels;
    std::vector<double> weights;
    for (int l : f.entities.gt_labels) {
      obj_labels.push_back(std::max(l, 0));
      weights.push_back(l >= 0 ? 1.0 : 0.0);
    }
    if (std::any_of(weights.begin(), weights.end(), [](double w) { return w > 0.0; }))
      terms.original = ad::add(terms.original, ad::cross_entropy(f.object_logits, obj_labels, weights));
  }

  const AlignConfig& align = pair_.align_cfg;
  if (align.target_mode == TargetMode::Off || f.pairs.empty()) return terms;
  const MotifsMirrorOutput m = motifs_forward_mirrored(pair_, f, rng.mask);
  if (align.target_mode == TargetMode::SelfSupervised) {
    // The original runs with dropout; the target is a dropout-free pass over the same inputs.
    AlignTarget target;
    {
      ad::NoGradGuard no_grad;
      target = AlignTarget::from_probabilities(motifs_forward_original(pair_.original, sample, mode, nullptr)
                                                   .relation_probs);
    }
    terms.align = kl_alignment_loss(target, m.relation_probs);
  } else {
    terms.align = supervised_alignment_loss(labels, m.relation_probs);
  }
  return terms;
}

std::vector<ScoredPair> MotifsModel::predict_pairs(const SceneSample& sample, EvalMode mode) const {
  ad::NoGradGuard no_grad;
  const MotifsForward f = motifs_forward_original(pair_.original, sample, mode, nullptr);
  std::vector<double> entity_score(f.entities.boxes.size(), 1.0);
  if (mode != EvalMode::PredCls && f.object_logits.defined()) {
    const Matrix probs = ad::softmax_rows(f.object_logits).value();
    for (std::size_t i = 0; i < entity_score.size(); ++i)
      entity_score[i] = probs(Eigen::Index(i), f.object_labels[i]);
  }
  std::vector<ScoredPair> out;
  if (f.pairs.empty()) return out;
  const Matrix& probs = f.relation_probs.value();
  for (std::size_t p = 0; p < f.pairs.size(); ++p) {
    const auto [s, o] = f.pairs[p];
    ScoredPair sp;
    sp.subject_index = f.entities.source_index[std::size_t(s)];
    sp.object_index = f.entities.source_index[std::size_t(o)];
    sp.subject_class = f.object_labels[std::size_t(s)];
    sp.object_class = f.object_labels[std::size_t(o)];
    sp.subject_box = f.entities.boxes[std::size_t(s)];
    sp.object_box = f.entities.boxes[std::size_t(o)];
    sp.pair_score = entity_score[std::size_t(s)] * entity_score[std::size_t(o)];
    sp.predicate_probs.assign(probs.row(Eigen::Index(p)).data(),
                              probs.row(Eigen::Index(p)).data() + probs.cols());
    out.push_back(std::move(sp));
  }
  return out;
}

}  // namespace relalign
