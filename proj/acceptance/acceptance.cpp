// Acceptance suite: one PASS/FAIL line per criterion.
//
//   relalign_acceptance                 criteria 1-9
//   relalign_acceptance --criteria 10,11 --out DIR
//
// Criterion 10 is soft: a violated direction prints WARN and does not fail
// the run.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "../tests/metrics_oracle.hpp"
#include "../tests/test_util.hpp"
#include "relalign/harness.hpp"
#include "relalign/motifs.hpp"
#include "relalign/sgtr.hpp"

using namespace relalign;

namespace {

enum class Status { Pass, Fail, Warn };

struct Outcome {
  Status status = Status::Pass;
  std::string detail;
};

struct Check {
  bool ok = true;
  std::vector<std::string> failures;

  void require(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      if (failures.size() < 5) failures.push_back(what);
    }
  }
  Outcome outcome(const std::string& summary) const {
    if (ok) return {Status::Pass, summary};
    std::string d = summary;
    for (const auto& f : failures) d += "; " + f;
    return {Status::Fail, d};
  }
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

// ---------------------------------------------------------------------------
// Micro instances

CorpusSpec micro_spec() {
  CorpusSpec s;
  s.n_train = 40;
  s.n_val = 10;
  s.n_test = 10;
  s.num_object_classes = 3;
  s.num_predicates = 4;
  s.height = 8;
  s.width = 8;
  s.channels = 4;
  s.max_entities = 3;
  s.seed = 21;
  return s;
}

const CorpusBundle& micro_bundle() {
  static const CorpusBundle b = make_bundle(micro_spec());
  return b;
}

SgtrConfig micro_sgtr_config(double dropout) {
  SgtrConfig c = SgtrConfig::for_corpus(micro_spec());
  c.d_model = 2;
  c.heads = 2;
  c.ff_hidden = 2;
  c.encoder_layers = 0;
  c.entity_layers = 1;
  c.decoder_layers = 2;
  c.num_entity_queries = 2;
  c.num_predicate_queries = 2;
  c.dropout = dropout;
  c.stub_epochs = 80;
  return c;
}

MotifsConfig micro_motifs_config(double dropout) {
  MotifsConfig c = MotifsConfig::for_corpus(micro_spec());
  c.hidden = 2;
  c.label_embedding = 2;
  c.pair_width = 2;
  c.relation_width = 2;
  c.mlp_hidden = 2;
  c.dropout = dropout;
  c.stub_epochs = 80;
  return c;
}

struct Family {
  std::string name;
  EvalMode mode;
  std::function<std::unique_ptr<SceneGraphModel>(const AlignConfig&, const MaskConfig&, double dropout)> make;
};

std::vector<Family> families() {
  return {{"mini-sgtr", EvalMode::SgDet,
           [](const AlignConfig& a, const MaskConfig& m, double dropout) -> std::unique_ptr<SceneGraphModel> {
             auto model = std::make_unique<SgtrModel>(micro_sgtr_config(dropout), a, m, 0);
             model->prepare(micro_bundle(), EvalMode::SgDet);
             return model;
           }},
          {"mini-motifs", EvalMode::PredCls,
           [](const AlignConfig& a, const MaskConfig& m, double dropout) -> std::unique_ptr<SceneGraphModel> {
             auto model = std::make_unique<MotifsModel>(micro_motifs_config(dropout), a, m, 0);
             model->prepare(micro_bundle(), EvalMode::PredCls);
             return model;
           }}};
}

std::vector<const SceneSample*> micro_batch(std::size_t n, std::size_t offset = 0) {
  std::vector<const SceneSample*> out;
  for (const SceneSample& s : micro_bundle().corpus.train) {
    if (s.relations.empty() || s.entities.size() < 2) continue;
    if (offset > 0) {
      --offset;
      continue;
    }
    out.push_back(&s);
    if (out.size() == n) break;
  }
  return out;
}

void zero_grads(const SceneGraphModel& m) {
  for (auto p : m.parameters()) p.tensor.zero_grad();
}

bool bitwise_zero_grads(const ad::ParameterList& params) {
  for (const auto& p : params)
    if (p.tensor.has_grad() && (p.tensor.grad().array() != 0.0).any()) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Criteria

Outcome criterion1() {
  Check c;
  MaskConfig cfg;
  cfg.p = 0.1;
  Rng rng(1, 0);
  const std::vector<bool> mask = draw_row_mask(100000, 0.1, rng);
  const double rate = double(std::count(mask.begin(), mask.end(), true)) / double(mask.size());
  c.require(rate >= 0.097 && rate <= 0.103, "row-mask rate " + fmt(rate));

  Rng data(2, 0);
  RelationFeatureBatch batch{relalign::testing::random_matrix(500, 8, data)};
  Rng r0(3, 0), r1(3, 0);
  cfg.p = 0.0;
  c.require(mask_features(batch, cfg, r0).features == batch.features, "p=0 is not the identity");
  cfg.p = 1.0;
  c.require(mask_features(batch, cfg, r1).features.isZero(0.0), "p=1 does not zero every row");
  cfg.p = 0.1;
  Rng r2(4, 0);
  const Matrix masked = mask_features(batch, cfg, r2).features;
  for (Eigen::Index i = 0; i < masked.rows(); ++i)
    c.require(masked.row(i).isZero(0.0) || masked.row(i) == batch.features.row(i), "a row is neither kept nor zeroed");
  return c.outcome("row-mask rate " + fmt(rate, 5) + " over 1e5 draws; p=0 identity, p=1 zero");
}

Outcome criterion2() {
  Check c;
  Rng rng(7, 0);
  auto random_dist = [&](int k, bool sparse) {
    std::vector<double> p(static_cast<std::size_t>(k));
    double sum = 0.0;
    for (auto& v : p) {
      v = sparse && rng.bernoulli(0.3) ? 0.0 : rng.uniform(0.01, 1.0);
      sum += v;
    }
    if (sum == 0.0) p[0] = sum = 1.0;
    for (auto& v : p) v /= sum;
    return p;
  };
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const int rows = rng.between(1, 6), k = rng.between(2, 12);
    std::vector<PredicateDistribution> t, q;
    double expected = 0.0;
    for (int r = 0; r < rows; ++r) {
      t.push_back({random_dist(k, true)});
      q.push_back({random_dist(k, false)});
      double kl = 0.0;
      for (int j = 0; j < k; ++j) {
        const double pj = t.back().probs[std::size_t(j)], qj = q.back().probs[std::size_t(j)];
        if (pj > 0.0) kl += pj * (std::log(pj) - std::log(qj));
      }
      expected += kl / rows;
    }
    worst = std::max(worst, std::abs(kl_alignment_loss(AlignTarget(t), q) - expected));
  }
  c.require(worst <= 1e-10, "closed-form mismatch " + fmt(worst));
  bool self_zero = true, nonneg = true;
  for (int trial = 0; trial < 10000; ++trial) {
    const int k = rng.between(2, 10);
    const std::vector<PredicateDistribution> p = {{random_dist(k, trial % 2 == 0)}};
    const std::vector<PredicateDistribution> q = {{random_dist(k, trial % 3 == 0)}};
    nonneg = nonneg && kl_alignment_loss(AlignTarget(p), q) >= 0.0;
    self_zero = self_zero && std::abs(kl_alignment_loss(AlignTarget(p), p)) <= 1e-15;
  }
  c.require(self_zero, "KL(P||P) != 0");
  c.require(nonneg, "negative KL");
  return c.outcome("max |KL - closed form| " + fmt(worst, 3) + " over 50 pairs; KL(P||P)=0, KL>=0 on 1e4 pairs");
}

Outcome criterion3() {
  Check c;
  std::size_t checked = 0;
  for (const Family& f : families()) {
    for (double p : {0.1, 0.4}) {
      AlignConfig align;
      align.p = p;
      MaskConfig mask;
      mask.p = p;
      const auto model = f.make(align, mask, 0.1);
      for (const SceneSample* s : micro_batch(4)) {
        zero_grads(*model);
        StepRandomness rng{Rng(5, 0), Rng(6, checked)};
        const LossTerms t = model->losses(*s, f.mode, rng);
        ad::scale(t.align, align.lambda_weight).backward();
        // The original heads feed only AlignTarget on this path; the feature
        // extractor and detector sit upstream of both branches.
        c.require(bitwise_zero_grads(model->parameter_group(ParameterGroup::OriginalHead)),
                  f.name + ": alignment gradient reached the original head");
        c.require(bitwise_zero_grads(model->parameter_group(ParameterGroup::Upstream)),
                  f.name + ": alignment gradient reached the feature extractor");
        c.require(bitwise_zero_grads(model->parameter_group(ParameterGroup::Frozen)),
                  f.name + ": alignment gradient reached the detector");
        bool any = false;
        for (const auto& q : model->parameter_group(ParameterGroup::UntiedHead))
          any = any || (q.tensor.has_grad() && (q.tensor.grad().array() != 0.0).any());
        c.require(any, f.name + ": untied head received no alignment gradient");
        ++checked;
      }
    }
  }
  return c.outcome("bitwise-zero alignment gradient on original heads, extractor and detector (" +
                   std::to_string(checked) + " sample checks, both families)");
}

// Alignment term with the stop-gradient quantities (target and mirror
// inputs) frozen at the current parameters, so a finite difference sees the
// same function the analytic gradient differentiates.
std::function<ad::Tensor()> frozen_alignment(SceneGraphModel& model, const SceneSample& sample, Rng mask_rng) {
  if (auto* sgtr = dynamic_cast<SgtrModel*>(&model)) {
    SgtrPair& pair = sgtr->pair();
    ad::Tensor image, entities;
    SgtrAlignTarget target;
    {
      ad::NoGradGuard no_grad;
      const SgtrForward clean = sgtr_forward_original(pair.original, sample, nullptr);
      image = ad::Tensor::constant(clean.image_features.value());
      entities = ad::Tensor::constant(clean.entity_features.value());
      target = sgtr_alignment_target(pair.original, image, entities);
    }
    return [&pair, image, entities, target, mask_rng] {
      Rng rng = mask_rng;
      const SgtrMirrorOutput m = sgtr_forward_mirrored(pair, image, entities, rng);
      return kl_alignment_loss(target.relation, m.relation_probs) + kl_alignment_loss(target.subject, m.subject_probs) +
             kl_alignment_loss(target.object, m.object_probs);
    };
  }
  MotifsPair& pair = dynamic_cast<MotifsModel&>(model).pair();
  MotifsForward clean;
  AlignTarget target;
  {
    ad::NoGradGuard no_grad;
    clean = motifs_forward_original(pair.original, sample, EvalMode::PredCls, nullptr);
    target = AlignTarget::from_probabilities(clean.relation_probs);
  }
  return [&pair, clean, target, mask_rng] {
    Rng rng = mask_rng;
    return kl_alignment_loss(target, motifs_forward_mirrored(pair, clean, rng).relation_probs);
  };
}

Outcome criterion4() {
  Check c;
  std::string summary;
  const double h = 1e-6;
  for (const Family& f : families()) {
    const auto model = f.make(AlignConfig{}, MaskConfig{}, 0.1);
    const AlignConfig align = model->align_config();
    const ad::ParameterList params = model->trainable_parameters();
    const std::size_t count = ad::parameter_count(params);
    c.require(count <= 1000, f.name + " micro instance has " + std::to_string(count) + " parameters");
    const auto batch = micro_batch(2);
    // Move off the L1 kink at initialisation: the stub proposes exact boxes,
    // so fresh entity boxes coincide with their targets.
    Rng jitter(12, 0);
    for (auto p : params)
      p.tensor.mutable_value() += relalign::testing::random_matrix(p.tensor.rows(), p.tensor.cols(), jitter, 0.05);

    // Analytic gradient from the training path.
    zero_grads(*model);
    double real_value = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      StepRandomness rng = step_randomness(3, 4, 0, i);
      const LossTerms t = model->losses(*batch[i], f.mode, rng);
      const ad::Tensor total = combine_losses(t.original, t.align, align);
      real_value += total.item();
      total.backward();
    }
    std::vector<Matrix> analytic;
    for (const auto& p : params) analytic.push_back(p.tensor.grad());

    std::vector<std::function<ad::Tensor()>> frozen;
    for (std::size_t i = 0; i < batch.size(); ++i)
      frozen.push_back(frozen_alignment(*model, *batch[i], step_randomness(3, 4, 0, i).mask));
    AlignConfig off = align;
    off.target_mode = TargetMode::Off;
    auto loss = [&] {
      ad::NoGradGuard no_grad;
      double v = 0.0;
      model->set_align_config(off);
      for (std::size_t i = 0; i < batch.size(); ++i) {
        StepRandomness rng = step_randomness(3, 4, 0, i);
        v += model->losses(*batch[i], f.mode, rng).original.item();
      }
      model->set_align_config(align);
      for (const auto& a : frozen) v += align.lambda_weight * a().item();
      return v;
    };
    const double frozen_value = loss();
    c.require(std::abs(frozen_value - real_value) <= 1e-12 * std::max(1.0, std::abs(real_value)),
              f.name + " frozen loss " + fmt(frozen_value, 17) + " != training loss " + fmt(real_value, 17));

    double worst = 0.0;
    for (std::size_t k = 0; k < params.size(); ++k) {
      ad::Tensor t = params[k].tensor;
      for (Eigen::Index j = 0; j < t.value().size(); ++j) {
        double& x = t.mutable_value().data()[j];
        const double saved = x;
        x = saved + h;
        const double up = loss();
        x = saved - h;
        const double down = loss();
        x = saved;
        const double numeric = (up - down) / (2 * h);
        const double a = analytic[k].data()[j];
        const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
        if (err > worst) worst = err;
        if (err >= 1e-4) c.require(false, f.name + " " + params[k].name + "[" + std::to_string(j) + "] analytic " +
                                              fmt(a, 8) + " numeric " + fmt(numeric, 8));
      }
    }
    summary += f.name + " " + std::to_string(count) + " params, max rel err " + fmt(worst, 3) + "; ";
  }
  return c.outcome(summary + "L_final = L_original + 10 L_align, dropout and masks fixed, stop-gradient targets frozen");
}

Outcome criterion5() {
  Check c;
  std::string summary;
  MaskConfig mask;
  mask.p = 0.0;
  AlignConfig tied;
  tied.p = 0.0;
  tied.head_mode = HeadMode::Tied;
  for (const SceneSample* s : micro_batch(4)) {
    // SGTR
    auto sgtr = families()[0].make(tied, mask, 0.0);
    auto& sp = dynamic_cast<SgtrModel&>(*sgtr).pair();
    {
      ad::NoGradGuard no_grad;
      const SgtrForward f = sgtr_forward_original(sp.original, *s, nullptr);
      Rng rng(1, 0);
      const SgtrMirrorOutput m = sgtr_forward_mirrored(sp, *s, rng);
      double diff = 0.0;
      for (std::size_t l = 0; l < f.layers.size(); ++l)
        diff = std::max(diff, (m.query_states[l].value() - f.layers[l].query_states.value()).cwiseAbs().maxCoeff());
      c.require(diff <= 1e-9, "sgtr pre-head difference " + fmt(diff));
    }
    StepRandomness rng{Rng(1, 0), Rng(2, 0)};
    const double sgtr_align = sgtr->losses(*s, EvalMode::SgDet, rng).align.item();
    c.require(std::abs(sgtr_align) < 1e-9, "sgtr tied L_align " + fmt(sgtr_align));

    // Motifs. The mirror never sees the prior, so the comparison runs with a
    // uniform prior, which leaves the original's distribution unchanged.
    auto motifs = families()[1].make(tied, mask, 0.0);
    auto& mp = dynamic_cast<MotifsModel&>(*motifs).pair();
    {
      ad::NoGradGuard no_grad;
      const MotifsForward f = motifs_forward_original(mp.original, *s, EvalMode::PredCls, nullptr);
      Rng r(1, 0);
      const MotifsMirrorOutput m = motifs_forward_mirrored(mp, f, r);
      const double diff = (m.pair_representation.value() - f.pair_representation.value()).cwiseAbs().maxCoeff();
      c.require(diff <= 1e-9, "motifs pre-head difference " + fmt(diff));
    }
    mp.original.log_prior.setZero();
    StepRandomness mr{Rng(1, 0), Rng(2, 0)};
    const double motifs_align = motifs->losses(*s, EvalMode::PredCls, mr).align.item();
    c.require(std::abs(motifs_align) < 1e-9, "motifs tied L_align " + fmt(motifs_align));
    summary = "last sample: sgtr L_align " + fmt(sgtr_align, 3) + ", motifs L_align (uniform prior) " +
              fmt(motifs_align, 3);
  }
  return c.outcome("pre-head representations equal at p=0 on 4 samples; " + summary);
}

Outcome criterion6() {
  Check c;
  for (const Family& f : families()) {
    const auto batch = micro_batch(4);
    // Joint training: shared tensors stay the same storage.
    const auto joint = f.make(AlignConfig{}, MaskConfig{}, 0.1);
    auto opt = f.mode == EvalMode::SgDet ? std::unique_ptr<Optimizer>(std::make_unique<AdamW>(1e-4))
                                         : std::unique_ptr<Optimizer>(std::make_unique<Sgd>(0.9, 1e-4));
    const double lr = f.mode == EvalMode::SgDet ? 3e-4 : 0.05;
    for (long it = 0; it < 100; ++it) train_step(*joint, *opt, batch, f.mode, lr, 5.0, 0, it);
    if (auto* s = dynamic_cast<SgtrModel*>(joint.get())) {
      const SgtrPair& p = s->pair();
      c.require(p.mirrored.decoder.queries.same_storage(p.original.predicate_decoder.queries), "sgtr queries untied");
      for (std::size_t l = 0; l < p.original.predicate_decoder.layers.size(); ++l) {
        ad::ParameterList a, b;
        p.original.predicate_decoder.layers[l].collect(a, "x");
        p.mirrored.decoder.layers[l].collect(b, "x");
        for (std::size_t i = 0; i < a.size(); ++i)
          c.require(a[i].tensor.same_storage(b[i].tensor) && a[i].tensor.value() == b[i].tensor.value(),
                    "sgtr decoder parameter " + a[i].name + " diverged");
      }
    } else {
      const MotifsPair& p = dynamic_cast<MotifsModel&>(*joint).pair();
      ad::ParameterList a, b;
      p.original.edge_context.collect(a, "x");
      p.original.post_emb.collect(a, "y");
      p.mirrored.edge_context.collect(b, "x");
      p.mirrored.post_emb.collect(b, "y");
      for (std::size_t i = 0; i < a.size(); ++i)
        c.require(a[i].tensor.same_storage(b[i].tensor) && a[i].tensor.value() == b[i].tensor.value(),
                  "motifs parameter " + a[i].name + " diverged");
    }

    // Original-loss-only training leaves the untied head untouched.
    AlignConfig off;
    off.target_mode = TargetMode::Off;
    const auto solo = f.make(off, MaskConfig{}, 0.1);
    std::vector<Matrix> before;
    for (const auto& p : solo->parameter_group(ParameterGroup::UntiedHead)) before.push_back(p.tensor.value());
    auto opt2 = f.mode == EvalMode::SgDet ? std::unique_ptr<Optimizer>(std::make_unique<AdamW>(1e-4))
                                          : std::unique_ptr<Optimizer>(std::make_unique<Sgd>(0.9, 1e-4));
    for (long it = 0; it < 100; ++it) train_step(*solo, *opt2, batch, f.mode, lr, 5.0, 0, it);
    const auto after = solo->parameter_group(ParameterGroup::UntiedHead);
    c.require(!after.empty(), f.name + " has no untied head");
    for (std::size_t i = 0; i < after.size(); ++i)
      c.require(after[i].tensor.value() == before[i], f.name + " untied head moved: " + after[i].name);
  }

  // Prior exclusion: perturbing the prior leaves the mirror bit-identical.
  const auto motifs = families()[1].make(AlignConfig{}, MaskConfig{}, 0.1);
  auto& mp = dynamic_cast<MotifsModel&>(*motifs).pair();
  for (const SceneSample* s : micro_batch(4)) {
    ad::NoGradGuard no_grad;
    const Matrix saved = mp.original.log_prior;
    Rng r1(9, 0), r2(9, 0);
    const Matrix a = motifs_forward_mirrored(mp, *s, EvalMode::PredCls, r1).relation_probs.value();
    Rng noise(10, 0);
    mp.original.log_prior += relalign::testing::random_matrix(saved.rows(), saved.cols(), noise);
    const Matrix b = motifs_forward_mirrored(mp, *s, EvalMode::PredCls, r2).relation_probs.value();
    c.require(a == b, "prior perturbation changed the mirrored output");
    mp.original.log_prior = saved;
  }
  return c.outcome("100 steps per family: shared storage and values identical, untied heads untouched by "
                   "original-only training, mirror bit-identical under prior perturbation");
}

Outcome criterion7() {
  Check c;
  double worst = 0.0;
  for (const Family& f : families()) {
    AlignConfig off;
    off.target_mode = TargetMode::Off;
    AlignConfig zero;
    zero.lambda_weight = 0.0;
    const auto a = f.make(off, MaskConfig{}, 0.1);
    const auto b = f.make(zero, MaskConfig{}, 0.1);
    auto make_opt = [&]() -> std::unique_ptr<Optimizer> {
      if (f.mode == EvalMode::SgDet) return std::make_unique<AdamW>(1e-4);
      return std::make_unique<Sgd>(0.9, 1e-4);
    };
    auto oa = make_opt(), ob = make_opt();
    const double lr = f.mode == EvalMode::SgDet ? 3e-4 : 0.05;
    const auto train = micro_bundle().corpus.train;
    std::set<std::string> untied;
    for (const auto& p : b->parameter_group(ParameterGroup::UntiedHead)) untied.insert(p.name);
    for (long it = 0; it < 200; ++it) {
      std::vector<const SceneSample*> batch;
      for (std::size_t i : batch_indices(train.size(), 4, 0, it)) batch.push_back(&train[i]);
      const double step_lr = cosine_lr(lr, it, 200);
      train_step(*a, *oa, batch, f.mode, step_lr, 5.0, 0, it);
      train_step(*b, *ob, batch, f.mode, step_lr, 5.0, 0, it);
      const auto pa = a->parameters(), pb = b->parameters();
      for (std::size_t i = 0; i < pb.size(); ++i) {
        if (untied.contains(pb[i].name)) continue;
        c.require(pa[i].name == pb[i].name, "parameter order differs");
        worst = std::max(worst, (pa[i].tensor.value() - pb[i].tensor.value()).cwiseAbs().maxCoeff());
      }
    }
    c.require(worst <= 1e-9, f.name + " trajectories diverged by " + fmt(worst));

    const std::uint64_t calls = b->mirrored_forward_calls();
    const std::vector<int> ks = {20, 50, 100};
    evaluate(*b, micro_bundle().corpus.val, f.mode, ks, micro_bundle().partition);
    c.require(b->mirrored_forward_calls() == calls, f.name + " evaluation ran the mirrored branch");
    c.require(a->mirrored_forward_calls() == 0, f.name + " alignment-off training ran the mirrored branch");
  }
  return c.outcome("off vs lambda=0 over 200 steps, max parameter difference " + fmt(worst, 3) +
                   "; evaluation adds 0 mirrored calls");
}

Outcome criterion8() {
  Check c;
  Rng rng(8, 0);
  std::vector<oracle::MicroCase> cases;
  for (int i = 0; i < 200; ++i) cases.push_back(oracle::micro_case(rng, 3, 6, 5, 8));
  std::vector<SceneSample> split;
  std::map<std::int64_t, const oracle::MicroCase*> by_id;
  for (const auto& mc : cases) {
    split.push_back(mc.scene);
    by_id[mc.scene.sample_id] = &mc;
  }
  c.require(by_id.size() == cases.size(), "duplicate sample ids");
  const Predictor predict = [&](const SceneSample& s) { return by_id.at(s.sample_id)->predictions; };
  const PartitionSpec part{{1}, {2, 3}, {4, 5}};
  const std::vector<int> ks = {1, 2, 3, 5, 8, 20, 50, 100};
  for (EvalMode mode : {EvalMode::PredCls, EvalMode::SgCls, EvalMode::SgDet}) {
    const EvalReport r = evaluate_predictions(split, predict, mode, ks, part, 6);
    const oracle::OracleReport o = oracle::evaluate(cases, mode, ks, part, 6);
    c.require(r.recall_at == o.recall_at, to_string(mode) + " R@K differs from the oracle");
    c.require(r.mean_recall_at == o.mean_recall_at, to_string(mode) + " mR@K differs from the oracle");
    c.require(r.partition_recall == o.partition_recall, to_string(mode) + " partition recall differs");
  }
  return c.outcome("200 micro-scenes x 3 modes x 8 K values equal the exhaustive-matching oracle exactly");
}

Outcome criterion9() {
  Check c;
  const CorpusBundle bundle = make_bundle(CorpusSpec{});
  TrainConfig cfg;
  cfg.model_family = ModelFamily::MiniMotifs;
  cfg.mode = EvalMode::PredCls;
  cfg.batch_size = 8;
  const long total = 2000;
  auto model = make_model(cfg, bundle.spec);
  model->prepare(bundle, cfg.mode);
  auto opt = make_optimizer(cfg);
  const std::span<const SceneSample> subset(bundle.corpus.train.data(), 50);
  const std::vector<int> ks = {50};
  double recall = 0.0;
  long reached = -1;
  for (long it = 0; it < total; ++it) {
    std::vector<const SceneSample*> batch;
    for (std::size_t i : batch_indices(subset.size(), cfg.batch_size, cfg.seed, it)) batch.push_back(&subset[i]);
    train_step(*model, *opt, batch, cfg.mode, cosine_lr(cfg.effective_lr(), it, total), cfg.clip_norm, cfg.seed, it);
    if ((it + 1) % 100 == 0) {
      recall = evaluate(*model, subset, cfg.mode, ks, bundle.partition).recall_at.at(50);
      if (recall >= 0.99) {
        reached = it + 1;
        break;
      }
    }
  }
  c.require(reached > 0, "train R@50 " + fmt(recall) + " after " + std::to_string(total) + " iterations");
  return c.outcome("mini-motifs (SSA+UPH) train PredCls R@50 " + fmt(recall) + " on 50 samples at iteration " +
                   std::to_string(reached));
}

// Criteria 10 and 11 share one run of the full grid.
struct AblationRun {
  std::optional<AblationTable> table;
  AblationGrid grid;
};

AblationRun& ablation(const std::optional<std::string>& out_dir) {
  static AblationRun run;
  if (!run.table) {
    run.grid = builtin_grid("full");
    const CorpusBundle bundle = make_bundle(CorpusSpec{});
    std::optional<std::filesystem::path> dir;
    if (out_dir) dir = *out_dir;
    run.table = run_ablation(run.grid, bundle, dir, [](const std::string& line) { std::cerr << line << std::endl; });
  }
  return run;
}

std::vector<double> val_mr50(const AblationRow& row) {
  std::vector<double> out;
  for (const RunRecord& r : row.runs)
    if (r.error.empty() && r.selected >= 0) out.push_back(r.eval_points[std::size_t(r.selected)].val.mr(50));
  return out;
}

std::string mean_pm(const MeanStd& s) { return fmt(100.0 * s.mean, 3) + " ± " + fmt(100.0 * s.std, 2); }

Outcome criterion10(const std::optional<std::string>& out_dir) {
  AblationRun& run = ablation(out_dir);
  const AblationTable& t = *run.table;
  Check hard;
  std::vector<std::string> warnings;
  std::string summary;
  for (const auto& [family, title] : {std::pair{ModelFamily::MiniSgtr, std::string("SGTR")},
                                      std::pair{ModelFamily::MiniMotifs, std::string("Motifs")}}) {
    const AblationRow* base = t.find("components", title, family);
    const AblationRow* sa = t.find("components", title + " + SA + UPH", family);
    const AblationRow* ph = t.find("components", title + " + SSA + PH", family);
    const AblationRow* ssa = t.find("components", title + " + SSA + UPH", family);
    hard.require(base && sa && ph && ssa, title + " rows missing");
    if (!(base && sa && ph && ssa)) continue;
    for (const AblationRow* r : {base, sa, ph, ssa})
      hard.require(r->failures.empty(), r->cell.label + " failed: " + (r->failures.empty() ? "" : r->failures[0]));
    const MeanStd b = mean_std(val_mr50(*base)), s = mean_std(val_mr50(*sa)), p = mean_std(val_mr50(*ph)),
                  u = mean_std(val_mr50(*ssa));
    hard.require(u.n == 4 && b.n == 4, title + " needs 4 seeds per row");
    summary += title + " val mR@50: base " + mean_pm(b) + ", SA+UPH " + mean_pm(s) + ", SSA+PH " + mean_pm(p) +
               ", SSA+UPH " + mean_pm(u) + "; ";
    if (u.mean < b.mean) warnings.push_back(title + " SSA+UPH < baseline");
    if (u.mean < s.mean) warnings.push_back(title + " SSA+UPH < SA+UPH");
    if (u.mean < p.mean) warnings.push_back(title + " SSA+UPH < SSA+PH");
  }
  if (!hard.ok) return hard.outcome(summary);
  if (warnings.empty()) return {Status::Pass, summary + "all directions hold"};
  std::string d = summary + "soft violations:";
  for (const auto& w : warnings) d += " [" + w + "]";
  return {Status::Warn, d};
}

Outcome criterion11(const std::optional<std::string>& out_dir) {
  AblationRun& run = ablation(out_dir);
  const AblationTable& t = *run.table;
  Check c;
  auto group_rows = [&](const std::string& group) {
    std::vector<const AblationRow*> rows;
    for (const AblationRow& r : t.rows)
      if (r.cell.group == group) rows.push_back(&r);
    return rows;
  };
  const auto ps = group_rows("p_sweep"), ls = group_rows("lambda_sweep");
  c.require(ps.size() == 6 && ls.size() == 6, "sweep groups need 6 rows each");
  if (ps.size() == 6 && ls.size() == 6) {
    c.require(ps[0]->cell.align.target_mode == TargetMode::Off && ls[0]->cell.align.target_mode == TargetMode::Off,
              "first sweep row must be the baseline");
    const double p_values[] = {0.05, 0.1, 0.2, 0.4, 0.6};
    const double l_values[] = {0.1, 1.0, 10.0, 50.0, 100.0};
    for (std::size_t i = 0; i < 5; ++i) {
      c.require(ps[i + 1]->cell.align.p == p_values[i] && ps[i + 1]->cell.align.lambda_weight == 10.0,
                "p-sweep row " + ps[i + 1]->cell.label);
      c.require(ls[i + 1]->cell.align.lambda_weight == l_values[i] && ls[i + 1]->cell.align.p == 0.1,
                "lambda-sweep row " + ls[i + 1]->cell.label);
    }
    for (const auto* r : ps) c.require(r->stat("mR@50").n == 4 && r->stat("mR@100").n == 4, r->cell.label + " n != 4");
    for (const auto* r : ls) c.require(r->stat("mR@50").n == 4 && r->stat("mR@100").n == 4, r->cell.label + " n != 4");
  }
  const std::string text = t.to_text();
  c.require(text.find("[p_sweep]") != std::string::npos && text.find("[lambda_sweep]") != std::string::npos,
            "text table lacks sweep sections");
  c.require(text.find("mR@50") != std::string::npos && text.find(" ± ") != std::string::npos,
            "text table lacks mean ± std columns");
  c.require(t.to_csv().find("mR@100_mean,mR@100_std") != std::string::npos, "csv lacks mean/std columns");
  std::string sample;
  if (ps.size() == 6) sample = "; e.g. " + ps[2]->cell.label + " mR@100 " + mean_pm(ps[2]->stat("mR@100"));
  return c.outcome("p-sweep {0.05,0.1,0.2,0.4,0.6} and lambda-sweep {0.1,1,10,50,100} rows with mean ± std over 4 "
                   "seeds" + sample);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("relalign acceptance suite");
  std::vector<int> selected;
  std::optional<std::string> out_dir;
  app.add_option("--criteria", selected, "criteria to run (default 1-9)")->delimiter(',');
  app.add_option("--out", out_dir, "directory for the ablation outputs of criteria 10-11");
  CLI11_PARSE(app, argc, argv);
  if (selected.empty()) selected = {1, 2, 3, 4, 5, 6, 7, 8, 9};

  struct Entry {
    const char* title;
    double budget_seconds;
    std::function<Outcome()> run;
  };
  const std::map<int, Entry> criteria = {
      {1, {"masking statistics", 5, criterion1}},
      {2, {"KL correctness", 5, criterion2}},
      {3, {"stop-gradient", 30, criterion3}},
      {4, {"finite differences", 120, criterion4}},
      {5, {"p=0 equivalence", 10, criterion5}},
      {6, {"weight tying and head isolation", 60, criterion6}},
      {7, {"baseline identity", 120, criterion7}},
      {8, {"metrics oracle", 60, criterion8}},
      {9, {"overfit sanity", 300, criterion9}},
      {10, {"directional ablation (soft)", 3600, [&] { return criterion10(out_dir); }}},
      {11, {"sweep structure", 3600, [&] { return criterion11(out_dir); }}},
  };

  int failed = 0;
  for (int id : selected) {
    const auto it = criteria.find(id);
    if (it == criteria.end()) {
      std::cout << "FAIL  " << id << " unknown criterion\n";
      ++failed;
      continue;
    }
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = it->second.run();
    } catch (const std::exception& e) {
      o = {Status::Fail, std::string("exception: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    // Criteria 10 and 11 share one grid run; the budget covers the whole grid.
    if (seconds > it->second.budget_seconds && id != 11) {
      o.status = Status::Fail;
      o.detail += "; runtime " + fmt(seconds) + " s exceeds " + fmt(it->second.budget_seconds) + " s";
    }
    const char* tag = o.status == Status::Pass ? "PASS" : o.status == Status::Warn ? "WARN" : "FAIL";
    std::cout << tag << "  " << id << " " << it->second.title << " (" << fmt(seconds, 3) << " s): " << o.detail
              << std::endl;
    failed += o.status == Status::Fail;
  }
  return failed == 0 ? 0 : 1;
}
