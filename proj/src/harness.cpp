#include "relalign/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "relalign/codec.hpp"
#include "relalign/motifs.hpp"
#include "relalign/sgtr.hpp"

namespace relalign {

namespace {

constexpr std::uint64_t kDataStream = 0xda7a'0000ULL;
constexpr std::uint64_t kDropoutStream = 0xd209'0000ULL;
constexpr std::uint64_t kMaskStream = 0x3a5c'0000ULL;

constexpr double kMotifsLr = 0.05;
constexpr double kSgtrLr = 3e-4;
constexpr double kMotifsWeightDecay = 1e-4;
constexpr double kSgtrWeightDecay = 1e-4;

nlohmann::json align_to_json(const AlignConfig& a) {
  return {{"target_mode", to_string(a.target_mode)},
          {"head_mode", to_string(a.head_mode)},
          {"lambda", a.lambda_weight},
          {"p", a.p}};
}

AlignConfig align_from_json(const nlohmann::json& j, AlignConfig a = {}) {
  if (j.contains("target_mode")) a.target_mode = parse_target_mode(j.at("target_mode").get<std::string>());
  if (j.contains("head_mode")) a.head_mode = parse_head_mode(j.at("head_mode").get<std::string>());
  a.lambda_weight = j.value("lambda", a.lambda_weight);
  a.p = j.value("p", a.p);
  a.validate();
  return a;
}

std::string format_number(double v) {
  std::ostringstream out;
  out << v;
  return out.str();
}

std::span<const SceneSample> prefix(const std::vector<SceneSample>& all, int n) {
  if (n <= 0 || std::size_t(n) >= all.size()) return all;
  return std::span<const SceneSample>(all.data(), std::size_t(n));
}

}  // namespace

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::string run_id(const nlohmann::json& cfg) {
  std::ostringstream id;
  const auto& a = cfg.at("align");
  id << cfg.at("model").get<std::string>() << '_' << cfg.at("mode").get<std::string>() << '_'
     << a.at("target_mode").get<std::string>();
  if (a.at("target_mode") != "off")
    id << '_' << a.at("head_mode").get<std::string>() << "_p" << format_number(a.at("p").get<double>()) << "_l"
       << format_number(a.at("lambda").get<double>());
  id << "_s" << cfg.at("seed").get<std::uint64_t>();
  return id.str();
}

// ---------------------------------------------------------------------------
// Optimizers

double cosine_lr(double base_lr, long iteration, long total) {
  if (total <= 0) return base_lr;
  const double t = std::clamp(double(iteration) / double(total), 0.0, 1.0);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

double clip_grad_norm(const ad::ParameterList& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.tensor.has_grad()) sq += p.tensor.node()->grad.squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / norm;
    for (const auto& p : params)
      if (p.tensor.has_grad()) p.tensor.node()->grad *= factor;
  }
  return norm;
}

void Sgd::step(const ad::ParameterList& params, double lr) {
  if (velocity_.empty())
    for (const auto& p : params) velocity_.push_back(Matrix::Zero(p.tensor.rows(), p.tensor.cols()));
  if (velocity_.size() != params.size()) throw std::logic_error("optimizer parameter list changed");
  for (std::size_t i = 0; i < params.size(); ++i) {
    ad::Tensor t = params[i].tensor;
    if (!t.has_grad()) continue;
    Matrix g = t.grad();
    if (weight_decay_ != 0.0) g += weight_decay_ * t.value();
    velocity_[i] = momentum_ * velocity_[i] + g;
    t.mutable_value() -= lr * velocity_[i];
  }
}

void AdamW::step(const ad::ParameterList& params, double lr) {
  if (m_.empty())
    for (const auto& p : params) {
      m_.push_back(Matrix::Zero(p.tensor.rows(), p.tensor.cols()));
      v_.push_back(Matrix::Zero(p.tensor.rows(), p.tensor.cols()));
    }
  if (m_.size() != params.size()) throw std::logic_error("optimizer parameter list changed");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, double(t_));
  const double c2 = 1.0 - std::pow(beta2_, double(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    ad::Tensor t = params[i].tensor;
    if (!t.has_grad()) continue;
    const Matrix g = t.grad();
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
    Matrix& w = t.mutable_value();
    w *= 1.0 - lr * weight_decay_;
    w.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

// ---------------------------------------------------------------------------
// Configuration

double TrainConfig::effective_lr() const {
  if (base_lr > 0.0) return base_lr;
  return model_family == ModelFamily::MiniSgtr ? kSgtrLr : kMotifsLr;
}

double TrainConfig::effective_weight_decay() const {
  if (weight_decay >= 0.0) return weight_decay;
  return model_family == ModelFamily::MiniSgtr ? kSgtrWeightDecay : kMotifsWeightDecay;
}

void TrainConfig::validate() const {
  align_cfg.validate();
  mask_cfg.validate();
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (eval_every < 1) throw std::invalid_argument("eval_every must be >= 1");
  if (total_iterations < eval_every) throw std::invalid_argument("total_iterations must be >= eval_every");
  if (!(clip_norm >= 0.0)) throw std::invalid_argument("clip_norm must be >= 0");
  if (eval_ks.empty() || std::any_of(eval_ks.begin(), eval_ks.end(), [](int k) { return k <= 0; }))
    throw std::invalid_argument("eval_ks must be positive");
  if (model_family == ModelFamily::MiniSgtr && mode != EvalMode::SgDet)
    throw UnsupportedModeError(model_family, mode);
}

nlohmann::json TrainConfig::to_json() const {
  return {{"model", to_string(model_family)},
          {"mode", to_string(mode)},
          {"align", align_to_json(align_cfg)},
          {"mask_seed", mask_cfg.seed},
          {"batch_size", batch_size},
          {"total_iterations", total_iterations},
          {"base_lr", base_lr},
          {"weight_decay", weight_decay},
          {"clip_norm", clip_norm},
          {"seed", seed},
          {"eval_every", eval_every},
          {"eval_ks", eval_ks},
          {"graph_constraint", graph_constraint},
          {"train_subset", train_subset},
          {"val_subset", val_subset},
          {"test_subset", test_subset},
          {"model_overrides", model_overrides},
          {"write_checkpoints", write_checkpoints},
          {"selection_metric", kSelectionMetric}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("model")) c.model_family = parse_model_family(j.at("model").get<std::string>());
  if (j.contains("mode")) c.mode = parse_eval_mode(j.at("mode").get<std::string>());
  if (j.contains("align")) c.align_cfg = align_from_json(j.at("align"));
  c.mask_cfg.seed = j.value("mask_seed", c.mask_cfg.seed);
  c.mask_cfg.p = c.align_cfg.p;
  c.batch_size = j.value("batch_size", c.batch_size);
  c.total_iterations = j.value("total_iterations", c.total_iterations);
  c.base_lr = j.value("base_lr", c.base_lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.seed = j.value("seed", c.seed);
  c.eval_every = j.value("eval_every", c.eval_every);
  if (j.contains("eval_ks")) c.eval_ks = j.at("eval_ks").get<std::vector<int>>();
  c.graph_constraint = j.value("graph_constraint", c.graph_constraint);
  c.train_subset = j.value("train_subset", c.train_subset);
  c.val_subset = j.value("val_subset", c.val_subset);
  c.test_subset = j.value("test_subset", c.test_subset);
  if (j.contains("model_overrides")) c.model_overrides = j.at("model_overrides");
  c.write_checkpoints = j.value("write_checkpoints", c.write_checkpoints);
  c.validate();
  return c;
}

std::unique_ptr<SceneGraphModel> make_model(const TrainConfig& cfg, const CorpusSpec& corpus) {
  MaskConfig mask = cfg.mask_cfg;
  mask.p = cfg.align_cfg.p;
  if (cfg.model_family == ModelFamily::MiniSgtr) {
    nlohmann::json j = SgtrConfig::for_corpus(corpus).to_json();
    j.merge_patch(cfg.model_overrides);
    return std::make_unique<SgtrModel>(SgtrConfig::from_json(j), cfg.align_cfg, mask, cfg.seed);
  }
  nlohmann::json j = MotifsConfig::for_corpus(corpus).to_json();
  j.merge_patch(cfg.model_overrides);
  return std::make_unique<MotifsModel>(MotifsConfig::from_json(j), cfg.align_cfg, mask, cfg.seed);
}

std::unique_ptr<SceneGraphModel> make_model(const nlohmann::json& config_json, const AlignConfig& align,
                                            const MaskConfig& mask) {
  const ModelFamily family = parse_model_family(config_json.at("family").get<std::string>());
  const auto seed = config_json.at("seed").get<std::uint64_t>();
  if (family == ModelFamily::MiniSgtr)
    return std::make_unique<SgtrModel>(SgtrConfig::from_json(config_json.at("sgtr")), align, mask, seed);
  return std::make_unique<MotifsModel>(MotifsConfig::from_json(config_json.at("motifs")), align, mask, seed);
}

std::unique_ptr<Optimizer> make_optimizer(const TrainConfig& cfg) {
  if (cfg.model_family == ModelFamily::MiniSgtr) return std::make_unique<AdamW>(cfg.effective_weight_decay());
  return std::make_unique<Sgd>(0.9, cfg.effective_weight_decay());
}

// ---------------------------------------------------------------------------
// Training

StepRandomness step_randomness(std::uint64_t seed, std::uint64_t mask_seed, long iteration, std::size_t index) {
  const auto it = static_cast<std::uint64_t>(iteration);
  return {Rng(seed, kDropoutStream).split(it).split(index),
          Rng(seed ^ mix64(mask_seed), kMaskStream).split(it).split(index)};
}

std::vector<std::size_t> batch_indices(std::size_t num_samples, int batch_size, std::uint64_t seed, long iteration) {
  if (num_samples == 0) throw std::invalid_argument("batch_indices: empty split");
  std::vector<std::size_t> out;
  const Rng data(seed, kDataStream);
  std::uint64_t epoch = ~std::uint64_t{0};
  std::vector<std::size_t> order;
  for (int b = 0; b < batch_size; ++b) {
    const std::uint64_t position = std::uint64_t(iteration) * std::uint64_t(batch_size) + std::uint64_t(b);
    const std::uint64_t e = position / num_samples;
    if (e != epoch) {
      epoch = e;
      order.resize(num_samples);
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng rng = data.split(e);
      for (std::size_t i = num_samples - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
    }
    out.push_back(order[position % num_samples]);
  }
  return out;
}

LossBreakdown batch_loss(SceneGraphModel& model, std::span<const SceneSample* const> batch, EvalMode mode,
                         std::uint64_t seed, long iteration, bool backward) {
  LossBreakdown out;
  const double scale = 1.0 / double(batch.size());
  const AlignConfig& align = model.align_config();
  for (std::size_t i = 0; i < batch.size(); ++i) {
    StepRandomness rng = step_randomness(seed, model.mask_config().seed, iteration, i);
    const LossTerms terms = model.losses(*batch[i], mode, rng);
    const ad::Tensor total = combine_losses(terms.original, terms.align, align);
    out.l_original += scale * terms.original.item();
    if (terms.align.defined()) out.l_align += scale * terms.align.item();
    out.l_final += scale * total.item();
    if (backward) ad::scale(total, scale).backward();
  }
  return out;
}

LossBreakdown train_step(SceneGraphModel& model, Optimizer& optimizer, std::span<const SceneSample* const> batch,
                         EvalMode mode, double lr, double clip_norm, std::uint64_t seed, long iteration) {
  const ad::ParameterList params = model.trainable_parameters();
  for (ad::NamedParameter p : model.parameters()) p.tensor.zero_grad();
  LossBreakdown out = batch_loss(model, batch, mode, seed, iteration, true);
  if (!std::isfinite(out.l_final)) {
    std::ostringstream msg;
    msg << "non-finite loss at iteration " << iteration << " (l_original=" << out.l_original
        << ", l_align=" << out.l_align << ", lr=" << lr << ")";
    throw std::runtime_error(msg.str());
  }
  out.grad_norm = clip_grad_norm(params, clip_norm);
  optimizer.step(params, lr);
  return out;
}

// ---------------------------------------------------------------------------
// Run records

nlohmann::json RunRecord::to_json(bool include_losses) const {
  nlohmann::json j;
  j["config"] = config;
  j["eval_points"] = nlohmann::json::array();
  for (const EvalPoint& p : eval_points)
    j["eval_points"].push_back({{"iteration", p.iteration}, {"val", p.val.to_json()}, {"checkpoint", p.checkpoint}});
  j["selected"] = selected;
  j["test"] = selected >= 0 ? test.to_json() : nlohmann::json(nullptr);
  j["wall_seconds"] = wall_seconds;
  j["error"] = error;
  if (include_losses) {
    nlohmann::json l = {{"l_original", nlohmann::json::array()},
                        {"l_align", nlohmann::json::array()},
                        {"l_final", nlohmann::json::array()},
                        {"grad_norm", nlohmann::json::array()}};
    for (const LossBreakdown& b : losses) {
      l["l_original"].push_back(b.l_original);
      l["l_align"].push_back(b.l_align);
      l["l_final"].push_back(b.l_final);
      l["grad_norm"].push_back(b.grad_norm);
    }
    j["losses"] = std::move(l);
  }
  return j;
}

RunRecord RunRecord::from_json(const nlohmann::json& j) {
  RunRecord r;
  r.config = j.at("config");
  for (const auto& p : j.at("eval_points"))
    r.eval_points.push_back(
        {p.at("iteration").get<long>(), EvalReport::from_json(p.at("val")), p.value("checkpoint", std::string())});
  r.selected = j.value("selected", -1);
  if (j.contains("test") && !j.at("test").is_null()) r.test = EvalReport::from_json(j.at("test"));
  r.wall_seconds = j.value("wall_seconds", 0.0);
  r.error = j.value("error", std::string());
  if (j.contains("losses")) {
    const auto& l = j.at("losses");
    for (std::size_t i = 0; i < l.at("l_final").size(); ++i)
      r.losses.push_back({l["l_original"][i].get<double>(), l["l_align"][i].get<double>(),
                          l["l_final"][i].get<double>(), l["grad_norm"][i].get<double>()});
  }
  return r;
}

bool RunRecord::same_results(const RunRecord& other) const {
  nlohmann::json a = to_json(), b = other.to_json();
  for (nlohmann::json* j : {&a, &b}) {
    j->erase("wall_seconds");
    for (auto& p : (*j)["eval_points"]) p.erase("checkpoint");
  }
  return a == b;
}

int select_best(std::span<const EvalReport> reports, int k) {
  int best = -1;
  double best_value = -1.0;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const double v = reports[i].mean_recall_at.at(k);
    if (v > best_value) {
      best_value = v;
      best = int(i);
    }
  }
  return best;
}

std::pair<RunRecord, std::unique_ptr<SceneGraphModel>> train_model(const TrainConfig& cfg_in, const CorpusBundle& bundle,
                                                                    const std::optional<std::filesystem::path>& out_dir) {
  const auto start = std::chrono::steady_clock::now();
  TrainConfig cfg = cfg_in;
  cfg.mask_cfg.p = cfg.align_cfg.p;
  if (std::find(cfg.eval_ks.begin(), cfg.eval_ks.end(), TrainConfig::kSelectionK) == cfg.eval_ks.end())
    cfg.eval_ks.push_back(TrainConfig::kSelectionK);
  std::sort(cfg.eval_ks.begin(), cfg.eval_ks.end());
  cfg.validate();

  const std::span<const SceneSample> train = prefix(bundle.corpus.train, cfg.train_subset);
  const std::span<const SceneSample> val = prefix(bundle.corpus.val, cfg.val_subset);
  const std::span<const SceneSample> test = prefix(bundle.corpus.test, cfg.test_subset);
  if (train.empty() || val.empty()) throw std::invalid_argument("training needs non-empty train and val splits");

  std::unique_ptr<SceneGraphModel> model = make_model(cfg, bundle.spec);
  model->prepare(bundle, cfg.mode);
  std::unique_ptr<Optimizer> optimizer = make_optimizer(cfg);

  RunRecord record;
  record.config = cfg.to_json();
  record.config["corpus_spec_hash"] = bundle.spec.hash();
  record.config["partition"] = to_json(bundle.partition);
  record.config["model_config"] = model->config_json();
  record.config["optimizer"] = optimizer->name();
  record.config["effective_lr"] = cfg.effective_lr();

  if (out_dir) std::filesystem::create_directories(*out_dir / "checkpoints");
  std::vector<EvalReport> val_reports;
  std::optional<ParameterSnapshot> best;
  double best_value = -1.0;
  const double base_lr = cfg.effective_lr();
  std::vector<const SceneSample*> batch;
  for (long it = 0; it < cfg.total_iterations; ++it) {
    batch.clear();
    for (std::size_t i : batch_indices(train.size(), cfg.batch_size, cfg.seed, it)) batch.push_back(&train[i]);
    record.losses.push_back(train_step(*model, *optimizer, batch, cfg.mode, cosine_lr(base_lr, it, cfg.total_iterations),
                                       cfg.clip_norm, cfg.seed, it));
    if ((it + 1) % cfg.eval_every != 0 && it + 1 != cfg.total_iterations) continue;
    EvalPoint point;
    point.iteration = it + 1;
    point.val = evaluate(*model, val, cfg.mode, cfg.eval_ks, bundle.partition, cfg.graph_constraint);
    if (out_dir && cfg.write_checkpoints) {
      std::ostringstream name;
      name << "iter_" << std::setw(6) << std::setfill('0') << (it + 1) << ".json";
      const auto path = *out_dir / "checkpoints" / name.str();
      save_checkpoint(path, *model, bundle.spec.hash(), {{"iteration", it + 1}, {"mode", to_string(cfg.mode)}});
      point.checkpoint = path.string();
    }
    const double v = point.val.mr(TrainConfig::kSelectionK);
    if (v > best_value) {
      best_value = v;
      best = ParameterSnapshot::of(*model);
    }
    val_reports.push_back(point.val);
    record.eval_points.push_back(std::move(point));
  }
  record.selected = select_best(val_reports);
  best->restore(*model);
  if (!test.empty()) record.test = evaluate(*model, test, cfg.mode, cfg.eval_ks, bundle.partition, cfg.graph_constraint);
  record.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  if (out_dir) {
    save_checkpoint(*out_dir / "best.json", *model, bundle.spec.hash(),
                    {{"iteration", record.eval_points[std::size_t(record.selected)].iteration},
                     {"mode", to_string(cfg.mode)}});
    write_text(*out_dir / "run.json", record.to_json().dump(2));
    nlohmann::json files = {"run.json", "best.json"};
    for (const EvalPoint& p : record.eval_points)
      if (!p.checkpoint.empty())
        files.push_back(std::filesystem::relative(p.checkpoint, *out_dir).generic_string());
    write_text(*out_dir / "manifest.json",
               nlohmann::json{{"command", "train"},
                              {"run_id", run_id(record.config)},
                              {"config", record.config},
                              {"selected_iteration", record.eval_points[std::size_t(record.selected)].iteration},
                              {"files", files}}
                   .dump(2));
  }
  return {std::move(record), std::move(model)};
}

RunRecord run_training(const TrainConfig& cfg, const CorpusBundle& bundle,
                       const std::optional<std::filesystem::path>& out_dir) {
  return train_model(cfg, bundle, out_dir).first;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const std::filesystem::path& path, const SceneGraphModel& model, const std::string& corpus_hash,
                     const nlohmann::json& extra) {
  nlohmann::json j;
  j["format"] = "relalign-checkpoint";
  j["version"] = kCheckpointVersion;
  j["model"] = model.config_json();
  j["align"] = align_to_json(model.align_config());
  j["mask"] = {{"p", model.mask_config().p}, {"seed", model.mask_config().seed}};
  j["corpus_spec_hash"] = corpus_hash;
  j["state"] = model.state_json();
  j["extra"] = extra;
  nlohmann::json params = nlohmann::json::object();
  for (const auto& p : model.parameters()) params[p.name] = matrix_to_json(p.tensor.value());
  j["parameters"] = std::move(params);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_text(path, j.dump());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path.string() + ": cannot open checkpoint");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  if (j.value("format", std::string()) != "relalign-checkpoint")
    throw DataError(path.string() + ": not a checkpoint file");
  if (j.value("version", 0) != kCheckpointVersion)
    throw DataError(path.string() + ": unsupported checkpoint version " + std::to_string(j.value("version", 0)));
  MaskConfig mask;
  mask.p = j.at("mask").at("p").get<double>();
  mask.seed = j.at("mask").at("seed").get<std::uint64_t>();
  LoadedCheckpoint out;
  out.model = make_model(j.at("model"), align_from_json(j.at("align")), mask);
  out.model->load_state_json(j.at("state"));
  ParameterSnapshot snapshot;
  for (const auto& [name, value] : j.at("parameters").items()) snapshot.values.emplace_back(name, matrix_from_json(value));
  try {
    snapshot.restore(*out.model);
  } catch (const std::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  out.corpus_hash = j.value("corpus_spec_hash", std::string());
  out.extra = j.value("extra", nlohmann::json::object());
  return out;
}

// ---------------------------------------------------------------------------
// Ablation

nlohmann::json AblationCell::to_json() const {
  return {{"group", group}, {"label", label}, {"model", to_string(family)}, {"mode", to_string(mode)},
          {"align", align_to_json(align)}};
}

AblationCell AblationCell::from_json(const nlohmann::json& j) {
  AblationCell c;
  c.group = j.value("group", std::string("custom"));
  c.family = parse_model_family(j.at("model").get<std::string>());
  c.mode = j.contains("mode") ? parse_eval_mode(j.at("mode").get<std::string>())
                              : (c.family == ModelFamily::MiniSgtr ? EvalMode::SgDet : EvalMode::PredCls);
  if (j.contains("align")) c.align = align_from_json(j.at("align"));
  c.label = j.value("label", to_string(c.family) + " " + to_string(c.align.target_mode) + "+" +
                                 to_string(c.align.head_mode));
  return c;
}

namespace {

std::string family_title(ModelFamily f) { return f == ModelFamily::MiniSgtr ? "SGTR" : "Motifs"; }

AblationCell make_cell(std::string group, std::string label, ModelFamily family, EvalMode mode, TargetMode target,
                       HeadMode head, double p = 0.1, double lambda = 10.0) {
  AblationCell c;
  c.group = std::move(group);
  c.label = std::move(label);
  c.family = family;
  c.mode = mode;
  c.align.target_mode = target;
  c.align.head_mode = head;
  c.align.p = p;
  c.align.lambda_weight = lambda;
  return c;
}

}  // namespace

std::vector<AblationCell> component_cells(ModelFamily family, EvalMode mode) {
  const std::string f = family_title(family);
  return {make_cell("components", f, family, mode, TargetMode::Off, HeadMode::Untied),
          make_cell("components", f + " + SA + UPH", family, mode, TargetMode::Supervised, HeadMode::Untied),
          make_cell("components", f + " + SSA + PH", family, mode, TargetMode::SelfSupervised, HeadMode::Tied),
          make_cell("components", f + " + SSA + UPH", family, mode, TargetMode::SelfSupervised, HeadMode::Untied)};
}

std::vector<AblationCell> p_sweep_cells(ModelFamily family, EvalMode mode) {
  const std::string f = family_title(family);
  std::vector<AblationCell> cells = {make_cell("p_sweep", f, family, mode, TargetMode::Off, HeadMode::Untied)};
  for (double p : {0.05, 0.1, 0.2, 0.4, 0.6})
    cells.push_back(make_cell("p_sweep", "Align-" + f + " (p=" + format_number(p) + ")", family, mode,
                              TargetMode::SelfSupervised, HeadMode::Untied, p, 10.0));
  return cells;
}

std::vector<AblationCell> lambda_sweep_cells(ModelFamily family, EvalMode mode) {
  const std::string f = family_title(family);
  std::vector<AblationCell> cells = {make_cell("lambda_sweep", f, family, mode, TargetMode::Off, HeadMode::Untied)};
  for (double l : {0.1, 1.0, 10.0, 50.0, 100.0})
    cells.push_back(make_cell("lambda_sweep", "Align-" + f + " (lambda=" + format_number(l) + ")", family, mode,
                              TargetMode::SelfSupervised, HeadMode::Untied, 0.1, l));
  return cells;
}

AblationGrid builtin_grid(const std::string& name) {
  AblationGrid g;
  auto add = [&](std::vector<AblationCell> cells) { g.cells.insert(g.cells.end(), cells.begin(), cells.end()); };
  const bool full = name == "full";
  if (full || name == "components") {
    add(component_cells(ModelFamily::MiniSgtr, EvalMode::SgDet));
    add(component_cells(ModelFamily::MiniMotifs, EvalMode::PredCls));
  }
  if (full || name == "p_sweep") add(p_sweep_cells(ModelFamily::MiniMotifs, EvalMode::PredCls));
  if (full || name == "lambda_sweep") add(lambda_sweep_cells(ModelFamily::MiniMotifs, EvalMode::PredCls));
  if (g.cells.empty())
    throw std::invalid_argument("unknown built-in grid '" + name + "' (expected components, p_sweep, lambda_sweep or full)");
  // Desk-scale budget: the full grid fits in under an hour on one core.
  g.base.batch_size = 8;
  g.base.total_iterations = 1200;
  g.base.eval_every = 300;
  g.base.val_subset = 200;
  g.base.test_subset = 200;
  g.base.write_checkpoints = false;
  g.family_overrides = {{to_string(ModelFamily::MiniSgtr),
                         {{"total_iterations", 800},
                          {"eval_every", 200},
                          {"model_overrides", {{"d_model", 32}, {"ff_hidden", 64}, {"encoder_layers", 0}}}}}};
  return g;
}

AblationGrid AblationGrid::from_json(const nlohmann::json& j) {
  AblationGrid g;
  if (j.contains("builtin")) g = builtin_grid(j.at("builtin").get<std::string>());
  if (j.contains("cells"))
    for (const auto& c : j.at("cells")) g.cells.push_back(AblationCell::from_json(c));
  if (j.contains("seeds")) g.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  if (j.contains("base")) g.base = TrainConfig::from_json(j.at("base"));
  if (j.contains("family_overrides")) g.family_overrides = j.at("family_overrides");
  if (g.cells.empty()) throw std::invalid_argument("ablation grid has no cells");
  if (g.seeds.empty()) throw std::invalid_argument("ablation grid has no seeds");
  return g;
}

nlohmann::json AblationGrid::to_json() const {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : this->cells) cells.push_back(c.to_json());
  return {{"cells", cells}, {"seeds", seeds}, {"base", base.to_json()}, {"family_overrides", family_overrides}};
}

TrainConfig AblationGrid::config_for(const AblationCell& cell, std::uint64_t seed) const {
  nlohmann::json j = base.to_json();
  const std::string family = to_string(cell.family);
  if (family_overrides.contains(family)) j.merge_patch(family_overrides.at(family));
  j["model"] = family;
  j["mode"] = to_string(cell.mode);
  j["align"] = align_to_json(cell.align);
  j["seed"] = seed;
  return TrainConfig::from_json(j);
}

MeanStd mean_std(std::span<const double> values) {
  MeanStd r;
  r.n = int(values.size());
  if (values.empty()) return r;
  r.mean = std::accumulate(values.begin(), values.end(), 0.0) / double(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - r.mean) * (v - r.mean);
    r.std = std::sqrt(ss / double(values.size() - 1));
  }
  return r;
}

MeanStd AblationRow::stat(const std::string& metric) const {
  const auto it = values.find(metric);
  if (it == values.end()) return {};
  return mean_std(it->second);
}

const std::vector<std::string>& AblationTable::metrics() {
  static const std::vector<std::string> m = {"mR@50", "mR@100", "R@50", "R@100"};
  return m;
}

const AblationRow* AblationTable::find(const std::string& group, const std::string& label, ModelFamily family) const {
  for (const AblationRow& r : rows)
    if (r.cell.group == group && r.cell.label == label && r.cell.family == family) return &r;
  return nullptr;
}

std::string AblationTable::to_csv() const {
  std::ostringstream out;
  out.precision(10);
  out << "group,family,method,n";
  for (const auto& m : metrics()) out << ',' << m << "_mean," << m << "_std";
  out << '\n';
  for (const AblationRow& r : rows) {
    out << r.cell.group << ',' << to_string(r.cell.family) << ",\"" << r.cell.label << "\","
        << r.stat(metrics().front()).n;
    for (const auto& m : metrics()) {
      const MeanStd s = r.stat(m);
      out << ',' << s.mean << ',' << s.std;
    }
    out << '\n';
  }
  return out.str();
}

std::string AblationTable::to_text() const {
  std::ostringstream out;
  std::string group;
  for (const AblationRow& r : rows) {
    if (r.cell.group != group) {
      group = r.cell.group;
      out << "\n[" << group << "]\n" << std::left << std::setw(34) << "Method";
      for (const auto& m : metrics()) out << " | " << std::setw(13) << m;
      out << '\n';
    }
    out << std::left << std::setw(34) << r.cell.label;
    for (const auto& m : metrics()) {
      const MeanStd s = r.stat(m);
      std::ostringstream cell;
      cell << std::fixed << std::setprecision(1) << 100.0 * s.mean << " ± " << 100.0 * s.std;
      out << " | " << std::setw(14) << cell.str();
    }
    if (!r.failures.empty()) out << "  (" << r.failures.size() << " failed)";
    out << '\n';
  }
  return out.str();
}

nlohmann::json AblationTable::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const AblationRow& r : rows) {
    nlohmann::json row = r.cell.to_json();
    row["seeds"] = r.seeds;
    row["values"] = r.values;
    row["failures"] = r.failures;
    for (const auto& m : metrics()) {
      const MeanStd s = r.stat(m);
      row["stats"][m] = {{"mean", s.mean}, {"std", s.std}, {"n", s.n}};
    }
    rows_json.push_back(std::move(row));
  }
  return {{"rows", rows_json}};
}

AblationTable run_ablation(const AblationGrid& grid, const CorpusBundle& bundle,
                           const std::optional<std::filesystem::path>& out_dir,
                           const std::function<void(const std::string&)>& log) {
  if (grid.cells.empty()) throw std::invalid_argument("ablation grid has no cells");
  std::map<std::string, RunRecord> cache;
  AblationTable table;
  for (const AblationCell& cell : grid.cells) {
    AblationRow row;
    row.cell = cell;
    for (std::uint64_t seed : grid.seeds) {
      row.seeds.push_back(seed);
      RunRecord record;
      std::string key;
      try {
        TrainConfig cfg = grid.config_for(cell, seed);
        nlohmann::json key_json = cfg.to_json();
        if (cfg.align_cfg.target_mode == TargetMode::Off) key_json["align"] = "off";
        key = key_json.dump();
        if (const auto it = cache.find(key); it != cache.end()) {
          record = it->second;
        } else {
          std::optional<std::filesystem::path> dir;
          if (out_dir) dir = *out_dir / run_id(cfg.to_json());
          if (log) log("running " + run_id(cfg.to_json()));
          record = run_training(cfg, bundle, dir);
          cache.emplace(key, record);
        }
      } catch (const std::exception& e) {
        record.error = e.what();
        row.failures.push_back("seed " + std::to_string(seed) + ": " + e.what());
        if (log) log("failed: " + row.failures.back());
      }
      if (record.error.empty() && record.selected >= 0) {
        const EvalReport& test = record.test;
        for (const int k : {50, 100}) {
          if (!test.recall_at.contains(k)) continue;
          row.values["mR@" + std::to_string(k)].push_back(test.mean_recall_at.at(k));
          row.values["R@" + std::to_string(k)].push_back(test.recall_at.at(k));
        }
      }
      row.runs.push_back(std::move(record));
    }
    table.rows.push_back(std::move(row));
  }
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    write_text(*out_dir / "ablation.csv", table.to_csv());
    write_text(*out_dir / "ablation.txt", table.to_text());
    write_text(*out_dir / "ablation.json", table.to_json().dump(2));
    write_text(*out_dir / "manifest.json",
               nlohmann::json{{"command", "ablate"},
                              {"grid", grid.to_json()},
                              {"corpus_spec_hash", bundle.spec.hash()},
                              {"files", {"ablation.csv", "ablation.txt", "ablation.json"}}}
                   .dump(2));
  }
  return table;
}

// ---------------------------------------------------------------------------
// Reporting

std::string per_predicate_diff_csv(std::span<const RunRecord> aligned, std::span<const RunRecord> baseline,
                                   const PartitionSpec& partition, int num_predicates, int k) {
  // Pair runs by seed; fall back to positional pairing when seeds do not overlap.
  std::vector<std::pair<const RunRecord*, const RunRecord*>> pairs;
  for (const RunRecord& a : aligned)
    for (const RunRecord& b : baseline)
      if (a.config.value("seed", 0ULL) == b.config.value("seed", 0ULL)) pairs.emplace_back(&a, &b);
  if (pairs.empty())
    for (std::size_t i = 0; i < std::min(aligned.size(), baseline.size()); ++i)
      pairs.emplace_back(&aligned[i], &baseline[i]);

  std::ostringstream out;
  out.precision(17);
  out << "predicate_id,partition,mean_diff,std\n";
  for (int id = 1; id < num_predicates; ++id) {
    std::vector<double> diffs;
    for (const auto& [a, b] : pairs) {
      const auto ia = a->test.per_predicate_recall.find(k);
      const auto ib = b->test.per_predicate_recall.find(k);
      if (ia == a->test.per_predicate_recall.end() || ib == b->test.per_predicate_recall.end()) continue;
      const double ra = ia->second.at(std::size_t(id));
      const double rb = ib->second.at(std::size_t(id));
      if (!std::isnan(ra) && !std::isnan(rb)) diffs.push_back(ra - rb);
    }
    out << id << ',' << partition.bucket_of(id) << ',';
    if (diffs.empty()) {
      out << "nan,nan\n";
    } else {
      const MeanStd s = mean_std(diffs);
      out << s.mean << ',' << s.std << '\n';
    }
  }
  return out.str();
}

ReportFiles report(std::span<const RunRecord> records, const PartitionSpec& partition,
                   const std::filesystem::path& out_dir) {
  if (records.empty()) throw std::invalid_argument("report needs at least one run record");
  std::filesystem::create_directories(out_dir);
  ReportFiles files{out_dir / "results.csv", out_dir / "per_predicate_diff.csv", out_dir / "curves.csv"};

  std::ostringstream results;
  results.precision(17);
  results << "run,family,mode,target_mode,head_mode,p,lambda,seed,split,metric,K,value\n";
  std::ostringstream curves;
  curves.precision(17);
  curves << "run,iteration,series,value\n";
  for (const RunRecord& r : records) {
    if (!r.error.empty() || r.selected < 0) continue;
    const std::string id = run_id(r.config);
    const auto& a = r.config.at("align");
    std::ostringstream prefix_stream;
    prefix_stream.precision(17);
    prefix_stream << id << ',' << r.config.at("model").get<std::string>() << ','
                  << r.config.at("mode").get<std::string>() << ',' << a.at("target_mode").get<std::string>() << ','
                  << a.at("head_mode").get<std::string>() << ',' << a.at("p").get<double>() << ','
                  << a.at("lambda").get<double>() << ',' << r.config.at("seed").get<std::uint64_t>();
    const std::string row_prefix = prefix_stream.str();
    auto emit = [&](const std::string& split, const EvalReport& rep) {
      for (const auto& [k, v] : rep.recall_at) results << row_prefix << ',' << split << ",R," << k << ',' << v << '\n';
      for (const auto& [k, v] : rep.mean_recall_at)
        results << row_prefix << ',' << split << ",mR," << k << ',' << v << '\n';
      for (const auto& [bucket, v] : rep.partition_recall)
        results << row_prefix << ',' << split << ',' << bucket << ',' << EvalReport::kPartitionK << ',' << v << '\n';
    };
    emit("val", r.eval_points[std::size_t(r.selected)].val);
    emit("test", r.test);
    for (const EvalPoint& p : r.eval_points) {
      for (const auto& [k, v] : p.val.recall_at) curves << id << ',' << p.iteration << ",val_R@" << k << ',' << v << '\n';
      for (const auto& [k, v] : p.val.mean_recall_at)
        curves << id << ',' << p.iteration << ",val_mR@" << k << ',' << v << '\n';
    }
    for (std::size_t i = 0; i < r.losses.size(); ++i) {
      curves << id << ',' << i + 1 << ",l_original," << r.losses[i].l_original << '\n';
      curves << id << ',' << i + 1 << ",l_align," << r.losses[i].l_align << '\n';
      curves << id << ',' << i + 1 << ",l_final," << r.losses[i].l_final << '\n';
    }
  }
  write_text(files.results, results.str());
  write_text(files.curves, curves.str());

  // Aligned configuration: the first non-off one, preferring the default SSA+UPH setting.
  const RunRecord* reference = nullptr;
  for (const RunRecord& r : records) {
    if (!r.error.empty() || r.config.at("align").at("target_mode") == "off") continue;
    const AlignConfig a = align_from_json(r.config.at("align"));
    if (reference == nullptr || (a == AlignConfig{})) {
      reference = &r;
      if (a == AlignConfig{}) break;
    }
  }
  std::vector<RunRecord> aligned, baseline;
  int num_predicates = 0;
  for (const RunRecord& r : records) {
    if (!r.error.empty() || r.selected < 0) continue;
    if (r.config.contains("model_config")) {
      const auto& mc = r.config.at("model_config");
      const auto& inner = mc.contains("sgtr") ? mc.at("sgtr") : mc.at("motifs");
      num_predicates = std::max(num_predicates, inner.at("num_predicates").get<int>());
    }
    if (reference == nullptr || r.config.at("model") != reference->config.at("model") ||
        r.config.at("mode") != reference->config.at("mode"))
      continue;
    if (r.config.at("align").at("target_mode") == "off")
      baseline.push_back(r);
    else if (r.config.at("align") == reference->config.at("align"))
      aligned.push_back(r);
  }
  if (num_predicates == 0) {
    for (const auto* ids : {&partition.head, &partition.body, &partition.tail})
      for (int id : *ids) num_predicates = std::max(num_predicates, id + 1);
  }
  write_text(files.per_predicate_diff, per_predicate_diff_csv(aligned, baseline, partition, num_predicates));
  return files;
}

}  // namespace relalign
