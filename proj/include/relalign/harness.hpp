#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "relalign/model.hpp"

namespace relalign {

// ---------------------------------------------------------------------------
// Optimizers

/// Base learning rate times 0.5 * (1 + cos(pi * iteration / total)); reaches 0 at `total`.
double cosine_lr(double base_lr, long iteration, long total);

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_grad_norm(const ad::ParameterList& params, double max_norm);

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  /// One update of every parameter in `params` that holds a gradient.
  /// Parameters without one are left exactly as they are, weight decay
  /// and momentum included.
  virtual void step(const ad::ParameterList& params, double lr) = 0;
  virtual std::string name() const = 0;
};

/// SGD with momentum and L2 weight decay folded into the gradient.
class Sgd final : public Optimizer {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}
  void step(const ad::ParameterList& params, double lr) override;
  std::string name() const override { return "sgd"; }

 private:
  double momentum_;
  double weight_decay_;
  std::vector<Matrix> velocity_;
};

/// Adam with decoupled weight decay.
class AdamW final : public Optimizer {
 public:
  AdamW(double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(const ad::ParameterList& params, double lr) override;
  std::string name() const override { return "adamw"; }

 private:
  double weight_decay_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Matrix> m_, v_;
};

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  ModelFamily model_family = ModelFamily::MiniMotifs;
  EvalMode mode = EvalMode::PredCls;
  AlignConfig align_cfg;
  MaskConfig mask_cfg;
  int batch_size = 16;
  long total_iterations = 5000;
  double base_lr = 0.0;  // 0 selects the family default
  double weight_decay = -1.0;  // < 0 selects the family default
  double clip_norm = 5.0;
  std::uint64_t seed = 0;
  long eval_every = 500;
  std::vector<int> eval_ks = {20, 50, 100};
  bool graph_constraint = true;
  int train_subset = 0;  // first n training samples; 0 = all
  int val_subset = 0;    // first n validation samples; 0 = all
  int test_subset = 0;
  nlohmann::json model_overrides = nlohmann::json::object();  // merged into the family config
  bool write_checkpoints = true;

  static constexpr const char* kSelectionMetric = "val mR@50";
  static constexpr int kSelectionK = 50;

  double effective_lr() const;
  double effective_weight_decay() const;
  void validate() const;  // throws std::invalid_argument
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Builds a fresh model of cfg's family for a corpus, seeded with cfg.seed
/// and with cfg.mask_cfg.
std::unique_ptr<SceneGraphModel> make_model(const TrainConfig& cfg, const CorpusSpec& corpus);

/// Rebuilds a model from SceneGraphModel::config_json() output.
std::unique_ptr<SceneGraphModel> make_model(const nlohmann::json& config_json, const AlignConfig& align,
                                            const MaskConfig& mask);

std::unique_ptr<Optimizer> make_optimizer(const TrainConfig& cfg);

/// Directory-safe run name from TrainConfig JSON, e.g.
/// "mini-motifs_predcls_ssa_untied_p0.1_l10_s0".
std::string run_id(const nlohmann::json& cfg);

/// Writes `text` to `path`, throwing std::runtime_error on failure.
void write_text(const std::filesystem::path& path, const std::string& text);

// ---------------------------------------------------------------------------
// Training

struct LossBreakdown {
  double l_original = 0.0;
  double l_align = 0.0;  // 0 when alignment is off
  double l_final = 0.0;
  double grad_norm = 0.0;
};

/// Randomness for sample `index` of the batch at `iteration`. Dropout draws
/// depend on `seed` only; mask draws on (`seed`, `mask_seed`).
StepRandomness step_randomness(std::uint64_t seed, std::uint64_t mask_seed, long iteration, std::size_t index);

/// Joint loss of a batch without any update: mean over samples of
/// L_original + lambda * L_align, with gradients accumulated into the
/// parameters when `backward` is set.
LossBreakdown batch_loss(SceneGraphModel& model, std::span<const SceneSample* const> batch, EvalMode mode,
                         std::uint64_t seed, long iteration, bool backward);

/// One joint gradient step on L_final. Zeroes gradients, runs the batch,
/// clips, updates. Throws std::runtime_error on a non-finite loss.
LossBreakdown train_step(SceneGraphModel& model, Optimizer& optimizer, std::span<const SceneSample* const> batch,
                         EvalMode mode, double lr, double clip_norm, std::uint64_t seed, long iteration);

struct EvalPoint {
  long iteration = 0;
  EvalReport val;
  std::string checkpoint;  // path, empty when not written
};

struct RunRecord {
  nlohmann::json config;
  std::vector<EvalPoint> eval_points;
  int selected = -1;  // index into eval_points
  EvalReport test;
  std::vector<LossBreakdown> losses;  // one entry per iteration
  double wall_seconds = 0.0;
  std::string error;  // non-empty when the run failed

  nlohmann::json to_json(bool include_losses = true) const;
  static RunRecord from_json(const nlohmann::json& j);
  /// Equality of every logged number except wall-clock time.
  bool same_results(const RunRecord& other) const;
};

/// Index of the report with the highest mR@50, earliest on ties.
int select_best(std::span<const EvalReport> reports, int k = TrainConfig::kSelectionK);

/// Sample indices of the batch at `iteration`: consecutive slices of
/// per-epoch permutations drawn from the data stream of `seed`.
std::vector<std::size_t> batch_indices(std::size_t num_samples, int batch_size, std::uint64_t seed, long iteration);

/// Full training run: prepare, train with cosine annealing, evaluate on val
/// every eval_every iterations (and at the end), select by val mR@50,
/// evaluate the selection on test. With `out_dir`, writes checkpoints,
/// run.json and manifest.json there.
RunRecord run_training(const TrainConfig& cfg, const CorpusBundle& bundle,
                       const std::optional<std::filesystem::path>& out_dir = std::nullopt);

/// Same, but owns the model it trains and returns it.
std::pair<RunRecord, std::unique_ptr<SceneGraphModel>> train_model(const TrainConfig& cfg, const CorpusBundle& bundle,
                                                                    const std::optional<std::filesystem::path>& out_dir =
                                                                        std::nullopt);

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const SceneGraphModel& model, const std::string& corpus_hash,
                     const nlohmann::json& extra = nlohmann::json::object());

struct LoadedCheckpoint {
  std::unique_ptr<SceneGraphModel> model;
  std::string corpus_hash;
  nlohmann::json extra;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Ablation

/// One ablation row: a label plus the changes it makes to the base config.
struct AblationCell {
  std::string group;  // e.g. "components", "p_sweep", "lambda_sweep"
  std::string label;  // e.g. "SSA+UPH", "p=0.05"
  ModelFamily family = ModelFamily::MiniMotifs;
  EvalMode mode = EvalMode::PredCls;
  AlignConfig align;

  nlohmann::json to_json() const;
  static AblationCell from_json(const nlohmann::json& j);
};

struct AblationGrid {
  std::vector<AblationCell> cells;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3};
  TrainConfig base;
  /// Family name -> partial TrainConfig JSON merged over `base` for that family.
  nlohmann::json family_overrides = nlohmann::json::object();

  TrainConfig config_for(const AblationCell& cell, std::uint64_t seed) const;

  static AblationGrid from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

/// Baseline, SA+UPH, SSA+PH, SSA+UPH rows for one family.
std::vector<AblationCell> component_cells(ModelFamily family, EvalMode mode);
/// Baseline row plus SSA+UPH at p in {0.05, 0.1, 0.2, 0.4, 0.6}, lambda 10.
std::vector<AblationCell> p_sweep_cells(ModelFamily family, EvalMode mode);
/// Baseline row plus SSA+UPH at lambda in {0.1, 1, 10, 50, 100}, p 0.1.
std::vector<AblationCell> lambda_sweep_cells(ModelFamily family, EvalMode mode);
/// Built-in grid by name: "components", "p_sweep", "lambda_sweep" or "full",
/// with desk-scale training budgets.
AblationGrid builtin_grid(const std::string& name);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1); 0 for a single value
  int n = 0;
};

MeanStd mean_std(std::span<const double> values);

struct AblationRow {
  AblationCell cell;
  std::vector<std::uint64_t> seeds;
  std::vector<RunRecord> runs;
  std::map<std::string, std::vector<double>> values;  // metric -> per successful seed
  std::vector<std::string> failures;                  // "seed N: message"

  MeanStd stat(const std::string& metric) const;
};

struct AblationTable {
  std::vector<AblationRow> rows;

  /// Metrics reported per row: test split, at the eval point selected on val.
  static const std::vector<std::string>& metrics();
  const AblationRow* find(const std::string& group, const std::string& label, ModelFamily family) const;
  /// Columns: group,family,method,n,<metric>_mean,<metric>_std...
  std::string to_csv() const;
  /// Human-readable rows "method | mR@50 | mR@100 | R@50 | R@100" with mean ± std.
  std::string to_text() const;
  nlohmann::json to_json() const;
};

/// Runs every cell for every seed. Failures are recorded per cell and the
/// table is still produced. Runs whose (family, mode, align) coincide are
/// trained once and shared between rows. With `out_dir`, each run is
/// written to its own subdirectory.
AblationTable run_ablation(const AblationGrid& grid, const CorpusBundle& bundle,
                           const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                           const std::function<void(const std::string&)>& log = {});

// ---------------------------------------------------------------------------
// Reporting

struct ReportFiles {
  std::filesystem::path results;
  std::filesystem::path per_predicate_diff;
  std::filesystem::path curves;
};

/// Per-predicate R@K difference between aligned runs and baseline runs,
/// paired by seed: predicate_id,partition,mean_diff,std (C_pred - 1 rows).
std::string per_predicate_diff_csv(std::span<const RunRecord> aligned, std::span<const RunRecord> baseline,
                                   const PartitionSpec& partition, int num_predicates, int k = 100);

/// Writes results.csv, per_predicate_diff.csv and curves.csv into `out_dir`.
/// Runs are classified as baseline (alignment off) or aligned from their
/// config; the diff compares the first aligned configuration with the
/// baseline of the same family.
ReportFiles report(std::span<const RunRecord> records, const PartitionSpec& partition,
                   const std::filesystem::path& out_dir);

}  // namespace relalign
