#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "relalign/harness.hpp"
#include "test_util.hpp"

using namespace relalign;

namespace {

const CorpusBundle& bundle() {
  static const CorpusBundle b = make_bundle(relalign::testing::tiny_spec(80, 5));
  return b;
}

TrainConfig micro_config(TargetMode target = TargetMode::SelfSupervised) {
  TrainConfig c;
  c.model_family = ModelFamily::MiniMotifs;
  c.mode = EvalMode::PredCls;
  c.align_cfg.target_mode = target;
  c.batch_size = 4;
  c.total_iterations = 12;
  c.eval_every = 6;
  c.val_subset = 10;
  c.test_subset = 10;
  c.write_checkpoints = false;
  c.model_overrides = {{"hidden", 8}, {"label_embedding", 4}, {"pair_width", 8}, {"relation_width", 8},
                       {"mlp_hidden", 8}};
  return c;
}

ad::Tensor param_with_grad(Matrix value, Matrix grad) {
  ad::Tensor t = ad::Tensor::parameter(std::move(value));
  t.node()->grad = std::move(grad);
  return t;
}

Matrix m11(double v) { return Matrix::Constant(1, 1, v); }

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

EvalReport report_with_mr50(double v) {
  EvalReport r;
  r.mean_recall_at[50] = v;
  return r;
}

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("relalign_test_harness_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(0.1, 0, 100) == doctest::Approx(0.1));
  CHECK(cosine_lr(0.1, 50, 100) == doctest::Approx(0.05));
  CHECK(cosine_lr(0.1, 100, 100) == doctest::Approx(0.0));
  CHECK(cosine_lr(0.1, 25, 100) == doctest::Approx(0.05 * (1.0 + std::sqrt(0.5))));
  for (long i = 1; i <= 100; ++i) CHECK(cosine_lr(0.1, i, 100) <= cosine_lr(0.1, i - 1, 100));
}

TEST_CASE("gradient clipping") {
  ad::Tensor a = param_with_grad(Matrix::Zero(1, 2), (Matrix(1, 2) << 3.0, 0.0).finished());
  ad::Tensor b = param_with_grad(Matrix::Zero(1, 1), m11(4.0));
  ad::Tensor none = ad::Tensor::parameter(Matrix::Zero(2, 2));
  const ad::ParameterList params = {{"a", a}, {"b", b}, {"none", none}};
  CHECK(clip_grad_norm(params, 10.0) == doctest::Approx(5.0));
  CHECK(b.grad()(0, 0) == 4.0);
  CHECK(clip_grad_norm(params, 1.0) == doctest::Approx(5.0));
  CHECK(a.grad()(0, 0) == doctest::Approx(0.6));
  CHECK(b.grad()(0, 0) == doctest::Approx(0.8));
  CHECK(clip_grad_norm(params, 1.0) == doctest::Approx(1.0));
}

TEST_CASE("sgd with momentum and weight decay") {
  ad::Tensor w = param_with_grad(m11(1.0), m11(2.0));
  const ad::ParameterList params = {{"w", w}};
  Sgd opt(0.9, 0.1);
  opt.step(params, 0.1);
  CHECK(w.value()(0, 0) == doctest::Approx(1.0 - 0.1 * 2.1));
  opt.step(params, 0.1);
  CHECK(w.value()(0, 0) == doctest::Approx(0.79 - 0.1 * (0.9 * 2.1 + 2.079)));
}

TEST_CASE("adamw first steps") {
  ad::Tensor w = param_with_grad(m11(1.0), m11(2.0));
  const ad::ParameterList params = {{"w", w}};
  AdamW opt(0.1);
  opt.step(params, 0.1);
  CHECK(w.value()(0, 0) == doctest::Approx(0.99 - 0.1 * 2.0 / (2.0 + 1e-8)));
  // A constant gradient keeps the bias-corrected step at lr.
  const double before = w.value()(0, 0);
  opt.step(params, 0.1);
  CHECK(w.value()(0, 0) == doctest::Approx(before * 0.99 - 0.1).epsilon(1e-9));
}

TEST_CASE("train config json round trip and validation") {
  TrainConfig c = micro_config();
  c.align_cfg.p = 0.2;
  c.align_cfg.lambda_weight = 3.0;
  c.align_cfg.head_mode = HeadMode::Tied;
  c.mask_cfg.seed = 9;
  c.seed = 4;
  const TrainConfig back = TrainConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.mask_cfg.p == 0.2);
  CHECK(back.effective_lr() == doctest::Approx(0.05));
  CHECK(back.effective_weight_decay() == doctest::Approx(1e-4));

  TrainConfig s;
  s.model_family = ModelFamily::MiniSgtr;
  s.mode = EvalMode::SgDet;
  CHECK(s.effective_lr() == doctest::Approx(3e-4));
  CHECK(make_optimizer(s)->name() == "adamw");
  CHECK(make_optimizer(c)->name() == "sgd");

  TrainConfig bad = c;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.eval_every = 100;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = s;
  bad.mode = EvalMode::PredCls;
  CHECK_THROWS_AS(bad.validate(), UnsupportedModeError);
  bad = c;
  bad.align_cfg.p = 1.5;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("batch indices walk per-epoch permutations") {
  const std::size_t n = 10;
  std::vector<std::size_t> epoch0, epoch1;
  for (long it = 0; it < 5; ++it) {
    const auto idx = batch_indices(n, 4, 3, it);
    CHECK(idx == batch_indices(n, 4, 3, it));
    for (std::size_t k = 0; k < idx.size(); ++k) (it * 4 + long(k) < 10 ? epoch0 : epoch1).push_back(idx[k]);
  }
  std::vector<std::size_t> sorted = epoch0;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::size_t> expected(n);
  std::iota(expected.begin(), expected.end(), std::size_t{0});
  CHECK(sorted == expected);
  sorted = epoch1;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == expected);
  CHECK(epoch0 != epoch1);
  CHECK(batch_indices(n, 4, 3, 0) != batch_indices(n, 4, 4, 0));
  CHECK_THROWS(batch_indices(0, 4, 0, 0));
}

TEST_CASE("a small step descends the joint loss") {
  for (TargetMode target : {TargetMode::Off, TargetMode::SelfSupervised, TargetMode::Supervised}) {
    CAPTURE(to_string(target));
    const TrainConfig cfg = micro_config(target);
    auto model = make_model(cfg, bundle().spec);
    model->prepare(bundle(), cfg.mode);
    std::vector<const SceneSample*> batch;
    for (std::size_t i = 0; i < 4; ++i) batch.push_back(&bundle().corpus.train[i]);
    Sgd opt(0.0, 0.0);
    const LossBreakdown before = train_step(*model, opt, batch, cfg.mode, 1e-4, 0.0, 0, 0);
    const LossBreakdown after = batch_loss(*model, batch, cfg.mode, 0, 0, false);
    CHECK(after.l_final < before.l_final);
    CHECK(before.l_final == doctest::Approx(before.l_original + (target == TargetMode::Off ? 0.0 : 10.0 * before.l_align)));
  }
}

TEST_CASE("training is deterministic and seed dependent") {
  const TrainConfig cfg = micro_config();
  const RunRecord a = run_training(cfg, bundle());
  const RunRecord b = run_training(cfg, bundle());
  CHECK(a.same_results(b));
  TrainConfig other = cfg;
  other.seed = 1;
  CHECK_FALSE(a.same_results(run_training(other, bundle())));
  REQUIRE(a.eval_points.size() == 2);
  CHECK(a.eval_points[0].iteration == 6);
  CHECK(a.eval_points[1].iteration == 12);
  CHECK(a.losses.size() == 12);
  CHECK(a.selected == select_best(std::vector<EvalReport>{a.eval_points[0].val, a.eval_points[1].val}));
  CHECK(a.test.num_images == 10);
  CHECK(RunRecord::from_json(a.to_json()).same_results(a));
}

TEST_CASE("alignment off and lambda 0 train the original identically") {
  const RunRecord off = run_training(micro_config(TargetMode::Off), bundle());
  TrainConfig zero = micro_config(TargetMode::SelfSupervised);
  zero.align_cfg.lambda_weight = 0.0;
  const RunRecord z = run_training(zero, bundle());
  REQUIRE(off.losses.size() == z.losses.size());
  for (std::size_t i = 0; i < off.losses.size(); ++i) CHECK(off.losses[i].l_original == z.losses[i].l_original);
  CHECK(off.test.to_json() == z.test.to_json());
  CHECK(off.eval_points.back().val.to_json() == z.eval_points.back().val.to_json());
}

TEST_CASE("evaluation never runs the mirrored branch") {
  auto [record, model] = train_model(micro_config(), bundle());
  const std::uint64_t calls = model->mirrored_forward_calls();
  CHECK(calls == 12u * 4u);
  const std::vector<int> ks = {20, 50, 100};
  evaluate(*model, bundle().corpus.val, EvalMode::PredCls, ks, bundle().partition);
  CHECK(model->mirrored_forward_calls() == calls);
}

TEST_CASE("model selection takes the earliest best mR@50") {
  const std::vector<EvalReport> reports = {report_with_mr50(0.2), report_with_mr50(0.5), report_with_mr50(0.5),
                                           report_with_mr50(0.1)};
  CHECK(select_best(reports) == 1);
  CHECK(select_best(std::vector<EvalReport>{}) == -1);
}

TEST_CASE("mean and sample standard deviation") {
  const std::vector<double> v = {1.0, 2.0, 3.0, 4.0};
  const MeanStd s = mean_std(v);
  CHECK(s.mean == doctest::Approx(2.5));
  CHECK(s.std == doctest::Approx(std::sqrt(5.0 / 3.0)));
  CHECK(s.n == 4);
  const std::vector<double> one = {0.3};
  CHECK(mean_std(one).std == 0.0);
  CHECK(mean_std(std::vector<double>{}).n == 0);
}

TEST_CASE("built-in grids and sweeps") {
  const AblationGrid full = builtin_grid("full");
  CHECK(full.cells.size() == 4 + 4 + 6 + 6);
  CHECK(full.seeds == std::vector<std::uint64_t>{0, 1, 2, 3});
  CHECK_THROWS_AS(builtin_grid("nope"), std::invalid_argument);

  const auto comp = component_cells(ModelFamily::MiniMotifs, EvalMode::PredCls);
  REQUIRE(comp.size() == 4);
  CHECK(comp[0].align.target_mode == TargetMode::Off);
  CHECK(comp[1].align.target_mode == TargetMode::Supervised);
  CHECK(comp[1].align.head_mode == HeadMode::Untied);
  CHECK(comp[2].align.target_mode == TargetMode::SelfSupervised);
  CHECK(comp[2].align.head_mode == HeadMode::Tied);
  CHECK(comp[3].align == AlignConfig{});

  const auto ps = p_sweep_cells(ModelFamily::MiniMotifs, EvalMode::PredCls);
  REQUIRE(ps.size() == 6);
  const double p_values[] = {0.05, 0.1, 0.2, 0.4, 0.6};
  for (int i = 0; i < 5; ++i) {
    CHECK(ps[std::size_t(i) + 1].align.p == p_values[i]);
    CHECK(ps[std::size_t(i) + 1].align.lambda_weight == 10.0);
  }
  const auto ls = lambda_sweep_cells(ModelFamily::MiniMotifs, EvalMode::PredCls);
  REQUIRE(ls.size() == 6);
  const double l_values[] = {0.1, 1.0, 10.0, 50.0, 100.0};
  for (int i = 0; i < 5; ++i) {
    CHECK(ls[std::size_t(i) + 1].align.lambda_weight == l_values[i]);
    CHECK(ls[std::size_t(i) + 1].align.p == 0.1);
  }
  CHECK(ps[1].label == "Align-Motifs (p=0.05)");
  CHECK(ls[5].label == "Align-Motifs (lambda=100)");
}

TEST_CASE("grid json parsing and per-family overrides") {
  const nlohmann::json j = {
      {"builtin", "components"},
      {"seeds", {5}},
      {"cells", {{{"model", "mini-motifs"}, {"label", "extra"}, {"align", {{"target_mode", "ssa"}, {"p", 0.3}}}}}}};
  const AblationGrid g = AblationGrid::from_json(j);
  CHECK(g.cells.size() == 9);
  CHECK(g.cells.back().label == "extra");
  CHECK(g.cells.back().mode == EvalMode::PredCls);
  CHECK(g.cells.back().align.p == 0.3);
  CHECK(g.seeds == std::vector<std::uint64_t>{5});

  const TrainConfig sgtr = g.config_for(g.cells[0], 5);
  CHECK(sgtr.model_family == ModelFamily::MiniSgtr);
  CHECK(sgtr.mode == EvalMode::SgDet);
  CHECK(sgtr.total_iterations == 800);
  CHECK(sgtr.model_overrides.at("d_model") == 32);
  CHECK(sgtr.seed == 5);
  const TrainConfig motifs = g.config_for(g.cells.back(), 5);
  CHECK(motifs.total_iterations == 1200);
  CHECK(motifs.mask_cfg.p == 0.3);

  CHECK(AblationGrid::from_json(g.to_json()).to_json() == g.to_json());
  CHECK_THROWS_AS(AblationGrid::from_json({{"seeds", {0}}}), std::invalid_argument);
  CHECK_THROWS_AS(AblationGrid::from_json({{"builtin", "components"}, {"seeds", nlohmann::json::array()}}),
                  std::invalid_argument);
}

TEST_CASE("per-predicate difference against a hand computation") {
  auto record = [](std::uint64_t seed, std::vector<double> recall) {
    RunRecord r;
    r.config = {{"seed", seed}};
    r.selected = 0;
    r.test.per_predicate_recall[100] = std::move(recall);
    return r;
  };
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const std::vector<RunRecord> aligned = {record(0, {nan, 0.5, 1.0, nan}), record(1, {nan, 0.7, 0.0, nan})};
  const std::vector<RunRecord> baseline = {record(1, {nan, 0.4, 0.5, 0.2}), record(0, {nan, 0.3, 1.0, 0.1})};
  PartitionSpec partition;
  partition.head = {1};
  partition.body = {2};
  partition.tail = {3};
  const auto lines = lines_of(per_predicate_diff_csv(aligned, baseline, partition, 4));
  REQUIRE(lines.size() == 4);
  CHECK(lines[0] == "predicate_id,partition,mean_diff,std");
  // predicate 1: diffs 0.2 and 0.3; predicate 2: 0 and -0.5; predicate 3: no aligned recall
  std::istringstream l1(lines[1]), l2(lines[2]);
  std::string id, bucket, mean, sd;
  std::getline(l1, id, ','), std::getline(l1, bucket, ','), std::getline(l1, mean, ','), std::getline(l1, sd);
  CHECK(id == "1");
  CHECK(bucket == "head");
  CHECK(std::stod(mean) == doctest::Approx(0.25));
  CHECK(std::stod(sd) == doctest::Approx(std::sqrt(0.005)));
  std::getline(l2, id, ','), std::getline(l2, bucket, ','), std::getline(l2, mean, ','), std::getline(l2, sd);
  CHECK(bucket == "body");
  CHECK(std::stod(mean) == doctest::Approx(-0.25));
  CHECK(std::stod(sd) == doctest::Approx(std::sqrt(0.125)));
  CHECK(lines[3] == "3,tail,nan,nan");
}

TEST_CASE("ablation shares identical runs, records failures and writes its files") {
  AblationGrid g;
  g.base = micro_config();
  g.base.total_iterations = 6;
  g.base.eval_every = 3;
  g.seeds = {0, 1};
  AblationCell off;
  off.group = "t";
  off.label = "baseline";
  off.align.target_mode = TargetMode::Off;
  AblationCell off_again = off;
  off_again.label = "baseline (other p)";
  off_again.align.p = 0.4;
  AblationCell ssa = off;
  ssa.label = "ssa";
  ssa.align.target_mode = TargetMode::SelfSupervised;
  AblationCell broken = off;
  broken.label = "sgtr predcls";
  broken.family = ModelFamily::MiniSgtr;
  g.cells = {off, off_again, ssa, broken};

  const auto dir = scratch("ablation");
  const AblationTable table = run_ablation(g, bundle(), dir);
  REQUIRE(table.rows.size() == 4);
  CHECK(table.rows[0].runs[0].same_results(table.rows[1].runs[0]));
  CHECK(table.rows[0].stat("mR@50").n == 2);
  CHECK(table.rows[0].stat("mR@50").mean == table.rows[1].stat("mR@50").mean);
  CHECK(table.rows[3].failures.size() == 2);
  CHECK(table.rows[3].stat("mR@50").n == 0);
  CHECK(table.find("t", "ssa", ModelFamily::MiniMotifs) == &table.rows[2]);
  for (const char* f : {"ablation.csv", "ablation.txt", "ablation.json", "manifest.json"})
    CHECK(std::filesystem::exists(dir / f));
  const auto csv = lines_of(read_file(dir / "ablation.csv"));
  CHECK(csv.size() == 5);
  CHECK(csv[0] == "group,family,method,n,mR@50_mean,mR@50_std,mR@100_mean,mR@100_std,R@50_mean,R@50_std,R@100_mean,"
                  "R@100_std");
  CHECK(table.to_text().find("(2 failed)") != std::string::npos);

  std::vector<RunRecord> records;
  for (const auto& row : table.rows)
    for (const auto& r : row.runs) records.push_back(r);
  const ReportFiles files = report(records, bundle().partition, dir / "report");
  const auto results = lines_of(read_file(files.results));
  CHECK(results[0] == "run,family,mode,target_mode,head_mode,p,lambda,seed,split,metric,K,value");
  CHECK(results.size() > 1);
  const auto diff = lines_of(read_file(files.per_predicate_diff));
  CHECK(diff.size() == std::size_t(bundle().spec.num_predicates));
  CHECK(lines_of(read_file(files.curves))[0] == "run,iteration,series,value");
  std::filesystem::remove_all(dir);
}

TEST_CASE("training writes checkpoints, run record and manifest") {
  TrainConfig cfg = micro_config();
  cfg.write_checkpoints = true;
  const auto dir = scratch("train");
  const RunRecord r = run_training(cfg, bundle(), dir);
  for (const char* f : {"run.json", "best.json", "manifest.json", "checkpoints/iter_000006.json",
                        "checkpoints/iter_000012.json"})
    CHECK(std::filesystem::exists(dir / f));
  const LoadedCheckpoint best = load_checkpoint(dir / "best.json");
  CHECK(best.corpus_hash == bundle().spec.hash());
  CHECK(best.extra.at("iteration") == r.eval_points[std::size_t(r.selected)].iteration);
  const std::vector<int> ks = {20, 50, 100};
  const std::span<const SceneSample> test(bundle().corpus.test.data(), 10);
  CHECK(evaluate(*best.model, test, EvalMode::PredCls, ks, bundle().partition).to_json() == r.test.to_json());
  const auto manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
  CHECK(manifest.at("run_id") == run_id(r.config));
  CHECK(run_id(r.config) == "mini-motifs_predcls_ssa_untied_p0.1_l10_s0");
  std::filesystem::remove_all(dir);
}
