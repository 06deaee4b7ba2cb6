// relalign command-line driver: gen, train, eval, ablate, report.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "relalign/codec.hpp"
#include "relalign/datagen.hpp"
#include "relalign/harness.hpp"

namespace fs = std::filesystem;
using namespace relalign;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Flat key=value lines; '#' starts a comment. Keys name long options with
// '_' or '-' interchangeable.
std::vector<std::pair<std::string, std::string>> read_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path.string() + ": cannot open config file");
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  for (int n = 1; std::getline(in, line); ++n) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError(path.string() + ":" + std::to_string(n) + ": expected key=value");
    std::string key = trim(line.substr(0, eq));
    std::replace(key.begin(), key.end(), '_', '-');
    out.emplace_back(key, trim(line.substr(eq + 1)));
  }
  return out;
}

// Config-file values take precedence over flags given on the command line.
void apply_config_file(CLI::App& app, const std::string& path) {
  if (path.empty()) return;
  for (const auto& [key, value] : read_config_file(path)) {
    CLI::Option* opt = nullptr;
    try {
      opt = app.get_option("--" + key);
    } catch (const CLI::OptionNotFound&) {
      throw std::invalid_argument(path + ": unknown key '" + key + "' for '" + app.get_name() + "'");
    }
    opt->clear();
    if (opt->get_type_size() == 0) {
      // Flags: accept true/false style values.
      const std::string v = CLI::detail::to_lower(value);
      if (v == "false" || v == "0" || v == "no" || v == "off") {
        opt->add_result("false");
      } else {
        opt->add_result("true");
      }
    } else {
      opt->add_result(value);
    }
    opt->run_callback();
  }
}

fs::path data_dir(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("RELALIGN_DATA"); env != nullptr && *env != '\0') return env;
  throw std::invalid_argument("no corpus directory: pass --data or set RELALIGN_DATA");
}

std::vector<int> parse_ks(const std::string& text) {
  std::vector<int> ks;
  std::stringstream in(text);
  std::string part;
  while (std::getline(in, part, ',')) {
    part = trim(part);
    if (part.empty()) continue;
    const int k = std::stoi(part);
    if (k <= 0) throw std::invalid_argument("K must be positive, got " + part);
    ks.push_back(k);
  }
  if (ks.empty()) throw std::invalid_argument("empty K list");
  return ks;
}

std::string percent(double v) {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(2);
  out << 100.0 * v;
  return out.str();
}

void print_report(const std::string& title, const EvalReport& r) {
  std::cout << title << " (" << to_string(r.mode) << ", " << r.num_images << " images)\n";
  for (const auto& [k, v] : r.recall_at)
    std::cout << "  R@" << k << " " << percent(v) << "  mR@" << k << " " << percent(r.mean_recall_at.at(k)) << '\n';
  for (const auto& [bucket, v] : r.partition_recall)
    std::cout << "  " << bucket << "@" << EvalReport::kPartitionK << " " << percent(v) << '\n';
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::string out;
  CorpusSpec spec;
};

int run_gen(const GenArgs& a) {
  const fs::path out = a.out.empty() ? data_dir("") : fs::path(a.out);
  a.spec.validate();
  const CorpusBundle bundle = make_bundle(a.spec);
  fs::create_directories(out);
  write_corpus(out, bundle);
  write_text(out / "manifest.json", nlohmann::json{{"command", "gen"},
                                                   {"corpus_spec", to_json(a.spec)},
                                                   {"corpus_spec_hash", a.spec.hash()},
                                                   {"files", {"train.jsonl", "val.jsonl", "test.jsonl", "meta.json"}}}
                                        .dump(2));
  std::cout << "wrote " << bundle.corpus.train.size() << "/" << bundle.corpus.val.size() << "/"
            << bundle.corpus.test.size() << " samples to " << out.string() << " (spec " << a.spec.hash() << ")\n";
  return 0;
}

struct TrainArgs {
  std::string data, out, model = "mini-motifs", mode, align = "ssa", head = "untied", overrides = "{}";
  double p = 0.1, lambda = 10.0, lr = 0.0, weight_decay = -1.0, clip = 5.0;
  std::uint64_t seed = 0, mask_seed = 0;
  int batch = 16, train_subset = 0, val_subset = 0, test_subset = 0;
  long iterations = 5000, eval_every = 500;
  std::string ks = "20,50,100";
  bool no_checkpoints = false, no_graph_constraint = false;
};

int run_train(const TrainArgs& a) {
  TrainConfig cfg;
  cfg.model_family = parse_model_family(a.model);
  cfg.mode = a.mode.empty() ? (cfg.model_family == ModelFamily::MiniSgtr ? EvalMode::SgDet : EvalMode::PredCls)
                            : parse_eval_mode(a.mode);
  cfg.align_cfg.target_mode = parse_target_mode(a.align);
  cfg.align_cfg.head_mode = parse_head_mode(a.head);
  cfg.align_cfg.p = a.p;
  cfg.align_cfg.lambda_weight = a.lambda;
  cfg.mask_cfg.seed = a.mask_seed;
  cfg.batch_size = a.batch;
  cfg.total_iterations = a.iterations;
  cfg.eval_every = a.eval_every;
  cfg.base_lr = a.lr;
  cfg.weight_decay = a.weight_decay;
  cfg.clip_norm = a.clip;
  cfg.seed = a.seed;
  cfg.eval_ks = parse_ks(a.ks);
  cfg.graph_constraint = !a.no_graph_constraint;
  cfg.train_subset = a.train_subset;
  cfg.val_subset = a.val_subset;
  cfg.test_subset = a.test_subset;
  cfg.write_checkpoints = !a.no_checkpoints;
  cfg.model_overrides = nlohmann::json::parse(a.overrides);
  cfg.validate();

  const CorpusBundle bundle = load_corpus(data_dir(a.data));
  std::cerr << "training " << run_id(cfg.to_json()) << " for " << cfg.total_iterations << " iterations\n";
  const RunRecord rec = run_training(cfg, bundle, fs::path(a.out));
  const EvalPoint& best = rec.eval_points[std::size_t(rec.selected)];
  std::cout << "selected iteration " << best.iteration << " (" << TrainConfig::kSelectionMetric << " "
            << percent(best.val.mr(TrainConfig::kSelectionK)) << ")\n";
  if (rec.test.num_images > 0) print_report("test", rec.test);
  std::cout << "wrote " << a.out << " in " << rec.wall_seconds << " s\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint, split = "test", ks = "20,50,100", data, mode, out;
  bool no_graph_constraint = false;
};

int run_eval(const EvalArgs& a) {
  LoadedCheckpoint ckpt = load_checkpoint(a.checkpoint);
  const CorpusBundle bundle = load_corpus(data_dir(a.data));
  if (!ckpt.corpus_hash.empty() && ckpt.corpus_hash != bundle.spec.hash())
    throw DataError(a.checkpoint + ": trained on corpus " + ckpt.corpus_hash + ", data is " + bundle.spec.hash());
  EvalMode mode = ckpt.model->family() == ModelFamily::MiniSgtr ? EvalMode::SgDet : EvalMode::PredCls;
  if (ckpt.extra.contains("mode")) mode = parse_eval_mode(ckpt.extra.at("mode").get<std::string>());
  if (!a.mode.empty()) mode = parse_eval_mode(a.mode);
  const std::vector<SceneSample>* split = nullptr;
  if (a.split == "train") split = &bundle.corpus.train;
  if (a.split == "val") split = &bundle.corpus.val;
  if (a.split == "test") split = &bundle.corpus.test;
  if (split == nullptr) throw std::invalid_argument("unknown split '" + a.split + "' (expected train, val or test)");
  // sgdet needs the detector stub, which the checkpoint already carries.
  const std::vector<int> ks = parse_ks(a.ks);
  const EvalReport report = evaluate(*ckpt.model, *split, mode, ks, bundle.partition, !a.no_graph_constraint);
  print_report(a.split, report);
  if (!a.out.empty()) {
    const fs::path out(a.out);
    fs::create_directories(out);
    write_text(out / "eval.json", report.to_json().dump(2));
    write_text(out / "eval.csv", report.to_csv());
    write_text(out / "per_predicate.csv", report.per_predicate_csv(bundle.partition));
    write_text(out / "manifest.json", nlohmann::json{{"command", "eval"},
                                                     {"checkpoint", a.checkpoint},
                                                     {"split", a.split},
                                                     {"mode", to_string(mode)},
                                                     {"ks", ks},
                                                     {"corpus_spec_hash", bundle.spec.hash()},
                                                     {"files", {"eval.json", "eval.csv", "per_predicate.csv"}}}
                                          .dump(2));
  }
  return 0;
}

struct AblateArgs {
  std::string grid = "full", data, out;
  int seeds = 0;
};

int run_ablate(const AblateArgs& a) {
  AblationGrid grid;
  if (fs::exists(a.grid)) {
    std::ifstream in(a.grid);
    grid = AblationGrid::from_json(nlohmann::json::parse(in));
  } else {
    grid = builtin_grid(a.grid);
  }
  if (a.seeds > 0) {
    grid.seeds.clear();
    for (int s = 0; s < a.seeds; ++s) grid.seeds.push_back(std::uint64_t(s));
  }
  const CorpusBundle bundle = load_corpus(data_dir(a.data));
  const AblationTable table =
      run_ablation(grid, bundle, fs::path(a.out), [](const std::string& line) { std::cerr << line << '\n'; });
  std::cout << table.to_text();
  for (const AblationRow& row : table.rows)
    for (const std::string& f : row.failures) std::cerr << row.cell.label << ": " << f << '\n';
  return 0;
}

struct ReportArgs {
  std::vector<std::string> runs;
  std::string out;
};

void collect_runs(const fs::path& root, std::vector<fs::path>& found) {
  if (fs::is_regular_file(root)) {
    found.push_back(root);
    return;
  }
  if (!fs::is_directory(root)) throw DataError(root.string() + ": no such run directory");
  if (fs::exists(root / "run.json")) {
    found.push_back(root / "run.json");
    return;
  }
  std::vector<fs::path> children;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) children.push_back(e.path());
  std::sort(children.begin(), children.end());
  for (const fs::path& c : children)
    if (fs::exists(c / "run.json")) found.push_back(c / "run.json");
}

int run_report(const ReportArgs& a) {
  std::vector<fs::path> files;
  for (const std::string& r : a.runs) collect_runs(r, files);
  if (files.empty()) throw DataError("no run.json found under the given --runs");
  std::vector<RunRecord> records;
  for (const fs::path& f : files) {
    std::ifstream in(f);
    try {
      records.push_back(RunRecord::from_json(nlohmann::json::parse(in)));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(f.string() + ": " + e.what());
    }
  }
  const auto& cfg = records.front().config;
  if (!cfg.contains("partition")) throw DataError(files.front().string() + ": run has no predicate partition");
  const PartitionSpec partition = partition_from_json(cfg.at("partition"));
  const ReportFiles out = report(records, partition, a.out);
  nlohmann::json inputs = nlohmann::json::array();
  for (const fs::path& f : files) inputs.push_back(f.string());
  write_text(fs::path(a.out) / "manifest.json",
             nlohmann::json{{"command", "report"},
                            {"runs", inputs},
                            {"files", {"results.csv", "per_predicate_diff.csv", "curves.csv"}}}
                 .dump(2));
  std::cout << "wrote " << out.results.string() << ", " << out.per_predicate_diff.string() << ", "
            << out.curves.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Relation-alignment scene-graph experiments on a synthetic long-tail corpus"};
  app.require_subcommand(1);
  std::map<CLI::App*, std::string> config_files;
  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_files[sub], "flat key=value file; its values override flags")
        ->check(CLI::ExistingFile);
  };

  GenArgs gen;
  CLI::App* gen_cmd = app.add_subcommand("gen", "generate a corpus");
  gen_cmd->add_option("--out", gen.out, "output directory (default: $RELALIGN_DATA)");
  gen_cmd->add_option("--n-train", gen.spec.n_train)->capture_default_str();
  gen_cmd->add_option("--n-val", gen.spec.n_val)->capture_default_str();
  gen_cmd->add_option("--n-test", gen.spec.n_test)->capture_default_str();
  gen_cmd->add_option("--num-object-classes", gen.spec.num_object_classes)->capture_default_str();
  gen_cmd->add_option("--num-predicates", gen.spec.num_predicates, "including background")->capture_default_str();
  gen_cmd->add_option("--height", gen.spec.height)->capture_default_str();
  gen_cmd->add_option("--width", gen.spec.width)->capture_default_str();
  gen_cmd->add_option("--channels", gen.spec.channels)->capture_default_str();
  gen_cmd->add_option("--max-entities", gen.spec.max_entities)->capture_default_str();
  gen_cmd->add_option("--zipf", gen.spec.zipf_s)->capture_default_str();
  gen_cmd->add_option("--seed", gen.spec.seed)->capture_default_str();
  gen_cmd->add_option("--min-box-cells", gen.spec.min_box_cells)->capture_default_str();
  gen_cmd->add_option("--max-box-cells", gen.spec.max_box_cells)->capture_default_str();
  gen_cmd->add_option("--entity-signal", gen.spec.entity_signal)->capture_default_str();
  gen_cmd->add_option("--relation-signal", gen.spec.relation_signal)->capture_default_str();
  gen_cmd->add_option("--role-signal", gen.spec.role_signal)->capture_default_str();
  gen_cmd->add_option("--noise", gen.spec.noise)->capture_default_str();
  gen_cmd->add_option("--class-affinity", gen.spec.class_affinity)->capture_default_str();
  add_config(gen_cmd);

  TrainArgs train;
  CLI::App* train_cmd = app.add_subcommand("train", "train one model");
  train_cmd->add_option("--data", train.data, "corpus directory (default: $RELALIGN_DATA)");
  train_cmd->add_option("--out", train.out, "run directory")->required();
  train_cmd->add_option("--model", train.model)->check(CLI::IsMember({"mini-sgtr", "mini-motifs"}))
      ->capture_default_str();
  train_cmd->add_option("--mode", train.mode, "predcls, sgcls or sgdet (default: sgdet for mini-sgtr, else predcls)")
      ->check(CLI::IsMember({"predcls", "sgcls", "sgdet"}));
  train_cmd->add_option("--align", train.align)->check(CLI::IsMember({"ssa", "sa", "off"}))->capture_default_str();
  train_cmd->add_option("--head", train.head)->check(CLI::IsMember({"untied", "tied"}))->capture_default_str();
  train_cmd->add_option("--p", train.p, "mask probability")->check(CLI::Range(0.0, 1.0))->capture_default_str();
  train_cmd->add_option("--lambda", train.lambda, "alignment weight")->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  train_cmd->add_option("--seed", train.seed)->capture_default_str();
  train_cmd->add_option("--mask-seed", train.mask_seed)->capture_default_str();
  train_cmd->add_option("--iterations", train.iterations)->capture_default_str();
  train_cmd->add_option("--batch-size", train.batch)->capture_default_str();
  train_cmd->add_option("--eval-every", train.eval_every)->capture_default_str();
  train_cmd->add_option("--lr", train.lr, "0 selects the family default")->capture_default_str();
  train_cmd->add_option("--weight-decay", train.weight_decay, "< 0 selects the family default")
      ->capture_default_str();
  train_cmd->add_option("--clip", train.clip, "global gradient norm bound")->capture_default_str();
  train_cmd->add_option("--k", train.ks, "comma-separated K values")->capture_default_str();
  train_cmd->add_option("--train-subset", train.train_subset, "first n training samples (0 = all)");
  train_cmd->add_option("--val-subset", train.val_subset);
  train_cmd->add_option("--test-subset", train.test_subset);
  train_cmd->add_option("--model-overrides", train.overrides, "JSON merged into the model config");
  train_cmd->add_flag("--no-checkpoints", train.no_checkpoints, "only write best.json");
  train_cmd->add_flag("--no-graph-constraint", train.no_graph_constraint);
  add_config(train_cmd);

  EvalArgs eval;
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", eval.checkpoint)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--split", eval.split)->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
  eval_cmd->add_option("--k", eval.ks, "comma-separated K values")->capture_default_str();
  eval_cmd->add_option("--mode", eval.mode, "default: the mode the checkpoint was trained in")
      ->check(CLI::IsMember({"predcls", "sgcls", "sgdet"}));
  eval_cmd->add_option("--data", eval.data, "corpus directory (default: $RELALIGN_DATA)");
  eval_cmd->add_option("--out", eval.out, "write eval.json, eval.csv, per_predicate.csv here");
  eval_cmd->add_flag("--no-graph-constraint", eval.no_graph_constraint);
  add_config(eval_cmd);

  AblateArgs ablate;
  CLI::App* ablate_cmd = app.add_subcommand("ablate", "run an ablation grid");
  ablate_cmd->add_option("--grid", ablate.grid, "grid JSON file or built-in name (components, p_sweep, lambda_sweep, full)")
      ->capture_default_str();
  ablate_cmd->add_option("--seeds", ablate.seeds, "use seeds 0..N-1 (default: the grid's, 0..3)");
  ablate_cmd->add_option("--data", ablate.data, "corpus directory (default: $RELALIGN_DATA)");
  ablate_cmd->add_option("--out", ablate.out, "output directory")->required();
  add_config(ablate_cmd);

  ReportArgs rep;
  CLI::App* report_cmd = app.add_subcommand("report", "summarize finished runs");
  report_cmd->add_option("--runs", rep.runs, "run directories, parents of run directories, or run.json files")
      ->required();
  report_cmd->add_option("--out", rep.out, "output directory")->required();
  add_config(report_cmd);

  CLI11_PARSE(app, argc, argv);
  try {
    for (CLI::App* sub : app.get_subcommands()) apply_config_file(*sub, config_files[sub]);
    if (gen_cmd->parsed()) return run_gen(gen);
    if (train_cmd->parsed()) return run_train(train);
    if (eval_cmd->parsed()) return run_eval(eval);
    if (ablate_cmd->parsed()) return run_ablate(ablate);
    if (report_cmd->parsed()) return run_report(rep);
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
