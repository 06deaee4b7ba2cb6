// Python bindings. Structured values (configs, reports, samples) cross the
// boundary as JSON text; the package __init__ turns them into dicts.

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <filesystem>
#include <optional>

#include <json.hpp>

#include "relalign/align.hpp"
#include "relalign/codec.hpp"
#include "relalign/datagen.hpp"
#include "relalign/harness.hpp"
#include "relalign/masking.hpp"

namespace py = pybind11;
using namespace relalign;

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

const std::vector<SceneSample>& split_of(const CorpusBundle& b, const std::string& name) {
  if (name == "train") return b.corpus.train;
  if (name == "val") return b.corpus.val;
  if (name == "test") return b.corpus.test;
  throw py::value_error("unknown split '" + name + "'");
}

std::optional<std::filesystem::path> optional_path(const std::optional<std::string>& s) {
  if (!s) return std::nullopt;
  return std::filesystem::path(*s);
}

std::vector<PredicateDistribution> rows_of(const RowMatrix& m) {
  std::vector<PredicateDistribution> out(std::size_t(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) out[std::size_t(i)].probs.assign(m.row(i).data(), m.row(i).data() + m.cols());
  return out;
}

}  // namespace

PYBIND11_MODULE(_relalign, m) {
  m.doc() = "Relation alignment on synthetic scene graphs";

  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<UnsupportedModeError>(m, "UnsupportedModeError", PyExc_ValueError);

  py::class_<CorpusBundle>(m, "Bundle")
      .def_property_readonly("spec_json", [](const CorpusBundle& b) { return to_json(b.spec).dump(); })
      .def_property_readonly("spec_hash", [](const CorpusBundle& b) { return b.spec.hash(); })
      .def_property_readonly("partition_json", [](const CorpusBundle& b) { return to_json(b.partition).dump(); })
      .def_property_readonly("prior_json", [](const CorpusBundle& b) { return to_json(b.prior).dump(); })
      .def("size", [](const CorpusBundle& b, const std::string& split) { return split_of(b, split).size(); })
      .def("sample_json",
           [](const CorpusBundle& b, const std::string& split, std::size_t i) {
             const auto& s = split_of(b, split);
             if (i >= s.size()) throw py::index_error();
             return encode_sample(s[i]);
           })
      .def("write", [](const CorpusBundle& b, const std::string& dir) {
        std::filesystem::create_directories(dir);
        write_corpus(dir, b);
      });

  m.def(
      "make_bundle",
      [](const std::string& spec_json) {
        py::gil_scoped_release release;
        return make_bundle(corpus_spec_from_json(nlohmann::json::parse(spec_json)));
      },
      py::arg("spec_json"));
  m.def("load_corpus", [](const std::string& dir) { return load_corpus(dir); }, py::arg("dir"));

  m.def(
      "mask_rows",
      [](const RowMatrix& features, double p, std::uint64_t seed, std::uint64_t stream) {
        Rng rng(seed, stream);
        return RowMatrix(mask_features({features}, {p, seed, false}, rng).features);
      },
      py::arg("features"), py::arg("p"), py::arg("seed") = 0, py::arg("stream") = 0,
      "Zero each row independently with probability p.");
  m.def(
      "mask_attention_logits",
      [](const RowMatrix& scores, double p, std::uint64_t seed, std::uint64_t stream) {
        Rng rng(seed, stream);
        return RowMatrix(mask_attention_logits(scores, {p, seed, false}, rng));
      },
      py::arg("scores"), py::arg("p"), py::arg("seed") = 0, py::arg("stream") = 0,
      "Set entries to -inf with probability p, never a whole row.");

  m.def(
      "kl_alignment_loss",
      [](const RowMatrix& target, const RowMatrix& masked) {
        return kl_alignment_loss(AlignTarget(rows_of(target)), rows_of(masked));
      },
      py::arg("target"), py::arg("masked"), "Mean over rows of KL(target || masked).");
  m.def(
      "kl_alignment_grad",
      [](const RowMatrix& target, const RowMatrix& masked) {
        ad::Tensor q = ad::Tensor::parameter(masked);
        ad::Tensor loss = kl_alignment_loss(AlignTarget(rows_of(target)), q);
        loss.backward();
        return py::make_tuple(loss.item(), RowMatrix(q.grad()));
      },
      py::arg("target"), py::arg("masked"), "(loss, d loss / d masked).");
  m.def(
      "combine_losses",
      [](double l_original, double l_align, double lambda, const std::string& target_mode) {
        AlignConfig cfg;
        cfg.lambda_weight = lambda;
        cfg.target_mode = parse_target_mode(target_mode);
        return combine_losses(l_original, l_align, cfg);
      },
      py::arg("l_original"), py::arg("l_align"), py::arg("lambda_weight") = 10.0, py::arg("target_mode") = "ssa");

  m.def(
      "train",
      [](const std::string& config_json, const CorpusBundle& bundle, const std::optional<std::string>& out) {
        const TrainConfig cfg = TrainConfig::from_json(nlohmann::json::parse(config_json));
        py::gil_scoped_release release;
        return run_training(cfg, bundle, optional_path(out)).to_json().dump();
      },
      py::arg("config_json"), py::arg("bundle"), py::arg("out") = py::none());
  m.def(
      "evaluate_checkpoint",
      [](const std::string& path, const CorpusBundle& bundle, const std::string& split, const std::vector<int>& ks,
         const std::optional<std::string>& mode) {
        LoadedCheckpoint ckpt = load_checkpoint(path);
        if (!ckpt.corpus_hash.empty() && ckpt.corpus_hash != bundle.spec.hash())
          throw DataError(path + ": trained on corpus " + ckpt.corpus_hash + ", data is " + bundle.spec.hash());
        EvalMode m = ckpt.model->family() == ModelFamily::MiniSgtr ? EvalMode::SgDet : EvalMode::PredCls;
        if (ckpt.extra.contains("mode")) m = parse_eval_mode(ckpt.extra.at("mode").get<std::string>());
        if (mode) m = parse_eval_mode(*mode);
        py::gil_scoped_release release;
        return evaluate(*ckpt.model, split_of(bundle, split), m, ks, bundle.partition).to_json().dump();
      },
      py::arg("path"), py::arg("bundle"), py::arg("split") = "test", py::arg("ks") = std::vector<int>{20, 50, 100},
      py::arg("mode") = py::none());
  m.def(
      "run_ablation",
      [](const std::string& grid_json, const CorpusBundle& bundle, const std::optional<std::string>& out) {
        const AblationGrid grid = AblationGrid::from_json(nlohmann::json::parse(grid_json));
        py::gil_scoped_release release;
        return run_ablation(grid, bundle, optional_path(out)).to_json().dump();
      },
      py::arg("grid_json"), py::arg("bundle"), py::arg("out") = py::none());
  m.def("builtin_grid_json", [](const std::string& name) { return builtin_grid(name).to_json().dump(); },
        py::arg("name"));
}
