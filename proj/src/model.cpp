#include "relalign/model.hpp"

#include <stdexcept>

namespace relalign {

std::string to_string(ModelFamily family) {
  return family == ModelFamily::MiniSgtr ? "mini-sgtr" : "mini-motifs";
}

ModelFamily parse_model_family(const std::string& text) {
  if (text == "mini-sgtr" || text == "mini_sgtr" || text == "sgtr") return ModelFamily::MiniSgtr;
  if (text == "mini-motifs" || text == "mini_motifs" || text == "motifs") return ModelFamily::MiniMotifs;
  throw std::invalid_argument("unknown model family '" + text + "' (expected mini-sgtr or mini-motifs)");
}

ad::ParameterList SceneGraphModel::trainable_parameters() const {
  ad::ParameterList frozen = parameter_group(ParameterGroup::Frozen);
  ad::ParameterList out;
  for (const ad::NamedParameter& p : parameters()) {
    bool is_frozen = false;
    for (const ad::NamedParameter& f : frozen) is_frozen = is_frozen || f.tensor.same_storage(p.tensor);
    if (!is_frozen) out.push_back(p);
  }
  return out;
}

ParameterSnapshot ParameterSnapshot::of(const SceneGraphModel& model) {
  ParameterSnapshot s;
  for (const ad::NamedParameter& p : model.parameters()) s.values.emplace_back(p.name, p.tensor.value());
  return s;
}

void ParameterSnapshot::restore(SceneGraphModel& model) const {
  for (ad::NamedParameter& p : model.parameters()) {
    const Matrix& v = at(p.name);
    if (v.rows() != p.tensor.rows() || v.cols() != p.tensor.cols())
      throw std::invalid_argument("parameter '" + p.name + "' has the wrong shape");
    p.tensor.mutable_value() = v;
  }
}

const Matrix& ParameterSnapshot::at(const std::string& name) const {
  for (const auto& [n, v] : values)
    if (n == name) return v;
  throw std::out_of_range("no parameter named '" + name + "'");
}

std::vector<PredictedTriplet> predict_triplets(const SceneGraphModel& model, const SceneSample& sample, EvalMode mode,
                                               bool graph_constraint) {
  const std::vector<ScoredPair> pairs = model.predict_pairs(sample, mode);
  return expand_pairs(pairs, graph_constraint);
}

EvalReport evaluate(const SceneGraphModel& model, std::span<const SceneSample> split, EvalMode mode,
                    std::span<const int> ks, const PartitionSpec& partition, bool graph_constraint) {
  if (!model.supports(mode)) throw UnsupportedModeError(model.family(), mode);
  const std::uint64_t calls_before = model.mirrored_forward_calls();
  EvalReport report = evaluate_predictions(
      split, [&](const SceneSample& s) { return predict_triplets(model, s, mode, graph_constraint); }, mode, ks,
      partition, model.num_predicates());
  if (model.mirrored_forward_calls() != calls_before)
    throw std::logic_error("evaluation invoked the mirrored branch");
  return report;
}

}  // namespace relalign
