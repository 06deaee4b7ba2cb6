#include "relalign/codec.hpp"

#include <fstream>

namespace relalign {

using json = nlohmann::ordered_json;

json sample_to_json(const SceneSample& sample) {
  const FeatureGrid& g = sample.feature_grid;
  json grid = json::array();
  for (int r = 0; r < g.height; ++r) {
    json row = json::array();
    for (int c = 0; c < g.width; ++c) {
      const auto cell = g.cell(r, c);
      row.push_back(json(std::vector<double>(cell.begin(), cell.end())));
    }
    grid.push_back(std::move(row));
  }
  json entities = json::array();
  for (const Entity& e : sample.entities)
    entities.push_back({{"box", {e.box.x_min, e.box.y_min, e.box.x_max, e.box.y_max}},
                        {"class_id", e.class_id},
                        {"instance_id", e.instance_id}});
  json relations = json::array();
  for (const RelationTriplet& r : sample.relations)
    relations.push_back(
        {{"subject_id", r.subject_id}, {"object_id", r.object_id}, {"predicate_id", r.predicate_id}});

  return {{"sample_id", sample.sample_id},
          {"feature_grid", std::move(grid)},
          {"entities", std::move(entities)},
          {"relations", std::move(relations)}};
}

SceneSample sample_from_json(const json& j) {
  SceneSample s;
  s.sample_id = j.at("sample_id").get<std::int64_t>();
  const json& grid = j.at("feature_grid");
  const int h = static_cast<int>(grid.size());
  const int w = h > 0 ? static_cast<int>(grid.at(0).size()) : 0;
  const int c = w > 0 ? static_cast<int>(grid.at(0).at(0).size()) : 0;
  s.feature_grid = FeatureGrid(h, w, c);
  for (int r = 0; r < h; ++r) {
    if (static_cast<int>(grid[r].size()) != w) throw DataError("ragged feature_grid row");
    for (int col = 0; col < w; ++col) {
      const json& cell = grid[r][col];
      if (static_cast<int>(cell.size()) != c) throw DataError("ragged feature_grid cell");
      for (int k = 0; k < c; ++k) s.feature_grid.at(r, col, k) = cell[k].get<double>();
    }
  }
  for (const json& e : j.at("entities")) {
    const json& b = e.at("box");
    if (b.size() != 4) throw DataError("box must have 4 coordinates");
    s.entities.push_back({{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()},
                          e.at("class_id").get<int>(),
                          e.at("instance_id").get<int>()});
  }
  for (const json& r : j.at("relations"))
    s.relations.push_back(
        {r.at("subject_id").get<int>(), r.at("object_id").get<int>(), r.at("predicate_id").get<int>()});
  return s;
}

std::string encode_sample(const SceneSample& sample) { return sample_to_json(sample).dump(); }

SceneSample decode_sample(const std::string& line) {
  try {
    return sample_from_json(json::parse(line));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(e.what());
  }
}

void write_jsonl(const std::filesystem::path& path, const std::vector<SceneSample>& samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path.string() + ": cannot open for writing");
  for (const SceneSample& s : samples) out << encode_sample(s) << '\n';
  if (!out) throw DataError(path.string() + ": write failed");
}

std::vector<SceneSample> read_jsonl(const std::filesystem::path& path, int num_object_classes, int num_predicates) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path.string() + ": cannot open");
  std::vector<SceneSample> samples;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
    SceneSample s;
    try {
      s = decode_sample(line);
    } catch (const DataError& e) {
      throw DataError(where + e.what());
    }
    const ValidationVerdict v = validate_sample(s, num_object_classes, num_predicates);
    if (!v.ok()) throw DataError(where + v.violations.front().code + ": " + v.violations.front().detail);
    samples.push_back(std::move(s));
  }
  return samples;
}

nlohmann::json matrix_to_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

Matrix matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(data.size()) != rows * cols) throw DataError("matrix data size mismatch");
  Matrix m(rows, cols);
  std::copy(data.begin(), data.end(), m.data());
  return m;
}

}  // namespace relalign
