#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "relalign/types.hpp"

namespace relalign {

/// Malformed input file; the message carries "path:line:" context.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::ordered_json sample_to_json(const SceneSample& sample);
SceneSample sample_from_json(const nlohmann::ordered_json& j);

/// One JSON object, no trailing newline.
std::string encode_sample(const SceneSample& sample);
SceneSample decode_sample(const std::string& line);

void write_jsonl(const std::filesystem::path& path, const std::vector<SceneSample>& samples);
/// Reads and validates every line; throws DataError with file/line context.
std::vector<SceneSample> read_jsonl(const std::filesystem::path& path, int num_object_classes = 0,
                                    int num_predicates = 0);

nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j);

}  // namespace relalign
