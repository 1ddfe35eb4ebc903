#include "dastr/checkpoint.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include "dastr/common.hpp"

namespace dastr {

namespace {

constexpr const char* kFormat = "dastr-checkpoint";
constexpr int kVersion = 1;

}  // namespace

nlohmann::json tensor_to_json(const Tensor& tensor) {
  nlohmann::json j;
  j["rows"] = tensor.rows;
  j["cols"] = tensor.cols;
  nlohmann::json data = nlohmann::json::array();
  for (const double v : tensor.data) {
    if (!std::isfinite(v)) throw make_error("tensor_to_json: non-finite entry ", v);
    data.push_back(v);
  }
  j["data"] = std::move(data);
  return j;
}

Tensor tensor_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("rows") || !j.contains("cols") || !j.contains("data")) {
    throw make_error("tensor_from_json: expected object with rows/cols/data");
  }
  const std::int64_t rows = j.at("rows").get<std::int64_t>();
  const std::int64_t cols = j.at("cols").get<std::int64_t>();
  const auto& data = j.at("data");
  if (!data.is_array() || static_cast<std::int64_t>(data.size()) != rows * cols) {
    throw make_error("tensor_from_json: data length ", data.size(), " does not match ", rows,
                     "x", cols);
  }
  Tensor t(rows, cols);
  for (std::size_t i = 0; i < data.size(); ++i) {
    t.data[i] = data[i].get<double>();
  }
  return t;
}

nlohmann::json json_number(double value) {
  if (std::isfinite(value)) return value;
  if (std::isnan(value)) return "nan";
  return value > 0 ? "inf" : "-inf";
}

double number_from_json(const nlohmann::json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const std::string s = j.get<std::string>();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
  }
  throw make_error("number_from_json: not a scalar: ", j.dump());
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  nlohmann::json j;
  j["format"] = kFormat;
  j["version"] = kVersion;
  j["kind"] = checkpoint.kind;
  j["meta"] = checkpoint.meta.is_null() ? nlohmann::json::object() : checkpoint.meta;
  nlohmann::json tensors = nlohmann::json::array();
  for (const Parameter& p : checkpoint.tensors) {
    nlohmann::json t = tensor_to_json(p.value);
    t["name"] = p.name;
    tensors.push_back(std::move(t));
  }
  j["tensors"] = std::move(tensors);

  const std::filesystem::path tmp = path.string() + ".tmp";
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw make_error("save_checkpoint: cannot open ", tmp.string());
    out << j.dump(0) << '\n';
    if (!out) throw make_error("save_checkpoint: write failed for ", tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw make_error("load_checkpoint: cannot open ", path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw make_error("load_checkpoint: ", path.string(), " is not valid JSON: ", e.what());
  }
  if (!j.is_object() || j.value("format", "") != kFormat) {
    throw make_error("load_checkpoint: ", path.string(), " is not a checkpoint file");
  }
  if (j.value("version", -1) != kVersion) {
    throw make_error("load_checkpoint: ", path.string(), " has version ", j.value("version", -1),
                     ", expected ", kVersion);
  }
  Checkpoint cp;
  cp.kind = j.value("kind", "");
  cp.meta = j.value("meta", nlohmann::json::object());
  for (const auto& t : j.at("tensors")) {
    Parameter p;
    p.name = t.at("name").get<std::string>();
    p.value = tensor_from_json(t);
    cp.tensors.push_back(std::move(p));
  }
  return cp;
}

const Tensor& checkpoint_tensor(const Checkpoint& checkpoint, const std::string& name) {
  for (const Parameter& p : checkpoint.tensors) {
    if (p.name == name) return p.value;
  }
  throw make_error("checkpoint_tensor: no tensor named '", name, "' (kind '", checkpoint.kind,
                   "')");
}

bool checkpoint_has_tensor(const Checkpoint& checkpoint, const std::string& name) {
  for (const Parameter& p : checkpoint.tensors) {
    if (p.name == name) return true;
  }
  return false;
}

}  // namespace dastr
