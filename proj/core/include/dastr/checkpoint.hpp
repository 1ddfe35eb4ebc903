#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "dastr/optimizer.hpp"
#include "dastr/tensor.hpp"

namespace dastr {

// A versioned container of named tensors plus free-form scalar metadata,
// stored as JSON.  Doubles round-trip exactly (shortest-representation
// printing), so saving and reloading reproduces training bit-for-bit.
struct Checkpoint {
  std::string kind;      // producer-defined: "stage", "final", "training-set", ...
  nlohmann::json meta;   // object of scalars (stage index, epoch counter, ...)
  std::vector<Parameter> tensors;
};

// Writes atomically: the payload lands in a sibling temp file first and is
// renamed over the target, so an interrupted save never leaves a truncated
// checkpoint behind.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json tensor_to_json(const Tensor& tensor);
Tensor tensor_from_json(const nlohmann::json& j);

// NaN/inf-safe scalar embedding: JSON has no non-finite numbers, so they are
// stored as strings and recovered on read.
nlohmann::json json_number(double value);
double number_from_json(const nlohmann::json& j);

// Positional lookup helpers for consumers that address tensors by name.
const Tensor& checkpoint_tensor(const Checkpoint& checkpoint, const std::string& name);
bool checkpoint_has_tensor(const Checkpoint& checkpoint, const std::string& name);

}  // namespace dastr
