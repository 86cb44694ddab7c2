#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "skd/encoder.hpp"
#include "skd/optimizer.hpp"

namespace skd {

// Checkpoint container: one JSON header line {schema_version, kind, config,
// tensors: name -> {dtype, shape, offset}, payload_bytes} followed by the f32
// payload with tensors ordered by name, then an optimizer-state section with
// the identical layout. Encoder and probe checkpoints share this container.

struct Container {
  int schema_version = 1;
  std::string kind;  // "encoder" or "probe"
  nlohmann::json config;
  TensorMap params;
  bool has_optimizer = false;
  int64_t optimizer_step = 0;
  TensorMap optimizer_tensors;  // "m.<name>" / "v.<name>"
};

void save_container(const std::filesystem::path& path, const Container& container);
Container load_container(const std::filesystem::path& path);

void save_model(const std::filesystem::path& path, const Model& model,
                const AdamState* opt = nullptr);
Model load_model(const std::filesystem::path& path, AdamState* opt = nullptr);

}  // namespace skd
