#include "skd/checkpoint.hpp"

#include "skd/errors.hpp"
#include "skd/io.hpp"

namespace skd {

namespace {

nlohmann::json tensor_directory(const TensorMap& tensors, std::string* payload) {
  nlohmann::json dir = nlohmann::json::object();
  size_t offset = 0;
  for (const auto& [name, t] : tensors) {  // std::map keeps names sorted
    dir[name] = {{"dtype", "f32"}, {"shape", t.shape()}, {"offset", offset}};
    std::vector<double> values(t.data(), t.data() + t.numel());
    *payload += pack_f32(values);
    offset += t.numel() * 4;
  }
  return dir;
}

TensorMap read_tensors(const nlohmann::json& dir, const std::string& payload) {
  TensorMap out;
  for (const auto& [name, meta] : dir.items()) {
    if (meta.at("dtype").get<std::string>() != "f32") {
      throw ConfigError("checkpoint tensor " + name + " has unsupported dtype");
    }
    const auto shape = meta.at("shape").get<std::vector<int64_t>>();
    const size_t offset = meta.at("offset").get<size_t>();
    Tensor t(shape);
    const auto values = unpack_f32(payload, offset, t.numel());
    std::copy(values.begin(), values.end(), t.data());
    out.emplace(name, std::move(t));
  }
  return out;
}

}  // namespace

void save_container(const std::filesystem::path& path, const Container& container) {
  std::string param_payload;
  nlohmann::json header;
  header["schema_version"] = container.schema_version;
  header["kind"] = container.kind;
  header["config"] = container.config;
  header["tensors"] = tensor_directory(container.params, &param_payload);
  header["payload_bytes"] = param_payload.size();

  std::string opt_payload;
  nlohmann::json opt_header;
  opt_header["present"] = container.has_optimizer;
  opt_header["step"] = container.optimizer_step;
  opt_header["tensors"] =
      container.has_optimizer ? tensor_directory(container.optimizer_tensors, &opt_payload)
                              : nlohmann::json::object();
  opt_header["payload_bytes"] = opt_payload.size();

  std::string bytes = header.dump();
  bytes += '\n';
  bytes += param_payload;
  bytes += opt_header.dump();
  bytes += '\n';
  bytes += opt_payload;
  write_file_atomic(path, bytes);
}

Container load_container(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const size_t nl = bytes.find('\n');
  if (nl == std::string::npos) throw ConfigError("checkpoint missing header: " + path.string());

  Container container;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(0, nl));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad checkpoint header in " + path.string() + ": " + e.what());
  }
  container.schema_version = header.at("schema_version").get<int>();
  container.kind = header.at("kind").get<std::string>();
  container.config = header.at("config");
  const size_t payload_bytes = header.at("payload_bytes").get<size_t>();
  const size_t payload_start = nl + 1;
  if (payload_start + payload_bytes > bytes.size()) {
    throw ConfigError("truncated checkpoint payload: " + path.string());
  }
  container.params =
      read_tensors(header.at("tensors"), bytes.substr(payload_start, payload_bytes));

  const size_t opt_start = payload_start + payload_bytes;
  const size_t opt_nl = bytes.find('\n', opt_start);
  if (opt_nl == std::string::npos) {
    throw ConfigError("checkpoint missing optimizer section: " + path.string());
  }
  nlohmann::json opt_header;
  try {
    opt_header = nlohmann::json::parse(bytes.substr(opt_start, opt_nl - opt_start));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad optimizer header in " + path.string() + ": " + e.what());
  }
  container.has_optimizer = opt_header.at("present").get<bool>();
  container.optimizer_step = opt_header.at("step").get<int64_t>();
  if (container.has_optimizer) {
    const size_t opt_bytes = opt_header.at("payload_bytes").get<size_t>();
    container.optimizer_tensors =
        read_tensors(opt_header.at("tensors"), bytes.substr(opt_nl + 1, opt_bytes));
  }
  return container;
}

void save_model(const std::filesystem::path& path, const Model& model, const AdamState* opt) {
  Container container;
  container.kind = "encoder";
  container.config = model.config.to_json();
  container.params = model.params;
  if (opt) {
    container.has_optimizer = true;
    container.optimizer_step = opt->step;
    for (const auto& [name, t] : opt->m) container.optimizer_tensors.emplace("m." + name, t);
    for (const auto& [name, t] : opt->v) container.optimizer_tensors.emplace("v." + name, t);
  }
  save_container(path, container);
}

Model load_model(const std::filesystem::path& path, AdamState* opt) {
  Container container = load_container(path);
  if (container.kind != "encoder") {
    throw ConfigError("not an encoder checkpoint: " + path.string());
  }
  Model model;
  model.config = EncoderConfig::from_json(container.config);
  model.params = std::move(container.params);

  // Shape audit against the config.
  for (const auto& [name, shape] : parameter_shapes(model.config)) {
    auto it = model.params.find(name);
    if (it == model.params.end()) {
      throw ConfigError("checkpoint missing tensor " + name + ": " + path.string());
    }
    if (it->second.shape() != shape) {
      throw ConfigError("checkpoint tensor shape mismatch for " + name + ": " + path.string());
    }
  }

  if (opt) {
    *opt = AdamState{};
    if (container.has_optimizer) {
      opt->step = container.optimizer_step;
      for (auto& [name, t] : container.optimizer_tensors) {
        if (name.starts_with("m.")) {
          opt->m.emplace(name.substr(2), std::move(t));
        } else if (name.starts_with("v.")) {
          opt->v.emplace(name.substr(2), std::move(t));
        }
      }
    }
  }
  return model;
}

}  // namespace skd
