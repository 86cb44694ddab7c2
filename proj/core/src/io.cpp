#include "skd/io.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "skd/errors.hpp"
#include "skd/rng.hpp"

namespace skd {

namespace fs = std::filesystem;

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DependencyError("cannot open for writing: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DependencyError("short write: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DependencyError("cannot open: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

uint64_t file_checksum(const fs::path& path) {
  const std::string bytes = read_file(path);
  return fnv1a64(bytes.data(), bytes.size());
}

std::string checksum_hex(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

void append_line(const fs::path& path, const std::string& line) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw DependencyError("cannot open for append: " + path.string());
  out << line << '\n';
}

std::string pack_f32(const std::vector<double>& values) {
  std::string bytes(values.size() * 4, '\0');
  for (size_t i = 0; i < values.size(); ++i) {
    const float f = static_cast<float>(values[i]);
    std::memcpy(bytes.data() + i * 4, &f, 4);
  }
  return bytes;
}

std::vector<double> unpack_f32(const std::string& bytes, size_t offset, size_t count) {
  if (offset + count * 4 > bytes.size()) throw ConfigError("f32 payload out of range");
  std::vector<double> out(count);
  for (size_t i = 0; i < count; ++i) {
    float f;
    std::memcpy(&f, bytes.data() + offset + i * 4, 4);
    out[i] = static_cast<double>(f);
  }
  return out;
}

std::string pack_u32(const std::vector<uint32_t>& values) {
  std::string bytes(values.size() * 4, '\0');
  for (size_t i = 0; i < values.size(); ++i) {
    std::memcpy(bytes.data() + i * 4, &values[i], 4);
  }
  return bytes;
}

std::vector<uint32_t> unpack_u32(const std::string& bytes, size_t offset, size_t count) {
  if (offset + count * 4 > bytes.size()) throw ConfigError("u32 payload out of range");
  std::vector<uint32_t> out(count);
  for (size_t i = 0; i < count; ++i) {
    std::memcpy(&out[i], bytes.data() + offset + i * 4, 4);
  }
  return out;
}

void write_header_payload(const fs::path& path, const nlohmann::json& header,
                          const std::string& payload) {
  std::string bytes = header.dump();
  bytes += '\n';
  bytes += payload;
  write_file_atomic(path, bytes);
}

HeaderPayload read_header_payload(const fs::path& path) {
  const std::string bytes = read_file(path);
  const size_t nl = bytes.find('\n');
  if (nl == std::string::npos) throw ConfigError("missing header line: " + path.string());
  HeaderPayload hp;
  try {
    hp.header = nlohmann::json::parse(bytes.substr(0, nl));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad header in " + path.string() + ": " + e.what());
  }
  hp.payload = bytes.substr(nl + 1);
  return hp;
}

std::vector<nlohmann::json> read_jsonl(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DependencyError("cannot open: " + path.string());
  std::vector<nlohmann::json> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      rows.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("bad JSONL line in " + path.string() + ": " + e.what());
    }
  }
  return rows;
}

void write_jsonl(const fs::path& path, const std::vector<nlohmann::json>& rows) {
  std::string bytes;
  for (const auto& row : rows) {
    bytes += row.dump();
    bytes += '\n';
  }
  write_file_atomic(path, bytes);
}

}  // namespace skd
