#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace skd {

// On-disk artifact files share one framing: a single-line JSON header
// terminated by '\n', followed by a raw little-endian payload. Floats are
// stored as f32, labels as u32.

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);
uint64_t file_checksum(const std::filesystem::path& path);
std::string checksum_hex(uint64_t h);

void append_line(const std::filesystem::path& path, const std::string& line);

std::string pack_f32(const std::vector<double>& values);
std::vector<double> unpack_f32(const std::string& bytes, size_t offset, size_t count);
std::string pack_u32(const std::vector<uint32_t>& values);
std::vector<uint32_t> unpack_u32(const std::string& bytes, size_t offset, size_t count);

/// Serialize header + payload; header gains no framing fields, callers are
/// expected to store payload sizes themselves when they need them.
void write_header_payload(const std::filesystem::path& path, const nlohmann::json& header,
                          const std::string& payload);

struct HeaderPayload {
  nlohmann::json header;
  std::string payload;  // bytes after the header newline
};
HeaderPayload read_header_payload(const std::filesystem::path& path);

/// One JSON object per line.
std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& rows);

}  // namespace skd
