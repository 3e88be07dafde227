// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ca3d/tensor.hpp"

namespace ca3d::io {

inline constexpr char kMagic[4] = {'C', 'A', '3', 'D'};
inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::size_t kHeaderBytes = 12;

enum class DType : std::uint32_t { kF32 = 0, kU8 = 1 };

/// One named record. Exactly one of f32 / u8 holds the payload.
struct Record {
  std::string name;
  std::vector<std::uint64_t> dims;
  DType dtype = DType::kF32;
  std::vector<float> f32;
  std::vector<std::uint8_t> u8;
  /// Filled on read.
  std::uint32_t stored_crc = 0;
  std::uint32_t computed_crc = 0;
  bool checksum_ok() const { return stored_crc == computed_crc; }

  static Record from_tensor(std::string name, const Tensor& t);
  static Record from_text(std::string name, const std::string& text);
  Tensor to_tensor() const;
  std::string text() const;
};

struct Container {
  std::vector<Record> records;

  const Record* find(const std::string& name) const;
  const Record& at(const std::string& name) const;
  /// Names of records whose checksum does not match the payload.
  std::vector<std::string> corrupt_records() const;
};

std::uint32_t crc32(const void* data, std::size_t size);

std::vector<std::uint8_t> serialize(const std::vector<Record>& records);
/// Structural problems throw (bad magic, truncation, duplicate names,
/// unsupported version); checksum mismatches are only flagged per record.
Container parse(const std::vector<std::uint8_t>& bytes);

/// Written to a temporary sibling and renamed into place.
void write_container(const std::filesystem::path& path, const std::vector<Record>& records);
Container read_container(const std::filesystem::path& path);

/// float32 records as tensors; throws ErrorCode::kChecksum on any mismatch.
std::map<std::string, Tensor> read_tensors(const std::filesystem::path& path);

void write_file_atomic(const std::filesystem::path& path, const void* data, std::size_t size);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

}  // namespace ca3d::io
