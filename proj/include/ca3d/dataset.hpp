// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ca3d/geometry.hpp"

namespace ca3d::data {

inline constexpr const char* kPairsFile = "pairs.ca3d";
inline constexpr const char* kManifestFile = "manifest.tsv";

struct DatasetSpec {
  std::int64_t count = 500;
  geometry::PhantomSpec phantom;
  geometry::PairNormalization normalization;
  std::uint64_t seed = 0;
  /// Split fractions; test takes the remainder.
  double train_fraction = 0.8;
  double val_fraction = 0.1;

  void validate() const;
};

struct ManifestEntry {
  std::uint64_t id = 0;
  std::uint64_t seed = 0;
  std::string split;
};

struct SplitCounts {
  std::int64_t train = 0, val = 0, test = 0;
};

/// Phantom seed for sample `index` (distinct for distinct indices).
std::uint64_t sample_seed(std::uint64_t dataset_seed, std::uint64_t index);

/// Assigns exactly floor(count * train_fraction) train and
/// floor(count * val_fraction) val items, chosen by a seeded shuffle.
std::vector<ManifestEntry> make_manifest(const DatasetSpec& spec);
SplitCounts count_splits(const std::vector<ManifestEntry>& manifest);

std::string format_manifest(const std::vector<ManifestEntry>& manifest);
std::vector<ManifestEntry> parse_manifest(const std::string& text);

/// Renders every pair and writes pairs.ca3d plus manifest.tsv into `dir`.
SplitCounts dataset_generate(const std::filesystem::path& dir, const DatasetSpec& spec);

struct Dataset {
  std::vector<ManifestEntry> manifest;
  std::vector<geometry::ViewPair> pairs;  // manifest order

  std::vector<geometry::ViewPair> split(const std::string& name) const;
};

Dataset dataset_load(const std::filesystem::path& dir);

/// 8-bit binary PGM (P5, maxval 255); values clamped to [0, 1].
void write_pgm(const std::filesystem::path& path, const geometry::Image& img);
geometry::Image read_pgm(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_pgm(const geometry::Image& img);

}  // namespace ca3d::data
