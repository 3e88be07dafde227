// SPDX-License-Identifier: Apache-2.0
#include "ca3d/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "ca3d/container.hpp"
#include "ca3d/error.hpp"
#include "ca3d/rng.hpp"
#include "ca3d/runtime.hpp"

namespace ca3d::data {

namespace {

constexpr std::uint64_t kSplitStream = 0x53504c4954ull;  // "SPLIT"

std::string record_name(const char* view, std::uint64_t id) { return std::string(view) + "." + std::to_string(id); }

}  // namespace

void DatasetSpec::validate() const {
  if (count < 1) fail(ErrorCode::kUsage, "dataset count must be at least 1");
  if (train_fraction < 0.0 || val_fraction < 0.0 || train_fraction + val_fraction > 1.0) {
    fail(ErrorCode::kUsage, "split fractions must be non-negative and sum to at most 1");
  }
  phantom.validate();
}

std::uint64_t sample_seed(std::uint64_t dataset_seed, std::uint64_t index) { return dataset_seed ^ index; }

std::vector<ManifestEntry> make_manifest(const DatasetSpec& spec) {
  spec.validate();
  const auto n = spec.count;
  const auto n_train = static_cast<std::int64_t>(std::floor(static_cast<double>(n) * spec.train_fraction + 1e-9));
  const auto n_val = static_cast<std::int64_t>(std::floor(static_cast<double>(n) * spec.val_fraction + 1e-9));
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng(spec.seed).fork(kSplitStream);
  for (std::int64_t i = n - 1; i > 0; --i) {
    std::swap(order[i], order[rng.below(static_cast<std::uint64_t>(i + 1))]);
  }
  std::vector<ManifestEntry> m(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    m[i].id = static_cast<std::uint64_t>(i);
    m[i].seed = sample_seed(spec.seed, static_cast<std::uint64_t>(i));
  }
  for (std::int64_t k = 0; k < n; ++k) {
    m[order[k]].split = k < n_train ? "train" : (k < n_train + n_val ? "val" : "test");
  }
  return m;
}

SplitCounts count_splits(const std::vector<ManifestEntry>& manifest) {
  SplitCounts c;
  for (const auto& e : manifest) {
    if (e.split == "train") ++c.train;
    else if (e.split == "val") ++c.val;
    else if (e.split == "test") ++c.test;
  }
  return c;
}

std::string format_manifest(const std::vector<ManifestEntry>& manifest) {
  std::string out;
  for (const auto& e : manifest) out += std::to_string(e.id) + "\t" + std::to_string(e.seed) + "\t" + e.split + "\n";
  return out;
}

std::vector<ManifestEntry> parse_manifest(const std::string& text) {
  std::vector<ManifestEntry> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string id, seed, split;
    if (!std::getline(fields, id, '\t') || !std::getline(fields, seed, '\t') || !std::getline(fields, split) ||
        (split != "train" && split != "val" && split != "test")) {
      fail(ErrorCode::kFormat, "manifest line " + std::to_string(lineno) + " is malformed");
    }
    try {
      out.push_back({std::stoull(id), std::stoull(seed), split});
    } catch (const std::exception&) {
      fail(ErrorCode::kFormat, "manifest line " + std::to_string(lineno) + " has a non-numeric field");
    }
  }
  return out;
}

SplitCounts dataset_generate(const std::filesystem::path& dir, const DatasetSpec& spec) {
  const auto manifest = make_manifest(spec);
  std::vector<geometry::ViewPair> pairs(manifest.size());
  parallel_for(static_cast<std::int64_t>(manifest.size()), [&](std::int64_t i) {
    geometry::PhantomSpec ps = spec.phantom;
    ps.seed = manifest[i].seed;
    pairs[i] = geometry::make_pair(geometry::phantom_generate(ps), spec.normalization);
    pairs[i].sample_id = manifest[i].id;
    pairs[i].phantom_seed = manifest[i].seed;
  });

  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) fail(ErrorCode::kIo, "cannot create directory " + dir.string());

  std::vector<io::Record> records;
  records.reserve(2 * pairs.size());
  for (const auto& p : pairs) {
    for (const auto& [view, img] : {std::pair{"cc", &p.cc}, std::pair{"mlo", &p.mlo}}) {
      io::Record r;
      r.name = record_name(view, p.sample_id);
      r.dims = {static_cast<std::uint64_t>(img->height), static_cast<std::uint64_t>(img->width)};
      r.f32 = img->data;
      records.push_back(std::move(r));
    }
  }
  io::write_container(dir / kPairsFile, records);
  io::write_text_atomic(dir / kManifestFile, format_manifest(manifest));
  return count_splits(manifest);
}

std::vector<geometry::ViewPair> Dataset::split(const std::string& name) const {
  std::vector<geometry::ViewPair> out;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    if (manifest[i].split == name) out.push_back(pairs[i]);
  }
  return out;
}

Dataset dataset_load(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / kManifestFile) || !std::filesystem::exists(dir / kPairsFile)) {
    fail(ErrorCode::kIo, "no dataset in " + dir.string() + " (expected " + kManifestFile + " and " + kPairsFile + ")");
  }
  const auto bytes = io::read_file(dir / kManifestFile);
  Dataset ds;
  ds.manifest = parse_manifest(std::string(bytes.begin(), bytes.end()));
  const auto c = io::read_container(dir / kPairsFile);
  if (const auto bad = c.corrupt_records(); !bad.empty()) {
    fail(ErrorCode::kChecksum, "dataset record '" + bad.front() + "' fails its checksum");
  }
  for (const auto& e : ds.manifest) {
    geometry::ViewPair p;
    p.sample_id = e.id;
    p.phantom_seed = e.seed;
    for (const auto& [view, img] : {std::pair{"cc", &p.cc}, std::pair{"mlo", &p.mlo}}) {
      const auto& r = c.at(record_name(view, e.id));
      if (r.dtype != io::DType::kF32 || r.dims.size() != 2) {
        fail(ErrorCode::kFormat, "record '" + r.name + "' is not a 2-D float image");
      }
      *img = geometry::Image(1, static_cast<std::int64_t>(r.dims[0]), static_cast<std::int64_t>(r.dims[1]));
      img->data = r.f32;
    }
    ds.pairs.push_back(std::move(p));
  }
  return ds;
}

std::vector<std::uint8_t> encode_pgm(const geometry::Image& img) {
  if (img.channels != 1) fail(ErrorCode::kShape, "PGM export needs a single-channel image");
  const std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (float v : img.data) {
    const float c = std::clamp(std::isfinite(v) ? v : 0.0f, 0.0f, 1.0f);
    out.push_back(static_cast<std::uint8_t>(std::lround(c * 255.0f)));
  }
  return out;
}

void write_pgm(const std::filesystem::path& path, const geometry::Image& img) {
  const auto bytes = encode_pgm(img);
  io::write_file_atomic(path, bytes.data(), bytes.size());
}

geometry::Image read_pgm(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  std::size_t pos = 0;
  auto next_token = [&]() -> std::string {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::string tok;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) tok += static_cast<char>(bytes[pos++]);
    return tok;
  };
  if (next_token() != "P5") fail(ErrorCode::kFormat, path.string() + " is not a binary PGM (P5)");
  std::int64_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoll(next_token());
    h = std::stoll(next_token());
    maxval = std::stoll(next_token());
  } catch (const std::exception&) {
    fail(ErrorCode::kFormat, path.string() + ": malformed PGM header");
  }
  if (w < 1 || h < 1 || maxval < 1 || maxval > 255) {
    fail(ErrorCode::kFormat, path.string() + ": unsupported PGM dimensions or maxval");
  }
  ++pos;  // single whitespace before the raster
  if (bytes.size() < pos + static_cast<std::size_t>(w * h)) fail(ErrorCode::kTruncated, path.string() + ": PGM raster truncated");
  geometry::Image img(1, h, w);
  for (std::int64_t i = 0; i < w * h; ++i) img.data[i] = static_cast<float>(bytes[pos + i]) / static_cast<float>(maxval);
  return img;
}

}  // namespace ca3d::data
