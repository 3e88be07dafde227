// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <set>
#include <string>

#include "ca3d/container.hpp"
#include "ca3d/dataset.hpp"
#include "ca3d/error.hpp"
#include "ca3d/normalize.hpp"
#include "ca3d/rng.hpp"

using namespace ca3d;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("ca3d_data_test_" + name);
  fs::remove_all(p);
  return p;
}

ErrorCode parse_code(const std::vector<std::uint8_t>& bytes) {
  try {
    io::parse(bytes);
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode{};
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("percentile follows linear interpolation") {
  CHECK(data::percentile({1, 2, 3, 4}, 50) == doctest::Approx(2.5));
  CHECK(data::percentile({5, 1, 3}, 0) == 1.0);
  CHECK(data::percentile({5, 1, 3}, 100) == 5.0);
  CHECK(data::percentile({0, 10}, 25) == doctest::Approx(2.5));
}

TEST_CASE("truncation normalisation by hand") {
  // Nonzero values 1..100; the 1st/99th percentiles are 1.99 and 99.01.
  std::vector<float> img;
  for (int i = 1; i <= 100; ++i) img.push_back(static_cast<float>(i));
  img.push_back(0.0f);
  const auto out = data::normalize_truncation(img);
  const double lo = 1.0 + 0.01 * 99, hi = 1.0 + 0.99 * 99;
  CHECK(out[19] == doctest::Approx((20.0 - lo) / (hi - lo)).epsilon(1e-6));
  CHECK(out[0] == 0.0f);
  CHECK(out[99] == 1.0f);
  // Zero pixels fall below the window.
  CHECK(out[100] == 0.0f);
  for (float v : out) CHECK((v >= 0.0f && v <= 1.0f));

  const std::vector<float> small = {0, 10, 20, 30};
  const auto s = data::normalize_truncation(small, 0, 100);
  CHECK(s[2] == doctest::Approx(0.5));
}

TEST_CASE("degenerate normalisation inputs") {
  const std::vector<float> zeros(9, 0.0f);
  CHECK(data::normalize_truncation(zeros) == zeros);
  const std::vector<float> flat = {0, 3, 3, 3};
  for (float v : data::normalize_truncation(flat)) CHECK(v == 0.0f);
  CHECK(data::normalize_truncation(std::vector<float>{}).empty());
}

TEST_CASE("normalisation ignores a positive intensity scale") {
  Rng rng(3);
  std::vector<float> img(200), scaled(200);
  for (std::size_t i = 0; i < img.size(); ++i) {
    img[i] = i % 5 == 0 ? 0.0f : rng.uniform() * 7.0f;
    scaled[i] = 4.0f * img[i];
  }
  const auto a = data::normalize_truncation(img), b = data::normalize_truncation(scaled);
  for (std::size_t i = 0; i < img.size(); ++i) CHECK(std::abs(a[i] - b[i]) < 1e-5);
}

TEST_CASE("container byte layout") {
  CHECK(io::serialize({}).size() == io::kHeaderBytes);
  CHECK(io::kHeaderBytes == 12);
  const auto r = io::Record::from_tensor("m", Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}));
  const auto bytes = io::serialize({r});
  // name length, name, rank, dims, dtype, payload, crc
  const std::size_t expect = 12 + 4 + 1 + 4 + 2 * 8 + 4 + 6 * 4 + 4;
  CHECK(bytes.size() == expect);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "CA3D");
  const std::uint32_t crc = io::crc32(r.f32.data(), 24);
  std::uint32_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
  CHECK(stored == crc);
  CHECK(io::crc32("123456789", 9) == 0xCBF43926u);
}

TEST_CASE("container round trip and text records") {
  const auto path = scratch("rt.ca3d");
  Rng rng(4);
  std::vector<float> v(60);
  for (auto& x : v) x = rng.normal();
  io::write_container(path, {io::Record::from_tensor("a", Tensor::from_data({3, 4, 5}, v)),
                             io::Record::from_text("meta", "hello\nworld")});
  const auto c = io::read_container(path);
  CHECK(c.corrupt_records().empty());
  CHECK(c.at("meta").text() == "hello\nworld");
  const auto t = c.at("a").to_tensor();
  CHECK(t.shape() == Shape{3, 4, 5});
  for (std::size_t i = 0; i < v.size(); ++i) CHECK(t.at(static_cast<std::int64_t>(i)) == v[i]);
  CHECK(c.find("missing") == nullptr);
  CHECK_THROWS_AS(c.at("missing"), Error);
  fs::remove(path);
}

TEST_CASE("payload corruption is flagged by the checksum") {
  const auto r = io::Record::from_tensor("w", Tensor::from_data({4}, {1, 2, 3, 4}));
  auto bytes = io::serialize({r});
  bytes[bytes.size() - 8] ^= 0x01;
  const auto c = io::parse(bytes);
  REQUIRE(c.corrupt_records().size() == 1);
  CHECK(c.corrupt_records()[0] == "w");
  CHECK_FALSE(c.records[0].checksum_ok());

  const auto path = scratch("bad.ca3d");
  io::write_file_atomic(path, bytes.data(), bytes.size());
  try {
    io::read_tensors(path);
    FAIL("expected a checksum error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kChecksum);
  }
  fs::remove(path);
}

TEST_CASE("structural problems have distinct error codes") {
  const auto good = io::serialize({io::Record::from_tensor("x", Tensor::from_data({2}, {1, 2}))});
  auto magic = good;
  magic[0] = 'X';
  CHECK(parse_code(magic) == ErrorCode::kBadMagic);
  auto version = good;
  version[4] = 9;
  CHECK(parse_code(version) == ErrorCode::kUnsupportedVersion);
  const std::vector<std::uint8_t> cut(good.begin(), good.end() - 3);
  CHECK(parse_code(cut) == ErrorCode::kTruncated);
  auto trailing = good;
  trailing.push_back(0);
  CHECK(parse_code(trailing) == ErrorCode::kFormat);
  const auto x = io::Record::from_tensor("x", Tensor::from_data({1}, {1}));
  CHECK_THROWS_AS(io::serialize({x, x}), Error);
  CHECK(parse_code(good) == ErrorCode{});
}

TEST_CASE("random shapes survive a round trip and every truncation is rejected") {
  Rng rng(5);
  for (int k = 0; k < 100; ++k) {
    const int rank = static_cast<int>(rng.next_u64() % 4) + 1;
    Shape s;
    for (int i = 0; i < rank; ++i) s.push_back(static_cast<std::int64_t>(rng.next_u64() % 4) + 1);
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    std::vector<float> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = rng.normal();
    const auto bytes = io::serialize({io::Record::from_tensor("t" + std::to_string(k), Tensor::from_data(s, v))});
    const auto c = io::parse(bytes);
    const auto t = c.records.at(0).to_tensor();
    REQUIRE(t.shape() == s);
    for (std::int64_t i = 0; i < n; ++i) REQUIRE(t.at(i) == v[static_cast<std::size_t>(i)]);
    const auto cut = static_cast<std::size_t>(rng.next_u64() % bytes.size());
    const std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    REQUIRE(parse_code(part) != ErrorCode{});
  }
}

TEST_CASE("manifest splits are exact, disjoint and seeded") {
  data::DatasetSpec spec;
  spec.count = 500;
  spec.seed = 9;
  const auto m = data::make_manifest(spec);
  const auto counts = data::count_splits(m);
  CHECK(counts.train == 400);
  CHECK(counts.val == 50);
  CHECK(counts.test == 50);
  std::set<std::uint64_t> seeds;
  for (const auto& e : m) seeds.insert(e.seed);
  CHECK(seeds.size() == m.size());
  CHECK(data::format_manifest(data::parse_manifest(data::format_manifest(m))) == data::format_manifest(m));
  spec.seed = 10;
  CHECK(data::format_manifest(data::make_manifest(spec)) != data::format_manifest(m));
  CHECK_THROWS_AS(data::parse_manifest("1\tx\n"), Error);
}

TEST_CASE("dataset generation is byte-reproducible and loads back") {
  data::DatasetSpec spec;
  spec.count = 10;
  spec.seed = 3;
  const auto a = scratch("ds_a"), b = scratch("ds_b");
  const auto ca = data::dataset_generate(a, spec);
  data::dataset_generate(b, spec);
  CHECK(ca.train == 8);
  CHECK(ca.val == 1);
  CHECK(ca.test == 1);
  CHECK(io::read_file(a / data::kPairsFile) == io::read_file(b / data::kPairsFile));
  CHECK(io::read_file(a / data::kManifestFile) == io::read_file(b / data::kManifestFile));

  const auto ds = data::dataset_load(a);
  CHECK(ds.pairs.size() == 10);
  CHECK(ds.split("train").size() == 8);
  const auto& p = ds.pairs[0];
  CHECK(p.cc.height == 32);
  CHECK(p.mlo.width == 32);
  for (float v : p.cc.data) CHECK((v >= 0.0f && v <= 1.0f));
  CHECK_THROWS_AS(data::dataset_load(scratch("empty")), Error);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("PGM export quantises to eight bits") {
  geometry::Image img(1, 2, 3);
  img.data = {0.0f, 0.5f, 1.0f, -1.0f, 2.0f, 0.25f};
  const auto bytes = data::encode_pgm(img);
  const std::string head = "P5\n3 2\n255\n";
  REQUIRE(bytes.size() == head.size() + 6);
  CHECK(std::string(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(head.size())) == head);
  CHECK(bytes[head.size() + 0] == 0);
  CHECK(bytes[head.size() + 2] == 255);
  CHECK(bytes[head.size() + 3] == 0);
  CHECK(bytes[head.size() + 4] == 255);

  const auto path = scratch("x.pgm");
  data::write_pgm(path, img);
  const auto back = data::read_pgm(path);
  CHECK(back.width == 3);
  CHECK(back.height == 2);
  CHECK(back.at(0, 0, 1) == doctest::Approx(0.5).epsilon(0.01));
  fs::remove(path);
}

}  // TEST_SUITE
