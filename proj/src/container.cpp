// SPDX-License-Identifier: Apache-2.0
#include "ca3d/container.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <unistd.h>

#include "ca3d/error.hpp"

namespace ca3d::io {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

namespace {

constexpr std::uint32_t kMaxRank = 16;

std::size_t dtype_size(DType d) { return d == DType::kF32 ? 4 : 1; }

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    T v;
    need(sizeof(T), what);
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  const std::uint8_t* take(std::size_t n, const char* what) {
    need(n, what);
    const auto* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (remaining() < n) {
      fail(ErrorCode::kTruncated, std::string("container truncated while reading ") + what + " (need " +
                                      std::to_string(n) + " bytes, " + std::to_string(remaining()) + " left)");
    }
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

std::uint64_t dims_numel(const std::vector<std::uint64_t>& dims) {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

}  // namespace

std::uint32_t crc32(const void* data, std::size_t size) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  const auto* p = static_cast<const Bytef*>(data);
  while (size > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    c = ::crc32(c, p, chunk);
    p += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

Record Record::from_tensor(std::string name, const Tensor& t) {
  Record r;
  r.name = std::move(name);
  for (auto d : t.shape()) r.dims.push_back(static_cast<std::uint64_t>(d));
  r.f32 = t.to_vector();
  return r;
}

Record Record::from_text(std::string name, const std::string& text) {
  Record r;
  r.name = std::move(name);
  r.dtype = DType::kU8;
  r.dims = {text.size()};
  r.u8.assign(text.begin(), text.end());
  return r;
}

Tensor Record::to_tensor() const {
  if (dtype != DType::kF32) fail(ErrorCode::kFormat, "record '" + name + "' is not float32");
  Shape s;
  for (auto d : dims) s.push_back(static_cast<std::int64_t>(d));
  return Tensor::from_data(std::move(s), f32);
}

std::string Record::text() const {
  if (dtype != DType::kU8) fail(ErrorCode::kFormat, "record '" + name + "' is not a byte record");
  return std::string(u8.begin(), u8.end());
}

const Record* Container::find(const std::string& name) const {
  for (const auto& r : records) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

const Record& Container::at(const std::string& name) const {
  const Record* r = find(name);
  if (!r) fail(ErrorCode::kFormat, "container has no record named '" + name + "'");
  return *r;
}

std::vector<std::string> Container::corrupt_records() const {
  std::vector<std::string> out;
  for (const auto& r : records) {
    if (!r.checksum_ok()) out.push_back(r.name);
  }
  return out;
}

std::vector<std::uint8_t> serialize(const std::vector<Record>& records) {
  std::set<std::string> names;
  for (const auto& r : records) {
    if (!names.insert(r.name).second) fail(ErrorCode::kDuplicateName, "duplicate record name '" + r.name + "'");
    if (r.dims.size() > kMaxRank) fail(ErrorCode::kFormat, "record '" + r.name + "' exceeds the maximum rank");
    const auto n = dims_numel(r.dims);
    const auto have = r.dtype == DType::kF32 ? r.f32.size() : r.u8.size();
    if (n != have) {
      fail(ErrorCode::kShape, "record '" + r.name + "' has " + std::to_string(have) + " values for " +
                                  std::to_string(n) + " elements");
    }
  }
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put<std::uint32_t>(out, kFormatVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
    out.insert(out.end(), r.name.begin(), r.name.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(r.dims.size()));
    for (auto d : r.dims) put<std::uint64_t>(out, d);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(r.dtype));
    const auto* payload = r.dtype == DType::kF32 ? reinterpret_cast<const std::uint8_t*>(r.f32.data()) : r.u8.data();
    const auto bytes = dims_numel(r.dims) * dtype_size(r.dtype);
    out.insert(out.end(), payload, payload + bytes);
    put<std::uint32_t>(out, crc32(payload, bytes));
  }
  return out;
}

Container parse(const std::vector<std::uint8_t>& bytes) {
  Reader in(bytes);
  const auto* magic = in.take(4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) fail(ErrorCode::kBadMagic, "not a CA3D container (bad magic)");
  const auto version = in.get<std::uint32_t>("version");
  if (version != kFormatVersion) {
    fail(ErrorCode::kUnsupportedVersion, "container version " + std::to_string(version) +
                                             " is not supported (this build reads version " +
                                             std::to_string(kFormatVersion) + ")");
  }
  const auto count = in.get<std::uint32_t>("record count");
  Container c;
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    Record r;
    const auto name_len = in.get<std::uint32_t>("name length");
    const auto* name = in.take(name_len, "name");
    r.name.assign(reinterpret_cast<const char*>(name), name_len);
    if (!names.insert(r.name).second) fail(ErrorCode::kDuplicateName, "duplicate record name '" + r.name + "'");
    const auto rank = in.get<std::uint32_t>("rank");
    if (rank > kMaxRank) fail(ErrorCode::kFormat, "record '" + r.name + "' has rank " + std::to_string(rank));
    std::uint64_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto d = in.get<std::uint64_t>("dims");
      if (d != 0 && n > in.remaining() / d) {
        fail(ErrorCode::kTruncated, "record '" + r.name + "' declares more data than the file holds");
      }
      n *= d;
      r.dims.push_back(d);
    }
    const auto dtype = in.get<std::uint32_t>("dtype");
    if (dtype > 1) fail(ErrorCode::kFormat, "record '" + r.name + "' has unknown dtype " + std::to_string(dtype));
    r.dtype = static_cast<DType>(dtype);
    const auto size = n * dtype_size(r.dtype);
    const auto* payload = in.take(size, "payload");
    if (r.dtype == DType::kF32) {
      r.f32.resize(n);
      std::memcpy(r.f32.data(), payload, size);
    } else {
      r.u8.assign(payload, payload + size);
    }
    r.computed_crc = crc32(payload, size);
    r.stored_crc = in.get<std::uint32_t>("checksum");
    c.records.push_back(std::move(r));
  }
  if (in.remaining() != 0) fail(ErrorCode::kFormat, "trailing bytes after the last record");
  return c;
}

void write_file_atomic(const std::filesystem::path& path, const void* data, std::size_t size) {
  auto tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) fail(ErrorCode::kIo, "cannot open " + tmp.string() + " for writing");
    f.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    f.flush();
    if (!f) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      fail(ErrorCode::kIo, "write failed for " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    fail(ErrorCode::kIo, "cannot move " + tmp.string() + " to " + path.string());
  }
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, text.data(), text.size());
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorCode::kIo, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (f.bad()) fail(ErrorCode::kIo, "read failed for " + path.string());
  return bytes;
}

void write_container(const std::filesystem::path& path, const std::vector<Record>& records) {
  const auto bytes = serialize(records);
  write_file_atomic(path, bytes.data(), bytes.size());
}

Container read_container(const std::filesystem::path& path) { return parse(read_file(path)); }

std::map<std::string, Tensor> read_tensors(const std::filesystem::path& path) {
  const auto c = read_container(path);
  if (const auto bad = c.corrupt_records(); !bad.empty()) {
    fail(ErrorCode::kChecksum, path.string() + ": checksum mismatch in record '" + bad.front() + "'");
  }
  std::map<std::string, Tensor> out;
  for (const auto& r : c.records) {
    if (r.dtype == DType::kF32) out.emplace(r.name, r.to_tensor());
  }
  return out;
}

}  // namespace ca3d::io
