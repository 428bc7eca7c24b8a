#include "convlora/serialize.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace convlora {

namespace {

constexpr std::uint8_t kDtypeF32 = 1;
constexpr std::uint8_t kDtypeF64 = 2;
constexpr std::uint8_t kDtypeI32 = 3;
constexpr char kMagic[4] = {'C', 'L', 'R', 'A'};

std::size_t dtype_size(std::uint8_t dtype) {
  switch (dtype) {
    case kDtypeF32: return 4;
    case kDtypeF64: return 8;
    case kDtypeI32: return 4;
  }
  throw std::invalid_argument("container: unknown dtype code " + std::to_string(dtype));
}

const char* dtype_name(std::uint8_t dtype) {
  switch (dtype) {
    case kDtypeF32: return "f32";
    case kDtypeF64: return "f64";
    case kDtypeI32: return "i32";
  }
  return "?";
}

void append_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void append_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U, typename T>
void append_scalar(std::vector<std::uint8_t>& out, T value) {
  static_assert(sizeof(U) == sizeof(T));
  const U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(U); ++i)
    out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

struct Reader {
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > bytes.size())
      throw std::runtime_error("container: truncated file (needed " + std::to_string(n) +
                               " bytes at offset " + std::to_string(pos) + ")");
  }
  std::uint8_t u8() {
    need(1);
    return bytes[pos++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[pos++]) << (8 * i);
    return v;
  }
};

template <typename T, typename U>
std::vector<std::uint8_t> encode_payload(const Tensor<T>& t) {
  std::vector<std::uint8_t> out;
  out.reserve(t.size() * sizeof(T));
  for (std::size_t i = 0; i < t.size(); ++i) append_scalar<U>(out, t[i]);
  return out;
}

template <typename T, typename U>
Tensor<T> decode_payload(const std::vector<std::size_t>& dims,
                         const std::vector<std::uint8_t>& payload) {
  Tensor<T> t(dims);
  for (std::size_t i = 0; i < t.size(); ++i) {
    U bits = 0;
    for (std::size_t b = 0; b < sizeof(U); ++b)
      bits |= static_cast<U>(payload[i * sizeof(U) + b]) << (8 * b);
    t[i] = std::bit_cast<T>(bits);
  }
  return t;
}

}  // namespace

void Container::put_entry(Entry e) {
  for (const auto& existing : entries_)
    if (existing.name == e.name)
      throw std::invalid_argument("container: duplicate entry name '" + e.name + "'");
  if (e.name.empty()) throw std::invalid_argument("container: empty entry name");
  entries_.push_back(std::move(e));
}

void Container::put(const std::string& name, const TensorF& t) {
  put_entry({name, kDtypeF32, t.shape(), encode_payload<float, std::uint32_t>(t)});
}
void Container::put(const std::string& name, const TensorD& t) {
  put_entry({name, kDtypeF64, t.shape(), encode_payload<double, std::uint64_t>(t)});
}
void Container::put(const std::string& name, const TensorI& t) {
  put_entry({name, kDtypeI32, t.shape(), encode_payload<std::int32_t, std::uint32_t>(t)});
}

bool Container::has(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return true;
  return false;
}

const Container::Entry& Container::find(const std::string& name, std::uint8_t dtype) const {
  for (const auto& e : entries_) {
    if (e.name != name) continue;
    if (e.dtype != dtype)
      throw std::invalid_argument("container: entry '" + name + "' is " + dtype_name(e.dtype) +
                                  ", requested " + dtype_name(dtype));
    return e;
  }
  throw std::invalid_argument("container: no entry named '" + name + "'");
}

TensorF Container::get_f32(const std::string& name) const {
  const Entry& e = find(name, kDtypeF32);
  return decode_payload<float, std::uint32_t>(e.dims, e.payload);
}
TensorD Container::get_f64(const std::string& name) const {
  const Entry& e = find(name, kDtypeF64);
  return decode_payload<double, std::uint64_t>(e.dims, e.payload);
}
TensorI Container::get_i32(const std::string& name) const {
  const Entry& e = find(name, kDtypeI32);
  return decode_payload<std::int32_t, std::uint32_t>(e.dims, e.payload);
}

std::vector<std::string> Container::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.name);
  return out;
}

std::vector<std::uint8_t> Container::serialize() const {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  append_u32(out, kVersion);
  append_u32(out, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& e : entries_) {
    append_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    out.push_back(e.dtype);
    append_u64(out, e.dims.size());
    for (std::size_t d : e.dims) append_u64(out, d);
    out.insert(out.end(), e.payload.begin(), e.payload.end());
  }
  const auto digest = sha256_bytes(out.data(), out.size());
  out.insert(out.end(), digest.begin(), digest.end());
  return out;
}

Container Container::parse(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 + 4 + 4 + 32) throw std::runtime_error("container: file too short");
  const std::size_t body_len = bytes.size() - 32;
  const auto digest = sha256_bytes(bytes.data(), body_len);
  if (std::memcmp(digest.data(), bytes.data() + body_len, 32) != 0)
    throw std::runtime_error("container: checksum mismatch (corrupt or tampered file)");

  Reader r{bytes};
  char magic[4];
  r.need(4);
  std::memcpy(magic, bytes.data(), 4);
  r.pos = 4;
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("container: bad magic bytes");
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw std::runtime_error("container: unsupported version " + std::to_string(version));
  const std::uint32_t count = r.u32();

  Container c;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    const std::uint32_t name_len = r.u32();
    r.need(name_len);
    e.name.assign(reinterpret_cast<const char*>(bytes.data() + r.pos), name_len);
    r.pos += name_len;
    e.dtype = r.u8();
    const std::size_t elem = dtype_size(e.dtype);
    const std::uint64_t rank = r.u64();
    if (rank > 8) throw std::runtime_error("container: implausible rank " + std::to_string(rank));
    std::size_t numel = 1;
    for (std::uint64_t d = 0; d < rank; ++d) {
      const std::uint64_t dim = r.u64();
      if (dim == 0 || dim > (1ull << 32))
        throw std::runtime_error("container: implausible dimension " + std::to_string(dim));
      e.dims.push_back(static_cast<std::size_t>(dim));
      numel *= static_cast<std::size_t>(dim);
    }
    r.need(numel * elem);
    e.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(r.pos),
                     bytes.begin() + static_cast<std::ptrdiff_t>(r.pos + numel * elem));
    r.pos += numel * elem;
    c.put_entry(std::move(e));
  }
  if (r.pos != body_len)
    throw std::runtime_error("container: trailing bytes after last entry");
  return c;
}

void Container::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("container: cannot open " + tmp.string() + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("container: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Container Container::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw std::runtime_error("container: cannot open " + path.string());
  const std::streamsize len = f.tellg();
  f.seekg(0);
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(len));
  f.read(reinterpret_cast<char*>(bytes.data()), len);
  if (!f) throw std::runtime_error("container: read failed for " + path.string());
  return parse(bytes);
}

void Container::put_string(const std::string& name, const std::string& value) {
  if (value.empty()) throw std::invalid_argument("container: empty string for '" + name + "'");
  TensorI t({value.size()});
  for (std::size_t i = 0; i < value.size(); ++i)
    t[i] = static_cast<std::int32_t>(static_cast<unsigned char>(value[i]));
  put(name, t);
}

std::string Container::get_string(const std::string& name) const {
  const TensorI t = get_i32(name);
  std::string s;
  s.reserve(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] < 0 || t[i] > 255)
      throw std::runtime_error("container: entry '" + name + "' is not a byte string");
    s.push_back(static_cast<char>(t[i]));
  }
  return s;
}

std::array<std::uint8_t, 32> sha256_bytes(const std::uint8_t* data, std::size_t len) {
  std::array<std::uint8_t, 32> digest{};
  unsigned int out_len = 0;
  if (EVP_Digest(data, len, digest.data(), &out_len, EVP_sha256(), nullptr) != 1 ||
      out_len != 32)
    throw std::runtime_error("sha256 computation failed");
  return digest;
}

std::array<std::uint8_t, 32> sha256_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw std::runtime_error("sha256: cannot open " + path.string());
  const std::streamsize len = f.tellg();
  f.seekg(0);
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(len));
  f.read(reinterpret_cast<char*>(bytes.data()), len);
  if (!f) throw std::runtime_error("sha256: read failed for " + path.string());
  return sha256_bytes(bytes.data(), bytes.size());
}

std::string to_hex(const std::array<std::uint8_t, 32>& digest) {
  static const char* hex = "0123456789abcdef";
  std::string s;
  s.reserve(64);
  for (std::uint8_t b : digest) {
    s.push_back(hex[b >> 4]);
    s.push_back(hex[b & 0xf]);
  }
  return s;
}

}  // namespace convlora
