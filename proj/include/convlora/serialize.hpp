#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "convlora/tensor.hpp"

namespace convlora {

// On-disk tensor container: "CLRA", u32-LE version, u32-LE entry count, then
// per entry {u32-LE name length, UTF-8 name, u8 dtype (1=f32 2=f64 3=i32),
// u64-LE rank, u64-LE dims, little-endian payload}, closed by the SHA-256 of
// every preceding byte. One format serves models, adapters, and samples.
class Container {
 public:
  static constexpr std::uint32_t kVersion = 1;

  void put(const std::string& name, const TensorF& t);
  void put(const std::string& name, const TensorD& t);
  void put(const std::string& name, const TensorI& t);

  bool has(const std::string& name) const;
  TensorF get_f32(const std::string& name) const;
  TensorD get_f64(const std::string& name) const;
  TensorI get_i32(const std::string& name) const;

  // names in insertion order; serialization order equals this
  std::vector<std::string> names() const;
  std::size_t entry_count() const { return entries_.size(); }

  std::vector<std::uint8_t> serialize() const;
  static Container parse(const std::vector<std::uint8_t>& bytes);

  // write-to-temp-then-rename, so a crash never leaves a half-written file
  void save(const std::filesystem::path& path) const;
  static Container load(const std::filesystem::path& path);

  // convenience for short strings (stored as an i32 tensor of code units)
  void put_string(const std::string& name, const std::string& value);
  std::string get_string(const std::string& name) const;

 private:
  struct Entry {
    std::string name;
    std::uint8_t dtype;
    std::vector<std::size_t> dims;
    std::vector<std::uint8_t> payload;  // little-endian
  };
  const Entry& find(const std::string& name, std::uint8_t dtype) const;
  void put_entry(Entry e);
  std::vector<Entry> entries_;
};

std::array<std::uint8_t, 32> sha256_bytes(const std::uint8_t* data, std::size_t len);
std::array<std::uint8_t, 32> sha256_file(const std::filesystem::path& path);
std::string to_hex(const std::array<std::uint8_t, 32>& digest);

}  // namespace convlora
