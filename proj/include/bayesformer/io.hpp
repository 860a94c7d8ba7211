#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "bayesformer/params.hpp"
#include "bayesformer/tensor.hpp"

namespace bayesformer::io {

/// Little-endian primitive writer over an ofstream.
class BinaryWriter {
 public:
  explicit BinaryWriter(const std::filesystem::path& path);
  void bytes(const void* p, std::size_t n);
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void str(const std::string& s);  // u32 length + bytes
  void close();

 private:
  std::ofstream out_;
  std::filesystem::path path_;
};

/// Reader that throws FormatError with the byte offset on truncation.
class BinaryReader {
 public:
  explicit BinaryReader(const std::filesystem::path& path);
  void bytes(void* p, std::size_t n);
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::string str();
  std::uint64_t offset() const { return offset_; }
  bool at_end();

 private:
  std::ifstream in_;
  std::filesystem::path path_;
  std::uint64_t offset_ = 0;
};

// Named-tensor container:
//   "BFTC" | u32 version | str kind | str metadata (JSON text) | u64 count |
//   count x (str name | u32 rank | rank x u64 dim | f64 data...)
struct Container {
  std::string kind;
  std::string metadata;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;
};

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

Container from_params(const ParamStore& p, std::string kind, std::string metadata,
                      const std::string& prefix = "");
/// Copies every tensor under `prefix` into `p`; shapes must match.
void load_params(ParamStore& p, const Container& c, const std::string& prefix = "");

/// FNV-1a 64-bit over bytes, rendered as 16 hex digits.
std::string fnv1a_hex(std::string_view bytes);
std::string file_hash(const std::filesystem::path& path);

}  // namespace bayesformer::io
