#include "bayesformer/io.hpp"

#include <bit>
#include <cstring>
#include <iomanip>
#include <sstream>

#include "bayesformer/errors.hpp"

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace bayesformer::io {

namespace {
constexpr char kMagic[4] = {'B', 'F', 'T', 'C'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

BinaryWriter::BinaryWriter(const std::filesystem::path& path) : out_(path, std::ios::binary), path_(path) {
  if (!out_) throw FormatError("cannot open '" + path.string() + "' for writing");
}

void BinaryWriter::bytes(const void* p, std::size_t n) {
  out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!out_) throw FormatError("write failed on '" + path_.string() + "'");
}
void BinaryWriter::u32(std::uint32_t v) { bytes(&v, 4); }
void BinaryWriter::u64(std::uint64_t v) { bytes(&v, 8); }
void BinaryWriter::f64(double v) { bytes(&v, 8); }
void BinaryWriter::str(const std::string& s) {
  u32(static_cast<std::uint32_t>(s.size()));
  bytes(s.data(), s.size());
}
void BinaryWriter::close() {
  out_.close();
  if (!out_) throw FormatError("closing '" + path_.string() + "' failed");
}

BinaryReader::BinaryReader(const std::filesystem::path& path) : in_(path, std::ios::binary), path_(path) {
  if (!in_) throw FormatError("cannot open '" + path.string() + "'");
}

void BinaryReader::bytes(void* p, std::size_t n) {
  in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in_.gcount()) != n) {
    throw FormatError("'" + path_.string() + "' truncated at byte offset " + std::to_string(offset_));
  }
  offset_ += n;
}
std::uint8_t BinaryReader::u8() {
  std::uint8_t v;
  bytes(&v, 1);
  return v;
}
std::uint32_t BinaryReader::u32() {
  std::uint32_t v;
  bytes(&v, 4);
  return v;
}
std::uint64_t BinaryReader::u64() {
  std::uint64_t v;
  bytes(&v, 8);
  return v;
}
double BinaryReader::f64() {
  double v;
  bytes(&v, 8);
  return v;
}
std::string BinaryReader::str() {
  const std::uint64_t at = offset_;
  const std::uint32_t n = u32();
  if (n > (1u << 30)) throw FormatError("implausible string length at byte offset " + std::to_string(at));
  std::string s(n, '\0');
  bytes(s.data(), n);
  return s;
}
bool BinaryReader::at_end() { return in_.peek() == std::char_traits<char>::eof(); }

const Tensor& Container::get(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw ContractError("container has no tensor '" + name + "'");
}

bool Container::has(const std::string& name) const {
  for (const auto& kv : tensors) {
    if (kv.first == name) return true;
  }
  return false;
}

void write_container(const std::filesystem::path& path, const Container& c) {
  BinaryWriter w(path);
  w.bytes(kMagic, 4);
  w.u32(kVersion);
  w.str(c.kind);
  w.str(c.metadata);
  w.u64(c.tensors.size());
  for (const auto& [name, t] : c.tensors) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.shape().size()));
    for (auto d : t.shape()) w.u64(d);
    w.bytes(t.data(), t.size() * sizeof(double));
  }
  w.close();
}

Container read_container(const std::filesystem::path& path) {
  BinaryReader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("'" + path.string() + "': bad magic at byte offset 0");
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw FormatError("'" + path.string() + "': unsupported version " + std::to_string(version) + " at byte offset 4");
  }
  Container c;
  c.kind = r.str();
  c.metadata = r.str();
  const std::uint64_t count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const std::uint64_t at = r.offset();
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw FormatError("'" + path.string() + "': bad rank at byte offset " + std::to_string(at));
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = r.u64();
    Tensor t(shape);
    r.bytes(t.data(), t.size() * sizeof(double));
    c.tensors.emplace_back(std::move(name), std::move(t));
  }
  return c;
}

Container from_params(const ParamStore& p, std::string kind, std::string metadata, const std::string& prefix) {
  Container c{std::move(kind), std::move(metadata), {}};
  for (const auto& n : p.names()) c.tensors.emplace_back(prefix + n, p.at(n));
  return c;
}

void load_params(ParamStore& p, const Container& c, const std::string& prefix) {
  for (const auto& n : p.names()) {
    const Tensor& t = c.get(prefix + n);
    Tensor& dst = p.at(n);
    if (t.shape() != dst.shape()) {
      throw FormatError("tensor '" + n + "' has shape " + t.shape_string() + ", model expects " + dst.shape_string());
    }
    dst = t;
  }
}

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::string file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return fnv1a_hex(ss.str());
}

}  // namespace bayesformer::io
