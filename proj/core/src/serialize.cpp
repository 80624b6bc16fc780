#include "tivode/serialize.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

namespace tivode {

namespace {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ull;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ull;
constexpr char kMagic[4] = {'T', 'V', 'C', 'K'};
constexpr std::uint32_t kMaxStringLen = 1u << 20;
constexpr std::uint32_t kMaxRank = 16;

std::size_t tell_in(std::istream& is) {
  auto p = is.tellg();
  return p < 0 ? 0 : static_cast<std::size_t>(p);
}

void put_u32(std::ostream& os, std::uint32_t v) {
  std::array<char, 4> b;
  for (int i = 0; i < 4; ++i) b[static_cast<std::size_t>(i)] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b.data(), 4);
}

std::uint32_t get_u32(std::istream& is, const char* what) {
  std::size_t at = tell_in(is);
  std::array<unsigned char, 4> b;
  if (!is.read(reinterpret_cast<char*>(b.data()), 4)) {
    throw FormatError(std::string("truncated while reading ") + what, at);
  }
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

void put_f64(std::ostream& os, double v) {
  std::uint64_t u = std::bit_cast<std::uint64_t>(v);
  std::array<char, 8> b;
  for (int i = 0; i < 8; ++i) b[static_cast<std::size_t>(i)] = static_cast<char>((u >> (8 * i)) & 0xff);
  os.write(b.data(), 8);
}

void put_f64_block(std::ostream& os, const double* v, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(v), static_cast<std::streamsize>(n * sizeof(double)));
  } else {
    for (std::size_t i = 0; i < n; ++i) put_f64(os, v[i]);
  }
}

void get_f64_block(std::istream& is, double* v, std::size_t n, const char* what) {
  std::size_t at = tell_in(is);
  if constexpr (std::endian::native == std::endian::little) {
    if (!is.read(reinterpret_cast<char*>(v), static_cast<std::streamsize>(n * sizeof(double)))) {
      throw FormatError(std::string("truncated while reading ") + what, at);
    }
  } else {
    std::vector<unsigned char> raw(n * 8);
    if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
      throw FormatError(std::string("truncated while reading ") + what, at);
    }
    for (std::size_t i = 0; i < n; ++i) {
      std::uint64_t u = 0;
      for (int b = 0; b < 8; ++b) {
        u |= static_cast<std::uint64_t>(raw[i * 8 + static_cast<std::size_t>(b)]) << (8 * b);
      }
      v[i] = std::bit_cast<double>(u);
    }
  }
}

void put_string(std::ostream& os, const std::string& s) {
  if (s.size() > kMaxStringLen) throw ContractError("string too long to serialize");
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is, const char* what) {
  std::uint32_t len = get_u32(is, what);
  std::size_t at = tell_in(is);
  if (len > kMaxStringLen) {
    throw FormatError(std::string("implausible string length for ") + what, at);
  }
  std::string s(len, '\0');
  if (len && !is.read(s.data(), len)) {
    throw FormatError(std::string("truncated while reading ") + what, at);
  }
  return s;
}

}  // namespace

std::uint64_t fnv1a64_update(std::uint64_t state, std::span<const std::uint8_t> bytes) {
  for (std::uint8_t b : bytes) {
    state ^= b;
    state *= kFnvPrime;
  }
  return state;
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  return fnv1a64_update(kFnvOffset, bytes);
}

std::uint64_t hash_tensor(const Tensor& t) {
  std::uint64_t h = kFnvOffset;
  for (std::size_t d : t.shape()) {
    std::uint64_t u = d;
    std::array<std::uint8_t, 8> b;
    for (int i = 0; i < 8; ++i) b[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>((u >> (8 * i)) & 0xff);
    h = fnv1a64_update(h, b);
  }
  for (double v : t.values()) {
    std::uint64_t u = std::bit_cast<std::uint64_t>(v);
    std::array<std::uint8_t, 8> b;
    for (int i = 0; i < 8; ++i) b[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>((u >> (8 * i)) & 0xff);
    h = fnv1a64_update(h, b);
  }
  return h;
}

void write_tensor(std::ostream& os, const Tensor& t) {
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) {
    if (d > std::numeric_limits<std::uint32_t>::max()) {
      throw ContractError("tensor dimension too large to serialize");
    }
    put_u32(os, static_cast<std::uint32_t>(d));
  }
  put_f64_block(os, t.values().data(), t.size());
}

Tensor read_tensor(std::istream& is) {
  std::size_t at = tell_in(is);
  std::uint32_t rank = get_u32(is, "tensor rank");
  if (rank > kMaxRank) throw FormatError("implausible tensor rank", at);
  Shape shape(rank);
  for (std::uint32_t i = 0; i < rank; ++i) shape[i] = get_u32(is, "tensor dim");
  std::size_t n = shape_numel(shape);
  std::vector<double> values(n);
  get_f64_block(is, values.data(), n, "tensor payload");
  return Tensor::from(std::move(values), std::move(shape));
}

void Checkpoint::put(std::string name, Tensor t) {
  for (auto& [n, v] : entries_) {
    if (n == name) {
      v = std::move(t);
      return;
    }
  }
  entries_.emplace_back(std::move(name), std::move(t));
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& [n, v] : entries_) {
    if (n == name) return true;
  }
  return false;
}

const Tensor& Checkpoint::get(const std::string& name) const {
  for (const auto& [n, v] : entries_) {
    if (n == name) return v;
  }
  throw FormatError("checkpoint has no tensor named '" + name + "'", 0);
}

void Checkpoint::write(std::ostream& os) const {
  os.write(kMagic, 4);
  put_u32(os, kCheckpointVersion);
  put_u32(os, static_cast<std::uint32_t>(meta.size()));
  for (const auto& [k, v] : meta) {
    put_string(os, k);
    put_string(os, v);
  }
  put_u32(os, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& [name, t] : entries_) {
    put_string(os, name);
    write_tensor(os, t);
  }
}

Checkpoint Checkpoint::read(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4)) throw FormatError("truncated while reading magic", 0);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad magic, not a checkpoint", 0);
  std::size_t at = tell_in(is);
  std::uint32_t version = get_u32(is, "version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), at);
  }
  Checkpoint ck;
  std::uint32_t nmeta = get_u32(is, "meta count");
  for (std::uint32_t i = 0; i < nmeta; ++i) {
    std::string k = get_string(is, "meta key");
    std::string v = get_string(is, "meta value");
    ck.meta.emplace(std::move(k), std::move(v));
  }
  std::uint32_t ntensors = get_u32(is, "tensor count");
  for (std::uint32_t i = 0; i < ntensors; ++i) {
    std::string name = get_string(is, "tensor name");
    ck.entries_.emplace_back(std::move(name), read_tensor(is));
  }
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  write(os);
  os.flush();
  if (!os) throw IoError("write to '" + path.string() + "' failed");
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  return read(is);
}

std::vector<std::uint8_t> frame_to_u8(const Tensor& frame) {
  const auto& v = frame.values();
  std::vector<std::uint8_t> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double x = std::clamp(v[i], 0.0, 1.0);
    out[i] = static_cast<std::uint8_t>(std::lround(x * 255.0));
  }
  return out;
}

Tensor u8_to_frame(std::span<const std::uint8_t> bytes, std::size_t h, std::size_t w) {
  if (bytes.size() != h * w) {
    throw DimensionError("u8_to_frame: " + std::to_string(bytes.size()) + " bytes for " +
                         std::to_string(h) + "x" + std::to_string(w));
  }
  std::vector<double> v(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) v[i] = static_cast<double>(bytes[i]) / 255.0;
  return Tensor::from(std::move(v), {h, w});
}

void write_pgm(const std::filesystem::path& path, const Tensor& frame) {
  if (frame.rank() != 2) {
    throw DimensionError("write_pgm expects [H x W], got " + shape_str(frame.shape()));
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os << "P5\n" << frame.dim(1) << " " << frame.dim(0) << "\n255\n";
  auto bytes = frame_to_u8(frame);
  os.write(reinterpret_cast<const char*>(bytes.data()),
           static_cast<std::streamsize>(bytes.size()));
  os.flush();
  if (!os) throw IoError("write to '" + path.string() + "' failed");
}

Tensor read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  std::string magic;
  is >> magic;
  if (magic != "P5") throw FormatError("not a P5 PGM", 0);
  long w = 0, h = 0, maxval = 0;
  is >> w >> h >> maxval;
  if (!is || w <= 0 || h <= 0) throw FormatError("bad PGM dimensions", tell_in(is));
  if (maxval != 255) throw FormatError("only maxval 255 PGM is supported", tell_in(is));
  is.get();  // single whitespace after the header
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(w) * static_cast<std::size_t>(h));
  std::size_t at = tell_in(is);
  if (!is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()))) {
    throw FormatError("truncated PGM payload", at);
  }
  return u8_to_frame(bytes, static_cast<std::size_t>(h), static_cast<std::size_t>(w));
}

}  // namespace tivode
