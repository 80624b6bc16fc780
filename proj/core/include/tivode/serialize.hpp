// Binary formats: raw tensors, checkpoint containers, PGM frames.
//
// All integers are little-endian. A tensor serializes as
//   u32 rank, u32 dim[rank], f64 payload (row-major)
// and a checkpoint as
//   "TVCK", u32 version, meta string map, named tensor list.
// Malformed input raises FormatError with the byte offset of the problem.
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tivode/tensor.hpp"

namespace tivode {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// FNV-1a, 64-bit. Used for cheap determinism fingerprints.
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);
std::uint64_t fnv1a64_update(std::uint64_t state, std::span<const std::uint8_t> bytes);
std::uint64_t hash_tensor(const Tensor& t);  // shape + payload

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

// Ordered named-tensor container with a small string-keyed meta section.
class Checkpoint {
 public:
  void put(std::string name, Tensor t);
  bool has(const std::string& name) const;
  const Tensor& get(const std::string& name) const;  // throws FormatError if absent
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

  std::map<std::string, std::string> meta;

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  void write(std::ostream& os) const;
  static Checkpoint read(std::istream& is);

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

// Quantizes [0,1] frame values to u8 via round(255*v) after clamping.
std::vector<std::uint8_t> frame_to_u8(const Tensor& frame);
// Maps u8 back to fp64 as v/255.
Tensor u8_to_frame(std::span<const std::uint8_t> bytes, std::size_t h, std::size_t w);

// P5 (binary, maxval 255). The tensor is [H x W] with values in [0,1].
void write_pgm(const std::filesystem::path& path, const Tensor& frame);
Tensor read_pgm(const std::filesystem::path& path);

}  // namespace tivode
