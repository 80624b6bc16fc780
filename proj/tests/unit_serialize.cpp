#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "testutil.hpp"
#include "tivode/errors.hpp"
#include "tivode/rng.hpp"
#include "tivode/serialize.hpp"

using namespace tivode;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  fs::path dir = fs::temp_directory_path() / "tivode-serialize-test";
  fs::create_directories(dir);
  return dir;
}

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("fnv1a64 reference vectors") {
  CHECK(fnv1a64({}) == 0xcbf29ce484222325ull);
  const std::uint8_t a = 'a';
  CHECK(fnv1a64({&a, 1}) == 0xaf63dc4c8601ec8cull);
  // Incremental hashing equals one-shot hashing.
  std::vector<std::uint8_t> msg = {'h', 'e', 'l', 'l', 'o'};
  std::uint64_t inc = fnv1a64_update(fnv1a64({msg.data(), 2}), {msg.data() + 2, 3});
  CHECK(inc == fnv1a64(msg));
}

TEST_CASE("hash_tensor separates shape from payload") {
  Tensor a = Tensor::from({1, 2, 3, 4, 5, 6}, {2, 3});
  Tensor b = Tensor::from({1, 2, 3, 4, 5, 6}, {3, 2});
  Tensor c = Tensor::from({1, 2, 3, 4, 5, 7}, {2, 3});
  CHECK(hash_tensor(a) == hash_tensor(a));
  CHECK(hash_tensor(a) != hash_tensor(b));
  CHECK(hash_tensor(a) != hash_tensor(c));
}

TEST_CASE("tensor stream round trip") {
  Rng rng(21);
  Tensor t = randn({3, 1, 4}, rng);
  std::stringstream ss;
  write_tensor(ss, t);
  Tensor back = read_tensor(ss);
  CHECK(back.shape() == t.shape());
  CHECK(back.values() == t.values());
}

TEST_CASE("truncated tensor bytes raise FormatError") {
  Tensor t = Tensor::from({1.0, 2.0}, {2});
  std::stringstream ss;
  write_tensor(ss, t);
  std::string full = ss.str();
  std::stringstream cut(full.substr(0, full.size() - 4));
  CHECK_THROWS_AS(read_tensor(cut), FormatError);
}

TEST_CASE("checkpoint file round trip preserves order, payload and meta") {
  Rng rng(22);
  Checkpoint ck;
  ck.put("b.second", randn({2, 2}, rng));
  ck.put("a.first", randn({3}, rng));
  ck.meta["run"] = "42";
  ck.meta["note"] = "two words";

  fs::path p = temp_dir() / "roundtrip.ckpt";
  ck.save(p);
  Checkpoint back = Checkpoint::load(p);

  REQUIRE(back.entries().size() == 2);
  CHECK(back.entries()[0].first == "b.second");  // insertion order kept
  CHECK(back.entries()[1].first == "a.first");
  CHECK(back.get("a.first").values() == ck.get("a.first").values());
  CHECK(back.get("b.second").values() == ck.get("b.second").values());
  CHECK(back.meta.at("run") == "42");
  CHECK(back.meta.at("note") == "two words");
  CHECK_THROWS_AS(back.get("missing"), FormatError);
  CHECK(back.has("a.first"));
  CHECK(!back.has("missing"));
}

TEST_CASE("identical checkpoints serialize to identical bytes") {
  Rng rng(23);
  Tensor t = randn({4, 4}, rng);
  Checkpoint a, b;
  a.put("w", t);
  a.meta["k"] = "v";
  b.put("w", t);
  b.meta["k"] = "v";
  std::stringstream sa, sb;
  a.write(sa);
  b.write(sb);
  CHECK(sa.str() == sb.str());
}

TEST_CASE("corrupted checkpoints raise FormatError with an offset") {
  Rng rng(24);
  Checkpoint ck;
  ck.put("w", randn({8}, rng));
  fs::path p = temp_dir() / "corrupt.ckpt";
  ck.save(p);
  std::vector<std::uint8_t> bytes = read_bytes(p);
  REQUIRE(bytes.size() > 16);

  SUBCASE("bad magic") {
    bytes[0] ^= 0xff;
    write_bytes(p, bytes);
    CHECK_THROWS_AS(Checkpoint::load(p), FormatError);
  }
  SUBCASE("truncated payload") {
    bytes.resize(bytes.size() / 2);
    write_bytes(p, bytes);
    try {
      Checkpoint::load(p);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("offset") != std::string::npos);
    }
  }
}

TEST_CASE("missing checkpoint file raises IoError") {
  CHECK_THROWS_AS(Checkpoint::load(temp_dir() / "does-not-exist.ckpt"), IoError);
}

TEST_CASE("u8 frame quantization clamps and rounds") {
  Tensor frame = Tensor::from({-0.5, 0.0, 0.5, 1.0, 2.0}, {1, 5});
  std::vector<std::uint8_t> u8 = frame_to_u8(frame);
  CHECK(u8 == std::vector<std::uint8_t>{0, 0, 128, 255, 255});  // round(0.5*255) = 128
  Tensor back = u8_to_frame(u8, 1, 5);
  CHECK(back.values()[2] == 128.0 / 255.0);
}

TEST_CASE("pgm round trip is exact on the u8 grid") {
  std::vector<double> v(16 * 9);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i % 256) / 255.0;
  Tensor frame = Tensor::from(std::move(v), {9, 16});
  fs::path p = temp_dir() / "frame.pgm";
  write_pgm(p, frame);
  Tensor back = read_pgm(p);
  CHECK(back.shape() == Shape{9, 16});
  CHECK(back.values() == frame.values());
}

TEST_CASE("pgm rejects other maxvals and magic") {
  fs::path p = temp_dir() / "bad.pgm";
  {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << "P5\n2 2\n127\n";
    out.write("\0\0\0\0", 4);
  }
  CHECK_THROWS_AS(read_pgm(p), FormatError);
  {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << "P2\n2 2\n255\n0 0 0 0\n";
  }
  CHECK_THROWS_AS(read_pgm(p), FormatError);
}
