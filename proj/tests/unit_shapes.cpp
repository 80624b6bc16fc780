#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <vector>

#include "testutil.hpp"
#include "tivode/errors.hpp"
#include "tivode/rng.hpp"
#include "tivode/shapes.hpp"

using namespace tivode;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& leaf) {
  fs::path dir = fs::temp_directory_path() / "tivode-shapes-test" / leaf;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ShapeSpec square_at(double row, double col, double size, double intensity) {
  ShapeSpec s;
  s.glyph = Glyph::square;
  s.size = size;
  s.intensity = intensity;
  s.row0 = row;
  s.col0 = col;
  s.pattern = MotionPattern::still;
  return s;
}

}  // namespace

TEST_CASE("still shapes do not move") {
  ShapeSpec s = square_at(10.0, 12.0, 6.0, 1.0);
  for (double t : {0.0, 0.3, 0.5, 1.0}) {
    auto [r, c] = trajectory(s, t);
    CHECK(r == 10.0);
    CHECK(c == 12.0);
  }
}

TEST_CASE("oscillating patterns return to the start and peak halfway") {
  ShapeSpec s = square_at(16.0, 16.0, 4.0, 1.0);
  s.pattern = MotionPattern::up_then_down;
  s.amplitude = 8.0;

  auto p0 = trajectory(s, 0.0);
  auto p1 = trajectory(s, 1.0);
  CHECK(p0.first == doctest::Approx(p1.first).epsilon(1e-12));
  CHECK(p0.second == p1.second);

  auto mid = trajectory(s, 0.5);
  CHECK(mid.first == doctest::Approx(16.0 - 8.0).epsilon(1e-12));  // extremum
  auto quarter = trajectory(s, 0.25);
  CHECK(16.0 - quarter.first ==
        doctest::Approx(8.0 * std::sin(std::numbers::pi / 4.0)).epsilon(1e-12));
  CHECK(16.0 - quarter.first == doctest::Approx(5.65685424949238).epsilon(1e-10));
  CHECK(quarter.second == 16.0);  // the column never moves
}

TEST_CASE("axis patterns mirror one another") {
  ShapeSpec s = square_at(16.0, 16.0, 4.0, 1.0);
  s.amplitude = 5.0;
  s.pattern = MotionPattern::down_then_up;
  CHECK(trajectory(s, 0.5).first == doctest::Approx(21.0).epsilon(1e-12));
  s.pattern = MotionPattern::left_then_right;
  CHECK(trajectory(s, 0.5).second == doctest::Approx(11.0).epsilon(1e-12));
  CHECK(trajectory(s, 0.5).first == 16.0);
  s.pattern = MotionPattern::right_then_left;
  CHECK(trajectory(s, 0.5).second == doctest::Approx(21.0).epsilon(1e-12));
}

TEST_CASE("rendering no shapes gives a zero frame") {
  Tensor frame = render_frame({}, 0.5, 16, 16);
  CHECK(frame.shape() == Shape{16, 16});
  for (double v : frame.values()) CHECK(v == 0.0);
}

TEST_CASE("an axis-aligned square covers exactly size^2 pixels at its intensity") {
  const double intensity = 128.0 / 255.0;
  ShapeSpec s = square_at(10.0, 10.0, 4.0, intensity);
  Tensor frame = render_frame({s}, 0.0, 24, 24);
  std::size_t at_intensity = 0, nonzero = 0;
  for (double v : frame.values()) {
    if (v != 0.0) ++nonzero;
    if (v == intensity) ++at_intensity;
  }
  CHECK(at_intensity == 16);
  CHECK(nonzero == 16);
}

TEST_CASE("rendering is deterministic and snapped to the u8 grid") {
  ShapeSpec s = square_at(8.3, 9.1, 5.0, 0.8);
  s.pattern = MotionPattern::right_then_left;
  s.amplitude = 3.0;
  Tensor a = render_frame({s}, 0.37, 32, 32);
  Tensor b = render_frame({s}, 0.37, 32, 32);
  CHECK(a.values() == b.values());
  for (double v : a.values()) {
    CHECK(v == static_cast<double>(std::lround(v * 255.0)) / 255.0);
  }
}

TEST_CASE("overlapping shapes keep the brighter value") {
  ShapeSpec dim = square_at(10.0, 10.0, 4.0, 100.0 / 255.0);
  ShapeSpec bright = square_at(10.0, 10.0, 2.0, 200.0 / 255.0);
  Tensor frame = render_frame({dim, bright}, 0.0, 20, 20);
  CHECK(frame.values()[10 * 20 + 10] == 200.0 / 255.0);
  CHECK(frame.values()[8 * 20 + 8] == 100.0 / 255.0);
}

TEST_CASE("captions follow the template grammar") {
  ShapeSpec sq = square_at(8, 8, 4, 1.0);
  ShapeSpec circ = square_at(20, 20, 4, 1.0);
  circ.glyph = Glyph::circle;
  circ.pattern = MotionPattern::up_then_down;
  CHECK(caption_for({sq}) == "the square stays still");
  CHECK(caption_for({sq, circ}) ==
        "the square stays still and the circle moves up then down");

  auto parsed = parse_caption("the square stays still and the circle moves up then down");
  REQUIRE(parsed.size() == 2);
  CHECK(parsed[0].first == Glyph::square);
  CHECK(parsed[0].second == MotionPattern::still);
  CHECK(parsed[1].first == Glyph::circle);
  CHECK(parsed[1].second == MotionPattern::up_then_down);

  CHECK_THROWS_AS(parse_caption("the blob moves up then down"), InputError);
  CHECK_THROWS_AS(parse_caption("square moves sideways"), InputError);
  CHECK_THROWS_AS(parse_caption(""), InputError);
}

TEST_CASE("every caption word is in the vocabulary") {
  const auto& vocab = caption_vocabulary();
  for (Glyph g : {Glyph::square, Glyph::circle, Glyph::triangle, Glyph::cross}) {
    CHECK(std::find(vocab.begin(), vocab.end(), glyph_name(g)) != vocab.end());
  }
  for (MotionPattern p :
       {MotionPattern::up_then_down, MotionPattern::left_then_right, MotionPattern::down_then_up,
        MotionPattern::right_then_left, MotionPattern::still}) {
    std::istringstream in(pattern_phrase(p));
    for (std::string w; in >> w;) {
      CHECK(std::find(vocab.begin(), vocab.end(), w) != vocab.end());
    }
  }
}

TEST_CASE("make_sample is deterministic and consistent with its own specs") {
  SampleDraw a = make_sample(99, 1, 6, 32, 32);
  SampleDraw b = make_sample(99, 1, 6, 32, 32);
  CHECK(a.sample.equals(b.sample));
  CHECK(a.sample.frames.size() == 6);
  CHECK(a.sample.times.times.front() == 0.0);
  CHECK(a.sample.times.times.back() == 1.0);
  CHECK(a.sample.caption == caption_for(a.specs));
  for (std::size_t i = 0; i < 6; ++i) {
    Tensor truth = render_frame(a.specs, a.sample.times.times[i], 32, 32);
    CHECK(a.sample.frames[i].values() == truth.values());
  }
  SampleDraw c = make_sample(100, 1, 6, 32, 32);
  CHECK(!a.sample.equals(c.sample));
}

TEST_CASE("multi-shape samples draw distinct glyphs") {
  for (std::uint64_t seed : {1ull, 2ull, 3ull, 4ull, 5ull}) {
    SampleDraw d = make_sample(seed, 2, 4, 32, 32);
    REQUIRE(d.specs.size() == 2);
    CHECK(d.specs[0].glyph != d.specs[1].glyph);
  }
}

TEST_CASE("shapes stay on the canvas at every rendered time") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SampleDraw d = make_sample(seed, 2, 8, 32, 32);
    for (const ShapeSpec& s : d.specs) {
      for (double t = 0.0; t <= 1.0; t += 0.05) {
        auto [r, c] = trajectory(s, t);
        CHECK(r - s.size / 2.0 >= -1e-9);
        CHECK(r + s.size / 2.0 <= 32.0 + 1e-9);
        CHECK(c - s.size / 2.0 >= -1e-9);
        CHECK(c + s.size / 2.0 <= 32.0 + 1e-9);
      }
    }
  }
}

TEST_CASE("dataset write/read round trip") {
  Dataset ds = generate_dataset(12, 1, 6, 32, 32, 77);
  CHECK(ds.meta.count == 12);
  CHECK(ds.meta.vocab == caption_vocabulary());
  fs::path dir = temp_dir("roundtrip");
  write_dataset(dir, ds);
  Dataset back = read_dataset(dir);
  CHECK(back.meta.count == ds.meta.count);
  CHECK(back.meta.vocab == ds.meta.vocab);
  REQUIRE(back.samples.size() == 12);
  for (std::size_t i = 0; i < 12; ++i) CHECK(back.samples[i].equals(ds.samples[i]));
}

TEST_CASE("dataset splits from disjoint index ranges never share seeds") {
  Dataset head = generate_dataset(4, 1, 4, 32, 32, 7, 0);
  Dataset tail = generate_dataset(4, 1, 4, 32, 32, 7, 4);
  for (const auto& a : head.samples) {
    for (const auto& b : tail.samples) CHECK(a.seed != b.seed);
  }
  // Regenerating the same range reproduces the same samples.
  Dataset again = generate_dataset(4, 1, 4, 32, 32, 7, 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(tail.samples[i].equals(again.samples[i]));
}

TEST_CASE("a corrupted shard raises FormatError rather than crashing") {
  Dataset ds = generate_dataset(6, 1, 4, 32, 32, 33);
  fs::path dir = temp_dir("corrupt");
  write_dataset(dir, ds);
  fs::path shard = dir / "shard-0000.bin";
  REQUIRE(fs::exists(shard));
  auto size = fs::file_size(shard);
  fs::resize_file(shard, size / 2);
  CHECK_THROWS_AS(read_dataset(dir), FormatError);
}

TEST_CASE("a 200-sample dataset stays well under ten megabytes") {
  Dataset ds = generate_dataset(200, 1, 8, 32, 32, 5);
  fs::path dir = temp_dir("size");
  write_dataset(dir, ds);
  std::uintmax_t total = 0;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file()) total += entry.file_size();
  }
  CHECK(total < 10 * 1024 * 1024);
  CHECK(total > 0);
}
