// Synthetic moving-shapes video dataset. Shapes follow smooth sine
// trajectories so ground-truth frames exist at any t in [0,1], and captions
// come from a closed template grammar ("the square moves up then down and
// the circle stays still").
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "tivode/ode.hpp"
#include "tivode/tensor.hpp"

namespace tivode {

enum class Glyph { square, circle, triangle, cross };
enum class MotionPattern { up_then_down, left_then_right, down_then_up, right_then_left, still };

const char* glyph_name(Glyph g);
// "moves up then down", ..., or "stays still".
std::string pattern_phrase(MotionPattern p);

// Every word the caption grammar can produce, in a fixed order. The text
// fusion vocabulary is built from this list.
const std::vector<std::string>& caption_vocabulary();

struct ShapeSpec {
  Glyph glyph = Glyph::square;
  double size = 8.0;       // pixels; the glyph's bounding box is size x size
  double intensity = 1.0;  // (0, 1]
  double row0 = 0.0;       // start centre
  double col0 = 0.0;
  MotionPattern pattern = MotionPattern::still;
  double amplitude = 0.0;  // pixels of peak displacement
};

// Centre position at time t. up_then_down: row(t) = row0 - amplitude*sin(pi*t)
// with the column fixed; the other axis patterns are the sign/axis analogues;
// still is constant. position(0) == position(1) for every pattern.
std::pair<double, double> trajectory(const ShapeSpec& spec, double t);

// Anti-aliased rasterization (4x4 supersampling) of all shapes at time t onto
// an [H x W] canvas; overlaps compose by max intensity. Output values are
// snapped to the 1/255 grid, so frames survive u8 serialization bit-exactly.
Tensor render_frame(const std::vector<ShapeSpec>& specs, double t, std::size_t h,
                    std::size_t w);

struct VideoSample {
  std::uint64_t seed = 0;
  std::vector<Tensor> frames;  // [H x W], values on the 1/255 grid
  TimeGrid times;              // uniform {i/(T-1)}
  std::string caption;

  bool equals(const VideoSample& other) const;
};

// Caption text for an ordered shape list.
std::string caption_for(const std::vector<ShapeSpec>& specs);
// Inverse of caption_for up to (glyph, pattern); throws InputError on text
// outside the grammar.
std::vector<std::pair<Glyph, MotionPattern>> parse_caption(const std::string& caption);

struct SampleDraw {
  VideoSample sample;
  std::vector<ShapeSpec> specs;  // the ground truth behind the sample
};

// Deterministic in seed. Draws n_shapes distinct glyphs with random pattern,
// size, intensity, start and amplitude, all confined to the canvas for every
// t; renders T frames at uniform times.
SampleDraw make_sample(std::uint64_t seed, int n_shapes, int t_frames, std::size_t h,
                       std::size_t w);

struct DatasetMeta {
  std::uint32_t version = 1;
  std::size_t count = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t frames = 0;  // nominal T
  std::vector<std::string> vocab;
};

struct Dataset {
  DatasetMeta meta;
  std::vector<VideoSample> samples;
};

// Samples get seeds mix_seed(base_seed, first_index + i), so splits built
// from disjoint index ranges never share a sample.
Dataset generate_dataset(std::size_t count, int n_shapes, int t_frames, std::size_t h,
                         std::size_t w, std::uint64_t base_seed, std::size_t first_index = 0);

// Directory layout: manifest.txt (key=value) plus shard-%04d.bin, at most 100
// samples per shard. Round-trip is bit-exact.
void write_dataset(const std::filesystem::path& dir, const Dataset& ds);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace tivode
