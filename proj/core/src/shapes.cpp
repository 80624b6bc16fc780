#include "tivode/shapes.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "tivode/rng.hpp"
#include "tivode/serialize.hpp"

namespace tivode {

namespace {

constexpr std::array<Glyph, 4> kGlyphs = {Glyph::square, Glyph::circle, Glyph::triangle,
                                          Glyph::cross};
constexpr std::size_t kShardCapacity = 100;

void put_u16(std::ostream& os, std::uint16_t v) {
  char b[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
  os.write(b, 2);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

bool get_u16(std::istream& is, std::uint16_t& v) {
  unsigned char b[2];
  if (!is.read(reinterpret_cast<char*>(b), 2)) return false;
  v = static_cast<std::uint16_t>(b[0] | (b[1] << 8));
  return true;
}

bool get_u64(std::istream& is, std::uint64_t& v) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) return false;
  v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return true;
}

bool inside(const ShapeSpec& spec, double rc_row, double rc_col, double y, double x) {
  const double h = spec.size / 2.0;
  const double dy = y - rc_row, dx = x - rc_col;
  switch (spec.glyph) {
    case Glyph::square:
      return dy >= -h && dy < h && dx >= -h && dx < h;
    case Glyph::circle:
      return dy * dy + dx * dx <= h * h;
    case Glyph::triangle:  // apex up, base at the bottom of the box
      return dy >= -h && dy < h && std::abs(dx) <= (dy + h) / 2.0;
    case Glyph::cross: {
      const double bw = spec.size / 6.0;
      return (std::abs(dx) < bw && std::abs(dy) < h) || (std::abs(dy) < bw && std::abs(dx) < h);
    }
  }
  return false;
}

std::string shard_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "shard-%04zu.bin", index);
  return buf;
}

TimeGrid uniform_times(std::size_t t_frames) {
  std::vector<double> ts(t_frames);
  for (std::size_t i = 0; i < t_frames; ++i) {
    ts[i] = static_cast<double>(i) / static_cast<double>(t_frames - 1);
  }
  return TimeGrid(std::move(ts));
}

}  // namespace

const char* glyph_name(Glyph g) {
  switch (g) {
    case Glyph::square: return "square";
    case Glyph::circle: return "circle";
    case Glyph::triangle: return "triangle";
    case Glyph::cross: return "cross";
  }
  throw ContractError("unknown glyph");
}

std::string pattern_phrase(MotionPattern p) {
  switch (p) {
    case MotionPattern::up_then_down: return "moves up then down";
    case MotionPattern::left_then_right: return "moves left then right";
    case MotionPattern::down_then_up: return "moves down then up";
    case MotionPattern::right_then_left: return "moves right then left";
    case MotionPattern::still: return "stays still";
  }
  throw ContractError("unknown motion pattern");
}

const std::vector<std::string>& caption_vocabulary() {
  static const std::vector<std::string> words = {"the",  "square", "circle", "triangle",
                                                 "cross", "moves",  "up",     "then",
                                                 "down",  "left",   "right",  "stays",
                                                 "still", "and"};
  return words;
}

std::pair<double, double> trajectory(const ShapeSpec& spec, double t) {
  const double s = spec.amplitude * std::sin(std::numbers::pi * t);
  switch (spec.pattern) {
    case MotionPattern::up_then_down: return {spec.row0 - s, spec.col0};
    case MotionPattern::down_then_up: return {spec.row0 + s, spec.col0};
    case MotionPattern::left_then_right: return {spec.row0, spec.col0 - s};
    case MotionPattern::right_then_left: return {spec.row0, spec.col0 + s};
    case MotionPattern::still: return {spec.row0, spec.col0};
  }
  throw ContractError("unknown motion pattern");
}

Tensor render_frame(const std::vector<ShapeSpec>& specs, double t, std::size_t h,
                    std::size_t w) {
  std::vector<double> frame(h * w, 0.0);
  constexpr int kSub = 4;
  for (const ShapeSpec& spec : specs) {
    auto [rc, cc] = trajectory(spec, t);
    const double half = spec.size / 2.0 + 1.0;
    const long r_lo = std::max(0L, static_cast<long>(std::floor(rc - half)));
    const long r_hi = std::min(static_cast<long>(h), static_cast<long>(std::ceil(rc + half)));
    const long c_lo = std::max(0L, static_cast<long>(std::floor(cc - half)));
    const long c_hi = std::min(static_cast<long>(w), static_cast<long>(std::ceil(cc + half)));
    for (long i = r_lo; i < r_hi; ++i) {
      for (long j = c_lo; j < c_hi; ++j) {
        int hits = 0;
        for (int sy = 0; sy < kSub; ++sy) {
          const double y = static_cast<double>(i) + (sy + 0.5) / kSub;
          for (int sx = 0; sx < kSub; ++sx) {
            const double x = static_cast<double>(j) + (sx + 0.5) / kSub;
            if (inside(spec, rc, cc, y, x)) ++hits;
          }
        }
        if (hits == 0) continue;
        const double v = spec.intensity * hits / (kSub * kSub);
        const std::size_t p = static_cast<std::size_t>(i) * w + static_cast<std::size_t>(j);
        frame[p] = std::max(frame[p], v);
      }
    }
  }
  // Snap onto the u8 grid so stored frames round-trip bit-exactly.
  for (double& v : frame) {
    v = static_cast<double>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0;
  }
  return Tensor::from(std::move(frame), {h, w});
}

bool VideoSample::equals(const VideoSample& other) const {
  if (seed != other.seed || caption != other.caption ||
      times.times != other.times.times || frames.size() != other.frames.size()) {
    return false;
  }
  for (std::size_t i = 0; i < frames.size(); ++i) {
    if (!frames[i].equals(other.frames[i])) return false;
  }
  return true;
}

std::string caption_for(const std::vector<ShapeSpec>& specs) {
  if (specs.empty()) throw ContractError("caption for zero shapes");
  std::string out;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (i) out += " and ";
    out += "the ";
    out += glyph_name(specs[i].glyph);
    out += " ";
    out += pattern_phrase(specs[i].pattern);
  }
  return out;
}

std::vector<std::pair<Glyph, MotionPattern>> parse_caption(const std::string& caption) {
  std::istringstream in(caption);
  std::vector<std::string> tok;
  for (std::string w; in >> w;) tok.push_back(w);

  auto fail = [&](const std::string& why) -> void {
    throw InputError("caption '" + caption + "': " + why);
  };
  auto glyph_of = [&](const std::string& w) {
    for (Glyph g : kGlyphs) {
      if (w == glyph_name(g)) return g;
    }
    fail("unknown shape word '" + w + "'");
    return Glyph::square;
  };
  auto pattern_of = [&](const std::string& a, const std::string& b) {
    if (a == "up" && b == "down") return MotionPattern::up_then_down;
    if (a == "down" && b == "up") return MotionPattern::down_then_up;
    if (a == "left" && b == "right") return MotionPattern::left_then_right;
    if (a == "right" && b == "left") return MotionPattern::right_then_left;
    fail("unknown direction pair '" + a + " then " + b + "'");
    return MotionPattern::still;
  };

  std::vector<std::pair<Glyph, MotionPattern>> out;
  std::size_t i = 0;
  auto expect = [&](const char* w) {
    if (i >= tok.size() || tok[i] != w) fail("expected '" + std::string(w) + "'");
    ++i;
  };
  while (true) {
    expect("the");
    if (i >= tok.size()) fail("caption ends after 'the'");
    Glyph g = glyph_of(tok[i++]);
    if (i >= tok.size()) fail("caption ends after the shape word");
    if (tok[i] == "stays") {
      ++i;
      expect("still");
      out.emplace_back(g, MotionPattern::still);
    } else if (tok[i] == "moves") {
      ++i;
      if (i + 2 >= tok.size()) fail("incomplete motion phrase");
      std::string first = tok[i++];
      expect("then");
      std::string second = tok[i++];
      out.emplace_back(g, pattern_of(first, second));
    } else {
      fail("expected 'stays' or 'moves', got '" + tok[i] + "'");
    }
    if (i == tok.size()) break;
    expect("and");
  }
  return out;
}

SampleDraw make_sample(std::uint64_t seed, int n_shapes, int t_frames, std::size_t h,
                       std::size_t w) {
  if (n_shapes < 1 || n_shapes > 3) {
    throw InputError("n_shapes must be 1..3 (distinct glyphs), got " +
                     std::to_string(n_shapes));
  }
  if (t_frames < 2) throw InputError("a sample needs at least 2 frames");
  if (h < 16 || w < 16) throw InputError("canvas must be at least 16x16");

  Rng rng(seed);
  const double scl = static_cast<double>(std::min(h, w)) / 32.0;

  std::vector<Glyph> pool(kGlyphs.begin(), kGlyphs.end());
  rng.shuffle(pool);

  std::vector<ShapeSpec> specs;
  for (int s = 0; s < n_shapes; ++s) {
    ShapeSpec spec;
    spec.glyph = pool[static_cast<std::size_t>(s)];
    spec.pattern = static_cast<MotionPattern>(rng.index(5));
    spec.size = (6.0 + 2.0 * static_cast<double>(rng.index(3))) * scl;  // 6, 8, 10 at 32px
    spec.intensity = rng.uniform(0.6, 1.0);
    const bool moving = spec.pattern != MotionPattern::still;
    spec.amplitude = moving ? rng.uniform(4.0, 8.0) * scl : 0.0;
    const bool vertical = spec.pattern == MotionPattern::up_then_down ||
                          spec.pattern == MotionPattern::down_then_up;
    const double margin = spec.size / 2.0 + 1.0;
    const double a_row = vertical ? spec.amplitude : 0.0;
    const double a_col = (moving && !vertical) ? spec.amplitude : 0.0;
    spec.row0 = rng.uniform(margin + a_row, static_cast<double>(h) - margin - a_row);
    spec.col0 = rng.uniform(margin + a_col, static_cast<double>(w) - margin - a_col);
    specs.push_back(spec);
  }

  SampleDraw draw;
  draw.specs = specs;
  draw.sample.seed = seed;
  draw.sample.caption = caption_for(specs);
  draw.sample.times = uniform_times(static_cast<std::size_t>(t_frames));
  for (double t : draw.sample.times.times) {
    draw.sample.frames.push_back(render_frame(specs, t, h, w));
  }
  return draw;
}

Dataset generate_dataset(std::size_t count, int n_shapes, int t_frames, std::size_t h,
                         std::size_t w, std::uint64_t base_seed, std::size_t first_index) {
  if (count == 0) throw InputError("dataset must contain at least one sample");
  Dataset ds;
  ds.meta.count = count;
  ds.meta.height = h;
  ds.meta.width = w;
  ds.meta.frames = static_cast<std::size_t>(t_frames);
  ds.meta.vocab = caption_vocabulary();
  ds.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    ds.samples.push_back(
        make_sample(mix_seed(base_seed, first_index + i), n_shapes, t_frames, h, w).sample);
  }
  return ds;
}

void write_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  if (ds.samples.size() != ds.meta.count) {
    throw ContractError("dataset meta count does not match sample count");
  }
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create dataset directory '" + dir.string() + "'");

  {
    std::ofstream mf(dir / "manifest.txt");
    if (!mf) throw IoError("cannot write manifest in '" + dir.string() + "'");
    mf << "version=" << ds.meta.version << "\n";
    mf << "count=" << ds.meta.count << "\n";
    mf << "height=" << ds.meta.height << "\n";
    mf << "width=" << ds.meta.width << "\n";
    mf << "frames=" << ds.meta.frames << "\n";
    mf << "vocab=";
    for (std::size_t i = 0; i < ds.meta.vocab.size(); ++i) {
      if (i) mf << ' ';
      mf << ds.meta.vocab[i];
    }
    mf << "\n";
    mf.flush();
    if (!mf) throw IoError("manifest write failed in '" + dir.string() + "'");
  }

  std::size_t shard = 0;
  for (std::size_t s = 0; s < ds.samples.size(); s += kShardCapacity, ++shard) {
    std::ofstream os(dir / shard_name(shard), std::ios::binary);
    if (!os) throw IoError("cannot write shard in '" + dir.string() + "'");
    const std::size_t end = std::min(ds.samples.size(), s + kShardCapacity);
    for (std::size_t i = s; i < end; ++i) {
      const VideoSample& vs = ds.samples[i];
      if (vs.frames.size() != vs.times.size() || vs.frames.empty()) {
        throw ContractError("sample frame/time count mismatch");
      }
      if (vs.frames.size() > 0xffff || vs.caption.size() > 0xffff) {
        throw ContractError("sample too large for the shard format");
      }
      put_u64(os, vs.seed);
      put_u16(os, static_cast<std::uint16_t>(vs.frames.size()));
      put_u16(os, static_cast<std::uint16_t>(vs.caption.size()));
      os.write(vs.caption.data(), static_cast<std::streamsize>(vs.caption.size()));
      for (const Tensor& f : vs.frames) {
        if (f.rank() != 2 || f.dim(0) != ds.meta.height || f.dim(1) != ds.meta.width) {
          throw ContractError("frame shape does not match dataset meta");
        }
        auto bytes = frame_to_u8(f);
        os.write(reinterpret_cast<const char*>(bytes.data()),
                 static_cast<std::streamsize>(bytes.size()));
      }
    }
    os.flush();
    if (!os) throw IoError("shard write failed in '" + dir.string() + "'");
  }
}

Dataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.txt");
  if (!mf) throw IoError("cannot open manifest in '" + dir.string() + "'");
  Dataset ds;
  bool saw_version = false, saw_count = false, saw_h = false, saw_w = false, saw_t = false;
  std::string line;
  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("manifest line without '='", 0);
    std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    try {
      if (key == "version") {
        ds.meta.version = static_cast<std::uint32_t>(std::stoul(val));
        saw_version = true;
      } else if (key == "count") {
        ds.meta.count = std::stoul(val);
        saw_count = true;
      } else if (key == "height") {
        ds.meta.height = std::stoul(val);
        saw_h = true;
      } else if (key == "width") {
        ds.meta.width = std::stoul(val);
        saw_w = true;
      } else if (key == "frames") {
        ds.meta.frames = std::stoul(val);
        saw_t = true;
      } else if (key == "vocab") {
        std::istringstream vs(val);
        for (std::string w; vs >> w;) ds.meta.vocab.push_back(w);
      }
      // unknown keys are ignored for forward compatibility
    } catch (const std::logic_error&) {
      throw FormatError("manifest value for '" + key + "' is not a number", 0);
    }
  }
  if (!saw_version || !saw_count || !saw_h || !saw_w || !saw_t) {
    throw FormatError("manifest missing a required key", 0);
  }
  if (ds.meta.version != 1) {
    throw FormatError("unsupported dataset version " + std::to_string(ds.meta.version), 0);
  }

  const std::size_t frame_bytes = ds.meta.height * ds.meta.width;
  std::size_t shard = 0;
  while (ds.samples.size() < ds.meta.count) {
    const auto path = dir / shard_name(shard);
    std::ifstream is(path, std::ios::binary);
    if (!is) {
      throw FormatError("dataset ends early: missing " + shard_name(shard) + " with " +
                            std::to_string(ds.meta.count - ds.samples.size()) +
                            " samples unread",
                        0);
    }
    while (ds.samples.size() < ds.meta.count) {
      std::uint64_t seed;
      if (!get_u64(is, seed)) {
        if (is.eof() && is.gcount() == 0) break;  // clean end of shard
        throw FormatError("truncated sample header in " + shard_name(shard),
                          static_cast<std::size_t>(is.gcount()));
      }
      std::uint16_t t_frames = 0, cap_len = 0;
      if (!get_u16(is, t_frames) || !get_u16(is, cap_len)) {
        throw FormatError("truncated sample header in " + shard_name(shard), 8);
      }
      if (t_frames < 2) {
        throw FormatError("sample declares fewer than 2 frames", 8);
      }
      VideoSample vs;
      vs.seed = seed;
      vs.caption.resize(cap_len);
      if (cap_len && !is.read(vs.caption.data(), cap_len)) {
        throw FormatError("truncated caption in " + shard_name(shard), 12);
      }
      std::vector<std::uint8_t> buf(frame_bytes);
      for (std::uint16_t f = 0; f < t_frames; ++f) {
        if (!is.read(reinterpret_cast<char*>(buf.data()),
                     static_cast<std::streamsize>(buf.size()))) {
          throw FormatError("truncated frame payload in " + shard_name(shard),
                            12 + cap_len + static_cast<std::size_t>(f) * frame_bytes);
        }
        vs.frames.push_back(u8_to_frame(buf, ds.meta.height, ds.meta.width));
      }
      vs.times = uniform_times(t_frames);
      ds.samples.push_back(std::move(vs));
    }
    ++shard;
  }
  return ds;
}

}  // namespace tivode
