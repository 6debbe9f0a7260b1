#include "manet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "manet/errors.hpp"
#include "manet/parameters.hpp"

namespace manet::data {

void NoiseSpec::validate() const {
  if (!(gaussian_std >= 0.0 && gaussian_std <= 1.0)) {
    throw ConfigError("gaussian_std must be in [0,1], got " + std::to_string(gaussian_std));
  }
  if (!(sp_fraction >= 0.0 && sp_fraction <= 1.0)) {
    throw ConfigError("sp_fraction must be in [0,1], got " + std::to_string(sp_fraction));
  }
}

Shape Clip::frame_shape() const {
  if (frames.empty()) throw ShapeError("clip has no frames");
  const Shape s = frames.front().shape();
  for (std::size_t i = 1; i < frames.size(); ++i) {
    if (!(frames[i].shape() == s)) {
      throw ShapeError("clip frame " + std::to_string(i) + " is " + frames[i].shape().str() +
                       " but frame 0 is " + s.str());
    }
  }
  return s;
}

TensorF corrupt_frame(const TensorF& frame, const NoiseSpec& spec, std::uint64_t index) {
  spec.validate();
  const Shape s = frame.shape();
  std::vector<float> out(frame.data().begin(), frame.data().end());
  std::mt19937_64 rng(splitmix64(spec.seed ^ splitmix64(index)));
  if (spec.gaussian_std > 0.0) {
    std::normal_distribution<double> gauss(0.0, spec.gaussian_std);
    for (auto& v : out) v = static_cast<float>(std::clamp(v + gauss(rng), 0.0, 1.0));
  }
  if (spec.sp_fraction > 0.0) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const std::size_t plane = s.plane();
    for (int n = 0; n < s.n; ++n) {
      float* base = out.data() + static_cast<std::size_t>(n) * s.c * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        if (unit(rng) >= spec.sp_fraction) continue;
        const float value = unit(rng) < 0.5 ? 0.0f : 1.0f;
        for (int c = 0; c < s.c; ++c) base[c * plane + p] = value;
      }
    }
  }
  return TensorF(s, std::move(out));
}

Clip corrupt(const Clip& clip, const NoiseSpec& spec) {
  spec.validate();
  Clip out;
  out.frames.reserve(clip.frames.size());
  for (std::size_t i = 0; i < clip.frames.size(); ++i) {
    out.frames.push_back(corrupt_frame(clip.frames[i], spec, i));
  }
  return out;
}

template <typename T>
std::vector<double> psnr_per_item(const Tensor<T>& pred, const Tensor<T>& target, double peak) {
  if (!(pred.shape() == target.shape())) {
    throw ShapeError("psnr: " + pred.shape().str() + " vs " + target.shape().str());
  }
  const Shape s = pred.shape();
  const std::size_t per_item = static_cast<std::size_t>(s.c) * s.plane();
  const auto a = pred.data();
  const auto b = target.data();
  std::vector<double> out;
  for (int n = 0; n < s.n; ++n) {
    double sse = 0.0;
    for (std::size_t i = n * per_item; i < (n + 1) * per_item; ++i) {
      const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
      sse += d * d;
    }
    const double mse = sse / static_cast<double>(per_item);
    out.push_back(mse == 0.0 ? kInfinitePsnr : 10.0 * std::log10(peak * peak / mse));
  }
  return out;
}

template <typename T>
double psnr(const Tensor<T>& pred, const Tensor<T>& target, double peak) {
  if (!(pred.shape() == target.shape())) {
    throw ShapeError("psnr: " + pred.shape().str() + " vs " + target.shape().str());
  }
  const auto a = pred.data();
  const auto b = target.data();
  double sse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    sse += d * d;
  }
  const double mse = sse / static_cast<double>(a.size());
  return mse == 0.0 ? kInfinitePsnr : 10.0 * std::log10(peak * peak / mse);
}

template double psnr(const TensorF&, const TensorF&, double);
template double psnr(const TensorD&, const TensorD&, double);
template std::vector<double> psnr_per_item(const TensorF&, const TensorF&, double);
template std::vector<double> psnr_per_item(const TensorD&, const TensorD&, double);

std::string format_psnr(double db) {
  if (std::isinf(db) && db > 0) return "inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", db);
  return buf;
}

std::string to_string(Pattern p) {
  switch (p) {
    case Pattern::checker:
      return "checker";
    case Pattern::ramp:
      return "ramp";
    case Pattern::texture:
      return "texture";
  }
  return "checker";
}

Pattern parse_pattern(const std::string& text) {
  if (text == "checker") return Pattern::checker;
  if (text == "ramp") return Pattern::ramp;
  if (text == "texture") return Pattern::texture;
  throw ConfigError("unknown pattern '" + text + "' (expected checker|ramp|texture)");
}

namespace {

int wrap(long i, int n) {
  const long r = i % n;
  return static_cast<int>(r < 0 ? r + n : r);
}

// Base pattern on the H x W grid, channel-major.
std::vector<double> base_pattern(Pattern pattern, int height, int width, int channels,
                                 std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  std::vector<double> base(plane * channels);
  switch (pattern) {
    case Pattern::checker: {
      const int cell = 2 + static_cast<int>(rng() % 7);
      for (int c = 0; c < channels; ++c) {
        const double lo = 0.1 + 0.3 * unit(rng);
        const double hi = 0.6 + 0.3 * unit(rng);
        for (int y = 0; y < height; ++y) {
          for (int x = 0; x < width; ++x) {
            base[c * plane + y * width + x] = ((x / cell + y / cell) % 2) ? hi : lo;
          }
        }
      }
      break;
    }
    case Pattern::ramp: {
      for (int c = 0; c < channels; ++c) {
        const double a = 0.2 + 0.6 * unit(rng);
        const double m = std::min(a, 1.0 - a) / 2.0;
        const double bx = m * (2.0 * unit(rng) - 1.0);
        const double by = m * (2.0 * unit(rng) - 1.0);
        for (int y = 0; y < height; ++y) {
          for (int x = 0; x < width; ++x) {
            base[c * plane + y * width + x] = a + bx * x / width + by * y / height;
          }
        }
      }
      break;
    }
    case Pattern::texture: {
      // Two octaves of periodic value noise.
      auto lattice_cell = [&](int coarse) {
        int g = coarse;
        while (g > 1 && (height % g != 0 || width % g != 0)) g /= 2;
        return g;
      };
      const int cells[2] = {lattice_cell(8), lattice_cell(4)};
      const double weights[2] = {2.0 / 3.0, 1.0 / 3.0};
      for (int c = 0; c < channels; ++c) {
        for (int o = 0; o < 2; ++o) {
          const int g = cells[o];
          const int lh = height / g, lw = width / g;
          std::vector<double> lattice(static_cast<std::size_t>(lh) * lw);
          for (auto& v : lattice) v = unit(rng);
          for (int y = 0; y < height; ++y) {
            for (int x = 0; x < width; ++x) {
              const double fy = static_cast<double>(y) / g, fx = static_cast<double>(x) / g;
              const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
              const double wy = fy - y0, wx = fx - x0;
              auto at = [&](int yy, int xx) { return lattice[wrap(yy, lh) * lw + wrap(xx, lw)]; };
              const double v = (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x0 + 1)) +
                                wy * ((1 - wx) * at(y0 + 1, x0) + wx * at(y0 + 1, x0 + 1));
              base[c * plane + y * width + x] += weights[o] * v;
            }
          }
        }
      }
      break;
    }
  }
  return base;
}

}  // namespace

Clip synth_clip(Pattern pattern, Motion motion, int frames, int height, int width,
                std::uint64_t seed, int channels) {
  if (frames < 2) throw ConfigError("synth_clip needs at least 2 frames");
  if (height < 1 || width < 1 || channels < 1) throw ConfigError("synth_clip: empty frame size");
  if (!std::isfinite(motion.dx) || !std::isfinite(motion.dy)) {
    throw ConfigError("synth_clip: motion must be finite");
  }
  std::mt19937_64 rng(splitmix64(seed));
  const auto base = base_pattern(pattern, height, width, channels, rng);
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  Clip clip;
  for (int t = 0; t < frames; ++t) {
    const double sx0 = -t * motion.dx, sy0 = -t * motion.dy;
    const double fx0 = std::floor(sx0), fy0 = std::floor(sy0);
    const double wx = sx0 - fx0, wy = sy0 - fy0;
    const long ox = static_cast<long>(fx0), oy = static_cast<long>(fy0);
    std::vector<float> out(plane * channels);
    for (int c = 0; c < channels; ++c) {
      const double* b = base.data() + c * plane;
      for (int y = 0; y < height; ++y) {
        const int y0 = wrap(y + oy, height), y1 = wrap(y + oy + 1, height);
        for (int x = 0; x < width; ++x) {
          const int x0 = wrap(x + ox, width), x1 = wrap(x + ox + 1, width);
          const double v = (1 - wy) * ((1 - wx) * b[y0 * width + x0] + wx * b[y0 * width + x1]) +
                           wy * ((1 - wx) * b[y1 * width + x0] + wx * b[y1 * width + x1]);
          out[c * plane + y * width + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
    clip.frames.emplace_back(Shape{1, channels, height, width}, std::move(out));
  }
  return clip;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError(path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

namespace {

class HeaderReader {
 public:
  explicit HeaderReader(const std::string& bytes) : b_(bytes) {}

  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      const char c = b_[pos_];
      if (c == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  long integer(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    long v = 0;
    while (pos_ < b_.size() && std::isdigit(static_cast<unsigned char>(b_[pos_]))) {
      v = v * 10 + (b_[pos_] - '0');
      if (v > 1'000'000) throw ParseError(std::string("netpbm: ") + what + " too large", start);
      ++pos_;
    }
    if (pos_ == start) throw ParseError(std::string("netpbm: expected ") + what, start);
    return v;
  }

  std::size_t pos() const { return pos_; }
  void advance(std::size_t n) { pos_ += n; }

 private:
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace

TensorF parse_pnm(const std::string& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '6' && bytes[1] != '5')) {
    throw ParseError("netpbm: expected magic P6 or P5", 0);
  }
  const int channels = bytes[1] == '6' ? 3 : 1;
  HeaderReader r(bytes);
  r.advance(2);
  const std::size_t after_magic = r.pos();
  if (after_magic >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[after_magic]))) {
    throw ParseError("netpbm: expected whitespace after magic", after_magic);
  }
  const long width = r.integer("width");
  const long height = r.integer("height");
  r.skip_space_and_comments();
  const std::size_t maxval_at = r.pos();
  const long maxval = r.integer("maxval");
  if (width < 1 || height < 1) throw ParseError("netpbm: empty image", maxval_at);
  if (maxval != 255) {
    throw ParseError("netpbm: maxval must be 255, got " + std::to_string(maxval), maxval_at);
  }
  if (r.pos() >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[r.pos()]))) {
    throw ParseError("netpbm: expected single whitespace before pixel data", r.pos());
  }
  r.advance(1);
  const std::size_t plane = static_cast<std::size_t>(width) * height;
  const std::size_t need = plane * channels;
  if (bytes.size() - r.pos() != need) {
    throw ParseError("netpbm: expected " + std::to_string(need) + " pixel bytes, found " +
                         std::to_string(bytes.size() - r.pos()),
                     std::min(bytes.size(), r.pos() + need));
  }
  std::vector<float> out(need);
  const auto* px = reinterpret_cast<const unsigned char*>(bytes.data() + r.pos());
  for (std::size_t p = 0; p < plane; ++p) {
    for (int c = 0; c < channels; ++c) {
      out[c * plane + p] = static_cast<float>(px[p * channels + c]) / 255.0f;
    }
  }
  return TensorF(Shape{1, channels, static_cast<int>(height), static_cast<int>(width)},
                 std::move(out));
}

TensorF load_pnm(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  try {
    return parse_pnm(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " +
                         std::string(e.what()).substr(0, std::string(e.what()).rfind(" (at byte")),
                     e.offset());
  }
}

std::string encode_pnm(const TensorF& frame) {
  const Shape s = frame.shape();
  if (s.n != 1 || (s.c != 1 && s.c != 3)) {
    throw ShapeError("netpbm: frame must be [1,1,H,W] or [1,3,H,W], got " + s.str());
  }
  std::string out = (s.c == 3 ? "P6\n" : "P5\n") + std::to_string(s.w) + " " +
                    std::to_string(s.h) + "\n255\n";
  const std::size_t header = out.size();
  const std::size_t plane = s.plane();
  out.resize(header + plane * s.c);
  const auto v = frame.data();
  for (std::size_t p = 0; p < plane; ++p) {
    for (int c = 0; c < s.c; ++c) {
      const double x = std::clamp(static_cast<double>(v[c * plane + p]), 0.0, 1.0);
      out[header + p * s.c + c] = static_cast<char>(static_cast<unsigned char>(std::lround(x * 255.0)));
    }
  }
  return out;
}

void save_pnm(const std::filesystem::path& path, const TensorF& frame) {
  write_file(path, encode_pnm(frame));
}

namespace {

struct ManifestLine {
  std::string text;
  std::size_t offset;
};

std::vector<ManifestLine> split_lines(const std::string& bytes) {
  std::vector<ManifestLine> lines;
  std::size_t start = 0;
  while (start < bytes.size()) {
    std::size_t end = bytes.find('\n', start);
    if (end == std::string::npos) end = bytes.size();
    std::string line = bytes.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back({line, start});
    start = end + 1;
  }
  return lines;
}

long manifest_field(const ManifestLine& line, const std::string& key) {
  const std::string prefix = key + " ";
  if (line.text.rfind(prefix, 0) != 0) {
    throw ParseError("clip manifest: expected '" + key + " <int>'", line.offset);
  }
  const std::string value = line.text.substr(prefix.size());
  std::size_t used = 0;
  long v = -1;
  try {
    v = std::stol(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != value.size() || v < 1) {
    throw ParseError("clip manifest: bad value for " + key, line.offset + prefix.size());
  }
  return v;
}

}  // namespace

Clip load_clip(const std::filesystem::path& dir) {
  const auto manifest_path = dir / kClipManifest;
  const std::string bytes = read_file(manifest_path);
  const auto lines = split_lines(bytes);
  if (lines.empty() || lines[0].text != "manet-clip 1") {
    throw ParseError(manifest_path.string() + ": expected header 'manet-clip 1'", 0);
  }
  auto field = [&](std::size_t i, const std::string& key) {
    if (i >= lines.size()) {
      throw ParseError(manifest_path.string() + ": missing '" + key + "'", bytes.size());
    }
    return manifest_field(lines[i], key);
  };
  const long height = field(1, "height");
  const long width = field(2, "width");
  const long channels = field(3, "channels");
  const long frames = field(4, "frames");
  if (channels != 1 && channels != 3) {
    throw ParseError(manifest_path.string() + ": channels must be 1 or 3", lines[3].offset);
  }
  if (static_cast<long>(lines.size()) - 5 != frames) {
    throw ParseError(manifest_path.string() + ": manifest lists " +
                         std::to_string(lines.size() - 5) + " frames, header says " +
                         std::to_string(frames),
                     lines.size() > 5 ? lines.back().offset : bytes.size());
  }
  Clip clip;
  const Shape expected{1, static_cast<int>(channels), static_cast<int>(height),
                       static_cast<int>(width)};
  for (long i = 0; i < frames; ++i) {
    const auto& line = lines[5 + i];
    TensorF frame = load_pnm(dir / line.text);
    if (!(frame.shape() == expected)) {
      throw ParseError(manifest_path.string() + ": frame " + line.text + " is " +
                           frame.shape().str() + ", manifest says " + expected.str(),
                       line.offset);
    }
    clip.frames.push_back(std::move(frame));
  }
  return clip;
}

void save_clip(const std::filesystem::path& dir, const Clip& clip) {
  const Shape s = clip.frame_shape();
  if (s.n != 1) throw ShapeError("save_clip: frames must have batch 1, got " + s.str());
  std::filesystem::create_directories(dir);
  std::string manifest = "manet-clip 1\nheight " + std::to_string(s.h) + "\nwidth " +
                         std::to_string(s.w) + "\nchannels " + std::to_string(s.c) +
                         "\nframes " + std::to_string(clip.size()) + "\n";
  const char* ext = s.c == 3 ? "ppm" : "pgm";
  for (std::size_t i = 0; i < clip.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%04zu.%s", i, ext);
    save_pnm(dir / name, clip.frames[i]);
    manifest += std::string(name) + "\n";
  }
  write_file(dir / kClipManifest, manifest);
}

}  // namespace manet::data
