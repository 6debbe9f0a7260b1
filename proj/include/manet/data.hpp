#pragma once

// Mixed Gaussian + impulse corruption, PSNR, synthetic moving-pattern clips
// and netpbm / clip-directory I/O. Frames are [1,C,H,W] float tensors in [0,1].

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "manet/tensor.hpp"

namespace manet::data {

struct NoiseSpec {
  double gaussian_std = 0.1;
  double sp_fraction = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Clip {
  std::vector<TensorF> frames;

  // Throws ShapeError on an empty clip or mismatched frame shapes.
  Shape frame_shape() const;
  std::size_t size() const { return frames.size(); }
};

// Gaussian noise, clamp to [0,1], then with probability sp_fraction per pixel
// location set every channel to 0 or 1. Frame i uses a substream derived from
// (seed, i), so results do not depend on processing order.
TensorF corrupt_frame(const TensorF& frame, const NoiseSpec& spec, std::uint64_t index);
Clip corrupt(const Clip& clip, const NoiseSpec& spec);

inline constexpr double kInfinitePsnr = std::numeric_limits<double>::infinity();

// 10 log10(peak^2 / MSE) over all elements; +inf when MSE is 0.
template <typename T>
double psnr(const Tensor<T>& pred, const Tensor<T>& target, double peak = 1.0);

// PSNR of each batch item, for per-frame averaging.
template <typename T>
std::vector<double> psnr_per_item(const Tensor<T>& pred, const Tensor<T>& target,
                                  double peak = 1.0);

// "inf" for the infinite sentinel, otherwise fixed with 4 decimals.
std::string format_psnr(double db);

enum class Pattern { checker, ramp, texture };
std::string to_string(Pattern p);
Pattern parse_pattern(const std::string& text);

struct Motion {
  double dx = 0.0;
  double dy = 0.0;
};

// Frame t is the base pattern translated by t * motion, sampled bilinearly
// with periodic wrap: frame_t(x, y) = base(x - t dx, y - t dy).
// The ramp pattern is affine away from the wrap seam.
Clip synth_clip(Pattern pattern, Motion motion, int frames, int height, int width,
                std::uint64_t seed, int channels = 3);

// Binary netpbm. P6 loads as C=3, P5 as C=1; maxval must be 255.
TensorF load_pnm(const std::filesystem::path& path);
TensorF parse_pnm(const std::string& bytes);
// C=3 writes P6, C=1 writes P5. Values are clamped and rounded to 1/255.
void save_pnm(const std::filesystem::path& path, const TensorF& frame);
std::string encode_pnm(const TensorF& frame);

inline TensorF load_ppm(const std::filesystem::path& path) { return load_pnm(path); }
inline void save_ppm(const std::filesystem::path& path, const TensorF& frame) {
  save_pnm(path, frame);
}

// A clip directory holds clip.txt plus one netpbm file per frame:
//   manet-clip 1
//   height H
//   width W
//   channels C
//   frames N
//   <N filenames, one per line>
inline constexpr const char* kClipManifest = "clip.txt";

Clip load_clip(const std::filesystem::path& dir);
void save_clip(const std::filesystem::path& dir, const Clip& clip);

// Reads a whole file; NotFoundError if it cannot be opened.
std::string read_file(const std::filesystem::path& path);
// Writes bytes, creating parent directories.
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace manet::data
