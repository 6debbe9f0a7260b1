#pragma once

// Command-line front end. run() never calls exit(); it returns the process
// exit code: 0 success, 2 usage, 3 missing file, 4 shape or config error,
// 1 anything else.

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "manet/data.hpp"

namespace manet::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNotFound = 3;
inline constexpr int kExitInvalid = 4;

// key=value lines sorted by key, first line "manet-run 1".
class RunManifest {
 public:
  void set(const std::string& key, const std::string& value);
  void set(const std::string& key, double value);
  void set(const std::string& key, long long value);
  std::string to_text() const;
  void save(const std::filesystem::path& dir) const;  // writes dir/manifest.txt

 private:
  std::map<std::string, std::string> entries_;
};

inline constexpr const char* kRunManifest = "manifest.txt";
inline constexpr const char* kDatasetManifest = "dataset.txt";

// A noisy clip and, when present, its clean ground truth. name is the
// subdirectory inside a dataset, or empty for a standalone directory.
struct ClipPair {
  std::string name;
  data::Clip noisy;
  std::optional<data::Clip> clean;
};

// Accepts a dataset directory (dataset.txt listing pair directories), a pair
// directory (noisy/ and optionally clean/) or a bare clip directory.
std::vector<ClipPair> load_clip_pairs(const std::filesystem::path& dir);

// Shortest round-trip decimal form.
std::string format_number(double v);

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace manet::cli
