#include <doctest.h>

#include <unistd.h>

#include <filesystem>
#include <random>
#include <sstream>

#include "manet/checkpoint.hpp"
#include "manet/cli.hpp"
#include "manet/errors.hpp"
#include "manet/exports.hpp"

using namespace manet;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("manet_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

struct RunResult {
  int code;
  std::string out, err;
};

RunResult run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) { return data::read_file(p); }

// Every regular file under root, keyed by relative path.
std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = slurp(e.path());
  }
  return files;
}

}  // namespace

TEST_CASE("checkpoint save-load-save is byte identical") {
  for (auto mode : {align::AttentionMode::none, align::AttentionMode::fc, align::AttentionMode::ip}) {
    nn::ModelConfig c;
    c.base_channels = 4;
    c.pyramid_base = 4;
    c.feature_channels = 4;
    c.bottleneck_multiplier = 2;
    c.attention_mode = mode;
    c.align_image = mode == align::AttentionMode::ip;
    c.leaky_slope = 0.1;
    c.candidate_spread = 0.3;
    c.width_factor = 0.7;
    const auto model = nn::Model<float>::build(c, 0xfeedULL);
    const std::string a = io::encode_checkpoint(model);
    const auto loaded = io::decode_checkpoint(a);
    CHECK(loaded.config() == model.config());
    CHECK(loaded.seed() == model.seed());
    CHECK(io::encode_checkpoint(loaded) == a);
  }
}

TEST_CASE("checkpoint restores trained values, not the seeded init") {
  nn::ModelConfig c;
  c.base_channels = 4;
  c.pyramid_base = 4;
  c.feature_channels = 4;
  c.bottleneck_multiplier = 2;
  auto model = nn::Model<float>::build(c, 3);
  for (auto& p : model.parameters().items()) {
    for (auto& v : p.value.mutable_data()) v += 0.25f;
  }
  TempDir dir("ckpt");
  io::save_checkpoint(dir.path / "m.ckpt", model);
  const auto loaded = io::load_checkpoint(dir.path / "m.ckpt");
  for (const auto& p : model.parameters().items()) {
    const auto* q = loaded.parameters().find(p.name);
    REQUIRE(q != nullptr);
    const auto a = p.value.data();
    const auto b = q->value.data();
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
  }
}

TEST_CASE("checkpoint errors") {
  nn::ModelConfig c;
  c.base_channels = 2;
  c.pyramid_base = 2;
  c.feature_channels = 2;
  c.bottleneck_multiplier = 2;
  const std::string good = io::encode_checkpoint(nn::Model<float>::build(c, 1));
  CHECK_THROWS_AS(io::decode_checkpoint("garbage\n"), ParseError);
  CHECK_THROWS_AS(io::decode_checkpoint(good.substr(0, good.size() - 3)), ParseError);
  CHECK_THROWS_AS(io::decode_checkpoint(good + "x"), ParseError);

  std::string bad_k = good;
  bad_k.replace(bad_k.find("\nk 4\n"), 5, "\nk 0\n");
  CHECK_THROWS_AS(io::decode_checkpoint(bad_k), ConfigError);

  // Same parameter count, different widths: the first record no longer fits.
  std::string wider = good;
  wider.replace(wider.find("\nbase_channels 2\n"), 17, "\nbase_channels 3\n");
  CHECK_THROWS_AS(io::decode_checkpoint(wider), ShapeError);

  CHECK_THROWS_AS(io::load_checkpoint("/nonexistent/m.ckpt"), NotFoundError);
}

TEST_CASE("usage, missing-file and config errors map to exit codes") {
  CHECK(run({}).code == cli::kExitUsage);
  CHECK(run({"frobnicate"}).code == cli::kExitUsage);
  CHECK(run({"train", "--variant", "ip", "--data", "x", "--out", "y", "--bogus", "1"}).code ==
        cli::kExitUsage);
  CHECK(run({"train", "--variant", "ip", "--out", "y"}).code == cli::kExitUsage);
  CHECK(run({"params"}).code == cli::kExitUsage);
  CHECK(run({"train", "--variant", "ip", "--epochs", "abc", "--data", "x", "--out", "y"}).code ==
        cli::kExitUsage);
  CHECK(run({"--help"}).code == cli::kExitOk);

  const auto missing = run({"eval", "--model", "/nonexistent/m.ckpt", "--data", "/nonexistent"});
  CHECK(missing.code == cli::kExitNotFound);
  CHECK(missing.err.find("/nonexistent/m.ckpt") != std::string::npos);

  TempDir dir("codes");
  CHECK(run({"train", "--variant", "sideways", "--data", dir / "d", "--out", dir / "o"}).code ==
        cli::kExitInvalid);
  CHECK(run({"train", "--variant", "ip", "--k", "0", "--data", dir / "d", "--out", dir / "o"}).code ==
        cli::kExitInvalid);
  CHECK(run({"train", "--variant", "ip", "--spread", "5", "--data", dir / "d", "--out", dir / "o"}).code ==
        cli::kExitInvalid);
  CHECK(run({"train", "--variant", "ip", "--max-displacement", "-1", "--data", dir / "d", "--out",
             dir / "o"})
            .code == cli::kExitInvalid);
  CHECK(run({"gen-data", "--sp-frac", "1.5", "--out", dir / "g"}).code == cli::kExitInvalid);
  CHECK(run({"gen-data", "--size", "banana", "--out", dir / "g"}).code == cli::kExitInvalid);
  CHECK_FALSE(fs::exists(dir.path / "o"));
  CHECK_FALSE(fs::exists(dir.path / "g"));

  REQUIRE(run({"gen-data", "--size", "18", "--frames", "2", "--out", dir / "odd"}).code == 0);
  REQUIRE(run({"train", "--variant", "ip", "--data", dir / "odd", "--out", dir / "o", "--epochs",
               "1"})
              .code == cli::kExitInvalid);
}

TEST_CASE("gen-data without noise writes identical clean and noisy clips") {
  TempDir dir("gen");
  const auto r = run({"gen-data", "--pattern", "texture", "--motion", "1.5,-0.5", "--frames", "3",
                      "--size", "8x12", "--noise-std", "0", "--sp-frac", "0", "--seed", "9", "--out",
                      dir / "g"});
  REQUIRE(r.code == 0);
  const auto pairs = cli::load_clip_pairs(dir.path / "g");
  REQUIRE(pairs.size() == 1);
  REQUIRE(pairs[0].clean.has_value());
  CHECK(pairs[0].noisy.frame_shape() == Shape{1, 3, 8, 12});
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(slurp(dir.path / "g/clean" / ("frame_000" + std::to_string(i) + ".ppm")) ==
          slurp(dir.path / "g/noisy" / ("frame_000" + std::to_string(i) + ".ppm")));
  }
  CHECK(fs::exists(dir.path / "g" / cli::kRunManifest));
}

TEST_CASE("dataset directories list pair directories") {
  TempDir dir("dataset");
  REQUIRE(run({"gen-data", "--clips", "3", "--frames", "2", "--size", "8", "--out", dir / "ds"}).code ==
          0);
  const auto pairs = cli::load_clip_pairs(dir.path / "ds");
  REQUIRE(pairs.size() == 3);
  CHECK(pairs[2].name == "clip_0002");
  CHECK(pairs[1].clean.has_value());
  // A bare clip directory loads as a noisy clip without ground truth.
  const auto bare = cli::load_clip_pairs(dir.path / "ds/clip_0001/noisy");
  REQUIRE(bare.size() == 1);
  CHECK_FALSE(bare[0].clean.has_value());

  data::write_file(dir.path / "ds" / cli::kDatasetManifest, "manet-dataset 1\nclips 4\nclip_0000\n");
  CHECK_THROWS_AS(cli::load_clip_pairs(dir.path / "ds"), ParseError);
  data::write_file(dir.path / "ds" / cli::kDatasetManifest, "manet-dataset 1\nclips 1\nclip_0009\n");
  CHECK_THROWS_AS(cli::load_clip_pairs(dir.path / "ds"), NotFoundError);
}

TEST_CASE("eval on clean data reports inf for the input PSNR") {
  TempDir dir("eval");
  REQUIRE(run({"gen-data", "--noise-std", "0", "--sp-frac", "0", "--frames", "2", "--size", "8",
               "--out", dir / "g"})
              .code == 0);
  nn::ModelConfig c;
  c.base_channels = 2;
  c.pyramid_base = 2;
  c.feature_channels = 2;
  c.bottleneck_multiplier = 2;
  io::save_checkpoint(dir.path / "m.ckpt", nn::Model<float>::build(c, 0));
  const auto r = run({"eval", "--model", dir / "m.ckpt", "--data", dir / "g"});
  REQUIRE(r.code == 0);
  std::istringstream lines(r.out);
  std::string header, row;
  std::getline(lines, header);
  std::getline(lines, row);
  CHECK(header.find("noisy_psnr") != std::string::npos);
  std::istringstream fields(row);
  std::vector<std::string> cols;
  for (std::string f; fields >> f;) cols.push_back(f);
  REQUIRE(cols.size() == 7);
  CHECK(cols[5] == "inf");
}

TEST_CASE("params reports the attention overhead of the default variants") {
  const auto r = run({"params", "--variant", "fc"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("total 1564047\n") != std::string::npos);
  CHECK(r.out.find("attention_overhead 68\n") != std::string::npos);
  const auto ip = run({"params", "--variant", "ip"});
  CHECK(ip.out.find("baseline_total 1563979\n") != std::string::npos);
  CHECK(ip.out.find("overhead_percent 0.7018\n") != std::string::npos);
  CHECK(run({"params", "--variant", "ip", "--model", "x"}).code == cli::kExitUsage);
}

TEST_CASE("attention quantization keeps an exact partition of 255") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int k : {1, 2, 3, 4, 7}) {
    const int h = 5, w = 6;
    std::vector<float> v(static_cast<std::size_t>(k) * h * w);
    for (int px = 0; px < h * w; ++px) {
      double total = 0.0;
      std::vector<double> raw(k);
      for (auto& r : raw) total += r = u(rng) * u(rng);
      for (int c = 0; c < k; ++c) v[c * h * w + px] = static_cast<float>(raw[c] / total);
    }
    const TensorF weights(Shape{1, k, h, w}, v);
    const auto planes = exports::quantize_attention(weights);
    REQUIRE(planes.size() == static_cast<std::size_t>(k));
    for (int px = 0; px < h * w; ++px) {
      int sum = 0;
      for (int c = 0; c < k; ++c) {
        const double unit = planes[c].data()[px] * 255.0;
        const int byte = static_cast<int>(std::lround(unit));
        CHECK(std::abs(unit - byte) < 1e-4);
        CHECK(std::abs(byte - 255.0 * v[c * h * w + px]) < 1.0);
        sum += byte;
      }
      CHECK(sum == 255);
    }
  }
}

TEST_CASE("offset histogram bins and clamping") {
  exports::OffsetHistogram h;
  CHECK(h.bin_of(0.0) == 20);
  CHECK(h.bin_of(-2.0) == 0);
  CHECK(h.bin_of(-100.0) == 0);
  CHECK(h.bin_of(2.0) == 40);
  CHECK(h.bin_of(1e9) == 40);
  CHECK(h.bin_of(4.0 / 41.0 * 0.5 + 1e-9) == 21);
  h.add(0.0, 0.0);
  h.add(5.0, -5.0);
  CHECK(h.count(20, 20) == 1);
  CHECK(h.count(40, 0) == 1);
  CHECK(h.total() == 2);
  CHECK_THROWS_AS(h.add(std::nan(""), 0.0), NumericalError);
}

TEST_CASE("exports: attention sums and histogram totals through the CLI") {
  TempDir dir("exports");
  REQUIRE(run({"gen-data", "--clips", "2", "--frames", "3", "--size", "8", "--seed", "3", "--out",
               dir / "g"})
              .code == 0);
  nn::ModelConfig c;
  c.base_channels = 2;
  c.pyramid_base = 2;
  c.feature_channels = 2;
  c.bottleneck_multiplier = 2;
  c.attention_mode = align::AttentionMode::ip;
  io::save_checkpoint(dir.path / "ip.ckpt", nn::Model<float>::build(c, 1));
  c.attention_mode = align::AttentionMode::none;
  io::save_checkpoint(dir.path / "base.ckpt", nn::Model<float>::build(c, 2));

  REQUIRE(run({"export-attention", "--model", dir / "ip.ckpt", "--in", dir / "g", "--out",
               dir / "att"})
              .code == 0);
  const fs::path fdir = dir.path / "att/clip_0001/frame_0002";
  for (int l = 0; l < c.levels; ++l) {
    std::vector<TensorF> maps;
    for (int k = 0; k < c.k; ++k) {
      maps.push_back(data::load_pnm(fdir / ("attention_level" + std::to_string(l) + "_cand" +
                                            std::to_string(k) + ".pgm")));
    }
    CHECK(maps[0].shape() == Shape{1, 1, 8 >> l, 8 >> l});
    for (std::size_t px = 0; px < maps[0].numel(); ++px) {
      double sum = 0.0;
      for (const auto& m : maps) sum += std::lround(m.data()[px] * 255.0);
      CHECK(sum >= 254.0);
      CHECK(sum <= 256.0);
    }
  }
  CHECK(fs::exists(fdir / "warp_error_cand3.pgm"));

  REQUIRE(run({"flow-offset-hist", "--model", dir / "ip.ckpt", "--baseline", dir / "base.ckpt",
               "--in", dir / "g", "--out", dir / "hist.txt"})
              .code == 0);
  std::istringstream text(slurp(dir.path / "hist.txt"));
  std::string line;
  std::uint64_t sum = 0, total = 0;
  int rows = 0;
  while (std::getline(text, line)) {
    if (line.rfind("total ", 0) == 0) total = std::stoull(line.substr(6));
    if (line.empty() || !std::isdigit(static_cast<unsigned char>(line[0]))) continue;
    std::istringstream cells(line);
    for (std::uint64_t v; cells >> v;) sum += v;
    ++rows;
  }
  CHECK(rows == 41);
  const std::uint64_t expected = 4ull * 8 * 8 * 4;  // K * H * W * (2 clips x 2 pairs)
  CHECK(sum == expected);
  CHECK(total == expected);
}

TEST_CASE("commands are idempotent") {
  TempDir dir("idem");
  const std::vector<std::string> gen = {"gen-data", "--clips", "2", "--frames", "3", "--size",
                                        "8", "--seed", "11"};
  auto with_out = [](std::vector<std::string> args, const std::string& out) {
    args.push_back("--out");
    args.push_back(out);
    return args;
  };
  REQUIRE(run(with_out(gen, dir / "g1")).code == 0);
  REQUIRE(run(with_out(gen, dir / "g2")).code == 0);
  CHECK(tree(dir.path / "g1") == tree(dir.path / "g2"));

  const std::vector<std::string> tr = {"train", "--variant", "fc", "--data", dir / "g1", "--epochs",
                                       "2", "--batch", "3", "--seed", "5"};
  REQUIRE(run(with_out(tr, dir / "t1")).code == 0);
  REQUIRE(run(with_out(tr, dir / "t2")).code == 0);
  const auto t1 = tree(dir.path / "t1");
  CHECK(t1 == tree(dir.path / "t2"));
  CHECK(t1.count("model.ckpt") == 1);
  CHECK(t1.count(cli::kRunManifest) == 1);

  for (const char* out : {"d1", "d2"}) {
    REQUIRE(run({"denoise", "--model", dir / "t1/model.ckpt", "--in", dir / "g1", "--out", dir / out})
                .code == 0);
  }
  const auto d1 = tree(dir.path / "d1");
  CHECK(d1 == tree(dir.path / "d2"));
  CHECK(d1.count("clip_0001/frame_0002.ppm") == 1);
  CHECK(d1.count("psnr.txt") == 1);
}
