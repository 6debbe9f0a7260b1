#include "manet/cli.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <ostream>
#include <random>
#include <sstream>

#include "manet/checkpoint.hpp"
#include "manet/errors.hpp"
#include "manet/exports.hpp"
#include "manet/networks.hpp"
#include "manet/ops.hpp"
#include "manet/training.hpp"

namespace fs = std::filesystem;

namespace manet::cli {

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void RunManifest::set(const std::string& key, const std::string& value) { entries_[key] = value; }
void RunManifest::set(const std::string& key, double value) { entries_[key] = format_number(value); }
void RunManifest::set(const std::string& key, long long value) { entries_[key] = std::to_string(value); }

std::string RunManifest::to_text() const {
  std::string s = "manet-run 1\n";
  for (const auto& [k, v] : entries_) s += k + "=" + v + "\n";
  return s;
}

void RunManifest::save(const fs::path& dir) const { data::write_file(dir / kRunManifest, to_text()); }

std::vector<ClipPair> load_clip_pairs(const fs::path& dir) {
  if (!fs::exists(dir)) throw NotFoundError(dir.string());
  const auto load_pair = [](const fs::path& d, const std::string& name) {
    ClipPair pair;
    pair.name = name;
    if (fs::exists(d / "noisy")) {
      pair.noisy = data::load_clip(d / "noisy");
      if (fs::exists(d / "clean")) {
        pair.clean = data::load_clip(d / "clean");
        if (pair.clean->size() != pair.noisy.size() ||
            !(pair.clean->frame_shape() == pair.noisy.frame_shape())) {
          throw ShapeError("clean and noisy clips differ in " + d.string() + ": " +
                           pair.clean->frame_shape().str() + " x " +
                           std::to_string(pair.clean->size()) + " vs " +
                           pair.noisy.frame_shape().str() + " x " +
                           std::to_string(pair.noisy.size()));
        }
      }
    } else {
      pair.noisy = data::load_clip(d);
    }
    return pair;
  };

  const fs::path listing = dir / kDatasetManifest;
  if (!fs::exists(listing)) return {load_pair(dir, "")};

  const std::string text = data::read_file(listing);
  std::istringstream in(text);
  std::string line;
  std::size_t offset = 0;
  std::vector<std::string> lines;
  std::vector<std::size_t> offsets;
  while (std::getline(in, line)) {
    lines.push_back(line);
    offsets.push_back(offset);
    offset += line.size() + 1;
  }
  if (lines.empty() || lines[0] != "manet-dataset 1") throw ParseError("not a dataset listing", 0);
  std::size_t count = 0;
  if (lines.size() < 2 || std::sscanf(lines[1].c_str(), "clips %zu", &count) != 1) {
    throw ParseError("expected 'clips N'", lines.size() < 2 ? text.size() : offsets[1]);
  }
  if (lines.size() - 2 < count) throw ParseError("dataset listing is truncated", text.size());
  std::vector<ClipPair> pairs;
  for (std::size_t i = 0; i < count; ++i) {
    const std::string& name = lines[2 + i];
    if (name.empty() || name.find('/') != std::string::npos || name == "..") {
      throw ParseError("bad clip name '" + name + "'", offsets[2 + i]);
    }
    pairs.push_back(load_pair(dir / name, name));
  }
  return pairs;
}

namespace {

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::string frame_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%04zu", i);
  return buf;
}

void record_model_config(RunManifest& m, const std::string& prefix, const nn::ModelConfig& c) {
  for (const auto& [k, v] : io::config_fields(c)) m.set(prefix + k, v);
}

void record_train_config(RunManifest& m, const train::TrainConfig& c) {
  m.set("train.lr0", c.lr0);
  m.set("train.decay_factor", c.decay_factor);
  m.set("train.decay_every_epochs", static_cast<long long>(c.decay_every_epochs));
  m.set("train.epochs", static_cast<long long>(c.epochs));
  m.set("train.batch_size", static_cast<long long>(c.batch_size));
  m.set("train.loss", train::to_string(c.loss));
  m.set("train.charbonnier_eps", c.charbonnier_eps);
  m.set("train.clip_norm", c.clip_norm);
  m.set("train.seed", std::to_string(c.seed));
}

void record_log(RunManifest& m, const train::TrainLog& log) {
  for (const auto& e : log.epochs) {
    char key[32];
    std::snprintf(key, sizeof key, "metric.epoch.%04d", e.epoch);
    m.set(key, "lr=" + format_number(e.lr) + " loss=" + format_number(e.mean_loss) +
                   " eval_psnr=" + format_number(e.eval_psnr) + " steps=" + std::to_string(e.steps));
  }
}

std::string log_text(const train::TrainLog& log) {
  std::string s = "epoch lr mean_loss eval_psnr steps\n";
  for (const auto& e : log.epochs) {
    s += std::to_string(e.epoch) + " " + format_number(e.lr) + " " + format_number(e.mean_loss) +
         " " + format_number(e.eval_psnr) + " " + std::to_string(e.steps) + "\n";
  }
  return s;
}

std::string clip_label(const ClipPair& p) { return p.name.empty() ? "." : p.name; }

void check_divisible(const std::vector<ClipPair>& pairs, const nn::ModelConfig& config) {
  const int m = config.size_multiple();
  for (const auto& p : pairs) {
    const Shape s = p.noisy.frame_shape();
    if (s.c != config.channels) {
      throw ShapeError("clip '" + clip_label(p) + "' has " + std::to_string(s.c) +
                       " channels, model expects " + std::to_string(config.channels));
    }
    if (s.h % m != 0 || s.w % m != 0) {
      throw ShapeError("clip '" + clip_label(p) + "' frames are " + s.str() +
                       "; height and width must be a multiple of " + std::to_string(m));
    }
  }
}

train::Dataset to_dataset(const std::vector<ClipPair>& pairs, const std::string& what) {
  train::Dataset ds;
  for (const auto& p : pairs) {
    if (!p.clean) {
      throw ConfigError(what + " needs ground truth: clip '" + clip_label(p) +
                        "' has no clean/ directory");
    }
    train::append(ds, train::make_pairs(p.noisy, *p.clean));
  }
  if (ds.empty()) throw ConfigError(what + " has no frame pairs (clips need at least 2 frames)");
  return ds;
}

// ---- gen-data ----

struct GenDataOptions {
  std::string pattern = "random";
  std::string motion = "random";
  double max_motion = 2.0;
  int frames = 5;
  std::string size = "32";
  double noise_std = 0.1;
  double sp_frac = 0.1;
  std::uint64_t seed = 0;
  int clips = 1;
  int channels = 3;
  std::string out;
};

std::pair<int, int> parse_size(const std::string& text) {
  int h = 0, w = 0;
  char tail = 0;
  if (std::sscanf(text.c_str(), "%dx%d%c", &h, &w, &tail) == 2) return {h, w};
  if (std::sscanf(text.c_str(), "%d%c", &h, &tail) == 1) return {h, h};
  throw ConfigError("--size must be N or HxW, got '" + text + "'");
}

std::optional<data::Motion> parse_motion(const std::string& text) {
  if (text == "random") return std::nullopt;
  data::Motion m;
  char tail = 0;
  if (std::sscanf(text.c_str(), "%lf,%lf%c", &m.dx, &m.dy, &tail) != 2) {
    throw ConfigError("--motion must be 'dx,dy' or 'random', got '" + text + "'");
  }
  return m;
}

double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

int cmd_gen_data(const GenDataOptions& o, std::ostream& out) {
  const auto [h, w] = parse_size(o.size);
  if (h < 1 || w < 1) throw ConfigError("--size must be positive");
  if (o.frames < 1) throw ConfigError("--frames must be >= 1");
  if (o.clips < 1) throw ConfigError("--clips must be >= 1");
  if (o.channels != 1 && o.channels != 3) throw ConfigError("--channels must be 1 or 3");
  if (!(o.max_motion >= 0.0)) throw ConfigError("--max-motion must be >= 0");
  const auto fixed_motion = parse_motion(o.motion);
  std::optional<data::Pattern> fixed_pattern;
  if (o.pattern != "random") fixed_pattern = data::parse_pattern(o.pattern);
  data::NoiseSpec noise{o.noise_std, o.sp_frac, 0};
  noise.validate();

  const fs::path root(o.out);
  RunManifest m;
  m.set("command", "gen-data");
  m.set("seed", std::to_string(o.seed));
  m.set("data.pattern", o.pattern);
  m.set("data.motion", o.motion);
  m.set("data.max_motion", o.max_motion);
  m.set("data.frames", static_cast<long long>(o.frames));
  m.set("data.height", static_cast<long long>(h));
  m.set("data.width", static_cast<long long>(w));
  m.set("data.channels", static_cast<long long>(o.channels));
  m.set("data.clips", static_cast<long long>(o.clips));
  m.set("noise.gaussian_std", o.noise_std);
  m.set("noise.sp_fraction", o.sp_frac);

  std::string listing = "manet-dataset 1\nclips " + std::to_string(o.clips) + "\n";
  for (int i = 0; i < o.clips; ++i) {
    std::mt19937_64 rng(splitmix64(o.seed ^ splitmix64(static_cast<std::uint64_t>(i) + 1)));
    const data::Pattern pattern = fixed_pattern ? *fixed_pattern : static_cast<data::Pattern>(rng() % 3);
    data::Motion motion;
    if (fixed_motion) {
      motion = *fixed_motion;
    } else {
      motion.dx = (2.0 * unit_uniform(rng) - 1.0) * o.max_motion;
      motion.dy = (2.0 * unit_uniform(rng) - 1.0) * o.max_motion;
    }
    const std::uint64_t clip_seed = rng();
    noise.seed = rng();

    const data::Clip clean = data::synth_clip(pattern, motion, o.frames, h, w, clip_seed, o.channels);
    const data::Clip noisy = data::corrupt(clean, noise);

    char name[32];
    std::snprintf(name, sizeof name, "clip_%04d", i);
    const fs::path dir = o.clips == 1 ? root : root / name;
    data::save_clip(dir / "clean", clean);
    data::save_clip(dir / "noisy", noisy);
    listing += std::string(name) + "\n";

    const std::string key = "clip." + std::string(name + 5) + ".";
    m.set(key + "pattern", data::to_string(pattern));
    m.set(key + "motion", format_number(motion.dx) + "," + format_number(motion.dy));
    m.set(key + "synth_seed", std::to_string(clip_seed));
    m.set(key + "noise_seed", std::to_string(noise.seed));
  }
  if (o.clips > 1) {
    data::write_file(root / kDatasetManifest, listing);
    m.set("artifact.dataset", kDatasetManifest);
  } else {
    m.set("artifact.clean", "clean");
    m.set("artifact.noisy", "noisy");
  }
  m.save(root);
  out << "wrote " << o.clips << " clip(s) of " << o.frames << " frames " << h << "x" << w << " to "
      << o.out << "\n";
  return kExitOk;
}

// ---- train ----

struct TrainOptions {
  std::string variant;
  int k = 4;
  std::string data;
  std::string eval;
  std::string out;
  double lr = 1e-3;
  int epochs = 30;
  std::uint64_t seed = 0;
  int batch = 1;
  int decay_every = 4;
  double decay = 0.1;
  std::string loss = "charbonnier";
  bool align_image = false;
  nn::ModelConfig defaults;
};

train::TrainConfig make_train_config(double lr, int epochs, std::uint64_t seed, int batch, int decay_every,
                                     double decay, const std::string& loss) {
  train::TrainConfig tc;
  tc.lr0 = lr;
  tc.epochs = epochs;
  tc.seed = seed;
  tc.batch_size = batch;
  tc.decay_every_epochs = decay_every;
  tc.decay_factor = decay;
  tc.loss = train::parse_loss(loss);
  tc.validate();
  return tc;
}

train::EpochCallback print_epoch(std::ostream& out) {
  return [&out](const train::EpochLog& e) {
    out << "epoch " << e.epoch << " lr " << format_number(e.lr) << " loss " << format_number(e.mean_loss);
    if (!std::isnan(e.eval_psnr)) out << " eval_psnr " << data::format_psnr(e.eval_psnr);
    out << std::endl;
  };
}

int cmd_train(const TrainOptions& o, std::ostream& out) {
  nn::ModelConfig config;
  config.attention_mode = align::parse_attention_mode(o.variant);
  config.k = o.k;
  config.align_image = o.align_image;
  config.max_displacement = o.defaults.max_displacement;
  config.candidate_spread = o.defaults.candidate_spread;
  config.validate();
  const auto tc = make_train_config(o.lr, o.epochs, o.seed, o.batch, o.decay_every, o.decay, o.loss);

  const auto pairs = load_clip_pairs(o.data);
  check_divisible(pairs, config);
  const auto ds = to_dataset(pairs, "training data");
  std::optional<train::Dataset> eval;
  if (!o.eval.empty()) {
    const auto eval_pairs = load_clip_pairs(o.eval);
    check_divisible(eval_pairs, config);
    eval = to_dataset(eval_pairs, "evaluation data");
  }

  auto model = nn::Model<float>::build(config, o.seed);
  const auto log = train::train(model, ds, tc, eval ? &*eval : nullptr, print_epoch(out));

  const fs::path dir(o.out);
  io::save_checkpoint(dir / "model.ckpt", model);
  data::write_file(dir / "train_log.txt", log_text(log));

  RunManifest m;
  m.set("command", "train");
  m.set("seed", std::to_string(o.seed));
  m.set("input.data", o.data);
  if (!o.eval.empty()) m.set("input.eval", o.eval);
  m.set("input.pairs", static_cast<long long>(ds.size()));
  record_model_config(m, "model.", config);
  record_train_config(m, tc);
  record_log(m, log);
  m.set("model.params", static_cast<long long>(model.count_params().total));
  m.set("artifact.checkpoint", "model.ckpt");
  m.set("artifact.log", "train_log.txt");
  m.save(dir);
  out << "saved " << (dir / "model.ckpt").string() << "\n";
  return kExitOk;
}

// ---- denoise ----

struct DenoiseOptions {
  std::string model, in, out;
};

int cmd_denoise(const DenoiseOptions& o, std::ostream& out) {
  const auto model = io::load_checkpoint(o.model);
  const auto pairs = load_clip_pairs(o.in);
  check_divisible(pairs, model.config());

  const fs::path dir(o.out);
  RunManifest m;
  m.set("command", "denoise");
  m.set("input.model", o.model);
  m.set("input.data", o.in);
  m.set("seed", std::to_string(model.seed()));
  record_model_config(m, "model.", model.config());

  NoGradGuard guard;
  std::string table = "clip frame noisy_psnr denoised_psnr\n";
  double noisy_sum = 0.0, denoised_sum = 0.0;
  std::size_t scored = 0;
  for (const auto& p : pairs) {
    data::Clip result;
    for (std::size_t i = 0; i < p.noisy.size(); ++i) {
      const TensorF& cur = p.noisy.frames[i];
      const TensorF& prev = p.noisy.frames[i == 0 ? 0 : i - 1];
      auto fwd = model.forward(cur, prev);
      // Frames are written on the 8-bit grid, so score what is written.
      result.frames.push_back(data::parse_pnm(data::encode_pnm(fwd.denoised)));
      if (p.clean) {
        const double a = data::psnr(cur, p.clean->frames[i]);
        const double b = data::psnr(result.frames.back(), p.clean->frames[i]);
        table += clip_label(p) + " " + std::to_string(i) + " " + data::format_psnr(a) + " " +
                 data::format_psnr(b) + "\n";
        noisy_sum += a;
        denoised_sum += b;
        ++scored;
      }
    }
    data::save_clip(dir / p.name, result);
    m.set("artifact.clip." + clip_label(p), clip_label(p));
  }
  if (scored > 0) {
    const double n = static_cast<double>(scored);
    table += "mean all " + data::format_psnr(noisy_sum / n) + " " + data::format_psnr(denoised_sum / n) + "\n";
    data::write_file(dir / "psnr.txt", table);
    m.set("artifact.psnr", "psnr.txt");
    m.set("metric.noisy_psnr", data::format_psnr(noisy_sum / n));
    m.set("metric.denoised_psnr", data::format_psnr(denoised_sum / n));
    out << "mean psnr noisy " << data::format_psnr(noisy_sum / n) << " denoised "
        << data::format_psnr(denoised_sum / n) << " over " << scored << " frames\n";
  }
  m.save(dir);
  return kExitOk;
}

// ---- eval ----

struct EvalOptions {
  std::string model, data;
  int batch = 8;
};

int cmd_eval(const EvalOptions& o, std::ostream& out) {
  if (o.batch < 1) throw ConfigError("--batch must be >= 1");
  const auto model = io::load_checkpoint(o.model);
  const auto pairs = load_clip_pairs(o.data);
  check_divisible(pairs, model.config());
  const auto ds = to_dataset(pairs, "evaluation data");
  const double noisy = train::noisy_psnr(ds);
  const double denoised = train::evaluate(model, ds, o.batch);
  out << "model variant k params pairs noisy_psnr denoised_psnr\n";
  out << o.model << " " << align::to_string(model.config().attention_mode) << " " << model.config().k << " "
      << model.count_params().total << " " << ds.size() << " " << data::format_psnr(noisy) << " "
      << data::format_psnr(denoised) << "\n";
  return kExitOk;
}

// ---- distill ----

struct DistillOptions {
  std::string teacher, data, eval, out;
  double width_factor = 0.5;
  double lambda_feature = 0.1;
  double lambda_flow = 0.1;
  bool init_from_teacher = false;
  double lr = 1e-3;
  int epochs = 30;
  std::uint64_t seed = 0;
  int batch = 1;
  int decay_every = 4;
  double decay = 0.1;
  std::string loss = "charbonnier";
};

int cmd_distill(const DistillOptions& o, std::ostream& out) {
  train::DistillConfig dc;
  dc.width_factor = o.width_factor;
  dc.lambda_feature = o.lambda_feature;
  dc.lambda_flow = o.lambda_flow;
  dc.init_from_teacher = o.init_from_teacher;
  dc.validate();
  auto tc = make_train_config(o.lr, o.epochs, o.seed, o.batch, o.decay_every, o.decay, o.loss);

  const auto teacher = io::load_checkpoint(o.teacher);
  const nn::ModelConfig student_config = nn::slim(teacher.config(), o.width_factor);
  const auto pairs = load_clip_pairs(o.data);
  check_divisible(pairs, teacher.config());
  const auto ds = to_dataset(pairs, "training data");
  std::optional<train::Dataset> eval;
  if (!o.eval.empty()) {
    const auto eval_pairs = load_clip_pairs(o.eval);
    check_divisible(eval_pairs, teacher.config());
    eval = to_dataset(eval_pairs, "evaluation data");
  }

  auto result = train::distill(teacher, student_config, ds, tc, dc, eval ? &*eval : nullptr, print_epoch(out));

  const std::size_t tp = teacher.count_params().total;
  const std::size_t sp = result.student.count_params().total;
  const double ratio = static_cast<double>(sp) / static_cast<double>(tp);
  std::ostringstream size;
  size << "teacher_params " << tp << "\n"
       << "student_params " << sp << "\n"
       << "ratio " << std::fixed << std::setprecision(4) << ratio << "\n"
       << "reduction_percent " << std::setprecision(2) << 100.0 * (1.0 - ratio) << "\n"
       << "teacher_checksum_before " << hex64(result.teacher_checksum_before) << "\n"
       << "teacher_checksum_after " << hex64(result.teacher_checksum_after) << "\n";

  const fs::path dir(o.out);
  io::save_checkpoint(dir / "student.ckpt", result.student);
  data::write_file(dir / "size.txt", size.str());
  data::write_file(dir / "train_log.txt", log_text(result.log));

  RunManifest m;
  m.set("command", "distill");
  m.set("seed", std::to_string(o.seed));
  m.set("input.teacher", o.teacher);
  m.set("input.data", o.data);
  if (!o.eval.empty()) m.set("input.eval", o.eval);
  m.set("input.pairs", static_cast<long long>(ds.size()));
  record_model_config(m, "teacher.", teacher.config());
  record_model_config(m, "student.", student_config);
  record_train_config(m, tc);
  m.set("distill.width_factor", dc.width_factor);
  m.set("distill.lambda_feature", dc.lambda_feature);
  m.set("distill.lambda_flow", dc.lambda_flow);
  m.set("distill.init_from_teacher", dc.init_from_teacher ? "1" : "0");
  record_log(m, result.log);
  m.set("metric.teacher_params", static_cast<long long>(tp));
  m.set("metric.student_params", static_cast<long long>(sp));
  m.set("metric.teacher_checksum_before", hex64(result.teacher_checksum_before));
  m.set("metric.teacher_checksum_after", hex64(result.teacher_checksum_after));
  m.set("artifact.checkpoint", "student.ckpt");
  m.set("artifact.size_report", "size.txt");
  m.set("artifact.log", "train_log.txt");
  m.save(dir);
  out << size.str();
  if (result.teacher_checksum_before != result.teacher_checksum_after) {
    throw NumericalError("teacher parameters changed during distillation");
  }
  return kExitOk;
}

// ---- export-attention ----

struct ExportOptions {
  std::string model, in, out;
  int frame = -1;
};

int cmd_export_attention(const ExportOptions& o, std::ostream& out) {
  const auto model = io::load_checkpoint(o.model);
  const auto pairs = load_clip_pairs(o.in);
  check_divisible(pairs, model.config());
  const int levels = model.config().levels;

  const fs::path dir(o.out);
  RunManifest m;
  m.set("command", "export-attention");
  m.set("input.model", o.model);
  m.set("input.data", o.in);
  m.set("seed", std::to_string(model.seed()));
  if (o.frame >= 0) m.set("input.frame", static_cast<long long>(o.frame));
  record_model_config(m, "model.", model.config());

  NoGradGuard guard;
  std::size_t maps = 0;
  for (const auto& p : pairs) {
    for (std::size_t i = 1; i < p.noisy.size(); ++i) {
      if (o.frame >= 0 && static_cast<std::size_t>(o.frame) != i) continue;
      const TensorF& cur = p.noisy.frames[i];
      const TensorF& prev = p.noisy.frames[i - 1];
      const TensorF& reference = p.clean ? p.clean->frames[i] : cur;
      const auto fwd = model.forward(cur, prev);
      const fs::path fdir = dir / p.name / frame_name(i);
      for (std::size_t a = 0; a < fwd.attention.size(); ++a) {
        const std::string level =
            static_cast<int>(a) < levels ? "level" + std::to_string(a) : std::string("image");
        const auto planes = exports::quantize_attention(fwd.attention[a].weights);
        for (std::size_t c = 0; c < planes.size(); ++c) {
          data::save_pnm(fdir / ("attention_" + level + "_cand" + std::to_string(c) + ".pgm"), planes[c]);
          ++maps;
        }
      }
      for (int c = 0; c < fwd.flows.k(); ++c) {
        const auto warped = ops::grid_sample_bilinear(prev, fwd.flows.flow(c));
        data::save_pnm(fdir / ("warp_error_cand" + std::to_string(c) + ".pgm"),
                       exports::warping_error(warped, reference));
        ++maps;
      }
    }
  }
  if (maps == 0) throw ConfigError("no frame pairs to export (need clips with at least 2 frames)");
  m.set("metric.maps", static_cast<long long>(maps));
  m.set("metric.warp_reference", pairs.front().clean ? "clean" : "noisy");
  m.save(dir);
  out << "wrote " << maps << " maps to " << o.out << "\n";
  return kExitOk;
}

// ---- flow-offset-hist ----

struct HistOptions {
  std::string model, baseline, in, out;
};

int cmd_flow_offset_hist(const HistOptions& o, std::ostream& out) {
  const auto model = io::load_checkpoint(o.model);
  const auto baseline = io::load_checkpoint(o.baseline);
  const auto pairs = load_clip_pairs(o.in);
  check_divisible(pairs, model.config());
  check_divisible(pairs, baseline.config());

  NoGradGuard guard;
  exports::OffsetHistogram hist;
  std::size_t n = 0;
  for (const auto& p : pairs) {
    for (std::size_t i = 1; i < p.noisy.size(); ++i) {
      const TensorF& cur = p.noisy.frames[i];
      const TensorF& prev = p.noisy.frames[i - 1];
      const auto a = model.forward(cur, prev);
      const auto b = baseline.forward(cur, prev);
      hist.add_offsets(a.flows, b.flows.flow(0));
      ++n;
    }
  }
  if (n == 0) throw ConfigError("no frame pairs in " + o.in + " (need clips with at least 2 frames)");
  std::string text = hist.to_text();
  text += "pairs " + std::to_string(n) + "\n";
  text += "k " + std::to_string(model.config().k) + "\n";
  data::write_file(o.out, text);
  out << "histogram of " << hist.total() << " offsets from " << n << " frame pairs written to " << o.out << "\n";
  return kExitOk;
}

// ---- params ----

struct ParamsOptions {
  std::string model;
  std::string variant;
  int k = 4;
};

int cmd_params(const ParamsOptions& o, std::ostream& out) {
  nn::ModelConfig config;
  std::optional<nn::Model<float>> loaded;
  if (!o.model.empty()) {
    loaded.emplace(io::load_checkpoint(o.model));
    config = loaded->config();
  } else {
    config.attention_mode = align::parse_attention_mode(o.variant);
    config.k = o.k;
    config.validate();
    loaded.emplace(nn::Model<float>::build(config, 0));
  }
  const auto count = loaded->count_params();
  const std::size_t overhead = nn::attention_overhead(config);
  const std::size_t base = count.total - overhead;
  out << "variant " << align::to_string(config.attention_mode) << "\n";
  out << "k " << config.k << "\n";
  out << "total " << count.total << "\n";
  for (const auto& [group, n] : count.per_group) out << "group." << group << " " << n << "\n";
  out << "baseline_total " << base << "\n";
  out << "attention_overhead " << overhead << "\n";
  out << "overhead_percent " << std::fixed << std::setprecision(4)
      << 100.0 * static_cast<double>(overhead) / static_cast<double>(base) << "\n";
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multiple-alignment video denoising"};
  app.name("manet");
  app.require_subcommand(1);

  GenDataOptions gen;
  auto* g = app.add_subcommand("gen-data", "Synthesize clean and corrupted clips");
  g->add_option("--pattern", gen.pattern, "checker|ramp|texture|random")->capture_default_str();
  g->add_option("--motion", gen.motion, "dx,dy pixels per frame, or random")->capture_default_str();
  g->add_option("--max-motion", gen.max_motion, "Bound on random motion per axis")->capture_default_str();
  g->add_option("--frames", gen.frames)->capture_default_str();
  g->add_option("--size", gen.size, "N or HxW")->capture_default_str();
  g->add_option("--noise-std", gen.noise_std)->capture_default_str();
  g->add_option("--sp-frac", gen.sp_frac)->capture_default_str();
  g->add_option("--seed", gen.seed)->capture_default_str();
  g->add_option("--clips", gen.clips, "Number of clips; >1 writes a dataset directory")->capture_default_str();
  g->add_option("--channels", gen.channels)->capture_default_str();
  g->add_option("--out", gen.out)->required();

  TrainOptions tr;
  auto* t = app.add_subcommand("train", "Train a denoiser");
  t->add_option("--variant", tr.variant, "baseline|fc|ip")->required();
  t->add_option("--k", tr.k)->capture_default_str();
  t->add_option("--data", tr.data)->required();
  t->add_option("--eval", tr.eval, "Held-out data scored after each epoch");
  t->add_option("--out", tr.out)->required();
  t->add_option("--lr", tr.lr)->capture_default_str();
  t->add_option("--epochs", tr.epochs)->capture_default_str();
  t->add_option("--seed", tr.seed)->capture_default_str();
  t->add_option("--batch", tr.batch)->capture_default_str();
  t->add_option("--decay-every", tr.decay_every)->capture_default_str();
  t->add_option("--decay", tr.decay)->capture_default_str();
  t->add_option("--loss", tr.loss, "charbonnier|l1")->capture_default_str();
  t->add_flag("--align-image", tr.align_image, "Also align the previous frame itself");
  t->add_option("--max-displacement", tr.defaults.max_displacement, "Flow soft-clamp bound, px")
      ->capture_default_str();
  t->add_option("--spread", tr.defaults.candidate_spread, "Initial candidate ring radius, px")
      ->capture_default_str();

  DenoiseOptions dn;
  auto* d = app.add_subcommand("denoise", "Denoise clips with a checkpoint");
  d->add_option("--model", dn.model)->required();
  d->add_option("--in", dn.in)->required();
  d->add_option("--out", dn.out)->required();

  EvalOptions ev;
  auto* e = app.add_subcommand("eval", "Mean PSNR of a checkpoint on clips with ground truth");
  e->add_option("--model", ev.model)->required();
  e->add_option("--data", ev.data)->required();
  e->add_option("--batch", ev.batch)->capture_default_str();

  DistillOptions ds;
  auto* s = app.add_subcommand("distill", "Distill a teacher into a slimmer student");
  s->add_option("--teacher", ds.teacher)->required();
  s->add_option("--width-factor", ds.width_factor)->capture_default_str();
  s->add_option("--data", ds.data)->required();
  s->add_option("--eval", ds.eval);
  s->add_option("--out", ds.out)->required();
  s->add_option("--lambda-feature", ds.lambda_feature)->capture_default_str();
  s->add_option("--lambda-flow", ds.lambda_flow)->capture_default_str();
  s->add_flag("--init-from-teacher", ds.init_from_teacher);
  s->add_option("--lr", ds.lr)->capture_default_str();
  s->add_option("--epochs", ds.epochs)->capture_default_str();
  s->add_option("--seed", ds.seed)->capture_default_str();
  s->add_option("--batch", ds.batch)->capture_default_str();
  s->add_option("--decay-every", ds.decay_every)->capture_default_str();
  s->add_option("--decay", ds.decay)->capture_default_str();
  s->add_option("--loss", ds.loss)->capture_default_str();

  ExportOptions ex;
  auto* x = app.add_subcommand("export-attention", "Write attention and warping-error maps as PGM");
  x->add_option("--model", ex.model)->required();
  x->add_option("--in", ex.in)->required();
  x->add_option("--out", ex.out)->required();
  x->add_option("--frame", ex.frame, "Only this frame index (default: every frame >= 1)");

  HistOptions hs;
  auto* hh = app.add_subcommand("flow-offset-hist", "Histogram of candidate flows minus a baseline flow");
  hh->add_option("--model", hs.model)->required();
  hh->add_option("--baseline", hs.baseline)->required();
  hh->add_option("--in", hs.in)->required();
  hh->add_option("--out", hs.out)->required();

  ParamsOptions pr;
  auto* pc = app.add_subcommand("params", "Parameter counts of a checkpoint or a default variant");
  auto* pm = pc->add_option("--model", pr.model);
  auto* pv = pc->add_option("--variant", pr.variant, "baseline|fc|ip, default configuration");
  pc->add_option("--k", pr.k)->capture_default_str()->needs(pv);
  pm->excludes(pv);
  pc->require_option(1, 2);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& ex2) {
    err << "usage error: " << ex2.what() << "\n";
    err << "run with --help for usage\n";
    return kExitUsage;
  }
  if (pc->parsed() && pr.model.empty() && pr.variant.empty()) {
    err << "usage error: params needs --model or --variant\n";
    return kExitUsage;
  }

  try {
    if (g->parsed()) return cmd_gen_data(gen, out);
    if (t->parsed()) return cmd_train(tr, out);
    if (d->parsed()) return cmd_denoise(dn, out);
    if (e->parsed()) return cmd_eval(ev, out);
    if (s->parsed()) return cmd_distill(ds, out);
    if (x->parsed()) return cmd_export_attention(ex, out);
    if (hh->parsed()) return cmd_flow_offset_hist(hs, out);
    if (pc->parsed()) return cmd_params(pr, out);
  } catch (const NotFoundError& ex2) {
    err << "error: file not found: " << ex2.path() << "\n";
    return kExitNotFound;
  } catch (const ShapeError& ex2) {
    err << "error: shape: " << ex2.what() << "\n";
    return kExitInvalid;
  } catch (const ConfigError& ex2) {
    err << "error: config: " << ex2.what() << "\n";
    return kExitInvalid;
  } catch (const ParseError& ex2) {
    err << "error: parse: " << ex2.what() << "\n";
    return kExitInvalid;
  } catch (const UsageError& ex2) {
    err << "usage error: " << ex2.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& ex2) {
    err << "error: " << ex2.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"manet"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace manet::cli
