#include "manet/checkpoint.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <set>

#include "manet/data.hpp"
#include "manet/errors.hpp"

namespace manet::io {
namespace {

constexpr const char* kMagic = "manet-checkpoint 1";

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <typename V>
V parse_number(const std::string& key, const std::string& text) {
  V v{};
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw ConfigError("checkpoint field '" + key + "' has invalid value '" + text + "'");
  }
  return v;
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  std::size_t pos() const { return pos_; }

  std::string line() {
    const auto end = bytes_.find('\n', pos_);
    if (end == std::string::npos) throw ParseError("unterminated checkpoint header", bytes_.size());
    std::string s = bytes_.substr(pos_, end - pos_);
    pos_ = end + 1;
    return s;
  }

  std::uint32_t u32() {
    need(4, "truncated checkpoint record");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }

  std::string take(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) throw ParseError(what, bytes_.size());
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::map<std::string, std::string> config_fields(const nn::ModelConfig& c) {
  return {
      {"align_image", c.align_image ? "1" : "0"},
      {"attention_mode", align::to_string(c.attention_mode)},
      {"base_channels", std::to_string(c.base_channels)},
      {"bottleneck_multiplier", std::to_string(c.bottleneck_multiplier)},
      {"candidate_spread", format_double(c.candidate_spread)},
      {"channels", std::to_string(c.channels)},
      {"feature_channels", std::to_string(c.feature_channels)},
      {"k", std::to_string(c.k)},
      {"leaky_slope", format_double(c.leaky_slope)},
      {"levels", std::to_string(c.levels)},
      {"max_displacement", format_double(c.max_displacement)},
      {"pyramid_base", std::to_string(c.pyramid_base)},
      {"width_factor", format_double(c.width_factor)},
  };
}

nn::ModelConfig config_from_fields(const std::map<std::string, std::string>& fields) {
  nn::ModelConfig c;
  const auto get = [&](const std::string& key) -> const std::string& {
    auto it = fields.find(key);
    if (it == fields.end()) throw ConfigError("checkpoint is missing field '" + key + "'");
    return it->second;
  };
  const std::string& align_image = get("align_image");
  if (align_image != "0" && align_image != "1") {
    throw ConfigError("checkpoint field 'align_image' has invalid value '" + align_image + "'");
  }
  c.align_image = align_image == "1";
  try {
    c.attention_mode = align::parse_attention_mode(get("attention_mode"));
  } catch (const Error& e) {
    throw ConfigError(std::string("checkpoint field 'attention_mode': ") + e.what());
  }
  c.base_channels = parse_number<int>("base_channels", get("base_channels"));
  c.bottleneck_multiplier = parse_number<int>("bottleneck_multiplier", get("bottleneck_multiplier"));
  c.candidate_spread = parse_number<double>("candidate_spread", get("candidate_spread"));
  c.channels = parse_number<int>("channels", get("channels"));
  c.feature_channels = parse_number<int>("feature_channels", get("feature_channels"));
  c.k = parse_number<int>("k", get("k"));
  c.leaky_slope = parse_number<double>("leaky_slope", get("leaky_slope"));
  c.levels = parse_number<int>("levels", get("levels"));
  c.max_displacement = parse_number<double>("max_displacement", get("max_displacement"));
  c.pyramid_base = parse_number<int>("pyramid_base", get("pyramid_base"));
  c.width_factor = parse_number<double>("width_factor", get("width_factor"));
  c.validate();
  return c;
}

std::string encode_checkpoint(const nn::Model<float>& model) {
  static_assert(std::endian::native == std::endian::little, "checkpoints assume a little-endian host");
  const auto& items = model.parameters().items();
  std::string out = std::string(kMagic) + "\n";
  for (const auto& [key, value] : config_fields(model.config())) out += key + " " + value + "\n";
  out += "seed " + std::to_string(model.seed()) + "\n";
  out += "params " + std::to_string(items.size()) + "\n";
  out += "end\n";
  for (const auto& p : items) {
    put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    const Shape& s = p.value.shape();
    for (int d : {s.n, s.c, s.h, s.w}) put_u32(out, static_cast<std::uint32_t>(d));
    const auto values = p.value.data();
    const auto* raw = reinterpret_cast<const char*>(values.data());
    out.append(raw, values.size() * sizeof(float));
  }
  return out;
}

nn::Model<float> decode_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.line() != kMagic) throw ParseError("not a manet checkpoint", 0);

  std::map<std::string, std::string> fields;
  for (;;) {
    const std::size_t at = r.pos();
    std::string l = r.line();
    if (l == "end") break;
    const auto space = l.find(' ');
    if (space == std::string::npos || space == 0) throw ParseError("malformed header line", at);
    if (!fields.emplace(l.substr(0, space), l.substr(space + 1)).second) {
      throw ParseError("duplicate header field '" + l.substr(0, space) + "'", at);
    }
  }
  const auto take_field = [&](const std::string& key) {
    auto it = fields.find(key);
    if (it == fields.end()) throw ConfigError("checkpoint is missing field '" + key + "'");
    std::string v = it->second;
    fields.erase(it);
    return v;
  };
  const auto seed = parse_number<std::uint64_t>("seed", take_field("seed"));
  const auto count = parse_number<std::size_t>("params", take_field("params"));
  const nn::ModelConfig config = config_from_fields(fields);

  auto model = nn::Model<float>::build(config, seed);
  auto& params = model.parameters();
  if (count != params.items().size()) {
    throw ConfigError("checkpoint holds " + std::to_string(count) + " parameters, model has " +
                      std::to_string(params.items().size()));
  }
  std::set<std::string> seen;
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t len = r.u32();
    const std::string name = r.take(len, "truncated parameter name");
    Shape s;
    s.n = static_cast<int>(r.u32());
    s.c = static_cast<int>(r.u32());
    s.h = static_cast<int>(r.u32());
    s.w = static_cast<int>(r.u32());
    auto* p = params.find(name);
    if (p == nullptr) throw ConfigError("checkpoint parameter '" + name + "' is not in the model");
    if (!seen.insert(name).second) throw ConfigError("checkpoint repeats parameter '" + name + "'");
    if (!(p->value.shape() == s)) {
      throw ShapeError("checkpoint parameter '" + name + "' has shape " + s.str() +
                       ", model expects " + p->value.shape().str());
    }
    auto dst = p->value.mutable_data();
    const std::string raw = r.take(dst.size() * sizeof(float), "truncated parameter values");
    std::memcpy(dst.data(), raw.data(), raw.size());
  }
  if (!r.done()) throw ParseError("trailing bytes after last parameter", r.pos());
  return model;
}

void save_checkpoint(const std::filesystem::path& path, const nn::Model<float>& model) {
  data::write_file(path, encode_checkpoint(model));
}

nn::Model<float> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(data::read_file(path));
}

}  // namespace manet::io
