#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <set>

#include "doctest.h"
#include "manet/networks.hpp"
#include "manet/ops.hpp"
#include "support/gradcheck.hpp"

using namespace manet;
using namespace manet::nn;
using manet::testing::check_gradients;
using manet::testing::probe_weights;
using manet::testing::random_tensor;

namespace {

ModelConfig tiny(AttentionMode mode, int k) {
  ModelConfig c;
  c.channels = 1;
  c.base_channels = 2;
  c.feature_channels = 3;
  c.pyramid_base = 2;
  c.levels = 2;
  c.k = k;
  c.bottleneck_multiplier = 2;
  c.attention_mode = mode;
  return c;
}

template <typename T>
void randomize(ParameterSet<T>& params, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-scale, scale);
  for (auto& p : params.items()) {
    for (auto& v : p.value.mutable_data()) v = static_cast<T>(dist(rng));
  }
}

std::set<std::string> names(const ParameterSet<double>& params) {
  std::set<std::string> out;
  for (const auto& p : params.items()) out.insert(p.name);
  return out;
}

}  // namespace

TEST_CASE("build is deterministic and seed dependent") {
  ModelConfig c;
  c.attention_mode = AttentionMode::ip;
  auto a = build<float>(c, 7);
  auto b = build<float>(c, 7);
  auto other = build<float>(c, 8);
  REQUIRE(a.parameters().items().size() == b.parameters().items().size());
  bool any_differs = false;
  for (std::size_t i = 0; i < a.parameters().items().size(); ++i) {
    const auto& pa = a.parameters().items()[i];
    const auto& pb = b.parameters().items()[i];
    CHECK(pa.name == pb.name);
    const auto va = pa.value.data();
    const auto vb = pb.value.data();
    CHECK(std::equal(va.begin(), va.end(), vb.begin(), vb.end()));
    const auto vo = other.parameters().items()[i].value.data();
    if (!std::equal(va.begin(), va.end(), vo.begin(), vo.end())) any_differs = true;
  }
  CHECK(any_differs);

  std::mt19937_64 rng(1);
  const TensorF cur = manet::testing::random_tensor_f(Shape{1, 3, 16, 16}, rng, 0.0f, 1.0f);
  const TensorF prev = manet::testing::random_tensor_f(Shape{1, 3, 16, 16}, rng, 0.0f, 1.0f);
  NoGradGuard guard;
  const auto ra = a.forward(cur, prev);
  const auto rb = b.forward(cur, prev);
  const auto ya = ra.denoised.data();
  const auto yb = rb.denoised.data();
  CHECK(std::equal(ya.begin(), ya.end(), yb.begin(), yb.end()));
}

TEST_CASE("config validation") {
  ModelConfig c;
  c.k = 0;
  CHECK_THROWS_AS(build<float>(c, 1), ConfigError);
  c = ModelConfig{};
  c.width_factor = 0.0;
  CHECK_THROWS_AS(build<float>(c, 1), ConfigError);

  CHECK(ModelConfig{}.head_channels() == 8);
  c = ModelConfig{};
  c.attention_mode = AttentionMode::fc;
  CHECK(c.head_channels() == 12);
  auto fc = build<float>(c, 3);
  CHECK(fc.parameters().find("flow_estimator.head.weight")->value.shape() == Shape{8, 16, 3, 3});
  CHECK(fc.parameters().find("attention.fc.weight")->value.shape() == Shape{4, 16, 1, 1});
  CHECK(fc.parameters().find("attention.ip0.theta.weight") == nullptr);
  auto none = build<float>(ModelConfig{}, 3);
  for (const auto& p : none.parameters().items()) CHECK(p.name.rfind("attention.", 0) != 0);
}

TEST_CASE("forward shapes, finiteness and divisibility error") {
  for (auto mode : {AttentionMode::none, AttentionMode::fc, AttentionMode::ip}) {
    for (int channels : {1, 3}) {
      ModelConfig c;
      c.channels = channels;
      c.attention_mode = mode;
      auto m = build<float>(c, 11);
      std::mt19937_64 rng(2);
      const TensorF cur =
          manet::testing::random_tensor_f(Shape{2, channels, 16, 24}, rng, 0.0f, 1.0f);
      NoGradGuard guard;
      const auto out = m.forward(cur, cur);
      CHECK(out.denoised.shape() == cur.shape());
      CHECK(out.flows.k() == 4);
      CHECK(out.flows.tensor().shape() == Shape{2, 8, 16, 24});
      CHECK(out.flow_features.shape() == Shape{2, 16, 16, 24});
      REQUIRE(out.attention.size() == 3);
      CHECK(out.attention[1].weights.shape().h == 8);
      for (float v : out.denoised.data()) CHECK(std::isfinite(v));
      // Initial flows are the head bias: zero for the first candidate.
      const TensorF first = out.flows.flow(0);
      const auto flow0 = first.data();
      CHECK(std::all_of(flow0.begin(), flow0.end(), [](float v) { return v == 0.0f; }));

      const TensorF odd(Shape{1, channels, 18, 16}, 0.5f);
      try {
        m.forward(odd, odd);
        FAIL("expected shape error");
      } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("multiple of 4") != std::string::npos);
      }
    }
  }
}

TEST_CASE("flows start on the candidate ring and stay within the bound") {
  ModelConfig c;
  c.candidate_spread = 1.5;
  c.max_displacement = 3.0;
  auto m = build<double>(c, 4);
  const TensorD frame(Shape{1, 3, 8, 8}, 0.25);
  {
    NoGradGuard guard;
    const auto out = m.forward(frame, frame);
    for (int l = 1; l < c.k; ++l) {
      const double angle = 2.0 * std::numbers::pi * (l - 1) / (c.k - 1);
      const TensorD f = out.flows.flow(l);
      CHECK(f.at(0, 0, 3, 5) == doctest::Approx(1.5 * std::cos(angle)).epsilon(1e-12));
      CHECK(f.at(0, 1, 3, 5) == doctest::Approx(1.5 * std::sin(angle)).epsilon(1e-12));
    }
  }
  // Huge head weights saturate rather than leave the bound.
  for (auto& v : m.parameters().find("flow_estimator.head.weight")->value.mutable_data()) v = 1e4;
  std::mt19937_64 rng(6);
  const TensorD cur = random_tensor(Shape{1, 3, 8, 8}, rng, 0.0, 1.0);
  NoGradGuard guard;
  const auto out = m.forward(cur, frame);
  double peak = 0.0;
  for (double v : out.flows.tensor().data()) peak = std::max(peak, std::abs(v));
  CHECK(peak <= 3.0);
  CHECK(peak > 2.9);

  c.candidate_spread = 3.0;
  CHECK_THROWS_AS(build<float>(c, 1), ConfigError);
  c.candidate_spread = 1.0;
  c.max_displacement = 0.0;
  CHECK_THROWS_AS(build<float>(c, 1), ConfigError);
}

TEST_CASE("image-level alignment adds one attention map") {
  ModelConfig c = tiny(AttentionMode::ip, 3);
  c.align_image = true;
  auto m = build<double>(c, 5);
  CHECK(m.parameters().find("attention.ip_image.theta.weight")->value.shape() ==
        Shape{1, 1, 1, 1});
  std::mt19937_64 rng(3);
  const TensorD cur = random_tensor(Shape{1, 1, 8, 8}, rng, 0.0, 1.0);
  NoGradGuard guard;
  const auto out = m.forward(cur, cur);
  CHECK(out.attention.size() == 3);
  CHECK(out.attention.back().weights.shape() == Shape{1, 3, 8, 8});
  CHECK(m.count_params().total - build<double>([&] {
          auto b = c;
          b.attention_mode = AttentionMode::none;
          return b;
        }(), 5).count_params().total == attention_overhead(c));
}

TEST_CASE("baseline ignores candidates beyond the first") {
  ModelConfig c4 = tiny(AttentionMode::none, 4);
  ModelConfig c1 = tiny(AttentionMode::none, 1);
  auto m4 = build<double>(c4, 9);
  auto m1 = build<double>(c1, 9);
  randomize(m4.parameters(), 42, 0.3);
  CHECK(m1.copy_matching_from(m4.parameters()) == m1.parameters().items().size() - 2);
  // Head rows for candidate 0 are the first two output channels.
  const auto w4 = m4.parameters().find("flow_estimator.head.weight")->value.data();
  const auto b4 = m4.parameters().find("flow_estimator.head.bias")->value.data();
  auto w1 = m1.parameters().find("flow_estimator.head.weight")->value.mutable_data();
  auto b1 = m1.parameters().find("flow_estimator.head.bias")->value.mutable_data();
  std::copy(w4.begin(), w4.begin() + w1.size(), w1.begin());
  std::copy(b4.begin(), b4.begin() + 2, b1.begin());

  std::mt19937_64 rng(4);
  const TensorD cur = random_tensor(Shape{2, 1, 8, 8}, rng, 0.0, 1.0);
  const TensorD prev = random_tensor(Shape{2, 1, 8, 8}, rng, 0.0, 1.0);
  NoGradGuard guard;
  const auto r4 = m4.forward(cur, prev);
  const auto r1 = m1.forward(cur, prev);
  const auto y4 = r4.denoised.data();
  const auto y1 = r1.denoised.data();
  for (std::size_t i = 0; i < y4.size(); ++i) CHECK(y4[i] == y1[i]);
}

TEST_CASE("K=1 attention variants reduce to the baseline") {
  auto base = build<double>(tiny(AttentionMode::none, 1), 13);
  randomize(base.parameters(), 77, 0.3);
  std::mt19937_64 rng(5);
  const TensorD cur = random_tensor(Shape{1, 1, 8, 8}, rng, 0.0, 1.0);
  const TensorD prev = random_tensor(Shape{1, 1, 8, 8}, rng, 0.0, 1.0);
  NoGradGuard guard;
  const auto base_out = base.forward(cur, prev);
  const auto ref = base_out.denoised.data();
  for (auto mode : {AttentionMode::fc, AttentionMode::ip}) {
    auto m = build<double>(tiny(mode, 1), 13);
    randomize(m.parameters(), 99, 0.3);
    CHECK(m.copy_matching_from(base.parameters()) == base.parameters().items().size());
    const auto out = m.forward(cur, prev);
    const auto y = out.denoised.data();
    double worst = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) worst = std::max(worst, std::abs(y[i] - ref[i]));
    CHECK(worst <= 1e-6);
  }
}

TEST_CASE("variants differ from the baseline only in attention parameters") {
  const auto base = names(build<double>(tiny(AttentionMode::none, 4), 1).parameters());
  for (auto mode : {AttentionMode::fc, AttentionMode::ip}) {
    const auto variant = names(build<double>(tiny(mode, 4), 1).parameters());
    for (const auto& n : base) CHECK(variant.count(n) == 1);
    for (const auto& n : variant) {
      if (!base.count(n)) CHECK(n.rfind("attention.", 0) == 0);
    }
  }
}

TEST_CASE("parameter counts") {
  ParameterSet<float> single;
  make_conv(single, "c", ConvSpec{3, 8, 3, 1}, 0, ConvInit::he_uniform, 0.1);
  CHECK(single.scalar_count() == 224);

  ModelConfig c;
  const auto baseline = build<float>(c, 1).count_params();
  std::size_t group_sum = 0;
  for (const auto& [name, n] : baseline.per_group) group_sum += n;
  CHECK(group_sum == baseline.total);
  CHECK(baseline.per_group.count("flow_estimator") == 1);
  CHECK(baseline.per_group.count("pyramid") == 1);
  CHECK(baseline.per_group.count("synthesis") == 1);

  c.attention_mode = AttentionMode::fc;
  const auto fc = build<float>(c, 1).count_params();
  CHECK(fc.total - baseline.total == 4 * 16 + 4);
  CHECK(fc.total - baseline.total == attention_overhead(c));
  CHECK(static_cast<double>(fc.total - baseline.total) / baseline.total < 0.01);

  c.attention_mode = AttentionMode::ip;
  const auto ip = build<float>(c, 1).count_params();
  // 2(C^2 + C) per level for C = 16, 32, 64.
  CHECK(ip.total - baseline.total == 2 * (16 * 16 + 16) + 2 * (32 * 32 + 32) + 2 * (64 * 64 + 64));
  CHECK(ip.total - baseline.total == attention_overhead(c));
  CHECK(ip.per_group.at("attention") == attention_overhead(c));
  CHECK(static_cast<double>(ip.total - baseline.total) / baseline.total < 0.01);

  for (auto mode : {AttentionMode::none, AttentionMode::fc, AttentionMode::ip}) {
    c.attention_mode = mode;
    const auto teacher = build<float>(c, 1).count_params().total;
    const auto student = build<float>(slim(c, 0.5), 1).count_params().total;
    CHECK(static_cast<double>(student) <= 0.55 * teacher);
  }
}

TEST_CASE("slim") {
  ModelConfig c;
  c.attention_mode = AttentionMode::ip;
  CHECK(slim(c, 1.0) == c);
  const auto s = slim(c, 0.5);
  CHECK(s.base_channels == 8);
  CHECK(s.width_factor == 0.5);
  CHECK(s.k == c.k);
  CHECK(s.attention_mode == c.attention_mode);
  CHECK(s.head_channels() == c.head_channels());
  CHECK(slim(c, 0.3).base_channels == 5);
  CHECK(slim(c, 0.01).base_channels == 2);
  CHECK_THROWS_AS(slim(c, 0.0), ConfigError);
  CHECK_THROWS_AS(slim(c, 1.5), ConfigError);
  CHECK_THROWS_AS(slim(c, -0.5), ConfigError);

  auto teacher = build<float>(c, 1);
  auto student = build<float>(s, 1);
  std::mt19937_64 rng(6);
  const TensorF cur = manet::testing::random_tensor_f(Shape{1, 3, 16, 16}, rng, 0.0f, 1.0f);
  NoGradGuard guard;
  const auto t = teacher.forward(cur, cur);
  const auto st = student.forward(cur, cur);
  CHECK(t.flows.tensor().shape() == st.flows.tensor().shape());
  CHECK(t.flow_features.shape() == st.flow_features.shape());
  // Only the estimator shrinks.
  const auto tc = teacher.count_params().per_group;
  const auto sc = student.count_params().per_group;
  CHECK(sc.at("pyramid") == tc.at("pyramid"));
  CHECK(sc.at("synthesis") == tc.at("synthesis"));
  CHECK(sc.at("attention") == tc.at("attention"));
  CHECK(sc.at("flow_estimator") < tc.at("flow_estimator"));
}

TEST_CASE("every parameter group receives gradient") {
  for (auto mode : {AttentionMode::none, AttentionMode::fc, AttentionMode::ip}) {
    ModelConfig c;
    c.attention_mode = mode;
    auto m = build<double>(c, 21);
    std::mt19937_64 rng(7);
    const TensorD cur = random_tensor(Shape{1, 3, 16, 16}, rng, 0.0, 1.0);
    const TensorD prev = random_tensor(Shape{1, 3, 16, 16}, rng, 0.0, 1.0);
    m.parameters().zero_grad();
    backward(ops::sum(m.forward(cur, prev).denoised));
    std::map<std::string, double> group_norm;
    for (const auto& p : m.parameters().items()) {
      double s = 0.0;
      for (double g : p.value.grad()) s += g * g;
      group_norm[p.name.substr(0, p.name.find('.'))] += s;
    }
    const std::size_t expected_groups = mode == AttentionMode::none ? 3 : 4;
    CHECK(group_norm.size() == expected_groups);
    for (const auto& [group, norm] : group_norm) {
      INFO(to_string(mode) << " " << group);
      CHECK(norm > 0.0);
    }
  }
}

TEST_CASE("every parameter tensor receives gradient once flows are nonzero") {
  for (auto mode : {AttentionMode::none, AttentionMode::fc, AttentionMode::ip}) {
    auto m = build<double>(tiny(mode, 3), 31);
    randomize(m.parameters(), 8, 0.5);
    std::mt19937_64 rng(8);
    const TensorD cur = random_tensor(Shape{1, 1, 8, 8}, rng, 0.0, 1.0);
    const TensorD prev = random_tensor(Shape{1, 1, 8, 8}, rng, 0.0, 1.0);
    const TensorD probe = probe_weights(cur.shape(), 3);
    m.parameters().zero_grad();
    backward(ops::sum(ops::mul(m.forward(cur, prev).denoised, probe)));
    for (const auto& p : m.parameters().items()) {
      // The phi bias shifts every candidate's logit equally and cancels.
      if (p.name.find(".phi.bias") != std::string::npos) continue;
      double s = 0.0;
      for (double g : p.value.grad()) s += g * g;
      INFO(to_string(mode) << " " << p.name);
      CHECK(s > 0.0);
    }
  }
}

TEST_CASE("full model gradients match finite differences") {
  for (auto mode : {AttentionMode::none, AttentionMode::fc, AttentionMode::ip}) {
    std::size_t checked = 0, skipped = 0, unresolved = 0;
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      auto m = build<double>(tiny(mode, 2), 100 + seed);
      randomize(m.parameters(), 500 + seed, 0.5);
      std::mt19937_64 rng(seed);
      const TensorD cur = random_tensor(Shape{1, 1, 4, 4}, rng, 0.0, 1.0);
      const TensorD prev = random_tensor(Shape{1, 1, 4, 4}, rng, 0.0, 1.0);
      const TensorD probe = probe_weights(cur.shape(), seed);
      std::vector<TensorD> leaves;
      for (const auto& p : m.parameters().items()) {
        if (p.name.find(".phi.bias") == std::string::npos) leaves.push_back(p.value);
      }
      leaves.push_back(cur);
      leaves.push_back(prev);
      const auto report = check_gradients(
          [&] { return ops::sum(ops::mul(m.forward(cur, prev).denoised, probe)); }, leaves,
          3e-5, 0, true);
      INFO(to_string(mode) << " seed " << seed << " worst " << report.worst);
      CHECK(report.max_elementwise < 1e-4);
      checked += report.checked;
      skipped += report.skipped;
      unresolved += report.unresolved;
      worst = std::max(worst, report.max_elementwise);
    }
    MESSAGE(to_string(mode) << ": " << checked << " entries compared, " << skipped
                            << " non-smooth, " << unresolved << " below resolution, worst "
                            << worst);
    CHECK((skipped + unresolved) * 10 <= checked);
  }
}
