#include <cmath>
#include <limits>

#include "doctest.h"
#include "manet/training.hpp"

using namespace manet;
using namespace manet::train;

namespace {

Dataset toy_dataset(int clips, int size, int channels, std::uint64_t seed) {
  Dataset out;
  for (int i = 0; i < clips; ++i) {
    const auto pattern = static_cast<data::Pattern>(i % 3);
    const data::Clip clean =
        data::synth_clip(pattern, {0.5 * (i % 3), -0.5 * (i % 2)}, 3, size, size, seed + i, channels);
    const data::Clip noisy = data::corrupt(clean, {0.1, 0.1, seed * 1000 + i});
    append(out, make_pairs(noisy, clean));
  }
  return out;
}

nn::ModelConfig small_model(nn::AttentionMode mode = nn::AttentionMode::ip) {
  nn::ModelConfig c;
  c.channels = 1;
  c.base_channels = 4;
  c.feature_channels = 4;
  c.pyramid_base = 4;
  c.levels = 2;
  c.k = 2;
  c.bottleneck_multiplier = 2;
  c.attention_mode = mode;
  return c;
}

}  // namespace

TEST_CASE("learning-rate schedule") {
  CHECK(lr_at(3e-5, 0) == 3e-5);
  CHECK(lr_at(3e-5, 4) == 3e-6);
  CHECK(lr_at(3e-5, 10) == 3e-7);
  TrainConfig c;
  c.lr0 = 1e-3;
  for (int e = 0; e < 20; ++e) {
    const bool breakpoint = e > 0 && e % 4 == 0;
    if (e > 0) CHECK((lr_at(c, e) != lr_at(c, e - 1)) == breakpoint);
    CHECK(lr_at(c, e) == doctest::Approx(1e-3 * std::pow(0.1, e / 4)).epsilon(1e-14));
  }
  CHECK_THROWS_AS(lr_at(c, -1), ConfigError);
}

TEST_CASE("adam update rule") {
  ParameterSet<double> params;
  auto w = params.add("w", Shape{1, 1, 1, 3});
  w.mutable_data()[0] = 1.0;
  w.mutable_data()[1] = -2.0;
  w.mutable_data()[2] = 0.5;
  AdamState<double> state;

  // Zero gradient: no movement, step still counts.
  adam_step(params, state, 0.1);
  CHECK(state.step == 1);
  CHECK(w.data()[0] == 1.0);
  CHECK(w.data()[1] == -2.0);

  // First step from fresh state moves each entry by about lr against the sign.
  AdamState<double> fresh;
  w.node()->grad = {3.0, -1e-3, 250.0};
  adam_step(params, fresh, 0.01);
  CHECK(w.data()[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-6));
  CHECK(w.data()[1] == doctest::Approx(-2.0 + 0.01).epsilon(1e-4));
  CHECK(w.data()[2] == doctest::Approx(0.5 - 0.01).epsilon(1e-6));

  // 100 steps of a constant scalar gradient against a hand-rolled sequence.
  ParameterSet<double> scalar;
  auto x = scalar.add("x", Shape{1, 1, 1, 1});
  x.mutable_data()[0] = 0.3;
  AdamState<double> s;
  double ref = 0.3, m = 0.0, v = 0.0;
  const double g = 0.7, lr = 1e-3;
  for (int t = 1; t <= 100; ++t) {
    x.node()->grad = {g};
    adam_step(scalar, s, lr);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mhat = m / (1.0 - std::pow(0.9, t));
    const double vhat = v / (1.0 - std::pow(0.999, t));
    ref -= lr * mhat / (std::sqrt(vhat) + 1e-8);
    CHECK(std::abs(x.data()[0] - ref) <= 1e-10);
  }
  CHECK(s.step == 100);

  // grad_scale multiplies the gradient before the moments.
  ParameterSet<double> a, b;
  auto pa = a.add("p", Shape{1, 1, 1, 1});
  auto pb = b.add("p", Shape{1, 1, 1, 1});
  AdamState<double> sa, sb;
  for (int t = 0; t < 5; ++t) {
    pa.node()->grad = {2.0 * (t + 1)};
    pb.node()->grad = {4.0 * (t + 1)};
    adam_step(a, sa, 0.01, 1.0);
    adam_step(b, sb, 0.01, 0.5);
  }
  CHECK(pa.data()[0] == pb.data()[0]);
}

TEST_CASE("dataset pairing and batching") {
  const data::Clip clean = data::synth_clip(data::Pattern::ramp, {1, 0}, 4, 8, 8, 1);
  const data::Clip noisy = data::corrupt(clean, {0.1, 0.1, 3});
  const Dataset d = make_pairs(noisy, clean);
  REQUIRE(d.size() == 3);
  CHECK(d.samples[0].current.data().data() == noisy.frames[1].data().data());
  CHECK(d.samples[0].previous.data().data() == noisy.frames[0].data().data());
  CHECK(d.samples[2].target.data().data() == clean.frames[3].data().data());
  const Sample b = make_batch(d, {2, 0}, 0, 2);
  CHECK(b.current.shape() == Shape{2, 3, 8, 8});
  CHECK(b.current.at(0, 1, 3, 4) == noisy.frames[3].at(0, 1, 3, 4));
  CHECK(b.current.at(1, 1, 3, 4) == noisy.frames[1].at(0, 1, 3, 4));
  CHECK_THROWS_AS(evaluate(nn::build<float>(small_model(), 0), Dataset{}), ConfigError);
  data::Clip short_clip;
  short_clip.frames.push_back(clean.frames[0]);
  CHECK_THROWS_AS(make_pairs(short_clip, clean), ShapeError);
}

TEST_CASE("lr 0 leaves parameters unchanged") {
  const Dataset d = toy_dataset(1, 8, 1, 5);
  Dataset one;
  one.samples.push_back(d.samples[0]);
  auto model = nn::build<float>(small_model(), 3);
  const auto before = parameter_checksum(model.parameters());
  TrainConfig c;
  c.lr0 = 0.0;
  c.epochs = 1;
  c.batch_size = 1;
  const TrainLog log = train::train(model, one, c);
  CHECK(parameter_checksum(model.parameters()) == before);
  REQUIRE(log.epochs.size() == 1);
  CHECK(log.epochs[0].mean_loss > 0.0);
  CHECK(std::isfinite(log.epochs[0].mean_loss));
  CHECK(std::isnan(log.epochs[0].eval_psnr));
  CHECK(log.epochs[0].steps == 1);
}

TEST_CASE("training is deterministic and logs every epoch") {
  const Dataset d = toy_dataset(4, 8, 1, 6);
  const Dataset eval = toy_dataset(1, 8, 1, 60);
  TrainConfig c;
  c.epochs = 3;
  c.batch_size = 3;
  c.seed = 11;
  std::vector<int> seen;
  auto m1 = nn::build<float>(small_model(), 1);
  auto m2 = nn::build<float>(small_model(), 1);
  const auto l1 = train::train(m1, d, c, &eval, [&](const EpochLog& e) { seen.push_back(e.epoch); });
  const auto l2 = train::train(m2, d, c, &eval);
  CHECK(parameter_checksum(m1.parameters()) == parameter_checksum(m2.parameters()));
  CHECK(seen == std::vector<int>{0, 1, 2});
  for (int e = 0; e < 3; ++e) {
    CHECK(l1.epochs[e].mean_loss == l2.epochs[e].mean_loss);
    CHECK(l1.epochs[e].eval_psnr == l2.epochs[e].eval_psnr);
    CHECK(l1.epochs[e].steps == 3);  // 8 samples in batches of 3
    CHECK(l1.epochs[e].lr == 1e-3);
  }
  // A different shuffling seed changes the result.
  c.seed = 12;
  auto m3 = nn::build<float>(small_model(), 1);
  train::train(m3, d, c);
  CHECK(parameter_checksum(m3.parameters()) != parameter_checksum(m1.parameters()));

  auto empty = nn::build<float>(small_model(), 1);
  CHECK_THROWS_AS(train::train(empty, Dataset{}, c), ConfigError);
  c.epochs = 0;
  CHECK_THROWS_AS(train::train(empty, d, c), ConfigError);
}

TEST_CASE("non-finite gradients name the parameter") {
  Dataset d = toy_dataset(1, 8, 1, 7);
  d.samples.resize(1);
  std::vector<float> bad(d.samples[0].current.data().begin(), d.samples[0].current.data().end());
  bad[5] = std::numeric_limits<float>::quiet_NaN();
  d.samples[0].current = TensorF(d.samples[0].current.shape(), bad);
  auto model = nn::build<float>(small_model(), 1);
  TrainConfig c;
  c.epochs = 1;
  try {
    train::train(model, d, c);
    FAIL("expected numerical error");
  } catch (const NumericalError& e) {
    const std::string what = e.what();
    CHECK(what.find("non-finite gradient in parameter flow_estimator.enc0.conv0.weight") !=
          std::string::npos);
  }
}

TEST_CASE("overfitting a single sample") {
  const data::Clip clean = data::synth_clip(data::Pattern::texture, {1, 0}, 2, 32, 32, 21);
  const data::Clip noisy = data::corrupt(clean, {0.1, 0.1, 21});
  const Dataset d = make_pairs(noisy, clean);
  nn::ModelConfig mc;
  mc.attention_mode = nn::AttentionMode::ip;
  auto model = nn::build<float>(mc, 2);
  TrainConfig c;
  c.epochs = 200;
  c.batch_size = 1;
  c.decay_every_epochs = 1000;
  const auto log = train::train(model, d, c);
  const double first = log.epochs.front().mean_loss;
  const double last = log.epochs.back().mean_loss;
  MESSAGE("overfit loss " << first << " -> " << last);
  CHECK(last * 10.0 <= first);
}

TEST_CASE("distillation") {
  const Dataset d = toy_dataset(3, 8, 1, 8);
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 4;
  c.seed = 5;
  auto teacher = nn::build<float>(small_model(), 9);
  train::train(teacher, d, c);
  const auto teacher_sum = parameter_checksum(teacher.parameters());

  const nn::ModelConfig student_config = nn::slim(teacher.config(), 0.5);
  DistillConfig dc;
  const auto result = distill(teacher, student_config, d, c, dc);
  CHECK(result.teacher_checksum_before == teacher_sum);
  CHECK(result.teacher_checksum_after == teacher_sum);
  CHECK(parameter_checksum(teacher.parameters()) == teacher_sum);
  CHECK(result.student.config() == student_config);
  CHECK(result.log.epochs.size() == 2);

  // Zero weights reduce to plain training of the same student.
  dc.lambda_feature = 0.0;
  dc.lambda_flow = 0.0;
  const auto plain_distill = distill(teacher, student_config, d, c, dc);
  auto plain = nn::build<float>(student_config, c.seed);
  const auto plain_log = train::train(plain, d, c);
  CHECK(parameter_checksum(plain.parameters()) ==
        parameter_checksum(plain_distill.student.parameters()));
  CHECK(plain_log.epochs.back().mean_loss == plain_distill.log.epochs.back().mean_loss);

  // The distillation terms change the student when enabled.
  CHECK(parameter_checksum(result.student.parameters()) != parameter_checksum(plain.parameters()));

  // Full-width student initialised from the teacher: matching terms vanish.
  {
    auto same = nn::build<float>(nn::slim(teacher.config(), 1.0), 77);
    CHECK(same.copy_matching_from(teacher.parameters()) == same.parameters().items().size());
    NoGradGuard guard;
    const Sample& s = d.samples[0];
    const auto ts = teacher.forward(s.current, s.previous);
    const auto ss = same.forward(s.current, s.previous);
    CHECK(distillation_loss(ss, ts, DistillConfig{}).item() == 0.0f);
    const auto other = nn::build<float>(student_config, 1).forward(s.current, s.previous);
    CHECK(distillation_loss(other, ts, DistillConfig{}).item() > 0.0f);
  }

  // Tap contract.
  nn::ModelConfig wrong = student_config;
  wrong.feature_channels = 6;
  try {
    distill(teacher, wrong, d, c, DistillConfig{});
    FAIL("expected config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("flow_features") != std::string::npos);
  }
  wrong = student_config;
  wrong.k = 3;
  try {
    distill(teacher, wrong, d, c, DistillConfig{});
    FAIL("expected config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("flows") != std::string::npos);
  }
  DistillConfig negative;
  negative.lambda_flow = -1.0;
  CHECK_THROWS_AS(distill(teacher, student_config, d, c, negative), ConfigError);
}
