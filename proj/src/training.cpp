#include "manet/training.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>

#include "manet/ops.hpp"

namespace manet::train {

std::string to_string(LossKind kind) { return kind == LossKind::l1 ? "l1" : "charbonnier"; }

LossKind parse_loss(const std::string& text) {
  if (text == "l1") return LossKind::l1;
  if (text == "charbonnier") return LossKind::charbonnier;
  throw ConfigError("unknown loss '" + text + "' (expected l1|charbonnier)");
}

void TrainConfig::validate() const {
  // Zero is allowed as a frozen run.
  if (!(lr0 >= 0.0) || !std::isfinite(lr0)) throw ConfigError("lr0 must be >= 0");
  if (!(decay_factor > 0.0 && decay_factor <= 1.0)) throw ConfigError("decay_factor must be in (0,1]");
  if (decay_every_epochs < 1) throw ConfigError("decay_every_epochs must be >= 1");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(charbonnier_eps > 0.0)) throw ConfigError("charbonnier_eps must be > 0");
}

double lr_at(const TrainConfig& config, int epoch) {
  if (epoch < 0) throw ConfigError("lr_at: negative epoch");
  const int k = epoch / config.decay_every_epochs;
  return config.lr0 / std::pow(1.0 / config.decay_factor, k);
}

double lr_at(double lr0, int epoch) {
  TrainConfig c;
  c.lr0 = lr0;
  return lr_at(c, epoch);
}

template <typename T>
void adam_step(ParameterSet<T>& params, AdamState<T>& state, double lr, double grad_scale) {
  auto& items = params.items();
  if (state.m.size() != items.size()) {
    state.m.assign(items.size(), {});
    state.v.assign(items.size(), {});
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  const double b1 = state.beta1, b2 = state.beta2, eps = state.epsilon;
  const double step = lr / c1, root_c2 = 1.0 / std::sqrt(c2);
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto& p = items[i].value;
    const std::size_t n = p.numel();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != n) {
      m.assign(n, T(0));
      v.assign(n, T(0));
    }
    const auto& grad = p.node()->grad;
    const bool has_grad = !grad.empty();
    const double scale = has_grad ? grad_scale : 0.0;
    const T* gp = has_grad ? grad.data() : nullptr;
    T* vals = p.mutable_data().data();
    T* mp = m.data();
    T* vp = v.data();
    for (std::size_t j = 0; j < n; ++j) {
      const double g = has_grad ? static_cast<double>(gp[j]) * scale : 0.0;
      const double mj = b1 * mp[j] + (1.0 - b1) * g;
      const double vj = b2 * vp[j] + (1.0 - b2) * g * g;
      mp[j] = static_cast<T>(mj);
      vp[j] = static_cast<T>(vj);
      vals[j] = static_cast<T>(vals[j] - step * mj / (std::sqrt(vj) * root_c2 + eps));
    }
  }
}

template <typename T>
double gradient_norm(const ParameterSet<T>& params) {
  std::array<double, 8> lanes{};
  for (const auto& p : params.items()) {
    const auto& grad = p.value.node()->grad;
    std::size_t j = 0;
    for (; j + 8 <= grad.size(); j += 8) {
      for (std::size_t l = 0; l < 8; ++l) lanes[l] += static_cast<double>(grad[j + l]) * grad[j + l];
    }
    for (; j < grad.size(); ++j) lanes[0] += static_cast<double>(grad[j]) * grad[j];
  }
  return std::sqrt(std::accumulate(lanes.begin(), lanes.end(), 0.0));
}

template <typename T>
std::uint64_t parameter_checksum(const ParameterSet<T>& params) {
  std::uint64_t h = fnv1a("");
  for (const auto& p : params.items()) {
    h = fnv1a(p.name, h);
    h = fnv1a(p.value.shape().str(), h);
    const auto v = p.value.data();
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(v.data()), v.size_bytes()), h);
  }
  return h;
}

template void adam_step(ParameterSet<float>&, AdamState<float>&, double, double);
template void adam_step(ParameterSet<double>&, AdamState<double>&, double, double);
template double gradient_norm(const ParameterSet<float>&);
template double gradient_norm(const ParameterSet<double>&);
template std::uint64_t parameter_checksum(const ParameterSet<float>&);
template std::uint64_t parameter_checksum(const ParameterSet<double>&);

Dataset make_pairs(const data::Clip& noisy, const data::Clip& clean) {
  if (noisy.size() != clean.size()) {
    throw ShapeError("make_pairs: " + std::to_string(noisy.size()) + " noisy vs " +
                     std::to_string(clean.size()) + " clean frames");
  }
  if (noisy.size() > 0 && !(noisy.frame_shape() == clean.frame_shape())) {
    throw ShapeError("make_pairs: noisy " + noisy.frame_shape().str() + " vs clean " +
                     clean.frame_shape().str());
  }
  Dataset out;
  for (std::size_t i = 1; i < noisy.size(); ++i) {
    out.samples.push_back({noisy.frames[i], noisy.frames[i - 1], clean.frames[i]});
  }
  return out;
}

void append(Dataset& into, const Dataset& more) {
  into.samples.insert(into.samples.end(), more.samples.begin(), more.samples.end());
}

namespace {

TensorF stack(const Dataset& dataset, const std::vector<std::size_t>& order, std::size_t first,
              std::size_t count, TensorF Sample::*field) {
  const Shape s = (dataset.samples[order[first]].*field).shape();
  std::vector<float> out;
  out.reserve(s.numel() * count);
  for (std::size_t i = first; i < first + count; ++i) {
    const TensorF& t = dataset.samples[order[i]].*field;
    if (!(t.shape() == s)) {
      throw ShapeError("batch mixes frame shapes " + s.str() + " and " + t.shape().str());
    }
    out.insert(out.end(), t.data().begin(), t.data().end());
  }
  return TensorF(Shape{static_cast<int>(count) * s.n, s.c, s.h, s.w}, std::move(out));
}

std::vector<std::size_t> identity_order(std::size_t n) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  return order;
}

// Fisher-Yates with an explicit draw so the order only depends on the seed.
void shuffle(std::vector<std::size_t>& order, std::uint64_t& state) {
  for (std::size_t i = order.size(); i > 1; --i) {
    state = splitmix64(state);
    std::swap(order[i - 1], order[state % i]);
  }
}

TensorF task_loss(const TrainConfig& config, const TensorF& pred, const TensorF& target) {
  return config.loss == LossKind::l1
             ? ops::l1_loss(pred, target)
             : ops::charbonnier_loss(pred, target, static_cast<float>(config.charbonnier_eps));
}

// Extra loss terms for a batch, added to the task loss.
using ExtraLoss = std::function<TensorF(const Sample&, const nn::ForwardResult<float>&)>;

TrainLog run_training(nn::Model<float>& model, const Dataset& dataset, const TrainConfig& config,
                      const Dataset* eval, const EpochCallback& on_epoch,
                      const ExtraLoss& extra) {
  config.validate();
  if (dataset.empty()) throw ConfigError("training dataset is empty");
  auto& params = model.parameters();
  params.set_requires_grad(true);
  AdamState<float> adam;
  std::uint64_t rng = splitmix64(config.seed ^ 0x5eedULL);
  auto order = identity_order(dataset.size());
  const auto batch = static_cast<std::size_t>(config.batch_size);
  TrainLog log;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle(order, rng);
    const double lr = lr_at(config, epoch);
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t first = 0; first < order.size(); first += batch) {
      const std::size_t count = std::min(batch, order.size() - first);
      const Sample b = make_batch(dataset, order, first, count);
      params.zero_grad();
      const auto out = model.forward(b.current, b.previous);
      TensorF loss = task_loss(config, out.denoised, b.target);
      if (extra) loss = ops::add(loss, extra(b, out));
      const double value = loss.item();
      backward(loss);
      const double norm = gradient_norm(params);
      if (!std::isfinite(value) || !std::isfinite(norm)) {
        for (const auto& p : params.items()) {
          for (float g : p.value.node()->grad) {
            if (!std::isfinite(g)) {
              throw NumericalError("non-finite gradient in parameter " + p.name + " at epoch " +
                                   std::to_string(epoch) + ", step " + std::to_string(steps));
            }
          }
        }
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(steps));
      }
      const double scale = config.clip_norm > 0.0 && norm > config.clip_norm
                               ? config.clip_norm / norm
                               : 1.0;
      adam_step(params, adam, lr, scale);
      loss_sum += value * static_cast<double>(count);
      ++steps;
    }
    EpochLog entry;
    entry.epoch = epoch;
    entry.lr = lr;
    entry.mean_loss = loss_sum / static_cast<double>(dataset.size());
    entry.eval_psnr = eval != nullptr && !eval->empty() ? evaluate(model, *eval, config.batch_size)
                                                        : std::numeric_limits<double>::quiet_NaN();
    entry.steps = steps;
    log.epochs.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  params.zero_grad();
  return log;
}

}  // namespace

Sample make_batch(const Dataset& dataset, const std::vector<std::size_t>& order,
                  std::size_t first, std::size_t count) {
  if (count == 0 || first + count > order.size()) throw UsageError("make_batch: bad range");
  return {stack(dataset, order, first, count, &Sample::current),
          stack(dataset, order, first, count, &Sample::previous),
          stack(dataset, order, first, count, &Sample::target)};
}

double evaluate(const nn::Model<float>& model, const Dataset& dataset, int batch_size) {
  if (dataset.empty()) throw ConfigError("evaluation dataset is empty");
  NoGradGuard guard;
  const auto order = identity_order(dataset.size());
  const auto batch = static_cast<std::size_t>(std::max(1, batch_size));
  double total = 0.0;
  for (std::size_t first = 0; first < order.size(); first += batch) {
    const std::size_t count = std::min(batch, order.size() - first);
    const Sample b = make_batch(dataset, order, first, count);
    const auto out = model.forward(b.current, b.previous);
    for (double db : data::psnr_per_item(out.denoised, b.target)) total += db;
  }
  return total / static_cast<double>(dataset.size());
}

double noisy_psnr(const Dataset& dataset) {
  if (dataset.empty()) throw ConfigError("evaluation dataset is empty");
  double total = 0.0;
  for (const auto& s : dataset.samples) total += data::psnr(s.current, s.target);
  return total / static_cast<double>(dataset.size());
}

TrainLog train(nn::Model<float>& model, const Dataset& dataset, const TrainConfig& config,
               const Dataset* eval, const EpochCallback& on_epoch) {
  return run_training(model, dataset, config, eval, on_epoch, {});
}

void DistillConfig::validate() const {
  if (!(width_factor > 0.0 && width_factor <= 1.0)) {
    throw ConfigError("width_factor must be in (0,1], got " + std::to_string(width_factor));
  }
  if (!(lambda_feature >= 0.0) || !(lambda_flow >= 0.0)) {
    throw ConfigError("distillation weights must be >= 0");
  }
}

TensorF distillation_loss(const nn::ForwardResult<float>& student,
                          const nn::ForwardResult<float>& teacher, const DistillConfig& config) {
  TensorF total = TensorF::scalar(0.0f);
  if (config.lambda_feature > 0.0) {
    total = ops::add(total, ops::scale(ops::l1_loss(student.flow_features, teacher.flow_features),
                                       static_cast<float>(config.lambda_feature)));
  }
  if (config.lambda_flow > 0.0) {
    total = ops::add(total, ops::scale(ops::l1_loss(student.flows.tensor(), teacher.flows.tensor()),
                                       static_cast<float>(config.lambda_flow)));
  }
  return total;
}

DistillResult distill(const nn::Model<float>& teacher, const nn::ModelConfig& student_config,
                      const Dataset& dataset, const TrainConfig& train_config,
                      const DistillConfig& distill_config, const Dataset* eval,
                      const EpochCallback& on_epoch) {
  distill_config.validate();
  train_config.validate();
  if (dataset.empty()) throw ConfigError("training dataset is empty");
  DistillResult result{nn::build<float>(student_config, train_config.seed), {}, 0, 0};
  result.teacher_checksum_before = parameter_checksum(teacher.parameters());
  if (distill_config.init_from_teacher) {
    result.student.copy_matching_from(teacher.parameters());
  }

  // Tap contract, checked once on the first sample.
  {
    NoGradGuard guard;
    const Sample& s = dataset.samples.front();
    const auto t = teacher.forward(s.current, s.previous);
    const auto st = result.student.forward(s.current, s.previous);
    if (!(t.flow_features.shape() == st.flow_features.shape())) {
      throw ConfigError("distillation tap flow_features: teacher " + t.flow_features.shape().str() +
                        " vs student " + st.flow_features.shape().str());
    }
    if (!(t.flows.tensor().shape() == st.flows.tensor().shape())) {
      throw ConfigError("distillation tap flows: teacher " + t.flows.tensor().shape().str() +
                        " vs student " + st.flows.tensor().shape().str());
    }
  }

  ExtraLoss extra;
  if (distill_config.lambda_feature > 0.0 || distill_config.lambda_flow > 0.0) {
    extra = [&](const Sample& b, const nn::ForwardResult<float>& out) {
      nn::ForwardResult<float> t;
      {
        NoGradGuard guard;
        t = teacher.forward(b.current, b.previous);
      }
      return distillation_loss(out, t, distill_config);
    };
  }
  result.log = run_training(result.student, dataset, train_config, eval, on_epoch, extra);
  result.teacher_checksum_after = parameter_checksum(teacher.parameters());
  return result;
}

}  // namespace manet::train
