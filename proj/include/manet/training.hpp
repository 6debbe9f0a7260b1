#pragma once

// Adam with step decay, the supervised denoising loop and feature/flow
// distillation into a slimmed student.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "manet/data.hpp"
#include "manet/networks.hpp"

namespace manet::train {

enum class LossKind { l1, charbonnier };
std::string to_string(LossKind kind);
LossKind parse_loss(const std::string& text);

struct TrainConfig {
  double lr0 = 1e-3;
  double decay_factor = 0.1;
  int decay_every_epochs = 4;
  int epochs = 30;
  int batch_size = 1;
  LossKind loss = LossKind::charbonnier;
  double charbonnier_eps = 1e-3;
  double clip_norm = 10.0;  // global gradient norm; <= 0 disables
  std::uint64_t seed = 0;

  void validate() const;
};

// lr0 * decay^floor(epoch / decay_every), computed as a division by the
// integer power of 1/decay so that decimal learning rates stay exact.
double lr_at(const TrainConfig& config, int epoch);
double lr_at(double lr0, int epoch);

template <typename T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t step = 0;
  std::vector<std::vector<T>> m, v;  // one per parameter, lazily sized
};

// One bias-corrected Adam update from the parameters' accumulated gradients,
// each multiplied by grad_scale first.
template <typename T>
void adam_step(ParameterSet<T>& params, AdamState<T>& state, double lr, double grad_scale = 1.0);

// Global L2 norm over all parameter gradients.
template <typename T>
double gradient_norm(const ParameterSet<T>& params);

// FNV-1a over names, shapes and value bytes.
template <typename T>
std::uint64_t parameter_checksum(const ParameterSet<T>& params);

// One supervised example: consecutive noisy frames and the clean current frame.
struct Sample {
  TensorF current;
  TensorF previous;
  TensorF target;
};

struct Dataset {
  std::vector<Sample> samples;
  bool empty() const { return samples.empty(); }
  std::size_t size() const { return samples.size(); }
};

// Pairs (i-1, i) for every i >= 1.
Dataset make_pairs(const data::Clip& noisy, const data::Clip& clean);
void append(Dataset& into, const Dataset& more);

// Stacks samples [first, first+count) of `order` into batch tensors.
Sample make_batch(const Dataset& dataset, const std::vector<std::size_t>& order,
                  std::size_t first, std::size_t count);

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double mean_loss = 0.0;
  double eval_psnr = 0.0;  // NaN when no evaluation set is given
  std::size_t steps = 0;
};

struct TrainLog {
  std::vector<EpochLog> epochs;
};

using EpochCallback = std::function<void(const EpochLog&)>;

// Mean per-frame PSNR of the model output against the targets.
double evaluate(const nn::Model<float>& model, const Dataset& dataset, int batch_size = 8);
// Mean per-frame PSNR of the noisy current frames against the targets.
double noisy_psnr(const Dataset& dataset);

// Throws NumericalError naming the first parameter with a non-finite gradient.
TrainLog train(nn::Model<float>& model, const Dataset& dataset, const TrainConfig& config,
               const Dataset* eval = nullptr, const EpochCallback& on_epoch = {});

struct DistillConfig {
  double width_factor = 0.5;
  double lambda_feature = 0.1;
  double lambda_flow = 0.1;
  // Copy every teacher parameter whose name and shape match into the student
  // before training.
  bool init_from_teacher = false;

  void validate() const;
};

// lambda_feature * l1(flow features) + lambda_flow * l1(flow stacks), as a
// [1,1,1,1] tensor differentiable w.r.t. the student side.
TensorF distillation_loss(const nn::ForwardResult<float>& student,
                          const nn::ForwardResult<float>& teacher, const DistillConfig& config);

struct DistillResult {
  nn::Model<float> student;
  TrainLog log;
  std::uint64_t teacher_checksum_before = 0;
  std::uint64_t teacher_checksum_after = 0;
};

// Student loss = task loss + distillation_loss. The teacher runs without
// gradient recording.
// Tap shape mismatches are configuration errors naming the tap.
DistillResult distill(const nn::Model<float>& teacher, const nn::ModelConfig& student_config,
                      const Dataset& dataset, const TrainConfig& train_config,
                      const DistillConfig& distill_config, const Dataset* eval = nullptr,
                      const EpochCallback& on_epoch = {});

}  // namespace manet::train
