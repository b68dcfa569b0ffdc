#pragma once

#include <cmath>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "lmim/checkpoint.hpp"
#include "lmim/config.hpp"
#include "lmim/dataset.hpp"
#include "lmim/model.hpp"

namespace lmim {

// Linear warmup to base_lr, then cosine decay to zero.
double lr_schedule(std::size_t step, std::size_t warmup_steps, std::size_t total_steps,
                   double base_lr);

struct AdamMoments {
  Tensor<float> m, v;
};

// Decoupled-weight-decay Adam with bias correction; t is the 1-based
// step count. lr == 0 leaves the parameter bitwise unchanged.
template <typename T>
void adamw_update(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& mom_m, Tensor<T>& mom_v,
                  double lr, double beta1, double beta2, double eps, double wd, std::size_t t) {
  check_same_shape(param, grad, "adamw_update");
  check_same_shape(param, mom_m, "adamw_update");
  check_same_shape(param, mom_v, "adamw_update");
  const double bc1 = 1.0 - std::pow(beta1, double(t));
  const double bc2 = 1.0 - std::pow(beta2, double(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad.at(i);
    const double m = beta1 * mom_m.at(i) + (1.0 - beta1) * g;
    const double v = beta2 * mom_v.at(i) + (1.0 - beta2) * g * g;
    mom_m.at(i) = T(m);
    mom_v.at(i) = T(v);
    if (lr != 0.0) {
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      const double p = param.at(i);
      param.at(i) = T(p - lr * (mhat / (std::sqrt(vhat) + eps) + wd * p));
    }
  }
}

struct StepMetrics {
  std::size_t step = 0;
  double lr = 0;
  double loss = 0;
  double recon = 0;
  double reg = 0;
  double grad_norm = 0;
  double pooled_pair_cos = 0;
  double gamma_t = 0;
  bool nan_flag = false;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const StepMetrics& m);

struct TrainState {
  std::size_t step = 0;
  LatentMimModel<float> model;
  TargetEncoderState<float> target;
  std::vector<AdamMoments> moments;  // aligned with visit_model order
  Rng rng;
};

class Trainer {
 public:
  Trainer(RunConfig cfg, Dataset data);

  const RunConfig& config() const { return cfg_; }
  const Dataset& data() const { return data_; }
  std::size_t steps_per_epoch() const { return data_.size() / cfg_.batch_size; }
  std::size_t total_steps() const { return steps_per_epoch() * cfg_.epochs; }
  std::size_t warmup_steps() const { return steps_per_epoch() * cfg_.warmup_epochs; }

  TrainState make_state() const;

  // One optimizer step over the batch this step index selects. On a
  // non-finite loss or gradient the state is left untouched (rng
  // included) and the metrics carry nan_flag.
  StepMetrics train_step(TrainState& st) const;

  struct RunResult {
    bool nan_abort = false;
    std::size_t last_step = 0;
    std::filesystem::path checkpoint;
    StepMetrics last_metrics;
  };

  // Train to total_steps (or NaN abort), stream CSV rows, write periodic
  // and final checkpoints plus the resolved config under out_dir.
  RunResult run(TrainState& st, const std::filesystem::path& out_dir) const;

  Checkpoint make_checkpoint(const TrainState& st) const;
  TrainState state_from_checkpoint(const Checkpoint& ck) const;

  double ema_momentum_at(std::size_t step) const;

 private:
  std::vector<std::size_t> batch_indices(std::size_t step) const;

  RunConfig cfg_;
  Dataset data_;
};

// Challenge-ladder presets; unknown names raise ConfigError listing the
// available presets.
std::vector<std::string> preset_names();
RunConfig resolve_preset(const std::string& name);

Dataset open_dataset(const RunConfig& cfg);

// Embedded config of a checkpoint, verified against the header digest.
RunConfig config_from_checkpoint(const Checkpoint& ck);
LatentMimModel<float> model_from_checkpoint(const Checkpoint& ck, const RunConfig& cfg);

}  // namespace lmim
