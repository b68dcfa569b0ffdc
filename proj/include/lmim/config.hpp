#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "lmim/losses.hpp"
#include "lmim/model.hpp"

namespace lmim {

// Flat key=value run description. Every hyperparameter of a run lives
// here; serialization always writes the complete effective config so no
// value stays implicit.
struct RunConfig {
  // data
  std::string dataset = "synthetic";  // directory path or "synthetic"
  std::uint64_t synth_classes = 10;
  std::uint64_t synth_count = 2000;
  std::uint64_t synth_size = 96;
  std::uint64_t synth_seed = 7777;

  // model
  std::uint64_t dim = 64;
  std::uint64_t depth = 4;
  std::uint64_t heads = 4;
  std::uint64_t patch_size = 8;
  std::uint64_t grid_count = 8;
  std::string decoder = "self_attention";
  std::uint64_t decoder_depth = 3;
  bool visual_cues = false;
  bool use_projector = false;
  std::uint64_t projector_hidden = 0;  // 0 -> 64 * dim

  // targets
  std::string target_strategy = "joint";
  std::int64_t target_depth = -1;  // -1 -> full depth
  double momentum = 0.996;

  // masking
  double mask_ratio = 0.75;
  std::string grid = "contiguous";
  std::uint64_t gap = 2;

  // loss
  std::string loss = "l2";
  double huber_delta = 1.0;
  double temperature = 0.1;
  double reg_weight = 0.1;
  double gamma_start = 0.75;
  double gamma_end = 0.25;
  std::string infonce_sign = "paper";

  // optimization
  std::uint64_t epochs = 5;
  std::uint64_t warmup_epochs = 1;
  std::uint64_t batch_size = 8;
  double base_lr = 0.02;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double min_crop_area = 0.2;

  // run
  std::uint64_t seed = 1;
  std::uint64_t save_every_epochs = 0;  // 0 -> final checkpoint only
  std::string eval_pooling = "mean";
  std::uint64_t topk_k = 10;

  // ---- derived views ----
  ModelConfig model_config() const;
  LossConfig loss_config() const;
  TargetStrategy strategy() const;
  std::size_t resolved_target_depth() const;
  bool noncontiguous() const;
  std::size_t canvas_side() const;  // grid_count * patch (+ gap per cell when non-contiguous)
  double effective_lr() const { return base_lr * double(batch_size) / 256.0; }

  void validate() const;
};

// parse/serialize/parse is a fixed point; unknown keys are rejected with
// the offending key named.
RunConfig parse_config_text(const std::string& text);
RunConfig load_config(const std::filesystem::path& file);
std::string serialize_config(const RunConfig& cfg);
void apply_override(RunConfig& cfg, const std::string& key_eq_value);

std::uint64_t fnv1a64(const void* data, std::size_t len);
inline std::uint64_t config_digest(const RunConfig& cfg) {
  std::string s = serialize_config(cfg);
  return fnv1a64(s.data(), s.size());
}

}  // namespace lmim
