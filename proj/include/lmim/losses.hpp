#pragma once

#include <cmath>
#include <string>

#include "lmim/tape.hpp"

namespace lmim {

enum class LossKind { L2, L1, Huber, PatchDisc };
enum class InfoNceSign { paper, conventional };

inline const char* to_string(LossKind k) {
  switch (k) {
    case LossKind::L2: return "l2";
    case LossKind::L1: return "l1";
    case LossKind::Huber: return "huber";
    case LossKind::PatchDisc: return "patchdisc";
  }
  return "?";
}

struct LossConfig {
  LossKind kind = LossKind::L2;
  double huber_delta = 1.0;
  double temperature = 0.1;
  double reg_weight = 0.1;
  double gamma_start = 0.75;
  double gamma_end = 0.25;
  InfoNceSign infonce_sign = InfoNceSign::paper;

  void validate() const {
    if (!(temperature > 0)) throw ConfigError("loss: temperature must be > 0");
    if (!(huber_delta > 0)) throw ConfigError("loss: huber_delta must be > 0");
    if (reg_weight < 0) throw ConfigError("loss: reg_weight must be >= 0");
    for (double g : {gamma_start, gamma_end})
      if (g < -1.0 || g > 1.0) throw ConfigError("loss: gamma endpoints must lie in [-1,1]");
  }
};

// Mean direct-reconstruction discrepancy over target patches.
template <typename T>
NodeId recon_loss(Tape<T>& t, NodeId zhat, NodeId z, LossKind kind, T delta) {
  switch (kind) {
    case LossKind::L2: return t.recon_direct(zhat, z, ReconKind::L2, delta);
    case LossKind::L1: return t.recon_direct(zhat, z, ReconKind::L1, delta);
    case LossKind::Huber: return t.recon_direct(zhat, z, ReconKind::Huber, delta);
    default: throw ContractError("recon_loss: PatchDisc is not a direct loss");
  }
}

// Patch discrimination: each predicted latent is contrasted against all
// target latents of the same image (never across the batch). The paper's
// exp(-sim/tau) convention is the default; `sign` selects the usual
// InfoNCE orientation instead.
template <typename T>
NodeId patch_disc(Tape<T>& t, NodeId zhat, NodeId z, T tau,
                  InfoNceSign sign = InfoNceSign::paper) {
  const std::size_t n = t.value(zhat).rows();
  if (n < 2) throw ConfigError("patch_disc: need at least 2 target patches");
  if (!(tau > 0)) throw ConfigError("patch_disc: temperature must be > 0");
  check_same_shape(t.value(zhat), t.value(z), "patch_disc");
  const T s = sign == InfoNceSign::paper ? T(1) : T(-1);
  NodeId sim = t.matmul(t.normalize_rows(zhat), t.transpose(t.normalize_rows(z)));
  NodeId aligned = t.scale(t.diag(sim), s);
  NodeId lse = t.scale(t.lse_rows(t.scale(sim, -s / tau)), tau);
  return t.mean_all(t.add(aligned, lse));
}

// Mean cosine similarity over ordered pairs i != j of the rows of x.
template <typename T>
NodeId mean_pair_cos(Tape<T>& t, NodeId x) {
  const std::size_t n = t.value(x).rows();
  if (n < 2) throw ConfigError("mean_pair_cos: need at least 2 rows");
  NodeId nrm = t.normalize_rows(x);
  NodeId sim = t.matmul(nrm, t.transpose(nrm));
  NodeId off_diag = t.sub(t.sum_all(sim), t.sum_all(t.diag(sim)));
  return t.scale(off_diag, T(1) / T(n * (n - 1)));
}

// R = (gamma - meanPairCos(Z_hat_T))^2 + (gamma - meanPairCos(Z_V))^2
template <typename T>
NodeId sim_regularizer(Tape<T>& t, NodeId z_v, NodeId zhat_t, T gamma) {
  if (t.value(z_v).rows() < 2 || t.value(zhat_t).rows() < 2)
    throw ConfigError("sim_regularizer: both sets need at least 2 latents");
  NodeId g = t.constant(Tensor<T>::scalar(gamma));
  NodeId r1 = t.sub(g, mean_pair_cos(t, zhat_t));
  NodeId r2 = t.sub(g, mean_pair_cos(t, z_v));
  return t.add(t.mul(r1, r1), t.mul(r2, r2));
}

// Cosine ramp of the similarity target from gamma_start to gamma_end.
inline double gamma_schedule(std::size_t step, std::size_t total_steps, double gamma_start,
                             double gamma_end) {
  if (step > total_steps) throw ContractError("gamma_schedule: step beyond total_steps");
  if (total_steps == 0) return gamma_end;
  const double c = std::cos(M_PI * double(step) / double(total_steps));
  return gamma_end + 0.5 * (gamma_start - gamma_end) * (1.0 + c);
}

// Reconstruction term plus the weighted similarity constraint. With
// reg_weight == 0 the regularizer is skipped entirely so the value equals
// the reconstruction term exactly.
template <typename T>
NodeId total_loss(Tape<T>& t, NodeId zhat_t, NodeId z_t, NodeId z_v, const LossConfig& cfg,
                  std::size_t step, std::size_t total_steps) {
  cfg.validate();
  NodeId recon = cfg.kind == LossKind::PatchDisc
                     ? patch_disc(t, zhat_t, z_t, T(cfg.temperature), cfg.infonce_sign)
                     : recon_loss(t, zhat_t, z_t, cfg.kind, T(cfg.huber_delta));
  if (cfg.reg_weight == 0) return recon;
  const T gamma = T(gamma_schedule(step, total_steps, cfg.gamma_start, cfg.gamma_end));
  return t.add(recon, t.scale(sim_regularizer(t, z_v, zhat_t, gamma), T(cfg.reg_weight)));
}

}  // namespace lmim
