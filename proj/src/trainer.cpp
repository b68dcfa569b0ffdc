#include "lmim/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "lmim/losses.hpp"

namespace lmim {

double lr_schedule(std::size_t step, std::size_t warmup_steps, std::size_t total_steps,
                   double base_lr) {
  if (step > total_steps) throw ContractError("lr_schedule: step beyond total_steps");
  if (warmup_steps > 0 && step < warmup_steps)
    return base_lr * double(step) / double(warmup_steps);
  if (total_steps == warmup_steps) return base_lr;
  const double t = double(step - warmup_steps) / double(total_steps - warmup_steps);
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * t));
}

std::string metrics_csv_header() {
  return "step,lr,loss,recon,reg,grad_norm,pooled_pair_cos,gamma_t,nan_flag";
}

std::string metrics_csv_row(const StepMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%zu,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%d", m.step,
                m.lr, m.loss, m.recon, m.reg, m.grad_norm, m.pooled_pair_cos, m.gamma_t,
                m.nan_flag ? 1 : 0);
  return buf;
}

namespace {

Tensor<float> column_mean(const Tensor<float>& x) {
  Tensor<float> out(Shape{x.cols()});
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) out.at(c) += x.at(r, c);
  for (std::size_t c = 0; c < x.cols(); ++c) out.at(c) /= float(x.rows());
  return out;
}

double mean_pairwise_cos(const std::vector<Tensor<float>>& rows) {
  if (rows.size() < 2) return 0.0;
  double sum = 0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = i + 1; j < rows.size(); ++j) {
      sum += double(cosine_sim(rows[i], rows[j]));
      ++pairs;
    }
  return sum / double(pairs);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t x = seed ^ (salt * 0x9e3779b97f4a7c15ull);
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ull;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebull;
  x ^= x >> 31;
  return x;
}

}  // namespace

Trainer::Trainer(RunConfig cfg, Dataset data) : cfg_(std::move(cfg)), data_(std::move(data)) {
  cfg_.validate();
  if (data_.size() < cfg_.batch_size)
    throw ConfigError("trainer: dataset smaller than one batch");
}

TrainState Trainer::make_state() const {
  TrainState st;
  Rng init_rng(mix_seed(cfg_.seed, 0xA11CE));
  const ModelConfig mc = cfg_.model_config();
  st.model = make_model<float>(mc, init_rng);
  st.target.strategy = cfg_.strategy();
  st.target.target_depth = cfg_.resolved_target_depth();
  st.target.momentum = float(cfg_.momentum);
  if (st.target.strategy == TargetStrategy::momentum) {
    // momentum targets start as an exact copy of the online weights
    st.target.params = st.model.encoder;
  } else if (st.target.strategy == TargetStrategy::standalone) {
    // independently initialized, never updated
    Rng standalone_rng(mix_seed(cfg_.seed, 0x57A2D));
    st.target.params = make_encoder<float>(mc, standalone_rng);
  }
  visit_model(st.model, [&](const std::string&, Tensor<float>& p) {
    st.moments.push_back(AdamMoments{Tensor<float>(p.shape()), Tensor<float>(p.shape())});
  });
  st.rng.seed(mix_seed(cfg_.seed, 0xDA7A));
  return st;
}

std::vector<std::size_t> Trainer::batch_indices(std::size_t step) const {
  const std::size_t spe = steps_per_epoch();
  const std::size_t epoch = step / spe;
  const std::size_t slot = step % spe;
  // epoch order depends on (seed, epoch) only, so a resumed run replays
  // the same mid-epoch batches without extra state
  Rng perm_rng(mix_seed(cfg_.seed, 0xE90C0 + epoch));
  std::vector<std::size_t> order(data_.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), perm_rng);
  return {order.begin() + long(slot * cfg_.batch_size),
          order.begin() + long((slot + 1) * cfg_.batch_size)};
}

double Trainer::ema_momentum_at(std::size_t step) const {
  // cosine ramp from the configured base to 1.0 over the run
  const double mu0 = cfg_.momentum;
  const double t = total_steps() ? double(step) / double(total_steps()) : 1.0;
  return 1.0 - (1.0 - mu0) * 0.5 * (1.0 + std::cos(M_PI * t));
}

StepMetrics Trainer::train_step(TrainState& st) const {
  StepMetrics mt;
  mt.step = st.step;
  mt.lr = lr_schedule(st.step, warmup_steps(), total_steps(), cfg_.effective_lr());
  mt.gamma_t = gamma_schedule(st.step, total_steps(), cfg_.gamma_start, cfg_.gamma_end);

  const Rng rng_snapshot = st.rng;
  try {
    const ModelConfig mc = cfg_.model_config();
    const LossConfig lc = cfg_.loss_config();
    const TargetStrategy strat = cfg_.strategy();
    const std::vector<std::size_t> batch = batch_indices(st.step);

    Tape<float> tape;
    NodeId loss_sum = 0;
    double recon_sum = 0, reg_sum = 0;
    std::vector<Tensor<float>> pooled;
    pooled.reserve(batch.size());

    for (std::size_t bi = 0; bi < batch.size(); ++bi) {
      ImageTensor img = augment(data_.images[batch[bi]], cfg_.canvas_side(), cfg_.min_crop_area,
                                st.rng);
      PatchSet ps = cfg_.noncontiguous()
                        ? extract_noncontiguous_grid(img, cfg_.patch_size, cfg_.gap, st.rng)
                        : extract_contiguous_grid(img, cfg_.patch_size);
      MaskPlan mask = sample_mask(ps.count(), cfg_.mask_ratio, st.rng);
      Tensor<float> vis = standardize_patches(gather_patch_rows(ps, mask.visible));
      Tensor<float> tgt = standardize_patches(gather_patch_rows(ps, mask.target));
      Tensor<float> pos_v =
          sincos_pos_embed<float>(gather_positions(ps.positions, mask.visible), mc.dim);
      Tensor<float> pos_t =
          sincos_pos_embed<float>(gather_positions(ps.positions, mask.target), mc.dim);

      NodeId z_v = encode(tape, st.model.encoder, vis, pos_v);
      NodeId z_t = strat == TargetStrategy::joint
                       ? encode(tape, st.model.encoder, tgt, pos_t)
                       : tape.constant(target_encode(st.target, st.model.encoder, tgt, pos_t));

      NodeId dec_in = st.model.projector ? project(tape, *st.model.projector, z_v) : z_v;
      NodeId zhat = decode(tape, st.model.decoder, dec_in, pos_v, pos_t);

      NodeId recon = lc.kind == LossKind::PatchDisc
                         ? patch_disc(tape, zhat, z_t, float(lc.temperature), lc.infonce_sign)
                         : recon_loss(tape, zhat, z_t, lc.kind, float(lc.huber_delta));
      NodeId li = recon;
      recon_sum += tape.value(recon).item();
      if (lc.reg_weight != 0) {
        NodeId reg = sim_regularizer(tape, z_v, zhat, float(mt.gamma_t));
        reg_sum += tape.value(reg).item();
        li = tape.add(recon, tape.scale(reg, float(lc.reg_weight)));
      }
      loss_sum = bi == 0 ? li : tape.add(loss_sum, li);
      pooled.push_back(column_mean(tape.value(z_v)));
    }

    NodeId loss = tape.scale(loss_sum, 1.0f / float(batch.size()));
    tape.backward(loss);

    std::vector<Tensor<float>> grads;
    grads.reserve(st.moments.size());
    double grad_norm_sq = 0;
    visit_model(st.model, [&](const std::string&, Tensor<float>& p) {
      Tensor<float> g = tape.grad_for(p);
      if (!g.all_finite()) throw NumericError("backward produced non-finite gradients");
      for (std::size_t i = 0; i < g.size(); ++i) grad_norm_sq += double(g.at(i)) * g.at(i);
      grads.push_back(std::move(g));
    });

    std::size_t pi = 0;
    visit_model(st.model, [&](const std::string&, Tensor<float>& p) {
      // no decay on biases, norms, and the mask token, MAE-style
      const double wd = p.rank() >= 2 ? cfg_.weight_decay : 0.0;
      adamw_update(p, grads[pi], st.moments[pi].m, st.moments[pi].v, mt.lr, cfg_.beta1,
                   cfg_.beta2, cfg_.adam_eps, wd, st.step + 1);
      ++pi;
    });

    if (strat == TargetStrategy::momentum)
      ema_update(st.target, st.model.encoder, float(ema_momentum_at(st.step)));

    mt.loss = tape.value(loss).item();
    mt.recon = recon_sum / double(batch.size());
    mt.reg = reg_sum / double(batch.size());
    mt.grad_norm = std::sqrt(grad_norm_sq);
    mt.pooled_pair_cos = mean_pairwise_cos(pooled);
    st.step += 1;
  } catch (const NumericError&) {
    st.rng = rng_snapshot;
    mt.nan_flag = true;
    mt.loss = mt.recon = mt.reg = mt.grad_norm = mt.pooled_pair_cos =
        std::numeric_limits<double>::quiet_NaN();
  }
  return mt;
}

Trainer::RunResult Trainer::run(TrainState& st, const std::filesystem::path& out_dir) const {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);

  {
    std::ofstream cfg_out(out_dir / "resolved.cfg");
    if (!cfg_out) throw IoError("cannot write resolved config under " + out_dir.string());
    cfg_out << serialize_config(cfg_);
  }

  const fs::path csv = out_dir / "metrics.csv";
  const bool fresh = st.step == 0;
  const bool need_header =
      fresh || !fs::exists(csv) || fs::file_size(csv) == 0;
  std::ofstream metrics(csv, fresh ? std::ios::trunc : std::ios::app);
  if (!metrics) throw IoError("cannot write metrics under " + out_dir.string());
  if (need_header) metrics << metrics_csv_header() << "\n";

  RunResult res;
  while (st.step < total_steps()) {
    StepMetrics m = train_step(st);
    metrics << metrics_csv_row(m) << "\n";
    res.last_metrics = m;
    if (m.nan_flag) {
      metrics.flush();
      res.nan_abort = true;
      res.last_step = st.step;
      return res;
    }
    const std::size_t spe = steps_per_epoch();
    if (cfg_.save_every_epochs && st.step % (spe * cfg_.save_every_epochs) == 0 &&
        st.step < total_steps()) {
      const std::size_t epoch = st.step / spe;
      save_checkpoint(out_dir / ("ckpt_epoch" + std::to_string(epoch) + ".lmim"),
                      make_checkpoint(st));
    }
  }
  res.last_step = st.step;
  res.checkpoint = out_dir / "ckpt_final.lmim";
  save_checkpoint(res.checkpoint, make_checkpoint(st));
  return res;
}

Checkpoint Trainer::make_checkpoint(const TrainState& st) const {
  Checkpoint ck;
  ck.step = st.step;
  ck.config_digest = config_digest(cfg_);
  ck.add_bytes("config", serialize_config(cfg_));
  visit_model(const_cast<LatentMimModel<float>&>(st.model),
              [&](const std::string& n, Tensor<float>& p) { ck.add("model/" + n, p); });
  if (st.target.strategy == TargetStrategy::momentum ||
      st.target.strategy == TargetStrategy::standalone) {
    visit_encoder(const_cast<EncoderParams<float>&>(st.target.params), "enc",
                  [&](const std::string& n, Tensor<float>& p) { ck.add("target/" + n, p); });
  }
  for (std::size_t i = 0; i < st.moments.size(); ++i) {
    ck.add("opt/m/" + std::to_string(i), st.moments[i].m);
    ck.add("opt/v/" + std::to_string(i), st.moments[i].v);
  }
  std::ostringstream rng_ss;
  rng_ss << st.rng;
  ck.add_bytes("rng", rng_ss.str());
  return ck;
}

TrainState Trainer::state_from_checkpoint(const Checkpoint& ck) const {
  if (ck.config_digest != config_digest(cfg_))
    throw ContractError("checkpoint config digest does not match this run's config");
  TrainState st = make_state();
  st.step = ck.step;
  visit_model(st.model,
              [&](const std::string& n, Tensor<float>& p) { p = ck.tensor_f32("model/" + n); });
  if (st.target.strategy == TargetStrategy::momentum ||
      st.target.strategy == TargetStrategy::standalone) {
    visit_encoder(st.target.params, "enc",
                  [&](const std::string& n, Tensor<float>& p) { p = ck.tensor_f32("target/" + n); });
  }
  for (std::size_t i = 0; i < st.moments.size(); ++i) {
    st.moments[i].m = ck.tensor_f32("opt/m/" + std::to_string(i));
    st.moments[i].v = ck.tensor_f32("opt/v/" + std::to_string(i));
  }
  std::istringstream rng_ss(ck.bytes("rng"));
  rng_ss >> st.rng;
  if (!rng_ss) throw ContractError("checkpoint: bad rng state");
  return st;
}

// ---- presets ----

namespace {

struct PresetDef {
  const char* name;
  void (*apply)(RunConfig&);
};

void preset_naive(RunConfig& c) {
  c.target_strategy = "joint";
  c.loss = "l2";
  c.mask_ratio = 0.75;
  c.grid = "contiguous";
  c.decoder = "self_attention";
  c.decoder_depth = 3;
  c.visual_cues = false;
  c.use_projector = false;
  c.reg_weight = 0.0;
}
void preset_no_weight_sharing(RunConfig& c) {
  preset_naive(c);
  c.target_strategy = "standalone";
}
void preset_shared_stopgrad(RunConfig& c) {
  preset_naive(c);
  c.target_strategy = "shared_stopgrad";
}
void preset_momentum(RunConfig& c) {
  preset_naive(c);
  c.target_strategy = "momentum";
}
void preset_patchdisc(RunConfig& c) {
  preset_momentum(c);
  c.loss = "patchdisc";
}
void preset_mask90(RunConfig& c) {
  preset_patchdisc(c);
  c.mask_ratio = 0.90;
}
void preset_gap(RunConfig& c) {
  preset_mask90(c);
  c.grid = "noncontiguous";
}
void preset_simreg(RunConfig& c) {
  preset_gap(c);
  c.reg_weight = 0.1;
}
void preset_crossattn(RunConfig& c) {
  preset_simreg(c);
  c.decoder = "cross_attention";
}
void preset_cues(RunConfig& c) {
  preset_crossattn(c);
  c.visual_cues = true;
}
void preset_projector(RunConfig& c) {
  preset_cues(c);
  c.use_projector = true;
}

const PresetDef kPresets[] = {
    {"naive", preset_naive},
    {"no_weight_sharing", preset_no_weight_sharing},
    {"shared_stopgrad", preset_shared_stopgrad},
    {"momentum", preset_momentum},
    {"patchdisc", preset_patchdisc},
    {"mask90", preset_mask90},
    {"gap", preset_gap},
    {"simreg", preset_simreg},
    {"challenge3-optimal", preset_simreg},
    {"crossattn", preset_crossattn},
    {"cues", preset_cues},
    {"projector", preset_projector},
    {"full", preset_projector},
};

}  // namespace

std::vector<std::string> preset_names() {
  std::vector<std::string> names;
  for (const auto& p : kPresets) names.emplace_back(p.name);
  return names;
}

RunConfig resolve_preset(const std::string& name) {
  std::string key = name;
  if (!key.empty() && key[0] == '+') key = key.substr(1);
  for (const auto& p : kPresets) {
    if (key == p.name) {
      RunConfig cfg;
      p.apply(cfg);
      return cfg;
    }
  }
  std::string msg = "unknown preset '" + name + "'; available:";
  for (const auto& p : kPresets) msg += std::string(" ") + p.name;
  throw ConfigError(msg);
}

Dataset open_dataset(const RunConfig& cfg) {
  if (cfg.dataset == "synthetic")
    return make_synthetic_dataset(int(cfg.synth_classes), cfg.synth_count, cfg.synth_size,
                                  cfg.synth_seed);
  return load_dataset(cfg.dataset);
}

RunConfig config_from_checkpoint(const Checkpoint& ck) {
  RunConfig cfg = parse_config_text(ck.bytes("config"));
  if (config_digest(cfg) != ck.config_digest)
    throw ContractError("checkpoint: embedded config does not match header digest");
  return cfg;
}

LatentMimModel<float> model_from_checkpoint(const Checkpoint& ck, const RunConfig& cfg) {
  Rng shape_rng(0);
  LatentMimModel<float> m = make_model<float>(cfg.model_config(), shape_rng);
  visit_model(m, [&](const std::string& n, Tensor<float>& p) {
    Tensor<float> loaded = ck.tensor_f32("model/" + n);
    check_same_shape(p, loaded, "model_from_checkpoint");
    p = std::move(loaded);
  });
  return m;
}

}  // namespace lmim
