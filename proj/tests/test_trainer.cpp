#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "lmim/trainer.hpp"

using namespace lmim;

namespace {

// small everything: 4x4 grid on a 32px canvas, 48 images
RunConfig tiny_run_config() {
  RunConfig cfg;
  cfg.synth_classes = 4;
  cfg.synth_count = 48;
  cfg.synth_size = 48;
  cfg.dim = 16;
  cfg.depth = 2;
  cfg.heads = 4;
  cfg.patch_size = 8;
  cfg.grid_count = 4;
  cfg.decoder_depth = 2;
  cfg.epochs = 2;
  cfg.warmup_epochs = 1;
  cfg.batch_size = 8;
  cfg.base_lr = 0.05;
  cfg.reg_weight = 0.0;
  cfg.target_strategy = "momentum";
  cfg.seed = 11;
  return cfg;
}

bool params_equal(const LatentMimModel<float>& a, const LatentMimModel<float>& b) {
  std::vector<const Tensor<float>*> pa, pb;
  visit_model(const_cast<LatentMimModel<float>&>(a),
              [&](const std::string&, Tensor<float>& p) { pa.push_back(&p); });
  visit_model(const_cast<LatentMimModel<float>&>(b),
              [&](const std::string&, Tensor<float>& p) { pb.push_back(&p); });
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i]->vec() != pb[i]->vec()) return false;
  return true;
}

}  // namespace

TEST_CASE("lr schedule endpoints and midpoint") {
  const double base = 3e-3;
  CHECK(lr_schedule(0, 10, 100, base) == 0.0);
  CHECK(lr_schedule(10, 10, 100, base) == doctest::Approx(base).epsilon(1e-12));
  CHECK(lr_schedule(100, 10, 100, base) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(lr_schedule(55, 10, 100, base) == doctest::Approx(base / 2).epsilon(1e-12));
  CHECK_THROWS_AS(lr_schedule(101, 10, 100, base), ContractError);
}

TEST_CASE("adamw: zero gradient and zero decay is a no-op") {
  Tensor<float> p({3}, {1.0f, -2.0f, 3.0f});
  Tensor<float> p0 = p;
  Tensor<float> g(Shape{3}), m(Shape{3}), v(Shape{3});
  adamw_update(p, g, m, v, 0.01, 0.9, 0.95, 1e-8, 0.0, 1);
  CHECK(p.vec() == p0.vec());
}

TEST_CASE("adamw: first step moves by -lr * sign(g) as eps -> 0") {
  for (double g0 : {0.37, -1.4}) {
    Tensor<double> p = Tensor<double>::scalar(5.0);
    Tensor<double> g = Tensor<double>::scalar(g0);
    Tensor<double> m(Shape{1}), v(Shape{1});
    adamw_update(p, g, m, v, 0.01, 0.9, 0.95, 1e-15, 0.0, 1);
    CHECK(p.item() == doctest::Approx(5.0 - 0.01 * (g0 > 0 ? 1.0 : -1.0)).epsilon(1e-9));
  }
}

TEST_CASE("adamw matches an independent scalar reference trace") {
  const double lr = 0.003, b1 = 0.9, b2 = 0.95, eps = 1e-8, wd = 0.05;
  double ref_p = 1.7, ref_m = 0, ref_v = 0;
  Tensor<double> p = Tensor<double>::scalar(1.7);
  Tensor<double> m(Shape{1}), v(Shape{1});
  Rng rng(3);
  std::uniform_real_distribution<double> gd(-1, 1);
  for (std::size_t t = 1; t <= 10; ++t) {
    const double g = gd(rng);
    // independently coded update
    ref_m = b1 * ref_m + (1 - b1) * g;
    ref_v = b2 * ref_v + (1 - b2) * g * g;
    const double mh = ref_m / (1 - std::pow(b1, double(t)));
    const double vh = ref_v / (1 - std::pow(b2, double(t)));
    ref_p = ref_p - lr * mh / (std::sqrt(vh) + eps) - lr * wd * ref_p;

    Tensor<double> gt = Tensor<double>::scalar(g);
    adamw_update(p, gt, m, v, lr, b1, b2, eps, wd, t);
    CHECK(std::abs(p.item() - ref_p) <= 1e-10);
  }
}

TEST_CASE("ema converges to the online weights geometrically") {
  ModelConfig mc;
  mc.dim = 8;
  mc.depth = 1;
  mc.heads = 2;
  mc.patch = 2;
  Rng rng(5);
  EncoderParams<float> online = make_encoder<float>(mc, rng);
  TargetEncoderState<float> st;
  st.strategy = TargetStrategy::momentum;
  st.params = make_encoder<float>(mc, rng);

  const float mu = 0.5f;
  const std::size_t steps = std::size_t(std::ceil(std::log(1e-6) / std::log(double(mu))));
  for (std::size_t i = 0; i < steps; ++i) ema_update(st, online, mu);
  double worst = 0;
  std::vector<const Tensor<float>*> a, b;
  visit_encoder(st.params, "x", [&](const std::string&, Tensor<float>& p) { a.push_back(&p); });
  visit_encoder(online, "x", [&](const std::string&, Tensor<float>& p) { b.push_back(&p); });
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i]->size(); ++j)
      worst = std::max(worst, std::abs(double(a[i]->at(j)) - double(b[i]->at(j))));
  CHECK(worst <= 1e-6);
}

TEST_CASE("train_step with lr 0 keeps parameters bitwise and still reports metrics") {
  RunConfig cfg = tiny_run_config();
  cfg.base_lr = 0.0;
  Trainer trainer(cfg, open_dataset(cfg));
  TrainState st = trainer.make_state();
  LatentMimModel<float> before = st.model;
  StepMetrics m = trainer.train_step(st);
  CHECK_FALSE(m.nan_flag);
  CHECK(std::isfinite(m.loss));
  CHECK(m.grad_norm > 0.0);
  CHECK(params_equal(before, st.model));
}

TEST_CASE("fixed seed reproduces the metric trace exactly") {
  RunConfig cfg = tiny_run_config();
  Trainer trainer(cfg, open_dataset(cfg));
  auto run_rows = [&] {
    TrainState st = trainer.make_state();
    std::vector<std::string> rows;
    for (int i = 0; i < 6; ++i) rows.push_back(metrics_csv_row(trainer.train_step(st)));
    return rows;
  };
  CHECK(run_rows() == run_rows());
}

TEST_CASE("checkpoint state round-trip continues bitwise") {
  RunConfig cfg = tiny_run_config();
  Trainer trainer(cfg, open_dataset(cfg));
  TrainState st = trainer.make_state();
  for (int i = 0; i < 3; ++i) trainer.train_step(st);

  Checkpoint ck = trainer.make_checkpoint(st);
  TrainState restored = trainer.state_from_checkpoint(ck);
  CHECK(restored.step == st.step);
  CHECK(params_equal(st.model, restored.model));

  for (int i = 0; i < 3; ++i) {
    std::string a = metrics_csv_row(trainer.train_step(st));
    std::string b = metrics_csv_row(trainer.train_step(restored));
    CHECK(a == b);
  }
}

TEST_CASE("non-finite training aborts the step and leaves the state untouched") {
  RunConfig cfg = tiny_run_config();
  cfg.base_lr = 1e25;
  cfg.warmup_epochs = 0;
  cfg.epochs = 1;
  Trainer trainer(cfg, open_dataset(cfg));
  TrainState st = trainer.make_state();

  // a few gigantic steps eventually overflow float32 somewhere
  bool aborted = false;
  LatentMimModel<float> snapshot = st.model;
  std::ostringstream rng_before;
  for (int i = 0; i < int(trainer.total_steps()); ++i) {
    snapshot = st.model;
    rng_before.str("");
    rng_before << st.rng;
    StepMetrics m = trainer.train_step(st);
    if (m.nan_flag) {
      aborted = true;
      CHECK(std::isnan(m.loss));
      CHECK(params_equal(snapshot, st.model));
      std::ostringstream rng_after;
      rng_after << st.rng;
      CHECK(rng_before.str() == rng_after.str());
      break;
    }
  }
  CHECK(aborted);
}

TEST_CASE("preset table resolves the ladder") {
  RunConfig naive = resolve_preset("naive");
  CHECK(naive.grid == "contiguous");
  CHECK(naive.mask_ratio == 0.75);
  CHECK(naive.target_strategy == "joint");
  CHECK(naive.loss == "l2");
  CHECK(naive.decoder == "self_attention");
  CHECK(naive.decoder_depth == 3);
  CHECK(naive.reg_weight == 0.0);

  RunConfig c3 = resolve_preset("challenge3-optimal");
  CHECK(c3.mask_ratio == 0.90);
  CHECK(c3.grid == "noncontiguous");
  CHECK(c3.reg_weight == 0.1);
  CHECK(c3.target_strategy == "momentum");
  CHECK(c3.loss == "patchdisc");

  RunConfig full = resolve_preset("full");
  CHECK(full.decoder == "cross_attention");
  CHECK(full.visual_cues);
  CHECK(full.use_projector);
  CHECK(full.mask_ratio == 0.90);
  CHECK(full.grid == "noncontiguous");
  CHECK(full.reg_weight == 0.1);

  CHECK(resolve_preset("+patchdisc").loss == "patchdisc");
  CHECK_THROWS_WITH_AS(resolve_preset("bogus"), doctest::Contains("momentum"), ConfigError);
}

TEST_CASE("overrides change exactly the named fields") {
  RunConfig base = resolve_preset("naive");
  RunConfig changed = base;
  apply_override(changed, "mask_ratio=0.9");
  apply_override(changed, "seed=99");

  std::istringstream a(serialize_config(base)), b(serialize_config(changed));
  std::string la, lb;
  std::size_t diffs = 0;
  while (std::getline(a, la) && std::getline(b, lb)) {
    if (la != lb) {
      ++diffs;
      const bool expected = lb.find("mask_ratio") == 0 || lb.find("seed") == 0;
      CHECK(expected);
    }
  }
  CHECK(diffs == 2);
  CHECK_THROWS_WITH_AS(apply_override(changed, "bogus_key=1"), doctest::Contains("bogus_key"),
                       ConfigError);
}

TEST_CASE("trainer validates configs") {
  RunConfig cfg = tiny_run_config();
  cfg.mask_ratio = 1.5;
  CHECK_THROWS_WITH_AS(Trainer(cfg, Dataset{}), doctest::Contains("mask_ratio"), ConfigError);

  cfg = tiny_run_config();
  cfg.warmup_epochs = cfg.epochs;
  CHECK_THROWS_AS(Trainer(cfg, Dataset{}), ConfigError);
}

TEST_CASE("momentum ramp runs from the base to one") {
  RunConfig cfg = tiny_run_config();
  Trainer trainer(cfg, open_dataset(cfg));
  CHECK(trainer.ema_momentum_at(0) == doctest::Approx(cfg.momentum).epsilon(1e-12));
  CHECK(trainer.ema_momentum_at(trainer.total_steps()) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(trainer.ema_momentum_at(trainer.total_steps() / 2) > cfg.momentum);
}
