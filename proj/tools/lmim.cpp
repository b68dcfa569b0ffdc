#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "lmim/eval.hpp"
#include "lmim/gradcheck.hpp"
#include "lmim/trainer.hpp"

namespace fs = std::filesystem;
using namespace lmim;

// Stable exit codes: 0 ok, 2 config, 3 training NaN, 4 checkpoint
// mismatch, 5 I/O.
namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNan = 3;
constexpr int kExitCheckpoint = 4;
constexpr int kExitIo = 5;

void apply_env_seed(RunConfig& cfg) {
  if (const char* env = std::getenv("LMIM_SEED")) {
    try {
      cfg.seed = std::stoull(env);
    } catch (const std::exception&) {
      throw ConfigError(std::string("LMIM_SEED: bad integer '") + env + "'");
    }
  }
}

Dataset open_eval_dataset(const std::string& arg, const RunConfig& cfg) {
  if (arg == "synthetic") return open_dataset(cfg);
  return load_dataset(arg);
}

Pooling pooling_of(const RunConfig& cfg) {
  return cfg.eval_pooling == "topk" ? Pooling::topk : Pooling::mean;
}

int cmd_pretrain(const std::string& config_path, const std::string& preset,
                 const std::vector<std::string>& overrides, const std::string& out,
                 const std::string& resume) {
  RunConfig cfg;
  if (!preset.empty() && !config_path.empty())
    throw ConfigError("give either a config file or --preset, not both");
  if (!preset.empty()) cfg = resolve_preset(preset);
  else if (!config_path.empty()) cfg = load_config(config_path);
  else throw ConfigError("pretrain needs a config file or --preset");
  for (const std::string& kv : overrides) apply_override(cfg, kv);
  apply_env_seed(cfg);
  cfg.validate();

  Trainer trainer(cfg, open_dataset(cfg));
  TrainState state =
      resume.empty() ? trainer.make_state()
                     : trainer.state_from_checkpoint(load_checkpoint(resume));
  Trainer::RunResult res = trainer.run(state, out);
  std::cout << "steps=" << res.last_step << "\n";
  std::cout << "metrics=" << (fs::path(out) / "metrics.csv").string() << "\n";
  if (res.nan_abort) {
    std::cout << "nan_abort=1\n";
    std::cerr << "training aborted: non-finite loss or gradient at step " << res.last_step
              << "\n";
    return kExitNan;
  }
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", res.last_metrics.loss);
  std::cout << "final_loss=" << buf << "\n";
  std::snprintf(buf, sizeof(buf), "%.6g", res.last_metrics.pooled_pair_cos);
  std::cout << "final_batch_pair_cos=" << buf << "\n";
  std::cout << "checkpoint=" << res.checkpoint.string() << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& dataset_arg,
             const std::string& protocol, const std::string& train_data, const std::string& out,
             std::size_t clusters, std::size_t probe_epochs, double probe_lr) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  RunConfig cfg = config_from_checkpoint(ck);
  LatentMimModel<float> model = model_from_checkpoint(ck, cfg);
  const std::size_t canvas = cfg.canvas_side();
  const Pooling pool = pooling_of(cfg);
  const std::size_t k = cfg.topk_k;

  Dataset test = open_eval_dataset(dataset_arg, cfg);
  if (!out.empty()) fs::create_directories(out);

  if (protocol == "collapse") {
    FeatureBank bank =
        build_feature_bank(model.encoder, cfg.patch_size, canvas, pool, k, test);
    std::printf("n=%zu\n", bank.size());
    std::printf("pooled_pair_cos=%.6f\n", pairwise_mean_cosine(bank));
    if (!out.empty()) save_feature_bank(fs::path(out) / "test_bank.lmim", bank);
    return 0;
  }
  if (protocol == "nn" || protocol == "probe") {
    if (train_data.empty())
      throw ConfigError("protocol '" + protocol + "' needs --train-data");
    Dataset train = open_eval_dataset(train_data, cfg);
    FeatureBank train_bank =
        build_feature_bank(model.encoder, cfg.patch_size, canvas, pool, k, train);
    FeatureBank test_bank =
        build_feature_bank(model.encoder, cfg.patch_size, canvas, pool, k, test);
    if (!out.empty()) {
      save_feature_bank(fs::path(out) / "train_bank.lmim", train_bank);
      save_feature_bank(fs::path(out) / "test_bank.lmim", test_bank);
    }
    std::printf("train_n=%zu\ntest_n=%zu\n", train_bank.size(), test_bank.size());
    if (protocol == "nn") {
      std::printf("nn_accuracy=%.6f\n", nn_accuracy(train_bank, test_bank));
    } else {
      std::printf("probe_accuracy=%.6f\n",
                  linear_probe(train_bank, test_bank, probe_epochs, probe_lr, cfg.seed));
    }
    return 0;
  }
  if (protocol == "segment") {
    const fs::path dir = out.empty() ? fs::path("segment_out") : fs::path(out);
    fs::create_directories(dir);
    const std::size_t g = cfg.grid_count;
    for (std::size_t i = 0; i < test.size(); ++i) {
      Tensor<float> z = patch_latents(model.encoder, cfg.patch_size, canvas, test.images[i]);
      SegmentationMap map = segment_image(z, clusters, g, g);
      const std::string stem = fs::path(test.names[i]).stem().string();
      write_segmentation_pgm(dir / (stem + "_seg.pgm"), map);
      write_segmentation_csv(dir / (stem + "_seg.csv"), map);
    }
    std::printf("images=%zu\nclusters=%zu\nout=%s\n", test.size(), clusters, dir.c_str());
    return 0;
  }
  throw ConfigError("unknown protocol '" + protocol + "' (nn, probe, collapse, segment)");
}

int cmd_gradcheck(double tolerance) {
  std::vector<GradCheckResult> results = run_gradcheck(tolerance);
  bool all_pass = true;
  double worst = 0;
  for (const GradCheckResult& r : results) {
    std::printf("op=%s max_rel_err=%.3e tol=%.1e status=%s\n", r.name.c_str(), r.max_rel_err,
                r.tol, r.pass ? "pass" : "FAIL");
    worst = std::max(worst, r.max_rel_err);
    all_pass = all_pass && r.pass;
  }
  std::printf("checks=%zu max_rel_err=%.3e result=%s\n", results.size(), worst,
              all_pass ? "pass" : "FAIL");
  return all_pass ? 0 : 1;
}

int cmd_synth(int classes, std::size_t count, std::uint64_t seed, const std::string& out,
              std::size_t size) {
  Dataset ds = make_synthetic_dataset(classes, count, size, seed);
  write_dataset(out, ds);
  std::printf("images=%zu\nclasses=%d\nout=%s\n", ds.size(), classes, out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"latent masked image modeling lab"};
  app.require_subcommand(1);

  auto* pre = app.add_subcommand("pretrain", "run a pretraining experiment");
  std::string config_path, preset, out_dir = "run_out", resume;
  std::vector<std::string> overrides;
  pre->add_option("config", config_path, "config file (key = value lines)");
  pre->add_option("--preset", preset, "challenge-ladder preset name");
  pre->add_option("--override", overrides, "key=value override, repeatable");
  pre->add_option("--out", out_dir, "output directory");
  pre->add_option("--resume", resume, "checkpoint to resume from");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ckpt, dataset_arg, protocol, train_data, eval_out;
  std::size_t clusters = 2, probe_epochs = 50;
  double probe_lr = 0.1;
  ev->add_option("checkpoint", ckpt)->required();
  ev->add_option("dataset", dataset_arg, "dataset dir or 'synthetic'")->required();
  ev->add_option("--protocol", protocol, "nn | probe | collapse | segment")->required();
  ev->add_option("--train-data", train_data, "train dataset for nn/probe");
  ev->add_option("--out", eval_out, "artifact directory");
  ev->add_option("--clusters", clusters, "cluster count for segment");
  ev->add_option("--probe-epochs", probe_epochs);
  ev->add_option("--probe-lr", probe_lr);

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  double tolerance = -1.0;
  gc->add_option("--tolerance", tolerance, "override every check's tolerance");

  auto* sy = app.add_subcommand("synth", "generate the synthetic dataset");
  int classes = 10;
  std::size_t count = 1000, size = 96;
  std::uint64_t seed = 7777;
  std::string synth_out;
  sy->add_option("--classes", classes)->required();
  sy->add_option("--count", count)->required();
  sy->add_option("--seed", seed);
  sy->add_option("--size", size);
  sy->add_option("--out", synth_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (pre->parsed()) return cmd_pretrain(config_path, preset, overrides, out_dir, resume);
    if (ev->parsed())
      return cmd_eval(ckpt, dataset_arg, protocol, train_data, eval_out, clusters, probe_epochs,
                      probe_lr);
    if (gc->parsed()) return cmd_gradcheck(tolerance);
    if (sy->parsed()) return cmd_synth(classes, count, seed, synth_out, size);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNan;
  } catch (const ContractError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitCheckpoint;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
