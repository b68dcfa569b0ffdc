#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "lmim/checkpoint.hpp"
#include "lmim/config.hpp"
#include "lmim/trainer.hpp"

using namespace lmim;
namespace fs = std::filesystem;

namespace {

fs::path scratch_file(const char* name) { return fs::temp_directory_path() / name; }

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
}

Checkpoint sample_checkpoint() {
  Checkpoint ck;
  ck.step = 42;
  ck.config_digest = 0xDEADBEEF12345678ull;
  Tensor<float> a({2, 3}, {1.5f, -2.25f, 0.0f, 4.0f, 1e-20f, -0.0f});
  Tensor<double> b({2}, {3.141592653589793, -1e300});
  ck.add("weights/a", a);
  ck.add("weights/b", b);
  ck.add_i64("labels", {7, -9, 0});
  ck.add_bytes("note", "hello\0world");
  return ck;
}

}  // namespace

TEST_CASE("checkpoint round-trips byte-identically") {
  const fs::path f1 = scratch_file("lmim_ck1.lmim");
  const fs::path f2 = scratch_file("lmim_ck2.lmim");
  Checkpoint ck = sample_checkpoint();
  save_checkpoint(f1, ck);
  Checkpoint loaded = load_checkpoint(f1);
  CHECK(loaded.step == ck.step);
  CHECK(loaded.config_digest == ck.config_digest);
  CHECK(loaded.entries.size() == ck.entries.size());
  CHECK(loaded.tensor_f32("weights/a").vec() == ck.tensor_f32("weights/a").vec());
  CHECK(loaded.i64("labels") == std::vector<std::int64_t>{7, -9, 0});

  save_checkpoint(f2, loaded);
  CHECK(read_bytes(f1) == read_bytes(f2));
  fs::remove(f1);
  fs::remove(f2);
}

TEST_CASE("corrupted payload fails the checksum") {
  const fs::path f = scratch_file("lmim_ck_corrupt.lmim");
  save_checkpoint(f, sample_checkpoint());
  auto bytes = read_bytes(f);
  bytes[bytes.size() / 2] ^= 0x40;
  {
    std::ofstream out(f, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), long(bytes.size()));
  }
  CHECK_THROWS_WITH_AS(load_checkpoint(f), doctest::Contains("checksum"), ContractError);
  fs::remove(f);
}

TEST_CASE("bad magic and duplicate names are rejected") {
  const fs::path f = scratch_file("lmim_ck_magic.lmim");
  {
    std::ofstream out(f, std::ios::binary);
    out << "NOPEnope this is not a checkpoint at all, padding padding";
  }
  CHECK_THROWS_AS(load_checkpoint(f), ContractError);
  fs::remove(f);

  Checkpoint ck;
  Tensor<float> t(Shape{1});
  ck.add("x", t);
  CHECK_THROWS_AS(ck.add("x", t), ContractError);
}

TEST_CASE("config serialization is a fixed point") {
  RunConfig cfg = resolve_preset("full");
  cfg.base_lr = 0.123456789123456789;
  cfg.mask_ratio = 1.0 / 3.0;
  const std::string s1 = serialize_config(cfg);
  RunConfig cfg2 = parse_config_text(s1);
  const std::string s2 = serialize_config(cfg2);
  CHECK(s1 == s2);
  CHECK(config_digest(cfg) == config_digest(cfg2));
}

TEST_CASE("config parser rejects unknown keys and bad values, allows comments") {
  CHECK_THROWS_WITH_AS(parse_config_text("no_such_key = 3\n"), doctest::Contains("no_such_key"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text("epochs = banana\n"), doctest::Contains("epochs"),
                       ConfigError);
  RunConfig cfg = parse_config_text("# comment line\n\n  seed = 17 \nepochs = 9\n");
  CHECK(cfg.seed == 17);
  CHECK(cfg.epochs == 9);

  RunConfig bad = parse_config_text("mask_ratio = 1.5\n");
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("mask_ratio"), ConfigError);
}

TEST_CASE("embedded config digest guards eval model reconstruction") {
  RunConfig cfg;
  cfg.synth_classes = 3;
  cfg.synth_count = 24;
  cfg.synth_size = 40;
  cfg.dim = 16;
  cfg.depth = 1;
  cfg.heads = 2;
  cfg.patch_size = 8;
  cfg.grid_count = 3;
  cfg.decoder_depth = 1;
  cfg.epochs = 2;
  cfg.warmup_epochs = 1;
  cfg.batch_size = 8;
  Trainer trainer(cfg, open_dataset(cfg));
  TrainState st = trainer.make_state();
  Checkpoint ck = trainer.make_checkpoint(st);

  RunConfig back = config_from_checkpoint(ck);
  CHECK(serialize_config(back) == serialize_config(cfg));

  Checkpoint tampered = ck;
  tampered.config_digest ^= 1;
  CHECK_THROWS_WITH_AS((void)config_from_checkpoint(tampered), doctest::Contains("digest"),
                       ContractError);
}

TEST_CASE("checkpointed model forwards bitwise equal to the in-memory model") {
  RunConfig cfg;
  cfg.synth_classes = 3;
  cfg.synth_count = 24;
  cfg.synth_size = 40;
  cfg.dim = 16;
  cfg.depth = 2;
  cfg.heads = 4;
  cfg.patch_size = 8;
  cfg.grid_count = 3;
  cfg.decoder_depth = 1;
  cfg.epochs = 2;
  cfg.warmup_epochs = 1;
  cfg.batch_size = 8;
  cfg.base_lr = 0.05;
  Trainer trainer(cfg, open_dataset(cfg));
  TrainState st = trainer.make_state();
  for (int i = 0; i < 2; ++i) trainer.train_step(st);

  const fs::path f = scratch_file("lmim_ck_fwd.lmim");
  save_checkpoint(f, trainer.make_checkpoint(st));
  Checkpoint ck = load_checkpoint(f);
  LatentMimModel<float> restored = model_from_checkpoint(ck, config_from_checkpoint(ck));

  Rng rng(5);
  std::uniform_real_distribution<float> d(0, 1);
  Tensor<float> patches(Shape{5, cfg.model_config().patch_flat()});
  for (std::size_t i = 0; i < patches.size(); ++i) patches.at(i) = d(rng);
  std::vector<GridPos> pos_list;
  for (int i = 0; i < 5; ++i) pos_list.push_back({0, i});
  Tensor<float> pos = sincos_pos_embed<float>(pos_list, cfg.dim);

  Tape<float> t1, t2;
  const Tensor<float>& a = t1.value(encode(t1, st.model.encoder, patches, pos));
  const Tensor<float>& b = t2.value(encode(t2, restored.encoder, patches, pos));
  CHECK(a.vec() == b.vec());
  fs::remove(f);
}
