#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <numeric>

#include "lmim/model.hpp"

using namespace lmim;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, T lo = T(-1), T hi = T(1)) {
  std::uniform_real_distribution<double> d{double(lo), double(hi)};
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t.at(i) = T(d(rng));
  return t;
}

ModelConfig tiny_config(DecoderKind kind = DecoderKind::self_attention) {
  ModelConfig mc;
  mc.dim = 16;
  mc.depth = 2;
  mc.heads = 4;
  mc.patch = 2;
  mc.channels = 3;
  mc.decoder_depth = 2;
  mc.decoder_kind = kind;
  mc.projector_hidden = 32;
  return mc;
}

template <typename T>
void zero_block_outputs(Block<T>& b) {
  b.attn.o.w = Tensor<T>(b.attn.o.w.shape());
  b.attn.o.b = Tensor<T>(b.attn.o.b.shape());
  b.fc2.w = Tensor<T>(b.fc2.w.shape());
  b.fc2.b = Tensor<T>(b.fc2.b.shape());
}

std::vector<GridPos> grid_positions(int rows, int cols) {
  std::vector<GridPos> ps;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) ps.push_back({r, c});
  return ps;
}

}  // namespace

TEST_CASE("zero-initialized block outputs leave encode at patch_embed + pos") {
  ModelConfig mc = tiny_config();
  mc.depth = 1;
  Rng rng(4);
  EncoderParams<double> enc = make_encoder<double>(mc, rng);
  zero_block_outputs(enc.blocks[0]);

  Tensor<double> patches = random_tensor<double>({4, mc.patch_flat()}, rng);
  Tensor<double> pos = sincos_pos_embed<double>(grid_positions(2, 2), mc.dim);

  Tape<double> t;
  NodeId out = encode(t, enc, patches, pos);
  // manual patch_embed(x) + pos
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < mc.dim; ++c) {
      double v = enc.patch_embed.b.at(c);
      for (std::size_t k = 0; k < mc.patch_flat(); ++k)
        v += patches.at(r, k) * enc.patch_embed.w.at(k, c);
      v += pos.at(r, c);
      CHECK(t.value(out).at(r, c) == doctest::Approx(v).epsilon(1e-12));
    }
  }
}

TEST_CASE("encode is permutation equivariant") {
  ModelConfig mc = tiny_config();
  Rng rng(8);
  EncoderParams<double> enc = make_encoder<double>(mc, rng);
  const std::size_t n = 6;
  Tensor<double> patches = random_tensor<double>({n, mc.patch_flat()}, rng);
  Tensor<double> pos = sincos_pos_embed<double>(grid_positions(2, 3), mc.dim);

  std::vector<std::size_t> perm = {3, 0, 5, 1, 4, 2};
  Tensor<double> patches_p(patches.shape()), pos_p(pos.shape());
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < mc.patch_flat(); ++c) patches_p.at(r, c) = patches.at(perm[r], c);
    for (std::size_t c = 0; c < mc.dim; ++c) pos_p.at(r, c) = pos.at(perm[r], c);
  }

  Tape<double> t1, t2;
  const Tensor<double>& base = t1.value(encode(t1, enc, patches, pos));
  const Tensor<double>& permuted = t2.value(encode(t2, enc, patches_p, pos_p));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < mc.dim; ++c)
      CHECK(permuted.at(r, c) == doctest::Approx(base.at(perm[r], c)).epsilon(1e-6));
}

TEST_CASE("target_encode strategies") {
  ModelConfig mc = tiny_config();
  Rng rng(15);
  EncoderParams<float> online = make_encoder<float>(mc, rng);
  Tensor<float> patches = random_tensor<float>({5, mc.patch_flat()}, rng);
  Tensor<float> pos = sincos_pos_embed<float>(grid_positions(1, 5), mc.dim);

  SUBCASE("shared_stopgrad forwards with online weights, no gradient edges") {
    TargetEncoderState<float> st;
    st.strategy = TargetStrategy::shared_stopgrad;
    st.target_depth = mc.depth;
    Tensor<float> z_t = target_encode(st, online, patches, pos);

    Tape<float> t;
    const Tensor<float>& direct = t.value(encode(t, online, patches, pos));
    CHECK(z_t.vec() == direct.vec());

    // a loss through the detached targets reaches no parameter
    Tape<float> t2;
    t2.backward(t2.sum_all(t2.constant(z_t)));
    visit_encoder(online, "enc", [&](const std::string&, Tensor<float>& p) {
      Tensor<float> g = t2.grad_for(p);
      for (std::size_t i = 0; i < g.size(); ++i) CHECK(g.at(i) == 0.0f);
    });
  }

  SUBCASE("full-depth copy equals encode") {
    TargetEncoderState<float> st;
    st.strategy = TargetStrategy::momentum;
    st.target_depth = mc.depth;
    st.params = online;
    Tensor<float> z_t = target_encode(st, online, patches, pos);
    Tape<float> t;
    const Tensor<float>& direct = t.value(encode(t, online, patches, pos));
    for (std::size_t i = 0; i < z_t.size(); ++i)
      CHECK(double(z_t.at(i)) == doctest::Approx(double(direct.at(i))).epsilon(1e-12));
  }

  SUBCASE("depth 0 returns pixel targets through the patch embed") {
    TargetEncoderState<float> st;
    st.strategy = TargetStrategy::momentum;
    st.target_depth = 0;
    st.params = online;
    Tensor<float> z_t = target_encode(st, online, patches, pos);
    for (std::size_t r = 0; r < 5; ++r) {
      for (std::size_t c = 0; c < mc.dim; ++c) {
        float v = online.patch_embed.b.at(c);
        for (std::size_t k = 0; k < mc.patch_flat(); ++k)
          v += patches.at(r, k) * online.patch_embed.w.at(k, c);
        CHECK(z_t.at(r, c) == doctest::Approx(v).epsilon(1e-6));
      }
    }
  }

  SUBCASE("depth beyond encoder is a configuration error") {
    TargetEncoderState<float> st;
    st.strategy = TargetStrategy::momentum;
    st.target_depth = mc.depth + 1;
    st.params = online;
    CHECK_THROWS_AS((void)target_encode(st, online, patches, pos), ConfigError);
  }

  SUBCASE("joint strategy is rejected here") {
    TargetEncoderState<float> st;
    st.strategy = TargetStrategy::joint;
    CHECK_THROWS_AS((void)target_encode(st, online, patches, pos), ContractError);
  }
}

TEST_CASE("projector is row-local and zero final layer yields the bias") {
  ModelConfig mc = tiny_config();
  Rng rng(21);
  ProjectorParams<double> proj = make_projector<double>(mc, rng);
  Tensor<double> rows = random_tensor<double>({4, mc.dim}, rng);

  Tape<double> batch_t;
  const Tensor<double>& full = batch_t.value(project(batch_t, proj, batch_t.constant(rows)));
  for (std::size_t r = 0; r < 4; ++r) {
    Tensor<double> one(Shape{1, mc.dim});
    for (std::size_t c = 0; c < mc.dim; ++c) one.at(0, c) = rows.at(r, c);
    Tape<double> t;
    const Tensor<double>& single = t.value(project(t, proj, t.constant(one)));
    for (std::size_t c = 0; c < mc.dim; ++c)
      CHECK(single.at(0, c) == doctest::Approx(full.at(r, c)).epsilon(1e-12));
  }

  proj.l3.w = Tensor<double>(proj.l3.w.shape());
  std::uniform_real_distribution<double> d(-1, 1);
  for (std::size_t i = 0; i < proj.l3.b.size(); ++i) proj.l3.b.at(i) = d(rng);
  Tape<double> t;
  const Tensor<double>& out = t.value(project(t, proj, t.constant(rows)));
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < mc.dim; ++c)
      CHECK(out.at(r, c) == doctest::Approx(proj.l3.b.at(c)).epsilon(1e-12));
}

TEST_CASE("visual cue weights are convex and degenerate cases recover inputs") {
  const std::size_t d = 16;
  Tensor<double> pos_t = sincos_pos_embed<double>(grid_positions(2, 3), d);
  Tensor<double> pos_v = sincos_pos_embed<double>(grid_positions(3, 2), d);

  Tensor<double> w = visual_cue_weights(pos_t, pos_v);
  for (std::size_t r = 0; r < w.rows(); ++r) {
    double sum = 0;
    for (std::size_t c = 0; c < w.cols(); ++c) {
      CHECK(w.at(r, c) >= 0.0);
      sum += w.at(r, c);
    }
    CHECK(std::abs(sum - 1.0) <= 1e-6);
  }

  Rng rng(33);
  Tensor<double> mask_token = random_tensor<double>({d}, rng);

  SUBCASE("single visible latent is recovered exactly") {
    Tensor<double> pos_v1 = sincos_pos_embed<double>({{1, 1}}, d);
    Tensor<double> z1 = random_tensor<double>({1, d}, rng);
    Tape<double> t;
    NodeId m = init_mask_tokens(t, mask_token, pos_t, pos_v1, t.constant(z1));
    for (std::size_t r = 0; r < pos_t.rows(); ++r)
      for (std::size_t c = 0; c < d; ++c)
        CHECK(t.value(m).at(r, c) ==
              doctest::Approx(mask_token.at(c) + pos_t.at(r, c) + z1.at(0, c)).epsilon(1e-12));
  }

  SUBCASE("zero visible latents leave m + p_t") {
    Tensor<double> z0(Shape{pos_v.rows(), d});
    Tape<double> t;
    NodeId m = init_mask_tokens(t, mask_token, pos_t, pos_v, t.constant(z0));
    for (std::size_t r = 0; r < pos_t.rows(); ++r)
      for (std::size_t c = 0; c < d; ++c)
        CHECK(t.value(m).at(r, c) ==
              doctest::Approx(mask_token.at(c) + pos_t.at(r, c)).epsilon(1e-12));
  }

  SUBCASE("blend rows stay in the convex hull bounds of Z_V") {
    Tensor<double> z = random_tensor<double>({pos_v.rows(), d}, rng);
    Tape<double> t;
    NodeId blend = t.matmul(t.constant(visual_cue_weights(pos_t, pos_v)), t.constant(z));
    for (std::size_t c = 0; c < d; ++c) {
      double lo = 1e30, hi = -1e30;
      for (std::size_t r = 0; r < z.rows(); ++r) {
        lo = std::min(lo, z.at(r, c));
        hi = std::max(hi, z.at(r, c));
      }
      for (std::size_t r = 0; r < pos_t.rows(); ++r) {
        CHECK(t.value(blend).at(r, c) >= lo - 1e-9);
        CHECK(t.value(blend).at(r, c) <= hi + 1e-9);
      }
    }
  }
}

TEST_CASE("self-attention decoder shape contract and kind checks") {
  ModelConfig mc = tiny_config(DecoderKind::self_attention);
  Rng rng(44);
  DecoderParams<double> dec = make_decoder<double>(mc, rng);
  Tensor<double> pos_v = sincos_pos_embed<double>(grid_positions(1, 3), mc.dim);
  Tensor<double> pos_t = sincos_pos_embed<double>(grid_positions(2, 2), mc.dim);
  Tensor<double> z_v = random_tensor<double>({3, mc.dim}, rng);

  Tape<double> t;
  NodeId zhat = decode_self_attn(t, dec, t.constant(z_v), pos_v, pos_t);
  CHECK(t.value(zhat).rows() == 4);
  CHECK(t.value(zhat).cols() == mc.dim);

  CHECK_THROWS_AS(decode_cross_attn(t, dec, t.constant(z_v), pos_v, pos_t), ContractError);

  ModelConfig bad = mc;
  bad.decoder_depth = 0;
  CHECK_THROWS_AS(make_decoder<double>(bad, rng), ConfigError);
}

TEST_CASE("cross-attention decoder conditions on the context at every depth") {
  ModelConfig mc = tiny_config(DecoderKind::cross_attention);
  mc.decoder_depth = 3;
  Rng rng(55);
  DecoderParams<double> dec = make_decoder<double>(mc, rng);
  Tensor<double> pos_v = sincos_pos_embed<double>(grid_positions(1, 3), mc.dim);
  Tensor<double> pos_t = sincos_pos_embed<double>(grid_positions(2, 2), mc.dim);
  Tensor<double> z_v = random_tensor<double>({3, mc.dim}, rng);
  Tensor<double> z_zero(Shape{3, mc.dim});

  std::vector<Tensor<double>> probes_live, probes_zeroed;
  Tape<double> t1, t2;
  NodeId zv_node = t1.constant(z_v);
  decode_cross_attn(t1, dec, zv_node, pos_v, pos_t, &probes_live);
  decode_cross_attn(t2, dec, t2.constant(z_zero), pos_v, pos_t, &probes_zeroed);
  REQUIRE(probes_live.size() == 3);
  for (std::size_t layer = 0; layer < 3; ++layer) {
    double diff = 0;
    for (std::size_t i = 0; i < probes_live[layer].size(); ++i)
      diff = std::max(diff, std::abs(probes_live[layer].at(i) - probes_zeroed[layer].at(i)));
    CHECK(diff > 1e-8);
  }

  // the visible latents are never modified by decoding
  CHECK(t1.value(zv_node).vec() == z_v.vec());
}

TEST_CASE("cross decoder with zeroed blocks returns head(m + p_t)") {
  ModelConfig mc = tiny_config(DecoderKind::cross_attention);
  Rng rng(66);
  DecoderParams<double> dec = make_decoder<double>(mc, rng);
  for (CrossBlock<double>& b : dec.cross_blocks) {
    b.self_attn.o.w = Tensor<double>(b.self_attn.o.w.shape());
    b.self_attn.o.b = Tensor<double>(b.self_attn.o.b.shape());
    b.cross_attn.o.w = Tensor<double>(b.cross_attn.o.w.shape());
    b.cross_attn.o.b = Tensor<double>(b.cross_attn.o.b.shape());
    b.fc2.w = Tensor<double>(b.fc2.w.shape());
    b.fc2.b = Tensor<double>(b.fc2.b.shape());
  }
  Tensor<double> pos_v = sincos_pos_embed<double>(grid_positions(1, 2), mc.dim);
  Tensor<double> pos_t = sincos_pos_embed<double>(grid_positions(1, 3), mc.dim);
  Tensor<double> z_v(Shape{2, mc.dim});

  Tape<double> t;
  NodeId out = decode_cross_attn(t, dec, t.constant(z_v), pos_v, pos_t);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < mc.dim; ++c) {
      double v = dec.head.b.at(c);
      for (std::size_t k = 0; k < mc.dim; ++k)
        v += (dec.mask_token.at(k) + pos_t.at(r, k)) * dec.head.w.at(k, c);
      CHECK(t.value(out).at(r, c) == doctest::Approx(v).epsilon(1e-10));
    }
  }
}

TEST_CASE("ema_update endpoints and blend") {
  ModelConfig mc = tiny_config();
  Rng rng(77);
  EncoderParams<float> online = make_encoder<float>(mc, rng);

  TargetEncoderState<float> st;
  st.strategy = TargetStrategy::momentum;
  st.target_depth = mc.depth;
  st.params = make_encoder<float>(mc, rng);

  EncoderParams<float> before = st.params;
  ema_update(st, online, 1.0f);
  bool all_equal = true;
  visit_encoder(st.params, "a", [&](const std::string& n, Tensor<float>& p) {
    Tensor<float>* other = nullptr;
    visit_encoder(before, "a", [&](const std::string& n2, Tensor<float>& q) {
      if (n2 == n) other = &q;
    });
    all_equal = all_equal && (p.vec() == other->vec());
  });
  CHECK(all_equal);

  ema_update(st, online, 0.0f);
  bool copied = true;
  visit_encoder(st.params, "a", [&](const std::string& n, Tensor<float>& p) {
    Tensor<float>* other = nullptr;
    visit_encoder(online, "a", [&](const std::string& n2, Tensor<float>& q) {
      if (n2 == n) other = &q;
    });
    copied = copied && (p.vec() == other->vec());
  });
  CHECK(copied);

  // analytic midpoint: theta_bar = 0, theta = 2, mu = 0.5 -> 1
  visit_encoder(st.params, "a", [](const std::string&, Tensor<float>& p) {
    std::fill(p.vec().begin(), p.vec().end(), 0.0f);
  });
  EncoderParams<float> twos = online;
  visit_encoder(twos, "a", [](const std::string&, Tensor<float>& p) {
    std::fill(p.vec().begin(), p.vec().end(), 2.0f);
  });
  ema_update(st, twos, 0.5f);
  visit_encoder(st.params, "a", [](const std::string&, Tensor<float>& p) {
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(p.at(i) == 1.0f);
  });

  st.strategy = TargetStrategy::shared_stopgrad;
  CHECK_THROWS_AS(ema_update(st, online, 0.5f), ContractError);
}

TEST_CASE("parameter count formula matches traversal") {
  for (DecoderKind kind : {DecoderKind::self_attention, DecoderKind::cross_attention}) {
    for (bool proj : {false, true}) {
      ModelConfig mc = tiny_config(kind);
      mc.use_projector = proj;
      Rng rng(88);
      LatentMimModel<float> model = make_model<float>(mc, rng);
      std::size_t counted = 0;
      visit_model(model, [&](const std::string&, Tensor<float>& p) { counted += p.size(); });
      CHECK(counted == model_param_count(mc));
    }
  }
}

TEST_CASE("model config invariants") {
  ModelConfig mc = tiny_config();
  mc.heads = 3;  // 16 % 3 != 0
  CHECK_THROWS_AS(mc.validate(), ConfigError);
  mc = tiny_config();
  mc.depth = 0;
  CHECK_THROWS_AS(mc.validate(), ConfigError);
}
