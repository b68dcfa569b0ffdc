#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "lmim/patching.hpp"
#include "lmim/tape.hpp"
#include "lmim/tensor.hpp"

namespace lmim {

enum class DecoderKind { self_attention, cross_attention };
enum class TargetStrategy { joint, standalone, shared_stopgrad, momentum };

inline const char* to_string(DecoderKind k) {
  return k == DecoderKind::self_attention ? "self_attention" : "cross_attention";
}
inline const char* to_string(TargetStrategy s) {
  switch (s) {
    case TargetStrategy::joint: return "joint";
    case TargetStrategy::standalone: return "standalone";
    case TargetStrategy::shared_stopgrad: return "shared_stopgrad";
    case TargetStrategy::momentum: return "momentum";
  }
  return "?";
}

// Shape-level description of the three networks. Width must divide by
// heads (attention) and by 4 (SinCos embedding).
struct ModelConfig {
  std::size_t dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t patch = 8;
  std::size_t channels = 3;
  std::size_t decoder_depth = 3;
  DecoderKind decoder_kind = DecoderKind::self_attention;
  bool visual_cues = false;
  bool use_projector = false;
  std::size_t projector_hidden = 0;  // 0 -> 64 * dim

  std::size_t patch_flat() const { return patch * patch * channels; }
  std::size_t projector_width() const { return projector_hidden ? projector_hidden : 64 * dim; }

  void validate() const {
    if (depth < 1 || decoder_depth < 1) throw ConfigError("model: depth must be >= 1");
    if (dim % heads != 0) throw ConfigError("model: dim must divide by heads");
    if (dim % 4 != 0) throw ConfigError("model: dim must divide by 4 for SinCos embeddings");
    if (patch == 0 || channels == 0) throw ConfigError("model: patch/channels must be positive");
  }
};

template <typename T>
struct Linear {
  Tensor<T> w;  // [in x out]
  Tensor<T> b;  // [out]
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
};

template <typename T>
struct AttnParams {
  Linear<T> q, k, v, o;
};

// Pre-LN transformer block: x + attn(LN(x)), then x + MLP(LN(x)).
template <typename T>
struct Block {
  LayerNormParams<T> ln1;
  AttnParams<T> attn;
  LayerNormParams<T> ln2;
  Linear<T> fc1, fc2;
};

template <typename T>
struct EncoderParams {
  Linear<T> patch_embed;
  std::vector<Block<T>> blocks;
  std::size_t dim = 0;
  std::size_t heads = 0;

  std::size_t depth() const { return blocks.size(); }
};

// Three affine layers with LayerNorm + GELU between them; in/out width d.
template <typename T>
struct ProjectorParams {
  Linear<T> l1, l2, l3;
  LayerNormParams<T> n1, n2;
};

// One cross-attention decoder stage: self-attention over the prediction
// stream, cross-attention into the visible context, then an MLP.
template <typename T>
struct CrossBlock {
  LayerNormParams<T> ln_self;
  AttnParams<T> self_attn;
  LayerNormParams<T> ln_q;
  AttnParams<T> cross_attn;
  LayerNormParams<T> ln_mlp;
  Linear<T> fc1, fc2;
};

template <typename T>
struct DecoderParams {
  DecoderKind kind = DecoderKind::self_attention;
  bool visual_cues = false;
  Tensor<T> mask_token;  // [d]
  std::vector<Block<T>> self_blocks;
  std::vector<CrossBlock<T>> cross_blocks;
  Linear<T> head;  // d -> d
  std::size_t dim = 0;
  std::size_t heads = 0;

  std::size_t depth() const {
    return kind == DecoderKind::self_attention ? self_blocks.size() : cross_blocks.size();
  }
};

template <typename T>
struct LatentMimModel {
  EncoderParams<T> encoder;
  std::optional<ProjectorParams<T>> projector;
  DecoderParams<T> decoder;
};

// Target-encoder bundle. Under shared_stopgrad the online weights are
// used directly (no storage here); standalone and momentum own a copy.
template <typename T>
struct TargetEncoderState {
  TargetStrategy strategy = TargetStrategy::momentum;
  EncoderParams<T> params;
  std::size_t target_depth = 0;
  T momentum = T(0.996);
};

// ---- initialization ----

template <typename T>
T truncated_normal(Rng& rng, T stddev) {
  std::normal_distribution<double> dist(0.0, double(stddev));
  double v;
  do {
    v = dist(rng);
  } while (std::abs(v) > 2.0 * double(stddev));
  return T(v);
}

template <typename T>
Tensor<T> init_weight(Rng& rng, Shape shape, T stddev = T(0.02)) {
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t.at(i) = truncated_normal(rng, stddev);
  return t;
}

template <typename T>
Linear<T> make_linear(Rng& rng, std::size_t in, std::size_t out) {
  return Linear<T>{init_weight<T>(rng, {in, out}), Tensor<T>(Shape{out})};
}

template <typename T>
LayerNormParams<T> make_layer_norm(std::size_t d) {
  return LayerNormParams<T>{Tensor<T>::full({d}, T(1)), Tensor<T>(Shape{d})};
}

template <typename T>
Block<T> make_block(Rng& rng, std::size_t d) {
  Block<T> b;
  b.ln1 = make_layer_norm<T>(d);
  b.attn = AttnParams<T>{make_linear<T>(rng, d, d), make_linear<T>(rng, d, d),
                         make_linear<T>(rng, d, d), make_linear<T>(rng, d, d)};
  b.ln2 = make_layer_norm<T>(d);
  b.fc1 = make_linear<T>(rng, d, 4 * d);
  b.fc2 = make_linear<T>(rng, 4 * d, d);
  return b;
}

template <typename T>
EncoderParams<T> make_encoder(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  EncoderParams<T> e;
  e.dim = cfg.dim;
  e.heads = cfg.heads;
  e.patch_embed = make_linear<T>(rng, cfg.patch_flat(), cfg.dim);
  for (std::size_t i = 0; i < cfg.depth; ++i) e.blocks.push_back(make_block<T>(rng, cfg.dim));
  return e;
}

template <typename T>
ProjectorParams<T> make_projector(const ModelConfig& cfg, Rng& rng) {
  const std::size_t d = cfg.dim, h = cfg.projector_width();
  ProjectorParams<T> p;
  p.l1 = make_linear<T>(rng, d, h);
  p.n1 = make_layer_norm<T>(h);
  p.l2 = make_linear<T>(rng, h, h);
  p.n2 = make_layer_norm<T>(h);
  p.l3 = make_linear<T>(rng, h, d);
  return p;
}

template <typename T>
CrossBlock<T> make_cross_block(Rng& rng, std::size_t d) {
  CrossBlock<T> b;
  b.ln_self = make_layer_norm<T>(d);
  b.self_attn = AttnParams<T>{make_linear<T>(rng, d, d), make_linear<T>(rng, d, d),
                              make_linear<T>(rng, d, d), make_linear<T>(rng, d, d)};
  b.ln_q = make_layer_norm<T>(d);
  b.cross_attn = AttnParams<T>{make_linear<T>(rng, d, d), make_linear<T>(rng, d, d),
                               make_linear<T>(rng, d, d), make_linear<T>(rng, d, d)};
  b.ln_mlp = make_layer_norm<T>(d);
  b.fc1 = make_linear<T>(rng, d, 4 * d);
  b.fc2 = make_linear<T>(rng, 4 * d, d);
  return b;
}

template <typename T>
DecoderParams<T> make_decoder(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  DecoderParams<T> dec;
  dec.kind = cfg.decoder_kind;
  dec.visual_cues = cfg.visual_cues;
  dec.dim = cfg.dim;
  dec.heads = cfg.heads;
  dec.mask_token = init_weight<T>(rng, {cfg.dim});
  if (cfg.decoder_kind == DecoderKind::self_attention) {
    for (std::size_t i = 0; i < cfg.decoder_depth; ++i)
      dec.self_blocks.push_back(make_block<T>(rng, cfg.dim));
  } else {
    for (std::size_t i = 0; i < cfg.decoder_depth; ++i)
      dec.cross_blocks.push_back(make_cross_block<T>(rng, cfg.dim));
  }
  dec.head = make_linear<T>(rng, cfg.dim, cfg.dim);
  return dec;
}

template <typename T>
LatentMimModel<T> make_model(const ModelConfig& cfg, Rng& rng) {
  LatentMimModel<T> m;
  m.encoder = make_encoder<T>(cfg, rng);
  if (cfg.use_projector) m.projector = make_projector<T>(cfg, rng);
  m.decoder = make_decoder<T>(cfg, rng);
  return m;
}

// ---- parameter traversal (deterministic order, stable names) ----

template <typename L, typename F>
void visit_linear(L& l, const std::string& p, F&& f) {
  f(p + ".w", l.w);
  f(p + ".b", l.b);
}

template <typename LN, typename F>
void visit_ln(LN& l, const std::string& p, F&& f) {
  f(p + ".g", l.gamma);
  f(p + ".b", l.beta);
}

template <typename B, typename F>
void visit_block(B& b, const std::string& p, F&& f) {
  visit_ln(b.ln1, p + ".ln1", f);
  visit_linear(b.attn.q, p + ".q", f);
  visit_linear(b.attn.k, p + ".k", f);
  visit_linear(b.attn.v, p + ".v", f);
  visit_linear(b.attn.o, p + ".o", f);
  visit_ln(b.ln2, p + ".ln2", f);
  visit_linear(b.fc1, p + ".fc1", f);
  visit_linear(b.fc2, p + ".fc2", f);
}

template <typename E, typename F>
void visit_encoder(E& e, const std::string& p, F&& f) {
  visit_linear(e.patch_embed, p + ".embed", f);
  for (std::size_t i = 0; i < e.blocks.size(); ++i)
    visit_block(e.blocks[i], p + ".blk" + std::to_string(i), f);
}

template <typename P, typename F>
void visit_projector(P& pr, const std::string& p, F&& f) {
  visit_linear(pr.l1, p + ".l1", f);
  visit_ln(pr.n1, p + ".n1", f);
  visit_linear(pr.l2, p + ".l2", f);
  visit_ln(pr.n2, p + ".n2", f);
  visit_linear(pr.l3, p + ".l3", f);
}

template <typename CB, typename F>
void visit_cross_block(CB& b, const std::string& p, F&& f) {
  visit_ln(b.ln_self, p + ".lns", f);
  visit_linear(b.self_attn.q, p + ".sq", f);
  visit_linear(b.self_attn.k, p + ".sk", f);
  visit_linear(b.self_attn.v, p + ".sv", f);
  visit_linear(b.self_attn.o, p + ".so", f);
  visit_ln(b.ln_q, p + ".lnq", f);
  visit_linear(b.cross_attn.q, p + ".cq", f);
  visit_linear(b.cross_attn.k, p + ".ck", f);
  visit_linear(b.cross_attn.v, p + ".cv", f);
  visit_linear(b.cross_attn.o, p + ".co", f);
  visit_ln(b.ln_mlp, p + ".lnm", f);
  visit_linear(b.fc1, p + ".fc1", f);
  visit_linear(b.fc2, p + ".fc2", f);
}

template <typename D, typename F>
void visit_decoder(D& d, const std::string& p, F&& f) {
  f(p + ".mask_token", d.mask_token);
  for (std::size_t i = 0; i < d.self_blocks.size(); ++i)
    visit_block(d.self_blocks[i], p + ".blk" + std::to_string(i), f);
  for (std::size_t i = 0; i < d.cross_blocks.size(); ++i)
    visit_cross_block(d.cross_blocks[i], p + ".blk" + std::to_string(i), f);
  visit_linear(d.head, p + ".head", f);
}

template <typename M, typename F>
void visit_model(M& m, F&& f) {
  visit_encoder(m.encoder, "enc", f);
  if (m.projector) visit_projector(*m.projector, "proj", f);
  visit_decoder(m.decoder, "dec", f);
}

// Closed-form parameter count; must agree with the traversal exactly.
inline std::size_t encoder_param_count(const ModelConfig& cfg) {
  const std::size_t d = cfg.dim;
  const std::size_t block = 12 * d * d + 13 * d;
  return cfg.patch_flat() * d + d + cfg.depth * block;
}

inline std::size_t model_param_count(const ModelConfig& cfg) {
  const std::size_t d = cfg.dim;
  std::size_t n = encoder_param_count(cfg);
  if (cfg.use_projector) {
    const std::size_t h = cfg.projector_width();
    n += (d * h + h) + 2 * h + (h * h + h) + 2 * h + (h * d + d);
  }
  n += d;  // mask token
  const std::size_t self_block = 12 * d * d + 13 * d;
  const std::size_t cross_block = 16 * d * d + 19 * d;
  n += cfg.decoder_depth *
       (cfg.decoder_kind == DecoderKind::self_attention ? self_block : cross_block);
  n += d * d + d;  // head
  return n;
}

// ---- forward passes (tape-building) ----

// Raw patches live in [0,1]; the fixed affine map puts patch content on
// the same scale as the SinCos embeddings before the patch embed.
template <typename T>
Tensor<T> standardize_patches(Tensor<T> patches) {
  for (std::size_t i = 0; i < patches.size(); ++i)
    patches.at(i) = (patches.at(i) - T(0.5)) / T(0.25);
  return patches;
}

template <typename T>
NodeId linear_fwd(Tape<T>& t, const Linear<T>& l, NodeId x) {
  return t.add_rowvec(t.matmul(x, t.param(l.w)), t.param(l.b));
}

template <typename T>
NodeId layer_norm_fwd(Tape<T>& t, const LayerNormParams<T>& ln, NodeId x,
                      T eps = T(1e-5)) {
  return t.layer_norm(x, t.param(ln.gamma), t.param(ln.beta), eps);
}

// Multi-head scaled dot-product attention; kv_in == q_in gives
// self-attention.
template <typename T>
NodeId attention_fwd(Tape<T>& t, const AttnParams<T>& a, NodeId q_in, NodeId kv_in,
                     std::size_t heads) {
  NodeId q = linear_fwd(t, a.q, q_in);
  NodeId k = linear_fwd(t, a.k, kv_in);
  NodeId v = linear_fwd(t, a.v, kv_in);
  const std::size_t d = t.value(q).cols();
  const std::size_t dh = d / heads;
  const T inv_scale = T(1) / std::sqrt(T(dh));
  std::vector<NodeId> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    NodeId qh = t.slice_cols(q, h * dh, (h + 1) * dh);
    NodeId kh = t.slice_cols(k, h * dh, (h + 1) * dh);
    NodeId vh = t.slice_cols(v, h * dh, (h + 1) * dh);
    NodeId scores = t.scale(t.matmul(qh, t.transpose(kh)), inv_scale);
    NodeId attn = t.softmax(scores, 1);
    outs.push_back(t.matmul(attn, vh));
  }
  return linear_fwd(t, a.o, t.concat_cols(outs));
}

template <typename T>
NodeId block_fwd(Tape<T>& t, const Block<T>& b, NodeId x, std::size_t heads) {
  NodeId n1 = layer_norm_fwd(t, b.ln1, x);
  x = t.add(x, attention_fwd(t, b.attn, n1, n1, heads));
  NodeId n2 = layer_norm_fwd(t, b.ln2, x);
  return t.add(x, linear_fwd(t, b.fc2, t.gelu(linear_fwd(t, b.fc1, n2))));
}

// Per-patch latents of the visible (or any) patch sequence. Positional
// embedding is added after the patch embed; sequence order is preserved.
template <typename T>
NodeId encode(Tape<T>& t, const EncoderParams<T>& enc, const Tensor<T>& patches,
              const Tensor<T>& pos) {
  NodeId x = linear_fwd(t, enc.patch_embed, t.constant(patches));
  x = t.add(x, t.constant(pos));
  for (const Block<T>& b : enc.blocks) x = block_fwd(t, b, x, enc.heads);
  return x;
}

// Detached target latents. Runs the first target_depth blocks on a local
// tape, so no gradient edge can reach any parameter. Depth 0 returns the
// patch values mapped through the (frozen) patch embed: pixel targets.
template <typename T>
Tensor<T> target_encode(const TargetEncoderState<T>& st, const EncoderParams<T>& online,
                        const Tensor<T>& patches, const Tensor<T>& pos) {
  if (st.strategy == TargetStrategy::joint)
    throw ContractError("target_encode: joint strategy encodes targets on the training tape");
  const EncoderParams<T>& enc =
      st.strategy == TargetStrategy::shared_stopgrad ? online : st.params;
  if (st.target_depth > enc.depth())
    throw ConfigError("target_encode: target_depth " + std::to_string(st.target_depth) +
                      " exceeds encoder depth " + std::to_string(enc.depth()));
  Tape<T> t;
  NodeId x = linear_fwd(t, enc.patch_embed, t.constant(patches));
  if (st.target_depth > 0) {
    x = t.add(x, t.constant(pos));
    for (std::size_t i = 0; i < st.target_depth; ++i)
      x = block_fwd(t, enc.blocks[i], x, enc.heads);
  }
  return t.value(x);
}

// Row-wise MLP head preparing visible latents for the decoder.
template <typename T>
NodeId project(Tape<T>& t, const ProjectorParams<T>& p, NodeId z) {
  NodeId x = t.gelu(layer_norm_fwd(t, p.n1, linear_fwd(t, p.l1, z)));
  x = t.gelu(layer_norm_fwd(t, p.n2, linear_fwd(t, p.l2, x)));
  return linear_fwd(t, p.l3, x);
}

// Softmax over the visible axis of P_T P_V^T / sqrt(d): each target row
// gets a convex weighting of visible patches by positional similarity.
template <typename T>
Tensor<T> visual_cue_weights(const Tensor<T>& pos_t, const Tensor<T>& pos_v) {
  if (pos_v.rows() == 0) throw ConfigError("visual_cue_weights: no visible patches");
  const std::size_t d = pos_t.cols();
  Tape<T> t;
  NodeId s = t.scale(t.matmul(t.constant(pos_t), t.transpose(t.constant(pos_v))),
                     T(1) / std::sqrt(T(d)));
  return t.value(t.softmax(s, 1));
}

// m_i = m + p_t + Softmax(P_T P_V^T) Z_V for every target location.
template <typename T>
NodeId init_mask_tokens(Tape<T>& t, const Tensor<T>& mask_token, const Tensor<T>& pos_t,
                        const Tensor<T>& pos_v, NodeId z_v) {
  Tensor<T> w = visual_cue_weights(pos_t, pos_v);
  NodeId blend = t.matmul(t.constant(std::move(w)), z_v);
  return t.add_rowvec(t.add(blend, t.constant(pos_t)), t.param(mask_token));
}

// Self-attention decoder: [Z_V + P_V ; m + P_T] through shared blocks,
// then the linear head over the target rows only.
template <typename T>
NodeId decode_self_attn(Tape<T>& t, const DecoderParams<T>& dec, NodeId z_v,
                        const Tensor<T>& pos_v, const Tensor<T>& pos_t) {
  if (dec.kind != DecoderKind::self_attention)
    throw ContractError("decode_self_attn: decoder kind is cross_attention");
  const std::size_t nv = t.value(z_v).rows();
  const std::size_t nt = pos_t.rows();
  NodeId vis = t.add(z_v, t.constant(pos_v));
  NodeId mt = t.add(t.broadcast_row(t.param(dec.mask_token), nt), t.constant(pos_t));
  NodeId x = t.concat_rows({vis, mt});
  for (const Block<T>& b : dec.self_blocks) x = block_fwd(t, b, x, dec.heads);
  return linear_fwd(t, dec.head, t.slice_rows(x, nv, nv + nt));
}

// Cross-attention decoder: the prediction stream alternates
// self-attention, cross-attention into the fixed visible context, and an
// MLP. The context itself is never written to.
template <typename T>
NodeId decode_cross_attn(Tape<T>& t, const DecoderParams<T>& dec, NodeId z_v,
                         const Tensor<T>& pos_v, const Tensor<T>& pos_t,
                         std::vector<Tensor<T>>* cross_probes = nullptr) {
  if (dec.kind != DecoderKind::cross_attention)
    throw ContractError("decode_cross_attn: decoder kind is self_attention");
  const std::size_t nt = pos_t.rows();
  NodeId ctx = t.add(z_v, t.constant(pos_v));
  NodeId x;
  if (dec.visual_cues) {
    x = init_mask_tokens(t, dec.mask_token, pos_t, pos_v, z_v);
  } else {
    x = t.add(t.broadcast_row(t.param(dec.mask_token), nt), t.constant(pos_t));
  }
  for (const CrossBlock<T>& b : dec.cross_blocks) {
    NodeId ns = layer_norm_fwd(t, b.ln_self, x);
    x = t.add(x, attention_fwd(t, b.self_attn, ns, ns, dec.heads));
    NodeId nq = layer_norm_fwd(t, b.ln_q, x);
    x = t.add(x, attention_fwd(t, b.cross_attn, nq, ctx, dec.heads));
    if (cross_probes) cross_probes->push_back(t.value(x));
    NodeId nm = layer_norm_fwd(t, b.ln_mlp, x);
    x = t.add(x, linear_fwd(t, b.fc2, t.gelu(linear_fwd(t, b.fc1, nm))));
  }
  return linear_fwd(t, dec.head, x);
}

template <typename T>
NodeId decode(Tape<T>& t, const DecoderParams<T>& dec, NodeId z_v, const Tensor<T>& pos_v,
              const Tensor<T>& pos_t) {
  return dec.kind == DecoderKind::self_attention
             ? decode_self_attn(t, dec, z_v, pos_v, pos_t)
             : decode_cross_attn(t, dec, z_v, pos_v, pos_t);
}

// theta_bar <- mu * theta_bar + (1 - mu) * theta. The mu = 0 and mu = 1
// endpoints are exact copies/no-ops so the bitwise contracts hold.
template <typename T>
void ema_update(TargetEncoderState<T>& st, const EncoderParams<T>& online, T mu) {
  if (st.strategy != TargetStrategy::momentum)
    throw ContractError("ema_update: strategy is not momentum");
  if (mu < T(0) || mu > T(1)) throw ContractError("ema_update: momentum outside [0,1]");
  std::vector<Tensor<T>*> mine;
  std::vector<const Tensor<T>*> theirs;
  visit_encoder(st.params, "t", [&](const std::string&, Tensor<T>& v) { mine.push_back(&v); });
  visit_encoder(online, "t", [&](const std::string&, const Tensor<T>& v) { theirs.push_back(&v); });
  if (mine.size() != theirs.size()) throw ShapeError("ema_update: parameter sets differ");
  for (std::size_t i = 0; i < mine.size(); ++i) {
    check_same_shape(*mine[i], *theirs[i], "ema_update");
    if (mu == T(1)) continue;
    if (mu == T(0)) {
      *mine[i] = *theirs[i];
      continue;
    }
    for (std::size_t j = 0; j < mine[i]->size(); ++j)
      mine[i]->at(j) = mu * mine[i]->at(j) + (T(1) - mu) * theirs[i]->at(j);
  }
}

}  // namespace lmim
