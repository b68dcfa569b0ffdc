#include "lmim/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

namespace lmim {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct Entry {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename T>
T parse_number(const std::string& key, const std::string& v);

template <>
double parse_number<double>(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double r;
  try {
    r = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': bad number '" + v + "'");
  }
  if (pos != v.size()) throw ConfigError("config key '" + key + "': bad number '" + v + "'");
  return r;
}

template <>
std::uint64_t parse_number<std::uint64_t>(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long r;
  try {
    r = std::stoull(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': bad integer '" + v + "'");
  }
  if (pos != v.size() || v[0] == '-')
    throw ConfigError("config key '" + key + "': bad integer '" + v + "'");
  return r;
}

template <>
std::int64_t parse_number<std::int64_t>(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  long long r;
  try {
    r = std::stoll(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': bad integer '" + v + "'");
  }
  if (pos != v.size()) throw ConfigError("config key '" + key + "': bad integer '" + v + "'");
  return r;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': bad boolean '" + v + "'");
}

#define STR_FIELD(name) \
  Entry{#name, [](const RunConfig& c) { return c.name; }, \
        [](RunConfig& c, const std::string& v) { c.name = v; }}
#define U64_FIELD(name) \
  Entry{#name, [](const RunConfig& c) { return std::to_string(c.name); }, \
        [](RunConfig& c, const std::string& v) { c.name = parse_number<std::uint64_t>(#name, v); }}
#define I64_FIELD(name) \
  Entry{#name, [](const RunConfig& c) { return std::to_string(c.name); }, \
        [](RunConfig& c, const std::string& v) { c.name = parse_number<std::int64_t>(#name, v); }}
#define F64_FIELD(name) \
  Entry{#name, [](const RunConfig& c) { return fmt_double(c.name); }, \
        [](RunConfig& c, const std::string& v) { c.name = parse_number<double>(#name, v); }}
#define BOOL_FIELD(name) \
  Entry{#name, [](const RunConfig& c) { return std::string(c.name ? "true" : "false"); }, \
        [](RunConfig& c, const std::string& v) { c.name = parse_bool(#name, v); }}

const std::vector<Entry>& registry() {
  static const std::vector<Entry> entries = {
      STR_FIELD(dataset),
      U64_FIELD(synth_classes),
      U64_FIELD(synth_count),
      U64_FIELD(synth_size),
      U64_FIELD(synth_seed),
      U64_FIELD(dim),
      U64_FIELD(depth),
      U64_FIELD(heads),
      U64_FIELD(patch_size),
      U64_FIELD(grid_count),
      STR_FIELD(decoder),
      U64_FIELD(decoder_depth),
      BOOL_FIELD(visual_cues),
      BOOL_FIELD(use_projector),
      U64_FIELD(projector_hidden),
      STR_FIELD(target_strategy),
      I64_FIELD(target_depth),
      F64_FIELD(momentum),
      F64_FIELD(mask_ratio),
      STR_FIELD(grid),
      U64_FIELD(gap),
      STR_FIELD(loss),
      F64_FIELD(huber_delta),
      F64_FIELD(temperature),
      F64_FIELD(reg_weight),
      F64_FIELD(gamma_start),
      F64_FIELD(gamma_end),
      STR_FIELD(infonce_sign),
      U64_FIELD(epochs),
      U64_FIELD(warmup_epochs),
      U64_FIELD(batch_size),
      F64_FIELD(base_lr),
      F64_FIELD(weight_decay),
      F64_FIELD(beta1),
      F64_FIELD(beta2),
      F64_FIELD(adam_eps),
      F64_FIELD(min_crop_area),
      U64_FIELD(seed),
      U64_FIELD(save_every_epochs),
      STR_FIELD(eval_pooling),
      U64_FIELD(topk_k),
  };
  return entries;
}

const Entry& find_entry(const std::string& key) {
  for (const Entry& e : registry())
    if (key == e.key) return e;
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

ModelConfig RunConfig::model_config() const {
  ModelConfig m;
  m.dim = dim;
  m.depth = depth;
  m.heads = heads;
  m.patch = patch_size;
  m.channels = 3;
  m.decoder_depth = decoder_depth;
  if (decoder == "self_attention") m.decoder_kind = DecoderKind::self_attention;
  else if (decoder == "cross_attention") m.decoder_kind = DecoderKind::cross_attention;
  else throw ConfigError("config key 'decoder': unknown value '" + decoder + "'");
  m.visual_cues = visual_cues;
  m.use_projector = use_projector;
  m.projector_hidden = projector_hidden;
  return m;
}

LossConfig RunConfig::loss_config() const {
  LossConfig l;
  if (loss == "l2") l.kind = LossKind::L2;
  else if (loss == "l1") l.kind = LossKind::L1;
  else if (loss == "huber") l.kind = LossKind::Huber;
  else if (loss == "patchdisc") l.kind = LossKind::PatchDisc;
  else throw ConfigError("config key 'loss': unknown value '" + loss + "'");
  l.huber_delta = huber_delta;
  l.temperature = temperature;
  l.reg_weight = reg_weight;
  l.gamma_start = gamma_start;
  l.gamma_end = gamma_end;
  if (infonce_sign == "paper") l.infonce_sign = InfoNceSign::paper;
  else if (infonce_sign == "conventional") l.infonce_sign = InfoNceSign::conventional;
  else throw ConfigError("config key 'infonce_sign': unknown value '" + infonce_sign + "'");
  return l;
}

TargetStrategy RunConfig::strategy() const {
  if (target_strategy == "joint") return TargetStrategy::joint;
  if (target_strategy == "standalone") return TargetStrategy::standalone;
  if (target_strategy == "shared_stopgrad") return TargetStrategy::shared_stopgrad;
  if (target_strategy == "momentum") return TargetStrategy::momentum;
  throw ConfigError("config key 'target_strategy': unknown value '" + target_strategy + "'");
}

std::size_t RunConfig::resolved_target_depth() const {
  if (target_depth < 0) return depth;
  return std::size_t(target_depth);
}

bool RunConfig::noncontiguous() const {
  if (grid == "contiguous") return false;
  if (grid == "noncontiguous") return true;
  throw ConfigError("config key 'grid': unknown value '" + grid + "'");
}

std::size_t RunConfig::canvas_side() const {
  return grid_count * (patch_size + (noncontiguous() ? gap : 0));
}

void RunConfig::validate() const {
  model_config().validate();
  loss_config().validate();
  (void)strategy();
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0))
    throw ConfigError("config key 'mask_ratio': must be in (0,1), got " + fmt_double(mask_ratio));
  if (resolved_target_depth() > depth)
    throw ConfigError("config key 'target_depth': exceeds encoder depth");
  if (momentum < 0.0 || momentum > 1.0)
    throw ConfigError("config key 'momentum': must be in [0,1]");
  if (epochs == 0 || warmup_epochs >= epochs)
    throw ConfigError("config key 'warmup_epochs': must be < epochs");
  if (batch_size == 0) throw ConfigError("config key 'batch_size': must be >= 1");
  if (noncontiguous() && gap == 0)
    throw ConfigError("config key 'gap': non-contiguous grid needs gap >= 1");
  if (eval_pooling != "mean" && eval_pooling != "topk")
    throw ConfigError("config key 'eval_pooling': unknown value '" + eval_pooling + "'");
  if (dataset.empty()) throw ConfigError("config key 'dataset': empty");
  if (!(min_crop_area > 0.0 && min_crop_area <= 1.0))
    throw ConfigError("config key 'min_crop_area': must be in (0,1]");
  if (grid_count < 2) throw ConfigError("config key 'grid_count': must be >= 2");
}

RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = trim(line);
    if (s.empty() || s[0] == '#') continue;
    std::size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value, got '" +
                        s + "'");
    std::string key = trim(s.substr(0, eq));
    std::string value = trim(s.substr(eq + 1));
    find_entry(key).set(cfg, value);
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open config file " + file.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

std::string serialize_config(const RunConfig& cfg) {
  std::ostringstream out;
  for (const Entry& e : registry()) out << e.key << " = " << e.get(cfg) << "\n";
  return out.str();
}

void apply_override(RunConfig& cfg, const std::string& kv) {
  std::size_t eq = kv.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override '" + kv + "': expected key=value");
  std::string key = trim(kv.substr(0, eq));
  std::string value = trim(kv.substr(eq + 1));
  find_entry(key).set(cfg, value);
}

std::uint64_t fnv1a64(const void* data, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace lmim
