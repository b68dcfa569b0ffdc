#include "lmim/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "lmim/config.hpp"

namespace lmim {

namespace {

constexpr char kMagic[4] = {'L', 'M', 'I', 'M'};

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(std::uint8_t(v));
  out.push_back(std::uint8_t(v >> 8));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}

std::uint16_t get_u16(const std::uint8_t* p) { return std::uint16_t(p[0] | (p[1] << 8)); }

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
  return v;
}

std::size_t dtype_size(Dtype d) {
  switch (d) {
    case Dtype::f32: return 4;
    case Dtype::f64: return 8;
    case Dtype::i64: return 8;
    case Dtype::u8: return 1;
  }
  return 1;
}

template <typename T>
std::vector<std::uint8_t> to_le_bytes(const Tensor<T>& t) {
  std::vector<std::uint8_t> out;
  out.reserve(t.size() * sizeof(T));
  for (std::size_t i = 0; i < t.size(); ++i) {
    if constexpr (sizeof(T) == 4) {
      auto bits = std::bit_cast<std::uint32_t>(t.at(i));
      for (int b = 0; b < 4; ++b) out.push_back(std::uint8_t(bits >> (8 * b)));
    } else {
      auto bits = std::bit_cast<std::uint64_t>(t.at(i));
      for (int b = 0; b < 8; ++b) out.push_back(std::uint8_t(bits >> (8 * b)));
    }
  }
  return out;
}

}  // namespace

void Checkpoint::add(const std::string& name, const Tensor<float>& t) {
  if (has(name)) throw ContractError("checkpoint: duplicate tensor name '" + name + "'");
  entries.push_back({name, Dtype::f32, t.shape(), to_le_bytes(t)});
}

void Checkpoint::add(const std::string& name, const Tensor<double>& t) {
  if (has(name)) throw ContractError("checkpoint: duplicate tensor name '" + name + "'");
  entries.push_back({name, Dtype::f64, t.shape(), to_le_bytes(t)});
}

void Checkpoint::add_i64(const std::string& name, const std::vector<std::int64_t>& v) {
  if (has(name)) throw ContractError("checkpoint: duplicate tensor name '" + name + "'");
  std::vector<std::uint8_t> payload;
  payload.reserve(v.size() * 8);
  for (std::int64_t x : v) put_u64(payload, std::uint64_t(x));
  entries.push_back({name, Dtype::i64, Shape{v.size()}, std::move(payload)});
}

void Checkpoint::add_bytes(const std::string& name, const std::string& bytes) {
  if (has(name)) throw ContractError("checkpoint: duplicate tensor name '" + name + "'");
  std::vector<std::uint8_t> payload(bytes.begin(), bytes.end());
  entries.push_back({name, Dtype::u8, Shape{bytes.size()}, std::move(payload)});
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return true;
  return false;
}

const CheckpointEntry& Checkpoint::entry(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return e;
  throw ContractError("checkpoint: missing tensor '" + name + "'");
}

Tensor<float> Checkpoint::tensor_f32(const std::string& name) const {
  const CheckpointEntry& e = entry(name);
  if (e.dtype != Dtype::f32)
    throw ContractError("checkpoint: tensor '" + name + "' is not f32");
  Tensor<float> t(e.shape);
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= std::uint32_t(e.payload[i * 4 + b]) << (8 * b);
    t.at(i) = std::bit_cast<float>(bits);
  }
  return t;
}

std::vector<std::int64_t> Checkpoint::i64(const std::string& name) const {
  const CheckpointEntry& e = entry(name);
  if (e.dtype != Dtype::i64)
    throw ContractError("checkpoint: tensor '" + name + "' is not i64");
  std::vector<std::int64_t> v(e.payload.size() / 8);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::int64_t(get_u64(&e.payload[i * 8]));
  return v;
}

std::string Checkpoint::bytes(const std::string& name) const {
  const CheckpointEntry& e = entry(name);
  if (e.dtype != Dtype::u8)
    throw ContractError("checkpoint: tensor '" + name + "' is not u8");
  return std::string(e.payload.begin(), e.payload.end());
}

void save_checkpoint(const std::filesystem::path& file, const Checkpoint& ck) {
  std::vector<std::uint8_t> body;
  put_u64(body, ck.entries.size());
  for (const CheckpointEntry& e : ck.entries) {
    if (e.name.size() > 0xffff) throw ContractError("checkpoint: tensor name too long");
    put_u16(body, std::uint16_t(e.name.size()));
    body.insert(body.end(), e.name.begin(), e.name.end());
    body.push_back(std::uint8_t(e.dtype));
    body.push_back(std::uint8_t(e.shape.size()));
    for (std::size_t d : e.shape) put_u64(body, d);
    if (e.payload.size() != shape_numel(e.shape) * dtype_size(e.dtype))
      throw ContractError("checkpoint: payload size mismatch for '" + e.name + "'");
    put_u64(body, e.payload.size());
    body.insert(body.end(), e.payload.begin(), e.payload.end());
  }

  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + file.string());
  std::vector<std::uint8_t> header;
  header.insert(header.end(), kMagic, kMagic + 4);
  put_u64(header, ck.version);
  put_u64(header, ck.config_digest);
  put_u64(header, ck.step);
  out.write(reinterpret_cast<const char*>(header.data()), long(header.size()));
  out.write(reinterpret_cast<const char*>(body.data()), long(body.size()));
  std::vector<std::uint8_t> trailer;
  put_u64(trailer, fnv1a64(body.data(), body.size()));
  out.write(reinterpret_cast<const char*>(trailer.data()), long(trailer.size()));
  if (!out) throw IoError("short write to checkpoint " + file.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + file.string());
  std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
  const std::size_t header_len = 4 + 8 + 8 + 8;
  if (raw.size() < header_len + 8 || std::memcmp(raw.data(), kMagic, 4) != 0)
    throw ContractError("checkpoint " + file.string() + ": bad magic or truncated file");
  Checkpoint ck;
  ck.version = std::uint32_t(get_u64(&raw[4]));
  if (ck.version != 1)
    throw ContractError("checkpoint " + file.string() + ": unsupported version " +
                        std::to_string(ck.version));
  ck.config_digest = get_u64(&raw[12]);
  ck.step = get_u64(&raw[20]);

  const std::uint8_t* body = raw.data() + header_len;
  const std::size_t body_len = raw.size() - header_len - 8;
  const std::uint64_t stored_sum = get_u64(raw.data() + raw.size() - 8);
  if (fnv1a64(body, body_len) != stored_sum)
    throw ContractError("checkpoint " + file.string() + ": body checksum mismatch");

  std::size_t off = 0;
  auto need = [&](std::size_t n) {
    if (off + n > body_len)
      throw ContractError("checkpoint " + file.string() + ": truncated body");
  };
  need(8);
  std::uint64_t count = get_u64(body + off);
  off += 8;
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    need(2);
    std::uint16_t name_len = get_u16(body + off);
    off += 2;
    need(name_len);
    e.name.assign(reinterpret_cast<const char*>(body + off), name_len);
    off += name_len;
    need(2);
    e.dtype = Dtype(body[off]);
    std::uint8_t rank = body[off + 1];
    off += 2;
    need(8 * rank);
    for (std::uint8_t r = 0; r < rank; ++r) {
      e.shape.push_back(get_u64(body + off));
      off += 8;
    }
    need(8);
    std::uint64_t bytes = get_u64(body + off);
    off += 8;
    if (bytes != shape_numel(e.shape) * dtype_size(e.dtype))
      throw ContractError("checkpoint " + file.string() + ": payload size mismatch for '" +
                          e.name + "'");
    need(bytes);
    e.payload.assign(body + off, body + off + bytes);
    off += bytes;
    if (ck.has(e.name))
      throw ContractError("checkpoint " + file.string() + ": duplicate tensor '" + e.name + "'");
    ck.entries.push_back(std::move(e));
  }
  if (off != body_len)
    throw ContractError("checkpoint " + file.string() + ": trailing bytes in body");
  return ck;
}

}  // namespace lmim
