#pragma once

// Checkpoint files: "DFFT" magic, version, epoch, optimizer step count, the
// canonical config JSON, then length-prefixed named records holding shapes and
// row-major float32 payloads. Parameters come first, then optimizer moments as
// "opt.m:<name>" and "opt.v:<name>". All integers little-endian.

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "optim.hpp"
#include "param_store.hpp"

namespace dfft {

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, double v) {
  float f = static_cast<float>(v);
  std::uint32_t bits;
  static_assert(sizeof(bits) == sizeof(f));
  __builtin_memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

struct ByteReader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw ParseError("truncated checkpoint");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
    return v;
  }
  double f32() {
    std::uint32_t bits = u32();
    float f;
    __builtin_memcpy(&f, &bits, 4);
    return static_cast<double>(f);
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

inline void put_record(std::string& out, const std::string& name, const Shape& shape,
                       const std::vector<double>& vals) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.append(name);
  put_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) put_u64(out, static_cast<std::uint64_t>(d));
  for (double v : vals) put_f32(out, v);
}

}  // namespace detail

constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, const std::string& config_json,
                            const ParamStore& ps, const AdamW& opt, int epoch) {
  std::string out;
  out.append("DFFT");
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(epoch));
  detail::put_u64(out, static_cast<std::uint64_t>(opt.t));
  detail::put_u64(out, config_json.size());
  out.append(config_json);

  const auto& names = ps.names();
  detail::put_u64(out, names.size() * 3);
  for (const auto& name : names) {
    const auto& e = ps.entry(name);
    detail::put_record(out, name, e.shape, *e.val);
  }
  Shape flat;
  std::vector<double> zeros;
  for (const auto& name : names) {
    const auto& e = ps.entry(name);
    flat = e.shape;
    auto mit = opt.m.find(name);
    auto vit = opt.v.find(name);
    if (zeros.size() != e.val->size()) zeros.assign(e.val->size(), 0.0);
    detail::put_record(out, "opt.m:" + name, flat, mit == opt.m.end() ? zeros : mit->second);
    detail::put_record(out, "opt.v:" + name, flat, vit == opt.v.end() ? zeros : vit->second);
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write checkpoint " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write failed for checkpoint " + path);
}

struct CheckpointHeader {
  std::uint32_t version = 0;
  int epoch = 0;
  std::int64_t opt_t = 0;
  std::string config_json;
};

namespace detail {

inline std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

inline CheckpointHeader read_header(ByteReader& r) {
  if (r.bytes(4) != "DFFT") throw ParseError("not a checkpoint file");
  CheckpointHeader h;
  h.version = r.u32();
  if (h.version != kCheckpointVersion)
    throw ParseError("unsupported checkpoint version " + std::to_string(h.version));
  h.epoch = static_cast<int>(r.u32());
  h.opt_t = static_cast<std::int64_t>(r.u64());
  h.config_json = r.bytes(r.u64());
  return h;
}

}  // namespace detail

// Header only; used to rebuild the model before loading tensors.
inline CheckpointHeader peek_checkpoint(const std::string& path) {
  std::string buf = detail::slurp(path);
  detail::ByteReader r{buf};
  return detail::read_header(r);
}

// Fills parameters and optimizer state in place. The store must already hold
// every named parameter at the recorded shape.
inline CheckpointHeader load_checkpoint(const std::string& path, ParamStore& ps, AdamW& opt) {
  std::string buf = detail::slurp(path);
  detail::ByteReader r{buf};
  auto header = detail::read_header(r);
  opt.t = header.opt_t;
  auto count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.bytes(r.u32());
    auto ndim = r.u32();
    Shape shape;
    std::int64_t numel = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      shape.push_back(static_cast<std::int64_t>(r.u64()));
      numel *= shape.back();
    }
    std::vector<double> vals(static_cast<std::size_t>(numel));
    for (auto& v : vals) v = r.f32();

    std::string target = name;
    int kind = 0;  // 0 param, 1 first moment, 2 second moment
    if (name.rfind("opt.m:", 0) == 0) {
      target = name.substr(6);
      kind = 1;
    } else if (name.rfind("opt.v:", 0) == 0) {
      target = name.substr(6);
      kind = 2;
    }
    auto& e = ps.entry(target);
    if (e.shape != shape)
      throw ShapeError("checkpoint record " + name + " has shape " + shape_str(shape) +
                       " but model expects " + shape_str(e.shape));
    if (kind == 0)
      *e.val = std::move(vals);
    else if (kind == 1)
      opt.m[target] = std::move(vals);
    else
      opt.v[target] = std::move(vals);
  }
  if (r.pos != buf.size()) throw ParseError("trailing bytes in checkpoint");
  return header;
}

}  // namespace dfft
