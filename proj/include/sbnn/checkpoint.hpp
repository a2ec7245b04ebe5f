#pragma once

// Binary checkpoint container.
//
//   "S2BN" | u32 version | u8 stage | u8 scheme | u8 arch | u8 mode
//   | u32 width | u32 epoch | u32 tensor_count
//   | tensor_count × { u32 name_len | name | u8 dtype | u32 rank | u32 dims[rank] | payload }
//   | u32 crc32
//
// All integers little-endian. dtype 0 is f32; dtype 1 is packed ±1 bits
// (u64 words, rows of dims[1..] bits each, see BitTensor). The CRC covers
// every byte before it, header included.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "sbnn/binarize.hpp"
#include "sbnn/nn.hpp"

namespace sbnn {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'S', '2', 'B', 'N'};

enum class DType : std::uint8_t { f32 = 0, bits = 1 };

struct CheckpointHeader {
  std::uint8_t stage = 0;   // Stage
  std::uint8_t scheme = 1;  // Scheme
  std::uint8_t arch = 0;    // ArchId
  std::uint8_t mode = 0;    // BinMode
  std::uint32_t width = 0;
  std::uint32_t epoch = 0;
  bool operator==(const CheckpointHeader&) const = default;
};

struct Checkpoint {
  CheckpointHeader header;
  std::map<std::string, Tensor> tensors;
  std::map<std::string, BitTensor> bits;

  const Tensor& tensor(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ConfigError("checkpoint has no tensor '" + name + "'");
    return it->second;
  }
  bool has(const std::string& name) const { return tensors.count(name) || bits.count(name); }
};

inline std::uint32_t crc32_of(const std::uint8_t* p, std::size_t n) {
  uLong c = crc32(0L, Z_NULL, 0);
  while (n) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = crc32(c, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

namespace detail {
static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  void u8(std::uint8_t v) { buf.push_back(v); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf.insert(buf.end(), b, b + n);
  }
  std::vector<std::uint8_t> buf;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b, std::size_t end) : b_(b), end_(end) {}
  std::uint8_t u8() {
    need(1);
    return b_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, &b_[pos_], 4);
    pos_ += 4;
    return v;
  }
  void raw(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, &b_[pos_], n);
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw FormatError("checkpoint truncated", pos_);
  }
  const std::vector<std::uint8_t>& b_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

inline void write_entry_head(Writer& w, const std::string& name, DType dt, const Shape& shape) {
  w.u32(static_cast<std::uint32_t>(name.size()));
  w.raw(name.data(), name.size());
  w.u8(static_cast<std::uint8_t>(dt));
  w.u32(static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) {
    if (d > 0xffffffffu) throw DimensionError("checkpoint: dimension exceeds u32");
    w.u32(static_cast<std::uint32_t>(d));
  }
}
}  // namespace detail

/// Serialises to bytes; entries are written in name order so equal
/// checkpoints produce equal bytes.
inline std::vector<std::uint8_t> serialize(const Checkpoint& ck) {
  detail::Writer w;
  w.raw(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.u8(ck.header.stage);
  w.u8(ck.header.scheme);
  w.u8(ck.header.arch);
  w.u8(ck.header.mode);
  w.u32(ck.header.width);
  w.u32(ck.header.epoch);
  for (const auto& [name, _] : ck.tensors)
    if (ck.bits.count(name)) throw ConfigError("checkpoint: '" + name + "' stored twice");
  w.u32(static_cast<std::uint32_t>(ck.tensors.size() + ck.bits.size()));
  // Merge the two maps in name order.
  auto t = ck.tensors.begin();
  auto b = ck.bits.begin();
  while (t != ck.tensors.end() || b != ck.bits.end()) {
    if (b == ck.bits.end() || (t != ck.tensors.end() && t->first < b->first)) {
      detail::write_entry_head(w, t->first, DType::f32, t->second.shape());
      w.raw(t->second.data().data(), t->second.numel() * sizeof(float));
      ++t;
    } else {
      const BitTensor& bt = b->second;
      if (bt.shape.empty() || numel_of(bt.shape) != bt.rows() * bt.row_length ||
          bt.row_length != numel_of(bt.shape) / bt.shape[0])
        throw DimensionError("checkpoint: packed tensor '" + b->first + "' must have one row per leading index");
      detail::write_entry_head(w, b->first, DType::bits, bt.shape);
      w.raw(bt.words.data(), bt.words.size() * sizeof(std::uint64_t));
      ++b;
    }
  }
  w.u32(crc32_of(w.buf.data(), w.buf.size()));
  return std::move(w.buf);
}

/// Parses bytes; the CRC is checked before anything else is interpreted.
inline Checkpoint deserialize(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 + 4 + 4 + 8 + 4 + 4) throw FormatError("checkpoint too short", bytes.size());
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, &bytes[body], 4);
  if (crc32_of(bytes.data(), body) != stored) throw FormatError("checkpoint CRC mismatch", body);
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw FormatError("bad checkpoint magic", 0);
  detail::Reader r(bytes, body);
  char magic[4];
  r.raw(magic, 4);
  if (const auto v = r.u32(); v != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(v), 4);
  Checkpoint ck;
  ck.header.stage = r.u8();
  ck.header.scheme = r.u8();
  ck.header.arch = r.u8();
  ck.header.mode = r.u8();
  ck.header.width = r.u32();
  ck.header.epoch = r.u32();
  const std::uint32_t count = r.u32();
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::size_t at = r.pos();
    const std::uint32_t len = r.u32();
    if (len > body - r.pos()) throw FormatError("checkpoint name length out of range", at);
    std::string name(len, '\0');
    r.raw(name.data(), len);
    const std::uint8_t dt = r.u8();
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw FormatError("checkpoint tensor rank out of range", r.pos() - 4);
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    if (ck.has(name)) throw FormatError("duplicate checkpoint entry '" + name + "'", at);
    if (dt == static_cast<std::uint8_t>(DType::f32)) {
      const std::size_t n = numel_of(shape);
      if (n > (body - r.pos()) / sizeof(float)) throw FormatError("checkpoint payload truncated", r.pos());
      std::vector<float> data(n);
      r.raw(data.data(), n * sizeof(float));
      ck.tensors.emplace(name, Tensor(shape, std::move(data)));
    } else if (dt == static_cast<std::uint8_t>(DType::bits)) {
      if (shape.empty()) throw FormatError("packed tensor without dimensions", at);
      BitTensor bt;
      bt.shape = shape;
      bt.row_length = shape[0] ? numel_of(shape) / shape[0] : 0;
      bt.words_per_row = words_for(bt.row_length);
      const std::size_t nwords = shape[0] * bt.words_per_row;
      if (nwords > (body - r.pos()) / sizeof(std::uint64_t)) throw FormatError("checkpoint payload truncated", r.pos());
      bt.words.resize(nwords);
      r.raw(bt.words.data(), nwords * sizeof(std::uint64_t));
      ck.bits.emplace(name, std::move(bt));
    } else {
      throw FormatError("unknown dtype code " + std::to_string(dt), r.pos() - 1 - 4 * (rank + 1));
    }
  }
  if (r.pos() != body) throw FormatError("trailing bytes before checkpoint CRC", r.pos());
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  const auto bytes = serialize(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ConfigError("write failed for '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), {});
  return deserialize(bytes);
}

}  // namespace sbnn
