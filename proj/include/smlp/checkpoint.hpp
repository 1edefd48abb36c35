#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "smlp/corpus.hpp"
#include "smlp/model.hpp"

// Bit-exact checkpoint container. Layout:
//   "SMLP" | version u32 LE | record count u32 LE | records...
// each record:
//   name length u32 LE | name bytes | rank u32 LE | extents u64 LE each |
//   payload doubles (8-byte LE IEEE-754) | CRC32 of the payload bytes, u32 LE
static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace smlp {

constexpr std::uint32_t kCheckpointVersion = 1;

struct Record {
  std::string name;
  std::vector<std::size_t> shape;  // empty = scalar (rank 0)
  std::vector<double> data;
};

namespace ckptdetail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), 8);
}

inline std::uint32_t take_u32(std::istream& is, const char* what) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4))
    throw IoError(std::string("checkpoint: truncated file reading ") + what);
  return v;
}
inline std::uint64_t take_u64(std::istream& is, const char* what) {
  std::uint64_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 8))
    throw IoError(std::string("checkpoint: truncated file reading ") + what);
  return v;
}

inline std::uint32_t payload_crc(const std::vector<double>& data) {
  uLong crc = crc32(0L, Z_NULL, 0);
  if (!data.empty())
    crc = crc32(crc, reinterpret_cast<const Bytef*>(data.data()),
                static_cast<uInt>(data.size() * sizeof(double)));
  return static_cast<std::uint32_t>(crc);
}

// Exact round trip for 64-bit integers through an 8-byte payload slot.
inline double bits_to_double(std::uint64_t bits) {
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}
inline std::uint64_t double_to_bits(double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  return bits;
}

}  // namespace ckptdetail

inline void write_records(const std::string& path, const std::vector<Record>& records) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("checkpoint: cannot write " + path);
  os.write("SMLP", 4);
  ckptdetail::put_u32(os, kCheckpointVersion);
  ckptdetail::put_u32(os, static_cast<std::uint32_t>(records.size()));
  for (const Record& r : records) {
    std::size_t numel = 1;
    for (std::size_t e : r.shape) numel *= e;
    if (numel != r.data.size())
      throw IoError("checkpoint: record " + r.name + " holds " + std::to_string(r.data.size()) +
                    " values for a shape of " + std::to_string(numel));
    ckptdetail::put_u32(os, static_cast<std::uint32_t>(r.name.size()));
    os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    ckptdetail::put_u32(os, static_cast<std::uint32_t>(r.shape.size()));
    for (std::size_t e : r.shape) ckptdetail::put_u64(os, e);
    if (!r.data.empty())
      os.write(reinterpret_cast<const char*>(r.data.data()),
               static_cast<std::streamsize>(r.data.size() * sizeof(double)));
    ckptdetail::put_u32(os, ckptdetail::payload_crc(r.data));
  }
  if (!os) throw IoError("checkpoint: write failed for " + path);
}

inline std::vector<Record> read_records(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path);
  char magic[4] = {};
  if (!is.read(magic, 4) || std::string(magic, 4) != "SMLP")
    throw IoError("checkpoint: " + path + " is not a checkpoint file (bad magic)");
  const std::uint32_t version = ckptdetail::take_u32(is, "version");
  if (version != kCheckpointVersion)
    throw IoError("checkpoint: version " + std::to_string(version) + " unsupported (expected " +
                  std::to_string(kCheckpointVersion) + ")");
  const std::uint32_t count = ckptdetail::take_u32(is, "record count");
  std::vector<Record> records;
  records.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Record r;
    const std::uint32_t name_len = ckptdetail::take_u32(is, "name length");
    if (name_len > 65536) throw IoError("checkpoint: implausible record name length");
    r.name.resize(name_len);
    if (!is.read(r.name.data(), name_len)) throw IoError("checkpoint: truncated record name");
    const std::uint32_t rank = ckptdetail::take_u32(is, "rank");
    if (rank > 8) throw IoError("checkpoint: implausible rank in record " + r.name);
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint64_t e = ckptdetail::take_u64(is, "extent");
      if (e > (1ull << 32)) throw IoError("checkpoint: implausible extent in record " + r.name);
      r.shape.push_back(static_cast<std::size_t>(e));
      numel *= static_cast<std::size_t>(e);
    }
    r.data.resize(numel);
    if (numel > 0 &&
        !is.read(reinterpret_cast<char*>(r.data.data()),
                 static_cast<std::streamsize>(numel * sizeof(double))))
      throw IoError("checkpoint: truncated payload in record " + r.name);
    const std::uint32_t stored = ckptdetail::take_u32(is, "checksum");
    if (stored != ckptdetail::payload_crc(r.data))
      throw IoError("checkpoint: checksum failure in record " + r.name);
    records.push_back(std::move(r));
  }
  return records;
}

// ---------------------------------------------------------------------------
// Model/config record mapping

namespace ckptdetail {

inline Record scalar(const std::string& name, double v) { return {name, {}, {v}}; }

inline void append_config(const ModelConfig& cfg, std::vector<Record>& out) {
  out.push_back(scalar("cfg.vocab_size", static_cast<double>(cfg.vocab_size)));
  out.push_back(scalar("cfg.seq_len", static_cast<double>(cfg.seq_len)));
  out.push_back(scalar("cfg.embed_dim", static_cast<double>(cfg.embed_dim)));
  out.push_back(scalar("cfg.ffn_dim", static_cast<double>(cfg.ffn_dim)));
  out.push_back(scalar("cfg.n_dense", static_cast<double>(cfg.n_dense)));
  out.push_back(scalar("cfg.n_sparse", static_cast<double>(cfg.n_sparse)));
  out.push_back(scalar("cfg.n_experts", static_cast<double>(cfg.n_experts)));
  out.push_back(scalar("cfg.n_heads", static_cast<double>(cfg.n_heads)));
  out.push_back(scalar("cfg.router_kind", static_cast<double>(static_cast<int>(cfg.router_kind))));
  out.push_back(scalar("cfg.arch", static_cast<double>(static_cast<int>(cfg.arch))));
  out.push_back(scalar("cfg.partial_fraction", cfg.partial_fraction));
  out.push_back(scalar("cfg.seed", bits_to_double(cfg.seed)));
}

inline double need(const std::map<std::string, const Record*>& by_name, const std::string& key) {
  auto it = by_name.find(key);
  if (it == by_name.end() || it->second->data.size() != 1)
    throw IoError("checkpoint: missing scalar record " + key);
  return it->second->data[0];
}

inline ModelConfig config_from(const std::map<std::string, const Record*>& by_name) {
  ModelConfig cfg;
  cfg.vocab_size = static_cast<std::size_t>(need(by_name, "cfg.vocab_size"));
  cfg.seq_len = static_cast<std::size_t>(need(by_name, "cfg.seq_len"));
  cfg.embed_dim = static_cast<std::size_t>(need(by_name, "cfg.embed_dim"));
  cfg.ffn_dim = static_cast<std::size_t>(need(by_name, "cfg.ffn_dim"));
  cfg.n_dense = static_cast<std::size_t>(need(by_name, "cfg.n_dense"));
  cfg.n_sparse = static_cast<std::size_t>(need(by_name, "cfg.n_sparse"));
  cfg.n_experts = static_cast<std::size_t>(need(by_name, "cfg.n_experts"));
  cfg.n_heads = static_cast<std::size_t>(need(by_name, "cfg.n_heads"));
  cfg.router_kind = static_cast<RouterKind>(static_cast<int>(need(by_name, "cfg.router_kind")));
  cfg.arch = static_cast<Arch>(static_cast<int>(need(by_name, "cfg.arch")));
  cfg.partial_fraction = need(by_name, "cfg.partial_fraction");
  cfg.seed = double_to_bits(need(by_name, "cfg.seed"));
  return cfg;
}

}  // namespace ckptdetail

}  // namespace smlp
