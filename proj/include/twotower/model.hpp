#pragma once

// Two-tower model (query tower, doc tower) and its checkpoint format.
//
// Checkpoint layout (little-endian):
//   8 bytes   magic "TTWRCKPT"
//   u32       format version
//   u64       header length n
//   n bytes   JSON header: {"version", "dtype", "config", "towers": [
//               {"name", "max_len", "tensors": [{"name","shape","offset"}]}]}
//   raw       tensor values of every tower, concatenated in header order

#include <bit>
#include <cstring>
#include <filesystem>

#include "json.hpp"
#include "twotower/common.hpp"
#include "twotower/encoder.hpp"

namespace twotower {

inline constexpr char kCheckpointMagic[8] = {'T', 'T', 'W', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
struct TwoTower {
  EncoderConfig config;
  std::vector<EncoderParams<T>> towers;  // one entry when towers are shared

  EncoderParams<T>& query() { return towers.front(); }
  EncoderParams<T>& doc() { return towers.back(); }
  const EncoderParams<T>& query() const { return towers.front(); }
  const EncoderParams<T>& doc() const { return towers.back(); }
  bool shared() const { return towers.size() == 1; }

  bool operator==(const TwoTower&) const = default;
};

/// Towers draw from independent sub-seeds unless `same_init` is set, in which
/// case both start from identical values (still updated separately).
template <class T>
TwoTower<T> init_two_tower(const EncoderConfig& config, std::uint64_t seed,
                           bool same_init = false) {
  TwoTower<T> m;
  m.config = config;
  if (config.share_towers) {
    Rng rng(derive_seed(seed, "tower", 0));
    m.towers.push_back(
        init_params<T>(config, std::max(config.query_max_len, config.doc_max_len), rng));
    return m;
  }
  Rng rq(derive_seed(seed, "tower", 0));
  Rng rd(derive_seed(seed, "tower", same_init ? 0 : 1));
  m.towers.push_back(init_params<T>(config, config.query_max_len, rq));
  m.towers.push_back(init_params<T>(config, config.doc_max_len, rd));
  return m;
}

template <class T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

template <class T>
std::string checkpoint_bytes(const TwoTower<T>& m) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  nlohmann::json towers = nlohmann::json::array();
  const char* names[] = {"query", "doc"};
  std::size_t base = 0;
  for (std::size_t t = 0; t < m.towers.size(); ++t) {
    const auto& p = m.towers[t];
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& info : p.layout.tensors)
      tensors.push_back({{"name", info.name}, {"shape", info.shape}, {"offset", base + info.offset}});
    towers.push_back({{"name", m.shared() ? "shared" : names[t]},
                      {"max_len", p.max_len},
                      {"tensors", tensors}});
    base += p.values.size();
  }
  nlohmann::json header = {{"version", kCheckpointVersion},
                           {"dtype", dtype_name<T>()},
                           {"config", m.config.to_json()},
                           {"towers", towers}};
  const std::string hs = header.dump();
  std::string out(kCheckpointMagic, 8);
  const std::uint32_t ver = kCheckpointVersion;
  const std::uint64_t hl = hs.size();
  out.append(reinterpret_cast<const char*>(&ver), sizeof ver);
  out.append(reinterpret_cast<const char*>(&hl), sizeof hl);
  out += hs;
  for (const auto& p : m.towers)
    out.append(reinterpret_cast<const char*>(p.values.data()), p.values.size() * sizeof(T));
  return out;
}

template <class T>
TwoTower<T> parse_checkpoint(std::string_view bytes) {
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw Error("not a checkpoint (bad magic)");
  std::uint32_t ver;
  std::uint64_t hl;
  std::memcpy(&ver, bytes.data() + 8, 4);
  std::memcpy(&hl, bytes.data() + 12, 8);
  if (ver != kCheckpointVersion) throw Error("unsupported checkpoint version " + std::to_string(ver));
  if (20 + hl > bytes.size()) throw Error("truncated checkpoint header");
  const auto header = nlohmann::json::parse(bytes.substr(20, hl));
  const std::string dtype = header.at("dtype").get<std::string>();
  TwoTower<T> m;
  m.config = EncoderConfig::from_json(header.at("config"));
  std::size_t pos = 20 + hl;
  for (const auto& jt : header.at("towers")) {
    EncoderParams<T> p;
    p.config = m.config;
    p.max_len = jt.at("max_len").get<std::size_t>();
    p.layout = ParamLayout::make(m.config, p.max_len);
    p.values.resize(p.layout.total);
    const std::size_t width = dtype == "f32" ? 4 : dtype == "f64" ? 8 : 0;
    if (width == 0) throw Error("unknown dtype " + dtype);
    if (pos + width * p.values.size() > bytes.size()) throw Error("truncated checkpoint data");
    for (std::size_t i = 0; i < p.values.size(); ++i, pos += width) {
      if (width == 4) {
        float v;
        std::memcpy(&v, bytes.data() + pos, 4);
        p.values[i] = static_cast<T>(v);
      } else {
        double v;
        std::memcpy(&v, bytes.data() + pos, 8);
        p.values[i] = static_cast<T>(v);
      }
    }
    m.towers.push_back(std::move(p));
  }
  if (m.towers.empty() || m.towers.size() > 2) throw Error("checkpoint must hold 1 or 2 towers");
  return m;
}

template <class T>
void save_checkpoint(const TwoTower<T>& m, const std::filesystem::path& path) {
  write_file_atomic(path, checkpoint_bytes(m));
}

template <class T>
TwoTower<T> load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint<T>(read_file(path));
}

template <class T>
std::uint64_t fingerprint(const TwoTower<T>& m) {
  return fnv1a64(checkpoint_bytes(m));
}

}  // namespace twotower
