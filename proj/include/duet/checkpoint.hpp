#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "duet/nn.hpp"
#include "duet/tensor.hpp"

namespace duet {

// Named-tensor container: flat "module.param" namespace, little-endian
// 64-bit floats, a shape header per entry.
//
//   magic "DUETCKPT" | u32 version | u32 count
//   per entry: u32 name_len | name bytes | u32 rank | u64 dims[rank] | f64 values[numel]

namespace detail {

constexpr char kCheckpointMagic[8] = {'D', 'U', 'E', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
T to_little_endian(T v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  T out;
  auto* src = reinterpret_cast<const unsigned char*>(&v);
  auto* dst = reinterpret_cast<unsigned char*>(&out);
  for (std::size_t i = 0; i < sizeof(T); ++i) dst[i] = src[sizeof(T) - 1 - i];
  return out;
}

template <typename T>
void write_le(std::ostream& os, T v) {
  const T le = to_little_endian(v);
  os.write(reinterpret_cast<const char*>(&le), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return to_little_endian(v);
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ParamList& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
  detail::write_le(os, detail::kCheckpointVersion);
  detail::write_le(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    detail::write_le(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::write_le(os, static_cast<std::uint32_t>(p.tensor.rank()));
    for (std::size_t d : p.tensor.shape()) detail::write_le(os, static_cast<std::uint64_t>(d));
    for (double v : p.tensor.values()) detail::write_le(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw IoError("write failed for " + path);
}

inline ParamList load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0)
    throw ParseError(path + ": not a checkpoint file");
  const auto version = detail::read_le<std::uint32_t>(is);
  if (version != detail::kCheckpointVersion)
    throw ParseError(path + ": unsupported checkpoint version " + std::to_string(version));
  const auto count = detail::read_le<std::uint32_t>(is);

  ParamList out;
  out.reserve(count);
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto name_len = detail::read_le<std::uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto rank = detail::read_le<std::uint32_t>(is);
    if (rank == 0 || rank > 2) throw ParseError(path + ": bad rank for " + name);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(detail::read_le<std::uint64_t>(is));
    std::vector<double> values(detail::numel_of(shape));
    for (auto& v : values) v = std::bit_cast<double>(detail::read_le<std::uint64_t>(is));
    if (!is) throw ParseError(path + ": truncated entry " + name);
    out.push_back({std::move(name), Tensor::from(std::move(shape), std::move(values))});
  }
  return out;
}

// Copies checkpoint values into an existing parameter list, matching by name
// with shape checks. Every destination parameter must be present in the file.
inline void load_into(ParamList& dst, const std::string& path) {
  ParamList src = load_checkpoint(path);
  std::unordered_map<std::string, const Tensor*> by_name;
  for (const auto& s : src) by_name[s.name] = &s.tensor;
  for (auto& d : dst) {
    auto it = by_name.find(d.name);
    if (it == by_name.end()) throw ParseError(path + ": missing parameter " + d.name);
    if (it->second->shape() != d.tensor.shape())
      throw ParseError(path + ": shape mismatch for " + d.name + ": file " +
                       detail::shape_str(it->second->shape()) + " vs model " +
                       detail::shape_str(d.tensor.shape()));
    auto vals = d.tensor.values_mut();
    const auto sv = it->second->values();
    std::copy(sv.begin(), sv.end(), vals.begin());
  }
}

}  // namespace duet
