#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lmt/tensor.hpp"

namespace lmt {

// Checkpoint layout, all integers and floats little-endian:
//   magic "LMTCKPT1"
//   u64 parameter count
//   per parameter: u64 name length, UTF-8 name bytes, u64 rank,
//                  u64 dims[rank], f64 data (row-major)
inline constexpr char kCheckpointMagic[8] = {'L', 'M', 'T', 'C',
                                             'K', 'P', 'T', '1'};

namespace detail {

static_assert(sizeof(double) == 8);

inline void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw std::runtime_error("checkpoint: truncated integer field");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void write_f64(std::ostream& os, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  write_u64(os, bits);
}

inline double read_f64(std::istream& is) {
  std::uint64_t bits = read_u64(is);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

}  // namespace detail

struct NamedTensor {
  std::string name;
  const Tensor* tensor;
};

inline void save_checkpoint(const std::string& path,
                            const std::vector<NamedTensor>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open for write: " + path);
  os.write(kCheckpointMagic, 8);
  detail::write_u64(os, params.size());
  for (const auto& [name, t] : params) {
    detail::write_u64(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_u64(os, t->rank());
    for (std::size_t d : t->shape) detail::write_u64(os, d);
    for (double v : t->data) detail::write_f64(os, v);
  }
  if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

inline std::vector<std::pair<std::string, Tensor>> load_checkpoint(
    const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  const std::uint64_t count = detail::read_u64(is);
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t name_len = detail::read_u64(is);
    std::string name(name_len, '\0');
    is.read(name.data(), static_cast<std::streamsize>(name_len));
    if (!is) throw std::runtime_error("checkpoint: truncated name in " + path);
    const std::uint64_t rank = detail::read_u64(is);
    std::vector<std::size_t> shape(rank);
    std::size_t numel = 1;
    for (std::uint64_t d = 0; d < rank; ++d) {
      shape[d] = static_cast<std::size_t>(detail::read_u64(is));
      numel *= shape[d];
    }
    std::vector<double> data(numel);
    for (std::size_t j = 0; j < numel; ++j) data[j] = detail::read_f64(is);
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return out;
}

// Copies checkpoint entries into an existing parameter map; throws when a
// stored shape disagrees or a name is missing from the checkpoint.
inline void restore_params(const std::vector<std::pair<std::string, Tensor>>& ckpt,
                           const std::vector<std::pair<std::string, Tensor*>>& dst) {
  for (const auto& [name, target] : dst) {
    bool found = false;
    for (const auto& [cname, ct] : ckpt) {
      if (cname != name) continue;
      if (ct.shape != target->shape)
        throw std::runtime_error("checkpoint: shape mismatch for '" + name +
                                 "': stored " + ct.shape_str() + ", expected " +
                                 target->shape_str());
      target->data = ct.data;
      found = true;
      break;
    }
    if (!found)
      throw std::runtime_error("checkpoint: parameter '" + name + "' missing");
  }
}

}  // namespace lmt
