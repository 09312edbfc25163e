#include "ntformer/checkpoint.hpp"

#include <unordered_map>

#include "binary_io.hpp"
#include "ntformer/errors.hpp"

namespace ntformer {

template <typename T>
void save_checkpoint(const std::vector<Parameter<T>>& params, const std::filesystem::path& path) {
  detail::ByteWriter out;
  out.magic("NTFW");
  out.scalar<std::uint32_t>(kCheckpointVersion);
  out.scalar<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    out.scalar<std::uint32_t>(static_cast<std::uint32_t>(p.name.size()));
    out.bytes(p.name.data(), p.name.size());
    out.scalar<std::uint32_t>(static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t d : p.value.shape()) out.scalar<std::uint64_t>(d);
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      out.scalar<float>(static_cast<float>(p.value[i]));
    }
  }
  detail::atomic_write(path, out.buffer());
}

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
  const std::vector<char> buf = detail::read_file(path);
  detail::ByteReader in(buf, "checkpoint: truncated file");
  if (!in.magic("NTFW")) throw UserError("checkpoint: bad magic");
  if (in.scalar<std::uint32_t>() != kCheckpointVersion) throw UserError("version mismatch");
  const auto count = in.scalar<std::uint32_t>();
  std::vector<NamedTensor> out;
  for (std::uint32_t k = 0; k < count; ++k) {
    NamedTensor t;
    t.name = in.string(in.scalar<std::uint32_t>());
    const auto rank = in.scalar<std::uint32_t>();
    if (rank < 1 || rank > 3) throw UserError("checkpoint: bad rank for " + t.name);
    std::size_t size = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      t.shape.push_back(in.scalar<std::uint64_t>());
      size *= t.shape.back();
    }
    in.need(size * sizeof(float));
    t.values.resize(size);
    in.bytes(t.values.data(), size * sizeof(float));
    out.push_back(std::move(t));
  }
  if (in.remaining() != 0) throw UserError("checkpoint: trailing bytes");
  return out;
}

template <typename T>
void load_checkpoint(std::vector<Parameter<T>>& params, const std::filesystem::path& path) {
  const std::vector<NamedTensor> stored = read_checkpoint(path);
  std::unordered_map<std::string, const NamedTensor*> by_name;
  for (const auto& t : stored) by_name[t.name] = &t;
  if (by_name.size() != params.size()) throw UserError("checkpoint: parameter set mismatch");
  for (auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw UserError("checkpoint: missing parameter " + p.name);
    if (it->second->shape != p.value.shape()) {
      throw UserError("checkpoint: shape mismatch for " + p.name);
    }
    for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] = static_cast<T>(it->second->values[i]);
  }
}

template void save_checkpoint<float>(const std::vector<Parameter<float>>&,
                                     const std::filesystem::path&);
template void save_checkpoint<double>(const std::vector<Parameter<double>>&,
                                      const std::filesystem::path&);
template void load_checkpoint<float>(std::vector<Parameter<float>>&, const std::filesystem::path&);
template void load_checkpoint<double>(std::vector<Parameter<double>>&,
                                      const std::filesystem::path&);

}  // namespace ntformer
