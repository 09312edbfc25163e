#include "ntformer/token_cache.hpp"

#include <cstdio>
#include <fstream>
#include <limits>
#include <string>

#include "binary_io.hpp"
#include "ntformer/errors.hpp"

namespace ntformer {

namespace {

constexpr char kMagic[] = "N2PT";
constexpr std::uint8_t kFlagAttrNormalize = 1;

struct Header {
  std::uint32_t version = 0;
  std::uint64_t n = 0;
  std::uint32_t hops = 0;
  std::uint32_t topk = 0;
  std::uint32_t dim = 0;
  std::uint8_t flags = 0;
  double damping = 0.0;
  std::uint32_t ppr_steps = 0;
};

void write_neighborhood(detail::ByteWriter& out, const NeighborhoodTokens& t) {
  for (double v : t.values) out.scalar<float>(static_cast<float>(v));
}

void write_node(detail::ByteWriter& out, const NodeTokens& t) {
  for (NodeId id : t.ids) out.scalar<std::uint64_t>(id);
}

NeighborhoodTokens read_neighborhood(detail::ByteReader& in, View view, const Header& h) {
  NeighborhoodTokens t{view, h.n, std::size_t{h.hops} + 1, h.dim, {}};
  t.values.resize(t.num_nodes * t.length * t.dim);
  for (double& v : t.values) v = in.scalar<float>();
  return t;
}

NodeTokens read_node(detail::ByteReader& in, View view, const Header& h) {
  NodeTokens t{view, h.n, std::size_t{h.topk} + 1, {}};
  t.ids.resize(t.num_nodes * t.length);
  for (NodeId& id : t.ids) {
    const auto v = in.scalar<std::uint64_t>();
    if (v >= h.n) throw UserError("token cache: node id out of range");
    id = static_cast<NodeId>(v);
  }
  return t;
}

}  // namespace

void save_token_cache(const TokenBundle& bundle, const std::filesystem::path& path) {
  const Node2ParConfig& cfg = bundle.config;
  detail::ByteWriter out;
  out.magic(std::string_view(kMagic, 4));
  out.scalar<std::uint32_t>(kTokenCacheVersion);
  out.scalar<std::uint64_t>(bundle.num_nodes());
  out.scalar<std::uint32_t>(static_cast<std::uint32_t>(cfg.hops));
  out.scalar<std::uint32_t>(static_cast<std::uint32_t>(cfg.topk));
  out.scalar<std::uint32_t>(static_cast<std::uint32_t>(bundle.feature_dim()));
  out.scalar<std::uint8_t>(cfg.attr_adj_normalize ? kFlagAttrNormalize : 0);
  out.scalar<double>(cfg.ppr_damping);
  out.scalar<std::uint32_t>(static_cast<std::uint32_t>(cfg.ppr_steps));
  const std::size_t payload_begin = out.size();
  write_neighborhood(out, bundle.ne_topology);
  write_neighborhood(out, bundle.ne_attribute);
  write_node(out, bundle.no_topology);
  write_node(out, bundle.no_attribute);
  out.scalar<std::uint64_t>(
      detail::fnv1a(out.buffer().data() + payload_begin, out.size() - payload_begin));
  detail::atomic_write(path, out.buffer());
}

TokenBundle load_token_cache(const std::filesystem::path& path) {
  const std::vector<char> buf = detail::read_file(path);
  detail::ByteReader in(buf, "checksum mismatch");
  if (!in.magic(std::string_view(kMagic, 4))) throw UserError("not a token cache file");
  Header h;
  h.version = in.scalar<std::uint32_t>();
  if (h.version != kTokenCacheVersion) throw UserError("version mismatch");
  h.n = in.scalar<std::uint64_t>();
  h.hops = in.scalar<std::uint32_t>();
  h.topk = in.scalar<std::uint32_t>();
  h.dim = in.scalar<std::uint32_t>();
  h.flags = in.scalar<std::uint8_t>();
  h.damping = in.scalar<double>();
  h.ppr_steps = in.scalar<std::uint32_t>();

  // The payload size follows from the header; anything else is corruption.
  const long double ne = static_cast<long double>(h.n) * (h.hops + 1.0L) * h.dim * 4.0L;
  const long double no = static_cast<long double>(h.n) * (h.topk + 1.0L) * 8.0L;
  const long double expected = 2.0L * ne + 2.0L * no + 8.0L;
  if (expected != static_cast<long double>(in.remaining())) throw UserError("checksum mismatch");
  const std::size_t payload = in.remaining() - sizeof(std::uint64_t);
  const std::uint64_t sum = detail::fnv1a(in.cursor(), payload);
  std::uint64_t stored;
  std::memcpy(&stored, in.cursor() + payload, sizeof(stored));
  if (sum != stored) throw UserError("checksum mismatch");

  TokenBundle b;
  b.config.hops = static_cast<int>(h.hops);
  b.config.topk = h.topk;
  b.config.ppr_damping = h.damping;
  b.config.ppr_steps = static_cast<int>(h.ppr_steps);
  b.config.attr_adj_normalize = (h.flags & kFlagAttrNormalize) != 0;
  b.ne_topology = read_neighborhood(in, View::kTopology, h);
  b.ne_attribute = read_neighborhood(in, View::kAttribute, h);
  b.no_topology = read_node(in, View::kTopology, h);
  b.no_attribute = read_node(in, View::kAttribute, h);
  return b;
}

TokenBundle load_token_cache(const std::filesystem::path& path, const Node2ParConfig& expected,
                             std::size_t num_nodes, std::size_t feature_dim) {
  TokenBundle b = load_token_cache(path);
  if (!(b.config == expected) || b.num_nodes() != num_nodes || b.feature_dim() != feature_dim) {
    throw UserError("config mismatch");
  }
  return b;
}

TokenBundle quantize_bundle(TokenBundle bundle) {
  for (auto* t : {&bundle.ne_topology, &bundle.ne_attribute}) {
    for (double& v : t->values) v = static_cast<float>(v);
  }
  return bundle;
}

std::uint64_t token_source_fingerprint(const Graph& g, const FeatureMatrix& x) {
  auto fold = [](std::uint64_t h, const auto& vec) {
    const std::uint64_t count = vec.size();
    h = detail::fnv1a(reinterpret_cast<const char*>(&count), sizeof count, h);
    return detail::fnv1a(reinterpret_cast<const char*>(vec.data()),
                         vec.size() * sizeof(vec[0]), h);
  };
  std::uint64_t h = detail::kFnvOffset;
  h = fold(h, g.offsets());
  h = fold(h, g.columns());
  const std::uint64_t cols = x.cols();
  h = detail::fnv1a(reinterpret_cast<const char*>(&cols), sizeof cols, h);
  return fold(h, x.data());
}

namespace {

std::filesystem::path key_path(const std::filesystem::path& cache) {
  return std::filesystem::path(cache.string() + ".key");
}

}  // namespace

void write_cache_key(const std::filesystem::path& cache, std::uint64_t fingerprint) {
  char text[40];
  std::snprintf(text, sizeof text, "fnv1a %016llx\n", static_cast<unsigned long long>(fingerprint));
  detail::atomic_write(key_path(cache), std::string_view(text));
}

std::optional<std::uint64_t> read_cache_key(const std::filesystem::path& cache) {
  std::ifstream in(key_path(cache));
  std::string tag, hex;
  if (!(in >> tag >> hex) || tag != "fnv1a" || hex.size() != 16) return std::nullopt;
  try {
    std::size_t used = 0;
    const std::uint64_t v = std::stoull(hex, &used, 16);
    if (used != hex.size()) return std::nullopt;
    return v;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

}  // namespace ntformer
