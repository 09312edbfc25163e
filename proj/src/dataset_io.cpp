#include "ntformer/dataset_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <string_view>

#include "json.hpp"

#include "binary_io.hpp"
#include "ntformer/errors.hpp"

namespace ntformer {

namespace {

namespace fs = std::filesystem;

std::string_view trim(std::string_view s) {
  const auto* ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(ws) - b + 1);
}

// Splits a line into whitespace-separated fields.
std::vector<std::string_view> fields(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
    std::size_t j = i;
    while (j < s.size() && s[j] != ' ' && s[j] != '\t') ++j;
    if (j > i) out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

template <typename Int>
bool parse_int(std::string_view s, Int& out) {
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && p == s.data() + s.size();
}

template <typename Fn>
void for_each_line(const std::string& text, Fn&& fn) {
  std::size_t line_no = 0, pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    ++line_no;
    fn(std::string_view(text).substr(pos, end - pos), line_no);
    pos = end + 1;
  }
}

struct EdgeFile {
  std::vector<std::pair<NodeId, NodeId>> edges;
  std::optional<std::size_t> declared_nodes;
  std::size_t max_id_plus_one = 0;
};

EdgeFile parse_edges(const fs::path& path) {
  const std::string text = detail::read_text_file(path);
  EdgeFile out;
  for_each_line(text, [&](std::string_view raw, std::size_t line_no) {
    std::string_view line = trim(raw);
    if (line.empty()) return;
    if (line.front() == '#') {
      auto f = fields(line.substr(1));
      std::size_t n = 0;
      if (f.size() == 2 && f[0] == "nodes" && parse_int(f[1], n)) out.declared_nodes = n;
      return;
    }
    auto f = fields(line);
    std::uint64_t u = 0, v = 0;
    if (f.size() != 2 || !parse_int(f[0], u) || !parse_int(f[1], v) ||
        u > std::numeric_limits<NodeId>::max() || v > std::numeric_limits<NodeId>::max()) {
      throw UserError("malformed line " + std::to_string(line_no) + " in graph.edges: '" +
                      std::string(line) + "'");
    }
    out.edges.emplace_back(static_cast<NodeId>(u), static_cast<NodeId>(v));
    out.max_id_plus_one = std::max<std::size_t>(out.max_id_plus_one, std::max(u, v) + 1);
  });
  return out;
}

std::vector<int> parse_labels(const fs::path& path) {
  const std::string text = detail::read_text_file(path);
  std::vector<int> labels;
  for_each_line(text, [&](std::string_view raw, std::size_t line_no) {
    std::string_view line = trim(raw);
    if (line.empty()) return;
    int y = 0;
    if (!parse_int(line, y) || y < 0) {
      throw UserError("malformed line " + std::to_string(line_no) + " in labels.txt: '" +
                      std::string(line) + "'");
    }
    labels.push_back(y);
  });
  return labels;
}

std::vector<NodeId> split_array(const nlohmann::json& doc, const char* key) {
  if (!doc.contains(key)) return {};
  const auto& arr = doc.at(key);
  if (!arr.is_array()) throw UserError(std::string("splits.json: '") + key + "' is not an array");
  std::vector<NodeId> ids;
  for (const auto& v : arr) {
    if (!v.is_number_unsigned()) {
      throw UserError(std::string("splits.json: '") + key + "' holds a non-integer id");
    }
    ids.push_back(v.get<NodeId>());
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

SplitSet parse_splits(const fs::path& path) {
  const std::string text = detail::read_text_file(path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw UserError("splits.json: " + std::string(e.what()));
  }
  if (!doc.is_object()) throw UserError("splits.json: expected an object");
  for (const auto& [k, _] : doc.items()) {
    if (k != "train" && k != "val" && k != "test") {
      throw UserError("splits.json: unknown key '" + k + "'");
    }
  }
  return {split_array(doc, "train"), split_array(doc, "val"), split_array(doc, "test")};
}

std::string size_mismatch(const char* what, std::size_t got, std::size_t n) {
  return std::string("size mismatch: ") + what + " n=" + std::to_string(got) +
         ", graph n=" + std::to_string(n);
}

}  // namespace

FeatureMatrix read_features(const fs::path& path) {
  if (!fs::exists(path)) throw UserError("missing file " + path.string());
  const std::vector<char> buf = detail::read_file(path);
  detail::ByteReader in(buf, "features.bin: truncated file");
  if (!in.magic("NTFX")) throw UserError("features.bin: bad magic");
  const auto n = in.scalar<std::uint64_t>();
  const auto d = in.scalar<std::uint32_t>();
  if (d == 0) throw UserError("features.bin: feature dimension must be >= 1");
  if (in.remaining() / sizeof(float) / d < n) throw UserError("features.bin: truncated file");
  if (in.remaining() != n * d * sizeof(float)) throw UserError("features.bin: trailing bytes");
  FeatureMatrix x(n, d);
  std::vector<float> row(d);
  for (std::size_t i = 0; i < n; ++i) {
    in.bytes(row.data(), d * sizeof(float));
    for (std::size_t j = 0; j < d; ++j) {
      if (!std::isfinite(row[j])) {
        throw UserError("features.bin: non-finite value at row " + std::to_string(i));
      }
      x(i, j) = row[j];
    }
  }
  return x;
}

void write_features(const FeatureMatrix& x, const fs::path& path) {
  detail::ByteWriter out;
  out.magic("NTFX");
  out.scalar<std::uint64_t>(x.rows());
  out.scalar<std::uint32_t>(static_cast<std::uint32_t>(x.cols()));
  for (double v : x.data()) out.scalar<float>(static_cast<float>(v));
  detail::atomic_write(path, out.buffer());
}

Dataset load_dataset(const fs::path& dir) {
  for (const char* f : {"graph.edges", "features.bin", "labels.txt", "splits.json"}) {
    if (!fs::exists(dir / f)) throw UserError("missing file " + (dir / f).string());
  }
  EdgeFile edges = parse_edges(dir / "graph.edges");
  std::vector<int> labels = parse_labels(dir / "labels.txt");
  const std::size_t n =
      edges.declared_nodes.value_or(std::max(edges.max_id_plus_one, labels.size()));
  if (edges.max_id_plus_one > n) {
    throw UserError("graph.edges: node id " + std::to_string(edges.max_id_plus_one - 1) +
                    " out of range for n=" + std::to_string(n));
  }

  Dataset data;
  data.features = read_features(dir / "features.bin");
  if (data.features.rows() != n) throw UserError(size_mismatch("features", data.features.rows(), n));
  if (labels.size() != n) throw UserError(size_mismatch("labels", labels.size(), n));

  std::set<int> seen(labels.begin(), labels.end());
  const int c = labels.empty() ? 0 : *seen.rbegin() + 1;
  if (static_cast<std::size_t>(c) != seen.size()) throw UserError("non-dense labels");
  data.labels = {std::move(labels), c};

  try {
    data.graph = build_graph(edges.edges, n);
    validate_labels(data.labels);
    data.splits = parse_splits(dir / "splits.json");
    validate_split(data.splits, n);
  } catch (const std::invalid_argument& e) {
    throw UserError(e.what());
  }
  return data;
}

void save_dataset(const Dataset& data, const fs::path& dir) {
  fs::create_directories(dir);
  std::string edges = "# nodes " + std::to_string(data.graph.num_nodes()) + "\n";
  for (NodeId u = 0; u < data.graph.num_nodes(); ++u) {
    for (NodeId v : data.graph.neighbors(u)) {
      if (u < v) edges += std::to_string(u) + ' ' + std::to_string(v) + '\n';
    }
  }
  detail::atomic_write(dir / "graph.edges", edges);
  write_features(data.features, dir / "features.bin");
  std::string labels;
  for (int y : data.labels.labels) labels += std::to_string(y) + '\n';
  detail::atomic_write(dir / "labels.txt", labels);
  nlohmann::ordered_json splits;
  splits["train"] = data.splits.train;
  splits["val"] = data.splits.val;
  splits["test"] = data.splits.test;
  detail::atomic_write(dir / "splits.json", splits.dump() + "\n");
}

}  // namespace ntformer
