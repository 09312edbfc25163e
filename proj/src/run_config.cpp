#include "ntformer/run_config.hpp"

#include <functional>
#include <stdexcept>

#include "binary_io.hpp"
#include "json.hpp"
#include "ntformer/errors.hpp"

namespace ntformer {

namespace {

using Json = nlohmann::ordered_json;

struct Field {
  std::string key;
  std::function<Json(const RunConfig&)> get;
  std::function<void(RunConfig&, const Json&)> set;
};

template <typename V>
V as(const Json& j, const std::string& key) {
  try {
    if constexpr (std::is_same_v<V, bool>) {
      if (!j.is_boolean()) throw std::invalid_argument("");
    } else if constexpr (std::is_integral_v<V>) {
      if (!j.is_number_integer()) throw std::invalid_argument("");
      if constexpr (std::is_unsigned_v<V>) {
        if (!j.is_number_unsigned()) throw std::invalid_argument("");
      }
    } else if constexpr (std::is_floating_point_v<V>) {
      if (!j.is_number()) throw std::invalid_argument("");
    } else {
      if (!j.is_string()) throw std::invalid_argument("");
    }
    return j.get<V>();
  } catch (const std::exception&) {
    throw UserError("config: bad value for '" + key + "': " + j.dump());
  }
}

template <typename V, typename Member>
Field plain(std::string key, Member member) {
  return {key, [member](const RunConfig& c) { return Json(std::invoke(member, c)); },
          [member, key](RunConfig& c, const Json& j) { std::invoke(member, c) = as<V>(j, key); }};
}

template <typename Enum, typename Member, typename Parse>
Field named(std::string key, Member member, Parse parse) {
  return {key,
          [member](const RunConfig& c) { return Json(std::string(to_string(std::invoke(member, c)))); },
          [member, parse, key](RunConfig& c, const Json& j) {
            std::invoke(member, c) = parse(as<std::string>(j, key));
          }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(plain<int>("hops", [](auto& c) -> auto& { return c.tokens.hops; }));
    f.push_back(plain<std::size_t>("topk", [](auto& c) -> auto& { return c.tokens.topk; }));
    f.push_back(plain<double>("ppr_damping", [](auto& c) -> auto& { return c.tokens.ppr_damping; }));
    f.push_back(plain<int>("ppr_steps", [](auto& c) -> auto& { return c.tokens.ppr_steps; }));
    f.push_back(plain<bool>("attr_adj_normalize",
                            [](auto& c) -> auto& { return c.tokens.attr_adj_normalize; }));
    f.push_back(plain<std::size_t>("hidden_dim", [](auto& c) -> auto& { return c.model.hidden_dim; }));
    f.push_back(plain<std::size_t>("ffn_dim", [](auto& c) -> auto& { return c.model.ffn_dim; }));
    f.push_back(plain<std::size_t>("fusion_dim", [](auto& c) -> auto& { return c.model.fusion_dim; }));
    f.push_back(plain<std::size_t>("classifier_dim",
                                   [](auto& c) -> auto& { return c.model.classifier_dim; }));
    f.push_back(plain<int>("layers", [](auto& c) -> auto& { return c.model.layers; }));
    f.push_back(plain<std::size_t>("heads", [](auto& c) -> auto& { return c.model.heads; }));
    f.push_back(plain<double>("dropout", [](auto& c) -> auto& { return c.model.dropout; }));
    f.push_back(plain<double>("attention_dropout",
                              [](auto& c) -> auto& { return c.model.attention_dropout; }));
    f.push_back(named<LayerNormMode>("layer_norm", [](auto& c) -> auto& { return c.model.layer_norm; },
                                     parse_layer_norm_mode));
    f.push_back(plain<bool>("share_encoder", [](auto& c) -> auto& { return c.model.share_encoder; }));
    f.push_back(named<Activation>("activation", [](auto& c) -> auto& { return c.model.activation; },
                                  parse_activation));
    f.push_back(named<FusionMode>("fusion", [](auto& c) -> auto& { return c.model.fusion; },
                                  parse_fusion_mode));
    f.push_back({"sequences", [](const RunConfig& c) { return Json(c.model.sequences.to_string()); },
                 [](RunConfig& c, const Json& j) {
                   c.model.sequences = SequenceMask::parse(as<std::string>(j, "sequences"));
                 }});
    f.push_back(plain<double>("learning_rate", [](auto& c) -> auto& { return c.train.learning_rate; }));
    f.push_back(plain<double>("weight_decay", [](auto& c) -> auto& { return c.train.weight_decay; }));
    f.push_back(plain<std::size_t>("batch_size", [](auto& c) -> auto& { return c.train.batch_size; }));
    f.push_back(plain<int>("max_epochs", [](auto& c) -> auto& { return c.train.max_epochs; }));
    f.push_back(plain<int>("patience", [](auto& c) -> auto& { return c.train.patience; }));
    f.push_back(named<Precision>("precision", [](auto& c) -> auto& { return c.train.precision; },
                                 parse_precision));
    f.push_back({"seeds", [](const RunConfig& c) { return Json(c.seeds); },
                 [](RunConfig& c, const Json& j) {
                   if (!j.is_array()) throw UserError("config: 'seeds' must be an array");
                   c.seeds.clear();
                   for (const auto& s : j) c.seeds.push_back(as<std::uint64_t>(s, "seeds"));
                 }});
    return f;
  }();
  return table;
}

}  // namespace

std::string_view to_string(Precision p) { return p == Precision::kDouble ? "double" : "single"; }

Precision parse_precision(std::string_view s) {
  if (s == "single") return Precision::kSingle;
  if (s == "double") return Precision::kDouble;
  throw std::invalid_argument("precision must be single or double, got '" + std::string(s) + "'");
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (tokens.hops < 0) throw std::invalid_argument("hops must be >= 0");
  if (tokens.topk < 1) throw std::invalid_argument("topk must be >= 1");
  if (!(tokens.ppr_damping > 0.0 && tokens.ppr_damping < 1.0)) {
    throw std::invalid_argument("ppr_damping must lie in (0, 1)");
  }
  if (tokens.ppr_steps < 1) throw std::invalid_argument("ppr_steps must be >= 1");
  if (seeds.empty()) throw std::invalid_argument("seeds must not be empty");
}

const std::vector<std::string>& run_config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

RunConfig parse_run_config(std::string_view json_text) {
  Json doc;
  try {
    doc = Json::parse(json_text);
  } catch (const Json::parse_error& e) {
    throw UserError("config: " + std::string(e.what()));
  }
  if (!doc.is_object()) throw UserError("config: expected a flat JSON object");
  RunConfig cfg;
  for (const auto& [key, value] : doc.items()) {
    const auto& table = fields();
    auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return f.key == key; });
    if (it == table.end()) throw UserError("config: unknown key '" + key + "'");
    try {
      it->set(cfg, value);
    } catch (const std::invalid_argument& e) {
      throw UserError("config: " + std::string(e.what()));
    }
  }
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UserError("config: " + std::string(e.what()));
  }
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  return parse_run_config(detail::read_text_file(path));
}

std::string render_run_config(const RunConfig& cfg) {
  Json doc = Json::object();
  for (const auto& f : fields()) doc[f.key] = f.get(cfg);
  return doc.dump(2) + "\n";
}

}  // namespace ntformer
