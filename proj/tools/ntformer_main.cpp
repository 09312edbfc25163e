// Command-line front end: tokenize, train, eval, ablate, sweep, weights, synth.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "ntformer/checkpoint.hpp"
#include "ntformer/dataset_io.hpp"
#include "ntformer/errors.hpp"
#include "ntformer/parallel.hpp"
#include "ntformer/report.hpp"
#include "ntformer/run_config.hpp"
#include "ntformer/token_cache.hpp"
#include "ntformer/training.hpp"

namespace fs = std::filesystem;
using namespace ntformer;
using Json = nlohmann::ordered_json;

namespace {

template <typename T>
std::vector<T> parse_list(const std::string& text, const char* what) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size()) throw UserError(std::string("bad ") + what + " list: " + text);
    out.push_back(static_cast<T>(v));
  }
  if (out.empty()) throw UserError(std::string("empty ") + what + " list");
  return out;
}

Node2ParConfig checked(const Node2ParConfig& cfg, std::size_t n) {
  try {
    cfg.validate(n);
  } catch (const std::invalid_argument& e) {
    throw UserError(e.what());
  }
  return cfg;
}

// Loads the cache at `path` when it matches, otherwise (re)builds it. Fresh
// bundles go through the same f32 rounding as cached ones.
TokenBundle obtain_bundle(const Dataset& data, const Node2ParConfig& cfg,
                          const std::optional<fs::path>& path) {
  checked(cfg, data.graph.num_nodes());
  const std::uint64_t source = token_source_fingerprint(data.graph, data.features);
  if (path && fs::exists(*path)) {
    try {
      // A sidecar from another dataset invalidates the cache; a missing one
      // (cache copied in by hand) falls back to the header check alone.
      const auto key = read_cache_key(*path);
      if (key && *key != source) throw UserError("config mismatch");
      return load_token_cache(*path, cfg, data.graph.num_nodes(), data.features.cols());
    } catch (const UserError& e) {
      if (std::string(e.what()) != "config mismatch") throw;
      std::cerr << "token cache " << path->string() << ": config mismatch, regenerating\n";
    }
  }
  TokenBundle bundle = quantize_bundle(generate_bundle(data.graph, data.features, cfg));
  if (path) {
    save_token_cache(bundle, *path);
    write_cache_key(*path, source);
  }
  return bundle;
}

Report base_report(std::string command, const RunConfig& cfg, const Dataset& data) {
  Report r;
  r.command = std::move(command);
  r.config = cfg;
  r.num_nodes = data.graph.num_nodes();
  r.num_edges = data.graph.num_edges();
  r.feature_dim = data.features.cols();
  r.num_classes = data.labels.num_classes;
  r.edge_homophily = data.graph.num_edges() ? edge_homophily(data.graph, data.labels) : 0.0;
  return r;
}

void write_report(const Report& report, const fs::path& out, const PhaseTimer& timer) {
  fs::create_directories(out);
  write_text(out / "report.json", render_report_json(report));
  write_text(out / "results.csv", render_report_csv(report));
  write_text(out / "curves.csv", render_curves_csv(report));
  write_text(out / "timings.json", timer.render_json());
}

void print_summary(const Report& report) {
  for (const auto& s : report.sections) {
    std::printf("%-14s acc %.4f", s.name.c_str(), s.summary.mean_test_accuracy);
    if (s.summary.std_test_accuracy) std::printf(" +- %.4f", *s.summary.std_test_accuracy);
    std::printf("\n");
  }
}

struct ModelMeta {
  std::size_t input_dim = 0;
  int num_classes = 0;
  std::uint64_t seed = 0;
};

ModelMeta read_meta(const fs::path& dir) {
  std::ifstream in(dir / "model.json");
  if (!in) throw UserError("missing file " + (dir / "model.json").string());
  Json j;
  try {
    in >> j;
    return {j.at("input_dim").get<std::size_t>(), j.at("num_classes").get<int>(),
            j.at("seed").get<std::uint64_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw UserError("model.json: " + std::string(e.what()));
  }
}

template <typename T>
Model<T> load_model(const fs::path& dir, const RunConfig& cfg, const ModelMeta& meta,
                    const Dataset& data) {
  if (meta.input_dim != data.features.cols() || meta.num_classes != data.labels.num_classes) {
    throw UserError("model does not match dataset dimensions");
  }
  Model<T> model(cfg.model, meta.input_dim, meta.num_classes, meta.seed);
  load_checkpoint(model.parameters(), dir / "model.ntfw");
  return model;
}

const std::vector<NodeId>& split_ids(const Dataset& data, const std::string& split) {
  if (split == "train") return data.splits.train;
  if (split == "val") return data.splits.val;
  if (split == "test") return data.splits.test;
  throw UserError("split must be train, val or test");
}

// --- subcommands ---------------------------------------------------------

struct Common {
  std::string data;
  std::string tokens;
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string seeds;

  std::optional<fs::path> tokens_path() const {
    return tokens.empty() ? std::nullopt : std::optional<fs::path>(tokens);
  }
  RunConfig run_config() const {
    RunConfig cfg = config.empty() ? RunConfig{} : load_run_config(config);
    if (seed) cfg.seeds = {*seed};
    if (!seeds.empty()) cfg.seeds = parse_list<std::uint64_t>(seeds, "seed");
    return cfg;
  }
};

int run_tokenize(const Common& c, const Node2ParConfig& cfg) {
  PhaseTimer timer;
  timer.start("load");
  Dataset data = load_dataset(c.data);
  checked(cfg, data.graph.num_nodes());
  timer.start("tokenize");
  TokenBundle bundle = generate_bundle(data.graph, data.features, cfg);
  timer.start("write");
  save_token_cache(bundle, c.out);
  write_cache_key(c.out, token_source_fingerprint(data.graph, data.features));
  timer.stop();
  std::cout << timer.render_json();
  return 0;
}

int run_train(const Common& c) {
  RunConfig cfg = c.run_config();
  cfg.seeds.resize(1);
  PhaseTimer timer;
  timer.start("load");
  Dataset data = load_dataset(c.data);
  timer.start("tokenize");
  TokenBundle bundle = obtain_bundle(data, cfg.tokens, c.tokens_path());
  timer.start("train");
  const fs::path out(c.out);
  fs::create_directories(out);
  TrainConfig tc = cfg.train;
  TrainedModelSink sink;
  sink.single = [&](std::uint64_t, Model<float>& m) {
    save_checkpoint(m.parameters(), out / "model.ntfw");
  };
  sink.dual = [&](std::uint64_t, Model<double>& m) {
    save_checkpoint(m.parameters(), out / "model.ntfw");
  };
  Report report = base_report("train", cfg, data);
  report.sections.push_back({"train", std::nullopt,
                             run_seeds(data, bundle, cfg.model, tc, cfg.seeds, &sink)});
  timer.stop();
  write_text(out / "config.json", render_run_config(cfg));
  Json meta = Json::object();
  meta["input_dim"] = data.features.cols();
  meta["num_classes"] = data.labels.num_classes;
  meta["seed"] = cfg.seeds.front();
  write_text(out / "model.json", meta.dump(2) + "\n");
  write_report(report, out, timer);
  print_summary(report);
  return 0;
}

template <typename Fn>
int with_model(const std::string& model_dir, const Dataset& data, Fn&& fn) {
  const fs::path dir(model_dir);
  const RunConfig cfg = load_run_config(dir / "config.json");
  const ModelMeta meta = read_meta(dir);
  if (cfg.train.precision == Precision::kDouble) {
    Model<double> m = load_model<double>(dir, cfg, meta, data);
    return fn(m, cfg);
  }
  Model<float> m = load_model<float>(dir, cfg, meta, data);
  return fn(m, cfg);
}

int run_eval(const Common& c, const std::string& model_dir, const std::string& split) {
  Dataset data = load_dataset(c.data);
  return with_model(model_dir, data, [&](auto& model, const RunConfig& cfg) {
    using T = std::remove_cvref_t<decltype(model.parameters()[0].value[0])>;
    TokenBundle bundle = obtain_bundle(data, cfg.tokens, c.tokens_path());
    auto tables = TokenTables<T>::from(bundle, data.features);
    const auto& ids = split_ids(data, split);
    if (ids.empty()) throw UserError("split '" + split + "' is empty");
    Json j = Json::object();
    j["split"] = split;
    j["nodes"] = ids.size();
    j["accuracy"] = evaluate(model, tables, data.labels, ids);
    std::cout << j.dump(2) << "\n";
    return 0;
  });
}

int run_weights(const Common& c, const std::string& model_dir, const std::string& split) {
  Dataset data = load_dataset(c.data);
  return with_model(model_dir, data, [&](auto& model, const RunConfig& cfg) {
    using T = std::remove_cvref_t<decltype(model.parameters()[0].value[0])>;
    TokenBundle bundle = obtain_bundle(data, cfg.tokens, c.tokens_path());
    auto tables = TokenTables<T>::from(bundle, data.features);
    const auto& ids = split_ids(data, split);
    if (ids.empty()) throw UserError("split '" + split + "' is empty");
    auto w = mean_fusion_weights(model, tables, ids);
    if (!w) throw UserError("concat fusion has no fusion weights");
    Json j = Json::object();
    for (std::size_t s = 0; s < kNumSequences; ++s) {
      j[std::string(sequence_name(static_cast<SequenceType>(s)))] = (*w)[s];
    }
    std::cout << j.dump(2) << "\n";
    return 0;
  });
}

int run_ablate(const Common& c, const std::string& sequences, const std::string& fusions) {
  RunConfig cfg = c.run_config();
  PhaseTimer timer;
  timer.start("load");
  Dataset data = load_dataset(c.data);
  timer.start("tokenize");
  TokenBundle bundle = obtain_bundle(data, cfg.tokens, c.tokens_path());
  timer.start("train");
  const std::vector<SequenceType> singles = SequenceMask::parse(sequences).members();
  std::vector<FusionMode> modes;
  std::stringstream ss(fusions);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) modes.push_back(parse_fusion_mode(item));
  }
  Report report = base_report("ablate", cfg, data);
  for (auto& v : ablate(data, bundle, cfg.model, cfg.train, singles, modes, cfg.seeds)) {
    report.sections.push_back({v.name, std::nullopt, std::move(v.summary)});
  }
  timer.stop();
  write_report(report, c.out, timer);
  print_summary(report);
  return 0;
}

int run_sweep(const Common& c, const std::string& param, const std::string& values,
              const std::string& cache_dir) {
  RunConfig cfg = c.run_config();
  PhaseTimer timer;
  timer.start("load");
  Dataset data = load_dataset(c.data);
  timer.start("sweep");
  const SweepParam p = parse_sweep_param(param);
  const auto vals = parse_list<std::size_t>(values, "value");
  BundleProvider provider = [&](const Node2ParConfig& tc) {
    std::optional<fs::path> path;
    if (!cache_dir.empty()) {
      fs::create_directories(cache_dir);
      path = fs::path(cache_dir) /
             ("tokens_K" + std::to_string(tc.hops) + "_nk" + std::to_string(tc.topk) + ".n2pt");
    }
    return obtain_bundle(data, tc, path);
  };
  Report report = base_report("sweep", cfg, data);
  for (auto& row : sweep(data, p, vals, cfg.tokens, cfg.model, cfg.train, cfg.seeds, provider)) {
    report.sections.push_back({param + "=" + std::to_string(row.value), row.value,
                               std::move(row.summary)});
  }
  timer.stop();
  write_report(report, c.out, timer);
  print_summary(report);
  return 0;
}

struct SynthOptions {
  std::string kind = "sbm";
  std::size_t n_per_class = 200;
  double p_in = 0.05;
  double p_out = 0.005;
  std::size_t classes = 4;
  std::size_t edges = 2000;
  std::size_t dim = 16;
  double separation = 1.0;
  std::size_t words = 10;
  double purity = 0.3;
  double train_fraction = 0.6;
  double val_fraction = 0.2;
  std::uint64_t seed = 0;
};

int run_synth(const std::string& out, const SynthOptions& o) {
  SyntheticGraph g;
  if (o.kind == "sbm") {
    g = generate_sbm(o.n_per_class, o.p_in, o.p_out, o.dim, o.separation, o.seed);
  } else if (o.kind == "random") {
    g = generate_feature_labeled_random_graph(o.classes, o.n_per_class, o.edges, o.dim, o.words,
                                              o.purity, o.seed);
  } else {
    throw UserError("synth kind must be sbm or random");
  }
  Dataset data{std::move(g.graph), std::move(g.features), std::move(g.labels), {}};
  data.splits = stratified_split(data.labels, o.train_fraction, o.val_fraction, o.seed);
  save_dataset(data, out);
  std::printf("n=%zu edges=%zu homophily=%.4f\n", data.graph.num_nodes(), data.graph.num_edges(),
              data.graph.num_edges() ? edge_homophily(data.graph, data.labels) : 0.0);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ntformer: tokenized graph transformer for node classification"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for all subcommands");

  Common c;
  Node2ParConfig tok;
  std::string model_dir, split = "test", sequences = "ne_t,ne_a,no_t,no_a", fusions = "adaptive";
  std::string param, values, cache_dir;
  SynthOptions synth;

  auto* tokenize = app.add_subcommand("tokenize", "Build a token cache for a dataset");
  tokenize->add_option("--data", c.data, "Dataset directory")->required();
  tokenize->add_option("--out", c.out, "Token cache file")->required();
  tokenize->add_option("--hops", tok.hops, "Neighborhood hops K")->capture_default_str();
  tokenize->add_option("--topk", tok.topk, "Sampled nodes n_k")->capture_default_str();
  tokenize->add_option("--ppr-damping", tok.ppr_damping, "PPR damping r")->capture_default_str();
  tokenize->add_option("--ppr-steps", tok.ppr_steps, "PPR steps")->capture_default_str();
  tokenize->add_flag("--attr-adj-normalize", tok.attr_adj_normalize,
                     "Row-normalize the attribute-weighted adjacency");

  auto* train = app.add_subcommand("train", "Train one model and write a checkpoint");
  train->add_option("--data", c.data, "Dataset directory")->required();
  train->add_option("--tokens", c.tokens, "Token cache file (built if missing)");
  train->add_option("--config", c.config, "Run config JSON");
  train->add_option("--seed", c.seed, "Seed");
  train->add_option("--out", c.out, "Output directory")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a trained model");
  eval->add_option("--data", c.data, "Dataset directory")->required();
  eval->add_option("--tokens", c.tokens, "Token cache file");
  eval->add_option("--model", model_dir, "Model directory written by train")->required();
  eval->add_option("--split", split, "train, val or test")->capture_default_str();

  auto* abl = app.add_subcommand("ablate", "Single-sequence and fusion-mode comparison");
  abl->add_option("--data", c.data, "Dataset directory")->required();
  abl->add_option("--tokens", c.tokens, "Token cache file");
  abl->add_option("--config", c.config, "Run config JSON");
  abl->add_option("--sequences", sequences, "Single-sequence variants")->capture_default_str();
  abl->add_option("--fusion", fusions, "Fusion modes for the full model")->capture_default_str();
  abl->add_option("--seeds", c.seeds, "Comma-separated seeds");
  abl->add_option("--out", c.out, "Output directory")->required();

  auto* swp = app.add_subcommand("sweep", "Sweep hops or topk");
  swp->add_option("--data", c.data, "Dataset directory")->required();
  swp->add_option("--config", c.config, "Run config JSON");
  swp->add_option("--param", param, "hops or topk")->required();
  swp->add_option("--values", values, "Comma-separated values")->required();
  swp->add_option("--seeds", c.seeds, "Comma-separated seeds");
  swp->add_option("--cache-dir", cache_dir, "Directory for per-value token caches");
  swp->add_option("--out", c.out, "Output directory")->required();

  auto* weights = app.add_subcommand("weights", "Mean fusion weight per sequence");
  weights->add_option("--model", model_dir, "Model directory written by train")->required();
  weights->add_option("--data", c.data, "Dataset directory")->required();
  weights->add_option("--tokens", c.tokens, "Token cache file");
  weights->add_option("--split", split, "train, val or test")->capture_default_str();

  auto* syn = app.add_subcommand("synth", "Write a synthetic dataset");
  syn->add_option("--kind", synth.kind, "sbm or random")->capture_default_str();
  syn->add_option("--out", c.out, "Output directory")->required();
  syn->add_option("--n-per-class", synth.n_per_class)->capture_default_str();
  syn->add_option("--p-in", synth.p_in)->capture_default_str();
  syn->add_option("--p-out", synth.p_out)->capture_default_str();
  syn->add_option("--classes", synth.classes, "Classes (random kind)")->capture_default_str();
  syn->add_option("--edges", synth.edges, "Edges (random kind)")->capture_default_str();
  syn->add_option("--dim", synth.dim, "Feature dimension or vocabulary size")->capture_default_str();
  syn->add_option("--separation", synth.separation, "Class mean separation (sbm)")->capture_default_str();
  syn->add_option("--words", synth.words, "Words per node (random kind)")->capture_default_str();
  syn->add_option("--purity", synth.purity, "Class-word probability (random kind)")->capture_default_str();
  syn->add_option("--train-fraction", synth.train_fraction)->capture_default_str();
  syn->add_option("--val-fraction", synth.val_fraction)->capture_default_str();
  syn->add_option("--seed", synth.seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (*tokenize) return run_tokenize(c, tok);
    if (*train) return run_train(c);
    if (*eval) return run_eval(c, model_dir, split);
    if (*abl) return run_ablate(c, sequences, fusions);
    if (*swp) return run_sweep(c, param, values, cache_dir);
    if (*weights) return run_weights(c, model_dir, split);
    if (*syn) return run_synth(c.out, synth);
  } catch (const UserError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
