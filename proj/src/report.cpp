#include "ntformer/report.hpp"

#include <cstdio>
#include <sstream>

#include "binary_io.hpp"
#include "json.hpp"

namespace ntformer {

namespace {

using Json = nlohmann::ordered_json;

Json fusion_json(const FusionWeights& w) {
  Json j = Json::object();
  for (std::size_t s = 0; s < kNumSequences; ++s) {
    j[std::string(sequence_name(static_cast<SequenceType>(s)))] = w[s];
  }
  return j;
}

Json summary_json(const SeedSummary& s) {
  Json j = Json::object();
  j["mean_test_accuracy"] = s.mean_test_accuracy;
  j["std_test_accuracy"] = s.std_test_accuracy ? Json(*s.std_test_accuracy) : Json(nullptr);
  j["mean_fusion_weights"] = s.mean_fusion_weights ? fusion_json(*s.mean_fusion_weights) : Json(nullptr);
  Json runs = Json::array();
  for (const auto& r : s.runs) {
    Json run = Json::object();
    run["seed"] = r.seed;
    run["epochs"] = r.metrics.epochs.size();
    run["best_epoch"] = r.metrics.best_epoch;
    run["best_val_accuracy"] = r.metrics.best_val_accuracy;
    run["train_accuracy"] = r.metrics.train_accuracy;
    run["test_accuracy"] = r.metrics.test_accuracy;
    run["fusion_weights"] =
        r.metrics.fusion_weights ? fusion_json(*r.metrics.fusion_weights) : Json(nullptr);
    runs.push_back(std::move(run));
  }
  j["runs"] = std::move(runs);
  return j;
}

// Shortest round-trip text for a double, locale independent.
std::string number(double v) { return Json(v).dump(); }

}  // namespace

std::string render_report_json(const Report& report) {
  Json doc = Json::object();
  doc["command"] = report.command;
  doc["config"] = Json::parse(render_run_config(report.config));
  Json data = Json::object();
  data["num_nodes"] = report.num_nodes;
  data["num_edges"] = report.num_edges;
  data["feature_dim"] = report.feature_dim;
  data["num_classes"] = report.num_classes;
  data["edge_homophily"] = report.edge_homophily;
  doc["dataset"] = std::move(data);
  Json sections = Json::array();
  for (const auto& s : report.sections) {
    Json j = Json::object();
    j["name"] = s.name;
    if (s.value) j["value"] = *s.value;
    j["summary"] = summary_json(s.summary);
    sections.push_back(std::move(j));
  }
  doc["results"] = std::move(sections);
  return doc.dump(2) + "\n";
}

std::string render_report_csv(const Report& report) {
  std::ostringstream out;
  out << "section,value,seed,epochs,best_epoch,best_val_accuracy,train_accuracy,test_accuracy";
  for (std::size_t s = 0; s < kNumSequences; ++s) {
    out << ",alpha_" << sequence_name(static_cast<SequenceType>(s));
  }
  out << "\n";
  for (const auto& sec : report.sections) {
    for (const auto& r : sec.summary.runs) {
      out << sec.name << ',' << (sec.value ? std::to_string(*sec.value) : "") << ',' << r.seed << ','
          << r.metrics.epochs.size() << ',' << r.metrics.best_epoch << ','
          << number(r.metrics.best_val_accuracy) << ',' << number(r.metrics.train_accuracy) << ','
          << number(r.metrics.test_accuracy);
      for (std::size_t s = 0; s < kNumSequences; ++s) {
        out << ',';
        if (r.metrics.fusion_weights) out << number((*r.metrics.fusion_weights)[s]);
      }
      out << "\n";
    }
  }
  return out.str();
}

std::string render_curves_csv(const Report& report) {
  std::ostringstream out;
  out << "section,value,seed,epoch,train_loss,val_accuracy\n";
  for (const auto& sec : report.sections) {
    for (const auto& r : sec.summary.runs) {
      for (const auto& e : r.metrics.epochs) {
        out << sec.name << ',' << (sec.value ? std::to_string(*sec.value) : "") << ',' << r.seed
            << ',' << e.epoch << ',' << number(e.train_loss) << ',' << number(e.val_accuracy)
            << "\n";
      }
    }
  }
  return out.str();
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  detail::atomic_write(path, text);
}

void PhaseTimer::start(std::string phase) {
  if (!current_.empty()) stop();
  current_ = std::move(phase);
  begin_ = std::chrono::steady_clock::now();
}

void PhaseTimer::stop() {
  if (current_.empty()) return;
  const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - begin_;
  phases_.emplace_back(std::move(current_), dt.count());
  current_.clear();
}

std::string PhaseTimer::render_json() const {
  Json doc = Json::object();
  for (const auto& [name, seconds] : phases_) doc[name] = seconds;
  return doc.dump(2) + "\n";
}

}  // namespace ntformer
