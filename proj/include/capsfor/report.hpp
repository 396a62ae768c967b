#pragma once

// Per-sample score files (JSON lines) and the aggregate score report.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "capsfor/errors.hpp"
#include "capsfor/metrics.hpp"
#include "capsfor/pipeline.hpp"

namespace capsfor {

/// One scored unit: an image, frame or patch. Class 0 is "real".
struct ScoreRecord {
  std::string sample_id;
  std::string group_id;
  std::size_t label = 0;
  std::vector<double> probs;

  friend bool operator==(const ScoreRecord&, const ScoreRecord&) = default;
};

inline void to_json(nlohmann::json& j, const ScoreRecord& r) {
  j = nlohmann::json{{"sample_id", r.sample_id}, {"group_id", r.group_id}, {"label", r.label}, {"probs", r.probs}};
}

inline void from_json(const nlohmann::json& j, ScoreRecord& r) {
  j.at("sample_id").get_to(r.sample_id);
  j.at("group_id").get_to(r.group_id);
  j.at("label").get_to(r.label);
  j.at("probs").get_to(r.probs);
}

inline void write_scores(std::ostream& out, const std::vector<ScoreRecord>& scores) {
  for (const auto& s : scores) out << nlohmann::json(s).dump() << '\n';
}

inline void write_scores(const std::filesystem::path& path, const std::vector<ScoreRecord>& scores) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  write_scores(out, scores);
}

inline std::vector<ScoreRecord> read_scores(std::istream& in) {
  std::vector<ScoreRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<ScoreRecord>());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("score file line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<ScoreRecord> read_scores(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return read_scores(in);
}

/**
 * Averages the probabilities of every group (video or source image) in
 * order of first appearance; `per_group` > 0 keeps only that many leading
 * members of each group.
 */
inline std::vector<ScoreRecord> aggregate_by_group(const std::vector<ScoreRecord>& scores, std::size_t per_group = 0) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const ScoreRecord*>> groups;
  for (const auto& s : scores) {
    auto [it, fresh] = groups.try_emplace(s.group_id);
    if (fresh) order.push_back(s.group_id);
    if (per_group == 0 || it->second.size() < per_group) it->second.push_back(&s);
  }
  std::vector<ScoreRecord> out;
  for (const auto& g : order) {
    const auto& members = groups[g];
    std::vector<std::vector<double>> probs;
    for (const auto* m : members) {
      if (m->label != members.front()->label) throw DataError("group '" + g + "' mixes labels");
      probs.push_back(m->probs);
    }
    out.push_back({g, g, members.front()->label, aggregate_scores(probs)});
  }
  return out;
}

/// Probability that a sample is not real.
inline double fake_score(const ScoreRecord& r) {
  return r.probs.size() == 2 ? r.probs[1] : 1.0 - r.probs.at(0);
}

/// Decision rule: threshold on the fake probability for two classes, argmax otherwise.
inline std::size_t decide(const ScoreRecord& r, double threshold = 0.5) {
  if (r.probs.size() == 2) return r.probs[1] >= threshold ? 1 : 0;
  return static_cast<std::size_t>(std::max_element(r.probs.begin(), r.probs.end()) - r.probs.begin());
}

struct MetricSummary {
  std::size_t count = 0;
  double accuracy = 0;
  Confusion confusion{2};
  std::vector<double> per_class;
  double threshold = 0.5;
  // Real-vs-fake metrics; absent when a split holds only one side.
  std::optional<double> eer;
  std::optional<ErrorRates> rates;
  std::optional<double> hter;
  std::vector<RocPoint> roc;
};

inline MetricSummary summarize(const std::vector<ScoreRecord>& scores, std::size_t classes, double threshold = 0.5) {
  if (scores.empty()) throw DataError("cannot summarise an empty score list");
  MetricSummary m;
  m.count = scores.size();
  m.threshold = threshold;
  m.confusion = Confusion(classes);
  std::vector<double> pos, neg;
  for (const auto& s : scores) {
    if (s.probs.size() != classes) throw DimensionError("score '" + s.sample_id + "' has the wrong number of classes");
    m.confusion.add(s.label, decide(s, threshold));
    (s.label == 0 ? neg : pos).push_back(fake_score(s));
  }
  m.accuracy = accuracy(m.confusion);
  m.per_class = per_class_accuracy(m.confusion);
  if (!pos.empty() && !neg.empty()) {
    m.eer = eer(pos, neg);
    m.rates = error_rates(pos, neg, threshold);
    m.hter = hter(m.rates->far, m.rates->frr);
    m.roc = roc(pos, neg);
  }
  return m;
}

inline nlohmann::json to_json(const MetricSummary& m) {
  nlohmann::json j;
  j["count"] = m.count;
  j["accuracy"] = m.accuracy;
  j["per_class_accuracy"] = m.per_class;
  nlohmann::json conf = nlohmann::json::array();
  for (std::size_t t = 0; t < m.confusion.classes(); ++t) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t p = 0; p < m.confusion.classes(); ++p) row.push_back(m.confusion.at(t, p));
    conf.push_back(row);
  }
  j["confusion"] = conf;
  j["threshold"] = m.threshold;
  j["eer"] = m.eer ? nlohmann::json(*m.eer) : nlohmann::json(nullptr);
  j["far"] = m.rates ? nlohmann::json(m.rates->far) : nlohmann::json(nullptr);
  j["frr"] = m.rates ? nlohmann::json(m.rates->frr) : nlohmann::json(nullptr);
  j["hter"] = m.hter ? nlohmann::json(*m.hter) : nlohmann::json(nullptr);
  return j;
}

inline std::string roc_csv(const MetricSummary& m) {
  std::ostringstream os;
  os << "threshold,far,tpr\n";
  for (const auto& p : m.roc) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", p.threshold, p.far, p.tpr());
    os << buf;
  }
  return os.str();
}

inline std::string summary_table(const std::map<std::string, MetricSummary>& levels) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-8s %8s %10s %10s %10s\n", "level", "count", "accuracy", "EER", "HTER");
  os << buf;
  for (const auto& [name, m] : levels) {
    auto pct = [](std::optional<double> v) { return v ? *v * 100.0 : -1.0; };
    std::snprintf(buf, sizeof buf, "%-8s %8zu %9.2f%% %9.2f%% %9.2f%%\n", name.c_str(), m.count, m.accuracy * 100.0,
                  pct(m.eer), pct(m.hter));
    os << buf;
  }
  return os.str();
}

}  // namespace capsfor
