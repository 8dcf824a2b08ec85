#pragma once

// Group-wise accuracy accounting. Worst-group accuracy (WGA) is the minimum
// per-group accuracy over the groups present; both the sample-weighted and
// the group-mean average are reported.

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "corelens/embstore.hpp"
#include "corelens/error.hpp"
#include "json.hpp"

namespace corelens {

struct GroupStats {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy = 0.0;
};

struct GroupReport {
  std::map<int, GroupStats> per_group;  // present groups only
  std::vector<int> absent_groups;       // ids in [0, n_groups) with no samples
  int n_groups = 0;
  double wga = 0.0;
  double best_group = 0.0;
  double avg_sample = 0.0;
  double avg_group = 0.0;
};

inline GroupReport group_report(std::span<const int> predictions, std::span<const int> labels,
                                std::span<const int> groups, int n_groups) {
  require(predictions.size() == labels.size() && labels.size() == groups.size(), ErrorKind::Consistency,
          std::to_string(predictions.size()) + " predictions for " + std::to_string(labels.size()) + " samples");
  require(!labels.empty(), ErrorKind::Data, "cannot report on zero samples");
  require(n_groups >= 1, ErrorKind::Data, "n_groups must be >= 1");
  GroupReport r;
  r.n_groups = n_groups;
  std::vector<std::size_t> correct(static_cast<std::size_t>(n_groups), 0), total(correct.size(), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(groups[i] >= 0 && groups[i] < n_groups, ErrorKind::Data, "group id out of range at row " + std::to_string(i),
            i);
    const auto g = static_cast<std::size_t>(groups[i]);
    ++total[g];
    if (predictions[i] == labels[i]) ++correct[g];
  }
  std::size_t sum_correct = 0;
  double sum_acc = 0.0;
  r.wga = 1.0;
  r.best_group = 0.0;
  for (int g = 0; g < n_groups; ++g) {
    const auto k = static_cast<std::size_t>(g);
    if (total[k] == 0) {
      r.absent_groups.push_back(g);
      continue;
    }
    const double acc = static_cast<double>(correct[k]) / static_cast<double>(total[k]);
    r.per_group[g] = {correct[k], total[k], acc};
    r.wga = std::min(r.wga, acc);
    r.best_group = std::max(r.best_group, acc);
    sum_correct += correct[k];
    sum_acc += acc;
  }
  r.avg_sample = static_cast<double>(sum_correct) / static_cast<double>(labels.size());
  r.avg_group = sum_acc / static_cast<double>(r.per_group.size());
  return r;
}

inline GroupReport group_report(std::span<const int> predictions, const EmbeddingSet& set) {
  require(predictions.size() == set.size(), ErrorKind::Consistency,
          std::to_string(predictions.size()) + " predictions for " + std::to_string(set.size()) + " samples");
  return group_report(predictions, set.labels(), set.groups(), set.num_groups());
}

struct GroupDelta {
  int group = 0;
  double before = 0.0;
  double after = 0.0;
  double delta = 0.0;
};

struct ReportComparison {
  std::vector<GroupDelta> groups;
  double wga_delta = 0.0;
  double avg_sample_delta = 0.0;
  double avg_group_delta = 0.0;
};

/// Per-group after-minus-before accuracy. Both reports must cover the same
/// groups.
inline ReportComparison compare_reports(const GroupReport& before, const GroupReport& after) {
  require(before.n_groups == after.n_groups, ErrorKind::Consistency, "reports have different group universes");
  ReportComparison c;
  for (const auto& [g, stats] : before.per_group) {
    const auto it = after.per_group.find(g);
    require(it != after.per_group.end(), ErrorKind::Consistency,
            "group " + std::to_string(g) + " missing from the second report", static_cast<std::size_t>(g));
    c.groups.push_back({g, stats.accuracy, it->second.accuracy, it->second.accuracy - stats.accuracy});
  }
  require(after.per_group.size() == before.per_group.size(), ErrorKind::Consistency,
          "second report has groups the first lacks");
  c.wga_delta = after.wga - before.wga;
  c.avg_sample_delta = after.avg_sample - before.avg_sample;
  c.avg_group_delta = after.avg_group - before.avg_group;
  return c;
}

struct SweepRow {
  std::string task;
  double best_group = 0.0;
  double worst_group = 0.0;
  double avg_group = 0.0;
};

/// Best, worst and mean group accuracy per task, ascending by mean.
inline std::vector<SweepRow> sweep_report(const std::vector<std::pair<std::string, GroupReport>>& tasks) {
  require(!tasks.empty(), ErrorKind::Data, "sweep needs at least one task");
  std::vector<SweepRow> rows;
  rows.reserve(tasks.size());
  for (const auto& [name, r] : tasks) rows.push_back({name, r.best_group, r.wga, r.avg_group});
  std::stable_sort(rows.begin(), rows.end(),
                   [](const SweepRow& a, const SweepRow& b) { return a.avg_group < b.avg_group; });
  return rows;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const GroupReport& r) {
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& [g, s] : r.per_group) {
    groups.push_back({{"group", g}, {"correct", s.correct}, {"total", s.total}, {"accuracy", s.accuracy}});
  }
  return {{"n_groups", r.n_groups},
          {"per_group", groups},
          {"absent_groups", r.absent_groups},
          {"wga", r.wga},
          {"best_group", r.best_group},
          {"avg_sample", r.avg_sample},
          {"avg_group", r.avg_group}};
}

inline GroupReport report_from_json(const nlohmann::json& j) {
  try {
    GroupReport r;
    r.n_groups = j.at("n_groups").get<int>();
    for (const auto& g : j.at("per_group")) {
      r.per_group[g.at("group").get<int>()] = {g.at("correct").get<std::size_t>(), g.at("total").get<std::size_t>(),
                                               g.at("accuracy").get<double>()};
    }
    r.absent_groups = j.at("absent_groups").get<std::vector<int>>();
    r.wga = j.at("wga").get<double>();
    r.best_group = j.at("best_group").get<double>();
    r.avg_sample = j.at("avg_sample").get<double>();
    r.avg_group = j.at("avg_group").get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("group report: ") + e.what());
  }
}

inline std::string to_csv(const GroupReport& r) {
  std::ostringstream out;
  out.precision(17);
  out << "group,correct,total,accuracy\n";
  for (const auto& [g, s] : r.per_group) out << g << ',' << s.correct << ',' << s.total << ',' << s.accuracy << '\n';
  return out.str();
}

inline nlohmann::json to_json(const ReportComparison& c) {
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& d : c.groups) {
    groups.push_back({{"group", d.group}, {"before", d.before}, {"after", d.after}, {"delta", d.delta}});
  }
  return {{"groups", groups},
          {"wga_delta", c.wga_delta},
          {"avg_sample_delta", c.avg_sample_delta},
          {"avg_group_delta", c.avg_group_delta}};
}

inline std::string to_csv(const ReportComparison& c) {
  std::ostringstream out;
  out.precision(17);
  out << "group,before,after,delta\n";
  for (const auto& d : c.groups) out << d.group << ',' << d.before << ',' << d.after << ',' << d.delta << '\n';
  return out.str();
}

inline std::string to_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out.precision(17);
  out << "task,best_group,worst_group,avg_group\n";
  for (const auto& r : rows) out << r.task << ',' << r.best_group << ',' << r.worst_group << ',' << r.avg_group << '\n';
  return out.str();
}

inline nlohmann::json to_json(const std::vector<SweepRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    out.push_back({{"task", r.task}, {"best_group", r.best_group}, {"worst_group", r.worst_group},
                   {"avg_group", r.avg_group}});
  }
  return out;
}

}  // namespace corelens
