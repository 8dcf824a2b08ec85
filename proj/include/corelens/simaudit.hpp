#pragma once

// Cosine-similarity audit of one query embedding (typically a text prompt)
// against a set of image embeddings: summary statistics in box-plot form.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "corelens/embstore.hpp"
#include "corelens/error.hpp"
#include "json.hpp"

namespace corelens {

inline double cosine_similarity(const Eigen::Ref<const Eigen::VectorXd>& u, const Eigen::Ref<const Eigen::VectorXd>& v) {
  require(u.size() == v.size(), ErrorKind::Dimension,
          "cosine of vectors with dims " + std::to_string(u.size()) + " and " + std::to_string(v.size()));
  const double nu = u.norm();
  const double nv = v.norm();
  require(nu > 0.0 && nv > 0.0, ErrorKind::Data, "cosine similarity of a zero vector");
  return std::clamp(u.dot(v) / (nu * nv), -1.0, 1.0);
}

struct SimilarityStats {
  std::size_t n = 0;
  double mean = 0.0;
  double median = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
  double min = 0.0;
  double max = 0.0;
  double whisker_low = 0.0;   // smallest value >= q1 - 1.5 IQR
  double whisker_high = 0.0;  // largest value <= q3 + 1.5 IQR
};

/// Linear-interpolation quantile (Hyndman–Fan type 7) of sorted data.
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline SimilarityStats summarize(std::vector<double> values) {
  require(!values.empty(), ErrorKind::Data, "no similarities to summarize");
  std::sort(values.begin(), values.end());
  SimilarityStats s;
  s.n = values.size();
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(s.n);
  s.min = values.front();
  s.max = values.back();
  s.mean = std::clamp(s.mean, s.min, s.max);
  s.median = quantile_sorted(values, 0.5);
  s.q1 = quantile_sorted(values, 0.25);
  s.q3 = quantile_sorted(values, 0.75);
  const double iqr = s.q3 - s.q1;
  const double lo_fence = s.q1 - 1.5 * iqr;
  const double hi_fence = s.q3 + 1.5 * iqr;
  s.whisker_low = *std::lower_bound(values.begin(), values.end(), lo_fence);
  s.whisker_high = *(std::upper_bound(values.begin(), values.end(), hi_fence) - 1);
  return s;
}

struct AuditResult {
  SimilarityStats stats;
  std::vector<double> similarities;  // row order of the image set
};

inline AuditResult audit(const Eigen::VectorXd& query, const EmbeddingSet& images) {
  require(query.size() == images.dim(), ErrorKind::Dimension,
          "query dim " + std::to_string(query.size()) + " vs image dim " + std::to_string(images.dim()));
  AuditResult r;
  r.similarities.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    r.similarities.push_back(cosine_similarity(query, images.row(i).transpose()));
  }
  r.stats = summarize(r.similarities);
  return r;
}

inline nlohmann::json to_json(const SimilarityStats& s) {
  return {{"n", s.n},       {"mean", s.mean}, {"median", s.median}, {"q1", s.q1},
          {"q3", s.q3},     {"min", s.min},   {"max", s.max},       {"whisker_low", s.whisker_low},
          {"whisker_high", s.whisker_high}};
}

inline std::string to_csv(const SimilarityStats& s) {
  std::ostringstream out;
  out.precision(17);
  out << "n,mean,median,q1,q3,min,max,whisker_low,whisker_high\n"
      << s.n << ',' << s.mean << ',' << s.median << ',' << s.q1 << ',' << s.q3 << ',' << s.min << ',' << s.max << ','
      << s.whisker_low << ',' << s.whisker_high << '\n';
  return out.str();
}

}  // namespace corelens
