#pragma once

// Independent reference computations shared by unit and acceptance tests.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

#include "corelens/refenc.hpp"

namespace oracle {

struct GradientCheck {
  double max_relative_error = 0.0;
  double max_abs_error = 0.0;
};

/// Central differences of <g, encode(E)> over every entry of E, compared
/// entrywise against the analytic gradient with denominator
/// max(|analytic|, |numeric|, floor).
inline GradientCheck encoder_gradient(const corelens::refenc::EncoderWeights& w, const Eigen::MatrixXd& e, int eot,
                                      const Eigen::VectorXd& g, double h = 1e-5, double floor = 1e-6) {
  using corelens::refenc::encode_backward;
  using corelens::refenc::encode_forward;
  const auto fwd = encode_forward(w, e, eot);
  const Eigen::MatrixXd analytic = encode_backward(w, fwd.cache, g);
  GradientCheck out;
  Eigen::MatrixXd probe = e;
  for (Eigen::Index i = 0; i < e.rows(); ++i) {
    for (Eigen::Index j = 0; j < e.cols(); ++j) {
      probe(i, j) = e(i, j) + h;
      const double up = g.dot(encode_forward(w, probe, eot).v_eot);
      probe(i, j) = e(i, j) - h;
      const double down = g.dot(encode_forward(w, probe, eot).v_eot);
      probe(i, j) = e(i, j);
      const double numeric = (up - down) / (2.0 * h);
      const double diff = std::abs(numeric - analytic(i, j));
      const double denom = std::max({std::abs(numeric), std::abs(analytic(i, j)), floor});
      out.max_abs_error = std::max(out.max_abs_error, diff);
      out.max_relative_error = std::max(out.max_relative_error, diff / denom);
    }
  }
  return out;
}

/// Standard normal CDF.
inline double phi(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

}  // namespace oracle
