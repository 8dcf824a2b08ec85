#pragma once

// Background-subspace removal. Given background vectors b_1..b_m spanning W,
// an embedding v splits as v = v_W + v_perp with v_perp = (I - B (B^T B)^-1 B^T) v.
// Two routes compute the projector: the literal Gram-inverse form (default)
// and I - Q Q^T from a modified Gram–Schmidt basis. They are cross-checked
// in tests.

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "corelens/embstore.hpp"
#include "corelens/error.hpp"

namespace corelens {

inline constexpr double kDefaultDropTolerance = 1e-10;
inline constexpr double kMaxGramCondition = 1e8;

class BackgroundBasis {
 public:
  /// Rejects (does not drop) a vector whose Gram–Schmidt residual falls
  /// below drop_tolerance times its own norm.
  static BackgroundBasis build(std::span<const Eigen::VectorXd> vectors,
                               double drop_tolerance = kDefaultDropTolerance) {
    require(!vectors.empty(), ErrorKind::Data, "background basis needs at least one vector");
    const Eigen::Index d = vectors.front().size();
    require(d >= 1, ErrorKind::Data, "background vectors must be non-empty");
    require(static_cast<Eigen::Index>(vectors.size()) <= d, ErrorKind::Rank,
            std::to_string(vectors.size()) + " background vectors exceed dimension " + std::to_string(d));
    Eigen::MatrixXd b(d, static_cast<Eigen::Index>(vectors.size()));
    for (std::size_t k = 0; k < vectors.size(); ++k) {
      require(vectors[k].size() == d, ErrorKind::Dimension,
              "background vector " + std::to_string(k) + " has dim " + std::to_string(vectors[k].size()), k);
      b.col(static_cast<Eigen::Index>(k)) = vectors[k];
    }
    return from_columns(std::move(b), drop_tolerance);
  }

  static BackgroundBasis from_columns(Eigen::MatrixXd columns, double drop_tolerance = kDefaultDropTolerance) {
    const Eigen::Index d = columns.rows();
    const Eigen::Index m = columns.cols();
    require(m >= 1 && m <= d, ErrorKind::Rank, "need 1 <= m <= D background vectors");
    Eigen::MatrixXd q(d, m);
    for (Eigen::Index k = 0; k < m; ++k) {
      const auto idx = static_cast<std::size_t>(k);
      require(columns.col(k).allFinite(), ErrorKind::Data, "background vector " + std::to_string(k) + " is not finite",
              idx);
      const double norm = columns.col(k).norm();
      require(norm > 0.0, ErrorKind::Data, "background vector " + std::to_string(k) + " is zero", idx);
      Eigen::VectorXd r = columns.col(k);
      // Two MGS sweeps keep Q orthonormal to working precision.
      for (int pass = 0; pass < 2; ++pass) {
        for (Eigen::Index j = 0; j < k; ++j) r -= q.col(j).dot(r) * q.col(j);
      }
      const double residual = r.norm();
      require(residual >= drop_tolerance * norm, ErrorKind::Rank,
              "background vector " + std::to_string(k) + " is linearly dependent on earlier vectors", idx);
      q.col(k) = r / residual;
    }
    const Eigen::MatrixXd gram = columns.transpose() * columns;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram, Eigen::EigenvaluesOnly);
    const double lo = eig.eigenvalues().minCoeff();
    const double hi = eig.eigenvalues().maxCoeff();
    const double cond = lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
    return BackgroundBasis(std::move(columns), std::move(q), cond);
  }

  int dim() const { return static_cast<int>(columns_.rows()); }
  int size() const { return static_cast<int>(columns_.cols()); }
  int rank() const { return static_cast<int>(orthonormal_.cols()); }
  const Eigen::MatrixXd& columns() const { return columns_; }
  const Eigen::MatrixXd& orthonormal() const { return orthonormal_; }
  /// Spectral condition number of B^T B.
  double condition_estimate() const { return condition_; }

 private:
  BackgroundBasis(Eigen::MatrixXd columns, Eigen::MatrixXd q, double cond)
      : columns_(std::move(columns)), orthonormal_(std::move(q)), condition_(cond) {}

  Eigen::MatrixXd columns_;
  Eigen::MatrixXd orthonormal_;
  double condition_;
};

enum class ProjectionRoute { GramInverse, Orthonormal };

class Projector {
 public:
  explicit Projector(Eigen::MatrixXd p) : p_(std::move(p)) {}

  int dim() const { return static_cast<int>(p_.rows()); }
  const Eigen::MatrixXd& matrix() const { return p_; }

  Eigen::VectorXd apply(const Eigen::VectorXd& v) const {
    require(v.size() == p_.cols(), ErrorKind::Dimension,
            "vector dim " + std::to_string(v.size()) + " vs projector dim " + std::to_string(p_.cols()));
    return p_ * v;
  }

  /// Row-wise P x; labels and metadata pass through untouched.
  EmbeddingSet apply(const EmbeddingSet& set) const {
    require(set.dim() == dim(), ErrorKind::Dimension,
            "set dim " + std::to_string(set.dim()) + " vs projector dim " + std::to_string(dim()));
    return set.with_rows(set.rows() * p_.transpose());
  }

 private:
  Eigen::MatrixXd p_;
};

/// P = I - B (B^T B)^-1 B^T with the Gram solve done by Cholesky.
inline Projector projector_matrix(const BackgroundBasis& basis) {
  require(basis.condition_estimate() <= kMaxGramCondition, ErrorKind::Conditioning,
          "Gram matrix condition estimate " + std::to_string(basis.condition_estimate()) + " exceeds 1e8");
  const Eigen::MatrixXd& b = basis.columns();
  const Eigen::LLT<Eigen::MatrixXd> llt(b.transpose() * b);
  require(llt.info() == Eigen::Success, ErrorKind::Conditioning, "Gram matrix is not positive definite");
  const Eigen::MatrixXd coeffs = llt.solve(b.transpose());  // (B^T B)^-1 B^T
  Eigen::MatrixXd p = -b * coeffs;
  p.diagonal().array() += 1.0;
  return Projector(std::move(p));
}

/// P = I - Q Q^T from the orthonormalized basis.
inline Projector projector_orthonormal(const BackgroundBasis& basis) {
  const Eigen::MatrixXd& q = basis.orthonormal();
  Eigen::MatrixXd p = -q * q.transpose();
  p.diagonal().array() += 1.0;
  return Projector(std::move(p));
}

inline Projector make_projector(const BackgroundBasis& basis, ProjectionRoute route = ProjectionRoute::GramInverse) {
  return route == ProjectionRoute::GramInverse ? projector_matrix(basis) : projector_orthonormal(basis);
}

inline Eigen::VectorXd project_out(const Eigen::VectorXd& v, const BackgroundBasis& basis) {
  return projector_matrix(basis).apply(v);
}

inline EmbeddingSet project_out(const EmbeddingSet& set, const BackgroundBasis& basis) {
  return projector_matrix(basis).apply(set);
}

struct Decomposition {
  Eigen::VectorXd in_span;     // v_W
  Eigen::VectorXd complement;  // v_perp
};

inline Decomposition decompose(const Eigen::VectorXd& v, const BackgroundBasis& basis) {
  Eigen::VectorXd perp = project_out(v, basis);
  return {v - perp, std::move(perp)};
}

/// The first `count` rows of a set as background vectors.
inline BackgroundBasis basis_from_rows(const EmbeddingSet& set, std::size_t count,
                                       double drop_tolerance = kDefaultDropTolerance) {
  require(count >= 1 && count <= set.size(), ErrorKind::Config,
          "requested " + std::to_string(count) + " background vectors from a set of " + std::to_string(set.size()));
  Eigen::MatrixXd cols = set.rows().topRows(static_cast<Eigen::Index>(count)).transpose();
  return BackgroundBasis::from_columns(std::move(cols), drop_tolerance);
}

}  // namespace corelens
