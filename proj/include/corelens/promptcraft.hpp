#pragma once

// Text recovery by embedding inversion. The token-embedding matrix E is the
// only trainable tensor: starting from the embeddings of an initial text,
// Adam minimizes
//
//   L(v_eot, v_target) = ||v_eot - v_target||^2 - lambda * cos(v_eot, v_target)
//
// through the frozen encoder, then each optimized row is snapped to the
// token whose table row has the highest cosine similarity.

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "corelens/error.hpp"
#include "corelens/refenc.hpp"
#include "json.hpp"

namespace corelens {

enum class OptimizeMask {
  Payload,  // rows strictly between sot and eot of the initial text
  All,
};

struct InversionConfig {
  double lambda = 1.0;
  int max_iter = 3000;
  double learning_rate = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Defaults to the eot position of the tokenized initial text.
  std::optional<int> eot_index;
  OptimizeMask mask = OptimizeMask::Payload;
  /// Stop once the loss moved less than 1e-9 over the last 100 iterations.
  bool plateau_stop = false;

  void validate() const {
    require(lambda >= 0.0 && std::isfinite(lambda), ErrorKind::Config, "lambda must be >= 0");
    require(max_iter >= 0, ErrorKind::Config, "max_iter must be >= 0");
    require(learning_rate > 0.0 && std::isfinite(learning_rate), ErrorKind::Config, "learning_rate must be > 0");
    require(!eot_index || (*eot_index >= 0 && *eot_index < refenc::kContext), ErrorKind::Config,
            "eot_index outside the context window");
  }
};

struct InversionResult {
  Eigen::MatrixXd embeddings;  // final E
  std::vector<double> loss_trace;  // loss at each iteration, before its update
  double initial_loss = 0.0;
  double final_loss = 0.0;  // loss at the final E
  refenc::TokenIds recovered_ids{};
  std::string recovered_text;
  Eigen::VectorXd v_eot;
  int eot_index = 0;
  std::optional<bool> success;  // unset when no target text was declared
};

/// Thrown when the loss turns non-finite; carries the trace so far.
class InversionError : public Error {
 public:
  InversionError(const std::string& what, std::vector<double> trace)
      : Error(ErrorKind::Numerical, what), trace_(std::move(trace)) {}
  const std::vector<double>& trace() const { return trace_; }

 private:
  std::vector<double> trace_;
};

/// The squared distance minus lambda times cosine. With lambda = 0 the
/// cosine term is dropped, so a zero v_eot is allowed.
inline double inversion_loss(const Eigen::VectorXd& v_eot, const Eigen::VectorXd& v_target, double lambda) {
  require(v_eot.size() == v_target.size(), ErrorKind::Dimension, "v_eot and v_target differ in dimension");
  const double dist = (v_eot - v_target).squaredNorm();
  if (lambda == 0.0) return dist;
  const double denom = v_eot.norm() * v_target.norm();
  require(denom > 0.0, ErrorKind::Data, "cosine term undefined for a zero vector");
  const double cos = std::clamp(v_eot.dot(v_target) / denom, -1.0, 1.0);
  return dist - lambda * cos;
}

inline Eigen::VectorXd inversion_loss_gradient(const Eigen::VectorXd& v_eot, const Eigen::VectorXd& v_target,
                                               double lambda) {
  Eigen::VectorXd g = 2.0 * (v_eot - v_target);
  if (lambda == 0.0) return g;
  const double nv = v_eot.norm();
  const double nt = v_target.norm();
  const double cos = v_eot.dot(v_target) / (nv * nt);
  g -= lambda * (v_target / (nv * nt) - cos * v_eot / (nv * nv));
  return g;
}

/// Per row of E, the non-excluded token with the highest cosine similarity
/// (ties to the lower id).
inline std::vector<int> find_closest_tokens(const Eigen::MatrixXd& e, const Eigen::MatrixXd& token_table,
                                            const std::set<int>& exclusion = {}) {
  require(e.cols() == token_table.cols(), ErrorKind::Dimension, "embedding width differs from token table width");
  std::vector<Eigen::Index> candidates;
  for (Eigen::Index t = 0; t < token_table.rows(); ++t) {
    if (!exclusion.contains(static_cast<int>(t))) candidates.push_back(t);
  }
  require(!candidates.empty(), ErrorKind::Data, "every token id is excluded");
  Eigen::MatrixXd table = token_table;
  for (Eigen::Index t = 0; t < table.rows(); ++t) {
    const double n = table.row(t).norm();
    if (n > 0.0) table.row(t) /= n;
  }
  std::vector<int> ids(static_cast<std::size_t>(e.rows()));
  for (Eigen::Index i = 0; i < e.rows(); ++i) {
    const double n = e.row(i).norm();
    const Eigen::RowVectorXd row = n > 0.0 ? Eigen::RowVectorXd(e.row(i) / n) : Eigen::RowVectorXd(e.row(i));
    Eigen::Index best = candidates.front();
    double best_sim = table.row(best).dot(row);
    for (Eigen::Index t : candidates) {
      const double sim = table.row(t).dot(row);
      if (sim > best_sim) {
        best = t;
        best_sim = sim;
      }
    }
    ids[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return ids;
}

inline std::vector<bool> optimize_rows(const refenc::TokenIds& ids, OptimizeMask mask) {
  std::vector<bool> rows(refenc::kContext, mask == OptimizeMask::All);
  if (mask == OptimizeMask::Payload) {
    const int eot = refenc::eot_position(ids);
    for (int i = 1; i < eot; ++i) rows[static_cast<std::size_t>(i)] = true;
  }
  return rows;
}

inline InversionResult invert(const Eigen::VectorXd& v_target, const std::string& initial_text,
                              const InversionConfig& cfg, const refenc::EncoderWeights& encoder,
                              const std::optional<std::string>& target_text = std::nullopt) {
  cfg.validate();
  require(v_target.size() == refenc::kWidth, ErrorKind::Dimension,
          "target vector must have dim " + std::to_string(refenc::kWidth));
  require(v_target.allFinite() && v_target.norm() > 0.0, ErrorKind::Data, "target vector must be finite and nonzero");
  const refenc::TokenIds init_ids = refenc::tokenize(initial_text);
  const std::vector<bool> mask = optimize_rows(init_ids, cfg.mask);
  require(std::find(mask.begin(), mask.end(), true) != mask.end(), ErrorKind::Config,
          "optimize mask is empty (initial text has no characters)");

  InversionResult r;
  r.eot_index = cfg.eot_index.value_or(refenc::eot_position(init_ids));
  Eigen::MatrixXd e = refenc::embed_tokens(encoder, init_ids);
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(e.rows(), e.cols());
  Eigen::MatrixXd v = Eigen::MatrixXd::Zero(e.rows(), e.cols());
  r.loss_trace.reserve(static_cast<std::size_t>(cfg.max_iter));

  auto evaluate = [&](const Eigen::MatrixXd& emb) {
    auto fwd = refenc::encode_forward(encoder, emb, r.eot_index);
    const double loss = inversion_loss(fwd.v_eot, v_target, cfg.lambda);
    if (!std::isfinite(loss)) {
      throw InversionError("non-finite loss at iteration " + std::to_string(r.loss_trace.size()), r.loss_trace);
    }
    return std::make_pair(loss, std::move(fwd));
  };

  for (int it = 0; it < cfg.max_iter; ++it) {
    auto [loss, fwd] = evaluate(e);
    r.loss_trace.push_back(loss);
    const Eigen::VectorXd g_v = inversion_loss_gradient(fwd.v_eot, v_target, cfg.lambda);
    const Eigen::MatrixXd g = refenc::encode_backward(encoder, fwd.cache, g_v);
    const double step = static_cast<double>(it + 1);
    const double c1 = 1.0 - std::pow(cfg.beta1, step);
    const double c2 = 1.0 - std::pow(cfg.beta2, step);
    for (Eigen::Index i = 0; i < e.rows(); ++i) {
      if (!mask[static_cast<std::size_t>(i)]) continue;
      m.row(i) = cfg.beta1 * m.row(i) + (1.0 - cfg.beta1) * g.row(i);
      v.row(i) = cfg.beta2 * v.row(i) + (1.0 - cfg.beta2) * g.row(i).cwiseProduct(g.row(i));
      e.row(i).array() -= cfg.learning_rate * (m.row(i).array() / c1) / ((v.row(i).array() / c2).sqrt() + cfg.eps);
    }
    if (cfg.plateau_stop && r.loss_trace.size() > 100 &&
        std::abs(r.loss_trace[r.loss_trace.size() - 101] - loss) < 1e-9) {
      break;
    }
  }

  auto [final_loss, final_fwd] = evaluate(e);
  r.final_loss = final_loss;
  r.initial_loss = r.loss_trace.empty() ? final_loss : r.loss_trace.front();
  r.v_eot = final_fwd.v_eot;

  const auto closest = find_closest_tokens(e, encoder.token_table, {refenc::kPad});
  for (std::size_t i = 0; i < r.recovered_ids.size(); ++i) {
    r.recovered_ids[i] = mask[i] ? closest[i] : init_ids[i];
  }
  r.recovered_text = refenc::detokenize(r.recovered_ids);
  if (target_text) r.success = r.recovered_text.find(*target_text) != std::string::npos;
  r.embeddings = std::move(e);
  return r;
}

/// Encodes the target text and inverts from the initial text.
inline InversionResult invert_text(const std::string& target_text, const std::string& initial_text,
                                   const InversionConfig& cfg, const refenc::EncoderWeights& encoder) {
  const auto ids = refenc::tokenize(target_text);
  const int eot = cfg.eot_index.value_or(refenc::eot_position(ids));
  const Eigen::VectorXd target = refenc::encode_forward(encoder, refenc::embed_tokens(encoder, ids), eot).v_eot;
  return invert(target, initial_text, cfg, encoder, target_text);
}

// ---------------------------------------------------------------------------
// Grid of (initial, target) pairs over a word list.

struct GridRun {
  std::string initial;
  std::string target;
  InversionResult result;
};

struct GridResult {
  std::vector<std::string> corpus;
  std::vector<GridRun> runs;  // row-major: initial i, target j (diagonal included)

  const GridRun& at(std::size_t initial, std::size_t target) const { return runs[initial * corpus.size() + target]; }

  /// Success fraction over off-diagonal pairs.
  double success_rate() const {
    std::size_t ok = 0, total = 0;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      for (std::size_t j = 0; j < corpus.size(); ++j) {
        if (i == j) continue;
        ++total;
        if (at(i, j).result.success.value_or(false)) ++ok;
      }
    }
    return total == 0 ? 0.0 : static_cast<double>(ok) / static_cast<double>(total);
  }
};

/// Worker count: CORELENS_THREADS if set and positive, else hardware threads.
inline unsigned thread_budget() {
  if (const char* env = std::getenv("CORELENS_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return static_cast<unsigned>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

inline GridResult invert_grid(const std::vector<std::string>& corpus, const InversionConfig& cfg,
                              const refenc::EncoderWeights& encoder, unsigned threads = thread_budget()) {
  require(!corpus.empty(), ErrorKind::Config, "grid corpus is empty");
  for (const auto& word : corpus) refenc::tokenize(word);
  GridResult grid;
  grid.corpus = corpus;
  const std::size_t n = corpus.size();
  grid.runs.resize(n * n);
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n * n);
  auto worker = [&] {
    for (std::size_t k = next++; k < n * n; k = next++) {
      try {
        auto& run = grid.runs[k];
        run.initial = corpus[k / n];
        run.target = corpus[k % n];
        run.result = invert_text(run.target, run.initial, cfg, encoder);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    const unsigned count = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n * n)));
    for (unsigned t = 0; t < count; ++t) pool.emplace_back(worker);
  }
  for (const auto& err : errors) {
    if (err) std::rethrow_exception(err);
  }
  return grid;
}

inline std::string success_matrix_csv(const GridResult& grid) {
  std::ostringstream out;
  out << "initial\\target";
  for (const auto& w : grid.corpus) out << ',' << w;
  out << '\n';
  for (std::size_t i = 0; i < grid.corpus.size(); ++i) {
    out << grid.corpus[i];
    for (std::size_t j = 0; j < grid.corpus.size(); ++j) out << ',' << (grid.at(i, j).result.success.value_or(false) ? 1 : 0);
    out << '\n';
  }
  return out.str();
}

inline nlohmann::json to_json(const GridRun& run) {
  const auto& r = run.result;
  nlohmann::json success = r.success ? nlohmann::json(*r.success) : nlohmann::json("n/a");
  return {{"initial", run.initial},     {"target", run.target},         {"eot_index", r.eot_index},
          {"initial_loss", r.initial_loss}, {"final_loss", r.final_loss}, {"iterations", r.loss_trace.size()},
          {"recovered_text", r.recovered_text}, {"success", success}};
}

}  // namespace corelens
