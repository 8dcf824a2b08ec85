#pragma once

// Linear probes ("task matrices") over frozen embeddings: scores = W x + b.
//
// Trained probes minimize softmax cross-entropy with Adam, evaluate
// worst-group accuracy on the validation split after every epoch, and keep
// the best-WGA snapshot. ERM weights every sample equally; DFR weights a
// sample from group g by N / (|G| N_g), which makes each group contribute
// the same total weight. Zero-shot probes are stacked, L2-normalized class
// embeddings scored by cosine similarity.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "corelens/embstore.hpp"
#include "corelens/error.hpp"
#include "corelens/io.hpp"
#include "corelens/metrics.hpp"
#include "corelens/rng.hpp"
#include "json.hpp"

namespace corelens {

enum class Provenance { Erm, Dfr, ZeroShot };

inline const char* to_string(Provenance p) {
  switch (p) {
    case Provenance::Erm: return "erm";
    case Provenance::Dfr: return "dfr";
    case Provenance::ZeroShot: return "zeroshot";
  }
  return "unknown";
}

inline Provenance provenance_from_string(const std::string& s) {
  if (s == "erm") return Provenance::Erm;
  if (s == "dfr") return Provenance::Dfr;
  if (s == "zeroshot") return Provenance::ZeroShot;
  throw Error(ErrorKind::Format, "unknown probe provenance '" + s + "'");
}

struct LinearProbe {
  Eigen::MatrixXd weights;  // C x D
  Eigen::VectorXd bias;     // C
  bool normalize_input = false;
  Provenance provenance = Provenance::Erm;
  std::string config_digest;

  int classes() const { return static_cast<int>(weights.rows()); }
  int dim() const { return static_cast<int>(weights.cols()); }

  void validate() const {
    require(weights.rows() >= 2, ErrorKind::Data, "a probe needs at least two classes");
    require(bias.size() == weights.rows(), ErrorKind::Consistency, "bias length differs from class count");
    require(weights.allFinite() && bias.allFinite(), ErrorKind::Data, "probe has non-finite entries");
  }
};

struct TrainConfig {
  double learning_rate = 0.01;
  double weight_decay = 0.0;
  int epochs = 1;
  int batch_size = 256;
  double plateau_factor = 0.5;
  int plateau_patience = 3;
  std::uint64_t seed = 0;

  static TrainConfig erm(std::uint64_t seed) {
    TrainConfig c;
    c.seed = seed;
    return c;
  }

  static TrainConfig dfr(std::uint64_t seed) {
    TrainConfig c;
    c.epochs = 20;
    c.seed = seed;
    return c;
  }

  void validate() const {
    require(learning_rate > 0.0 && std::isfinite(learning_rate), ErrorKind::Config, "learning_rate must be > 0");
    require(weight_decay >= 0.0 && std::isfinite(weight_decay), ErrorKind::Config, "weight_decay must be >= 0");
    require(epochs >= 1, ErrorKind::Config, "epochs must be >= 1");
    require(batch_size >= 1, ErrorKind::Config, "batch_size must be >= 1");
    require(plateau_factor > 0.0 && plateau_factor < 1.0, ErrorKind::Config, "plateau factor must be in (0, 1)");
    require(plateau_patience >= 0, ErrorKind::Config, "plateau patience must be >= 0");
  }

  nlohmann::json to_json() const {
    return {{"learning_rate", learning_rate}, {"weight_decay", weight_decay},   {"epochs", epochs},
            {"batch_size", batch_size},       {"plateau_factor", plateau_factor}, {"plateau_patience", plateau_patience},
            {"seed", seed}};
  }

  std::string digest() const { return fnv1a_hex(to_json().dump()); }
};

struct EpochRecord {
  int epoch = 0;
  double learning_rate = 0.0;
  double train_loss = 0.0;  // weighted mean cross-entropy over the full train split
  double val_wga = 0.0;
};

struct TrainResult {
  LinearProbe probe;
  std::vector<EpochRecord> log;
  int best_epoch = 0;
  double initial_train_loss = 0.0;
  double final_train_loss = 0.0;  // loss of the returned snapshot
};

namespace detail {

/// Row-wise scores X W^T + b, normalizing rows first when asked.
inline Eigen::MatrixXd scores(const LinearProbe& probe, const Eigen::MatrixXd& x) {
  Eigen::MatrixXd s;
  if (probe.normalize_input) {
    const Eigen::VectorXd norms = x.rowwise().norm();
    Eigen::MatrixXd xn = x;
    for (Eigen::Index i = 0; i < xn.rows(); ++i) {
      if (norms[i] > 0.0) xn.row(i) /= norms[i];
    }
    s = xn * probe.weights.transpose();
  } else {
    s = x * probe.weights.transpose();
  }
  s.rowwise() += probe.bias.transpose();
  return s;
}

/// Argmax with ties to the lowest class id.
inline int argmax_low(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  int best = 0;
  for (Eigen::Index c = 1; c < row.size(); ++c) {
    if (row[c] > row[best]) best = static_cast<int>(c);
  }
  return best;
}

/// Weighted mean softmax cross-entropy; fills the gradient when asked.
inline double cross_entropy(const Eigen::MatrixXd& w, const Eigen::VectorXd& b, const Eigen::MatrixXd& x,
                            std::span<const int> labels, std::span<const double> sample_weights,
                            Eigen::MatrixXd* grad_w = nullptr, Eigen::VectorXd* grad_b = nullptr) {
  Eigen::MatrixXd logits = x * w.transpose();
  logits.rowwise() += b.transpose();
  const auto n = static_cast<double>(x.rows());
  double loss = 0.0;
  Eigen::MatrixXd dlogits(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    Eigen::RowVectorXd e = (logits.row(i).array() - mx).exp();
    const double z = e.sum();
    const auto y = static_cast<Eigen::Index>(labels[static_cast<std::size_t>(i)]);
    const double wi = sample_weights[static_cast<std::size_t>(i)];
    loss += wi * (std::log(z) - (logits(i, y) - mx));
    dlogits.row(i) = e / z;
    dlogits(i, y) -= 1.0;
    dlogits.row(i) *= wi / n;
  }
  if (grad_w) *grad_w = dlogits.transpose() * x;
  if (grad_b) *grad_b = dlogits.colwise().sum().transpose();
  return loss / n;
}

struct Adam {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  Eigen::MatrixXd m_w, v_w;
  Eigen::VectorXd m_b, v_b;

  Adam(Eigen::Index classes, Eigen::Index dim)
      : m_w(Eigen::MatrixXd::Zero(classes, dim)),
        v_w(Eigen::MatrixXd::Zero(classes, dim)),
        m_b(Eigen::VectorXd::Zero(classes)),
        v_b(Eigen::VectorXd::Zero(classes)) {}

  void update(Eigen::MatrixXd& w, Eigen::VectorXd& b, const Eigen::MatrixXd& gw, const Eigen::VectorXd& gb,
              double lr) {
    ++step;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    m_w = beta1 * m_w + (1.0 - beta1) * gw;
    v_w = beta2 * v_w + (1.0 - beta2) * gw.cwiseProduct(gw);
    m_b = beta1 * m_b + (1.0 - beta1) * gb;
    v_b = beta2 * v_b + (1.0 - beta2) * gb.cwiseProduct(gb);
    w.array() -= lr * (m_w.array() / c1) / ((v_w.array() / c2).sqrt() + eps);
    b.array() -= lr * (m_b.array() / c1) / ((v_b.array() / c2).sqrt() + eps);
  }
};

/// Reduce-on-plateau for a maximized metric, relative threshold 1e-4.
struct PlateauScheduler {
  double factor;
  int patience;
  double best = -std::numeric_limits<double>::infinity();
  int bad_epochs = 0;

  double step(double metric, double lr) {
    if (metric > best * (1.0 + 1e-4) || best == -std::numeric_limits<double>::infinity()) {
      best = metric;
      bad_epochs = 0;
      return lr;
    }
    if (++bad_epochs > patience) {
      bad_epochs = 0;
      return lr * factor;
    }
    return lr;
  }
};

inline void check_pair(const EmbeddingSet& train, const EmbeddingSet& val) {
  require(train.dim() == val.dim(), ErrorKind::Dimension,
          "train dim " + std::to_string(train.dim()) + " vs val dim " + std::to_string(val.dim()));
  require(train.num_classes() == val.num_classes(), ErrorKind::Consistency, "train and val class counts differ");
  require(train.num_classes() >= 2, ErrorKind::Training, "need at least two classes");
  std::vector<std::size_t> per_class(static_cast<std::size_t>(train.num_classes()), 0);
  for (int y : train.labels()) ++per_class[static_cast<std::size_t>(y)];
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    require(per_class[c] > 0, ErrorKind::Training, "class " + std::to_string(c) + " absent from train", c);
  }
}

inline TrainResult train_weighted(const EmbeddingSet& train, const EmbeddingSet& val, const TrainConfig& cfg,
                                  std::span<const double> sample_weights, Provenance provenance) {
  const auto n = train.size();
  const auto classes = static_cast<Eigen::Index>(train.num_classes());
  const auto dim = static_cast<Eigen::Index>(train.dim());
  const auto batch = static_cast<std::size_t>(cfg.batch_size);

  LinearProbe probe;
  probe.weights = Eigen::MatrixXd::Zero(classes, dim);
  probe.bias = Eigen::VectorXd::Zero(classes);
  probe.provenance = provenance;
  probe.config_digest = cfg.digest();

  TrainResult result;
  result.initial_train_loss =
      cross_entropy(probe.weights, probe.bias, train.rows(), train.labels(), sample_weights);

  Adam adam(classes, dim);
  PlateauScheduler plateau{cfg.plateau_factor, cfg.plateau_patience};
  Rng rng(cfg.seed);
  double lr = cfg.learning_rate;
  double best_wga = -1.0;
  LinearProbe best = probe;

  Eigen::MatrixXd xb;
  std::vector<int> yb;
  std::vector<double> wb;
  Eigen::MatrixXd gw;
  Eigen::VectorXd gb;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = rng.permutation(n);
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t len = std::min(batch, n - start);
      xb.resize(static_cast<Eigen::Index>(len), dim);
      yb.resize(len);
      wb.resize(len);
      for (std::size_t k = 0; k < len; ++k) {
        const std::size_t i = order[start + k];
        xb.row(static_cast<Eigen::Index>(k)) = train.row(i);
        yb[k] = train.labels()[i];
        wb[k] = sample_weights[i];
      }
      const double loss = cross_entropy(probe.weights, probe.bias, xb, yb, wb, &gw, &gb);
      require(std::isfinite(loss), ErrorKind::Numerical, "non-finite training loss in epoch " + std::to_string(epoch));
      if (cfg.weight_decay > 0.0) {
        gw += cfg.weight_decay * probe.weights;
        gb += cfg.weight_decay * probe.bias;
      }
      adam.update(probe.weights, probe.bias, gw, gb, lr);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.learning_rate = lr;
    rec.train_loss = cross_entropy(probe.weights, probe.bias, train.rows(), train.labels(), sample_weights);
    require(std::isfinite(rec.train_loss), ErrorKind::Numerical, "non-finite training loss after epoch " +
                                                                     std::to_string(epoch));
    const Eigen::MatrixXd val_scores = scores(probe, val.rows());
    std::vector<int> preds(val.size());
    for (std::size_t i = 0; i < val.size(); ++i) preds[i] = argmax_low(val_scores.row(static_cast<Eigen::Index>(i)));
    rec.val_wga = group_report(preds, val).wga;
    result.log.push_back(rec);
    if (rec.val_wga > best_wga) {
      best_wga = rec.val_wga;
      best = probe;
      result.best_epoch = epoch;
      result.final_train_loss = rec.train_loss;
    }
    lr = plateau.step(rec.val_wga, lr);
  }
  result.probe = std::move(best);
  return result;
}

}  // namespace detail

/// Uniform-weight training (empirical risk minimization).
inline TrainResult train_erm(const EmbeddingSet& train, const EmbeddingSet& val, const TrainConfig& cfg) {
  cfg.validate();
  detail::check_pair(train, val);
  const std::vector<double> weights(train.size(), 1.0);
  return detail::train_weighted(train, val, cfg, weights, Provenance::Erm);
}

/// Per-sample weight N / (|G| N_g) for the sample's group g.
inline std::vector<double> inverse_group_frequency_weights(const EmbeddingSet& set) {
  const auto counts = set.group_counts();
  for (std::size_t g = 0; g < counts.size(); ++g) {
    require(counts[g] > 0, ErrorKind::Training, "group " + std::to_string(g) + " is empty in train", g);
  }
  const auto n = static_cast<double>(set.size());
  const auto num_groups = static_cast<double>(counts.size());
  std::vector<double> weights(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    weights[i] = n / (num_groups * static_cast<double>(counts[static_cast<std::size_t>(set.groups()[i])]));
  }
  return weights;
}

/// Group-reweighted training: identical loop to train_erm with
/// inverse-group-frequency sample weights.
inline TrainResult train_dfr(const EmbeddingSet& train, const EmbeddingSet& val, const TrainConfig& cfg) {
  cfg.validate();
  detail::check_pair(train, val);
  const auto weights = inverse_group_frequency_weights(train);
  return detail::train_weighted(train, val, cfg, weights, Provenance::Dfr);
}

/// Rows are class embeddings (e.g. prompt embeddings); each is normalized
/// and inputs are normalized at prediction time, giving cosine scores.
inline LinearProbe zero_shot_matrix(const Eigen::MatrixXd& class_embeddings) {
  require(class_embeddings.rows() >= 2, ErrorKind::Data, "zero-shot needs at least two class rows");
  require(class_embeddings.allFinite(), ErrorKind::Data, "class embeddings must be finite");
  LinearProbe probe;
  probe.weights = class_embeddings;
  for (Eigen::Index c = 0; c < probe.weights.rows(); ++c) {
    const double norm = probe.weights.row(c).norm();
    require(norm > 0.0, ErrorKind::Data, "class row " + std::to_string(c) + " has zero norm",
            static_cast<std::size_t>(c));
    probe.weights.row(c) /= norm;
  }
  probe.bias = Eigen::VectorXd::Zero(probe.weights.rows());
  probe.normalize_input = true;
  probe.provenance = Provenance::ZeroShot;
  probe.config_digest = fnv1a_hex("zeroshot");
  return probe;
}

struct Predictions {
  std::vector<int> labels;
  Eigen::MatrixXd scores;  // N x C
};

inline Predictions predict(const LinearProbe& probe, const Eigen::MatrixXd& rows) {
  require(rows.cols() == probe.dim(), ErrorKind::Dimension,
          "input dim " + std::to_string(rows.cols()) + " vs probe dim " + std::to_string(probe.dim()));
  Predictions out;
  out.scores = detail::scores(probe, rows);
  out.labels.resize(static_cast<std::size_t>(rows.rows()));
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    out.labels[static_cast<std::size_t>(i)] = detail::argmax_low(out.scores.row(i));
  }
  return out;
}

inline Predictions predict(const LinearProbe& probe, const EmbeddingSet& set) { return predict(probe, set.rows()); }

inline nlohmann::json to_json(const LinearProbe& p) {
  nlohmann::json weights = nlohmann::json::array();
  for (Eigen::Index c = 0; c < p.weights.rows(); ++c) {
    std::vector<double> row(static_cast<std::size_t>(p.weights.cols()));
    for (Eigen::Index j = 0; j < p.weights.cols(); ++j) row[static_cast<std::size_t>(j)] = p.weights(c, j);
    weights.push_back(std::move(row));
  }
  return {{"dim", p.dim()},
          {"classes", p.classes()},
          {"normalize_input", p.normalize_input},
          {"provenance", to_string(p.provenance)},
          {"weights", weights},
          {"bias", std::vector<double>(p.bias.data(), p.bias.data() + p.bias.size())},
          {"config_digest", p.config_digest}};
}

inline LinearProbe probe_from_json(const nlohmann::json& j) {
  LinearProbe p;
  try {
    const int dim = j.at("dim").get<int>();
    const int classes = j.at("classes").get<int>();
    const auto rows = j.at("weights").get<std::vector<std::vector<double>>>();
    const auto bias = j.at("bias").get<std::vector<double>>();
    require(dim >= 1 && classes >= 2, ErrorKind::Format, "probe dim/classes out of range");
    require(rows.size() == static_cast<std::size_t>(classes), ErrorKind::Consistency, "probe weight row count");
    p.weights.resize(classes, dim);
    for (int c = 0; c < classes; ++c) {
      require(rows[static_cast<std::size_t>(c)].size() == static_cast<std::size_t>(dim), ErrorKind::Consistency,
              "probe weight row " + std::to_string(c) + " length");
      for (int k = 0; k < dim; ++k) p.weights(c, k) = rows[static_cast<std::size_t>(c)][static_cast<std::size_t>(k)];
    }
    p.bias = Eigen::Map<const Eigen::VectorXd>(bias.data(), static_cast<Eigen::Index>(bias.size()));
    p.normalize_input = j.at("normalize_input").get<bool>();
    p.provenance = provenance_from_string(j.at("provenance").get<std::string>());
    p.config_digest = j.value("config_digest", std::string{});
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("probe JSON: ") + e.what());
  }
  p.validate();
  return p;
}

inline nlohmann::json to_json(const std::vector<EpochRecord>& log) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : log) {
    out.push_back({{"epoch", r.epoch}, {"learning_rate", r.learning_rate}, {"train_loss", r.train_loss},
                   {"val_wga", r.val_wga}});
  }
  return out;
}

}  // namespace corelens
