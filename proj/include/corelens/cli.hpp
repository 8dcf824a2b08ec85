#pragma once

// Pipeline commands behind the `corelens` executable. Each command takes one
// JSON object (its effective configuration), validates it field by field,
// and writes artifacts stamped with the configuration digest. Re-running a
// command with the same configuration reproduces every artifact byte for
// byte, except the "metadata" key of JSON artifacts, which holds the
// creation time.

#include <Eigen/Dense>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "corelens/corelens.hpp"
#include "corelens/io.hpp"
#include "json.hpp"

namespace corelens::cli {

using nlohmann::json;
namespace fs = std::filesystem;

inline const std::vector<std::string>& commands() {
  static const std::vector<std::string> names = {"gen-synth", "split", "probe-train", "distill", "eval",
                                                 "compare",   "sweep", "audit",       "invert",  "invert-grid"};
  return names;
}

// ---------------------------------------------------------------------------
// Field access with field-level error messages.

class Fields {
 public:
  Fields(std::string command, const json& cfg) : command_(std::move(command)), cfg_(cfg) {
    require(cfg_.is_object(), ErrorKind::Config, command_ + ": configuration must be a JSON object");
  }

  bool has(const std::string& key) const { return cfg_.contains(key) && !cfg_.at(key).is_null(); }

  template <typename T>
  T get(const std::string& key) const {
    require(has(key), ErrorKind::Config, command_ + ": missing field '" + key + "'");
    try {
      return cfg_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw Error(ErrorKind::Config, command_ + ": field '" + key + "' has the wrong type (" + e.what() + ")");
    }
  }

  template <typename T>
  T get_or(const std::string& key, T fallback) const {
    return has(key) ? get<T>(key) : fallback;
  }

  /// Seeds are mandatory for randomized steps; there is no clock default.
  std::uint64_t seed(const std::string& key = "seed") const {
    require(has(key), ErrorKind::Config, command_ + ": field '" + key + "' is required (no implicit seeds)");
    const json& v = cfg_.at(key);
    require(v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0), ErrorKind::Config,
            command_ + ": field '" + key + "' must be a non-negative integer");
    return v.get<std::uint64_t>();
  }

  fs::path input(const std::string& key) const {
    const fs::path p = get<std::string>(key);
    require(fs::exists(p), ErrorKind::Config, command_ + ": field '" + key + "' names a missing file '" + p.string() + "'");
    return p;
  }

  fs::path output(const std::string& key) const {
    const fs::path p = get<std::string>(key);
    require(!p.empty(), ErrorKind::Config, command_ + ": field '" + key + "' is empty");
    return p;
  }

  const std::string& command() const { return command_; }

 private:
  std::string command_;
  const json& cfg_;
};

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

inline std::string digest(const json& cfg) { return fnv1a_hex(cfg.dump()); }

struct Context {
  std::string command;
  json config;
  std::string config_digest;
  std::optional<std::uint64_t> seed;
  std::vector<fs::path> artifacts;

  json stamp() const {
    return {{"command", command}, {"config_digest", config_digest}, {"seed", seed ? json(*seed) : json(nullptr)}};
  }

  /// Envelope: stamp + config + body + isolated metadata.
  void write_json(const fs::path& path, const std::string& body_key, json body) {
    json doc = stamp();
    doc["config"] = config;
    doc[body_key] = std::move(body);
    doc["metadata"] = {{"created_at", utc_timestamp()}};
    ensure_parent(path);
    write_file_atomic(path, doc.dump(2) + "\n");
    artifacts.push_back(path);
  }

  void write_text(const fs::path& path, const std::string& text) {
    ensure_parent(path);
    write_file_atomic(path, text);
    artifacts.push_back(path);
  }

  void write_set(const EmbeddingSet& set, const fs::path& path) {
    ensure_parent(path);
    write_embeddings(set, path, {{"provenance", stamp()}});
    artifacts.push_back(path);
  }

  static void ensure_parent(const fs::path& path) {
    if (path.has_parent_path() && !fs::exists(path.parent_path())) {
      std::error_code ec;
      fs::create_directories(path.parent_path(), ec);
      require(!ec, ErrorKind::Io, "cannot create directory '" + path.parent_path().string() + "'");
    }
  }
};

/// Reads `{"report": ...}` envelopes as well as bare reports.
inline GroupReport load_report(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::Format, path.string() + ": " + e.what());
  }
  return report_from_json(j.contains("report") ? j.at("report") : j);
}

inline LinearProbe load_probe(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::Format, path.string() + ": " + e.what());
  }
  return probe_from_json(j.contains("probe") ? j.at("probe") : j);
}

inline TrainConfig train_config(const Fields& f, const std::string& method) {
  TrainConfig c = method == "dfr" ? TrainConfig::dfr(f.seed()) : TrainConfig::erm(f.seed());
  c.learning_rate = f.get_or("learning_rate", c.learning_rate);
  c.weight_decay = f.get_or("weight_decay", c.weight_decay);
  c.epochs = f.get_or("epochs", c.epochs);
  c.batch_size = f.get_or("batch_size", c.batch_size);
  c.plateau_factor = f.get_or("plateau_factor", c.plateau_factor);
  c.plateau_patience = f.get_or("plateau_patience", c.plateau_patience);
  try {
    c.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::Config, f.command() + ": " + e.what());
  }
  return c;
}

inline InversionConfig inversion_config(const Fields& f) {
  InversionConfig c;
  c.lambda = f.get_or("lambda", c.lambda);
  c.max_iter = f.get_or("max_iter", c.max_iter);
  c.learning_rate = f.get_or("learning_rate", c.learning_rate);
  if (f.has("eot_index")) c.eot_index = f.get<int>("eot_index");
  const auto mask = f.get_or<std::string>("mask", "payload");
  require(mask == "payload" || mask == "all", ErrorKind::Config, f.command() + ": field 'mask' must be payload|all");
  c.mask = mask == "all" ? OptimizeMask::All : OptimizeMask::Payload;
  c.plateau_stop = f.get_or("plateau_stop", false);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Commands

inline void gen_synth(Context& ctx, const Fields& f) {
  SyntheticConfig cfg;
  const auto counts = f.get<std::vector<std::size_t>>("group_counts");
  require(counts.size() == 4, ErrorKind::Config, "gen-synth: field 'group_counts' needs 4 entries");
  std::copy(counts.begin(), counts.end(), cfg.group_counts.begin());
  cfg.dim = f.get_or("dim", cfg.dim);
  cfg.beta_core = f.get_or("beta_core", cfg.beta_core);
  cfg.beta_spur = f.get_or("beta_spur", cfg.beta_spur);
  cfg.sigma = f.get_or("sigma", cfg.sigma);
  cfg.seed = f.seed();
  cfg.sample_stream = f.get_or<std::uint64_t>("sample_stream", 0);
  const auto out = f.output("out");
  const auto data = generate_synthetic(cfg);
  ctx.write_set(data.set, out);
  if (f.has("directions_out")) {
    // Row 0 spurious, row 1 core, so `distill --num-vectors 1` removes the shortcut.
    Eigen::MatrixXd dirs(2, cfg.dim);
    dirs.row(0) = data.spurious_direction.transpose();
    dirs.row(1) = data.core_direction.transpose();
    ctx.write_set(EmbeddingSet(dirs, {0, 1}, {0, 0}, 2, 1, {"spurious", "core"}), f.output("directions_out"));
  }
}

inline void split_cmd(Context& ctx, const Fields& f) {
  const auto set = read_embeddings(f.input("input"));
  const auto fr = f.get_or<std::vector<double>>("fractions", {0.6, 0.2, 0.2});
  require(fr.size() == 3, ErrorKind::Config, "split: field 'fractions' needs 3 entries");
  const auto [train, val, test] = split(set, {fr[0], fr[1], fr[2]}, f.seed());
  const std::string prefix = f.output("out_prefix").string();
  ctx.write_set(train, prefix + ".train.emb1");
  ctx.write_set(val, prefix + ".val.emb1");
  ctx.write_set(test, prefix + ".test.emb1");
}

inline void probe_train(Context& ctx, const Fields& f) {
  const auto method = f.get_or<std::string>("method", "erm");
  require(method == "erm" || method == "dfr" || method == "zeroshot", ErrorKind::Config,
          "probe-train: field 'method' must be erm|dfr|zeroshot");
  const auto out = f.output("out");
  if (method == "zeroshot") {
    const auto classes = read_embeddings(f.input("class_embeddings"));
    auto probe = zero_shot_matrix(classes.rows());
    probe.config_digest = ctx.config_digest;
    ctx.write_json(out, "probe", to_json(probe));
    return;
  }
  const auto cfg = train_config(f, method);
  const auto train = read_embeddings(f.input("train"));
  const auto val = read_embeddings(f.input("val"));
  auto result = method == "dfr" ? train_dfr(train, val, cfg) : train_erm(train, val, cfg);
  result.probe.config_digest = ctx.config_digest;
  json body = to_json(result.probe);
  body["training"] = {{"log", to_json(result.log)},
                      {"best_epoch", result.best_epoch},
                      {"initial_train_loss", result.initial_train_loss},
                      {"final_train_loss", result.final_train_loss},
                      {"train_config", cfg.to_json()}};
  ctx.write_json(out, "probe", body);
}

inline void distill(Context& ctx, const Fields& f) {
  const auto set = read_embeddings(f.input("input"));
  const auto background = read_embeddings(f.input("background"));
  const auto k = f.get_or<std::size_t>("num_vectors", background.size());
  const auto route_name = f.get_or<std::string>("route", "gram");
  require(route_name == "gram" || route_name == "orthonormal", ErrorKind::Config,
          "distill: field 'route' must be gram|orthonormal");
  require(background.dim() == set.dim(), ErrorKind::Dimension,
          "background dim " + std::to_string(background.dim()) + " vs input dim " + std::to_string(set.dim()));
  const auto basis = basis_from_rows(background, k, f.get_or("drop_tolerance", kDefaultDropTolerance));
  const auto route = route_name == "gram" ? ProjectionRoute::GramInverse : ProjectionRoute::Orthonormal;
  const auto projector = make_projector(basis, route);
  ctx.write_set(projector.apply(set), f.output("out"));
  if (f.has("report")) {
    ctx.write_json(f.output("report"), "distill",
                   {{"num_vectors", basis.size()},
                    {"rank", basis.rank()},
                    {"condition_estimate", basis.condition_estimate()},
                    {"route", route_name}});
  }
}

inline void eval_cmd(Context& ctx, const Fields& f) {
  const auto probe = load_probe(f.input("probe"));
  const auto set = read_embeddings(f.input("input"));
  require(probe.dim() == set.dim(), ErrorKind::Dimension,
          "probe dim " + std::to_string(probe.dim()) + " vs input dim " + std::to_string(set.dim()));
  const auto preds = predict(probe, set);
  const auto report = group_report(preds.labels, set);
  json body = to_json(report);
  body["probe_config_digest"] = probe.config_digest;
  ctx.write_json(f.output("out"), "report", body);
  if (f.has("csv")) ctx.write_text(f.output("csv"), to_csv(report));
}

inline void compare_cmd(Context& ctx, const Fields& f) {
  const auto cmp = compare_reports(load_report(f.input("before")), load_report(f.input("after")));
  ctx.write_json(f.output("out"), "comparison", to_json(cmp));
  if (f.has("csv")) ctx.write_text(f.output("csv"), to_csv(cmp));
}

inline void sweep_cmd(Context& ctx, const Fields& f) {
  const auto entries = f.get<json>("reports");
  require(entries.is_array() && !entries.empty(), ErrorKind::Config, "sweep: field 'reports' must be a non-empty list");
  std::vector<std::pair<std::string, GroupReport>> tasks;
  for (const auto& e : entries) {
    std::string task, path;
    if (e.is_string()) {
      // "task=path"
      const auto s = e.get<std::string>();
      const auto eq = s.find('=');
      require(eq != std::string::npos, ErrorKind::Config, "sweep: report entry '" + s + "' must be task=path");
      task = s.substr(0, eq);
      path = s.substr(eq + 1);
    } else {
      require(e.is_object() && e.contains("task") && e.contains("path"), ErrorKind::Config,
              "sweep: report entries need 'task' and 'path'");
      task = e.at("task").get<std::string>();
      path = e.at("path").get<std::string>();
    }
    require(fs::exists(path), ErrorKind::Config, "sweep: report file '" + path + "' is missing");
    tasks.emplace_back(task, load_report(path));
  }
  const auto rows = sweep_report(tasks);
  ctx.write_json(f.output("out"), "sweep", to_json(rows));
  if (f.has("csv")) ctx.write_text(f.output("csv"), to_csv(rows));
}

inline void audit_cmd(Context& ctx, const Fields& f) {
  const auto images = read_embeddings(f.input("images"));
  const auto queries = read_embeddings(f.input("query"));
  const auto row = f.get_or<std::size_t>("query_row", 0);
  require(row < queries.size(), ErrorKind::Config, "audit: field 'query_row' is out of range");
  const Eigen::VectorXd q = queries.row(row).transpose();
  const auto result = audit(q, images);
  ctx.write_json(f.output("out"), "stats", to_json(result.stats));
  if (f.has("stats_csv")) ctx.write_text(f.output("stats_csv"), to_csv(result.stats));
  if (f.has("similarities_csv")) {
    std::ostringstream out;
    out.precision(17);
    out << "row,label,attribute,cosine\n";
    for (std::size_t i = 0; i < images.size(); ++i) {
      out << i << ',' << images.labels()[i] << ',' << images.attributes()[i] << ',' << result.similarities[i] << '\n';
    }
    ctx.write_text(f.output("similarities_csv"), out.str());
  }
}

inline void invert_cmd(Context& ctx, const Fields& f) {
  const auto encoder = refenc::init_encoder(f.seed());
  const auto cfg = inversion_config(f);
  const auto initial = f.get<std::string>("initial_text");
  InversionResult r;
  std::optional<std::string> target_text;
  if (f.has("target_text")) {
    target_text = f.get<std::string>("target_text");
    r = invert_text(*target_text, initial, cfg, encoder);
  } else if (f.has("target_probe")) {
    // Invert a probe weight row; success is undefined without a target text.
    const auto probe = load_probe(f.input("target_probe"));
    const auto row = f.get_or<int>("target_row", 0);
    require(row >= 0 && row < probe.classes(), ErrorKind::Config, "invert: field 'target_row' is out of range");
    require(probe.dim() == refenc::kWidth, ErrorKind::Dimension,
            "probe dim " + std::to_string(probe.dim()) + " vs encoder width " + std::to_string(refenc::kWidth));
    r = invert(probe.weights.row(row).transpose(), initial, cfg, encoder);
  } else if (f.has("target_vector")) {
    const auto values = f.get<std::vector<double>>("target_vector");
    r = invert(Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size())), initial,
               cfg, encoder);
  } else {
    throw Error(ErrorKind::Config, "invert: one of 'target_text', 'target_probe', 'target_vector' is required");
  }
  GridRun run{initial, target_text.value_or(""), r};
  json body = to_json(run);
  body["loss_trace"] = r.loss_trace;
  ctx.write_json(f.output("out"), "inversion", body);
}

inline void invert_grid_cmd(Context& ctx, const Fields& f) {
  const auto encoder = refenc::init_encoder(f.seed());
  const auto cfg = inversion_config(f);
  const auto corpus =
      f.get_or<std::vector<std::string>>("corpus", {"cat", "dog", "cow", "hen", "fox", "owl"});
  const auto grid = invert_grid(corpus, cfg, encoder);
  const fs::path dir = f.output("out_dir");
  ctx.write_text(dir / "success_matrix.csv", success_matrix_csv(grid));
  json runs = json::array();
  for (const auto& run : grid.runs) runs.push_back(to_json(run));
  ctx.write_json(dir / "runs.json", "grid", {{"success_rate", grid.success_rate()}, {"runs", runs}});
}

struct RunResult {
  std::string config_digest;
  std::vector<fs::path> artifacts;
};

/// Runs one command over its effective configuration. Throws corelens::Error.
inline RunResult run(const std::string& command, const json& config) {
  static const std::map<std::string, std::function<void(Context&, const Fields&)>> table = {
      {"gen-synth", gen_synth}, {"split", split_cmd},     {"probe-train", probe_train}, {"distill", distill},
      {"eval", eval_cmd},       {"compare", compare_cmd}, {"sweep", sweep_cmd},         {"audit", audit_cmd},
      {"invert", invert_cmd},   {"invert-grid", invert_grid_cmd}};
  const auto it = table.find(command);
  require(it != table.end(), ErrorKind::Config, "unknown command '" + command + "'");
  Fields fields(command, config);
  Context ctx;
  ctx.command = command;
  ctx.config = config;
  ctx.config_digest = digest(config);
  if (fields.has("seed")) ctx.seed = fields.seed();
  it->second(ctx, fields);
  return {ctx.config_digest, ctx.artifacts};
}

/// The command's section of a config document: `doc[command]` when present,
/// otherwise the document itself.
inline json section(const json& doc, const std::string& command) {
  require(doc.is_object(), ErrorKind::Config, "config document must be a JSON object");
  if (doc.contains(command)) {
    require(doc.at(command).is_object(), ErrorKind::Config, "config section '" + command + "' must be an object");
    return doc.at(command);
  }
  return doc;
}

}  // namespace corelens::cli
