// corelens: command-line front end. Every subcommand reads its settings from
// `--config <file.json>` (the section named after the subcommand, or the
// whole document) and lets flags override individual fields.

#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "corelens/cli.hpp"

namespace {

using nlohmann::json;

enum class Kind { String, Int, Uint, Double, Flag, Doubles, Uints, Strings };

struct FlagDef {
  std::string key;
  Kind kind;
  std::string help;
};

const std::map<std::string, std::vector<FlagDef>>& flag_table() {
  static const std::map<std::string, std::vector<FlagDef>> table = {
      {"gen-synth",
       {{"group_counts", Kind::Uints, "four cell counts n00 n01 n10 n11"},
        {"dim", Kind::Int, "embedding dimension"},
        {"beta_core", Kind::Double, "core signal strength"},
        {"beta_spur", Kind::Double, "spurious signal strength"},
        {"sigma", Kind::Double, "noise standard deviation"},
        {"seed", Kind::Uint, "random seed (required)"},
        {"sample_stream", Kind::Uint, "independent noise stream over the same directions"},
        {"out", Kind::String, "output EMB1 path"},
        {"directions_out", Kind::String, "EMB1 path for [spurious, core] directions"}}},
      {"split",
       {{"input", Kind::String, "input embeddings"},
        {"fractions", Kind::Doubles, "train val test fractions"},
        {"seed", Kind::Uint, "random seed (required)"},
        {"out_prefix", Kind::String, "writes <prefix>.{train,val,test}.emb1"}}},
      {"probe-train",
       {{"method", Kind::String, "erm | dfr | zeroshot"},
        {"train", Kind::String, "training embeddings"},
        {"val", Kind::String, "validation embeddings"},
        {"class_embeddings", Kind::String, "class rows for zeroshot"},
        {"seed", Kind::Uint, "shuffle seed (required for erm/dfr)"},
        {"learning_rate", Kind::Double, "Adam learning rate"},
        {"weight_decay", Kind::Double, "L2 weight decay"},
        {"epochs", Kind::Int, "epochs (erm 1, dfr 20 by default)"},
        {"batch_size", Kind::Int, "mini-batch size"},
        {"plateau_factor", Kind::Double, "learning-rate factor on plateau"},
        {"plateau_patience", Kind::Int, "epochs without WGA gain before reducing"},
        {"out", Kind::String, "output probe JSON"}}},
      {"distill",
       {{"input", Kind::String, "embeddings to project"},
        {"background", Kind::String, "EMB1/CSV file of background vectors"},
        {"num_vectors", Kind::Uint, "use the first k background rows"},
        {"route", Kind::String, "gram | orthonormal"},
        {"drop_tolerance", Kind::Double, "relative residual below which a vector is rejected"},
        {"out", Kind::String, "projected EMB1 output"},
        {"report", Kind::String, "optional JSON with basis rank and conditioning"}}},
      {"eval",
       {{"probe", Kind::String, "probe JSON"},
        {"input", Kind::String, "embeddings to score"},
        {"out", Kind::String, "group report JSON"},
        {"csv", Kind::String, "optional per-group CSV"}}},
      {"compare",
       {{"before", Kind::String, "report JSON before"},
        {"after", Kind::String, "report JSON after"},
        {"out", Kind::String, "delta JSON"},
        {"csv", Kind::String, "optional delta CSV"}}},
      {"sweep",
       {{"reports", Kind::Strings, "task=report.json entries"},
        {"out", Kind::String, "summary JSON"},
        {"csv", Kind::String, "optional summary CSV"}}},
      {"audit",
       {{"images", Kind::String, "image embeddings"},
        {"query", Kind::String, "file holding the query embedding"},
        {"query_row", Kind::Uint, "row of the query file"},
        {"out", Kind::String, "stats JSON"},
        {"stats_csv", Kind::String, "optional stats CSV"},
        {"similarities_csv", Kind::String, "optional raw similarity CSV"}}},
      {"invert",
       {{"seed", Kind::Uint, "encoder seed (required)"},
        {"initial_text", Kind::String, "initial prompt"},
        {"target_text", Kind::String, "text whose encoding is the target"},
        {"target_probe", Kind::String, "probe JSON whose row is the target"},
        {"target_row", Kind::Int, "probe row"},
        {"target_vector", Kind::Doubles, "explicit target vector"},
        {"lambda", Kind::Double, "cosine weight"},
        {"max_iter", Kind::Int, "iterations"},
        {"learning_rate", Kind::Double, "Adam learning rate"},
        {"eot_index", Kind::Int, "position read as the text vector"},
        {"mask", Kind::String, "payload | all"},
        {"plateau_stop", Kind::Flag, "stop early on a flat loss"},
        {"out", Kind::String, "inversion JSON"}}},
      {"invert-grid",
       {{"seed", Kind::Uint, "encoder seed (required)"},
        {"corpus", Kind::Strings, "words"},
        {"lambda", Kind::Double, "cosine weight"},
        {"max_iter", Kind::Int, "iterations"},
        {"learning_rate", Kind::Double, "Adam learning rate"},
        {"eot_index", Kind::Int, "position read as the text vector"},
        {"mask", Kind::String, "payload | all"},
        {"plateau_stop", Kind::Flag, "stop early on a flat loss"},
        {"out_dir", Kind::String, "directory for success_matrix.csv and runs.json"}}},
  };
  return table;
}

std::string flag_name(const std::string& key) {
  std::string name = "--" + key;
  for (auto& c : name) {
    if (c == '_') c = '-';
  }
  return name;
}

template <typename T>
T parse_as(const std::string& flag, const std::string& text) {
  try {
    std::size_t used = 0;
    T value{};
    if constexpr (std::is_same_v<T, double>) {
      value = std::stod(text, &used);
    } else if constexpr (std::is_same_v<T, long long>) {
      value = std::stoll(text, &used);
    } else {
      if (!text.empty() && text[0] == '-') throw std::invalid_argument("negative");
      value = std::stoull(text, &used);
    }
    if (used != text.size()) throw std::invalid_argument("trailing characters");
    return value;
  } catch (const std::exception&) {
    throw corelens::Error(corelens::ErrorKind::Config, flag + ": cannot parse '" + text + "'");
  }
}

json flag_value(const FlagDef& def, const std::vector<std::string>& raw) {
  const auto flag = flag_name(def.key);
  switch (def.kind) {
    case Kind::String: return raw.back();
    case Kind::Int: return parse_as<long long>(flag, raw.back());
    case Kind::Uint: return parse_as<unsigned long long>(flag, raw.back());
    case Kind::Double: return parse_as<double>(flag, raw.back());
    case Kind::Flag: return true;
    case Kind::Doubles: {
      json out = json::array();
      for (const auto& r : raw) out.push_back(parse_as<double>(flag, r));
      return out;
    }
    case Kind::Uints: {
      json out = json::array();
      for (const auto& r : raw) out.push_back(parse_as<unsigned long long>(flag, r));
      return out;
    }
    case Kind::Strings: return raw;
  }
  return nullptr;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"corelens: worst-group probing, background projection, similarity audits and text inversion"};
  app.require_subcommand(1);

  struct Bound {
    CLI::App* sub;
    std::string config_path;
    std::map<std::string, std::vector<std::string>> raw;
    std::map<std::string, bool> flags;
    std::map<std::string, CLI::Option*> options;
  };
  std::map<std::string, Bound> bound;
  for (const auto& [name, defs] : flag_table()) {
    auto& b = bound[name];
    b.sub = app.add_subcommand(name);
    b.sub->add_option("--config", b.config_path, "JSON config file")->check(CLI::ExistingFile);
    for (const auto& def : defs) {
      if (def.kind == Kind::Flag) {
        b.options[def.key] = b.sub->add_flag(flag_name(def.key), b.flags[def.key], def.help);
      } else {
        auto* opt = b.sub->add_option(flag_name(def.key), b.raw[def.key], def.help);
        if (def.kind == Kind::Doubles || def.kind == Kind::Uints || def.kind == Kind::Strings) {
          opt->expected(1, -1);
        } else {
          opt->expected(1);
        }
        b.options[def.key] = opt;
      }
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  for (auto& [name, b] : bound) {
    if (!b.sub->parsed()) continue;
    try {
      json cfg = json::object();
      if (!b.config_path.empty()) {
        json doc;
        try {
          doc = json::parse(corelens::read_file(b.config_path));
        } catch (const json::parse_error& e) {
          throw corelens::Error(corelens::ErrorKind::Config, b.config_path + ": " + e.what());
        }
        cfg = corelens::cli::section(doc, name);
      }
      for (const auto& def : flag_table().at(name)) {
        if (b.options.at(def.key)->count() == 0) continue;
        cfg[def.key] = flag_value(def, b.raw[def.key]);
      }
      const auto result = corelens::cli::run(name, cfg);
      for (const auto& path : result.artifacts) std::cout << path.string() << '\n';
      return 0;
    } catch (const corelens::Error& e) {
      std::cerr << "corelens " << name << ": " << e.what() << '\n';
      return corelens::exit_code(e.kind());
    } catch (const std::exception& e) {
      std::cerr << "corelens " << name << ": " << e.what() << '\n';
      return 3;
    }
  }
  return 2;
}
