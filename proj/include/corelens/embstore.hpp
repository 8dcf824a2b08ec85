#pragma once

// Labeled embedding sets: the EMB1 container, CSV ingest, the group
// structure g = y * A + a, seeded synthetic data with planted directions,
// and seeded splits.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "corelens/error.hpp"
#include "corelens/io.hpp"
#include "corelens/rng.hpp"
#include "json.hpp"

namespace corelens {

/// Maps a (class, attribute) cell to its group id.
inline int group_of(int label, int attribute, int num_attributes) {
  return label * num_attributes + attribute;
}

inline std::vector<int> derive_groups(std::span<const int> labels, std::span<const int> attributes,
                                      int num_attributes, int num_classes = std::numeric_limits<int>::max()) {
  require(labels.size() == attributes.size(), ErrorKind::Consistency,
          "labels and attributes differ in length");
  require(num_attributes >= 1, ErrorKind::Data, "num_attributes must be >= 1");
  std::vector<int> groups(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] >= 0 && labels[i] < num_classes, ErrorKind::Data,
            "label out of range at row " + std::to_string(i), i);
    require(attributes[i] >= 0 && attributes[i] < num_attributes, ErrorKind::Data,
            "attribute out of range at row " + std::to_string(i), i);
    groups[i] = group_of(labels[i], attributes[i], num_attributes);
  }
  return groups;
}

/// N rows of D-dimensional embeddings with aligned labels, attributes and
/// group ids. Immutable once constructed; the constructor enforces every
/// invariant (lengths, group formula, finiteness).
class EmbeddingSet {
 public:
  EmbeddingSet(Eigen::MatrixXd rows, std::vector<int> labels, std::vector<int> attributes,
               int num_classes, int num_attributes, std::vector<std::string> class_names = {},
               std::vector<std::string> attribute_names = {})
      : rows_(std::move(rows)),
        labels_(std::move(labels)),
        attributes_(std::move(attributes)),
        num_classes_(num_classes),
        num_attributes_(num_attributes),
        class_names_(std::move(class_names)),
        attribute_names_(std::move(attribute_names)) {
    require(rows_.rows() >= 1, ErrorKind::Data, "embedding set needs at least one row");
    require(rows_.cols() >= 1, ErrorKind::Data, "embedding dimension must be positive");
    require(labels_.size() == static_cast<std::size_t>(rows_.rows()), ErrorKind::Consistency,
            std::to_string(labels_.size()) + " labels for " + std::to_string(rows_.rows()) + " rows");
    require(attributes_.size() == labels_.size(), ErrorKind::Consistency,
            std::to_string(attributes_.size()) + " attributes for " + std::to_string(rows_.rows()) + " rows");
    require(num_classes_ >= 1 && num_attributes_ >= 1, ErrorKind::Data, "class/attribute counts must be >= 1");
    require(class_names_.empty() || class_names_.size() == static_cast<std::size_t>(num_classes_),
            ErrorKind::Consistency, "class_names length differs from class count");
    require(attribute_names_.empty() || attribute_names_.size() == static_cast<std::size_t>(num_attributes_),
            ErrorKind::Consistency, "attribute_names length differs from attribute count");
    groups_ = derive_groups(labels_, attributes_, num_attributes_, num_classes_);
    for (Eigen::Index i = 0; i < rows_.rows(); ++i) {
      require(rows_.row(i).allFinite(), ErrorKind::Data, "non-finite value in row " + std::to_string(i),
              static_cast<std::size_t>(i));
    }
  }

  std::size_t size() const { return static_cast<std::size_t>(rows_.rows()); }
  int dim() const { return static_cast<int>(rows_.cols()); }
  int num_classes() const { return num_classes_; }
  int num_attributes() const { return num_attributes_; }
  int num_groups() const { return num_classes_ * num_attributes_; }

  const Eigen::MatrixXd& rows() const { return rows_; }
  auto row(std::size_t i) const { return rows_.row(static_cast<Eigen::Index>(i)); }
  const std::vector<int>& labels() const { return labels_; }
  const std::vector<int>& attributes() const { return attributes_; }
  const std::vector<int>& groups() const { return groups_; }
  const std::vector<std::string>& class_names() const { return class_names_; }
  const std::vector<std::string>& attribute_names() const { return attribute_names_; }

  std::vector<std::size_t> group_counts() const {
    std::vector<std::size_t> counts(static_cast<std::size_t>(num_groups()), 0);
    for (int g : groups_) ++counts[static_cast<std::size_t>(g)];
    return counts;
  }

  /// Same labels and metadata over a replacement matrix of identical shape
  /// (used by projection).
  EmbeddingSet with_rows(Eigen::MatrixXd rows) const {
    require(rows.rows() == rows_.rows(), ErrorKind::Dimension, "replacement row count differs");
    return EmbeddingSet(std::move(rows), labels_, attributes_, num_classes_, num_attributes_, class_names_,
                        attribute_names_);
  }

  EmbeddingSet subset(std::span<const std::size_t> indices) const {
    Eigen::MatrixXd rows(static_cast<Eigen::Index>(indices.size()), rows_.cols());
    std::vector<int> labels, attributes;
    labels.reserve(indices.size());
    attributes.reserve(indices.size());
    for (std::size_t k = 0; k < indices.size(); ++k) {
      require(indices[k] < size(), ErrorKind::Data, "subset index out of range", indices[k]);
      rows.row(static_cast<Eigen::Index>(k)) = rows_.row(static_cast<Eigen::Index>(indices[k]));
      labels.push_back(labels_[indices[k]]);
      attributes.push_back(attributes_[indices[k]]);
    }
    return EmbeddingSet(std::move(rows), std::move(labels), std::move(attributes), num_classes_,
                        num_attributes_, class_names_, attribute_names_);
  }

 private:
  Eigen::MatrixXd rows_;
  std::vector<int> labels_;
  std::vector<int> attributes_;
  std::vector<int> groups_;
  int num_classes_;
  int num_attributes_;
  std::vector<std::string> class_names_;
  std::vector<std::string> attribute_names_;
};

// ---------------------------------------------------------------------------
// EMB1 container
//
//   "EMB1" | version u16 = 1 | dtype u8 (0 = f32) | reserved u8 | dim u32 |
//   count u64 | count * dim little-endian values, row-major
//
// plus a JSON sidecar at <path>.meta.json carrying labels and names.

namespace emb1 {

inline constexpr std::array<char, 4> kMagic = {'E', 'M', 'B', '1'};
inline constexpr std::uint16_t kVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;
inline constexpr std::size_t kHeaderBytes = 20;

inline void put_le(std::string& out, std::uint64_t value, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

inline std::uint64_t get_le(std::string_view in, std::size_t offset, int bytes) {
  std::uint64_t value = 0;
  for (int i = 0; i < bytes; ++i) {
    value |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[offset + static_cast<std::size_t>(i)]))
             << (8 * i);
  }
  return value;
}

struct Header {
  std::uint32_t dim = 0;
  std::uint64_t count = 0;
};

/// Validates the fixed header and the payload length against the buffer.
inline Header parse_header(std::string_view bytes) {
  require(bytes.size() >= kHeaderBytes, ErrorKind::Format,
          "file shorter than the " + std::to_string(kHeaderBytes) + "-byte header");
  require(std::equal(kMagic.begin(), kMagic.end(), bytes.begin()), ErrorKind::Format, "bad magic");
  const auto version = static_cast<std::uint16_t>(get_le(bytes, 4, 2));
  require(version == kVersion, ErrorKind::Format, "unsupported version " + std::to_string(version));
  const auto dtype = static_cast<std::uint8_t>(get_le(bytes, 6, 1));
  require(dtype == kDtypeF32, ErrorKind::Format, "unsupported dtype " + std::to_string(dtype));
  Header h;
  h.dim = static_cast<std::uint32_t>(get_le(bytes, 8, 4));
  h.count = get_le(bytes, 12, 8);
  require(h.dim >= 1, ErrorKind::Format, "dim must be positive");
  require(h.count >= 1, ErrorKind::Format, "count must be positive");
  const std::uint64_t payload = bytes.size() - kHeaderBytes;
  const std::uint64_t row_bytes = std::uint64_t{h.dim} * 4;
  require(h.count <= payload / row_bytes && h.count * row_bytes == payload, ErrorKind::Format,
          "payload is " + std::to_string(payload) + " bytes, header declares " + std::to_string(h.count) +
              " rows of dim " + std::to_string(h.dim));
  return h;
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  std::filesystem::path p = path;
  p += ".meta.json";
  return p;
}

inline std::string encode_payload(const Eigen::MatrixXd& rows) {
  std::string out;
  out.reserve(kHeaderBytes + static_cast<std::size_t>(rows.size()) * 4);
  out.append(kMagic.begin(), kMagic.end());
  put_le(out, kVersion, 2);
  put_le(out, kDtypeF32, 1);
  put_le(out, 0, 1);
  put_le(out, static_cast<std::uint64_t>(rows.cols()), 4);
  put_le(out, static_cast<std::uint64_t>(rows.rows()), 8);
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    for (Eigen::Index j = 0; j < rows.cols(); ++j) {
      const auto f = static_cast<float>(rows(i, j));
      require(std::isfinite(f), ErrorKind::Data,
              "value in row " + std::to_string(i) + " overflows f32", static_cast<std::size_t>(i));
      put_le(out, std::bit_cast<std::uint32_t>(f), 4);
    }
  }
  return out;
}

inline Eigen::MatrixXd decode_payload(std::string_view bytes, const Header& h) {
  Eigen::MatrixXd rows(static_cast<Eigen::Index>(h.count), static_cast<Eigen::Index>(h.dim));
  std::size_t offset = kHeaderBytes;
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    for (Eigen::Index j = 0; j < rows.cols(); ++j, offset += 4) {
      const float f = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(bytes, offset, 4)));
      require(std::isfinite(f), ErrorKind::Data, "non-finite value in row " + std::to_string(i),
              static_cast<std::size_t>(i));
      rows(i, j) = static_cast<double>(f);
    }
  }
  return rows;
}

inline nlohmann::json sidecar_json(const EmbeddingSet& set) {
  nlohmann::json meta;
  meta["labels"] = set.labels();
  meta["attributes"] = set.attributes();
  meta["groups"] = set.groups();
  meta["num_classes"] = set.num_classes();
  meta["num_attributes"] = set.num_attributes();
  meta["class_names"] = set.class_names();
  meta["attribute_names"] = set.attribute_names();
  return meta;
}

template <typename T>
std::vector<T> json_list(const nlohmann::json& meta, const char* key) {
  if (!meta.contains(key)) return {};
  try {
    return meta.at(key).get<std::vector<T>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("sidecar field '") + key + "': " + e.what());
  }
}

inline int count_from(const nlohmann::json& meta, const char* count_key, std::size_t names,
                      std::span<const int> ids) {
  if (meta.contains(count_key)) {
    require(meta.at(count_key).is_number_integer(), ErrorKind::Format,
            std::string("sidecar field '") + count_key + "' must be an integer");
    return meta.at(count_key).get<int>();
  }
  if (names > 0) return static_cast<int>(names);
  int max_id = 0;
  for (int v : ids) max_id = std::max(max_id, v);
  return max_id + 1;
}

/// Builds a set from a payload matrix and its sidecar, checking that every
/// parallel array matches the payload row count.
inline EmbeddingSet assemble(Eigen::MatrixXd rows, const nlohmann::json& meta) {
  require(meta.is_object(), ErrorKind::Format, "sidecar must be a JSON object");
  require(meta.contains("labels"), ErrorKind::Format, "sidecar lacks 'labels'");
  auto labels = json_list<int>(meta, "labels");
  auto attributes = meta.contains("attributes") ? json_list<int>(meta, "attributes")
                                                : std::vector<int>(labels.size(), 0);
  auto class_names = json_list<std::string>(meta, "class_names");
  auto attribute_names = json_list<std::string>(meta, "attribute_names");
  const auto n = static_cast<std::size_t>(rows.rows());
  require(labels.size() == n, ErrorKind::Consistency,
          "sidecar has " + std::to_string(labels.size()) + " labels, payload has " + std::to_string(n) + " rows");
  require(attributes.size() == n, ErrorKind::Consistency,
          "sidecar has " + std::to_string(attributes.size()) + " attributes, payload has " + std::to_string(n) +
              " rows");
  const int num_classes = count_from(meta, "num_classes", class_names.size(), labels);
  const int num_attributes = count_from(meta, "num_attributes", attribute_names.size(), attributes);
  EmbeddingSet set(std::move(rows), std::move(labels), std::move(attributes), num_classes, num_attributes,
                   std::move(class_names), std::move(attribute_names));
  if (meta.contains("groups")) {
    const auto groups = json_list<int>(meta, "groups");
    require(groups.size() == n, ErrorKind::Consistency, "sidecar groups length differs from payload");
    for (std::size_t i = 0; i < n; ++i) {
      require(groups[i] == set.groups()[i], ErrorKind::Consistency,
              "group id at row " + std::to_string(i) + " is not label * A + attribute", i);
    }
  }
  return set;
}

}  // namespace emb1

/// Writes `<path>` (EMB1, f32 payload rounded to nearest) and
/// `<path>.meta.json`. Keys in `extra` are merged into the sidecar.
inline void write_embeddings(const EmbeddingSet& set, const std::filesystem::path& path,
                             const nlohmann::json& extra = nlohmann::json::object()) {
  const std::string payload = emb1::encode_payload(set.rows());
  nlohmann::json meta = emb1::sidecar_json(set);
  for (const auto& [key, value] : extra.items()) meta[key] = value;
  write_file_atomic(path, payload);
  write_file_atomic(emb1::sidecar_path(path), meta.dump(2) + "\n");
}

namespace csv {

inline std::vector<std::string_view> split_line(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    cells.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  for (auto& c : cells) {
    while (!c.empty() && (c.back() == '\r' || c.back() == ' ')) c.remove_suffix(1);
    while (!c.empty() && c.front() == ' ') c.remove_prefix(1);
  }
  return cells;
}

template <typename T>
T parse_number(std::string_view cell, std::size_t line_no) {
  T value{};
  const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), value);
  require(ec == std::errc() && ptr == cell.data() + cell.size(), ErrorKind::Format,
          "cannot parse '" + std::string(cell) + "' on line " + std::to_string(line_no));
  return value;
}

/// CSV with header d0..d{D-1},label,attribute. An optional sidecar
/// supplies names and counts.
inline EmbeddingSet read(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t nl = text.find('\n', start);
    if (nl == std::string::npos) nl = text.size();
    std::string_view line(text.data() + start, nl - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!line.empty()) lines.push_back(line);
    start = nl + 1;
  }
  require(!lines.empty(), ErrorKind::Format, "empty CSV");
  const auto header = split_line(lines[0]);
  require(header.size() >= 3, ErrorKind::Format, "CSV header needs d0..,label,attribute");
  const std::size_t dim = header.size() - 2;
  for (std::size_t j = 0; j < dim; ++j) {
    require(header[j] == "d" + std::to_string(j), ErrorKind::Format,
            "CSV header column " + std::to_string(j) + " should be d" + std::to_string(j));
  }
  require(header[dim] == "label" && header[dim + 1] == "attribute", ErrorKind::Format,
          "CSV header must end with label,attribute");
  Eigen::MatrixXd rows(static_cast<Eigen::Index>(lines.size() - 1), static_cast<Eigen::Index>(dim));
  nlohmann::json meta;
  std::vector<int> labels, attributes;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto cells = split_line(lines[i]);
    require(cells.size() == header.size(), ErrorKind::Format,
            "line " + std::to_string(i + 1) + " has " + std::to_string(cells.size()) + " cells");
    for (std::size_t j = 0; j < dim; ++j) {
      rows(static_cast<Eigen::Index>(i - 1), static_cast<Eigen::Index>(j)) = parse_number<double>(cells[j], i + 1);
    }
    labels.push_back(parse_number<int>(cells[dim], i + 1));
    attributes.push_back(parse_number<int>(cells[dim + 1], i + 1));
  }
  if (std::filesystem::exists(emb1::sidecar_path(path))) {
    try {
      meta = nlohmann::json::parse(read_file(emb1::sidecar_path(path)));
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorKind::Format, std::string("sidecar: ") + e.what());
    }
  }
  meta["labels"] = labels;
  meta["attributes"] = attributes;
  return emb1::assemble(std::move(rows), meta);
}

}  // namespace csv

/// Reads an EMB1 file and its sidecar, or a CSV file when the extension is
/// `.csv`. The f32 payload is widened to f64 exactly.
inline EmbeddingSet read_embeddings(const std::filesystem::path& path) {
  if (path.extension() == ".csv") return csv::read(path);
  const std::string bytes = read_file(path);
  const auto header = emb1::parse_header(bytes);
  Eigen::MatrixXd rows = emb1::decode_payload(bytes, header);
  const auto meta_path = emb1::sidecar_path(path);
  require(std::filesystem::exists(meta_path), ErrorKind::Io, "missing sidecar '" + meta_path.string() + "'");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_file(meta_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::Format, std::string("sidecar: ") + e.what());
  }
  return emb1::assemble(std::move(rows), meta);
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticConfig {
  /// Sample counts per (y, a) cell in order (0,0), (0,1), (1,0), (1,1).
  std::array<std::size_t, 4> group_counts{};
  int dim = 64;
  double beta_core = 1.0;
  double beta_spur = 1.0;
  double sigma = 0.5;
  std::uint64_t seed = 0;
  /// Selects an independent noise stream; the planted directions depend on
  /// `seed` alone, so stream 1 is a fresh sample of the same distribution.
  std::uint64_t sample_stream = 0;

  void validate() const {
    std::size_t total = 0;
    for (auto c : group_counts) total += c;
    require(total >= 4, ErrorKind::Config, "group_counts must total at least 4");
    require(group_counts[0] + group_counts[1] > 0, ErrorKind::Config, "class 0 has no samples");
    require(group_counts[2] + group_counts[3] > 0, ErrorKind::Config, "class 1 has no samples");
    require(dim >= 2, ErrorKind::Config, "dim must be >= 2");
    require(std::isfinite(beta_core) && std::isfinite(beta_spur), ErrorKind::Config, "betas must be finite");
    require(sigma > 0.0 && std::isfinite(sigma), ErrorKind::Config, "sigma must be > 0");
  }
};

struct SyntheticData {
  EmbeddingSet set;
  Eigen::VectorXd core_direction;
  Eigen::VectorXd spurious_direction;
};

/// x = s(y) beta_core u_core + s(a) beta_spur u_spur + sigma eps with
/// s(0) = -1, s(1) = +1 and u_core orthonormal to u_spur. Rows are emitted
/// cell by cell in group order.
inline SyntheticData generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  const auto d = static_cast<Eigen::Index>(cfg.dim);
  Rng dir_rng(cfg.seed);
  Eigen::VectorXd core(d), spur(d);
  for (Eigen::Index i = 0; i < d; ++i) core[i] = dir_rng.normal();
  for (Eigen::Index i = 0; i < d; ++i) spur[i] = dir_rng.normal();
  core.normalize();
  for (int pass = 0; pass < 2; ++pass) spur -= core.dot(spur) * core;
  spur.normalize();

  Rng rng(cfg.seed);
  for (std::uint64_t k = 0; k <= cfg.sample_stream; ++k) rng.jump();

  std::size_t total = 0;
  for (auto c : cfg.group_counts) total += c;
  Eigen::MatrixXd rows(static_cast<Eigen::Index>(total), d);
  std::vector<int> labels, attributes;
  labels.reserve(total);
  attributes.reserve(total);
  Eigen::Index r = 0;
  for (int cell = 0; cell < 4; ++cell) {
    const int y = cell / 2;
    const int a = cell % 2;
    const double sy = y == 1 ? 1.0 : -1.0;
    const double sa = a == 1 ? 1.0 : -1.0;
    for (std::size_t k = 0; k < cfg.group_counts[static_cast<std::size_t>(cell)]; ++k, ++r) {
      for (Eigen::Index j = 0; j < d; ++j) {
        rows(r, j) = sy * cfg.beta_core * core[j] + sa * cfg.beta_spur * spur[j] + cfg.sigma * rng.normal();
      }
      labels.push_back(y);
      attributes.push_back(a);
    }
  }
  EmbeddingSet set(std::move(rows), std::move(labels), std::move(attributes), 2, 2);
  return {std::move(set), std::move(core), std::move(spur)};
}

// ---------------------------------------------------------------------------
// Splits

struct SplitFractions {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;
};

/// Seeded permutation, then val and test take floor(fraction * N) rows and
/// train takes the remainder.
inline std::tuple<EmbeddingSet, EmbeddingSet, EmbeddingSet> split(const EmbeddingSet& set, SplitFractions f,
                                                                  std::uint64_t seed) {
  for (double x : {f.train, f.val, f.test}) {
    require(x > 0.0 && std::isfinite(x), ErrorKind::Config, "split fractions must be positive");
  }
  require(std::abs(f.train + f.val + f.test - 1.0) <= 1e-9, ErrorKind::Config, "split fractions must sum to 1");
  const std::size_t n = set.size();
  const auto n_val = static_cast<std::size_t>(std::floor(f.val * static_cast<double>(n)));
  const auto n_test = static_cast<std::size_t>(std::floor(f.test * static_cast<double>(n)));
  const std::size_t n_train = n - n_val - n_test;
  if (n >= 3) {
    require(n_train > 0, ErrorKind::Config, "train split would be empty");
    require(n_val > 0, ErrorKind::Config, "validation split would be empty");
    require(n_test > 0, ErrorKind::Config, "test split would be empty");
  } else {
    require(n_train > 0 && n_val > 0 && n_test > 0, ErrorKind::Config,
            "cannot split " + std::to_string(n) + " rows three ways");
  }
  Rng rng(seed);
  const auto perm = rng.permutation(n);
  std::span<const std::size_t> all(perm);
  return {set.subset(all.subspan(0, n_train)), set.subset(all.subspan(n_train, n_val)),
          set.subset(all.subspan(n_train + n_val, n_test))};
}

}  // namespace corelens
