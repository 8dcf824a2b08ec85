#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "corelens/embstore.hpp"

namespace fs = std::filesystem;
using namespace corelens;

namespace {

fs::path temp_dir() {
  const auto dir = fs::temp_directory_path() / ("corelens_embstore_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir;
}

EmbeddingSet small_set() {
  Eigen::MatrixXd rows(2, 3);
  rows << 0.1, -2.5, 3.0, 1e-3, 7.25, -0.3;
  return EmbeddingSet(rows, {0, 1}, {1, 0}, 2, 2, {"landbird", "waterbird"}, {"land", "water"});
}

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected corelens::Error";
  return ErrorKind::Io;
}

}  // namespace

TEST(DeriveGroups, EnumerationOrder) {
  const std::vector<int> labels = {0, 1, 0};
  const std::vector<int> attrs = {1, 0, 0};
  EXPECT_EQ(derive_groups(labels, attrs, 2), (std::vector<int>{1, 2, 0}));
}

TEST(DeriveGroups, BijectionOverCells) {
  for (int classes = 1; classes <= 4; ++classes) {
    for (int attrs = 1; attrs <= 4; ++attrs) {
      std::vector<int> ys, as;
      for (int y = 0; y < classes; ++y) {
        for (int a = 0; a < attrs; ++a) {
          ys.push_back(y);
          as.push_back(a);
        }
      }
      const auto g = derive_groups(ys, as, attrs, classes);
      std::vector<int> sorted = g;
      std::sort(sorted.begin(), sorted.end());
      for (int k = 0; k < classes * attrs; ++k) EXPECT_EQ(sorted[static_cast<std::size_t>(k)], k);
    }
  }
}

TEST(DeriveGroups, OutOfRangeAttribute) {
  const std::vector<int> labels = {0};
  const std::vector<int> attrs = {2};
  EXPECT_EQ(kind_of([&] { derive_groups(labels, attrs, 2); }), ErrorKind::Data);
}

TEST(EmbeddingSet, RejectsNonFiniteRowNamingIndex) {
  Eigen::MatrixXd rows = Eigen::MatrixXd::Zero(3, 2);
  rows(2, 1) = std::nan("");
  try {
    EmbeddingSet(rows, {0, 0, 1}, {0, 0, 0}, 2, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Data);
    EXPECT_EQ(e.index(), 2u);
  }
}

TEST(Emb1, FileSizeIsHeaderPlusPayload) {
  const auto path = temp_dir() / "small.emb1";
  write_embeddings(small_set(), path);
  EXPECT_EQ(fs::file_size(path), emb1::kHeaderBytes + 24u);
  EXPECT_TRUE(fs::exists(emb1::sidecar_path(path)));
}

TEST(Emb1, RoundTripPreservesMetadataAndQuantizedPayload) {
  const auto path = temp_dir() / "round.emb1";
  const auto set = small_set();
  write_embeddings(set, path);
  const auto back = read_embeddings(path);
  EXPECT_EQ(back.labels(), set.labels());
  EXPECT_EQ(back.attributes(), set.attributes());
  EXPECT_EQ(back.groups(), set.groups());
  EXPECT_EQ(back.class_names(), set.class_names());
  EXPECT_EQ(back.attribute_names(), set.attribute_names());
  for (Eigen::Index i = 0; i < set.rows().rows(); ++i) {
    for (Eigen::Index j = 0; j < set.rows().cols(); ++j) {
      EXPECT_EQ(back.rows()(i, j), static_cast<double>(static_cast<float>(set.rows()(i, j))));
    }
  }
}

TEST(Emb1, RewriteIsBitIdentical) {
  // Property: write(read(write(x))) == write(x) for random f32-representable payloads.
  Rng rng(77);
  const auto dir = temp_dir();
  for (int trial = 0; trial < 20; ++trial) {
    const auto n = static_cast<Eigen::Index>(1 + rng.below(20));
    const auto d = static_cast<Eigen::Index>(1 + rng.below(16));
    Eigen::MatrixXd rows(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < d; ++j) rows(i, j) = rng.normal() * std::pow(10.0, rng.normal() * 3);
    }
    std::vector<int> labels, attrs;
    for (Eigen::Index i = 0; i < n; ++i) {
      labels.push_back(static_cast<int>(rng.below(3)));
      attrs.push_back(static_cast<int>(rng.below(2)));
    }
    const EmbeddingSet set(rows, labels, attrs, 3, 2);
    write_embeddings(set, dir / "a.emb1");
    write_embeddings(read_embeddings(dir / "a.emb1"), dir / "b.emb1");
    EXPECT_EQ(read_file(dir / "a.emb1"), read_file(dir / "b.emb1"));
    EXPECT_EQ(read_file(dir / "a.emb1.meta.json"), read_file(dir / "b.emb1.meta.json"));
  }
}

TEST(Emb1, BadMagicIsFormatError) {
  const auto path = temp_dir() / "magic.emb1";
  write_embeddings(small_set(), path);
  std::string bytes = read_file(path);
  bytes.replace(0, 4, "XXXX");
  write_bytes(path, bytes);
  EXPECT_EQ(kind_of([&] { read_embeddings(path); }), ErrorKind::Format);
}

TEST(Emb1, BadVersionIsFormatError) {
  const auto path = temp_dir() / "version.emb1";
  write_embeddings(small_set(), path);
  std::string bytes = read_file(path);
  bytes[4] = 2;
  write_bytes(path, bytes);
  EXPECT_EQ(kind_of([&] { read_embeddings(path); }), ErrorKind::Format);
}

TEST(Emb1, LabelCountMismatchIsConsistencyError) {
  const auto path = temp_dir() / "mismatch.emb1";
  Eigen::MatrixXd rows = Eigen::MatrixXd::Ones(4, 2);
  write_embeddings(EmbeddingSet(rows, {0, 1, 0, 1}, {0, 0, 0, 0}, 2, 1), path);
  write_bytes(emb1::sidecar_path(path), R"({"labels":[0,1,0],"attributes":[0,0,0]})");
  EXPECT_EQ(kind_of([&] { read_embeddings(path); }), ErrorKind::Consistency);
}

TEST(Emb1, NonFinitePayloadNamesRow) {
  const auto path = temp_dir() / "nan.emb1";
  Eigen::MatrixXd rows = Eigen::MatrixXd::Ones(3, 2);
  write_embeddings(EmbeddingSet(rows, {0, 1, 0}, {0, 0, 0}, 2, 1), path);
  std::string bytes = read_file(path);
  const float nan = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(bytes.data() + emb1::kHeaderBytes + 2 * 2 * 4, &nan, 4);
  write_bytes(path, bytes);
  try {
    read_embeddings(path);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Data);
    EXPECT_EQ(e.index(), 2u);
  }
}

TEST(Emb1, GroupsInSidecarMustMatchFormula) {
  const auto path = temp_dir() / "groups.emb1";
  write_embeddings(small_set(), path);
  write_bytes(emb1::sidecar_path(path), R"({"labels":[0,1],"attributes":[1,0],"groups":[0,2],"num_attributes":2})");
  EXPECT_EQ(kind_of([&] { read_embeddings(path); }), ErrorKind::Consistency);
}

TEST(Emb1, GroupsDerivedWhenAbsent) {
  const auto path = temp_dir() / "nogroups.emb1";
  write_embeddings(small_set(), path);
  write_bytes(emb1::sidecar_path(path), R"({"labels":[0,1],"attributes":[1,0],"num_attributes":2})");
  EXPECT_EQ(read_embeddings(path).groups(), (std::vector<int>{1, 2}));
}

TEST(Emb1, UnwritablePathIsIoError) {
  EXPECT_EQ(kind_of([&] { write_embeddings(small_set(), "/nonexistent_dir_corelens/x.emb1"); }), ErrorKind::Io);
}

TEST(Emb1, MalformedHeadersNeverCrash) {
  const auto path = temp_dir() / "fuzz.emb1";
  write_embeddings(small_set(), path);
  const std::string good = read_file(path);
  Rng rng(2024);
  for (int trial = 0; trial < 2000; ++trial) {
    std::string bytes = good;
    const int mode = static_cast<int>(rng.below(3));
    if (mode == 0) {
      bytes.resize(rng.below(good.size()));
    } else {
      const auto flips = 1 + rng.below(4);
      for (std::uint64_t k = 0; k < flips; ++k) {
        bytes[rng.below(emb1::kHeaderBytes)] = static_cast<char>(rng.below(256));
      }
      if (mode == 2) bytes.append(rng.below(9), '\0');
    }
    write_bytes(path, bytes);
    try {
      const auto set = read_embeddings(path);
      EXPECT_EQ(set.size(), 2u);  // only a header-neutral mutation can survive
    } catch (const Error&) {
    }
  }
}

TEST(Csv, ReadsHeaderAndRows) {
  const auto path = temp_dir() / "small.csv";
  write_bytes(path, "d0,d1,label,attribute\n0.5,1.5,1,0\n-1,2,0,1\n");
  const auto set = read_embeddings(path);
  EXPECT_EQ(set.size(), 2u);
  EXPECT_EQ(set.dim(), 2);
  EXPECT_EQ(set.rows()(0, 1), 1.5);
  EXPECT_EQ(set.groups(), (std::vector<int>{2, 1}));
}

TEST(Csv, BadHeaderIsFormatError) {
  const auto path = temp_dir() / "bad.csv";
  write_bytes(path, "x0,d1,label,attribute\n0.5,1.5,1,0\n");
  EXPECT_EQ(kind_of([&] { read_embeddings(path); }), ErrorKind::Format);
}

TEST(Synthetic, DirectionsOrthonormal) {
  SyntheticConfig cfg;
  cfg.group_counts = {10, 10, 10, 10};
  cfg.dim = 64;
  cfg.seed = 3;
  const auto data = generate_synthetic(cfg);
  EXPECT_NEAR(data.core_direction.dot(data.spurious_direction), 0.0, 1e-12);
  EXPECT_NEAR(data.core_direction.norm(), 1.0, 1e-12);
  EXPECT_NEAR(data.spurious_direction.norm(), 1.0, 1e-12);
}

TEST(Synthetic, NoiselessCoreProjection) {
  SyntheticConfig cfg;
  cfg.group_counts = {5, 5, 5, 5};
  cfg.dim = 8;
  cfg.beta_core = 1.5;
  cfg.beta_spur = 0.0;
  cfg.sigma = 1e-300;
  cfg.seed = 11;
  const auto data = generate_synthetic(cfg);
  for (std::size_t i = 0; i < data.set.size(); ++i) {
    const double proj = data.set.row(i).dot(data.core_direction.transpose());
    EXPECT_NEAR(proj, data.set.labels()[i] == 1 ? 1.5 : -1.5, 1e-12);
  }
}

TEST(Synthetic, Deterministic) {
  SyntheticConfig cfg;
  cfg.group_counts = {9, 1, 1, 9};
  cfg.seed = 42;
  EXPECT_EQ(generate_synthetic(cfg).set.rows(), generate_synthetic(cfg).set.rows());
}

TEST(Synthetic, StreamsShareDirectionsButNotNoise) {
  SyntheticConfig cfg;
  cfg.group_counts = {4, 4, 4, 4};
  cfg.seed = 42;
  const auto a = generate_synthetic(cfg);
  cfg.sample_stream = 1;
  const auto b = generate_synthetic(cfg);
  EXPECT_EQ(a.core_direction, b.core_direction);
  EXPECT_EQ(a.spurious_direction, b.spurious_direction);
  EXPECT_NE(a.set.rows(), b.set.rows());
}

TEST(Synthetic, ClassMeansConvergeToPlantedSignal) {
  SyntheticConfig cfg;
  cfg.group_counts = {900, 100, 100, 900};
  cfg.dim = 64;
  cfg.seed = 5;
  const auto data = generate_synthetic(cfg);
  for (int y = 0; y < 2; ++y) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < data.set.size(); ++i) {
      if (data.set.labels()[i] != y) continue;
      sum += data.set.row(i).dot(data.core_direction.transpose());
      ++n;
    }
    const double expected = (y == 1 ? 1.0 : -1.0) * cfg.beta_core;
    EXPECT_NEAR(sum / static_cast<double>(n), expected, 5.0 * cfg.sigma / std::sqrt(static_cast<double>(n)));
  }
}

TEST(Synthetic, BayesCoreClassifierMatchesGaussianCdf) {
  // Oracle: sign(<x, u_core>) is correct with probability Phi(beta_core / sigma) = Phi(2).
  const double phi2 = 0.5 * std::erfc(-2.0 / std::sqrt(2.0));
  EXPECT_NEAR(phi2, 0.97725, 1e-5);
  SyntheticConfig cfg;
  cfg.group_counts = {900, 100, 100, 900};
  cfg.dim = 64;
  cfg.seed = 9;
  cfg.sample_stream = 3;
  const auto data = generate_synthetic(cfg);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.set.size(); ++i) {
    const int pred = data.set.row(i).dot(data.core_direction.transpose()) > 0 ? 1 : 0;
    correct += pred == data.set.labels()[i];
  }
  const double n = static_cast<double>(data.set.size());
  EXPECT_NEAR(static_cast<double>(correct) / n, phi2, 5.0 * std::sqrt(phi2 * (1 - phi2) / n));
}

TEST(Synthetic, RejectsEmptyClass) {
  SyntheticConfig cfg;
  cfg.group_counts = {5, 5, 0, 0};
  EXPECT_EQ(kind_of([&] { generate_synthetic(cfg); }), ErrorKind::Config);
}

TEST(Split, SizesFloorWithRemainderToTrain) {
  Eigen::MatrixXd rows = Eigen::MatrixXd::Random(10, 3);
  const EmbeddingSet set(rows, std::vector<int>(10, 0), std::vector<int>(10, 0), 1, 1);
  const auto [train, val, test] = split(set, {0.6, 0.2, 0.2}, 1);
  EXPECT_EQ(train.size(), 6u);
  EXPECT_EQ(val.size(), 2u);
  EXPECT_EQ(test.size(), 2u);
  const auto [train2, val2, test2] = split(set, {0.55, 0.25, 0.2}, 1);
  EXPECT_EQ(train2.size(), 6u);  // 10 - floor(2.5) - floor(2.0)
}

TEST(Split, SeededAndGroupPreserving) {
  SyntheticConfig cfg;
  cfg.group_counts = {20, 5, 5, 20};
  cfg.seed = 1;
  const auto set = generate_synthetic(cfg).set;
  const auto [a1, b1, c1] = split(set, {0.6, 0.2, 0.2}, 99);
  const auto [a2, b2, c2] = split(set, {0.6, 0.2, 0.2}, 99);
  EXPECT_EQ(a1.rows(), a2.rows());
  EXPECT_EQ(c1.groups(), c2.groups());
  std::vector<std::size_t> counts(4, 0);
  for (const auto* part : {&a1, &b1, &c1}) {
    for (int g : part->groups()) ++counts[static_cast<std::size_t>(g)];
  }
  EXPECT_EQ(counts, set.group_counts());
}

TEST(Split, FractionsMustSumToOne) {
  Eigen::MatrixXd rows = Eigen::MatrixXd::Random(10, 3);
  const EmbeddingSet set(rows, std::vector<int>(10, 0), std::vector<int>(10, 0), 1, 1);
  EXPECT_EQ(kind_of([&] { split(set, {0.5, 0.5, 0.5}, 1); }), ErrorKind::Config);
  EXPECT_EQ(kind_of([&] { split(set, {0.98, 0.01, 0.01}, 1); }), ErrorKind::Config);
}
