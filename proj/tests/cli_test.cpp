#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "corelens/cli.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace corelens;

namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string(CORELENS_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / ("corelens_cli_" + std::to_string(::getpid()) + "_" + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string p(const std::string& name) const { return (dir_ / name).string(); }

  void write_config(const std::string& name, const json& j) const {
    std::ofstream(dir_ / name) << j.dump(2);
  }

  json read_json(const std::string& name) const { return json::parse(read_file(dir_ / name)); }

  void pipeline() const {
    ASSERT_EQ(run_cli("gen-synth --group-counts 900 100 100 900 --dim 64 --seed 0 --out " + p("data.emb1") +
                      " --directions-out " + p("dirs.emb1")),
              0);
    ASSERT_EQ(run_cli("split --input " + p("data.emb1") + " --fractions 0.6 0.2 0.2 --seed 1 --out-prefix " +
                      p("data")),
              0);
    write_config("train.json", {{"probe-train",
                                 {{"method", "erm"},
                                  {"train", p("data.train.emb1")},
                                  {"val", p("data.val.emb1")},
                                  {"seed", 3},
                                  {"out", p("erm.json")}}}});
    ASSERT_EQ(run_cli("probe-train --config " + p("train.json")), 0);
    ASSERT_EQ(run_cli("eval --probe " + p("erm.json") + " --input " + p("data.test.emb1") + " --out " +
                      p("before.json") + " --csv " + p("before.csv")),
              0);
    for (const std::string part : {"train", "val", "test"}) {
      ASSERT_EQ(run_cli("distill --input " + p("data." + part + ".emb1") + " --background " + p("dirs.emb1") +
                        " --num-vectors 1 --out " + p("proj." + part + ".emb1") + " --report " +
                        p("distill_" + part + ".json")),
                0);
    }
    ASSERT_EQ(run_cli("probe-train --config " + p("train.json") + " --train " + p("proj.train.emb1") + " --val " +
                      p("proj.val.emb1") + " --out " + p("erm_proj.json")),
              0);
    ASSERT_EQ(run_cli("eval --probe " + p("erm_proj.json") + " --input " + p("proj.test.emb1") + " --out " +
                      p("after.json")),
              0);
    ASSERT_EQ(run_cli("compare --before " + p("before.json") + " --after " + p("after.json") + " --out " +
                      p("delta.json") + " --csv " + p("delta.csv")),
              0);
    ASSERT_EQ(run_cli("sweep --reports none=" + p("before.json") + " spurious=" + p("after.json") + " --out " +
                      p("sweep.json") + " --csv " + p("sweep.csv")),
              0);
    ASSERT_EQ(run_cli("audit --images " + p("data.test.emb1") + " --query " + p("dirs.emb1") +
                      " --query-row 0 --out " + p("audit.json") + " --similarities-csv " + p("sims.csv")),
              0);
  }

  fs::path dir_;
};

}  // namespace

TEST_F(CliTest, PipelineProducesFourGroupReport) {
  pipeline();
  const auto before = read_json("before.json");
  EXPECT_EQ(before.at("command"), "eval");
  EXPECT_TRUE(before.contains("config_digest"));
  EXPECT_TRUE(before.at("metadata").contains("created_at"));
  const auto report = report_from_json(before.at("report"));
  EXPECT_EQ(report.n_groups, 4);
  EXPECT_EQ(report.per_group.size(), 4u);
  EXPECT_EQ(read_file(dir_ / "before.csv").substr(0, 26), "group,correct,total,accura");
}

TEST_F(CliTest, ProjectionComparisonHasPerGroupRows) {
  pipeline();
  const auto delta = read_json("delta.json").at("comparison");
  EXPECT_EQ(delta.at("groups").size(), 4u);
  const auto before = report_from_json(read_json("before.json").at("report"));
  const auto after = report_from_json(read_json("after.json").at("report"));
  EXPECT_GT(after.wga, before.wga);
  EXPECT_EQ(read_json("distill_test.json").at("distill").at("rank"), 1);
  const auto sweep = read_json("sweep.json").at("sweep");
  ASSERT_EQ(sweep.size(), 2u);
  EXPECT_LE(sweep[0].at("avg_group").get<double>(), sweep[1].at("avg_group").get<double>());
}

TEST_F(CliTest, ArtifactsCarryProvenance) {
  pipeline();
  const auto sidecar = json::parse(read_file(dir_ / "data.train.emb1.meta.json"));
  EXPECT_EQ(sidecar.at("provenance").at("command"), "split");
  EXPECT_EQ(sidecar.at("provenance").at("seed"), 1);
  const auto probe = read_json("erm.json");
  EXPECT_EQ(probe.at("probe").at("config_digest"), probe.at("config_digest"));
  EXPECT_EQ(probe.at("probe").at("provenance"), "erm");
}

TEST_F(CliTest, RerunIsByteIdenticalOutsideMetadata) {
  pipeline();
  std::map<std::string, std::string> first;
  for (const auto& entry : fs::directory_iterator(dir_)) first[entry.path().filename()] = read_file(entry.path());
  pipeline();
  std::size_t compared = 0;
  for (const auto& entry : fs::directory_iterator(dir_)) {
    const std::string name = entry.path().filename();
    ASSERT_TRUE(first.count(name)) << name;
    std::string a = first[name];
    std::string b = read_file(entry.path());
    if (entry.path().extension() == ".json" && name.find("meta") == std::string::npos) {
      auto ja = json::parse(a), jb = json::parse(b);
      ja.erase("metadata");
      jb.erase("metadata");
      a = ja.dump();
      b = jb.dump();
    }
    EXPECT_EQ(a, b) << name;
    ++compared;
  }
  EXPECT_GT(compared, 20u);
}

TEST_F(CliTest, ZeroShotProbe) {
  std::ofstream(dir_ / "classes.csv") << "d0,d1,label,attribute\n1,0,0,0\n0,1,1,0\n";
  std::ofstream(dir_ / "points.csv") << "d0,d1,label,attribute\n2,0.1,0,0\n0.2,3,1,1\n1,1,0,1\n";
  ASSERT_EQ(run_cli("probe-train --method zeroshot --class-embeddings " + p("classes.csv") + " --out " +
                    p("zs.json")),
            0);
  ASSERT_EQ(run_cli("eval --probe " + p("zs.json") + " --input " + p("points.csv") + " --out " + p("zs_report.json")),
            0);
  EXPECT_EQ(read_json("zs_report.json").at("report").at("avg_sample"), 1.0);
}

TEST_F(CliTest, MissingSeedIsConfigError) {
  EXPECT_EQ(run_cli("gen-synth --group-counts 10 10 10 10 --out " + p("x.emb1")), 2);
  EXPECT_FALSE(fs::exists(dir_ / "x.emb1"));
}

TEST_F(CliTest, UnknownFlagAndMissingInputAreConfigErrors) {
  EXPECT_EQ(run_cli("gen-synth --bogus 1"), 2);
  EXPECT_EQ(run_cli("eval --probe " + p("nope.json") + " --input " + p("nope.emb1") + " --out " + p("r.json")), 2);
  EXPECT_EQ(run_cli("probe-train --method svm --out " + p("x.json")), 2);
  EXPECT_EQ(run_cli(""), 2);
}

TEST_F(CliTest, CorruptInputIsDataError) {
  std::ofstream(dir_ / "bad.emb1") << "XXXXgarbage";
  EXPECT_EQ(run_cli("split --input " + p("bad.emb1") + " --seed 0 --out-prefix " + p("s")), 3);
}

TEST_F(CliTest, DependentBackgroundIsNumericalError) {
  std::ofstream(dir_ / "points.csv") << "d0,d1,label,attribute\n1,2,0,0\n3,4,1,0\n";
  std::ofstream(dir_ / "bg.csv") << "d0,d1,label,attribute\n1,0,0,0\n2,0,0,0\n";
  EXPECT_EQ(run_cli("distill --input " + p("points.csv") + " --background " + p("bg.csv") + " --out " + p("o.emb1")),
            4);
  EXPECT_EQ(run_cli("distill --input " + p("points.csv") + " --background " + p("bg.csv") +
                    " --num-vectors 1 --out " + p("o.emb1")),
            0);
}

TEST_F(CliTest, DimensionMismatchRejected) {
  std::ofstream(dir_ / "classes.csv") << "d0,d1,label,attribute\n1,0,0,0\n0,1,1,0\n";
  std::ofstream(dir_ / "points.csv") << "d0,d1,d2,label,attribute\n1,0,0,0,0\n";
  ASSERT_EQ(run_cli("probe-train --method zeroshot --class-embeddings " + p("classes.csv") + " --out " +
                    p("zs.json")),
            0);
  EXPECT_EQ(run_cli("eval --probe " + p("zs.json") + " --input " + p("points.csv") + " --out " + p("r.json")), 3);
}

TEST_F(CliTest, InvertRecordsTrace) {
  ASSERT_EQ(run_cli("invert --seed 0 --initial-text dog --target-text dog --max-iter 10 --out " + p("inv.json")), 0);
  const auto inv = read_json("inv.json").at("inversion");
  EXPECT_EQ(inv.at("recovered_text"), "dog");
  EXPECT_EQ(inv.at("success"), true);
  EXPECT_EQ(inv.at("loss_trace").size(), 10u);
  ASSERT_EQ(run_cli("invert --seed 0 --initial-text dog --target-vector 1 0 0 0 0 0 0 0 0 0 0 0 0 0 0 0 0 0 0 0 0 0 "
                    "0 0 0 0 0 0 0 0 0 0 --max-iter 5 --out " +
                    p("vec.json")),
            0);
  EXPECT_EQ(read_json("vec.json").at("inversion").at("success"), "n/a");
  EXPECT_EQ(run_cli("invert --seed 0 --initial-text dog --max-iter 5 --out " + p("none.json")), 2);
}

TEST_F(CliTest, InvertGridWritesSixBySixMatrix) {
  write_config("grid.json", {{"seed", 0}, {"max_iter", 20}, {"out_dir", p("grid")}});
  ASSERT_EQ(run_cli("invert-grid --config " + p("grid.json")), 0);
  const auto csv = read_file(dir_ / "grid" / "success_matrix.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "initial\\target,cat,dog,cow,hen,fox,owl");
  const auto runs = json::parse(read_file(dir_ / "grid" / "runs.json")).at("grid").at("runs");
  EXPECT_EQ(runs.size(), 36u);
}

TEST(CliLibrary, SectionSelection) {
  const json doc = {{"eval", {{"out", "a"}}}, {"out", "b"}};
  EXPECT_EQ(cli::section(doc, "eval").at("out"), "a");
  EXPECT_EQ(cli::section(doc, "split").at("out"), "b");
  EXPECT_THROW(cli::section(json::array(), "eval"), Error);
}

TEST(CliLibrary, UnknownCommand) {
  try {
    cli::run("frobnicate", json::object());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(exit_code(e.kind()), 2);
  }
}
