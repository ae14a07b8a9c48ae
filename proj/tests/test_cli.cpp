#include <gtest/gtest.h>

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "rairl/cli.hpp"

namespace fs = std::filesystem;
using namespace rairl;

namespace {

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        setenv("RAIRL_LOG", "off", 0);
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        root_ = fs::temp_directory_path() /
                ("rairl-cli-" + std::to_string(getpid()) + "-" + info->name());
        fs::remove_all(root_);
        fs::create_directories(root_);
    }
    void TearDown() override { fs::remove_all(root_); }

    // Small but complete experiment: every report runs in well under a second.
    fs::path write_config(nlohmann::json extra = nlohmann::json::object()) {
        nlohmann::json j = {{"version", 1},
                            {"world", {{"seed", 7}}},
                            {"training", {{"iterations", 20}, {"eval_every", 10}, {"seed", 3}}},
                            {"evaluation",
                             {{"compactness_sentences", 5}, {"diversity_samples", 20}, {"topk_samples", 10}}}};
        j.merge_patch(extra);
        const auto p = root_ / "config.json";
        write_json_file(p, j);
        return p;
    }

    std::string path(const std::string& rel) const { return (root_ / rel).string(); }

    static std::string read(const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        std::ostringstream s;
        s << in.rdbuf();
        return s.str();
    }

    fs::path root_;
};

int cli(std::vector<std::string> args) { return cli::run(args); }

TEST_F(CliTest, MissingSubcommandIsConfigError) { EXPECT_EQ(cli({}), cli::exit_config); }

TEST_F(CliTest, HelpExitsCleanly) {
    ::testing::internal::CaptureStdout();
    EXPECT_EQ(cli({"--help"}), cli::exit_ok);
    EXPECT_NE(::testing::internal::GetCapturedStdout().find("train"), std::string::npos);
}

TEST_F(CliTest, UnknownConfigKeyIsConfigError) {
    const auto c = write_config({{"training", {{"learning_rat", 0.1}}}});
    EXPECT_EQ(cli({"train", "--config", c.string(), "--out", path("out")}), cli::exit_config);
    EXPECT_FALSE(fs::exists(root_ / "out" / "final.ckpt"));
}

TEST_F(CliTest, WrongConfigVersionIsVersionError) {
    const auto c = write_config({{"version", 2}});
    EXPECT_EQ(cli({"train", "--config", c.string(), "--out", path("out")}), cli::exit_version);
}

TEST_F(CliTest, MissingWorldFileNamesThePath) {
    const auto c = write_config({{"world", nullptr}});
    auto j = read_json_file(c, "config");
    j["world"] = {{"file", "no-such-world.json"}};
    write_json_file(c, j);
    ::testing::internal::CaptureStderr();
    setenv("RAIRL_LOG", "error", 1);
    spdlog::drop("rairl");
    const int code = cli({"train", "--config", c.string(), "--out", path("out")});
    const auto err = ::testing::internal::GetCapturedStderr();
    spdlog::drop("rairl");
    setenv("RAIRL_LOG", "off", 1);
    EXPECT_EQ(code, cli::exit_config);
    EXPECT_NE(err.find("no-such-world.json"), std::string::npos) << err;
}

TEST_F(CliTest, SetOverridesApplyInOrder) {
    const auto c = write_config();
    ASSERT_EQ(cli({"train", "--config", c.string(), "--out", path("out"), "--set", "training.iterations=5",
                   "--set", "training.eval_every=5", "--set", "training.iterations=10"}),
              cli::exit_ok);
    const auto csv = read(root_ / "out" / "run.csv");
    EXPECT_EQ(validate_csv(csv, schema::run(default_world().context_count())), 3u);
    const auto echo = read_json_file(root_ / "out" / "config-echo.json", "echo");
    EXPECT_EQ(echo["training"]["iterations"], 10);
}

TEST_F(CliTest, SetRejectsUnknownPath) {
    const auto c = write_config();
    EXPECT_EQ(cli({"train", "--config", c.string(), "--out", path("out"), "--set", "training.nope=1"}),
              cli::exit_config);
}

TEST_F(CliTest, IdenticalRunsWriteIdenticalBytes) {
    const auto c = write_config();
    ASSERT_EQ(cli({"train", "--config", c.string(), "--out", path("a")}), cli::exit_ok);
    ASSERT_EQ(cli({"train", "--config", c.string(), "--out", path("b")}), cli::exit_ok);
    EXPECT_EQ(read(root_ / "a" / "run.csv"), read(root_ / "b" / "run.csv"));
    EXPECT_EQ(read(root_ / "a" / "final.ckpt"), read(root_ / "b" / "final.ckpt"));
}

TEST_F(CliTest, SeedFlagChangesTheRun) {
    const auto c = write_config();
    ASSERT_EQ(cli({"train", "--config", c.string(), "--out", path("a")}), cli::exit_ok);
    ASSERT_EQ(cli({"train", "--config", c.string(), "--seed", "4", "--out", path("b")}), cli::exit_ok);
    EXPECT_NE(read(root_ / "a" / "final.ckpt"), read(root_ / "b" / "final.ckpt"));
}

TEST_F(CliTest, ZeroIterationsGivesInitialPointOnly) {
    const auto c = write_config();
    ASSERT_EQ(cli({"train", "--config", c.string(), "--out", path("out"), "--set", "training.iterations=0"}),
              cli::exit_ok);
    EXPECT_EQ(validate_csv(read(root_ / "out" / "run.csv"), schema::run(default_world().context_count())), 1u);
    EXPECT_TRUE(fs::exists(root_ / "out" / "final.ckpt"));
}

TEST_F(CliTest, OneRowAblationMatchesTrainThenEval) {
    const auto c = write_config();
    write_json_file(root_ / "matrix-in.json", {{"version", 1}, {"rows", {{{"name", "rAIRL"}, {"loss", "rairl"}}}}});
    ASSERT_EQ(cli({"ablate", "--config", c.string(), "--matrix", path("matrix-in.json"), "--out", path("abl")}),
              cli::exit_ok);
    ASSERT_EQ(cli({"train", "--config", c.string(), "--out", path("single")}), cli::exit_ok);
    ASSERT_EQ(cli({"eval", "--checkpoint", path("single/final.ckpt"), "--out", path("single")}), cli::exit_ok);
    std::size_t compared = 0;
    for (const auto& e : fs::directory_iterator(root_ / "single")) {
        const auto name = e.path().filename().string();
        if (name == "config-echo.json") {
            continue;  // records the output directory
        }
        EXPECT_EQ(read(e.path()), read(root_ / "abl" / "rairl" / name)) << name;
        ++compared;
    }
    EXPECT_GE(compared, 6u);
    const auto table = read(root_ / "abl" / "ablation.csv");
    EXPECT_EQ(validate_csv(table, schema::ablation()), 1u);
    EXPECT_NE(table.find(",ok,20,"), std::string::npos) << table;
}

TEST_F(CliTest, DuplicateAblationRowsAreConfigError) {
    const auto c = write_config();
    write_json_file(root_ / "m.json", {{"version", 1},
                                       {"rows", {{{"name", "A b"}, {"loss", "rairl"}}, {{"name", "a-B"}, {"loss", "mle"}}}}});
    EXPECT_EQ(cli({"ablate", "--config", c.string(), "--matrix", path("m.json"), "--out", path("abl")}),
              cli::exit_config);
    EXPECT_FALSE(fs::exists(root_ / "abl" / "a-b"));
}

TEST_F(CliTest, EvalWhichLimitsReports) {
    const auto c = write_config();
    ASSERT_EQ(cli({"train", "--config", c.string(), "--out", path("t")}), cli::exit_ok);
    ASSERT_EQ(cli({"eval", "--checkpoint", path("t/final.ckpt"), "--which", "kl", "--out", path("e")}),
              cli::exit_ok);
    EXPECT_TRUE(fs::exists(root_ / "e" / "kl.csv"));
    EXPECT_FALSE(fs::exists(root_ / "e" / "diversity.csv"));
    EXPECT_EQ(cli({"eval", "--checkpoint", path("t/final.ckpt"), "--which", "bleu", "--out", path("e")}),
              cli::exit_config);
}

TEST_F(CliTest, CorruptCheckpointIsRejected) {
    const auto c = write_config();
    ASSERT_EQ(cli({"train", "--config", c.string(), "--out", path("t")}), cli::exit_ok);
    auto bytes = read(root_ / "t" / "final.ckpt");
    bytes.resize(bytes.size() - 8);
    write_text_file(root_ / "t" / "short.ckpt", bytes);
    EXPECT_EQ(cli({"eval", "--checkpoint", path("t/short.ckpt"), "--out", path("e")}), cli::exit_config);
    bytes = read(root_ / "t" / "final.ckpt");
    bytes[8] = 9;  // version field
    write_text_file(root_ / "t" / "future.ckpt", bytes);
    EXPECT_EQ(cli({"eval", "--checkpoint", path("t/future.ckpt"), "--out", path("e")}), cli::exit_version);
}

class DiagnoseTest : public CliTest {
protected:
    void SetUp() override {
        CliTest::SetUp();
        const auto c = write_config();
        ASSERT_EQ(cli({"train", "--config", c.string(), "--out", path("t")}), cli::exit_ok);
    }
    int diagnose(const std::string& input) {
        write_text_file(root_ / "input.txt", input);
        return cli({"diagnose", "--checkpoint", path("t/final.ckpt"), "--input", path("input.txt"), "--out",
                    path("d")});
    }
};

TEST_F(DiagnoseTest, EmptyInputWritesHeaderOnly) {
    ASSERT_EQ(diagnose("# nothing here\n\n"), cli::exit_ok);
    EXPECT_EQ(validate_csv(read(root_ / "d" / "diagnosis.csv"), schema::diagnosis()), 0u);
    const auto j = read_json_file(root_ / "d" / "diagnosis.json", "summary");
    EXPECT_EQ(j["sequences"], 0);
    EXPECT_EQ(j["flagged"], 0);
}

TEST_F(DiagnoseTest, EosOnlySequenceIsNeverFlagged) {
    ASSERT_EQ(diagnose("park\n"), cli::exit_ok);
    const auto csv = read(root_ / "d" / "diagnosis.csv");
    ASSERT_EQ(validate_csv(csv, schema::diagnosis()), 1u);
    EXPECT_EQ(read_json_file(root_ / "d" / "diagnosis.json", "summary")["flagged"], 0);
}

TEST_F(DiagnoseTest, UnknownTokenIsConfigError) {
    EXPECT_EQ(diagnose("park the dog zebra\n"), cli::exit_config);
    EXPECT_EQ(diagnose("moon the dog runs\n"), cli::exit_config);
}

TEST_F(DiagnoseTest, LinesKeepTheirNumbers) {
    ASSERT_EQ(diagnose("# header\npark the dog runs home\n\nstreet the bus\n"), cli::exit_ok);
    const auto csv = read(root_ / "d" / "diagnosis.csv");
    ASSERT_EQ(validate_csv(csv, schema::diagnosis()), 2u);
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    std::getline(in, line);
    EXPECT_EQ(line.substr(0, 2), "2,");
    std::getline(in, line);
    EXPECT_EQ(line.substr(0, 2), "4,");
}

TEST_F(CliTest, DynamicsZeroStepsHasInitialPointOnly) {
    ASSERT_EQ(cli({"dynamics", "--steps", "0", "--out", path("dyn")}), cli::exit_ok);
    for (const char* v : {"vanilla", "refined"}) {
        const auto csv = read(root_ / "dyn" / (std::string("dynamics_") + v + ".csv"));
        EXPECT_EQ(validate_csv(csv, schema::dynamics(4)), 1u) << v;
    }
}

TEST_F(CliTest, RefinedGameStaysAtEquilibrium) {
    ASSERT_EQ(cli({"dynamics", "--steps", "50", "--p", "0.5,0.3,0.2", "--set", "dynamics.init=equilibrium", "--out",
                   path("dyn")}),
              cli::exit_ok);
    const auto j = read_json_file(root_ / "dyn" / "dynamics.json", "summary");
    const auto& refined = j["variants"]["refined"];
    EXPECT_LT(refined["final_window_d_std"].get<double>(), 1e-12);
    const auto pi = refined["final_pi"].get<std::vector<double>>();
    const std::vector<double> p{0.5, 0.3, 0.2};
    ASSERT_EQ(pi.size(), 3u);
    for (std::size_t k = 0; k < 3; ++k) {
        EXPECT_NEAR(pi[k], p[k], 1e-12);
    }
    // Vanilla's fixed point sits one unit above log pi, so it drifts away.
    EXPECT_GT(j["variants"]["vanilla"]["final_window_abs_dev"].get<double>(), 1e-3);
}

TEST_F(CliTest, DynamicsRejectsBadDistribution) {
    EXPECT_EQ(cli({"dynamics", "--p", "0.5,0.6", "--out", path("dyn")}), cli::exit_config);
}

}  // namespace
