// End-to-end tests of the command-line tool as a subprocess: exit codes for
// usage/config/data failures, the generate -> train -> eval -> oracle chain on
// a minimal configuration, the analytic-cost command, and the ablation grids
// plus report tabulation.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "captok/config.hpp"
#include "captok/corpus.hpp"
#include "captok/evaluation.hpp"

using namespace captok;
namespace fs = std::filesystem;

namespace {

struct CmdResult {
    int code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> split_lines(const std::string& text) {
    std::vector<std::string> lines;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    return lines;
}

class CliTest : public ::testing::Test {
  protected:
    void SetUp() override {
        const char* bin = std::getenv("CAPTOK_BIN");
        if (bin == nullptr) GTEST_SKIP() << "CAPTOK_BIN not set; run under ctest";
        bin_ = bin;
        if (const char* c = std::getenv("CAPTOK_CONFIGS")) configs_ = c;
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        work_ = fs::path(::testing::TempDir()) / (std::string("cli_") + info->name());
        fs::remove_all(work_);
        fs::create_directories(work_);
    }

    CmdResult run(const std::vector<std::string>& args) {
        const std::string out_file = p("_stdout.txt");
        const std::string err_file = p("_stderr.txt");
        std::ostringstream cmd;
        cmd << "'" << bin_ << "'";
        for (const auto& a : args) cmd << " '" << a << "'";
        cmd << " >'" << out_file << "' 2>'" << err_file << "'";
        const int status = std::system(cmd.str().c_str());
        CmdResult r;
        r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
        r.out = slurp(out_file);
        r.err = slurp(err_file);
        return r;
    }

    std::string p(const std::string& leaf) const { return (work_ / leaf).string(); }

    // Same shape as the shipped minimal config, with the knobs the tests vary.
    std::string write_config(const std::string& leaf, int checkpoint_every = 0,
                             int tap_layer = 1) {
        const std::string path = p(leaf);
        std::ofstream out(path);
        out << "seed = 1\n"
               "[model]\nscene_grid = 8\nimage_grid = 2\nvideo_grid = 2\n"
               "embed_dim = 12\nencoder_layers = 1\nencoder_heads = 2\n"
               "[base_pruner]\nstride = 2\n"
               "[cap_pruner]\nlayers = 2\nembed_dim = 12\nheads = 2\nmax_tokens = 8\n"
            << "tap_layer = " << tap_layer
            << "\nprefix_stride = 2\ncontext = 32\n"
               "[llm]\nlayers = 2\nembed_dim = 12\nheads = 2\ncontext = 128\n"
               "[lora]\nrank = 2\nalpha = 8.0\n"
               "[data]\nnum_clips = 12\nrichness_min = 1\nrichness_max = 8\n"
               "[stage1]\nsteps = 4\nbatch = 2\nlr = 1e-3\n"
               "[stage2a]\nsteps = 4\nbatch = 2\nlr = 1e-3\n"
               "[stage2b]\nsteps = 2\nbatch = 2\nlr = 1e-3\n"
               "[stage3]\nsteps = 6\nbatch = 2\nlr = 1e-3\n"
               "[train]\ngrad_clip = 1.0\ncheckpoint_every = " << checkpoint_every
            << "\nholdout_every = 10\n"
               "[eval]\nmax_answer_tokens = 4\n";
        return path;
    }

    std::string gen_corpus(const std::string& leaf, int clips = 12, int seed = 1) {
        const std::string dir = p(leaf);
        CmdResult r = run({"gen-data", "--seed", std::to_string(seed), "--num-clips",
                           std::to_string(clips), "--richness-min", "1", "--richness-max", "8",
                           "--grid", "8", "--out", dir});
        EXPECT_EQ(r.code, 0) << r.err;
        return dir;
    }

    std::string bin_, configs_;
    fs::path work_;
};

TEST_F(CliTest, UsageErrorsExitTwo) {
    EXPECT_EQ(run({}).code, 2);                                    // subcommand required
    EXPECT_EQ(run({"gen-data", "--bogus-flag", "1", "--out", p("x")}).code, 2);
    EXPECT_EQ(run({"gen-data"}).code, 2);                          // --out required
    EXPECT_EQ(run({"no-such-command"}).code, 2);
    EXPECT_EQ(run({"--help"}).code, 0);
}

TEST_F(CliTest, GenDataWritesLoadableDeterministicCorpus) {
    const CmdResult r = run({"gen-data", "--seed", "5", "--num-clips", "6", "--richness-min",
                             "1", "--richness-max", "6", "--grid", "8", "--out", p("corpus")});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("wrote 6 clips"), std::string::npos) << r.out;

    const Corpus corpus = read_corpus(p("corpus"));
    EXPECT_EQ(corpus.clips.size(), 6u);
    EXPECT_FALSE(corpus.captions.empty());
    EXPECT_GE(corpus.qa.size(), 4u * corpus.clips.size());
    EXPECT_TRUE(fs::exists(p("corpus/summary.md")));
    const std::string meta = slurp(p("corpus/run.json"));
    EXPECT_NE(meta.find("\"command\": \"gen-data\""), std::string::npos) << meta;

    ASSERT_EQ(run({"gen-data", "--seed", "5", "--num-clips", "6", "--richness-min", "1",
                   "--richness-max", "6", "--grid", "8", "--out", p("corpus_again")})
                  .code,
              0);
    EXPECT_EQ(slurp(p("corpus/clips.jsonl")), slurp(p("corpus_again/clips.jsonl")));
    ASSERT_EQ(run({"gen-data", "--seed", "6", "--num-clips", "6", "--richness-min", "1",
                   "--richness-max", "6", "--grid", "8", "--out", p("corpus_seed6")})
                  .code,
              0);
    EXPECT_NE(slurp(p("corpus/clips.jsonl")), slurp(p("corpus_seed6/clips.jsonl")));
}

TEST_F(CliTest, BadGenerationAndConfigInputsExitTwo) {
    EXPECT_EQ(run({"gen-data", "--richness-min", "5", "--richness-max", "2", "--out", p("c")})
                  .code,
              2);

    const std::string bad_cfg = p("bad.toml");
    std::ofstream(bad_cfg) << "bogus_key = 1\n";
    EXPECT_EQ(run({"train", "--stage", "1", "--config", bad_cfg, "--data", p("nodir"),
                   "--out", p("run")})
                  .code,
              2);
}

TEST_F(CliTest, DataErrorsExitThree) {
    const std::string cfg = write_config("cfg.toml");
    // missing corpus directory
    EXPECT_EQ(run({"train", "--stage", "1", "--config", cfg, "--data", p("missing"), "--out",
                   p("run")})
                  .code,
              3);

    const std::string corpus = gen_corpus("corpus", 6);
    // stage out of range is a config error even with a valid corpus
    EXPECT_EQ(run({"train", "--stage", "4", "--config", cfg, "--data", corpus, "--out",
                   p("run4")})
                  .code,
              2);
    // corrupt one corpus file
    std::ofstream(corpus + "/qa.jsonl", std::ios::app) << "not json\n";
    EXPECT_EQ(run({"train", "--stage", "1", "--config", cfg, "--data", corpus, "--out",
                   p("run")})
                  .code,
              3);

    const std::string corpus2 = gen_corpus("corpus2", 6);
    // missing checkpoint file
    EXPECT_EQ(run({"eval", "--ckpt", p("nope.bin"), "--config", cfg, "--data", corpus2,
                   "--out", p("ev")})
                  .code,
              3);
    // unknown split name is a config error
    EXPECT_EQ(run({"eval", "--ckpt", p("nope.bin"), "--config", cfg, "--data", corpus2,
                   "--split", "weird", "--out", p("ev")})
                  .code,
              2);
}

TEST_F(CliTest, CheckpointFromDifferentModelShapeExitsThree) {
    const std::string cfg = write_config("cfg.toml");
    const std::string corpus = gen_corpus("corpus", 6);
    ASSERT_EQ(run({"train", "--stage", "1", "--config", cfg, "--data", corpus, "--out",
                   p("s1")})
                  .code,
              0);
    const std::string other_cfg = write_config("other.toml", 0, /*tap_layer=*/2);
    EXPECT_EQ(run({"eval", "--ckpt", p("s1/checkpoint.bin"), "--config", other_cfg, "--data",
                   corpus, "--out", p("ev")})
                  .code,
              3);
}

TEST_F(CliTest, ResumeReproducesStraightRun) {
    const std::string cfg = write_config("cfg.toml", /*checkpoint_every=*/2);
    const std::string corpus = gen_corpus("corpus", 6);

    ASSERT_EQ(run({"train", "--stage", "1", "--config", cfg, "--data", corpus, "--out",
                   p("straight")})
                  .code,
              0);
    ASSERT_TRUE(fs::exists(p("straight/step_000002.bin")));
    ASSERT_TRUE(fs::exists(p("straight/checkpoint.bin")));

    const CmdResult r = run({"train", "--stage", "1", "--config", cfg, "--data", corpus,
                             "--resume", p("straight/step_000002.bin"), "--out", p("resumed")});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(slurp(p("straight/checkpoint.bin")), slurp(p("resumed/checkpoint.bin")));

    // two logged steps after resuming from step 2 of 4
    const auto lines = split_lines(slurp(p("resumed/metrics.csv")));
    ASSERT_EQ(lines.size(), 3u);
    EXPECT_EQ(lines[0], "step,lr,loss");

    // stage 2 is two phases with separate loops; resuming it is rejected
    EXPECT_EQ(run({"train", "--stage", "2", "--config", cfg, "--data", corpus, "--resume",
                   p("straight/step_000002.bin"), "--out", p("r2")})
                  .code,
              2);
}

TEST_F(CliTest, FullPipelineSmoke) {
    if (configs_.empty()) GTEST_SKIP() << "CAPTOK_CONFIGS not set";
    const std::string cfg = (fs::path(configs_) / "smoke.toml").string();
    const std::string corpus = gen_corpus("corpus", 12);

    ASSERT_EQ(run({"train", "--stage", "1", "--config", cfg, "--data", corpus, "--out",
                   p("s1")})
                  .code,
              0);
    for (const char* f : {"checkpoint.bin", "metrics.csv", "config.toml", "run.json",
                          "summary.md"})
        EXPECT_TRUE(fs::exists(p("s1/") + f)) << f;

    ASSERT_EQ(run({"train", "--stage", "2", "--config", cfg, "--data", corpus, "--init",
                   p("s1/checkpoint.bin"), "--out", p("s2")})
                  .code,
              0);
    EXPECT_TRUE(fs::exists(p("s2/checkpoint.bin")));
    EXPECT_TRUE(fs::exists(p("s2/phase_a/metrics.csv")));
    EXPECT_TRUE(fs::exists(p("s2/phase_b/metrics.csv")));

    ASSERT_EQ(run({"train", "--stage", "3", "--config", cfg, "--data", corpus, "--init",
                   p("s2/checkpoint.bin"), "--out", p("s3")})
                  .code,
              0);

    // the stage-3 config snapshot must itself be a loadable config
    const CmdResult ev = run({"eval", "--ckpt", p("s3/checkpoint.bin"), "--config",
                              p("s3/config.toml"), "--data", corpus, "--out", p("eval_full"),
                              "--split", "held"});
    ASSERT_EQ(ev.code, 0) << ev.err;
    EXPECT_NE(ev.out.find("accuracy "), std::string::npos) << ev.out;
    for (const char* f : {"records.jsonl", "summary.csv", "lengths.csv", "lengths.svg",
                          "summary.md", "run.json", "config.toml"})
        EXPECT_TRUE(fs::exists(p("eval_full/") + f)) << f;

    const RunConfig rc = RunConfig::from_file(cfg);
    const auto full = read_eval_records(p("eval_full/records.jsonl"));
    ASSERT_GE(full.size(), 4u);  // one held clip with at least four questions
    for (const auto& r : full)
        EXPECT_EQ(r.base_tokens, static_cast<int>(rc.model.base_tokens_per_clip()));

    ASSERT_EQ(run({"eval", "--ckpt", p("s3/checkpoint.bin"), "--config", cfg, "--data",
                   corpus, "--out", p("eval_nocap"), "--split", "held", "--no-cap"})
                  .code,
              0);
    for (const auto& r : read_eval_records(p("eval_nocap/records.jsonl"))) {
        EXPECT_EQ(r.total_cap(), 0);
        EXPECT_EQ(r.visual_tokens, r.base_tokens);
    }
    ASSERT_EQ(run({"eval", "--ckpt", p("s3/checkpoint.bin"), "--config", cfg, "--data",
                   corpus, "--out", p("eval_nobase"), "--split", "held", "--no-base"})
                  .code,
              0);
    for (const auto& r : read_eval_records(p("eval_nobase/records.jsonl")))
        EXPECT_EQ(r.base_tokens, 0);

    const CmdResult orc = run({"oracle", "--runs", p("eval_full"), p("eval_nocap"),
                               p("eval_nobase"), "--out", p("oracle_out")});
    ASSERT_EQ(orc.code, 0) << orc.err;
    EXPECT_NE(orc.out.find("oracle accuracy"), std::string::npos) << orc.out;
    const auto lines = split_lines(slurp(p("oracle_out/oracle.csv")));
    ASSERT_EQ(lines.size(), 5u);  // header + three configurations + oracle row
    EXPECT_EQ(lines[0], "configuration,accuracy,mean_tokens");
    EXPECT_EQ(lines[1].rfind("eval_full,", 0), 0u);
    EXPECT_EQ(lines[4].rfind("oracle,", 0), 0u);
}

TEST_F(CliTest, OracleInputValidation) {
    EXPECT_EQ(run({"oracle", "--runs", p("only_one"), "--out", p("o")}).code, 2);

    // two runs over different instance sets cannot be joined
    EvalRecord a;
    a.instance_id = "c0:0";
    a.kind = "count";
    a.base_tokens = 4;
    a.visual_tokens = 4;
    EvalRecord b = a;
    b.instance_id = "c0:1";
    fs::create_directories(p("runA"));
    fs::create_directories(p("runB"));
    write_eval_records(p("runA/records.jsonl"), {a});
    write_eval_records(p("runB/records.jsonl"), {b});
    EXPECT_EQ(run({"oracle", "--runs", p("runA"), p("runB"), "--out", p("o")}).code, 3);
}

TEST_F(CliTest, FlopsCommandWritesReport) {
    if (configs_.empty()) GTEST_SKIP() << "CAPTOK_CONFIGS not set";
    const std::string arch = (fs::path(configs_) / "profiles.toml").string();
    const std::string plan = (fs::path(configs_) / "plan.toml").string();

    const CmdResult r = run({"flops", "--arch-file", arch, "--plan", plan, "--out",
                             p("cost/flops.csv")});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("ratio 0.352218"), std::string::npos) << r.out;
    EXPECT_TRUE(fs::exists(p("cost/flops.md")));
    const auto lines = split_lines(slurp(p("cost/flops.csv")));
    ASSERT_FALSE(lines.empty());
    bool saw_ratio = false;
    for (const auto& line : lines) saw_ratio |= line == "ratio,langdc_over_baseline,0.352218";
    EXPECT_TRUE(saw_ratio);

    // a plan that includes encoder cost needs an encoder profile
    const std::string bad_plan = p("bad_plan.toml");
    std::ofstream(bad_plan) << "[plan]\nbaseline_visual = 10\ninclude_encoders = true\n";
    EXPECT_EQ(run({"flops", "--arch-file", arch, "--plan", bad_plan, "--out", p("x.csv")})
                  .code,
              2);
}

TEST_F(CliTest, AblateThenReportTabulatesAllGrids) {
    const std::string cfg = write_config("cfg.toml");
    const std::string corpus = gen_corpus("corpus", 12);

    const CmdResult ab = run({"ablate", "--config", cfg, "--data", corpus, "--out", p("grid")});
    ASSERT_EQ(ab.code, 0) << ab.err;
    for (const char* d : {"combination/both", "combination/base_only", "combination/cap_only",
                          "combination/none", "schemes/full", "schemes/no_cappruner_pretrain",
                          "schemes/no_post_pretrain", "tap/tap_0", "tap/tap_1", "tap/tap_2"})
        EXPECT_TRUE(fs::exists(p("grid/") + d + "/records.jsonl")) << d;

    const CmdResult rep = run({"report", "--grid", p("grid"), "--out", p("rep")});
    ASSERT_EQ(rep.code, 0) << rep.err;
    EXPECT_TRUE(fs::exists(p("rep/report.md")));

    const auto combos = split_lines(slurp(p("rep/combinations.csv")));
    ASSERT_EQ(combos.size(), 5u);
    EXPECT_EQ(combos[0], "name,base_pruner,cap_pruner,accuracy,mean_tokens");
    auto mean_tokens = [&](const std::string& row) {
        return std::stod(row.substr(row.rfind(',') + 1));
    };
    // stream masking controls the token budget: none carries nothing, the
    // pooled stream alone is the fixed per-clip count, captions only add
    EXPECT_EQ(combos[1].rfind("none,0,0,", 0), 0u);
    EXPECT_DOUBLE_EQ(mean_tokens(combos[1]), 0.0);
    EXPECT_EQ(combos[2].rfind("base_only,1,0,", 0), 0u);
    const RunConfig rc = RunConfig::from_file(cfg);
    EXPECT_DOUBLE_EQ(mean_tokens(combos[2]), static_cast<double>(rc.model.base_tokens_per_clip()));
    EXPECT_EQ(combos[3].rfind("cap_only,0,1,", 0), 0u);
    EXPECT_EQ(combos[4].rfind("both,1,1,", 0), 0u);
    EXPECT_GE(mean_tokens(combos[4]), mean_tokens(combos[2]));

    const auto schemes = split_lines(slurp(p("rep/schemes.csv")));
    ASSERT_EQ(schemes.size(), 4u);
    EXPECT_EQ(schemes[0], "scheme,accuracy,mean_tokens");
    EXPECT_EQ(schemes[1].rfind("full,", 0), 0u);
    EXPECT_EQ(schemes[2].rfind("no_cappruner_pretrain,", 0), 0u);
    EXPECT_EQ(schemes[3].rfind("no_post_pretrain,", 0), 0u);

    const auto taps = split_lines(slurp(p("rep/tap.csv")));
    ASSERT_EQ(taps.size(), 4u);  // header + layers 0..2
    EXPECT_EQ(taps[0], "tap_layer,accuracy,mean_tokens");
    // the export layer changes vector content, not caption length
    EXPECT_DOUBLE_EQ(mean_tokens(taps[1]), mean_tokens(taps[2]));
    EXPECT_DOUBLE_EQ(mean_tokens(taps[2]), mean_tokens(taps[3]));
}

}  // namespace
