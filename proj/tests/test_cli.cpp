#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace {

namespace fs = std::filesystem;

const fs::path kWorkDir = fs::temp_directory_path() / "elastic_cli_test";

int run(const std::string& args, const std::string& capture_to = "") {
    std::string cmd = std::string(CLI_BIN) + " " + args;
    if (!capture_to.empty()) {
        cmd += " > " + capture_to + " 2>&1";
    } else {
        cmd += " > /dev/null 2>&1";
    }
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

struct WorkDir {
    WorkDir() {
        fs::remove_all(kWorkDir);
        fs::create_directories(kWorkDir);
    }
};

const std::string kTrainFlags =
    " --set d=8 --set max_len=8 --set layers=1 --set k=2 --set bank_size=16"
    " --set stride=2 --set max_epochs=2 --set batch_size=16";

}  // namespace

TEST_CASE("cli end to end") {
    WorkDir wd;
    const std::string ds = (kWorkDir / "ds.dscache").string();
    const std::string run_dir = (kWorkDir / "run").string();

    SUBCASE("help exits cleanly") {
        CHECK(run("--help") == 0);
    }

    SUBCASE("synth, train, eval, expert-stats pipeline") {
        REQUIRE(run("synth --out " + ds +
                    " --kind successor --users 60 --items 25 --seq-len 10 --seed 7") == 0);
        CHECK(fs::exists(ds));

        REQUIRE(run("train --data " + ds + " --out " + run_dir + kTrainFlags + " --seed 5") == 0);
        CHECK(fs::exists(fs::path(run_dir) / "checkpoint.ckpt"));
        CHECK(fs::exists(fs::path(run_dir) / "epochs.csv"));
        const std::string manifest = slurp(fs::path(run_dir) / "run_manifest.txt");
        CHECK(manifest.find("seed=5") != std::string::npos);
        CHECK(manifest.find("d=8") != std::string::npos);

        const std::string eval_out = (kWorkDir / "eval.txt").string();
        REQUIRE(run("eval --checkpoint " + run_dir + "/checkpoint.ckpt --data " + ds,
                    eval_out) == 0);
        const std::string eval_text = slurp(eval_out);
        CHECK(eval_text.find("NDCG") != std::string::npos);
        CHECK(eval_text.find("@10") != std::string::npos);

        const std::string stats_out = (kWorkDir / "stats.txt").string();
        REQUIRE(run("expert-stats --checkpoint " + run_dir + "/checkpoint.ckpt --data " + ds,
                    stats_out) == 0);
        const std::string stats_text = slurp(stats_out);
        CHECK(stats_text.find("expert_id") != std::string::npos);
        CHECK(stats_text.find("key_usage_rate") != std::string::npos);
        // 60 users, k=2 experts each: the accounting identity.
        CHECK(stats_text.find("total_load\t120") != std::string::npos);
    }

    SUBCASE("expert-stats rejects a dispatcher-less checkpoint") {
        REQUIRE(run("synth --out " + ds +
                    " --kind successor --users 50 --items 20 --seq-len 10 --seed 3") == 0);
        REQUIRE(run("train --data " + ds + " --out " + run_dir + kTrainFlags +
                    " --set use_dispatcher=false") == 0);
        CHECK(run("expert-stats --checkpoint " + run_dir + "/checkpoint.ckpt --data " + ds) == 2);
    }

    SUBCASE("error exit codes") {
        CHECK(run("train --out " + run_dir) != 0);  // missing required --data
        CHECK(run("train --data /nonexistent.csv --out " + run_dir) == 4);
        REQUIRE(run("synth --out " + ds +
                    " --kind successor --users 50 --items 20 --seq-len 10 --seed 3") == 0);
        CHECK(run("train --data " + ds + " --out " + run_dir + kTrainFlags +
                  " --set d=7") == 2);
        CHECK(run("train --data " + ds + " --out " + run_dir + kTrainFlags +
                  " --set bogus_key=1") == 2);
        CHECK(run("eval --checkpoint /nonexistent.ckpt --data " + ds) == 4);
    }

    SUBCASE("vocabulary mismatch is a data error") {
        REQUIRE(run("synth --out " + ds +
                    " --kind successor --users 60 --items 25 --seq-len 10 --seed 7") == 0);
        REQUIRE(run("train --data " + ds + " --out " + run_dir + kTrainFlags) == 0);
        const std::string other = (kWorkDir / "other.dscache").string();
        REQUIRE(run("synth --out " + other +
                    " --kind successor --users 60 --items 30 --seq-len 10 --seed 7") == 0);
        CHECK(run("eval --checkpoint " + run_dir + "/checkpoint.ckpt --data " + other) == 3);
    }

    SUBCASE("retrieve demo agrees with the oracle") {
        const std::string out = (kWorkDir / "retrieve.txt").string();
        REQUIRE(run("retrieve --queries 50 --seed 11", out) == 0);
        CHECK(slurp(out).find("50/50") != std::string::npos);
    }

    SUBCASE("bench writes table and csv") {
        const std::string bench_dir = (kWorkDir / "bench").string();
        REQUIRE(run("bench --lengths 32,64,128 --repeats 5 --d 16 --k 8 --layers 1 --out " +
                    bench_dir) == 0);
        CHECK(fs::exists(fs::path(bench_dir) / "bench.txt"));
        const std::string csv = slurp(fs::path(bench_dir) / "bench.csv");
        CHECK(csv.rfind("backbone,", 0) == 0);
        CHECK(run("bench --lengths 128,64 --repeats 5") == 2);  // not ascending
    }
}
