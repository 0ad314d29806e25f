// SPDX-License-Identifier: Apache-2.0

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path& scratch() {
    static const fs::path dir = [] {
        const fs::path d = fs::temp_directory_path() / "mote_cli_test";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

int mote(const std::string& args) {
    const std::string cmd = std::string("\"") + MOTE_CLI_PATH + "\" " + args + " > \"" +
                            (scratch() / "last.log").string() + "\" 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path write_file(const std::string& name, const std::string& text) {
    const fs::path p = scratch() / name;
    std::ofstream(p) << text;
    return p;
}

const char* kTiny =
    "data.raw_dim = 8\ndata.dim = 12\ndata.frames = 4\ndata.seen_classes = 6\ndata.twin_pairs = 1\n"
    "data.unseen_classes = 5\ndata.train_per_class = 6\ndata.eval_per_class = 4\n"
    "model.hidden = 8\nmodel.layers = 1\nmodel.experts = 3\nmodel.heads = 2\n"
    "train.epochs = 1\ntrain.batch_size = 8\ntfm.k = 3\n";

nlohmann::json read_json(const fs::path& p) {
    std::ifstream in(p);
    return nlohmann::json::parse(in);
}

}  // namespace

TEST_CASE("configuration errors exit with status 2") {
    const auto bad_key = write_file("bad_key.conf", "model.experts = 4\nmodel.expertz = 4\n");
    CHECK(mote("train --quiet --config \"" + bad_key.string() + "\" --out \"" + (scratch() / "x").string() + "\"") == 2);
    const auto bad_value = write_file("bad_value.conf", "model.experts = many\n");
    CHECK(mote("train --quiet --config \"" + bad_value.string() + "\"") == 2);
    CHECK(mote("train --quiet --set loss.lambda=-1") == 2);
    CHECK(mote("train --quiet --tfm maybe") == 2);
    CHECK(mote("train --quiet --split sideways") == 2);
    CHECK(mote("eval --checkpoint") == 2);
    CHECK(mote("frobnicate") == 2);
    const auto grid = write_file("bad.grid", "model.nonsense = 1, 2\n");
    CHECK(mote("ablate --grid \"" + grid.string() + "\" --out \"" + (scratch() / "ab").string() + "\"") == 2);
    CHECK(mote("train --quiet --config /nonexistent/path.conf") == 2);
}

TEST_CASE("divergence exits with status 3") {
    const auto conf = write_file("diverge.conf", std::string(kTiny) + "optim.lr = 1e6\ntrain.epochs = 20\n");
    const fs::path out = scratch() / "diverge";
    CHECK(mote("train --quiet --config \"" + conf.string() + "\" --out \"" + out.string() + "\"") == 3);
    CHECK(fs::exists(out / "divergence.json"));
}

TEST_CASE("train, eval and report round trip") {
    const auto conf = write_file("tiny.conf", kTiny);
    const fs::path out = scratch() / "run";
    REQUIRE(mote("train --quiet --config \"" + conf.string() + "\" --seed-data 2 --out \"" + out.string() + "\"") == 0);
    for (const char* f : {"checkpoint.json", "deployed.json", "report.json", "run_meta.json"})
        CHECK(fs::exists(out / f));
    const auto report = read_json(out / "report.json");
    CHECK(report["seeds"]["data"] == 2);
    CHECK(mote("report \"" + (out / "report.json").string() + "\"") == 0);

    const std::string ckpt = "\"" + (out / "checkpoint.json").string() + "\"";
    const std::string deployed = "\"" + (out / "deployed.json").string() + "\"";
    const fs::path ev = scratch() / "eval";
    for (const char* split : {"close", "zeroshot", "mixed"}) {
        CHECK(mote(std::string("eval --checkpoint ") + ckpt + " --split " + split + " --out \"" + ev.string() + "\"") == 0);
        CHECK(mote(std::string("eval --checkpoint ") + deployed + " --split " + split + " --out \"" + ev.string() + "\"") == 0);
    }
    CHECK(mote("eval --checkpoint " + ckpt + " --aggregation ensemble --tfm on --out \"" + ev.string() + "\"") == 0);
    CHECK(mote("eval --checkpoint " + deployed + " --aggregation ensemble --out \"" + ev.string() + "\"") == 2);

    SUBCASE("expert-wise evaluation needs the pre-merge checkpoint") {
        CHECK(mote("eval --checkpoint " + ckpt + " --experts --out \"" + ev.string() + "\"") == 0);
        CHECK(read_json(ev / "eval.json")["experts"].size() == 4);
        CHECK(mote("eval --checkpoint " + deployed + " --experts --out \"" + ev.string() + "\"") == 1);
    }
    SUBCASE("eval takes its configuration from the checkpoint") {
        CHECK(mote("eval --checkpoint " + ckpt + " --set model.experts=2") == 2);
    }
    SUBCASE("few-shot training") {
        CHECK(mote("train --quiet --config \"" + conf.string() + "\" --split fewshot:2 --out \"" +
                   (scratch() / "fs").string() + "\"") == 0);
    }
}

TEST_CASE("gen-data and ablate") {
    const auto conf = write_file("tiny_gen.conf", kTiny);
    const fs::path gen = scratch() / "gen";
    CHECK(mote("gen-data --config \"" + conf.string() + "\" --out \"" + gen.string() + "\"") == 0);
    CHECK(fs::exists(gen / "banks.json"));
    CHECK(fs::exists(gen / "data_spec.json"));

    const auto grid = write_file("ok.grid", "model.experts = 1, 2\n");
    const fs::path ab = scratch() / "ablate";
    CHECK(mote("ablate --config \"" + conf.string() + "\" --grid \"" + grid.string() + "\" --out \"" + ab.string() +
               "\"") == 0);
    CHECK(read_json(ab / "ablation.json")["runs"].size() == 2);
    CHECK(mote("report \"" + (ab / "ablation.json").string() + "\"") == 0);
}
