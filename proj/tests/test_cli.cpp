#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

// Drives the tmcir binary end to end. TMCIR_BIN and TMCIR_CONFIG_DIR come
// from the build.

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct Run {
    int code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

class Workspace {
public:
    explicit Workspace(const std::string& name) : dir_(fs::temp_directory_path() / ("tmcir_cli_" + name)) {
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    ~Workspace() { fs::remove_all(dir_); }

    fs::path operator/(const std::string& rel) const { return dir_ / rel; }

    Run tmcir(const std::string& args) const { return shell(std::string("\"") + TMCIR_BIN + "\" " + args); }

    Run shell(const std::string& cmd) const {
        const fs::path out = dir_ / "stdout.txt";
        const fs::path err = dir_ / "stderr.txt";
        const std::string full = "cd \"" + dir_.string() + "\" && " + cmd + " >\"" + out.string() + "\" 2>\"" +
                                 err.string() + "\"";
        const int status = std::system(full.c_str());
        Run r;
        r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
        r.out = slurp(out);
        r.err = slurp(err);
        return r;
    }

    fs::path write_config(const std::string& name, const json& j) const {
        const fs::path p = dir_ / name;
        std::ofstream(p) << j.dump(2);
        return p;
    }

private:
    fs::path dir_;
};

json tiny() {
    return json::parse(slurp(fs::path(TMCIR_CONFIG_DIR) / "tiny.json"));
}

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    for (std::string line; std::getline(ss, line);) {
        out.push_back(line);
    }
    return out;
}

} // namespace

TEST_CASE("gen-data writes the four files deterministically") {
    Workspace ws("gen");
    ws.write_config("tiny.json", tiny());
    Run r = ws.tmcir("gen-data --config tiny.json --out a");
    REQUIRE(r.code == 0);
    CHECK(r.out.find("train: 192 triplets") != std::string::npos);
    REQUIRE(ws.tmcir("gen-data --config tiny.json --out b").code == 0);
    for (const char* f : {"train.jsonl", "val.jsonl", "test.jsonl", "candidates.jsonl"}) {
        CAPTURE(f);
        REQUIRE(fs::exists(ws / ("a/" + std::string(f))));
        CHECK(slurp(ws / ("a/" + std::string(f))) == slurp(ws / ("b/" + std::string(f))));
    }
    const std::string header = lines_of(slurp(ws / "a/train.jsonl")).front();
    CHECK(header.rfind("{\"format\":\"tmcir-world/1\",\"seed\":3,\"config\":{", 0) == 0);
}

TEST_CASE("configuration errors exit with 2") {
    Workspace ws("config");
    json bad = tiny();
    bad["world"]["height"] = 0;
    ws.write_config("zero.json", bad);
    Run r = ws.tmcir("gen-data --config zero.json --out d");
    CHECK(r.code == 2);
    CHECK(r.err.find("config") != std::string::npos);

    json typo = tiny();
    typo["fuse"]["epoch"] = 3;
    ws.write_config("typo.json", typo);
    r = ws.tmcir("gen-data --config typo.json --out d");
    CHECK(r.code == 2);
    CHECK(r.err.find("epoch") != std::string::npos);

    CHECK(ws.tmcir("gen-data --config missing.json --out d").code == 2);
    CHECK(ws.tmcir("gen-data --out d").code == 2);
    CHECK(ws.tmcir("no-such-command").code == 2);
    CHECK(ws.tmcir("--help").code == 0);

    ws.write_config("tiny.json", tiny());
    CHECK(ws.tmcir("ablate --kind bogus --config tiny.json --out o").code == 2);
}

TEST_CASE("train, evaluate and inspect through the binary") {
    Workspace ws("pipeline");
    ws.write_config("tiny.json", tiny());
    REQUIRE(ws.tmcir("gen-data --config tiny.json --out data").code == 0);

    Run r = ws.tmcir("train-align --config tiny.json --data data --out s1");
    REQUIRE(r.code == 0);
    CHECK(r.out.find("final loss: ") != std::string::npos);
    const auto log = lines_of(slurp(ws / "s1/train_log.jsonl"));
    REQUIRE(log.size() == 36);
    const json first = json::parse(log.front());
    std::vector<std::string> keys;
    for (auto it = first.begin(); it != first.end(); ++it) {
        keys.push_back(it.key());
    }
    CHECK(keys == std::vector<std::string>{"step", "stage", "loss", "lr", "temp"});
    CHECK(json::parse(slurp(ws / "s1/config.json")) == tiny());

    CHECK(ws.tmcir("train-align --config tiny.json --data data --out s1r --supervision real").code == 0);
    CHECK(json::parse(slurp(ws / "s1r/config.json"))["align"]["supervision"] == "real");
    CHECK(ws.tmcir("train-align --config tiny.json --data data --out x --supervision noisy").code == 2);

    CHECK(ws.tmcir("train-fuse --config tiny.json --data data --out s2").code == 2);
    CHECK(ws.tmcir("train-fuse --config tiny.json --data data --out s2 --from-scratch --init s1/checkpoint.tmc")
              .code == 2);
    REQUIRE(ws.tmcir("train-fuse --config tiny.json --data data --out s2 --init s1/checkpoint.tmc").code == 0);
    CHECK(ws.tmcir("train-fuse --config tiny.json --data data --out scratch --from-scratch").code == 0);
    CHECK(ws.tmcir("train-fuse --config tiny.json --data data --out plain --from-scratch --no-fusion").code == 0);
    CHECK(json::parse(slurp(ws / "plain/config.json"))["fuse"]["use_fusion"] == false);

    REQUIRE(ws.tmcir("eval --ckpt s2/checkpoint.tmc --data data --out e1.json").code == 0);
    REQUIRE(ws.tmcir("eval --ckpt s2/checkpoint.tmc --data data --out e2.json").code == 0);
    CHECK(slurp(ws / "e1.json") == slurp(ws / "e2.json"));
    const json report = json::parse(slurp(ws / "e1.json"));
    CHECK(report["seed"] == 3);
    CHECK(report["config"] == tiny());
    CHECK(report["recall"].size() == 4);
    CHECK_FALSE(report.contains("wall_ms"));

    REQUIRE(ws.tmcir("eval --ckpt s2/checkpoint.tmc --data data --out k.json --ks 1,5 --timing").code == 0);
    const json k = json::parse(slurp(ws / "k.json"));
    std::vector<std::string> rk;
    for (auto it = k["recall"].begin(); it != k["recall"].end(); ++it) {
        rk.push_back(it.key());
    }
    CHECK(rk == std::vector<std::string>{"1", "5"});
    CHECK(k["subset_recall"].size() == 1);
    CHECK(k.contains("wall_ms"));
    CHECK(ws.tmcir("eval --ckpt s2/checkpoint.tmc --data data --out k.json --ks 1,x").code == 2);
    CHECK(ws.tmcir("eval --ckpt s2/checkpoint.tmc --data data --out v.json --split val").code == 0);

    r = ws.tmcir("eval --ckpt nope.tmc --data data --out e.json");
    CHECK(r.code == 1);
    r = ws.tmcir("eval --ckpt s1/checkpoint.tmc --data data --out e.json");
    CHECK(r.code == 1);
    CHECK(r.err.find("fuse.projection.weight") != std::string::npos);

    r = ws.tmcir("inspect --ckpt s2/checkpoint.tmc");
    CHECK(r.code == 0);
    CHECK(r.out.rfind("valid checkpoint, crc32 ", 0) == 0);
    CHECK(r.out.find("step 36") != std::string::npos);
    std::string bytes = slurp(ws / "s2/checkpoint.tmc");
    bytes[bytes.size() / 2] = static_cast<char>(bytes[bytes.size() / 2] ^ 1);
    std::ofstream(ws / "bad.tmc", std::ios::binary) << bytes;
    r = ws.tmcir("inspect --ckpt bad.tmc");
    CHECK(r.code == 1);
    CHECK(r.err.find("checksum") != std::string::npos);

    json other = tiny();
    other["data_seed"] = 4;
    ws.write_config("other.json", other);
    CHECK(ws.tmcir("train-align --config other.json --data data --out s9").code == 2);
}

TEST_CASE("training twice gives identical checkpoints") {
    Workspace ws("determinism");
    ws.write_config("tiny.json", tiny());
    REQUIRE(ws.tmcir("gen-data --config tiny.json --out data").code == 0);
    REQUIRE(ws.tmcir("train-align --config tiny.json --data data --out a").code == 0);
    REQUIRE(ws.tmcir("train-align --config tiny.json --data data --out b").code == 0);
    CHECK(slurp(ws / "a/checkpoint.tmc") == slurp(ws / "b/checkpoint.tmc"));
    CHECK(slurp(ws / "a/train_log.jsonl") == slurp(ws / "b/train_log.jsonl"));
}

TEST_CASE("a killed run leaves its last periodic checkpoint valid") {
    Workspace ws("kill");
    json cfg = json::parse(slurp(fs::path(TMCIR_CONFIG_DIR) / "default.json"));
    cfg["align"]["epochs"] = 400;
    cfg["align"]["checkpoint_every"] = 5;
    ws.write_config("long.json", cfg);
    REQUIRE(ws.tmcir("gen-data --config long.json --out data").code == 0);
    const Run killed =
        ws.shell(std::string("timeout -s KILL 3 \"") + TMCIR_BIN + "\" train-align --config long.json --data data --out run");
    CHECK(killed.code != 0);
    REQUIRE(fs::exists(ws / "run/checkpoint.tmc"));
    const Run r = ws.tmcir("inspect --ckpt run/checkpoint.tmc");
    CHECK(r.code == 0);
    CHECK(r.out.rfind("valid checkpoint", 0) == 0);
    for (const auto& e : fs::directory_iterator(ws / "run")) {
        CHECK(e.path().filename().string().find(".tmp") == std::string::npos);
    }
}

TEST_CASE("ablate writes per-variant reports and a CSV") {
    Workspace ws("ablate");
    json cfg = tiny();
    cfg["align"]["epochs"] = 1;
    cfg["fuse"]["epochs"] = 1;
    ws.write_config("tiny.json", cfg);

    Run r = ws.tmcir("ablate --kind threshold_sweep --config tiny.json --out sweep");
    REQUIRE(r.code == 0);
    const auto rows = lines_of(slurp(ws / "sweep/threshold_sweep.csv"));
    REQUIRE(rows.size() == 6);
    CHECK(rows[0] == "variant,tau,R@1,R@5,R@10,R@50,Rs@1,Rs@2,Rs@3");
    const char* names[] = {"tau=0.5", "tau=0.6", "tau=0.7", "tau=0.8", "tau=0.9"};
    for (std::size_t i = 1; i < rows.size(); ++i) {
        CHECK(rows[i].rfind(std::string(names[i - 1]) + ",0." + std::to_string(4 + i), 0) == 0);
        CHECK(std::count(rows[i].begin(), rows[i].end(), ',') == 8);
        CHECK(fs::exists(ws / ("sweep/" + std::string(names[i - 1]) + ".json")));
    }
    CHECK(json::parse(slurp(ws / "sweep/config.json")) == cfg);

    REQUIRE(ws.tmcir("gen-data --config tiny.json --out data").code == 0);
    r = ws.tmcir("ablate --kind no_fusion --config tiny.json --out nf --data data");
    REQUIRE(r.code == 0);
    const auto nf = lines_of(slurp(ws / "nf/no_fusion.csv"));
    REQUIRE(nf.size() == 3);
    CHECK(nf[1].rfind("full,", 0) == 0);
    CHECK(nf[2].rfind("no_fusion,", 0) == 0);
}
