#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

std::string cli() {
    const char* path = std::getenv("MISM_CLI");
    REQUIRE(path != nullptr);
    return path;
}

int run(const std::string& args, const std::string& redirect = "") {
    std::string cmd = cli() + " " + args;
    if (!redirect.empty()) {
        cmd += " > " + redirect + " 2> " + redirect + ".err";
    } else {
        cmd += " > /dev/null 2>&1";
    }
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    out << content;
}

std::string temp_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

const char* kTinyConfig = R"json({
  "model": {"d_model": 16, "n_heads": 2, "n_enc_layers": 1, "n_dec_layers": 1,
            "d_ff": 32, "n_model": 4, "max_len": 8,
            "feature": {"use_individual": false, "averaging": "fixed", "use_sigma": true}},
  "train": {"lr": 0.002, "batch_size": 4, "eval_every": 5, "max_steps": 10,
            "patience_steps": 50, "seed": 3, "beam": 2},
  "data": {"n_train": 12, "n_valid": 4, "n_test": 4, "k": 8,
           "n_images_min": 5, "n_images_max": 8, "seed": 5},
  "tokenizer": {"min_freq": 1}
})json";

}  // namespace

TEST_CASE("help exits zero and documents subcommands") {
    const std::string dir = temp_dir("mism_cli_help");
    CHECK(run("--help", dir + "/help.txt") == 0);
    const std::string help = read_file(dir + "/help.txt");
    for (const char* sub :
         {"datagen", "train", "pretrain", "eval", "infer", "ablate-order", "grid", "score"}) {
        CHECK(help.find(sub) != std::string::npos);
    }
    CHECK(run("datagen --help") == 0);
    CHECK(run("score --help") == 0);
    fs::remove_all(dir);
}

TEST_CASE("datagen writes splits and stats, and is byte-deterministic") {
    const std::string dir = temp_dir("mism_cli_datagen");
    write_file(dir + "/config.json", kTinyConfig);
    CHECK(run("datagen --config " + dir + "/config.json --out " + dir + "/a") == 0);
    CHECK(run("datagen --config " + dir + "/config.json --out " + dir + "/b") == 0);
    for (const char* name : {"train.jsonl", "valid.jsonl", "test.jsonl", "stats.json"}) {
        CHECK(fs::exists(fs::path(dir) / "a" / name));
        CHECK(read_file(dir + "/a/" + name) == read_file(dir + "/b/" + name));
    }
    const nlohmann::json stats = nlohmann::json::parse(read_file(dir + "/a/stats.json"));
    CHECK(stats.contains("train"));
    CHECK(stats.at("train").contains("avg_num_images"));
    fs::remove_all(dir);
}

TEST_CASE("unknown config keys exit 2 and name the key") {
    const std::string dir = temp_dir("mism_cli_badkey");
    write_file(dir + "/config.json", R"({"data": {"n_trian": 10}})");
    CHECK(run("datagen --config " + dir + "/config.json --out " + dir + "/out",
              dir + "/log") == 2);
    CHECK(read_file(dir + "/log.err").find("n_trian") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("usage errors exit 2") {
    CHECK(run("datagen") == 2);           // missing --out
    CHECK(run("no-such-subcommand") == 2);
}

TEST_CASE("missing input files exit 3") {
    const std::string dir = temp_dir("mism_cli_missing");
    CHECK(run("infer --checkpoint " + dir + "/nope.ckpt --vocab " + dir + "/nope.tsv --in " +
              dir + "/nope.jsonl") == 3);
    CHECK(run("score --candidates " + dir + "/nope.txt --references " + dir + "/nope.txt") == 3);
    fs::remove_all(dir);
}

TEST_CASE("score on identical files reports perfect metrics") {
    const std::string dir = temp_dir("mism_cli_score");
    write_file(dir + "/caps.txt",
               "gold ring with tiny gems\ncopper mug on a table\nhandmade glass vase shining\n");
    CHECK(run("score --candidates " + dir + "/caps.txt --references " + dir + "/caps.txt",
              dir + "/report.json") == 0);
    const nlohmann::json report = nlohmann::json::parse(read_file(dir + "/report.json"));
    CHECK(report.at("cider").get<double>() == doctest::Approx(10.0).epsilon(1e-9));
    CHECK(report.at("bleu4").get<double>() == doctest::Approx(1.0));
    CHECK(report.at("rouge_l").get<double>() == doctest::Approx(1.0));
    fs::remove_all(dir);
}

TEST_CASE("full train / eval / infer / ablate-order round trip") {
    const std::string dir = temp_dir("mism_cli_train");
    write_file(dir + "/config.json", kTinyConfig);
    REQUIRE(run("datagen --config " + dir + "/config.json --out " + dir + "/data") == 0);
    REQUIRE(run("train --config " + dir + "/config.json --data " + dir + "/data --out " + dir +
                "/run",
                dir + "/train.json") == 0);
    CHECK(fs::exists(fs::path(dir) / "run" / "vocab.tsv"));
    CHECK(fs::exists(fs::path(dir) / "run" / "checkpoint_log.json"));
    const nlohmann::json log =
        nlohmann::json::parse(read_file(dir + "/run/checkpoint_log.json"));
    REQUIRE(log.contains("best"));
    const std::string best = log.at("best").at("path").get<std::string>();

    CHECK(run("eval --checkpoint " + dir + "/run/" + best + " --vocab " + dir +
              "/run/vocab.tsv --data " + dir + "/data/test.jsonl --beam 2",
              dir + "/eval.json") == 0);
    const nlohmann::json eval = nlohmann::json::parse(read_file(dir + "/eval.json"));
    CHECK(eval.contains("cider"));

    CHECK(run("infer --checkpoint " + dir + "/run/" + best + " --vocab " + dir +
              "/run/vocab.tsv --in " + dir + "/data/test.jsonl --beam 2",
              dir + "/captions.txt") == 0);
    // One decoded line per test group.
    const std::string captions = read_file(dir + "/captions.txt");
    CHECK(std::count(captions.begin(), captions.end(), '\n') == 4);

    CHECK(run("ablate-order --checkpoint " + dir + "/run/" + best + " --vocab " + dir +
              "/run/vocab.tsv --data " + dir + "/data/test.jsonl --subset 4 --beam 2",
              dir + "/order.json") == 0);
    const nlohmann::json order = nlohmann::json::parse(read_file(dir + "/order.json"));
    CHECK(order.at("delta").get<double>() == 0.0);  // fixed-avg model

    // Reruns with the same seed reproduce the log bytes.
    REQUIRE(run("train --config " + dir + "/config.json --data " + dir + "/data --out " + dir +
                "/run2",
                dir + "/train2.json") == 0);
    CHECK(read_file(dir + "/run/checkpoint_log.json") ==
          read_file(dir + "/run2/checkpoint_log.json"));
    CHECK(read_file(dir + "/run/" + best) == read_file(dir + "/run2/" + best));
    fs::remove_all(dir);
}
