// Command-line entry point for the multi-image summarization workflow:
// synthetic data generation, training, pretraining, evaluation, inference,
// the ordering and input-representation ablations, and standalone scoring.
//
// Exit codes: 0 ok, 2 usage/config error, 3 I/O or data error, 4 numeric
// failure under strict mode.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mism/checkpoint.hpp"
#include "mism/config.hpp"
#include "mism/data.hpp"
#include "mism/decode.hpp"
#include "mism/error.hpp"
#include "mism/metrics.hpp"
#include "mism/rng.hpp"
#include "mism/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

mism::RunConfig load_config(const std::string& path) {
    if (path.empty()) {
        return mism::RunConfig::defaults();
    }
    return mism::RunConfig::from_file(path);
}

std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw mism::IoError("cannot open: " + path);
    }
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        lines.push_back(line);
    }
    return lines;
}

std::vector<std::string> captions_of(const std::vector<mism::DatasetRecord>& records) {
    std::vector<std::string> out;
    out.reserve(records.size());
    for (const auto& rec : records) {
        out.push_back(rec.group.caption);
    }
    return out;
}

mism::Vocab build_vocab(const std::vector<std::string>& corpus, const mism::RunConfig& config) {
    return mism::train_vocab(corpus, config.tokenizer_min_freq, config.tokenizer_max_vocab);
}

int env_threads() {
    const char* v = std::getenv("MISM_THREADS");
    if (v == nullptr) {
        return 0;
    }
    return std::max(0, std::atoi(v));
}

struct DataDir {
    std::vector<mism::DatasetRecord> train, valid, test;
};

DataDir load_data_dir(const std::string& dir, bool need_test = false) {
    DataDir d;
    d.train = mism::load_jsonl((fs::path(dir) / "train.jsonl").string());
    d.valid = mism::load_jsonl((fs::path(dir) / "valid.jsonl").string());
    const fs::path test_path = fs::path(dir) / "test.jsonl";
    if (need_test || fs::exists(test_path)) {
        d.test = mism::load_jsonl(test_path.string());
    }
    return d;
}

int cmd_datagen(const std::string& config_path, const std::string& out_dir) {
    const mism::RunConfig config = load_config(config_path);
    const mism::ConceptSpace space = config.concept_space();
    std::vector<mism::DatasetRecord> records =
        mism::generate_synthetic_dataset(space, config.data);
    records = mism::apply_group_filters(records, config.filter);
    if (records.empty()) {
        throw mism::DataError("all generated groups were filtered out");
    }
    fs::create_directories(out_dir);
    std::vector<mism::DatasetRecord> split;
    for (const char* name : {"train", "valid", "test"}) {
        split.clear();
        for (const auto& rec : records) {
            if (rec.split == name) {
                split.push_back(rec);
            }
        }
        mism::save_jsonl(split, (fs::path(out_dir) / (std::string(name) + ".jsonl")).string());
    }
    std::ofstream stats((fs::path(out_dir) / "stats.json").string(), std::ios::binary);
    stats << mism::dataset_stats(records).dump(2) << '\n';
    std::fprintf(stderr, "datagen: wrote %zu groups to %s\n", records.size(), out_dir.c_str());
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir) {
    const mism::RunConfig config = load_config(config_path);
    const DataDir data = load_data_dir(data_dir);
    const mism::Vocab vocab = build_vocab(captions_of(data.train), config);
    fs::create_directories(out_dir);
    vocab.save((fs::path(out_dir) / "vocab.tsv").string());
    mism::ModelConfig model_config = config.model;
    model_config.vocab_size = vocab.size();
    const mism::CheckpointLog log =
        mism::train_loop(model_config, data.train, data.valid, vocab, config.train, out_dir);
    json summary = log.to_json();
    std::cout << summary.dump(2) << std::endl;
    return 0;
}

int cmd_pretrain(const std::string& config_path, const std::string& data_dir,
                 const std::string& out_dir) {
    const mism::RunConfig config = load_config(config_path);
    const DataDir data = load_data_dir(data_dir);
    const std::vector<mism::DatasetRecord> single_train =
        mism::make_single_image_dataset(data.train);
    const std::vector<mism::DatasetRecord> single_valid =
        mism::make_single_image_dataset(data.valid);
    // One shared vocabulary across phases, trained on the caption union.
    std::vector<std::string> corpus = captions_of(data.train);
    const std::vector<std::string> single_captions = captions_of(single_train);
    corpus.insert(corpus.end(), single_captions.begin(), single_captions.end());
    const mism::Vocab vocab = build_vocab(corpus, config);
    fs::create_directories(out_dir);
    vocab.save((fs::path(out_dir) / "vocab.tsv").string());
    mism::ModelConfig model_config = config.model;
    model_config.vocab_size = vocab.size();
    const mism::PretrainResult result =
        mism::pretrain_then_finetune(model_config, single_train, single_valid, data.train,
                                     data.valid, vocab, config.pretrain, config.train, out_dir);
    json summary{{"phase1", result.phase1.to_json()},
                 {"phase2", result.phase2.to_json()},
                 {"transferred", result.transferred.size()},
                 {"skipped", result.skipped}};
    std::cout << summary.dump(2) << std::endl;
    return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& vocab_path,
             const std::string& data_path, int beam, uint64_t seed) {
    const mism::Checkpoint ckpt = mism::load_checkpoint(checkpoint_path);
    const mism::Vocab vocab = mism::Vocab::load(vocab_path);
    if (ckpt.config.vocab_size != vocab.size()) {
        throw mism::ConfigError("vocabulary size " + std::to_string(vocab.size()) +
                                " does not match checkpoint vocab_size " +
                                std::to_string(ckpt.config.vocab_size));
    }
    const std::vector<mism::DatasetRecord> records = mism::load_jsonl(data_path);
    const std::vector<mism::PreparedExample> prepared =
        mism::prepare_dataset(records, vocab, ckpt.config, mism::mix_seed(seed, 5));
    const mism::MetricReport report =
        mism::evaluate_split(prepared, ckpt.params, ckpt.config, vocab, beam);
    std::cout << report.to_json().dump(2) << std::endl;
    return 0;
}

int cmd_infer(const std::string& checkpoint_path, const std::string& vocab_path,
              const std::string& in_path, int beam, uint64_t seed) {
    const mism::Checkpoint ckpt = mism::load_checkpoint(checkpoint_path);
    const mism::Vocab vocab = mism::Vocab::load(vocab_path);
    if (ckpt.config.vocab_size != vocab.size()) {
        throw mism::ConfigError("vocabulary size " + std::to_string(vocab.size()) +
                                " does not match checkpoint vocab_size " +
                                std::to_string(ckpt.config.vocab_size));
    }
    const std::vector<mism::DatasetRecord> records = mism::load_jsonl(in_path);
    for (const auto& rec : records) {
        const mism::ImageGroup normalized = mism::normalize_group_size(
            rec.group, ckpt.config.n_model,
            mism::mix_seed(seed, mism::hash_string(rec.group.group_id)));
        std::cout << mism::generate_caption(normalized, ckpt.params, ckpt.config, vocab, beam)
                  << '\n';
    }
    return 0;
}

int cmd_ablate_order(const std::string& checkpoint_path, const std::string& vocab_path,
                     const std::string& data_path, int64_t subset, uint64_t seed, int beam) {
    const mism::Checkpoint ckpt = mism::load_checkpoint(checkpoint_path);
    const mism::Vocab vocab = mism::Vocab::load(vocab_path);
    const std::vector<mism::DatasetRecord> records = mism::load_jsonl(data_path);
    const mism::OrderingReport report =
        mism::ordering_ablation(ckpt.params, ckpt.config, vocab, records, subset, seed, beam);
    std::cout << report.to_json().dump(2) << std::endl;
    return 0;
}

int cmd_grid(const std::string& config_path, const std::string& data_dir,
             const std::string& out_path, bool parallel) {
    const mism::RunConfig config = load_config(config_path);
    const DataDir data = load_data_dir(data_dir, true);
    if (data.test.empty()) {
        throw mism::DataError("grid requires a test split");
    }
    const mism::Vocab vocab = build_vocab(captions_of(data.train), config);
    mism::ModelConfig model_config = config.model;
    model_config.vocab_size = vocab.size();
    const fs::path out(out_path);
    const std::string work_dir = out.parent_path().empty()
                                     ? "grid_runs"
                                     : (out.parent_path() / "grid_runs").string();
    const std::vector<mism::GridRow> rows =
        mism::run_ablation_grid(model_config, data.train, data.valid, data.test, vocab,
                                config.train, work_dir, parallel, env_threads());
    std::ofstream csv(out_path, std::ios::binary);
    if (!csv) {
        throw mism::IoError("cannot write " + out_path);
    }
    csv << mism::grid_to_csv(rows);
    std::fprintf(stderr, "grid: wrote %zu rows to %s\n", rows.size(), out_path.c_str());
    return 0;
}

int cmd_score(const std::string& candidates_path, const std::string& references_path,
              bool smooth_bleu) {
    const std::vector<std::string> cands = read_lines(candidates_path);
    const std::vector<std::string> refs = read_lines(references_path);
    const mism::MetricReport report = mism::score_corpus(cands, refs, smooth_bleu);
    std::cout << report.to_json().dump(2) << std::endl;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mism: multi-image summarization models, data, and experiments"};
    app.require_subcommand(1);

    std::string config_path, out_path, data_path, checkpoint_path, vocab_path, in_path;
    std::string candidates_path, references_path;
    int beam = 4;
    uint64_t seed = 0;
    int64_t subset = 500;
    bool parallel = false;
    bool smooth_bleu = false;

    auto* datagen = app.add_subcommand("datagen", "generate a synthetic dataset");
    datagen->add_option("--config", config_path, "JSON config file");
    datagen->add_option("--out", out_path, "output directory")->required();

    auto* train = app.add_subcommand("train", "train a captioning model");
    train->add_option("--config", config_path, "JSON config file");
    train->add_option("--data", data_path, "dataset directory")->required();
    train->add_option("--out", out_path, "run directory")->required();

    auto* pretrain = app.add_subcommand("pretrain", "single-image pretraining then finetuning");
    pretrain->add_option("--config", config_path, "JSON config file");
    pretrain->add_option("--data", data_path, "dataset directory")->required();
    pretrain->add_option("--out", out_path, "run directory")->required();

    auto* eval = app.add_subcommand("eval", "score a checkpoint on a JSONL split");
    eval->add_option("--checkpoint", checkpoint_path)->required();
    eval->add_option("--vocab", vocab_path)->required();
    eval->add_option("--data", data_path)->required();
    eval->add_option("--beam", beam);
    eval->add_option("--seed", seed);

    auto* infer = app.add_subcommand("infer", "decode captions for a JSONL of groups");
    infer->add_option("--checkpoint", checkpoint_path)->required();
    infer->add_option("--vocab", vocab_path)->required();
    infer->add_option("--in", in_path)->required();
    infer->add_option("--beam", beam);
    infer->add_option("--seed", seed);

    auto* ablate = app.add_subcommand("ablate-order", "compare original vs permuted image order");
    ablate->add_option("--checkpoint", checkpoint_path)->required();
    ablate->add_option("--vocab", vocab_path)->required();
    ablate->add_option("--data", data_path)->required();
    ablate->add_option("--subset", subset);
    ablate->add_option("--seed", seed);
    ablate->add_option("--beam", beam);

    auto* grid = app.add_subcommand("grid", "train every legal input-representation row");
    grid->add_option("--config", config_path, "JSON config file");
    grid->add_option("--data", data_path, "dataset directory")->required();
    grid->add_option("--out", out_path, "output CSV path")->required();
    grid->add_flag("--parallel", parallel, "train rows on worker threads");

    auto* score = app.add_subcommand("score", "score two aligned caption files");
    score->add_option("--candidates", candidates_path)->required();
    score->add_option("--references", references_path)->required();
    score->add_flag("--smooth-bleu", smooth_bleu);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (datagen->parsed()) {
            return cmd_datagen(config_path, out_path);
        }
        if (train->parsed()) {
            return cmd_train(config_path, data_path, out_path);
        }
        if (pretrain->parsed()) {
            return cmd_pretrain(config_path, data_path, out_path);
        }
        if (eval->parsed()) {
            return cmd_eval(checkpoint_path, vocab_path, data_path, beam, seed);
        }
        if (infer->parsed()) {
            return cmd_infer(checkpoint_path, vocab_path, in_path, beam, seed);
        }
        if (ablate->parsed()) {
            return cmd_ablate_order(checkpoint_path, vocab_path, data_path, subset, seed, beam);
        }
        if (grid->parsed()) {
            return cmd_grid(config_path, data_path, out_path, parallel);
        }
        if (score->parsed()) {
            return cmd_score(candidates_path, references_path, smooth_bleu);
        }
    } catch (const mism::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const mism::NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 4;
    } catch (const mism::DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const mism::IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 3;
    } catch (const mism::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
