#include "mism/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <thread>

#include "mism/checkpoint.hpp"
#include "mism/decode.hpp"
#include "mism/error.hpp"
#include "mism/rng.hpp"

namespace mism {

void adam_step(ModelParameters& params, OptimState& state) {
    state.t += 1;
    const AdamConfig& c = state.config;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
    for (auto& [name, tensor] : params.named) {
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.empty()) {
            m.assign(tensor.values().size(), 0.0);
            v.assign(tensor.values().size(), 0.0);
        }
        if (m.size() != tensor.values().size()) {
            throw ContractError("adam_step: state shape mismatch for parameter '" + name + "'");
        }
        const bool has_grad = tensor.has_grad();
        for (size_t i = 0; i < tensor.values().size(); ++i) {
            const double g = has_grad ? tensor.grad()[i] : 0.0;
            if (strict_numerics() && !std::isfinite(g)) {
                throw NumericError("adam_step: non-finite gradient in parameter '" + name + "'");
            }
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
            const double m_hat = m[i] / bc1;
            const double v_hat = v[i] / bc2;
            tensor.values()[i] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
        }
    }
}

void TrainConfig::validate() const {
    if (lr < 0.0) {
        throw ConfigError("train config: lr must be >= 0");
    }
    if (batch_size < 1 || patience_steps < 1 || eval_every < 1 || max_steps < 1 || beam < 1) {
        throw ConfigError("train config: sizes and step counts must be positive");
    }
}

const CheckpointEntry& CheckpointLog::best() const {
    if (best_index < 0 || best_index >= static_cast<int64_t>(checkpoints.size())) {
        throw ContractError("checkpoint log has no best entry");
    }
    return checkpoints[static_cast<size_t>(best_index)];
}

nlohmann::json CheckpointLog::to_json() const {
    nlohmann::json ckpts = nlohmann::json::array();
    for (const CheckpointEntry& e : checkpoints) {
        ckpts.push_back({{"step", e.step}, {"cider", e.cider}, {"path", e.path}});
    }
    nlohmann::json evals_json = nlohmann::json::array();
    for (const auto& [step, cider] : evals) {
        evals_json.push_back({{"step", step}, {"cider", cider}});
    }
    nlohmann::json j{{"checkpoints", ckpts}, {"evals", evals_json}};
    if (best_index >= 0) {
        const CheckpointEntry& b = best();
        j["best"] = {{"step", b.step}, {"cider", b.cider}, {"path", b.path}};
    }
    return j;
}

CheckpointLog CheckpointLog::from_json(const nlohmann::json& j) {
    CheckpointLog log;
    for (const auto& e : j.at("checkpoints")) {
        log.checkpoints.push_back({e.at("step").get<int64_t>(), e.at("cider").get<double>(),
                                   e.at("path").get<std::string>()});
    }
    for (const auto& e : j.at("evals")) {
        log.evals.emplace_back(e.at("step").get<int64_t>(), e.at("cider").get<double>());
    }
    if (j.contains("best")) {
        for (size_t i = 0; i < log.checkpoints.size(); ++i) {
            if (log.checkpoints[i].step == j.at("best").at("step").get<int64_t>()) {
                log.best_index = static_cast<int64_t>(i);
            }
        }
    }
    return log;
}

void CheckpointLog::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write checkpoint log: " + path);
    }
    out << to_json().dump(2) << '\n';
}

CheckpointLog CheckpointLog::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open checkpoint log: " + path);
    }
    nlohmann::json j;
    try {
        in >> j;
        return from_json(j);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("bad checkpoint log " + path + ": " + e.what());
    }
}

std::vector<PreparedExample> prepare_dataset(const std::vector<DatasetRecord>& records,
                                             const Vocab& vocab, const ModelConfig& config,
                                             uint64_t seed) {
    std::vector<PreparedExample> out;
    out.reserve(records.size());
    for (const DatasetRecord& rec : records) {
        PreparedExample ex;
        ex.group = normalize_group_size(rec.group, config.n_model,
                                        mix_seed(seed, hash_string(rec.group.group_id)));
        TokenSeq seq = encode_text(rec.group.caption, vocab, config.max_len);
        ex.content_ids.assign(seq.begin() + 1, seq.end() - 1);
        out.push_back(std::move(ex));
    }
    return out;
}

namespace {

std::vector<std::string> decode_all(const std::vector<PreparedExample>& examples,
                                    const ModelParameters& params, const ModelConfig& config,
                                    const Vocab& vocab, int beam) {
    std::vector<std::string> decoded;
    decoded.reserve(examples.size());
    for (const PreparedExample& ex : examples) {
        decoded.push_back(generate_caption(ex.group, params, config, vocab, beam));
    }
    return decoded;
}

std::vector<std::string> reference_captions(const std::vector<PreparedExample>& examples) {
    std::vector<std::string> refs;
    refs.reserve(examples.size());
    for (const PreparedExample& ex : examples) {
        refs.push_back(ex.group.caption);
    }
    return refs;
}

}  // namespace

double validation_cider(const std::vector<PreparedExample>& examples,
                        const ModelParameters& params, const ModelConfig& config,
                        const Vocab& vocab, int beam) {
    const std::vector<std::string> decoded = decode_all(examples, params, config, vocab, beam);
    const std::vector<std::string> refs = reference_captions(examples);
    std::vector<Tokens> cand_tokens, ref_tokens;
    for (const std::string& s : decoded) {
        cand_tokens.push_back(split_lower_tokens(s));
    }
    for (const std::string& s : refs) {
        ref_tokens.push_back(split_lower_tokens(s));
    }
    return cider_d(cand_tokens, ref_tokens);
}

MetricReport evaluate_split(const std::vector<PreparedExample>& examples,
                            const ModelParameters& params, const ModelConfig& config,
                            const Vocab& vocab, int beam) {
    const std::vector<std::string> decoded = decode_all(examples, params, config, vocab, beam);
    return score_corpus(decoded, reference_captions(examples));
}

CheckpointLog train_loop(const ModelConfig& model_config,
                         const std::vector<DatasetRecord>& train_set,
                         const std::vector<DatasetRecord>& valid_set, const Vocab& vocab,
                         const TrainConfig& config, const std::string& out_dir,
                         const ModelParameters* initial_params) {
    model_config.validate();
    config.validate();
    if (train_set.empty() || valid_set.empty()) {
        throw ConfigError("train_loop: train and valid sets must be non-empty");
    }
    if (model_config.vocab_size != static_cast<int64_t>(vocab.size())) {
        throw ConfigError("train_loop: model vocab_size " +
                          std::to_string(model_config.vocab_size) +
                          " does not match vocabulary size " + std::to_string(vocab.size()));
    }
    set_strict_numerics(config.strict_numerics);
    std::filesystem::create_directories(out_dir);

    const std::vector<PreparedExample> train_prepared =
        prepare_dataset(train_set, vocab, model_config, mix_seed(config.seed, 1));
    const std::vector<PreparedExample> valid_prepared =
        prepare_dataset(valid_set, vocab, model_config, mix_seed(config.seed, 2));

    ModelParameters params;
    if (initial_params != nullptr) {
        for (const auto& [name, t] : initial_params->named) {
            Tensor copy = t.clone_detached();
            copy.set_requires_grad(true);
            params.named[name] = copy;
        }
    } else {
        params = init_parameters(model_config, mix_seed(config.seed, 3));
    }

    OptimState optim;
    optim.config.lr = config.lr;

    Rng shuffle_rng(mix_seed(config.seed, 4));
    std::vector<int64_t> order(train_prepared.size());
    for (size_t i = 0; i < order.size(); ++i) {
        order[i] = static_cast<int64_t>(i);
    }
    shuffle_rng.shuffle(order);
    size_t cursor = 0;

    CheckpointLog log;
    double best_cider = -1.0;
    int64_t best_step = 0;

    for (int64_t step = 1; step <= config.max_steps; ++step) {
        std::vector<PreparedExample> batch;
        batch.reserve(static_cast<size_t>(config.batch_size));
        for (int64_t b = 0; b < config.batch_size; ++b) {
            if (cursor == order.size()) {
                shuffle_rng.shuffle(order);
                cursor = 0;
            }
            batch.push_back(train_prepared[static_cast<size_t>(order[cursor++])]);
        }
        params.zero_grads();
        double loss_value = 0.0;
        {
            TapeScope tape;
            Tensor loss = mle_loss(batch, params, model_config);
            loss_value = loss.item();
            backward(loss);
        }
        adam_step(params, optim);

        if (step % config.eval_every == 0) {
            const double cider =
                validation_cider(valid_prepared, params, model_config, vocab, config.beam);
            log.evals.emplace_back(step, cider);
            if (cider > best_cider) {
                best_cider = cider;
                best_step = step;
                char name[40];
                std::snprintf(name, sizeof(name), "ckpt_%06lld.ckpt",
                              static_cast<long long>(step));
                save_checkpoint((std::filesystem::path(out_dir) / name).string(), model_config,
                                params);
                log.checkpoints.push_back({step, cider, name});
                log.best_index = static_cast<int64_t>(log.checkpoints.size()) - 1;
                std::fprintf(stderr, "step %lld loss %.4f valid cider %.4f (new best)\n",
                             static_cast<long long>(step), loss_value, cider);
            } else {
                std::fprintf(stderr, "step %lld loss %.4f valid cider %.4f\n",
                             static_cast<long long>(step), loss_value, cider);
                if (step - best_step >= config.patience_steps) {
                    break;
                }
            }
        }
    }
    log.save((std::filesystem::path(out_dir) / "checkpoint_log.json").string());
    return log;
}

std::pair<std::vector<std::string>, std::vector<std::string>> transfer_parameters(
    ModelParameters& dst, const ModelParameters& src) {
    std::vector<std::string> transferred, skipped;
    for (auto& [name, tensor] : dst.named) {
        auto it = src.named.find(name);
        if (it == src.named.end() || it->second.shape() != tensor.shape()) {
            skipped.push_back(name);
            continue;
        }
        tensor.values() = it->second.values();
        transferred.push_back(name);
    }
    return {transferred, skipped};
}

PretrainResult pretrain_then_finetune(const ModelConfig& model_config,
                                      const std::vector<DatasetRecord>& single_train,
                                      const std::vector<DatasetRecord>& single_valid,
                                      const std::vector<DatasetRecord>& multi_train,
                                      const std::vector<DatasetRecord>& multi_valid,
                                      const Vocab& vocab, const TrainConfig& phase1_config,
                                      const TrainConfig& phase2_config,
                                      const std::string& out_dir) {
    PretrainResult result;
    const std::string phase1_dir = (std::filesystem::path(out_dir) / "phase1").string();
    const std::string phase2_dir = (std::filesystem::path(out_dir) / "phase2").string();

    const std::string phase1_log_path =
        (std::filesystem::path(phase1_dir) / "checkpoint_log.json").string();
    if (std::filesystem::exists(phase1_log_path)) {
        std::fprintf(stderr, "pretrain: reusing existing phase-1 run in %s\n",
                     phase1_dir.c_str());
        result.phase1 = CheckpointLog::load(phase1_log_path);
    } else {
        result.phase1 =
            train_loop(model_config, single_train, single_valid, vocab, phase1_config, phase1_dir);
    }

    const std::string best_path =
        (std::filesystem::path(phase1_dir) / result.phase1.best().path).string();
    const Checkpoint best = load_checkpoint(best_path);
    if (best.config.to_json() != model_config.to_json()) {
        std::string diff;
        const nlohmann::json a = best.config.to_json();
        const nlohmann::json b = model_config.to_json();
        for (auto it = a.begin(); it != a.end(); ++it) {
            if (b.at(it.key()) != it.value()) {
                if (!diff.empty()) {
                    diff += ", ";
                }
                diff += it.key();
            }
        }
        throw ConfigError("pretrain/finetune config mismatch in: " + diff);
    }

    // Fresh init, then overwrite with the phase-1 best weights; the optimizer
    // inside train_loop starts from zeroed moments.
    ModelParameters initial = init_parameters(model_config, mix_seed(phase2_config.seed, 3));
    auto [transferred, skipped] = transfer_parameters(initial, best.params);
    result.transferred = std::move(transferred);
    result.skipped = std::move(skipped);
    for (const std::string& name : result.skipped) {
        std::fprintf(stderr, "pretrain: parameter '%s' not transferred\n", name.c_str());
    }

    result.phase2 = train_loop(model_config, multi_train, multi_valid, vocab, phase2_config,
                               phase2_dir, &initial);
    return result;
}

namespace {

const std::vector<std::tuple<bool, Averaging, bool>>& grid_rows() {
    static const std::vector<std::tuple<bool, Averaging, bool>> rows = [] {
        std::vector<std::tuple<bool, Averaging, bool>> r;
        for (bool indiv : {true, false}) {
            for (Averaging avg :
                 {Averaging::none, Averaging::fixed, Averaging::dense, Averaging::selfattn}) {
                for (bool sigma : {false, true}) {
                    r.emplace_back(indiv, avg, sigma);
                }
            }
        }
        return r;
    }();
    return rows;
}

}  // namespace

std::vector<GridRow> run_ablation_grid(const ModelConfig& base_config,
                                       const std::vector<DatasetRecord>& train_set,
                                       const std::vector<DatasetRecord>& valid_set,
                                       const std::vector<DatasetRecord>& test_set,
                                       const Vocab& vocab, const TrainConfig& train_config,
                                       const std::string& out_dir, bool parallel,
                                       int max_threads) {
    std::vector<std::tuple<bool, Averaging, bool>> legal;
    for (const auto& row : grid_rows()) {
        const auto& [indiv, avg, sigma] = row;
        FeatureConfig fc{indiv, avg, sigma};
        try {
            fc.validate();
        } catch (const ConfigError&) {
            std::fprintf(stderr, "grid: skipping forbidden config indiv=%c averaging=%s sigma=%c\n",
                         indiv ? 'Y' : 'N', averaging_name(avg).c_str(), sigma ? 'Y' : 'N');
            continue;
        }
        legal.push_back(row);
    }

    std::vector<GridRow> results(legal.size());
    auto run_row = [&](size_t idx) {
        const auto& [indiv, avg, sigma] = legal[idx];
        ModelConfig config = base_config;
        config.feature = FeatureConfig{indiv, avg, sigma};
        TrainConfig row_train = train_config;
        row_train.seed = mix_seed(train_config.seed, 100 + idx);
        const std::string row_dir =
            (std::filesystem::path(out_dir) / ("row_" + std::to_string(idx))).string();
        const CheckpointLog log =
            train_loop(config, train_set, valid_set, vocab, row_train, row_dir);
        const Checkpoint best = load_checkpoint(
            (std::filesystem::path(row_dir) / log.best().path).string());
        const std::vector<PreparedExample> test_prepared =
            prepare_dataset(test_set, vocab, config, mix_seed(row_train.seed, 5));
        GridRow row;
        row.indiv = indiv;
        row.averaging = avg;
        row.sigma = sigma;
        row.metrics =
            evaluate_split(test_prepared, best.params, config, vocab, row_train.beam);
        results[idx] = row;
    };

    if (parallel && legal.size() > 1) {
        int hw = max_threads > 0 ? max_threads
                                 : static_cast<int>(std::thread::hardware_concurrency());
        hw = std::max(1, std::min<int>(hw, static_cast<int>(legal.size())));
        std::vector<std::thread> workers;
        std::atomic<size_t> next{0};
        for (int w = 0; w < hw; ++w) {
            workers.emplace_back([&]() {
                for (;;) {
                    const size_t idx = next.fetch_add(1);
                    if (idx >= legal.size()) {
                        return;
                    }
                    run_row(idx);
                }
            });
        }
        for (auto& w : workers) {
            w.join();
        }
    } else {
        for (size_t idx = 0; idx < legal.size(); ++idx) {
            run_row(idx);
        }
    }
    return results;
}

std::string grid_to_csv(const std::vector<GridRow>& rows) {
    std::string out = "indiv,averaging,sigma,cider,bleu4,rougel\n";
    char line[160];
    for (const GridRow& row : rows) {
        std::snprintf(line, sizeof(line), "%c,%s,%c,%.6f,%.6f,%.6f\n", row.indiv ? 'Y' : 'N',
                      averaging_name(row.averaging).c_str(), row.sigma ? 'Y' : 'N',
                      row.metrics.cider, row.metrics.bleu4, row.metrics.rouge_l);
        out += line;
    }
    return out;
}

nlohmann::json OrderingReport::to_json() const {
    return nlohmann::json{{"cider_original", cider_original},
                          {"cider_shuffled", cider_shuffled},
                          {"delta", delta},
                          {"n_examples", n_examples}};
}

OrderingReport ordering_ablation(const ModelParameters& params, const ModelConfig& config,
                                 const Vocab& vocab, const std::vector<DatasetRecord>& test_set,
                                 int64_t subset_size, uint64_t seed, int beam,
                                 bool identity_permutation) {
    if (test_set.empty()) {
        throw ContractError("ordering_ablation: empty test set");
    }
    int64_t n = subset_size;
    if (n > static_cast<int64_t>(test_set.size())) {
        std::fprintf(stderr, "ordering ablation: subset %lld clipped to test size %zu\n",
                     static_cast<long long>(subset_size), test_set.size());
        n = static_cast<int64_t>(test_set.size());
    }
    const std::vector<DatasetRecord> subset(test_set.begin(), test_set.begin() + n);
    const std::vector<PreparedExample> prepared =
        prepare_dataset(subset, vocab, config, mix_seed(seed, 6));

    std::vector<std::string> original, shuffled, refs;
    for (size_t i = 0; i < prepared.size(); ++i) {
        const PreparedExample& ex = prepared[i];
        original.push_back(generate_caption(ex.group, params, config, vocab, beam));
        refs.push_back(ex.group.caption);

        ImageGroup permuted = ex.group;
        if (!identity_permutation) {
            std::vector<int64_t> perm(static_cast<size_t>(ex.group.n));
            for (size_t j = 0; j < perm.size(); ++j) {
                perm[j] = static_cast<int64_t>(j);
            }
            Rng rng(mix_seed(seed, 1000 + i));
            rng.shuffle(perm);
            for (int64_t r = 0; r < ex.group.n; ++r) {
                const int64_t src = perm[static_cast<size_t>(r)];
                std::copy(ex.group.embeddings.begin() + src * ex.group.k,
                          ex.group.embeddings.begin() + (src + 1) * ex.group.k,
                          permuted.embeddings.begin() + r * ex.group.k);
                permuted.image_meta[static_cast<size_t>(r)] =
                    ex.group.image_meta[static_cast<size_t>(src)];
            }
        }
        shuffled.push_back(generate_caption(permuted, params, config, vocab, beam));
    }

    auto tokens_of = [](const std::vector<std::string>& texts) {
        std::vector<Tokens> out;
        for (const std::string& t : texts) {
            out.push_back(split_lower_tokens(t));
        }
        return out;
    };
    const std::vector<Tokens> ref_tokens = tokens_of(refs);
    OrderingReport report;
    report.n_examples = n;
    report.cider_original = cider_d(tokens_of(original), ref_tokens);
    report.cider_shuffled = cider_d(tokens_of(shuffled), ref_tokens);
    report.delta = report.cider_original - report.cider_shuffled;
    return report;
}

}  // namespace mism
