#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mism/data.hpp"
#include "mism/metrics.hpp"
#include "mism/model.hpp"
#include "mism/tokenize.hpp"

namespace mism {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// First/second moment accumulators per parameter plus the shared step count.
struct OptimState {
    AdamConfig config;
    int64_t t = 0;
    std::map<std::string, std::vector<double>> m;
    std::map<std::string, std::vector<double>> v;
};

// One bias-corrected Adam update, reading each parameter's accumulated
// gradient (parameters without a gradient buffer are treated as zero-grad).
void adam_step(ModelParameters& params, OptimState& state);

struct TrainConfig {
    double lr = 1e-3;           // paper-scale value 2e-5 remains reachable via config
    int64_t batch_size = 32;    // paper-scale 1024
    int64_t patience_steps = 2000;  // paper-scale 100000
    int64_t eval_every = 200;
    int64_t max_steps = 4000;
    uint64_t seed = 0;
    int beam = 4;
    bool strict_numerics = true;

    void validate() const;
};

struct CheckpointEntry {
    int64_t step = 0;
    double cider = 0.0;
    std::string path;  // file name, relative to the run directory
};

struct CheckpointLog {
    std::vector<CheckpointEntry> checkpoints;  // one per new validation maximum
    std::vector<std::pair<int64_t, double>> evals;
    int64_t best_index = -1;

    const CheckpointEntry& best() const;
    nlohmann::json to_json() const;
    static CheckpointLog from_json(const nlohmann::json& j);
    void save(const std::string& path) const;
    static CheckpointLog load(const std::string& path);
};

std::vector<PreparedExample> prepare_dataset(const std::vector<DatasetRecord>& records,
                                             const Vocab& vocab, const ModelConfig& config,
                                             uint64_t seed);

// Beam-decodes every example and scores CIDEr against the groundtruth.
double validation_cider(const std::vector<PreparedExample>& examples,
                        const ModelParameters& params, const ModelConfig& config,
                        const Vocab& vocab, int beam);

MetricReport evaluate_split(const std::vector<PreparedExample>& examples,
                            const ModelParameters& params, const ModelConfig& config,
                            const Vocab& vocab, int beam);

// Seeded shuffled batches; every eval_every steps the validation split is
// beam-decoded and scored, checkpoints are written on new CIDEr maxima, and
// training stops after patience_steps without improvement (or at max_steps).
// The best checkpoint is the selected model.
CheckpointLog train_loop(const ModelConfig& model_config,
                         const std::vector<DatasetRecord>& train_set,
                         const std::vector<DatasetRecord>& valid_set, const Vocab& vocab,
                         const TrainConfig& config, const std::string& out_dir,
                         const ModelParameters* initial_params = nullptr);

// Copies every name/shape-compatible tensor from src into dst; returns the
// names that were transferred and the names that were skipped.
std::pair<std::vector<std::string>, std::vector<std::string>> transfer_parameters(
    ModelParameters& dst, const ModelParameters& src);

struct PretrainResult {
    CheckpointLog phase1;
    CheckpointLog phase2;
    std::vector<std::string> transferred;
    std::vector<std::string> skipped;
};

// Phase 1 trains on single-image pairs (validated on the multi-image
// validation set adapted to single images); phase 2 re-initializes the
// optimizer, loads the phase-1 best weights, and trains on multi-image data.
// An existing phase-1 run under out_dir is reused instead of retrained; its
// stored config must match, otherwise the differing fields are reported.
PretrainResult pretrain_then_finetune(const ModelConfig& model_config,
                                      const std::vector<DatasetRecord>& single_train,
                                      const std::vector<DatasetRecord>& single_valid,
                                      const std::vector<DatasetRecord>& multi_train,
                                      const std::vector<DatasetRecord>& multi_valid,
                                      const Vocab& vocab, const TrainConfig& phase1_config,
                                      const TrainConfig& phase2_config,
                                      const std::string& out_dir);

struct GridRow {
    bool indiv = false;
    Averaging averaging = Averaging::none;
    bool sigma = false;
    MetricReport metrics;
};

// Trains one model per legal feature combination (14 rows) and scores the
// test split with the best checkpoint of each.
std::vector<GridRow> run_ablation_grid(const ModelConfig& base_config,
                                       const std::vector<DatasetRecord>& train_set,
                                       const std::vector<DatasetRecord>& valid_set,
                                       const std::vector<DatasetRecord>& test_set,
                                       const Vocab& vocab, const TrainConfig& train_config,
                                       const std::string& out_dir, bool parallel = false,
                                       int max_threads = 0);

std::string grid_to_csv(const std::vector<GridRow>& rows);

struct OrderingReport {
    double cider_original = 0.0;
    double cider_shuffled = 0.0;
    double delta = 0.0;
    int64_t n_examples = 0;

    nlohmann::json to_json() const;
};

// Decodes a test subset twice, with the original row order and with a seeded
// per-example row permutation of the size-normalized groups, and reports both
// CIDEr values.
OrderingReport ordering_ablation(const ModelParameters& params, const ModelConfig& config,
                                 const Vocab& vocab, const std::vector<DatasetRecord>& test_set,
                                 int64_t subset_size, uint64_t seed, int beam,
                                 bool identity_permutation = false);

}  // namespace mism
