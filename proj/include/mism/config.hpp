#pragma once

#include <string>

#include <json.hpp>

#include "mism/data.hpp"
#include "mism/model.hpp"
#include "mism/train.hpp"

namespace mism {

// Merged configuration for the CLI, loaded from a JSON file with per-section
// defaults. Unknown keys are rejected.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    TrainConfig pretrain;  // phase-1 settings; defaults mirror `train`
    GeneratorConfig data;
    FilterConfig filter;
    int64_t data_k = 16;  // embedding dimension of generated data
    int64_t tokenizer_min_freq = 10;
    int64_t tokenizer_max_vocab = 50000;
    nlohmann::json axes;  // optional concept-space override, array form

    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig from_file(const std::string& path);
    static RunConfig defaults();

    ConceptSpace concept_space() const;
    void validate() const;
};

}  // namespace mism
