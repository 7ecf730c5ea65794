#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mism/aggregate.hpp"
#include "mism/tensor.hpp"

namespace mism {

struct ModelConfig {
    int64_t k = 64;  // image embedding dimension
    int64_t d_model = 128;
    int64_t n_heads = 4;
    int64_t n_enc_layers = 2;
    int64_t n_dec_layers = 2;
    int64_t d_ff = 256;
    int64_t vocab_size = 0;
    int64_t max_len = 32;
    int64_t n_model = 16;  // fixed group size fed to the model
    int64_t m_agg = 0;     // attention-pooling dim; 0 means "use k"
    FeatureConfig feature;

    int64_t agg_dim() const { return m_agg > 0 ? m_agg : k; }
    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

// All learnable weights, addressable by name. Iteration order is the sorted
// name order, which training relies on for deterministic updates.
struct ModelParameters {
    std::map<std::string, Tensor> named;

    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    void zero_grads();
};

ModelParameters init_parameters(const ModelConfig& config, uint64_t seed);

AggregationParams aggregation_params(const ModelParameters& params);

struct EncodeTrace {
    std::vector<Tensor> attention;  // one (S, S) row-stochastic map per head per layer
};

// Projects tagged feature vectors into d_model, adds kind-slot embeddings
// (plus positions for individual-image features only), and runs the
// self-attention encoder stack. Output is (S, d_model).
Tensor encode(const std::vector<EncoderFeature>& features, const ModelParameters& params,
              const ModelConfig& config, EncodeTrace* trace = nullptr);

// Full teacher-forcing decoder pass: causal self-attention over the prefix,
// cross-attention over the encoder output, logits for every position.
Tensor decode_logits(const Tensor& encoder_output, const std::vector<int>& prefix,
                     const ModelParameters& params, const ModelConfig& config);

// Next-token logits after the given prefix (which must start with BOS).
Tensor decode_step(const Tensor& encoder_output, const std::vector<int>& prefix,
                   const ModelParameters& params, const ModelConfig& config);

// A size-normalized group with its tokenized caption content (no BOS/EOS).
struct PreparedExample {
    ImageGroup group;
    std::vector<int> content_ids;
};

// Mean negative log-likelihood over all target positions in the batch under
// teacher forcing.
Tensor mle_loss(const std::vector<PreparedExample>& batch, const ModelParameters& params,
                const ModelConfig& config);

}  // namespace mism
