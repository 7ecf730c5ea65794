#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mism/tensor.hpp"

namespace mism {

struct ImageMeta {
    int width = 0;
    int height = 0;
    std::vector<std::string> tags;
};

// N embeddings of dimension K plus per-image metadata and a groundtruth
// caption. Embeddings are inputs to the model, never updated by training.
struct ImageGroup {
    std::string group_id;
    int64_t n = 0;
    int64_t k = 0;
    std::vector<double> embeddings;  // row-major (n, k)
    std::vector<ImageMeta> image_meta;
    std::string caption;

    double at(int64_t i, int64_t j) const { return embeddings[static_cast<size_t>(i * k + j)]; }
    Tensor embedding_tensor() const;
    void validate() const;  // n >= 1, finite rows, meta count matches
};

enum class Averaging { none, fixed, dense, selfattn };

std::string averaging_name(Averaging a);
Averaging averaging_from_name(const std::string& name);

// Which representations feed the encoder. The std-dev feature is never fed
// alone; it always rides along with individual or aggregated embeddings.
struct FeatureConfig {
    bool use_individual = false;
    Averaging averaging = Averaging::fixed;
    bool use_sigma = false;

    void validate() const;
};

// Learned aggregation weights: h_dense is (N_model, K*N_model); h1 and h2 are
// (K, M) projections for scaled dot-product attention pooling.
struct AggregationParams {
    Tensor h_dense;
    Tensor h1;
    Tensor h2;
};

enum class FeatureKind : int { individual = 0, aggregate = 1, sigma = 2 };

struct EncoderFeature {
    FeatureKind kind;
    Tensor vec;  // (K,)
};

// sigma_j = sqrt(mean_i (E_ij - mean_j)^2), population form. Exactly
// row-permutation invariant (canonical-order reduction).
Tensor std_dev_feature(const Tensor& e);

// Uniform-weight average of the rows; exactly row-permutation invariant.
Tensor fixed_avg(const Tensor& e);

// Learned softmax weights from the concatenated embedding vector:
// w = softmax(H . flatten(E)), output = sum_i w_i E_i.
Tensor dense_avg(const Tensor& e, const Tensor& h_dense);

// Scaled dot-product attention pooling with Q = E*H1, K = E*H2, V = E;
// output_j = mean_i of (softmax(Q K^T / sqrt(M)) V)_ij * E_ij.
Tensor self_attn_avg(const Tensor& e, const Tensor& h1, const Tensor& h2);

// Brings a group to exactly n_model images: uniform subsample (seeded,
// order-preserving) when larger, sample-with-replacement padding when smaller.
ImageGroup normalize_group_size(const ImageGroup& group, int64_t n_model, uint64_t seed);

// Emits the encoder inputs in canonical order: individual embeddings, then
// the aggregate vector, then sigma; each tagged for the encoder's slot
// embeddings.
std::vector<EncoderFeature> build_encoder_features(const ImageGroup& group,
                                                   const FeatureConfig& config,
                                                   const AggregationParams& params);

}  // namespace mism
