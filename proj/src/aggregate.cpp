#include "mism/aggregate.hpp"

#include <cmath>

#include "mism/error.hpp"
#include "mism/rng.hpp"

namespace mism {

Tensor ImageGroup::embedding_tensor() const {
    return Tensor::from_values({n, k}, embeddings);
}

void ImageGroup::validate() const {
    if (n < 1 || k < 1) {
        throw DataError("image group '" + group_id + "' must have n >= 1 and k >= 1");
    }
    if (static_cast<int64_t>(embeddings.size()) != n * k) {
        throw DataError("image group '" + group_id + "' embedding size does not match (n, k)");
    }
    for (double v : embeddings) {
        if (!std::isfinite(v)) {
            throw DataError("image group '" + group_id + "' contains a non-finite embedding value");
        }
    }
    if (static_cast<int64_t>(image_meta.size()) != n) {
        throw DataError("image group '" + group_id + "' metadata count does not match n");
    }
}

std::string averaging_name(Averaging a) {
    switch (a) {
        case Averaging::none:
            return "none";
        case Averaging::fixed:
            return "fixed";
        case Averaging::dense:
            return "dense";
        case Averaging::selfattn:
            return "selfattn";
    }
    throw ConfigError("unknown averaging value");
}

Averaging averaging_from_name(const std::string& name) {
    if (name == "none") {
        return Averaging::none;
    }
    if (name == "fixed") {
        return Averaging::fixed;
    }
    if (name == "dense") {
        return Averaging::dense;
    }
    if (name == "selfattn") {
        return Averaging::selfattn;
    }
    throw ConfigError("unknown averaging '" + name + "' (expected none|fixed|dense|selfattn)");
}

void FeatureConfig::validate() const {
    if (!use_individual && averaging == Averaging::none) {
        if (use_sigma) {
            throw ConfigError(
                "the std-dev feature cannot be fed alone; enable individual embeddings or an "
                "averaging mode");
        }
        throw ConfigError("feature config selects no encoder inputs");
    }
}

Tensor std_dev_feature(const Tensor& e) {
    return std_rows_canonical(e);
}

Tensor fixed_avg(const Tensor& e) {
    return mean_rows_canonical(e);
}

Tensor dense_avg(const Tensor& e, const Tensor& h_dense) {
    if (e.rank() != 2 || h_dense.rank() != 2) {
        throw DimensionError("dense_avg expects rank-2 inputs");
    }
    const int64_t n = e.extent(0), k = e.extent(1);
    const int64_t n_model = h_dense.extent(0);
    if (h_dense.extent(1) != n_model * k) {
        throw DimensionError("dense_avg: weight shape " + shape_to_string(h_dense.shape()) +
                             " is not (N, K*N) for K=" + std::to_string(k));
    }
    if (n != n_model) {
        throw ContractError("dense_avg: group has " + std::to_string(n) +
                            " images but the dense layer is built for " + std::to_string(n_model) +
                            "; normalize the group size first");
    }
    // Row-major (N, K) data is already the concatenation e^f of the rows.
    Tensor ef = reshape(e, {n * k, 1});
    Tensor w = softmax(matmul(h_dense, ef), 0);  // (N, 1) on the simplex
    Tensor pooled = matmul(transpose(w), e);     // (1, K)
    return reshape(pooled, {k});
}

Tensor self_attn_avg(const Tensor& e, const Tensor& h1, const Tensor& h2) {
    if (e.rank() != 2 || h1.rank() != 2 || h2.rank() != 2) {
        throw DimensionError("self_attn_avg expects rank-2 inputs");
    }
    const int64_t k = e.extent(1);
    if (h1.shape() != h2.shape() || h1.extent(0) != k) {
        throw DimensionError("self_attn_avg: projections must both be (K, M), got " +
                             shape_to_string(h1.shape()) + " and " + shape_to_string(h2.shape()));
    }
    const int64_t m = h1.extent(1);
    Tensor q = matmul(e, h1);
    Tensor km = matmul(e, h2);
    Tensor scores = scale(matmul(q, transpose(km)), 1.0 / std::sqrt(static_cast<double>(m)));
    Tensor attn = softmax(scores, 1);
    Tensor w = matmul(attn, e);  // (N, K)
    return mean_rows_canonical(mul(w, e));
}

ImageGroup normalize_group_size(const ImageGroup& group, int64_t n_model, uint64_t seed) {
    group.validate();
    if (n_model < 1) {
        throw ContractError("normalize_group_size: n_model must be >= 1");
    }
    if (group.n == n_model) {
        return group;
    }
    Rng rng(seed);
    ImageGroup out;
    out.group_id = group.group_id;
    out.caption = group.caption;
    out.k = group.k;
    std::vector<int64_t> keep;
    if (group.n > n_model) {
        keep = rng.sample_without_replacement(group.n, n_model);
    } else {
        keep.reserve(static_cast<size_t>(n_model));
        for (int64_t i = 0; i < group.n; ++i) {
            keep.push_back(i);
        }
        while (static_cast<int64_t>(keep.size()) < n_model) {
            keep.push_back(rng.uniform_int(group.n));
        }
    }
    out.n = n_model;
    out.embeddings.reserve(static_cast<size_t>(n_model * group.k));
    for (int64_t i : keep) {
        out.embeddings.insert(out.embeddings.end(),
                              group.embeddings.begin() + i * group.k,
                              group.embeddings.begin() + (i + 1) * group.k);
        out.image_meta.push_back(group.image_meta[static_cast<size_t>(i)]);
    }
    return out;
}

std::vector<EncoderFeature> build_encoder_features(const ImageGroup& group,
                                                   const FeatureConfig& config,
                                                   const AggregationParams& params) {
    config.validate();
    group.validate();
    Tensor e = group.embedding_tensor();
    std::vector<EncoderFeature> features;
    if (config.use_individual) {
        for (int64_t i = 0; i < group.n; ++i) {
            features.push_back({FeatureKind::individual, row(e, i)});
        }
    }
    switch (config.averaging) {
        case Averaging::none:
            break;
        case Averaging::fixed:
            features.push_back({FeatureKind::aggregate, fixed_avg(e)});
            break;
        case Averaging::dense:
            features.push_back({FeatureKind::aggregate, dense_avg(e, params.h_dense)});
            break;
        case Averaging::selfattn:
            features.push_back({FeatureKind::aggregate, self_attn_avg(e, params.h1, params.h2)});
            break;
    }
    if (config.use_sigma) {
        features.push_back({FeatureKind::sigma, std_dev_feature(e)});
    }
    return features;
}

}  // namespace mism
