#include "mism/model.hpp"

#include <cmath>

#include "mism/error.hpp"
#include "mism/rng.hpp"
#include "mism/tokenize.hpp"

namespace mism {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kInitStddev = 0.02;
constexpr double kMaskValue = -1e30;

}  // namespace

void ModelConfig::validate() const {
    if (k < 1 || d_model < 1 || n_heads < 1 || n_enc_layers < 1 || n_dec_layers < 1 || d_ff < 1 ||
        vocab_size < 4 || max_len < 1 || n_model < 1) {
        throw ConfigError("model config fields must be positive (vocab_size >= 4)");
    }
    if (d_model % n_heads != 0) {
        throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                          std::to_string(n_heads) + ")");
    }
    feature.validate();
}

nlohmann::json ModelConfig::to_json() const {
    return nlohmann::json{
        {"k", k},
        {"d_model", d_model},
        {"n_heads", n_heads},
        {"n_enc_layers", n_enc_layers},
        {"n_dec_layers", n_dec_layers},
        {"d_ff", d_ff},
        {"vocab_size", vocab_size},
        {"max_len", max_len},
        {"n_model", n_model},
        {"m_agg", m_agg},
        {"feature",
         {{"use_individual", feature.use_individual},
          {"averaging", averaging_name(feature.averaging)},
          {"use_sigma", feature.use_sigma}}},
    };
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.k = j.at("k").get<int64_t>();
    c.d_model = j.at("d_model").get<int64_t>();
    c.n_heads = j.at("n_heads").get<int64_t>();
    c.n_enc_layers = j.at("n_enc_layers").get<int64_t>();
    c.n_dec_layers = j.at("n_dec_layers").get<int64_t>();
    c.d_ff = j.at("d_ff").get<int64_t>();
    c.vocab_size = j.at("vocab_size").get<int64_t>();
    c.max_len = j.at("max_len").get<int64_t>();
    c.n_model = j.at("n_model").get<int64_t>();
    c.m_agg = j.at("m_agg").get<int64_t>();
    const auto& f = j.at("feature");
    c.feature.use_individual = f.at("use_individual").get<bool>();
    c.feature.averaging = averaging_from_name(f.at("averaging").get<std::string>());
    c.feature.use_sigma = f.at("use_sigma").get<bool>();
    return c;
}

Tensor& ModelParameters::at(const std::string& name) {
    auto it = named.find(name);
    if (it == named.end()) {
        throw ContractError("unknown parameter '" + name + "'");
    }
    return it->second;
}

const Tensor& ModelParameters::at(const std::string& name) const {
    auto it = named.find(name);
    if (it == named.end()) {
        throw ContractError("unknown parameter '" + name + "'");
    }
    return it->second;
}

void ModelParameters::zero_grads() {
    for (auto& [name, t] : named) {
        t.ensure_zero_grad();
    }
}

namespace {

Tensor init_tensor(Shape shape, Rng& rng, bool zero = false) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    if (!zero) {
        for (auto& v : t.values()) {
            v = rng.truncated_normal(kInitStddev);
        }
    }
    return t;
}

void add_attention_params(ModelParameters& p, const std::string& prefix, int64_t d, Rng& rng) {
    p.named[prefix + ".wq"] = init_tensor({d, d}, rng);
    p.named[prefix + ".bq"] = init_tensor({d}, rng, true);
    p.named[prefix + ".wk"] = init_tensor({d, d}, rng);
    p.named[prefix + ".bk"] = init_tensor({d}, rng, true);
    p.named[prefix + ".wv"] = init_tensor({d, d}, rng);
    p.named[prefix + ".bv"] = init_tensor({d}, rng, true);
    p.named[prefix + ".wo"] = init_tensor({d, d}, rng);
    p.named[prefix + ".bo"] = init_tensor({d}, rng, true);
}

void add_layer_norm_params(ModelParameters& p, const std::string& prefix, int64_t d) {
    Tensor gain = Tensor::full({d}, 1.0, true);
    Tensor bias = Tensor::zeros({d}, true);
    p.named[prefix + ".g"] = gain;
    p.named[prefix + ".b"] = bias;
}

void add_ffn_params(ModelParameters& p, const std::string& prefix, int64_t d, int64_t d_ff,
                    Rng& rng) {
    p.named[prefix + ".w1"] = init_tensor({d, d_ff}, rng);
    p.named[prefix + ".b1"] = init_tensor({d_ff}, rng, true);
    p.named[prefix + ".w2"] = init_tensor({d_ff, d}, rng);
    p.named[prefix + ".b2"] = init_tensor({d}, rng, true);
}

}  // namespace

ModelParameters init_parameters(const ModelConfig& config, uint64_t seed) {
    config.validate();
    Rng rng(mix_seed(seed, 0x6d69736dULL));
    ModelParameters p;
    const int64_t d = config.d_model;

    p.named["feat_proj.w"] = init_tensor({config.k, d}, rng);
    p.named["feat_proj.b"] = init_tensor({d}, rng, true);
    p.named["slot_embed"] = init_tensor({3, d}, rng);
    p.named["pos_embed"] = init_tensor({config.n_model, d}, rng);
    p.named["tok_embed"] = init_tensor({config.vocab_size, d}, rng);
    p.named["dec_pos_embed"] = init_tensor({config.max_len + 2, d}, rng);

    for (int64_t l = 0; l < config.n_enc_layers; ++l) {
        const std::string prefix = "enc." + std::to_string(l);
        add_layer_norm_params(p, prefix + ".ln1", d);
        add_attention_params(p, prefix + ".attn", d, rng);
        add_layer_norm_params(p, prefix + ".ln2", d);
        add_ffn_params(p, prefix + ".ffn", d, config.d_ff, rng);
    }
    add_layer_norm_params(p, "enc.final_ln", d);

    for (int64_t l = 0; l < config.n_dec_layers; ++l) {
        const std::string prefix = "dec." + std::to_string(l);
        add_layer_norm_params(p, prefix + ".ln1", d);
        add_attention_params(p, prefix + ".self", d, rng);
        add_layer_norm_params(p, prefix + ".ln2", d);
        add_attention_params(p, prefix + ".cross", d, rng);
        add_layer_norm_params(p, prefix + ".ln3", d);
        add_ffn_params(p, prefix + ".ffn", d, config.d_ff, rng);
    }
    add_layer_norm_params(p, "dec.final_ln", d);

    p.named["out_proj.w"] = init_tensor({d, config.vocab_size}, rng);
    p.named["out_proj.b"] = init_tensor({config.vocab_size}, rng, true);

    p.named["agg.h_dense"] = init_tensor({config.n_model, config.k * config.n_model}, rng);
    p.named["agg.h1"] = init_tensor({config.k, config.agg_dim()}, rng);
    p.named["agg.h2"] = init_tensor({config.k, config.agg_dim()}, rng);
    return p;
}

AggregationParams aggregation_params(const ModelParameters& params) {
    return AggregationParams{params.at("agg.h_dense"), params.at("agg.h1"), params.at("agg.h2")};
}

namespace {

struct AttnWeights {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

AttnWeights attn_weights(const ModelParameters& p, const std::string& prefix) {
    return AttnWeights{p.at(prefix + ".wq"), p.at(prefix + ".bq"), p.at(prefix + ".wk"),
                       p.at(prefix + ".bk"), p.at(prefix + ".wv"), p.at(prefix + ".bv"),
                       p.at(prefix + ".wo"), p.at(prefix + ".bo")};
}

Tensor multi_head_attention(const Tensor& x_q, const Tensor& x_kv, const AttnWeights& w,
                            int64_t n_heads, const Tensor* additive_mask, EncodeTrace* trace) {
    const int64_t d = x_q.extent(1);
    const int64_t d_head = d / n_heads;
    Tensor q = add_rowwise(matmul(x_q, w.wq), w.bq);
    Tensor k = add_rowwise(matmul(x_kv, w.wk), w.bk);
    Tensor v = add_rowwise(matmul(x_kv, w.wv), w.bv);
    std::vector<Tensor> heads;
    heads.reserve(static_cast<size_t>(n_heads));
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d_head));
    for (int64_t h = 0; h < n_heads; ++h) {
        Tensor qh = slice_cols(q, h * d_head, (h + 1) * d_head);
        Tensor kh = slice_cols(k, h * d_head, (h + 1) * d_head);
        Tensor vh = slice_cols(v, h * d_head, (h + 1) * d_head);
        Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
        if (additive_mask != nullptr) {
            scores = add(scores, *additive_mask);
        }
        Tensor attn = softmax(scores, 1);
        if (trace != nullptr) {
            trace->attention.push_back(attn);
        }
        heads.push_back(matmul(attn, vh));
    }
    return add_rowwise(matmul(concat_cols(heads), w.wo), w.bo);
}

Tensor feed_forward(const Tensor& x, const ModelParameters& p, const std::string& prefix) {
    Tensor h = gelu(add_rowwise(matmul(x, p.at(prefix + ".w1")), p.at(prefix + ".b1")));
    return add_rowwise(matmul(h, p.at(prefix + ".w2")), p.at(prefix + ".b2"));
}

Tensor norm(const Tensor& x, const ModelParameters& p, const std::string& prefix) {
    return layer_norm(x, p.at(prefix + ".g"), p.at(prefix + ".b"), kLayerNormEps);
}

Tensor causal_mask(int64_t t) {
    Tensor m = Tensor::zeros({t, t});
    for (int64_t i = 0; i < t; ++i) {
        for (int64_t j = i + 1; j < t; ++j) {
            m.values()[static_cast<size_t>(i * t + j)] = kMaskValue;
        }
    }
    return m;
}

}  // namespace

Tensor encode(const std::vector<EncoderFeature>& features, const ModelParameters& params,
              const ModelConfig& config, EncodeTrace* trace) {
    if (features.empty()) {
        throw ContractError("encode: need at least one feature");
    }
    std::vector<Tensor> rows;
    std::vector<int> kinds;
    std::vector<int> positions;
    int next_position = 0;
    for (const EncoderFeature& f : features) {
        if (f.vec.rank() != 1 || f.vec.extent(0) != config.k) {
            throw DimensionError("encode: feature dimension " + shape_to_string(f.vec.shape()) +
                                 " does not match K=" + std::to_string(config.k));
        }
        rows.push_back(f.vec);
        kinds.push_back(static_cast<int>(f.kind));
        // Positional embeddings attach to individual-image features only.
        if (f.kind == FeatureKind::individual) {
            positions.push_back(next_position++);
        } else {
            positions.push_back(-1);
        }
    }
    Tensor projected = add_rowwise(matmul(stack_rows(rows), params.at("feat_proj.w")),
                                   params.at("feat_proj.b"));
    Tensor x = add(projected, embed_rows(params.at("slot_embed"), kinds));
    x = add(x, embed_rows(params.at("pos_embed"), positions));
    for (int64_t l = 0; l < config.n_enc_layers; ++l) {
        const std::string prefix = "enc." + std::to_string(l);
        Tensor normed = norm(x, params, prefix + ".ln1");
        x = add(x, multi_head_attention(normed, normed, attn_weights(params, prefix + ".attn"),
                                        config.n_heads, nullptr, trace));
        x = add(x, feed_forward(norm(x, params, prefix + ".ln2"), params, prefix + ".ffn"));
    }
    return norm(x, params, "enc.final_ln");
}

Tensor decode_logits(const Tensor& encoder_output, const std::vector<int>& prefix,
                     const ModelParameters& params, const ModelConfig& config) {
    if (prefix.empty() || prefix.front() != Vocab::bos_id) {
        throw ContractError("decode: prefix must start with BOS");
    }
    const int64_t t = static_cast<int64_t>(prefix.size());
    if (t > config.max_len + 1) {
        throw ContractError("decode: prefix length " + std::to_string(t) +
                            " exceeds max_len + 1 = " + std::to_string(config.max_len + 1));
    }
    std::vector<int> pos_ids(prefix.size());
    for (size_t i = 0; i < prefix.size(); ++i) {
        pos_ids[i] = static_cast<int>(i);
    }
    Tensor x = add(embed_rows(params.at("tok_embed"), prefix),
                   embed_rows(params.at("dec_pos_embed"), pos_ids));
    Tensor mask = causal_mask(t);
    for (int64_t l = 0; l < config.n_dec_layers; ++l) {
        const std::string pfx = "dec." + std::to_string(l);
        Tensor normed = norm(x, params, pfx + ".ln1");
        x = add(x, multi_head_attention(normed, normed, attn_weights(params, pfx + ".self"),
                                        config.n_heads, &mask, nullptr));
        x = add(x, multi_head_attention(norm(x, params, pfx + ".ln2"), encoder_output,
                                        attn_weights(params, pfx + ".cross"), config.n_heads,
                                        nullptr, nullptr));
        x = add(x, feed_forward(norm(x, params, pfx + ".ln3"), params, pfx + ".ffn"));
    }
    x = norm(x, params, "dec.final_ln");
    return add_rowwise(matmul(x, params.at("out_proj.w")), params.at("out_proj.b"));
}

Tensor decode_step(const Tensor& encoder_output, const std::vector<int>& prefix,
                   const ModelParameters& params, const ModelConfig& config) {
    Tensor logits = decode_logits(encoder_output, prefix, params, config);
    return row(logits, logits.extent(0) - 1);
}

Tensor mle_loss(const std::vector<PreparedExample>& batch, const ModelParameters& params,
                const ModelConfig& config) {
    if (batch.empty()) {
        throw ContractError("mle_loss: empty batch");
    }
    const AggregationParams agg = aggregation_params(params);
    Tensor total;
    int64_t positions = 0;
    for (const PreparedExample& ex : batch) {
        if (static_cast<int64_t>(ex.content_ids.size()) > config.max_len) {
            throw ContractError("mle_loss: caption longer than max_len");
        }
        const std::vector<EncoderFeature> features =
            build_encoder_features(ex.group, config.feature, agg);
        Tensor enc = encode(features, params, config);
        std::vector<int> input;
        input.reserve(ex.content_ids.size() + 1);
        input.push_back(Vocab::bos_id);
        input.insert(input.end(), ex.content_ids.begin(), ex.content_ids.end());
        std::vector<int> targets = ex.content_ids;
        targets.push_back(Vocab::eos_id);
        Tensor logits = decode_logits(enc, input, params, config);
        Tensor nll = nll_pick_sum(log_softmax(logits, 1), targets);
        positions += static_cast<int64_t>(targets.size());
        total = total.defined() ? add(total, nll) : nll;
    }
    return scale(total, 1.0 / static_cast<double>(positions));
}

}  // namespace mism
