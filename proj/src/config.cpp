#include "mism/config.hpp"

#include <fstream>
#include <set>

#include "mism/error.hpp"

namespace mism {

namespace {

void check_keys(const nlohmann::json& obj, const std::set<std::string>& allowed,
                const std::string& section) {
    if (!obj.is_object()) {
        throw ConfigError("config section '" + section + "' must be an object");
    }
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (!allowed.count(it.key())) {
            throw ConfigError("unknown config key: " + section + "." + it.key());
        }
    }
}

template <typename T>
void read_into(const nlohmann::json& obj, const char* key, T& out) {
    if (obj.contains(key)) {
        out = obj.at(key).get<T>();
    }
}

// model.k always follows data.k, so the section does not accept "k".
void parse_model(const nlohmann::json& j, ModelConfig& m) {
    check_keys(j, {"d_model", "n_heads", "n_enc_layers", "n_dec_layers", "d_ff", "max_len",
                   "n_model", "m_agg", "feature"},
               "model");
    read_into(j, "d_model", m.d_model);
    read_into(j, "n_heads", m.n_heads);
    read_into(j, "n_enc_layers", m.n_enc_layers);
    read_into(j, "n_dec_layers", m.n_dec_layers);
    read_into(j, "d_ff", m.d_ff);
    read_into(j, "max_len", m.max_len);
    read_into(j, "n_model", m.n_model);
    read_into(j, "m_agg", m.m_agg);
    if (j.contains("feature")) {
        const auto& f = j.at("feature");
        check_keys(f, {"use_individual", "averaging", "use_sigma"}, "model.feature");
        read_into(f, "use_individual", m.feature.use_individual);
        if (f.contains("averaging")) {
            m.feature.averaging = averaging_from_name(f.at("averaging").get<std::string>());
        }
        read_into(f, "use_sigma", m.feature.use_sigma);
    }
}

void parse_train(const nlohmann::json& j, TrainConfig& t, const std::string& section) {
    check_keys(j, {"lr", "batch_size", "patience_steps", "eval_every", "max_steps", "seed", "beam",
                   "strict_numerics"},
               section);
    read_into(j, "lr", t.lr);
    read_into(j, "batch_size", t.batch_size);
    read_into(j, "patience_steps", t.patience_steps);
    read_into(j, "eval_every", t.eval_every);
    read_into(j, "max_steps", t.max_steps);
    read_into(j, "seed", t.seed);
    read_into(j, "beam", t.beam);
    read_into(j, "strict_numerics", t.strict_numerics);
}

}  // namespace

RunConfig RunConfig::defaults() {
    RunConfig c;
    c.model.k = c.data_k;
    return c;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    check_keys(j, {"model", "train", "pretrain", "data", "filter", "tokenizer"}, "config");
    RunConfig c;
    if (j.contains("model")) {
        parse_model(j.at("model"), c.model);
    }
    if (j.contains("train")) {
        parse_train(j.at("train"), c.train, "train");
    }
    c.pretrain = c.train;
    if (j.contains("pretrain")) {
        parse_train(j.at("pretrain"), c.pretrain, "pretrain");
    }
    if (j.contains("data")) {
        const auto& d = j.at("data");
        check_keys(d,
                   {"n_train", "n_valid", "n_test", "k", "n_images_min", "n_images_max", "seed",
                    "shared_axes_min", "shared_axes_max", "p_bad_image", "p_entity_prefix",
                    "entity_prefix", "axes"},
                   "data");
        read_into(d, "n_train", c.data.n_train);
        read_into(d, "n_valid", c.data.n_valid);
        read_into(d, "n_test", c.data.n_test);
        read_into(d, "k", c.data_k);
        read_into(d, "n_images_min", c.data.n_images_min);
        read_into(d, "n_images_max", c.data.n_images_max);
        read_into(d, "seed", c.data.seed);
        read_into(d, "shared_axes_min", c.data.shared_axes_min);
        read_into(d, "shared_axes_max", c.data.shared_axes_max);
        read_into(d, "p_bad_image", c.data.p_bad_image);
        read_into(d, "p_entity_prefix", c.data.p_entity_prefix);
        read_into(d, "entity_prefix", c.data.entity_prefix);
        if (d.contains("axes")) {
            c.axes = d.at("axes");
        }
    }
    if (j.contains("filter")) {
        const auto& f = j.at("filter");
        check_keys(f,
                   {"min_images", "max_aspect_ratio", "min_dimension_px", "entity_stoplist",
                    "require_label_tag_match"},
                   "filter");
        read_into(f, "min_images", c.filter.min_images);
        read_into(f, "max_aspect_ratio", c.filter.max_aspect_ratio);
        read_into(f, "min_dimension_px", c.filter.min_dimension_px);
        read_into(f, "entity_stoplist", c.filter.entity_stoplist);
        read_into(f, "require_label_tag_match", c.filter.require_label_tag_match);
    }
    if (j.contains("tokenizer")) {
        const auto& t = j.at("tokenizer");
        check_keys(t, {"min_freq", "max_vocab"}, "tokenizer");
        read_into(t, "min_freq", c.tokenizer_min_freq);
        read_into(t, "max_vocab", c.tokenizer_max_vocab);
    }
    c.model.k = c.data_k;
    c.validate();
    return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open config file: " + path);
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config parse error in " + path + ": " + e.what());
    }
    return from_json(j);
}

ConceptSpace RunConfig::concept_space() const {
    if (axes.is_null()) {
        return ConceptSpace::make_default(data_k, data.seed);
    }
    ConceptSpace space;
    space.k = data_k;
    if (!axes.is_array() || axes.empty()) {
        throw ConfigError("data.axes must be a non-empty array");
    }
    for (const auto& axis_json : axes) {
        check_keys(axis_json, {"name", "attributes", "noise_scale"}, "data.axes[]");
        ConceptAxis axis;
        axis.name = axis_json.at("name").get<std::string>();
        axis.attributes = axis_json.at("attributes").get<std::vector<std::string>>();
        read_into(axis_json, "noise_scale", axis.noise_scale);
        space.axes.push_back(std::move(axis));
    }
    space.build_directions(data.seed);
    space.validate();
    return space;
}

void RunConfig::validate() const {
    train.validate();
    pretrain.validate();
    if (data_k < 1) {
        throw ConfigError("data.k must be positive");
    }
    if (model.k != data_k) {
        throw ConfigError("model.k (" + std::to_string(model.k) + ") must match data.k (" +
                          std::to_string(data_k) + ")");
    }
    if (tokenizer_min_freq < 1 || tokenizer_max_vocab < 5) {
        throw ConfigError("tokenizer settings out of range");
    }
}

}  // namespace mism
