#include "mism/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "mism/error.hpp"
#include "mism/rng.hpp"
#include "mism/tokenize.hpp"

namespace mism {

namespace {

// %.17g round-trips any double exactly.
std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string json_escaped(const std::string& s) { return nlohmann::json(s).dump(); }

double filter_aspect(const ImageMeta& m) {
    const double w = static_cast<double>(m.width);
    const double h = static_cast<double>(m.height);
    if (w <= 0.0 || h <= 0.0) {
        return std::numeric_limits<double>::infinity();
    }
    return std::max(w, h) / std::min(w, h);
}

}  // namespace

void ConceptSpace::build_directions(uint64_t seed) {
    directions.clear();
    directions.resize(axes.size());
    for (size_t a = 0; a < axes.size(); ++a) {
        directions[a].resize(axes[a].attributes.size());
        for (size_t t = 0; t < axes[a].attributes.size(); ++t) {
            Rng rng(mix_seed(seed, (a << 20) + t));
            std::vector<double> v(static_cast<size_t>(k));
            double norm2 = 0.0;
            for (auto& x : v) {
                x = rng.gaussian();
                norm2 += x * x;
            }
            const double inv = 1.0 / std::sqrt(norm2);
            for (auto& x : v) {
                x *= inv;
            }
            directions[a][t] = std::move(v);
        }
    }
}

void ConceptSpace::validate() const {
    if (axes.empty()) {
        throw ConfigError("concept space has no attribute axes");
    }
    std::set<std::string> names;
    for (const ConceptAxis& axis : axes) {
        if (axis.attributes.empty()) {
            throw ConfigError("concept axis '" + axis.name + "' has no attributes");
        }
        if (static_cast<int64_t>(axis.attributes.size()) > k) {
            throw ConfigError("embedding dimension " + std::to_string(k) +
                              " is too small for axis '" + axis.name + "' with " +
                              std::to_string(axis.attributes.size()) + " attributes");
        }
        for (const std::string& attr : axis.attributes) {
            if (!names.insert(attr).second) {
                throw ConfigError("duplicate attribute name '" + attr + "'");
            }
        }
    }
    if (directions.size() != axes.size()) {
        throw ConfigError("concept space directions not built");
    }
}

const std::vector<double>& ConceptSpace::direction(size_t axis, size_t attribute) const {
    return directions[axis][attribute];
}

std::vector<double> ConceptSpace::concept_point(
    const std::vector<std::pair<size_t, size_t>>& shared) const {
    std::vector<double> p(static_cast<size_t>(k), 0.0);
    for (const auto& [axis, attr] : shared) {
        const auto& d = direction(axis, attr);
        for (size_t j = 0; j < p.size(); ++j) {
            p[j] += d[j];
        }
    }
    return p;
}

ConceptSpace ConceptSpace::make_default(int64_t k, uint64_t seed) {
    ConceptSpace s;
    s.k = k;
    s.axes = {
        {"style", {"vintage", "modern", "handmade", "classic"}, 0.1},
        {"material", {"copper", "gold", "silver", "leather", "wool", "glass"}, 0.1},
        {"category", {"ring", "mug", "bag", "lamp", "scarf", "vase", "hat", "chair"}, 0.1},
    };
    s.build_directions(seed);
    s.validate();
    return s;
}

std::vector<DatasetRecord> generate_synthetic_dataset(const ConceptSpace& space,
                                                      const GeneratorConfig& config) {
    space.validate();
    if (config.n_images_min < 1 || config.n_images_max < config.n_images_min) {
        throw ConfigError("generator: bad images-per-group range");
    }
    const int64_t n_axes = static_cast<int64_t>(space.axes.size());
    const int64_t shared_min = std::clamp<int64_t>(config.shared_axes_min, 1, n_axes);
    const int64_t shared_max = std::clamp<int64_t>(config.shared_axes_max, shared_min, n_axes);
    const int64_t total = config.n_train + config.n_valid + config.n_test;

    std::vector<DatasetRecord> records;
    records.reserve(static_cast<size_t>(total));
    for (int64_t g = 0; g < total; ++g) {
        Rng rng(mix_seed(config.seed, static_cast<uint64_t>(g)));
        const int64_t n_images =
            config.n_images_min + rng.uniform_int(config.n_images_max - config.n_images_min + 1);

        // Pick the shared axes (the group's theme) and one attribute on each.
        const int64_t n_shared = shared_min + rng.uniform_int(shared_max - shared_min + 1);
        std::vector<int64_t> axis_order(static_cast<size_t>(n_axes));
        for (int64_t a = 0; a < n_axes; ++a) {
            axis_order[static_cast<size_t>(a)] = a;
        }
        rng.shuffle(axis_order);
        axis_order.resize(static_cast<size_t>(n_shared));
        std::sort(axis_order.begin(), axis_order.end());
        std::vector<int64_t> shared_attr(static_cast<size_t>(n_axes), -1);
        for (int64_t a : axis_order) {
            shared_attr[static_cast<size_t>(a)] = rng.uniform_int(
                static_cast<int64_t>(space.axes[static_cast<size_t>(a)].attributes.size()));
        }

        DatasetRecord rec;
        char id[32];
        std::snprintf(id, sizeof(id), "g%06lld", static_cast<long long>(g));
        rec.group.group_id = id;
        rec.group.k = space.k;
        rec.group.n = n_images;

        std::string caption;
        for (int64_t a : axis_order) {
            if (!caption.empty()) {
                caption += ' ';
            }
            caption += space.axes[static_cast<size_t>(a)]
                           .attributes[static_cast<size_t>(shared_attr[static_cast<size_t>(a)])];
        }
        if (config.p_entity_prefix > 0.0 && rng.uniform01() < config.p_entity_prefix) {
            caption = config.entity_prefix + " " + caption;
        }
        rec.group.caption = caption;

        for (int64_t i = 0; i < n_images; ++i) {
            std::vector<double> emb(static_cast<size_t>(space.k), 0.0);
            ImageMeta meta;
            for (int64_t a = 0; a < n_axes; ++a) {
                const auto& axis = space.axes[static_cast<size_t>(a)];
                int64_t attr = shared_attr[static_cast<size_t>(a)];
                if (attr < 0) {
                    attr = rng.uniform_int(static_cast<int64_t>(axis.attributes.size()));
                }
                const auto& dir = space.direction(static_cast<size_t>(a),
                                                  static_cast<size_t>(attr));
                for (size_t j = 0; j < emb.size(); ++j) {
                    emb[j] += dir[j] + axis.noise_scale * rng.gaussian();
                }
                meta.tags.push_back(axis.attributes[static_cast<size_t>(attr)]);
            }
            meta.height = static_cast<int>(std::clamp(std::lround(rng.gaussian(540.0, 120.0)),
                                                      110L, 1400L));
            meta.width = static_cast<int>(std::clamp(std::lround(rng.gaussian(495.0, 110.0)),
                                                     110L, 1400L));
            if (config.p_bad_image > 0.0 && rng.uniform01() < config.p_bad_image) {
                if (rng.uniform01() < 0.5) {
                    meta.width = 80;  // below the dimension floor
                } else {
                    meta.width = 420;  // aspect ratio 3.5
                    meta.height = 120;
                }
            }
            rec.group.embeddings.insert(rec.group.embeddings.end(), emb.begin(), emb.end());
            rec.group.image_meta.push_back(std::move(meta));
        }
        rec.split = g < config.n_train              ? "train"
                    : g < config.n_train + config.n_valid ? "valid"
                                                          : "test";
        records.push_back(std::move(rec));
    }
    return records;
}

std::vector<DatasetRecord> apply_group_filters(const std::vector<DatasetRecord>& records,
                                               const FilterConfig& config) {
    std::vector<DatasetRecord> out;
    for (const DatasetRecord& rec : records) {
        if (rec.group.n < config.min_images) {
            continue;
        }
        bool images_ok = true;
        for (const ImageMeta& m : rec.group.image_meta) {
            if (m.width <= config.min_dimension_px || m.height <= config.min_dimension_px ||
                filter_aspect(m) > config.max_aspect_ratio) {
                images_ok = false;
                break;
            }
        }
        if (!images_ok) {
            continue;
        }
        DatasetRecord kept = rec;
        for (const std::string& entity : config.entity_stoplist) {
            if (entity.empty()) {
                continue;
            }
            std::string& caption = kept.group.caption;
            size_t pos = 0;
            while ((pos = caption.find(entity, pos)) != std::string::npos) {
                caption.erase(pos, entity.size());
            }
        }
        // Collapse whitespace left behind by deletions.
        {
            const std::vector<std::string> tokens = split_lower_tokens(kept.group.caption);
            std::string rebuilt;
            for (const std::string& t : tokens) {
                if (!rebuilt.empty()) {
                    rebuilt += ' ';
                }
                rebuilt += t;
            }
            kept.group.caption = rebuilt;
        }
        if (kept.group.caption.empty()) {
            continue;
        }
        if (config.require_label_tag_match) {
            std::set<std::string> tag_union;
            for (const ImageMeta& m : kept.group.image_meta) {
                tag_union.insert(m.tags.begin(), m.tags.end());
            }
            bool match = false;
            for (const std::string& token : split_lower_tokens(kept.group.caption)) {
                if (tag_union.count(token)) {
                    match = true;
                    break;
                }
            }
            if (!match) {
                continue;
            }
        }
        out.push_back(std::move(kept));
    }
    return out;
}

std::vector<DatasetRecord> make_single_image_dataset(const std::vector<DatasetRecord>& records) {
    std::vector<DatasetRecord> out;
    for (const DatasetRecord& rec : records) {
        for (int64_t i = 0; i < rec.group.n; ++i) {
            DatasetRecord pair;
            pair.split = rec.split;
            pair.group.group_id = rec.group.group_id + "#" + std::to_string(i);
            pair.group.k = rec.group.k;
            pair.group.n = 1;
            pair.group.embeddings.assign(
                rec.group.embeddings.begin() + i * rec.group.k,
                rec.group.embeddings.begin() + (i + 1) * rec.group.k);
            const ImageMeta& meta = rec.group.image_meta[static_cast<size_t>(i)];
            pair.group.image_meta.push_back(meta);
            // The image's own attribute phrase, more specific than the group caption.
            std::string caption;
            for (const std::string& tag : meta.tags) {
                if (!caption.empty()) {
                    caption += ' ';
                }
                caption += tag;
            }
            pair.group.caption = caption;
            out.push_back(std::move(pair));
        }
    }
    return out;
}

std::string record_to_json_line(const DatasetRecord& record) {
    std::ostringstream out;
    out << "{\"group_id\":" << json_escaped(record.group.group_id)
        << ",\"split\":" << json_escaped(record.split)
        << ",\"caption\":" << json_escaped(record.group.caption) << ",\"embeddings\":[";
    for (int64_t i = 0; i < record.group.n; ++i) {
        if (i) {
            out << ',';
        }
        out << '[';
        for (int64_t j = 0; j < record.group.k; ++j) {
            if (j) {
                out << ',';
            }
            out << format_double(record.group.at(i, j));
        }
        out << ']';
    }
    out << "],\"image_meta\":[";
    for (size_t i = 0; i < record.group.image_meta.size(); ++i) {
        const ImageMeta& m = record.group.image_meta[i];
        if (i) {
            out << ',';
        }
        out << "{\"width\":" << m.width << ",\"height\":" << m.height << ",\"tags\":[";
        for (size_t t = 0; t < m.tags.size(); ++t) {
            if (t) {
                out << ',';
            }
            out << json_escaped(m.tags[t]);
        }
        out << "]}";
    }
    out << "]}";
    return out.str();
}

DatasetRecord record_from_json_line(const std::string& line) {
    const nlohmann::json j = nlohmann::json::parse(line);
    DatasetRecord rec;
    rec.group.group_id = j.at("group_id").get<std::string>();
    rec.split = j.at("split").get<std::string>();
    if (rec.split != "train" && rec.split != "valid" && rec.split != "test") {
        throw DataError("unknown split '" + rec.split + "'");
    }
    rec.group.caption = j.at("caption").get<std::string>();
    const auto& emb = j.at("embeddings");
    if (!emb.is_array() || emb.empty()) {
        throw DataError("embeddings must be a non-empty array");
    }
    rec.group.n = static_cast<int64_t>(emb.size());
    rec.group.k = static_cast<int64_t>(emb[0].size());
    for (const auto& r : emb) {
        if (static_cast<int64_t>(r.size()) != rec.group.k) {
            throw DataError("embedding rows have inconsistent widths");
        }
        for (const auto& v : r) {
            rec.group.embeddings.push_back(v.get<double>());
        }
    }
    for (const auto& m : j.at("image_meta")) {
        ImageMeta meta;
        meta.width = m.at("width").get<int>();
        meta.height = m.at("height").get<int>();
        for (const auto& t : m.at("tags")) {
            meta.tags.push_back(t.get<std::string>());
        }
        rec.group.image_meta.push_back(std::move(meta));
    }
    rec.group.validate();
    return rec;
}

void save_jsonl(const std::vector<DatasetRecord>& records, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot open for writing: " + path);
    }
    for (const DatasetRecord& rec : records) {
        out << record_to_json_line(rec) << '\n';
    }
    if (!out) {
        throw IoError("write failed: " + path);
    }
}

std::vector<DatasetRecord> load_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open: " + path);
    }
    std::vector<DatasetRecord> records;
    std::string line;
    int64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        try {
            records.push_back(record_from_json_line(line));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
        } catch (const DataError& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return records;
}

nlohmann::json dataset_stats(const std::vector<DatasetRecord>& records) {
    if (records.empty()) {
        throw ContractError("dataset_stats: no records");
    }
    struct Acc {
        std::vector<double> aspect, height, width, caption_bytes, caption_tokens, num_images;
    };
    std::map<std::string, Acc> by_split;
    for (const DatasetRecord& rec : records) {
        Acc& acc = by_split[rec.split];
        for (const ImageMeta& m : rec.group.image_meta) {
            acc.aspect.push_back(static_cast<double>(m.width) / static_cast<double>(m.height));
            acc.height.push_back(static_cast<double>(m.height));
            acc.width.push_back(static_cast<double>(m.width));
        }
        acc.caption_bytes.push_back(static_cast<double>(rec.group.caption.size()));
        acc.caption_tokens.push_back(
            static_cast<double>(split_lower_tokens(rec.group.caption).size()));
        acc.num_images.push_back(static_cast<double>(rec.group.n));
    }
    auto mean = [](std::vector<double>& v) {
        if (v.empty()) {
            return 0.0;
        }
        std::sort(v.begin(), v.end());
        double s = 0.0;
        for (double x : v) {
            s += x;
        }
        return s / static_cast<double>(v.size());
    };
    nlohmann::json out;
    for (auto& [split, acc] : by_split) {
        out[split] = {
            {"size", acc.num_images.size()},
            {"avg_aspect_ratio", mean(acc.aspect)},
            {"avg_image_height", mean(acc.height)},
            {"avg_image_width", mean(acc.width)},
            {"avg_caption_bytes", mean(acc.caption_bytes)},
            {"avg_caption_tokens", mean(acc.caption_tokens)},
            {"avg_num_images", mean(acc.num_images)},
        };
    }
    return out;
}

}  // namespace mism
