#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mism/aggregate.hpp"

namespace mism {

// Attribute axes spanning the synthetic concept space. Every image carries
// one attribute per axis; a group shares a subset of axes (its "theme") and
// the caption names the shared attributes in axis order.
struct ConceptAxis {
    std::string name;
    std::vector<std::string> attributes;
    double noise_scale = 0.1;
};

struct ConceptSpace {
    int64_t k = 16;
    std::vector<ConceptAxis> axes;
    // directions[axis][attribute] is a unit K-vector.
    std::vector<std::vector<std::vector<double>>> directions;

    void build_directions(uint64_t seed);
    void validate() const;
    const std::vector<double>& direction(size_t axis, size_t attribute) const;
    // Sum of the shared attribute direction vectors.
    std::vector<double> concept_point(const std::vector<std::pair<size_t, size_t>>& shared) const;

    static ConceptSpace make_default(int64_t k, uint64_t seed);
};

struct DatasetRecord {
    ImageGroup group;
    std::string split;  // train | valid | test
};

struct GeneratorConfig {
    int64_t n_train = 2000;
    int64_t n_valid = 200;
    int64_t n_test = 200;
    int64_t n_images_min = 5;
    int64_t n_images_max = 20;
    uint64_t seed = 0;
    int64_t shared_axes_min = 1;
    int64_t shared_axes_max = 2;
    // Fraction of images given dimensions that violate the group filters, and
    // fraction of captions prefixed with an entity string, to exercise the
    // filtering stage.
    double p_bad_image = 0.0;
    double p_entity_prefix = 0.0;
    std::string entity_prefix = "acme";
};

struct FilterConfig {
    int64_t min_images = 5;
    double max_aspect_ratio = 3.0;  // longer side over shorter side
    int64_t min_dimension_px = 100;
    std::vector<std::string> entity_stoplist;
    bool require_label_tag_match = false;
};

std::vector<DatasetRecord> generate_synthetic_dataset(const ConceptSpace& space,
                                                      const GeneratorConfig& config);

// Drops groups that are too small or contain any image violating the
// dimension/aspect limits; deletes stoplist substrings from captions (empty
// captions drop the group); optionally requires a caption token to appear in
// the union of image tags.
std::vector<DatasetRecord> apply_group_filters(const std::vector<DatasetRecord>& records,
                                               const FilterConfig& config);

// One (embedding, caption) pair per image, shaped as a 1-image group whose
// caption is that image's full attribute phrase.
std::vector<DatasetRecord> make_single_image_dataset(const std::vector<DatasetRecord>& records);

void save_jsonl(const std::vector<DatasetRecord>& records, const std::string& path);
std::vector<DatasetRecord> load_jsonl(const std::string& path);

std::string record_to_json_line(const DatasetRecord& record);
DatasetRecord record_from_json_line(const std::string& line);

// Per-split summary: size, average aspect ratio, image height/width, caption
// bytes, caption tokens, images per group.
nlohmann::json dataset_stats(const std::vector<DatasetRecord>& records);

}  // namespace mism
