#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "bda/scene.hpp"

namespace bda::data {

// A building outline in pixel coordinates (x right, y down; pixel (x, y)
// covers [x, x+1) x [y, y+1)). damage_class lies in {1..4}.
struct PolygonAnnotation {
    std::vector<std::pair<double, double>> vertices;
    int damage_class = 1;
};

// Pixels whose centre lies inside a polygon (even-odd rule) take its class;
// overlaps keep the higher class. Polygons with fewer than 3 distinct
// vertices are skipped with a warning.
DamageMask rasterize_annotations(const std::vector<PolygonAnnotation>& annotations, std::size_t height,
                                 std::size_t width);

// Textured background with non-overlapping rectangular buildings; the post
// image renders each building's damage (1 unchanged, 2 darkened, 3 speckled,
// 4 removed). Images are quantised to k/255 so they survive 8-bit storage.
ScenePair generate_synthetic_pair(std::uint64_t seed, std::size_t size, std::size_t n_buildings);
std::string synthetic_id(std::size_t index);
// count pairs; pair i uses seed derive_seed(seed, i).
std::vector<ScenePair> generate_synthetic_set(std::size_t count, std::uint64_t seed, std::size_t size,
                                              std::size_t n_buildings);

struct DatasetManifest {
    std::vector<ScenePair> pairs;  // unlabeled pairs carry an all-zero mask
    std::vector<std::string> labeled_ids;
    std::vector<std::string> reports;  // exclusions and demotions found while loading

    bool is_labeled(const std::string& id) const;
    std::vector<ScenePair> labeled_pairs() const;
    void validate() const;
};

DatasetManifest manifest_from_pairs(std::vector<ScenePair> pairs);

struct LoadOptions {
    int unclassified_class = 1;  // class given to the "un-classified" subtype
};

// Reads images/<id>_{pre,post}_disaster.png and labels/<id>_post_disaster.json.
DatasetManifest load_dataset(const std::filesystem::path& root, const LoadOptions& options = {});

// Writes labeled pairs in the same layout (unlabeled ones get no label file).
void export_dataset(const DatasetManifest& manifest, const std::filesystem::path& root);

// Label record helpers. Masks are encoded as rectangles built from row runs,
// so any mask survives export and reload exactly.
std::vector<PolygonAnnotation> mask_to_polygons(const DamageMask& mask);
std::vector<PolygonAnnotation> parse_label_record(const std::string& json_text, const LoadOptions& options = {});
std::string make_label_record(const std::vector<PolygonAnnotation>& polygons, bool with_subtype);

// Keeps ceil(fraction * N) randomly chosen labeled ids; the rest become unlabeled.
DatasetManifest split_labeled(const DatasetManifest& manifest, double fraction, std::uint64_t seed);

// Splits the pair list into (train, held-out) by id; the held-out part holds
// round(fraction * N) pairs, at least one when N > 1.
std::pair<std::vector<ScenePair>, std::vector<ScenePair>> holdout_split(const std::vector<ScenePair>& pairs,
                                                                        double fraction, std::uint64_t seed);

}  // namespace bda::data
