#include "bda/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "bda/error.hpp"
#include "bda/image_io.hpp"
#include "bda/log.hpp"
#include "bda/rng.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace bda::data {

namespace {

constexpr const char* kPreSuffix = "_pre_disaster";
constexpr const char* kPostSuffix = "_post_disaster";

struct Rect {
    std::size_t x0, y0, x1, y1;  // half-open
};

bool separated(const Rect& a, const Rect& b) {
    // One empty pixel must lie between two buildings.
    return a.x1 + 1 <= b.x0 || b.x1 + 1 <= a.x0 || a.y1 + 1 <= b.y0 || b.y1 + 1 <= a.y0;
}

const char* subtype_name(int cls) {
    switch (cls) {
        case 1: return "no-damage";
        case 2: return "minor-damage";
        case 3: return "major-damage";
        case 4: return "destroyed";
        default: throw DataError("damage class " + std::to_string(cls) + " has no subtype name");
    }
}

int subtype_class(const std::string& s, const LoadOptions& options) {
    if (s == "no-damage") return 1;
    if (s == "minor-damage") return 2;
    if (s == "major-damage") return 3;
    if (s == "destroyed") return 4;
    if (s == "un-classified") return options.unclassified_class;
    throw DataError("unknown damage subtype '" + s + "'");
}

std::string format_number(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

// Outer ring of "POLYGON ((x y, x y, ...), (...))". Holes are dropped.
std::vector<std::pair<double, double>> parse_wkt_polygon(const std::string& wkt) {
    std::size_t p = wkt.find_first_not_of(" \t");
    if (p == std::string::npos || wkt.compare(p, 7, "POLYGON") != 0) {
        throw DataError("unsupported WKT geometry: " + wkt.substr(0, 32));
    }
    const std::size_t open = wkt.find("((", p);
    if (open == std::string::npos) throw DataError("malformed WKT polygon");
    const std::size_t close = wkt.find(')', open);
    if (close == std::string::npos) throw DataError("malformed WKT polygon");
    std::vector<std::pair<double, double>> pts;
    std::stringstream ring(wkt.substr(open + 2, close - open - 2));
    std::string vertex;
    while (std::getline(ring, vertex, ',')) {
        std::istringstream in(vertex);
        double x, y;
        if (!(in >> x >> y)) throw DataError("malformed WKT vertex '" + vertex + "'");
        std::string rest;
        if (in >> rest) throw DataError("malformed WKT vertex '" + vertex + "'");
        pts.emplace_back(x, y);
    }
    if (pts.size() > 1 && pts.front() == pts.back()) pts.pop_back();
    return pts;
}

std::string to_wkt(const std::vector<std::pair<double, double>>& pts) {
    std::string s = "POLYGON ((";
    for (std::size_t i = 0; i <= pts.size(); ++i) {
        const auto& [x, y] = pts[i % pts.size()];
        if (i) s += ", ";
        s += format_number(x) + " " + format_number(y);
    }
    return s + "))";
}

std::size_t distinct_vertices(const std::vector<std::pair<double, double>>& v) {
    std::set<std::pair<double, double>> s(v.begin(), v.end());
    return s.size();
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
    if (!out) throw DataError("failed writing " + path.string());
}

double to_level(double v) { return static_cast<double>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0; }

void report(DatasetManifest& m, std::string msg) {
    log::warn(msg);
    m.reports.push_back(std::move(msg));
}

}  // namespace

DamageMask rasterize_annotations(const std::vector<PolygonAnnotation>& annotations, std::size_t height,
                                 std::size_t width) {
    DamageMask mask(height, width);
    std::vector<double> xs;
    for (std::size_t a = 0; a < annotations.size(); ++a) {
        const auto& poly = annotations[a];
        if (poly.damage_class < 1 || poly.damage_class > 4) {
            throw DataError("polygon damage class " + std::to_string(poly.damage_class) + " outside {1..4}");
        }
        if (distinct_vertices(poly.vertices) < 3) {
            log::warn("skipping degenerate polygon " + std::to_string(a) + " (fewer than 3 distinct vertices)");
            continue;
        }
        const auto cls = static_cast<std::uint8_t>(poly.damage_class);
        const auto& v = poly.vertices;
        const std::size_t n = v.size();
        for (std::size_t y = 0; y < height; ++y) {
            const double cy = static_cast<double>(y) + 0.5;
            xs.clear();
            for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
                const auto [xi, yi] = v[i];
                const auto [xj, yj] = v[j];
                if ((yi > cy) != (yj > cy)) xs.push_back((xj - xi) * (cy - yi) / (yj - yi) + xi);
            }
            std::sort(xs.begin(), xs.end());
            // A centre is inside when an odd number of crossings lie to its right.
            for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
                const double lo = std::max(0.0, std::ceil(xs[k] - 0.5));
                for (double px = lo; px < static_cast<double>(width); ++px) {
                    const double cx = px + 0.5;
                    if (!(cx < xs[k + 1])) break;
                    if (cx < xs[k]) continue;
                    auto& dst = mask.at(y, static_cast<std::size_t>(px));
                    dst = std::max(dst, cls);
                }
            }
        }
    }
    return mask;
}

ScenePair generate_synthetic_pair(std::uint64_t seed, std::size_t size, std::size_t n_buildings) {
    if (size < 32) throw ConfigError("synthetic scenes need size >= 32, got " + std::to_string(size));
    Rng rng(derive_seed(seed, 0x5CE7E));
    const double two_pi = 2.0 * std::numbers::pi;

    // Background: tinted ground with two low-frequency waves and fine grain.
    Tensor bg({3, size, size});
    double base[3];
    for (double& b : base) b = rng.uniform(0.18, 0.28);
    const double f1x = rng.uniform(1.0, 4.0) * two_pi / double(size), f1y = rng.uniform(1.0, 4.0) * two_pi / double(size);
    const double f2x = rng.uniform(1.0, 4.0) * two_pi / double(size), f2y = rng.uniform(1.0, 4.0) * two_pi / double(size);
    const double ph1 = rng.uniform(0.0, two_pi), ph2 = rng.uniform(0.0, two_pi);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const double wave = 0.05 * std::sin(f1x * double(x) + f1y * double(y) + ph1) +
                                0.03 * std::sin(f2x * double(x) - f2y * double(y) + ph2);
            for (std::size_t c = 0; c < 3; ++c)
                bg.at(c, y, x) = std::clamp(base[c] + wave + 0.025 * rng.normal(), 0.05, 0.45);
        }
    bg = io::quantize(bg);

    ScenePair pair;
    pair.id = "synthetic-" + std::to_string(seed);
    pair.pre = bg;
    pair.post = bg;
    pair.damage = DamageMask(size, size);

    const int lo = static_cast<int>(std::max<std::size_t>(4, size / 10));
    const int hi = static_cast<int>(std::max<std::size_t>(5, size / 4));
    std::vector<Rect> placed;
    std::size_t dropped = 0;
    for (std::size_t b = 0; b < n_buildings; ++b) {
        bool ok = false;
        Rect r{};
        for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
            const auto w = static_cast<std::size_t>(rng.uniform_int(lo, hi));
            const auto h = static_cast<std::size_t>(rng.uniform_int(lo, hi));
            const auto x0 = static_cast<std::size_t>(rng.uniform_int(1, static_cast<int>(size - w - 1)));
            const auto y0 = static_cast<std::size_t>(rng.uniform_int(1, static_cast<int>(size - h - 1)));
            r = {x0, y0, x0 + w, y0 + h};
            ok = std::all_of(placed.begin(), placed.end(), [&](const Rect& o) { return separated(r, o); });
        }
        if (!ok) {
            ++dropped;
            continue;
        }
        placed.push_back(r);

        double roof[3];
        const double level = rng.uniform(0.62, 0.9);
        for (double& c : roof) c = level + rng.uniform(-0.05, 0.05);
        const int cls = rng.uniform_int(1, 4);
        const double darken = rng.uniform(0.6, 0.75);
        for (std::size_t y = r.y0; y < r.y1; ++y)
            for (std::size_t x = r.x0; x < r.x1; ++x) {
                pair.damage.at(y, x) = static_cast<std::uint8_t>(cls);
                for (std::size_t c = 0; c < 3; ++c) {
                    const double v = to_level(std::clamp(roof[c] + 0.02 * rng.normal(), 0.55, 0.98));
                    pair.pre.at(c, y, x) = v;
                    double post = v;
                    if (cls == 2) post = v * darken;
                    if (cls == 3) post = std::clamp(v + 0.2 * rng.normal(), 0.0, 1.0);
                    if (cls == 4) post = bg.at(c, y, x);
                    pair.post.at(c, y, x) = post;
                }
            }
    }
    pair.post = io::quantize(pair.post);
    if (dropped > 0) {
        log::warn("synthetic scene " + std::to_string(seed) + ": placed " + std::to_string(placed.size()) + " of " +
                  std::to_string(n_buildings) + " buildings without overlap");
    }
    return pair;
}

std::string synthetic_id(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "synthetic_%05zu", index);
    return buf;
}

std::vector<ScenePair> generate_synthetic_set(std::size_t count, std::uint64_t seed, std::size_t size,
                                              std::size_t n_buildings) {
    std::vector<ScenePair> out(count);
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < count; ++i) {
        out[i] = generate_synthetic_pair(derive_seed(seed, i), size, n_buildings);
        out[i].id = synthetic_id(i);
    }
    return out;
}

bool DatasetManifest::is_labeled(const std::string& id) const {
    return std::find(labeled_ids.begin(), labeled_ids.end(), id) != labeled_ids.end();
}

std::vector<ScenePair> DatasetManifest::labeled_pairs() const {
    std::set<std::string> ids(labeled_ids.begin(), labeled_ids.end());
    std::vector<ScenePair> out;
    for (const auto& p : pairs)
        if (ids.count(p.id)) out.push_back(p);
    return out;
}

void DatasetManifest::validate() const {
    std::set<std::string> ids;
    for (const auto& p : pairs) {
        if (!ids.insert(p.id).second) throw DataError("duplicate pair id '" + p.id + "'");
        if (p.pre.shape() != p.post.shape() || p.pre.rank() != 3 || p.pre.dim(1) != p.damage.height ||
            p.pre.dim(2) != p.damage.width) {
            throw DataError("pair '" + p.id + "' has rasters of different shapes");
        }
        p.damage.validate();
    }
    for (const auto& id : labeled_ids)
        if (!ids.count(id)) throw DataError("labeled id '" + id + "' is not in the manifest");
}

DatasetManifest manifest_from_pairs(std::vector<ScenePair> pairs) {
    DatasetManifest m;
    for (const auto& p : pairs) m.labeled_ids.push_back(p.id);
    m.pairs = std::move(pairs);
    m.validate();
    return m;
}

std::vector<PolygonAnnotation> mask_to_polygons(const DamageMask& mask) {
    struct Open {
        std::size_t x0, x1, y0;
        std::uint8_t cls;
        bool seen;
    };
    std::vector<PolygonAnnotation> out;
    std::vector<Open> open;
    auto close = [&](const Open& o, std::size_t y1) {
        const double x0 = double(o.x0), x1 = double(o.x1), y0 = double(o.y0), yy = double(y1);
        out.push_back({{{x0, y0}, {x1, y0}, {x1, yy}, {x0, yy}}, o.cls});
    };
    for (std::size_t y = 0; y <= mask.height; ++y) {
        for (auto& o : open) o.seen = false;
        std::vector<Open> fresh;
        if (y < mask.height) {
            for (std::size_t x = 0; x < mask.width;) {
                const auto cls = mask.at(y, x);
                std::size_t end = x + 1;
                while (end < mask.width && mask.at(y, end) == cls) ++end;
                if (cls != 0) {
                    auto it = std::find_if(open.begin(), open.end(), [&](const Open& o) {
                        return o.x0 == x && o.x1 == end && o.cls == cls && !o.seen;
                    });
                    if (it != open.end()) {
                        it->seen = true;
                    } else {
                        fresh.push_back({x, end, y, cls, true});
                    }
                }
                x = end;
            }
        }
        std::vector<Open> kept;
        for (const auto& o : open) {
            if (o.seen) {
                kept.push_back(o);
            } else {
                close(o, y);
            }
        }
        kept.insert(kept.end(), fresh.begin(), fresh.end());
        open = std::move(kept);
    }
    return out;
}

std::string make_label_record(const std::vector<PolygonAnnotation>& polygons, bool with_subtype) {
    nlohmann::ordered_json features = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < polygons.size(); ++i) {
        nlohmann::ordered_json props;
        props["feature_type"] = "building";
        if (with_subtype) props["subtype"] = subtype_name(polygons[i].damage_class);
        props["uid"] = std::to_string(i);
        features.push_back({{"properties", props}, {"wkt", to_wkt(polygons[i].vertices)}});
    }
    nlohmann::ordered_json j;
    j["features"] = {{"lng_lat", nlohmann::ordered_json::array()}, {"xy", features}};
    j["metadata"] = nlohmann::ordered_json::object();
    return j.dump(1);
}

std::vector<PolygonAnnotation> parse_label_record(const std::string& json_text, const LoadOptions& options) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("label record is not valid JSON: ") + e.what());
    }
    try {
        std::vector<PolygonAnnotation> out;
        for (const auto& f : j.at("features").at("xy")) {
            PolygonAnnotation a;
            a.vertices = parse_wkt_polygon(f.at("wkt").get<std::string>());
            const auto& props = f.at("properties");
            if (props.contains("feature_type") && props.at("feature_type") != "building") continue;
            a.damage_class = subtype_class(props.at("subtype").get<std::string>(), options);
            out.push_back(std::move(a));
        }
        return out;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("label record has an unexpected layout: ") + e.what());
    }
}

DatasetManifest load_dataset(const fs::path& root, const LoadOptions& options) {
    if (!fs::is_directory(root)) throw DataError("dataset root " + root.string() + " is not a directory");
    DatasetManifest m;
    const fs::path images = root / "images";
    const fs::path labels = root / "labels";
    if (!fs::is_directory(images)) return m;

    std::map<std::string, std::pair<bool, bool>> stems;
    for (const auto& entry : fs::directory_iterator(images)) {
        if (!entry.is_regular_file() || entry.path().extension() != ".png") continue;
        const std::string stem = entry.path().stem().string();
        auto ends_with = [&](const std::string& suffix) {
            return stem.size() > suffix.size() && stem.compare(stem.size() - suffix.size(), suffix.size(), suffix) == 0;
        };
        if (ends_with(kPreSuffix)) {
            stems[stem.substr(0, stem.size() - std::string(kPreSuffix).size())].first = true;
        } else if (ends_with(kPostSuffix)) {
            stems[stem.substr(0, stem.size() - std::string(kPostSuffix).size())].second = true;
        }
    }

    for (const auto& [id, have] : stems) {
        if (!have.first || !have.second) {
            report(m, "excluding '" + id + "': orphan " + (have.first ? "pre" : "post") + " image");
            continue;
        }
        ScenePair pair;
        pair.id = id;
        try {
            pair.pre = io::read_image(images / (id + kPreSuffix + ".png"));
            pair.post = io::read_image(images / (id + kPostSuffix + ".png"));
        } catch (const DataError& e) {
            report(m, "excluding '" + id + "': " + e.what());
            continue;
        }
        if (pair.pre.shape() != pair.post.shape()) {
            report(m, "excluding '" + id + "': pre and post images differ in size");
            continue;
        }
        const std::size_t h = pair.pre.dim(1), w = pair.pre.dim(2);
        pair.damage = DamageMask(h, w);
        const fs::path label = labels / (id + kPostSuffix + ".json");
        if (fs::exists(label)) {
            try {
                pair.damage = rasterize_annotations(parse_label_record(read_file(label), options), h, w);
                m.labeled_ids.push_back(id);
            } catch (const DataError& e) {
                report(m, "treating '" + id + "' as unlabeled: " + e.what());
                pair.damage = DamageMask(h, w);
            }
        }
        m.pairs.push_back(std::move(pair));
    }
    return m;
}

void export_dataset(const DatasetManifest& manifest, const fs::path& root) {
    manifest.validate();
    fs::create_directories(root / "images");
    fs::create_directories(root / "labels");
    for (const auto& p : manifest.pairs) {
        io::write_image(root / "images" / (p.id + kPreSuffix + ".png"), p.pre);
        io::write_image(root / "images" / (p.id + kPostSuffix + ".png"), p.post);
        if (!manifest.is_labeled(p.id)) continue;
        const auto polygons = mask_to_polygons(p.damage);
        write_file(root / "labels" / (p.id + kPreSuffix + ".json"), make_label_record(polygons, false));
        write_file(root / "labels" / (p.id + kPostSuffix + ".json"), make_label_record(polygons, true));
    }
}

DatasetManifest split_labeled(const DatasetManifest& manifest, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0)) {
        throw ConfigError("labeled fraction must lie in (0, 1], got " + format_number(fraction));
    }
    const std::size_t n = manifest.labeled_ids.size();
    // The small slack keeps products like 0.1 * 30 from rounding up to 4.
    const auto keep = std::min(n, static_cast<std::size_t>(std::ceil(fraction * double(n) - 1e-9)));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(seed, 0x5B117));
    std::shuffle(order.begin(), order.end(), rng.engine());
    order.resize(keep);
    std::sort(order.begin(), order.end());

    DatasetManifest out = manifest;
    out.labeled_ids.clear();
    for (auto i : order) out.labeled_ids.push_back(manifest.labeled_ids[i]);
    return out;
}

std::pair<std::vector<ScenePair>, std::vector<ScenePair>> holdout_split(const std::vector<ScenePair>& pairs,
                                                                        double fraction, std::uint64_t seed) {
    if (!(fraction >= 0.0 && fraction < 1.0)) throw ConfigError("held-out fraction must lie in [0, 1)");
    const std::size_t n = pairs.size();
    std::size_t held = static_cast<std::size_t>(std::lround(fraction * double(n)));
    if (fraction > 0.0 && n > 1) held = std::clamp<std::size_t>(held, 1, n - 1);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(seed, 0x401D));
    std::shuffle(order.begin(), order.end(), rng.engine());
    std::vector<bool> is_held(n, false);
    for (std::size_t i = 0; i < held; ++i) is_held[order[i]] = true;
    std::pair<std::vector<ScenePair>, std::vector<ScenePair>> out;
    for (std::size_t i = 0; i < n; ++i) (is_held[i] ? out.second : out.first).push_back(pairs[i]);
    return out;
}

}  // namespace bda::data
