#include <filesystem>
#include <fstream>
#include <set>

#include "bda/data.hpp"
#include "bda/error.hpp"
#include "bda/image_io.hpp"
#include "bda/log.hpp"
#include "bda/rng.hpp"
#include "doctest.h"

using namespace bda;
using namespace bda::data;
namespace fs = std::filesystem;

namespace {

// Classic crossing-number test, written independently of the scanline fill.
bool inside(const std::vector<std::pair<double, double>>& v, double px, double py) {
    bool c = false;
    for (std::size_t i = 0, j = v.size() - 1; i < v.size(); j = i++) {
        const auto [xi, yi] = v[i];
        const auto [xj, yj] = v[j];
        if (((yi > py) != (yj > py)) && (px < (xj - xi) * (py - yi) / (yj - yi) + xi)) c = !c;
    }
    return c;
}

DamageMask brute_force(const std::vector<PolygonAnnotation>& polys, std::size_t h, std::size_t w) {
    DamageMask m(h, w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (const auto& p : polys)
                if (inside(p.vertices, x + 0.5, y + 0.5))
                    m.at(y, x) = std::max<std::uint8_t>(m.at(y, x), static_cast<std::uint8_t>(p.damage_class));
    return m;
}

// Convex polygon from points sorted by angle around a random centre.
PolygonAnnotation random_convex(Rng& rng, double extent) {
    const double cx = rng.uniform(0, extent), cy = rng.uniform(0, extent), r = rng.uniform(1.0, extent / 2);
    const int n = rng.uniform_int(3, 8);
    std::vector<double> angles(n);
    for (auto& a : angles) a = rng.uniform(0, 2 * 3.141592653589793);
    std::sort(angles.begin(), angles.end());
    PolygonAnnotation p;
    for (double a : angles) p.vertices.emplace_back(cx + r * std::cos(a), cy + r * std::sin(a));
    p.damage_class = rng.uniform_int(1, 4);
    return p;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("bda_test_" + name)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

struct QuietWarnings {
    std::vector<std::string> seen;
    QuietWarnings() { log::set_warning_sink([this](const std::string& m) { seen.push_back(m); }); }
    ~QuietWarnings() { log::set_warning_sink({}); }
};

}  // namespace

TEST_CASE("rasterisation examples") {
    CHECK(rasterize_annotations({}, 8, 8) == DamageMask(8, 8));

    PolygonAnnotation sq{{{2, 2}, {5, 2}, {5, 5}, {2, 5}}, 3};
    auto m = rasterize_annotations({sq}, 8, 8);
    int area = 0;
    for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x) {
            const bool in = x >= 2 && x < 5 && y >= 2 && y < 5;
            CHECK(m.at(y, x) == (in ? 3 : 0));
            area += m.at(y, x) != 0;
        }
    CHECK(area == 9);

    PolygonAnnotation a{{{0, 0}, {4, 0}, {4, 4}, {0, 4}}, 4};
    PolygonAnnotation b{{{2, 2}, {6, 2}, {6, 6}, {2, 6}}, 2};
    auto o = rasterize_annotations({a, b}, 8, 8);
    CHECK(o.at(3, 3) == 4);
    CHECK(o.at(5, 5) == 2);
    CHECK(rasterize_annotations({b, a}, 8, 8) == o);
}

TEST_CASE("degenerate and invalid polygons") {
    QuietWarnings quiet;
    PolygonAnnotation line{{{1, 1}, {5, 5}, {1, 1}}, 2};
    CHECK(rasterize_annotations({line}, 8, 8) == DamageMask(8, 8));
    CHECK(quiet.seen.size() == 1);
    PolygonAnnotation bad{{{0, 0}, {4, 0}, {4, 4}}, 5};
    CHECK_THROWS_AS(rasterize_annotations({bad}, 8, 8), DataError);
}

TEST_CASE("rasterisation matches brute force on random convex polygons") {
    Rng rng(99);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t h = rng.uniform_int(4, 16), w = rng.uniform_int(4, 16);
        std::vector<PolygonAnnotation> polys;
        const int count = rng.uniform_int(1, 3);
        for (int i = 0; i < count; ++i) polys.push_back(random_convex(rng, 18.0));
        REQUIRE(rasterize_annotations(polys, h, w) == brute_force(polys, h, w));
    }
    // Integer vertices put many edges exactly through pixel centres.
    for (int trial = 0; trial < 300; ++trial) {
        PolygonAnnotation p;
        const int n = rng.uniform_int(3, 6);
        for (int i = 0; i < n; ++i) p.vertices.emplace_back(rng.uniform_int(0, 16) * 0.5, rng.uniform_int(0, 16) * 0.5);
        p.damage_class = 2;
        QuietWarnings quiet;
        auto got = rasterize_annotations({p}, 8, 8);
        if (quiet.seen.empty()) REQUIRE(got == brute_force({p}, 8, 8));
    }
}

TEST_CASE("synthetic scenes are deterministic and exact") {
    auto a = generate_synthetic_pair(5, 64, 5);
    auto b = generate_synthetic_pair(5, 64, 5);
    CHECK(a.pre == b.pre);
    CHECK(a.post == b.post);
    CHECK(a.damage == b.damage);
    CHECK_FALSE(generate_synthetic_pair(6, 64, 5).pre == a.pre);

    auto empty = generate_synthetic_pair(1, 32, 0);
    CHECK(empty.damage == DamageMask(32, 32));
    CHECK(empty.pre == empty.post);
    CHECK_THROWS_AS(generate_synthetic_pair(1, 16, 1), ConfigError);
}

TEST_CASE("synthetic labels agree with the rendered change") {
    std::set<int> classes;
    for (std::uint64_t s = 0; s < 100; ++s) {
        auto p = generate_synthetic_pair(s, 64, 5);
        p.damage.validate();
        CHECK(io::quantize(p.pre) == p.pre);
        CHECK(io::quantize(p.post) == p.post);
        for (std::size_t y = 0; y < 64; ++y)
            for (std::size_t x = 0; x < 64; ++x) {
                const int d = p.damage.at(y, x);
                classes.insert(d);
                bool same = true;
                for (std::size_t c = 0; c < 3; ++c) same = same && p.pre.at(c, y, x) == p.post.at(c, y, x);
                if (d == 0 || d == 1) REQUIRE(same);
                if (d == 4 || d == 2) REQUIRE_FALSE(same);
            }
    }
    for (int c = 1; c <= 4; ++c) CHECK(classes.count(c) == 1);
}

TEST_CASE("crowded scenes place fewer buildings and say so") {
    QuietWarnings quiet;
    auto p = generate_synthetic_pair(3, 32, 60);
    CHECK_FALSE(quiet.seen.empty());
    p.damage.validate();
}

TEST_CASE("masks survive polygon encoding") {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        DamageMask m(rng.uniform_int(1, 12), rng.uniform_int(1, 12));
        for (auto& v : m.labels) v = static_cast<std::uint8_t>(rng.bernoulli(0.5) ? rng.uniform_int(1, 4) : 0);
        auto polys = mask_to_polygons(m);
        REQUIRE(rasterize_annotations(polys, m.height, m.width) == m);
        REQUIRE(rasterize_annotations(parse_label_record(make_label_record(polys, true)), m.height, m.width) == m);
    }
    auto p = generate_synthetic_pair(8, 64, 5);
    std::set<std::uint8_t> nonzero;
    for (auto v : p.damage.labels)
        if (v) nonzero.insert(v);
    CHECK(mask_to_polygons(p.damage).size() <= 5);
}

TEST_CASE("label records") {
    const std::string rec = R"J({"features": {"lng_lat": [], "xy": [
        {"properties": {"feature_type": "building", "subtype": "un-classified", "uid": "a"},
         "wkt": "POLYGON ((1 1, 4 1, 4 4, 1 4, 1 1))"},
        {"properties": {"feature_type": "building", "subtype": "destroyed", "uid": "b"},
         "wkt": "POLYGON ((5 5, 7 5, 7 7, 5 7, 5 5), (5.5 5.5, 6 5.5, 6 6, 5.5 5.5))"}]}})J";
    auto polys = parse_label_record(rec);
    REQUIRE(polys.size() == 2);
    CHECK(polys[0].damage_class == 1);
    CHECK(polys[0].vertices.size() == 4);
    CHECK(polys[1].damage_class == 4);
    LoadOptions opt;
    opt.unclassified_class = 2;
    CHECK(parse_label_record(rec, opt)[0].damage_class == 2);
    CHECK_THROWS_AS(parse_label_record("{not json"), DataError);
    CHECK_THROWS_AS(parse_label_record(R"J({"features": {"xy": [{"properties": {"subtype": "crushed"},
        "wkt": "POLYGON ((0 0, 1 0, 1 1))"}]}})J"), DataError);
}

TEST_CASE("dataset loading") {
    QuietWarnings quiet;
    TempDir dir("load");
    CHECK(load_dataset(dir.path).pairs.empty());
    CHECK_THROWS_AS(load_dataset(dir.path / "missing"), DataError);

    auto pair = generate_synthetic_pair(2, 32, 3);
    pair.id = "flood_00000001";
    export_dataset(manifest_from_pairs({pair}), dir.path);
    auto m = load_dataset(dir.path);
    REQUIRE(m.pairs.size() == 1);
    CHECK(m.labeled_ids == std::vector<std::string>{"flood_00000001"});
    CHECK(m.pairs[0].damage == pair.damage);
    CHECK(m.pairs[0].pre == pair.pre);

    io::write_image(dir.path / "images" / "orphan_pre_disaster.png", pair.pre);
    auto unlabeled = pair;
    unlabeled.id = "quake_1";
    io::write_image(dir.path / "images" / "quake_1_pre_disaster.png", pair.pre);
    io::write_image(dir.path / "images" / "quake_1_post_disaster.png", pair.post);
    auto broken = pair;
    io::write_image(dir.path / "images" / "fire_2_pre_disaster.png", pair.pre);
    io::write_image(dir.path / "images" / "fire_2_post_disaster.png", pair.post);
    std::ofstream(dir.path / "labels" / "fire_2_post_disaster.json") << "{\"features\": 3}";

    m = load_dataset(dir.path);
    CHECK(m.pairs.size() == 3);
    CHECK(m.labeled_ids == std::vector<std::string>{"flood_00000001"});
    CHECK(m.reports.size() == 2);
    m.validate();
}

TEST_CASE("synthetic export round-trips masks exactly") {
    QuietWarnings quiet;
    TempDir dir("roundtrip");
    auto pairs = generate_synthetic_set(50, 7, 64, 5);
    auto manifest = manifest_from_pairs(pairs);
    export_dataset(manifest, dir.path);
    auto loaded = load_dataset(dir.path);
    REQUIRE(loaded.pairs.size() == 50);
    CHECK(loaded.labeled_ids == manifest.labeled_ids);
    for (std::size_t i = 0; i < 50; ++i) {
        REQUIRE(loaded.pairs[i].id == pairs[i].id);
        REQUIRE(loaded.pairs[i].damage == pairs[i].damage);
        REQUIRE(loaded.pairs[i].pre == pairs[i].pre);
        REQUIRE(loaded.pairs[i].post == pairs[i].post);
    }
}

TEST_CASE("labeled splits") {
    std::vector<ScenePair> pairs;
    for (std::size_t i = 0; i < 100; ++i) {
        ScenePair p;
        p.id = synthetic_id(i);
        p.pre = p.post = Tensor({3, 1, 1});
        p.damage = DamageMask(1, 1);
        pairs.push_back(p);
    }
    auto m = manifest_from_pairs(pairs);
    CHECK(split_labeled(m, 1.0, 3).labeled_ids == m.labeled_ids);
    CHECK(split_labeled(m, 0.2, 3).labeled_ids.size() == 20);
    CHECK(split_labeled(m, 0.01, 3).labeled_ids.size() == 1);
    CHECK(split_labeled(m, 0.2, 3).labeled_ids == split_labeled(m, 0.2, 3).labeled_ids);
    for (std::uint64_t s = 0; s < 10; ++s) {
        auto a = split_labeled(m, 0.2, 2 * s), b = split_labeled(m, 0.2, 2 * s + 1);
        CHECK(a.labeled_ids.size() == b.labeled_ids.size());
        CHECK_FALSE(a.labeled_ids == b.labeled_ids);
        a.validate();
    }
    auto small = manifest_from_pairs(std::vector<ScenePair>(pairs.begin(), pairs.begin() + 30));
    CHECK(split_labeled(small, 0.1, 1).labeled_ids.size() == 3);
    CHECK_THROWS_AS(split_labeled(m, 0.0, 1), ConfigError);
    CHECK_THROWS_AS(split_labeled(m, 1.5, 1), ConfigError);

    auto [train, held] = holdout_split(pairs, 0.2, 4);
    CHECK(train.size() == 80);
    CHECK(held.size() == 20);
    std::set<std::string> ids;
    for (const auto& p : train) ids.insert(p.id);
    for (const auto& p : held) CHECK(ids.insert(p.id).second);
}

TEST_CASE("png round trip and grayscale input") {
    TempDir dir("png");
    Rng rng(1);
    Tensor img({3, 5, 7});
    for (auto& v : img.values()) v = rng.uniform();
    io::write_image(dir.path / "a.png", img);
    CHECK(io::read_image(dir.path / "a.png") == io::quantize(img));
    io::Raster gray{4, 3, 1, std::vector<std::uint8_t>(12, 200)};
    io::write_png(dir.path / "g.png", gray);
    auto back = io::read_png(dir.path / "g.png");
    CHECK(back.channels == 3);
    CHECK(back.pixels == std::vector<std::uint8_t>(36, 200));
    std::ofstream(dir.path / "bad.png") << "not a png";
    CHECK_THROWS_AS(io::read_png(dir.path / "bad.png"), DataError);
    CHECK_THROWS_AS(io::read_png(dir.path / "none.png"), DataError);
}
