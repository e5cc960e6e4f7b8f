#include "bda/metrics.hpp"

#include <cmath>
#include <limits>

#include "bda/error.hpp"
#include "json.hpp"

namespace bda::metrics {

const std::array<const char*, 6> kReportKeys{"localization", "damage", "no_damage", "minor", "major", "destroyed"};

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void add(ClassCounts& a, const ClassCounts& b) {
    a.tp += b.tp;
    a.fp += b.fp;
    a.fn += b.fn;
}

}  // namespace

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& other) {
    for (std::size_t c = 0; c < kNumClasses; ++c) add(classes[c], other.classes[c]);
    add(building, other.building);
    pixels += other.pixels;
    return *this;
}

ConfusionCounts confusion_counts(const DamageMask& pred, const DamageMask& gt) {
    if (pred.height != gt.height || pred.width != gt.width) {
        throw ShapeError("prediction " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                         " does not match ground truth " + std::to_string(gt.height) + "x" + std::to_string(gt.width));
    }
    pred.validate();
    gt.validate();
    ConfusionCounts out;
    out.pixels = gt.labels.size();
    for (std::size_t i = 0; i < gt.labels.size(); ++i) {
        const auto p = pred.labels[i], g = gt.labels[i];
        if (p == g) {
            ++out.classes[p].tp;
        } else {
            ++out.classes[p].fp;
            ++out.classes[g].fn;
        }
        const bool pb = p >= 1, gb = g >= 1;
        if (pb && gb) ++out.building.tp;
        if (pb && !gb) ++out.building.fp;
        if (!pb && gb) ++out.building.fn;
    }
    return out;
}

double f1(const ClassCounts& c) {
    const auto denom = 2 * c.tp + c.fp + c.fn;
    if (denom == 0) return kNaN;
    return 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

F1Report f1_scores(const ConfusionCounts& counts) {
    F1Report r;
    r.localization = f1(counts.building);
    for (std::size_t c = 1; c < kNumClasses; ++c) r.class_f1[c - 1] = f1(counts.classes[c]);
    r.damage = kNaN;
    return r;
}

F1Report aggregate_report(const F1Report& per_class) {
    F1Report r = per_class;
    double inv = 0.0;
    int defined = 0;
    bool zero = false;
    for (double v : per_class.class_f1) {
        if (std::isnan(v)) continue;
        ++defined;
        if (v == 0.0) {
            zero = true;
        } else {
            inv += 1.0 / v;
        }
    }
    if (defined == 0) {
        r.damage = kNaN;
    } else if (zero) {
        r.damage = 0.0;
    } else {
        r.damage = defined / inv;
    }
    return r;
}

F1Report evaluate(const ConfusionCounts& counts) { return aggregate_report(f1_scores(counts)); }

std::string to_json(const F1Report& report) {
    const double values[6] = {report.localization, report.damage,     report.class_f1[0],
                              report.class_f1[1],  report.class_f1[2], report.class_f1[3]};
    nlohmann::ordered_json j;
    for (std::size_t i = 0; i < kReportKeys.size(); ++i) {
        if (std::isnan(values[i])) {
            j[kReportKeys[i]] = nullptr;
        } else {
            j[kReportKeys[i]] = values[i];
        }
    }
    return j.dump();
}

}  // namespace bda::metrics
