#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "bda/scene.hpp"

// Pixel-level F1 scoring of damage maps. Undefined scores (no prediction and
// no ground truth for a class) are NaN.
namespace bda::metrics {

struct ClassCounts {
    std::uint64_t tp = 0, fp = 0, fn = 0;
    friend bool operator==(const ClassCounts&, const ClassCounts&) = default;
};

struct ConfusionCounts {
    std::array<ClassCounts, kNumClasses> classes{};
    ClassCounts building;  // binarised: class >= 1 is positive
    std::uint64_t pixels = 0;

    ConfusionCounts& operator+=(const ConfusionCounts& other);
    friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

ConfusionCounts confusion_counts(const DamageMask& pred, const DamageMask& gt);

double f1(const ClassCounts& c);

struct F1Report {
    double localization = 0.0;
    std::array<double, 4> class_f1{};  // classes 1..4
    double damage = 0.0;
};

// Per-class and localization F1; damage is left NaN until aggregate_report.
F1Report f1_scores(const ConfusionCounts& counts);
// Harmonic mean of the defined class F1s; 0 if any is 0; NaN if none is defined.
F1Report aggregate_report(const F1Report& per_class);
F1Report evaluate(const ConfusionCounts& counts);

// Keys localization, damage, no_damage, minor, major, destroyed; NaN as null.
std::string to_json(const F1Report& report);
extern const std::array<const char*, 6> kReportKeys;

}  // namespace bda::metrics
