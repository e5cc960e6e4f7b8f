#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bda/tensor.hpp"

namespace bda {

inline constexpr std::size_t kNumClasses = 5;

// Per-pixel damage labels: 0 no building, 1 no damage, 2 minor, 3 major, 4 destroyed.
struct DamageMask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> labels;

    DamageMask() = default;
    DamageMask(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), labels(h * w, fill) {}

    std::uint8_t& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }
    std::uint8_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
    // Throws DataError if any label lies outside {0..4} or the size is inconsistent.
    void validate() const;

    friend bool operator==(const DamageMask&, const DamageMask&) = default;
};

// Per-pixel building flag (1 = building).
struct LocalizationMask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> labels;

    friend bool operator==(const LocalizationMask&, const LocalizationMask&) = default;
};

LocalizationMask localization_from_damage(const DamageMask& damage);

// A co-registered pre/post image pair with its damage labels.
struct ScenePair {
    std::string id;
    Tensor pre;   // (3, H, W), values in [0, 1]
    Tensor post;  // (3, H, W)
    DamageMask damage;
};

}  // namespace bda
