#include "bda/scene.hpp"

#include "bda/error.hpp"

namespace bda {

void DamageMask::validate() const {
    if (labels.size() != height * width) throw DataError("damage mask size does not match its dimensions");
    for (auto v : labels) {
        if (v >= kNumClasses) throw DataError("damage label " + std::to_string(v) + " outside {0..4}");
    }
}

LocalizationMask localization_from_damage(const DamageMask& damage) {
    LocalizationMask loc{damage.height, damage.width, std::vector<std::uint8_t>(damage.labels.size())};
    for (std::size_t i = 0; i < damage.labels.size(); ++i) loc.labels[i] = damage.labels[i] >= 1 ? 1 : 0;
    return loc;
}

}  // namespace bda
