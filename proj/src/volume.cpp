#include "airseg/volume.hpp"

#include <algorithm>

namespace airseg {

const char* to_string(IntensityKind kind) {
  switch (kind) {
    case IntensityKind::hounsfield: return "hounsfield";
    case IntensityKind::normalized: return "normalized";
    case IntensityKind::probability: return "probability";
  }
  return "hounsfield";
}

IntensityKind intensity_kind_from_string(const std::string& name) {
  if (name == "hounsfield") return IntensityKind::hounsfield;
  if (name == "normalized") return IntensityKind::normalized;
  if (name == "probability") return IntensityKind::probability;
  throw VolumeError("unknown intensity kind '" + name + "'");
}

void Volume::validate() const {
  if (kind_ == IntensityKind::hounsfield) return;
  const bool ok = std::all_of(data_.begin(), data_.end(), [](float v) { return v >= 0.0f && v <= 1.0f; });
  if (!ok) throw VolumeError(std::string(to_string(kind_)) + " volume has values outside [0,1]");
}

void MaskVolume::validate() const {
  if (std::any_of(data_.begin(), data_.end(), [](std::uint8_t v) { return v > 1; }))
    throw VolumeError("mask values must be 0 or 1");
}

std::size_t MaskVolume::count() const {
  return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), std::uint8_t{1}));
}

}  // namespace airseg
