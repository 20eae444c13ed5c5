#pragma once

#include <cstdint>
#include <vector>

#include "airseg/volume.hpp"

namespace airseg {

/// Per-voxel component labels (0 = background, 1..K in first-encounter
/// x-fastest scan order) plus component sizes; sizes[k-1] belongs to label k.
struct LabelField {
  Dims dims;
  std::vector<std::uint32_t> labels;
  std::vector<std::size_t> sizes;

  std::size_t count() const { return sizes.size(); }
};

/// connectivity must be 6 or 26.
LabelField connected_components(const MaskVolume& m, int connectivity);

/// Keeps the largest component; ties go to the component that appears first in scan order.
MaskVolume largest_component(const MaskVolume& m, int connectivity = 26);

}  // namespace airseg
