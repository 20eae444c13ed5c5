#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "airseg/volume.hpp"

namespace airseg {

struct BoundingBox {
  std::array<std::size_t, 3> min{};
  std::array<std::size_t, 3> max{};
};

/// One line of the volumetric report sheet.
struct VolumetricReportRow {
  std::string scan_id;
  std::size_t voxels = 0;
  double volume_mm3 = 0.0;
  std::optional<BoundingBox> bbox;  // empty iff voxels == 0
  std::size_t components = 0;       // 26-connected
};

VolumetricReportRow volumetric_report(const MaskVolume& m, const std::string& scan_id);

inline constexpr const char* kReportCsvHeader =
    "scan_id,voxels,volume_mm3,bbox_min_x,bbox_min_y,bbox_min_z,bbox_max_x,bbox_max_y,bbox_max_z,components";

/// CSV text (header + rows, LF endings). Empty bounding boxes leave their cells blank.
std::string report_csv(const std::vector<VolumetricReportRow>& rows);

}  // namespace airseg
