#include "airseg/report.hpp"

#include <algorithm>
#include <sstream>

#include "airseg/components.hpp"
#include "airseg/csv.hpp"

namespace airseg {

VolumetricReportRow volumetric_report(const MaskVolume& m, const std::string& scan_id) {
  VolumetricReportRow row;
  row.scan_id = scan_id;
  const Dims d = m.dims();
  BoundingBox box{{d.nx, d.ny, d.nz}, {0, 0, 0}};
  for (std::size_t z = 0; z < d.nz; ++z)
    for (std::size_t y = 0; y < d.ny; ++y)
      for (std::size_t x = 0; x < d.nx; ++x) {
        if (m.at(x, y, z) == 0) continue;
        ++row.voxels;
        const std::array<std::size_t, 3> p{x, y, z};
        for (int a = 0; a < 3; ++a) {
          box.min[a] = std::min(box.min[a], p[a]);
          box.max[a] = std::max(box.max[a], p[a]);
        }
      }
  row.volume_mm3 = static_cast<double>(row.voxels) * m.spacing().voxel_volume();
  if (row.voxels > 0) {
    row.bbox = box;
    row.components = connected_components(m, 26).count();
  }
  return row;
}

std::string report_csv(const std::vector<VolumetricReportRow>& rows) {
  std::ostringstream out;
  out << kReportCsvHeader << '\n';
  for (const auto& r : rows) {
    out << csv_field(r.scan_id) << ',' << r.voxels << ',' << format_real(r.volume_mm3);
    for (int part = 0; part < 2; ++part)
      for (int a = 0; a < 3; ++a) {
        out << ',';
        if (r.bbox) out << (part == 0 ? r.bbox->min[a] : r.bbox->max[a]);
      }
    out << ',' << r.components << '\n';
  }
  return out.str();
}

}  // namespace airseg
