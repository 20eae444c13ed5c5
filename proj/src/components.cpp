#include "airseg/components.hpp"

#include <algorithm>
#include <array>
#include <stdexcept>

namespace airseg {

namespace {

struct Offset {
  int dx, dy, dz;
};

std::vector<Offset> neighbor_offsets(int connectivity) {
  std::vector<Offset> out;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int manhattan = std::abs(dx) + std::abs(dy) + std::abs(dz);
        if (manhattan == 0) continue;
        if (connectivity == 6 && manhattan != 1) continue;
        out.push_back({dx, dy, dz});
      }
  return out;
}

}  // namespace

LabelField connected_components(const MaskVolume& m, int connectivity) {
  if (connectivity != 6 && connectivity != 26)
    throw std::invalid_argument("connectivity must be 6 or 26, got " + std::to_string(connectivity));
  const Dims d = m.dims();
  LabelField field{d, std::vector<std::uint32_t>(d.voxels(), 0), {}};
  const std::vector<Offset> offsets = neighbor_offsets(connectivity);
  const auto nx = static_cast<long>(d.nx), ny = static_cast<long>(d.ny), nz = static_cast<long>(d.nz);

  std::vector<std::size_t> stack;
  for (std::size_t seed = 0; seed < d.voxels(); ++seed) {
    if (m[seed] == 0 || field.labels[seed] != 0) continue;
    const auto label = static_cast<std::uint32_t>(field.sizes.size() + 1);
    std::size_t size = 0;
    field.labels[seed] = label;
    stack.push_back(seed);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      ++size;
      const long x = static_cast<long>(i % d.nx);
      const long y = static_cast<long>((i / d.nx) % d.ny);
      const long z = static_cast<long>(i / d.plane());
      for (const Offset& o : offsets) {
        const long xx = x + o.dx, yy = y + o.dy, zz = z + o.dz;
        if (xx < 0 || yy < 0 || zz < 0 || xx >= nx || yy >= ny || zz >= nz) continue;
        const auto j = static_cast<std::size_t>(xx + nx * (yy + ny * zz));
        if (m[j] != 0 && field.labels[j] == 0) {
          field.labels[j] = label;
          stack.push_back(j);
        }
      }
    }
    field.sizes.push_back(size);
  }
  return field;
}

MaskVolume largest_component(const MaskVolume& m, int connectivity) {
  const LabelField field = connected_components(m, connectivity);
  MaskVolume out(m.dims(), m.spacing());
  out.set_orientation(m.orientation());
  if (field.sizes.empty()) return out;
  // max_element returns the first maximum, i.e. the lowest label, which is the
  // component containing the smallest linear index.
  const auto keep =
      static_cast<std::uint32_t>(std::max_element(field.sizes.begin(), field.sizes.end()) - field.sizes.begin() + 1);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = field.labels[i] == keep ? 1 : 0;
  return out;
}

}  // namespace airseg
