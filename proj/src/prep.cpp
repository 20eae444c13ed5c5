#include "airseg/prep.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "airseg/csv.hpp"

namespace airseg {

Volume clip_normalize(const Volume& v, double lo, double hi) {
  if (v.kind() != IntensityKind::hounsfield) throw VolumeError("clip_normalize expects a hounsfield volume");
  if (!(hi > lo)) throw std::invalid_argument("clip range must satisfy lo < hi");
  const double range = hi - lo;
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double c = std::clamp(static_cast<double>(v[i]), lo, hi);
    out[i] = static_cast<float>((c - lo) / range);
  }
  Volume r(v.dims(), v.spacing(), IntensityKind::normalized, std::move(out));
  r.set_orientation(v.orientation());
  return r;
}

std::vector<std::size_t> annotated_z_indices(const MaskVolume& m) {
  std::vector<std::size_t> out;
  const std::size_t plane = m.dims().plane();
  for (std::size_t z = 0; z < m.dims().nz; ++z) {
    const auto* p = m.data().data() + z * plane;
    if (std::any_of(p, p + plane, [](std::uint8_t v) { return v != 0; })) out.push_back(z);
  }
  return out;
}

Slice25D extract_25d(const Volume& v, const MaskVolume& m, std::size_t z, const std::string& scan_id) {
  const Dims d = v.dims();
  if (z >= d.nz) throw std::out_of_range("slice index " + std::to_string(z) + " outside [0, " + std::to_string(d.nz) + ")");
  const bool has_label = !m.data().empty();
  if (has_label && m.dims() != d) throw VolumeError("mask dims do not match volume dims");

  Slice25D s;
  s.width = d.nx;
  s.height = d.ny;
  s.scan_id = scan_id;
  s.z = z;
  const std::size_t plane = d.plane();
  s.channels.resize(3 * plane);
  const std::size_t planes[3] = {z == 0 ? 0 : z - 1, z, std::min(z + 1, d.nz - 1)};
  for (std::size_t c = 0; c < 3; ++c) {
    const float* src = v.data().data() + planes[c] * plane;
    std::copy(src, src + plane, s.channels.begin() + static_cast<std::ptrdiff_t>(c * plane));
  }
  if (has_label) {
    const auto* src = m.data().data() + z * plane;
    s.label.assign(src, src + plane);
  } else {
    s.label.assign(plane, 0);
  }
  return s;
}

Slice25D extract_25d(const Volume& v, std::size_t z, const std::string& scan_id) {
  return extract_25d(v, MaskVolume{}, z, scan_id);
}

Slice25D random_crop(const Slice25D& s, std::size_t size, Xoshiro256& rng) {
  if (size == 0) throw std::invalid_argument("crop size must be positive");
  const std::size_t pw = std::max(s.width, size), ph = std::max(s.height, size);
  const std::size_t pad_x = (pw - s.width) / 2, pad_y = (ph - s.height) / 2;
  const std::size_t ox = static_cast<std::size_t>(rng.below(pw - size + 1));
  const std::size_t oy = static_cast<std::size_t>(rng.below(ph - size + 1));

  Slice25D out;
  out.width = size;
  out.height = size;
  out.scan_id = s.scan_id;
  out.z = s.z;
  out.channels.assign(3 * size * size, 0.0f);
  out.label.assign(size * size, 0);
  const std::size_t in_plane = s.width * s.height;
  for (std::size_t y = 0; y < size; ++y) {
    // Coordinates in the padded frame, shifted back into the source frame.
    const std::size_t py = y + oy;
    if (py < pad_y || py >= pad_y + s.height) continue;
    const std::size_t sy = py - pad_y;
    for (std::size_t x = 0; x < size; ++x) {
      const std::size_t px = x + ox;
      if (px < pad_x || px >= pad_x + s.width) continue;
      const std::size_t sx = px - pad_x;
      const std::size_t src = sy * s.width + sx, dst = y * size + x;
      for (std::size_t c = 0; c < 3; ++c) out.channels[c * size * size + dst] = s.channels[c * in_plane + src];
      out.label[dst] = s.label[src];
    }
  }
  return out;
}

std::pair<std::vector<std::string>, std::vector<std::string>> split_scans(const std::vector<std::string>& ids,
                                                                          double fraction, std::uint64_t seed) {
  if (ids.empty()) throw std::invalid_argument("split_scans: empty id list");
  if (!(fraction > 0.0 && fraction < 1.0)) throw std::invalid_argument("split_scans: fraction must be in (0,1)");
  std::vector<std::string> shuffled = ids;
  Xoshiro256 rng(seed);
  rng.shuffle(shuffled);
  // The epsilon keeps exact products such as 0.2 * 10 from rounding up to 3.
  const auto n_val = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(ids.size()) - 1e-9));
  std::vector<std::string> val(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::string> train(shuffled.begin() + static_cast<std::ptrdiff_t>(n_val), shuffled.end());
  return {std::move(train), std::move(val)};
}

const char* to_string(Split s) { return s == Split::train ? "train" : "internal_val"; }

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "internal_val") return Split::internal_val;
  throw std::invalid_argument("unknown split tag '" + s + "'");
}

std::vector<ManifestEntry> DatasetManifest::of(Split s) const {
  std::vector<ManifestEntry> out;
  std::copy_if(entries.begin(), entries.end(), std::back_inserter(out), [&](const auto& e) { return e.split == s; });
  return out;
}

std::string manifest_csv(const DatasetManifest& m) {
  std::ostringstream out;
  out << kManifestCsvHeader << '\n';
  for (const auto& e : m.entries) out << csv_field(e.scan_id) << ',' << e.z << ',' << to_string(e.split) << '\n';
  return out.str();
}

DatasetManifest parse_manifest_csv(const std::string& text, std::uint64_t seed) {
  DatasetManifest m;
  m.seed = seed;
  for (const auto& row : parse_csv(text, kManifestCsvHeader)) {
    if (row.size() != 3) throw std::runtime_error("manifest row must have 3 fields");
    m.entries.push_back({row[0], static_cast<std::size_t>(std::stoull(row[1])), split_from_string(row[2])});
  }
  return m;
}

}  // namespace airseg
