#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "airseg/rng.hpp"
#include "airseg/volume.hpp"

namespace airseg {

inline constexpr double kHuClipMin = -1024.0;
inline constexpr double kHuClipMax = 600.0;

/// Clamps HU to [lo, hi] and maps that range affinely onto [0, 1].
Volume clip_normalize(const Volume& v, double lo = kHuClipMin, double hi = kHuClipMax);

/// z indices whose axial plane holds at least one foreground voxel, ascending.
std::vector<std::size_t> annotated_z_indices(const MaskVolume& m);

/// Three neighbouring axial planes and the label of the middle one.
struct Slice25D {
  std::size_t width = 0;   // x extent
  std::size_t height = 0;  // y extent
  std::vector<float> channels;       // [3][height][width]
  std::vector<std::uint8_t> label;   // [height][width]
  std::string scan_id;
  std::size_t z = 0;

  const float* channel(std::size_t c) const { return channels.data() + c * width * height; }
};

/// Planes (z-1, z, z+1), with out-of-range neighbours replaced by the boundary plane.
/// The mask may be empty (default-constructed) when no label is needed.
Slice25D extract_25d(const Volume& v, const MaskVolume& m, std::size_t z, const std::string& scan_id = {});
Slice25D extract_25d(const Volume& v, std::size_t z, const std::string& scan_id = {});

/// Zero-pads each axis shorter than `size` symmetrically, then cuts a size x size
/// window at a uniformly drawn origin (x offset drawn first).
Slice25D random_crop(const Slice25D& s, std::size_t size, Xoshiro256& rng);

/// Seeded shuffle, then the first ceil(fraction * n) ids go to validation.
/// Returns (train, validation).
std::pair<std::vector<std::string>, std::vector<std::string>> split_scans(const std::vector<std::string>& ids,
                                                                          double fraction, std::uint64_t seed);

enum class Split { train, internal_val };
const char* to_string(Split s);
Split split_from_string(const std::string& s);

struct ManifestEntry {
  std::string scan_id;
  std::size_t z = 0;
  Split split = Split::train;
  bool operator==(const ManifestEntry&) const = default;
};

/// Annotated slices of every scan, tagged by split.
struct DatasetManifest {
  std::uint64_t seed = 0;
  std::vector<ManifestEntry> entries;

  std::vector<ManifestEntry> of(Split s) const;
};

inline constexpr const char* kManifestCsvHeader = "scan_id,z,split";

std::string manifest_csv(const DatasetManifest& m);
DatasetManifest parse_manifest_csv(const std::string& text, std::uint64_t seed = 0);

}  // namespace airseg
