#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "airseg/volume.hpp"

namespace airseg {

using Vec3 = std::array<double, 3>;

/// Synthetic bifurcating tree. Positions and lengths are in voxel units.
struct PhantomSpec {
  Dims dims{48, 48, 56};
  Spacing spacing{1.0, 1.0, 1.0};
  Vec3 root_start{23.5, 23.5, 0.0};  // on the bottom face: the root enters the grid
  Vec3 root_direction{0.0, 0.0, 1.0};
  double root_radius = 3.0;
  double radius_decay = 0.85;
  double segment_length = 18.0;
  double length_decay = 1.0;
  double half_angle_deg = 30.0;
  double angle_jitter_deg = 5.0;
  std::size_t depth = 3;
  std::uint64_t seed = 0;
  double noise_level = 0.1;
  double lumen_hu = -1000.0;
  double background_hu = 50.0;

  /// Throws std::invalid_argument on out-of-range fields.
  void validate() const;
};

nlohmann::json to_json(const PhantomSpec& s);
PhantomSpec phantom_spec_from_json(const nlohmann::json& j, PhantomSpec base = {});

struct PhantomBranch {
  std::size_t id = 0;
  long parent = -1;
  std::size_t generation = 0;  // root = 0
  Vec3 start{}, end{};
  double radius = 0.0;
  double length_mm = 0.0;
};

struct PhantomTruth {
  MaskVolume mask;
  Volume image;  // hounsfield
  std::vector<PhantomBranch> branches;
  std::vector<Vec3> junctions;
  /// One polyline per branch, in voxel coordinates.
  std::vector<std::vector<Vec3>> centerlines() const;
  double total_length_mm() const;
};

class PhantomError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Linear indices of voxels whose centres lie within r of the segment [p0, p1]
/// (voxel units), clipped to the grid, ascending.
std::vector<std::size_t> rasterize_capsule(const Dims& dims, const Vec3& p0, const Vec3& p1, double r);

/// Distance from point q to segment [a, b].
double point_segment_distance(const Vec3& q, const Vec3& a, const Vec3& b);

/// Builds the tree. Throws PhantomError if it leaves the grid or if two
/// non-adjacent branches touch.
PhantomTruth generate_tree(const PhantomSpec& spec);

nlohmann::json truth_json(const PhantomTruth& t, const PhantomSpec& spec);

}  // namespace airseg
