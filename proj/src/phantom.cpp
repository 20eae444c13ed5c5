#include "airseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "airseg/rng.hpp"

namespace airseg {

using nlohmann::json;

namespace {

Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
Vec3 unit(const Vec3& a) { return (1.0 / norm(a)) * a; }

double deg2rad(double d) { return d * std::numbers::pi / 180.0; }

// Any unit vector perpendicular to d.
Vec3 perpendicular(const Vec3& d) {
  const Vec3 helper = std::abs(d[0]) < 0.9 ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
  return unit(cross(d, helper));
}

double segment_distance(const Vec3& a0, const Vec3& a1, const Vec3& b0, const Vec3& b1) {
  // Dense sampling is plenty at phantom scale.
  const int n = std::max(2, static_cast<int>(std::ceil(4.0 * norm(a1 - a0))));
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= n; ++i) best = std::min(best, point_segment_distance(a0 + (double(i) / n) * (a1 - a0), b0, b1));
  return best;
}

}  // namespace

void PhantomSpec::validate() const {
  if (dims.nx < 1 || dims.ny < 1 || dims.nz < 1) throw std::invalid_argument("phantom dims must be positive");
  if (!(spacing.sx > 0 && spacing.sy > 0 && spacing.sz > 0)) throw std::invalid_argument("phantom spacing must be positive");
  if (norm(root_direction) == 0.0) throw std::invalid_argument("root direction must be non-zero");
  if (!(radius_decay > 0.0 && radius_decay <= 1.0)) throw std::invalid_argument("radius decay must be in (0, 1]");
  if (!(length_decay > 0.0 && length_decay <= 1.0)) throw std::invalid_argument("length decay must be in (0, 1]");
  if (!(segment_length > 0.0)) throw std::invalid_argument("segment length must be positive");
  if (depth < 1) throw std::invalid_argument("depth must be at least 1");
  if (!(half_angle_deg > 0.0 && half_angle_deg < 90.0)) throw std::invalid_argument("half angle must be in (0, 90)");
  if (!(angle_jitter_deg >= 0.0 && angle_jitter_deg < half_angle_deg))
    throw std::invalid_argument("angle jitter must be in [0, half angle)");
  if (!(noise_level >= 0.0 && noise_level < 0.5)) throw std::invalid_argument("noise level must be in [0, 0.5)");
  const double leaf_radius = root_radius * std::pow(radius_decay, static_cast<double>(depth - 1));
  if (leaf_radius < 1.0) throw std::invalid_argument("radius falls below 1 voxel at the deepest generation");
}

json to_json(const PhantomSpec& s) {
  return json{{"dims", {s.dims.nx, s.dims.ny, s.dims.nz}},
              {"spacing", {s.spacing.sx, s.spacing.sy, s.spacing.sz}},
              {"root_start", s.root_start},
              {"root_direction", s.root_direction},
              {"root_radius", s.root_radius},
              {"radius_decay", s.radius_decay},
              {"segment_length", s.segment_length},
              {"length_decay", s.length_decay},
              {"half_angle_deg", s.half_angle_deg},
              {"angle_jitter_deg", s.angle_jitter_deg},
              {"depth", s.depth},
              {"seed", s.seed},
              {"noise_level", s.noise_level},
              {"lumen_hu", s.lumen_hu},
              {"background_hu", s.background_hu}};
}

PhantomSpec phantom_spec_from_json(const json& j, PhantomSpec s) {
  if (!j.is_object()) throw std::invalid_argument("phantom spec must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    if (key == "dims") {
      const auto d = v.get<std::array<std::size_t, 3>>();
      s.dims = {d[0], d[1], d[2]};
    } else if (key == "spacing") {
      const auto d = v.get<std::array<double, 3>>();
      s.spacing = {d[0], d[1], d[2]};
    } else if (key == "root_start") s.root_start = v.get<Vec3>();
    else if (key == "root_direction") s.root_direction = v.get<Vec3>();
    else if (key == "root_radius") s.root_radius = v.get<double>();
    else if (key == "radius_decay") s.radius_decay = v.get<double>();
    else if (key == "segment_length") s.segment_length = v.get<double>();
    else if (key == "length_decay") s.length_decay = v.get<double>();
    else if (key == "half_angle_deg") s.half_angle_deg = v.get<double>();
    else if (key == "angle_jitter_deg") s.angle_jitter_deg = v.get<double>();
    else if (key == "depth") s.depth = v.get<std::size_t>();
    else if (key == "seed") s.seed = v.get<std::uint64_t>();
    else if (key == "noise_level") s.noise_level = v.get<double>();
    else if (key == "lumen_hu") s.lumen_hu = v.get<double>();
    else if (key == "background_hu") s.background_hu = v.get<double>();
    else throw std::invalid_argument("unknown phantom key '" + key + "'");
  }
  s.validate();
  return s;
}

double point_segment_distance(const Vec3& q, const Vec3& a, const Vec3& b) {
  const Vec3 ab = b - a;
  const double len2 = dot(ab, ab);
  double t = len2 > 0.0 ? dot(q - a, ab) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return norm(q - (a + t * ab));
}

std::vector<std::size_t> rasterize_capsule(const Dims& d, const Vec3& p0, const Vec3& p1, double r) {
  if (!(r > 0.0)) throw std::invalid_argument("rasterize_capsule: radius must be positive");
  std::array<long, 3> lo{}, hi{};
  const std::array<std::size_t, 3> n{d.nx, d.ny, d.nz};
  for (int a = 0; a < 3; ++a) {
    lo[a] = std::max(0L, static_cast<long>(std::floor(std::min(p0[a], p1[a]) - r)));
    hi[a] = std::min(static_cast<long>(n[a]) - 1, static_cast<long>(std::ceil(std::max(p0[a], p1[a]) + r)));
  }
  std::vector<std::size_t> out;
  for (long z = lo[2]; z <= hi[2]; ++z)
    for (long y = lo[1]; y <= hi[1]; ++y)
      for (long x = lo[0]; x <= hi[0]; ++x)
        if (point_segment_distance({double(x), double(y), double(z)}, p0, p1) <= r)
          out.push_back(static_cast<std::size_t>(x) + d.nx * (static_cast<std::size_t>(y) + d.ny * static_cast<std::size_t>(z)));
  return out;
}

std::vector<std::vector<Vec3>> PhantomTruth::centerlines() const {
  std::vector<std::vector<Vec3>> out;
  for (const auto& b : branches) out.push_back({b.start, b.end});
  return out;
}

double PhantomTruth::total_length_mm() const {
  double t = 0.0;
  for (const auto& b : branches) t += b.length_mm;
  return t;
}

PhantomTruth generate_tree(const PhantomSpec& spec) {
  spec.validate();
  Xoshiro256 rng(derive_seed(spec.seed, "phantom-geometry"));

  struct Pending {
    long parent;
    std::size_t generation;
    Vec3 start, dir, plane;  // plane: in-plane direction for this node's bifurcation
    double radius, length;
  };
  const Vec3 root_dir = unit(spec.root_direction);
  // Random orientation of the first bifurcation plane around the root axis.
  const Vec3 e0 = perpendicular(root_dir), e1 = cross(root_dir, e0);
  const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const Vec3 plane0 = std::cos(phi) * e0 + std::sin(phi) * e1;

  PhantomTruth t;
  std::vector<Pending> queue{{-1, 0, spec.root_start, root_dir, plane0, spec.root_radius, spec.segment_length}};
  for (std::size_t qi = 0; qi < queue.size(); ++qi) {
    const Pending p = queue[qi];
    PhantomBranch b;
    b.id = t.branches.size();
    b.parent = p.parent;
    b.generation = p.generation;
    b.start = p.start;
    b.end = p.start + p.length * p.dir;
    b.radius = p.radius;
    const Vec3 delta = b.end - b.start;
    b.length_mm = std::sqrt(std::pow(delta[0] * spec.spacing.sx, 2) + std::pow(delta[1] * spec.spacing.sy, 2) +
                            std::pow(delta[2] * spec.spacing.sz, 2));
    t.branches.push_back(b);
    if (p.generation + 1 >= spec.depth) continue;

    t.junctions.push_back(b.end);
    // Children turn within span(dir, plane); the next split uses the normal of this plane.
    const Vec3 normal = unit(cross(p.dir, p.plane));
    for (int sign : {+1, -1}) {
      const double a = deg2rad(spec.half_angle_deg + rng.uniform(-spec.angle_jitter_deg, spec.angle_jitter_deg));
      const Vec3 dir = unit(std::cos(a) * p.dir + (sign * std::sin(a)) * p.plane);
      queue.push_back({static_cast<long>(b.id), p.generation + 1, b.end, dir, normal, p.radius * spec.radius_decay,
                       p.length * spec.length_decay});
    }
  }

  // Every capsule must sit inside the grid. The root may enter through a face,
  // so only its start point itself has to be inside.
  const std::array<double, 3> extent{double(spec.dims.nx - 1), double(spec.dims.ny - 1), double(spec.dims.nz - 1)};
  for (const auto& b : t.branches)
    for (int a = 0; a < 3; ++a)
      for (int end = 0; end < 2; ++end) {
        const Vec3& q = end ? b.end : b.start;
        const double margin = (b.id == 0 && !end) ? 0.0 : b.radius;
        if (q[a] - margin < 0.0 || q[a] + margin > extent[a])
          throw PhantomError("tree leaves the grid at branch " + std::to_string(b.id));
      }

  // Branches that are neither parent/child nor siblings must not touch.
  for (std::size_t i = 0; i < t.branches.size(); ++i)
    for (std::size_t j = i + 1; j < t.branches.size(); ++j) {
      const auto& a = t.branches[i];
      const auto& b = t.branches[j];
      const bool adjacent = b.parent == long(a.id) || a.parent == long(b.id) || (a.parent == b.parent);
      if (adjacent) continue;
      if (segment_distance(a.start, a.end, b.start, b.end) <= a.radius + b.radius + 1.0)
        throw PhantomError("branches " + std::to_string(i) + " and " + std::to_string(j) + " touch");
    }

  t.mask = MaskVolume(spec.dims, spec.spacing);
  for (const auto& b : t.branches)
    for (std::size_t i : rasterize_capsule(spec.dims, b.start, b.end, b.radius)) t.mask[i] = 1;

  t.image = Volume(spec.dims, spec.spacing, IntensityKind::hounsfield);
  Xoshiro256 noise(derive_seed(spec.seed, "phantom-noise"));
  const double amp = spec.noise_level * (spec.background_hu - spec.lumen_hu);
  for (std::size_t i = 0; i < t.image.data().size(); ++i) {
    const double base = t.mask[i] ? spec.lumen_hu : spec.background_hu;
    t.image[i] = static_cast<float>(base + (amp > 0.0 ? noise.uniform(-amp, amp) : 0.0));
  }
  return t;
}

json truth_json(const PhantomTruth& t, const PhantomSpec& spec) {
  json branches = json::array();
  for (const auto& b : t.branches)
    branches.push_back({{"id", b.id},
                        {"parent", b.parent},
                        {"generation", b.generation},
                        {"start", b.start},
                        {"end", b.end},
                        {"radius", b.radius},
                        {"length_mm", b.length_mm}});
  json polylines = json::array();
  for (const auto& line : t.centerlines()) polylines.push_back(line);
  return json{{"spec", to_json(spec)},         {"branches", branches},
              {"polylines", polylines},        {"junctions", t.junctions},
              {"total_length_mm", t.total_length_mm()}, {"mask_voxels", t.mask.count()}};
}

}  // namespace airseg
