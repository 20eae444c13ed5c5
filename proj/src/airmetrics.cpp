#include "airseg/airmetrics.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include "airseg/csv.hpp"

namespace airseg {

ConfusionCounts confusion(const MaskVolume& pred, const MaskVolume& gt) {
  if (!(pred.dims() == gt.dims())) throw VolumeError("confusion: prediction and ground truth dims differ");
  ConfusionCounts c;
  const auto& p = pred.data();
  const auto& g = gt.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] && g[i]) ++c.tp;
    else if (p[i]) ++c.fp;
    else if (g[i]) ++c.fn;
    else ++c.tn;
  }
  return c;
}

double dice(const ConfusionCounts& c) {
  const std::uint64_t d = 2 * c.tp + c.fp + c.fn;
  return d == 0 ? 1.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(d);
}

double fne(const ConfusionCounts& c) {
  const std::uint64_t d = c.tp + c.fn;
  return d == 0 ? 0.0 : static_cast<double>(c.fn) / static_cast<double>(d);
}

double fpe(const ConfusionCounts& c) {
  const std::uint64_t d = c.tp + c.fp;
  return d == 0 ? 0.0 : static_cast<double>(c.fp) / static_cast<double>(d);
}

namespace {

// Geometry of the 3x3x3 cube, index = (dx+1) + 3(dy+1) + 9(dz+1).
struct Cube {
  std::array<std::uint32_t, 27> adj26{};  // bitmask of 26-neighbours inside the cube
  std::array<std::uint32_t, 27> adj6{};
  std::uint32_t n18 = 0;    // 18-neighbourhood without the centre
  std::uint32_t faces = 0;  // the six face neighbours of the centre

  Cube() {
    for (int i = 0; i < 27; ++i) {
      const int x = i % 3, y = i / 3 % 3, z = i / 9;
      const int m = std::abs(x - 1) + std::abs(y - 1) + std::abs(z - 1);
      if (m >= 1 && m <= 2) n18 |= 1u << i;
      if (m == 1) faces |= 1u << i;
      for (int j = 0; j < 27; ++j) {
        if (i == j) continue;
        const int dx = std::abs(x - j % 3), dy = std::abs(y - j / 3 % 3), dz = std::abs(z - j / 9);
        if (std::max({dx, dy, dz}) == 1) adj26[i] |= 1u << j;
        if (dx + dy + dz == 1) adj6[i] |= 1u << j;
      }
    }
  }
};

const Cube& cube() {
  static const Cube c;
  return c;
}

// Flood fill restricted to `set`, starting from `seed` bits.
std::uint32_t flood(std::uint32_t set, std::uint32_t seed, const std::array<std::uint32_t, 27>& adj) {
  std::uint32_t reached = seed & set, frontier = reached;
  while (frontier) {
    std::uint32_t next = 0;
    for (std::uint32_t f = frontier; f; f &= f - 1) next |= adj[std::countr_zero(f)];
    next &= set & ~reached;
    reached |= next;
    frontier = next;
  }
  return reached;
}

constexpr std::uint32_t kCentre = 1u << 13;
constexpr std::uint32_t kAll = (1u << 27) - 1;

}  // namespace

namespace {

// The tip of a curve: every foreground neighbour touches every other one.
// Besides the usual single neighbour this also catches the last voxel of a
// half-thinned two-voxel-wide bar, which would otherwise be eaten end to end.
bool is_line_end(std::uint32_t nb) {
  const Cube& c = cube();
  const std::uint32_t fg = nb & kAll & ~kCentre;
  if (!fg) return true;
  for (std::uint32_t f = fg; f; f &= f - 1) {
    const int i = std::countr_zero(f);
    if ((fg & ~(1u << i) & ~c.adj26[i]) != 0) return false;
  }
  return true;
}

}  // namespace

bool is_simple_point(std::uint32_t nb) {
  const Cube& c = cube();
  const std::uint32_t fg = nb & kAll & ~kCentre;
  if (!fg) return false;
  // exactly one 26-component of foreground in N26*
  if (flood(fg, fg & (~fg + 1), c.adj26) != fg) return false;
  // exactly one 6-component of background in N18* that touches a face neighbour
  const std::uint32_t bg = ~nb & c.n18;
  const std::uint32_t touching = bg & c.faces;
  if (!touching) return false;
  const std::uint32_t first = flood(bg, touching & (~touching + 1), c.adj6);
  return (touching & ~first) == 0;
}

namespace {

// Zero-padded working grid so neighbourhood reads need no bounds checks.
struct Padded {
  std::size_t nx, ny, nz;
  std::vector<std::uint8_t> v;
  std::array<std::ptrdiff_t, 27> off{};

  explicit Padded(const MaskVolume& m) : nx(m.dims().nx + 2), ny(m.dims().ny + 2), nz(m.dims().nz + 2) {
    v.assign(nx * ny * nz, 0);
    const Dims d = m.dims();
    for (std::size_t z = 0; z < d.nz; ++z)
      for (std::size_t y = 0; y < d.ny; ++y)
        for (std::size_t x = 0; x < d.nx; ++x) v[idx(x + 1, y + 1, z + 1)] = m.at(x, y, z);
    for (int i = 0; i < 27; ++i)
      off[i] = (i % 3 - 1) + static_cast<std::ptrdiff_t>(nx) * (i / 3 % 3 - 1) +
               static_cast<std::ptrdiff_t>(nx * ny) * (i / 9 - 1);
  }
  std::size_t idx(std::size_t x, std::size_t y, std::size_t z) const { return x + nx * (y + ny * z); }
  std::size_t padded(const Dims& d, std::size_t linear) const {
    return idx(linear % d.nx + 1, linear / d.nx % d.ny + 1, linear / d.plane() + 1);
  }
  std::uint32_t neighbourhood(std::size_t p) const {
    std::uint32_t bits = 0;
    for (int i = 0; i < 27; ++i)
      if (v[static_cast<std::size_t>(static_cast<std::ptrdiff_t>(p) + off[i])]) bits |= 1u << i;
    return bits;
  }
};

bool has_one_neighbour(std::uint32_t nb) { return std::popcount(nb & kAll & ~kCentre) <= 1; }

template <typename IsEnd>
void thin(Padded& g, std::vector<std::size_t>& active, IsEnd is_end) {
  // face directions as cube indices: -z, +z, -y, +y, -x, +x
  constexpr std::array<int, 6> dirs{4, 22, 10, 16, 12, 14};
  bool changed = true;
  std::vector<std::size_t> candidates;
  while (changed) {
    changed = false;
    for (int dir : dirs) {
      candidates.clear();
      for (std::size_t p : active) {
        if (!g.v[p] || g.v[static_cast<std::size_t>(static_cast<std::ptrdiff_t>(p) + g.off[dir])]) continue;
        const std::uint32_t nb = g.neighbourhood(p);
        if (!is_end(nb) && is_simple_point(nb)) candidates.push_back(p);
      }
      // Re-check sequentially: earlier deletions may have changed the neighbourhood.
      for (std::size_t p : candidates) {
        const std::uint32_t nb = g.neighbourhood(p);
        if (is_end(nb) || !is_simple_point(nb)) continue;
        g.v[p] = 0;
        changed = true;
      }
    }
    std::erase_if(active, [&](std::size_t p) { return !g.v[p]; });
  }
}

Skeleton to_skeleton(const Padded& g, const MaskVolume& m) {
  Skeleton s{MaskVolume(m.dims(), m.spacing()), {}};
  s.mask.set_orientation(m.orientation());
  const Dims d = m.dims();
  for (std::size_t z = 0; z < d.nz; ++z)
    for (std::size_t y = 0; y < d.ny; ++y)
      for (std::size_t x = 0; x < d.nx; ++x)
        if (g.v[g.idx(x + 1, y + 1, z + 1)]) {
          s.mask.at(x, y, z) = 1;
          s.voxels.push_back(s.mask.index(x, y, z));
        }
  return s;
}

}  // namespace

namespace {

// 26-neighbours of a linear index within the grid.
template <typename F>
void for_each_neighbour(const Dims& d, std::size_t i, F&& f) {
  const std::size_t x = i % d.nx, y = i / d.nx % d.ny, z = i / d.plane();
  for (int dz = -1; dz <= 1; ++dz) {
    if ((dz < 0 && z == 0) || (dz > 0 && z + 1 == d.nz)) continue;
    for (int dy = -1; dy <= 1; ++dy) {
      if ((dy < 0 && y == 0) || (dy > 0 && y + 1 == d.ny)) continue;
      for (int dx = -1; dx <= 1; ++dx) {
        if ((dx < 0 && x == 0) || (dx > 0 && x + 1 == d.nx)) continue;
        if (dx == 0 && dy == 0 && dz == 0) continue;
        f(static_cast<std::size_t>(static_cast<std::ptrdiff_t>(i) + dx + static_cast<std::ptrdiff_t>(d.nx) * dy +
                                   static_cast<std::ptrdiff_t>(d.plane()) * dz));
      }
    }
  }
}

double step_length(const Dims& d, const Spacing& s, std::size_t a, std::size_t b) {
  auto coord = [&](std::size_t i) {
    return std::array<double, 3>{double(i % d.nx), double(i / d.nx % d.ny), double(i / d.plane())};
  };
  const auto pa = coord(a), pb = coord(b);
  const double dx = (pa[0] - pb[0]) * s.sx, dy = (pa[1] - pb[1]) * s.sy, dz = (pa[2] - pb[2]) * s.sz;
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

// Junction cluster id per skeleton voxel (-1 if not a junction voxel).
struct Graph {
  std::unordered_map<std::size_t, int> degree;
  std::unordered_map<std::size_t, long> cluster;
  std::size_t clusters = 0;
};

Graph build_graph(const Skeleton& s) {
  Graph g;
  const Dims d = s.mask.dims();
  for (std::size_t v : s.voxels) g.degree[v] = s.degree(v);
  for (std::size_t v : s.voxels) {
    if (g.degree[v] < 3 || g.cluster.count(v)) continue;
    const long id = static_cast<long>(g.clusters++);
    std::vector<std::size_t> stack{v};
    g.cluster[v] = id;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      for_each_neighbour(d, p, [&](std::size_t q) {
        if (s.mask[q] && g.degree[q] >= 3 && !g.cluster.count(q)) {
          g.cluster[q] = id;
          stack.push_back(q);
        }
      });
    }
  }
  return g;
}

long cluster_of(const Graph& g, std::size_t v) {
  auto it = g.cluster.find(v);
  return it == g.cluster.end() ? -1 : it->second;
}

}  // namespace

int Skeleton::degree(std::size_t i) const {
  int n = 0;
  for_each_neighbour(mask.dims(), i, [&](std::size_t q) { n += mask[q]; });
  return n;
}

std::size_t Skeleton::endpoint_count() const {
  return static_cast<std::size_t>(std::count_if(voxels.begin(), voxels.end(), [&](std::size_t v) { return degree(v) == 1; }));
}

std::size_t Skeleton::junction_count() const { return build_graph(*this).clusters; }

std::vector<Branch> branch_decompose(const Skeleton& s, const Spacing& spacing) {
  const Dims d = s.mask.dims();
  const Graph g = build_graph(s);
  const std::size_t n = d.voxels();
  std::unordered_set<std::uint64_t> used;  // undirected edges already assigned
  auto key = [n](std::size_t a, std::size_t b) { return std::uint64_t(std::min(a, b)) * n + std::max(a, b); };
  auto is_node = [&](std::size_t v) { return g.degree.at(v) != 2; };

  std::vector<Branch> out;
  auto finish = [&](Branch& b) {
    b.length_mm = 0.0;
    for (std::size_t i = 1; i < b.path.size(); ++i) b.length_mm += step_length(d, spacing, b.path[i - 1], b.path[i]);
    b.junction.resize(b.path.size());
    for (std::size_t i = 0; i < b.path.size(); ++i) b.junction[i] = cluster_of(g, b.path[i]) >= 0;
    out.push_back(std::move(b));
  };

  // Walks from node voxel `start` through `first` until the next node.
  auto trace = [&](std::size_t start, std::size_t first) {
    Branch b;
    b.path = {start, first};
    used.insert(key(start, first));
    std::size_t prev = start, cur = first;
    while (!is_node(cur)) {
      std::size_t next = n;
      for_each_neighbour(d, cur, [&](std::size_t q) {
        if (s.mask[q] && q != prev && next == n && !used.count(key(cur, q))) next = q;
      });
      if (next == n) break;  // both edges already used: closed back on itself
      used.insert(key(cur, next));
      b.path.push_back(next);
      prev = cur;
      cur = next;
    }
    finish(b);
  };

  for (std::size_t v : s.voxels) {
    if (!is_node(v)) continue;
    if (g.degree.at(v) == 0) {
      Branch b;
      b.path = {v};
      finish(b);
      continue;
    }
    const long cv = cluster_of(g, v);
    for_each_neighbour(d, v, [&](std::size_t q) {
      if (!s.mask[q] || used.count(key(v, q))) return;
      if (cv >= 0 && cluster_of(g, q) == cv) return;  // inside the junction
      trace(v, q);
    });
  }

  // Remaining degree-2 voxels lie on node-free cycles.
  for (std::size_t v : s.voxels) {
    if (is_node(v)) continue;
    bool fresh = true;
    for_each_neighbour(d, v, [&](std::size_t q) {
      if (s.mask[q] && used.count(key(v, q))) fresh = false;
    });
    if (!fresh) continue;
    Branch b;
    b.loop = true;
    b.path = {v};
    std::size_t prev = n, cur = v;
    while (true) {
      std::size_t next = n;
      for_each_neighbour(d, cur, [&](std::size_t q) {
        if (s.mask[q] && q != prev && next == n && !used.count(key(cur, q))) next = q;
      });
      if (next == n) break;
      used.insert(key(cur, next));
      b.path.push_back(next);
      if (next == v) break;
      prev = cur;
      cur = next;
    }
    finish(b);
  }
  return out;
}

namespace {

constexpr double kSpurFactor = 2.0;
constexpr double kTipSlack = 0.5;
constexpr std::size_t kTipLookahead = 6;

// Distance (voxel units) from v to the nearest background voxel or the grid edge.
double distance_to_background(const MaskVolume& m, std::size_t v) {
  const Dims d = m.dims();
  const long x = long(v % d.nx), y = long(v / d.nx % d.ny), z = long(v / d.plane());
  double best = std::numeric_limits<double>::infinity();
  for (long k = 1;; ++k) {
    for (long dz = -k; dz <= k; ++dz)
      for (long dy = -k; dy <= k; ++dy)
        for (long dx = -k; dx <= k; ++dx) {
          if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != k) continue;
          const long X = x + dx, Y = y + dy, Z = z + dz;
          const bool outside = X < 0 || Y < 0 || Z < 0 || X >= long(d.nx) || Y >= long(d.ny) || Z >= long(d.nz);
          if (outside || !m.at(std::size_t(X), std::size_t(Y), std::size_t(Z)))
            best = std::min(best, std::sqrt(double(dx * dx + dy * dy + dz * dz)));
        }
    if (best <= double(k)) return best;
  }
}

}  // namespace

namespace {

void refresh(Skeleton& s) {
  s.voxels.clear();
  for (std::size_t i = 0; i < s.mask.size(); ++i)
    if (s.mask[i]) s.voxels.push_back(i);
}

// Spur pruning: a branch running from a line end into a junction is noise
// when it is no longer than twice the tube radius there. Only the shortest
// such branch per junction goes each round, then the rest is re-thinned.
void prune_spurs(Padded& g, const MaskVolume& m, std::vector<std::size_t>& active) {
  const Spacing unit{1.0, 1.0, 1.0};
  const Dims d = m.dims();
  for (;;) {
    Skeleton s = to_skeleton(g, m);
    const Graph graph = build_graph(s);
    std::map<long, std::vector<std::size_t>> members;
    for (const auto& [v, c] : graph.cluster) members[c].push_back(v);
    std::map<long, double> radius;
    std::map<long, const Branch*> victim;
    const auto branches = branch_decompose(s, unit);
    for (const auto& b : branches) {
      if (b.loop || b.path.size() < 2) continue;
      const bool front_end = graph.degree.at(b.path.front()) == 1, back_end = graph.degree.at(b.path.back()) == 1;
      const long cf = cluster_of(graph, b.path.front()), cb = cluster_of(graph, b.path.back());
      long c = -1;
      if (front_end && cb >= 0) c = cb;
      else if (back_end && cf >= 0) c = cf;
      if (c < 0) continue;
      if (!radius.count(c)) {
        double r = 0.0;
        for (std::size_t v : members[c]) r = std::max(r, distance_to_background(m, v));
        radius[c] = r;
      }
      if (b.length_mm > kSpurFactor * radius[c]) continue;
      auto it = victim.find(c);
      if (it == victim.end() || b.length_mm < it->second->length_mm) victim[c] = &b;
    }
    if (victim.empty()) return;
    for (const auto& [c, b] : victim)
      for (std::size_t i = 0; i < b->path.size(); ++i)
        if (!b->junction[i]) g.v[g.padded(d, b->path[i])] = 0;
    active.clear();
    for (std::size_t v : s.voxels) {
      const std::size_t p = g.padded(d, v);
      if (g.v[p]) active.push_back(p);
    }
    thin(g, active, has_one_neighbour);
  }
}

// A tube's centreline stops inside a rounded end, but thinning leaves a
// tail running out to the tip. Free ends are walked back over the outer
// half of that ramp, judged against the tube radius a few voxels inward.
// Halfway keeps flat ends, whose centreline does reach the face, close.
bool retract_tips(Skeleton& s, const MaskVolume& m) {
  const Dims d = m.dims();
  bool changed = false;
  for (std::size_t e : std::vector<std::size_t>(s.voxels)) {
    std::size_t cur = e;
    while (s.mask[cur] && s.degree(cur) == 1) {
      std::vector<std::size_t> path{cur};
      std::size_t prev = cur;
      while (path.size() <= kTipLookahead) {
        std::size_t next = path.back();
        for_each_neighbour(d, path.back(), [&](std::size_t q) {
          if (s.mask[q] && q != prev && next == path.back()) next = q;
        });
        if (next == path.back() || s.degree(next) != 2) break;
        prev = path.back();
        path.push_back(next);
      }
      if (path.size() <= kTipLookahead) break;  // short or ends at a node
      double radius = 0.0;
      for (std::size_t v : path) radius = std::max(radius, distance_to_background(m, v));
      const double here = distance_to_background(m, cur);
      if (here + kTipSlack >= distance_to_background(m, path[1]) || here >= 0.5 * radius) break;
      s.mask[cur] = 0;
      cur = path[1];
      changed = true;
    }
  }
  return changed;
}

// Thinning leaves small wiggles that add length. Swap a path voxel for
// another mask voxel bridging the same two neighbours when that is shorter
// and touches nothing else, so degrees and topology stay as they are.
bool straighten(Skeleton& s, const MaskVolume& m) {
  const Dims d = m.dims();
  const Spacing& sp = m.spacing();
  bool changed = false;
  for (bool moved = true; moved;) {
    moved = false;
    for (std::size_t p = 0; p < s.mask.size(); ++p) {
      if (!s.mask[p] || s.degree(p) != 2) continue;
      std::array<std::size_t, 2> ab{};
      int k = 0;
      for_each_neighbour(d, p, [&](std::size_t q) {
        if (s.mask[q]) ab[k++] = q;
      });
      const double dp = distance_to_background(m, p);
      double best = step_length(d, sp, ab[0], p) + step_length(d, sp, p, ab[1]) - 1e-9;
      std::size_t pick = p;
      for_each_neighbour(d, ab[0], [&](std::size_t q) {
        if (q == p || s.mask[q] || !m[q]) return;
        const double len = step_length(d, sp, ab[0], q) + step_length(d, sp, q, ab[1]);
        if (len >= best || step_length(d, {1, 1, 1}, q, ab[1]) > 1.8) return;
        int touching = 0;
        for_each_neighbour(d, q, [&](std::size_t r) { touching += s.mask[r] && r != p; });
        if (touching != 2 || distance_to_background(m, q) + kTipSlack < dp) return;
        best = len;
        pick = q;
      });
      if (pick == p) continue;
      s.mask[p] = 0;
      s.mask[pick] = 1;
      moved = changed = true;
    }
  }
  return changed;
}

}  // namespace

Skeleton skeletonize_3d(const MaskVolume& m) {
  Padded g(m);
  const Dims d = m.dims();
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < g.v.size(); ++i)
    if (g.v[i]) active.push_back(i);
  thin(g, active, is_line_end);
  // Clean-up steps can expose new simple points, so repeat until the
  // result is a fixpoint of all of them.
  for (;;) {
    // what is left is one voxel thick; drop the small bumps the first pass kept
    thin(g, active, has_one_neighbour);
    prune_spurs(g, m, active);
    Skeleton s = to_skeleton(g, m);
    bool changed = retract_tips(s, m);
    refresh(s);
    changed = straighten(s, m) || changed;
    if (!changed) return s;
    refresh(s);
    active.clear();
    for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] = 0;
    for (std::size_t v : s.voxels) {
      const std::size_t p = g.padded(d, v);
      g.v[p] = 1;
      active.push_back(p);
    }
  }
}

double skeleton_edge_length(const Skeleton& s, const Spacing& spacing) {
  const Dims d = s.mask.dims();
  const Graph g = build_graph(s);
  double total = 0.0;
  for (std::size_t v : s.voxels) {
    const long cv = cluster_of(g, v);
    for_each_neighbour(d, v, [&](std::size_t q) {
      if (q <= v || !s.mask[q]) return;
      if (cv >= 0 && cluster_of(g, q) == cv) return;
      total += step_length(d, spacing, v, q);
    });
  }
  return total;
}

double tree_detected(const std::vector<Branch>& branches, const MaskVolume& pred, const Spacing& spacing) {
  const Dims d = pred.dims();
  double total = 0.0, inside = 0.0;
  for (const auto& b : branches)
    for (std::size_t i = 1; i < b.path.size(); ++i) {
      const double l = step_length(d, spacing, b.path[i - 1], b.path[i]);
      total += l;
      if (pred[b.path[i - 1]] && pred[b.path[i]]) inside += l;
    }
  if (total <= 0.0) throw std::invalid_argument("tree_detected: ground-truth centerline has zero length");
  return inside / total;
}

bool branch_detected(const Branch& b, const MaskVolume& pred, double min_fraction) {
  std::size_t own = 0, hit = 0, hit_any = 0;
  for (std::size_t i = 0; i < b.path.size(); ++i) {
    const bool in = pred[b.path[i]] != 0;
    hit_any += in;
    if (b.junction[i]) continue;
    ++own;
    hit += in;
  }
  if (b.loop && own > 0) --own;  // a loop lists its start voxel twice
  if (own == 0) {
    const double need = std::max(1.0, min_fraction * static_cast<double>(b.path.size()));
    return static_cast<double>(hit_any) >= need;
  }
  if (b.loop && !b.junction.front() && pred[b.path.front()]) --hit;
  const double need = std::max(1.0, min_fraction * static_cast<double>(own));
  return static_cast<double>(hit) >= need;
}

double branches_detected(const std::vector<Branch>& branches, const MaskVolume& pred, double min_fraction) {
  if (branches.empty()) throw std::invalid_argument("branches_detected: no branches");
  std::size_t hit = 0;
  for (const auto& b : branches) hit += branch_detected(b, pred, min_fraction);
  return static_cast<double>(hit) / static_cast<double>(branches.size());
}

MetricsReport evaluate_pair(const MaskVolume& pred, const MaskVolume& gt, const std::string& scan_id,
                            double bd_min_fraction) {
  MetricsReport r;
  r.scan_id = scan_id;
  r.counts = confusion(pred, gt);
  r.dice = dice(r.counts);
  r.fne = fne(r.counts);
  r.fpe = fpe(r.counts);
  const Skeleton s = skeletonize_3d(gt);
  const auto branches = branch_decompose(s, gt.spacing());
  if (branches.empty()) throw std::invalid_argument("evaluate_pair: ground truth '" + scan_id + "' is empty");
  r.gt_branches = branches.size();
  for (const auto& b : branches) {
    r.gt_tree_length_mm += b.length_mm;
    r.detected_branches += branch_detected(b, pred, bd_min_fraction);
  }
  r.bd = static_cast<double>(r.detected_branches) / static_cast<double>(r.gt_branches);
  r.td = r.gt_tree_length_mm > 0.0 ? tree_detected(branches, pred, gt.spacing()) : static_cast<double>(pred[branches[0].path[0]]);
  return r;
}

std::string metrics_csv(const std::vector<MetricsReport>& rows, bool footer) {
  std::ostringstream out;
  out << kMetricsCsvHeader << '\n';
  auto columns = [](const MetricsReport& r) {
    return std::array<double, 11>{r.dice,
                                  r.fne,
                                  r.fpe,
                                  r.td,
                                  r.bd,
                                  double(r.counts.tp),
                                  double(r.counts.fp),
                                  double(r.counts.fn),
                                  double(r.gt_branches),
                                  double(r.detected_branches),
                                  r.gt_tree_length_mm};
  };
  for (const auto& r : rows) {
    out << csv_field(r.scan_id) << ',' << format_real(r.dice) << ',' << format_real(r.fne) << ','
        << format_real(r.fpe) << ',' << format_real(r.td) << ',' << format_real(r.bd) << ',' << r.counts.tp << ','
        << r.counts.fp << ',' << r.counts.fn << ',' << r.gt_branches << ',' << r.detected_branches << ','
        << format_real(r.gt_tree_length_mm) << '\n';
  }
  if (footer && !rows.empty()) {
    std::array<double, 11> mean{}, var{};
    for (const auto& r : rows) {
      const auto c = columns(r);
      for (std::size_t k = 0; k < c.size(); ++k) mean[k] += c[k];
    }
    for (auto& m : mean) m /= static_cast<double>(rows.size());
    for (const auto& r : rows) {
      const auto c = columns(r);
      for (std::size_t k = 0; k < c.size(); ++k) var[k] += (c[k] - mean[k]) * (c[k] - mean[k]);
    }
    out << "mean±std";
    for (std::size_t k = 0; k < mean.size(); ++k)
      out << ',' << format_real(mean[k]) << "±" << format_real(std::sqrt(var[k] / static_cast<double>(rows.size())));
    out << '\n';
  }
  return out.str();
}

}  // namespace airseg
