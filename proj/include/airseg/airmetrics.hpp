#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "airseg/volume.hpp"

namespace airseg {

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
  bool operator==(const ConfusionCounts&) const = default;
};

/// Voxelwise counts; throws VolumeError when dims differ.
ConfusionCounts confusion(const MaskVolume& pred, const MaskVolume& gt);

/// 2TP/(2TP+FP+FN); 1 when both masks are empty.
double dice(const ConfusionCounts& c);
/// FN/(TP+FN); 0 when the ground truth is empty.
double fne(const ConfusionCounts& c);
/// FP/(TP+FP); 0 when the prediction is empty.
double fpe(const ConfusionCounts& c);

/// Thinned mask plus its voxel list (linear indices, ascending).
struct Skeleton {
  MaskVolume mask;
  std::vector<std::size_t> voxels;

  /// Number of 26-neighbours that are skeleton voxels.
  int degree(std::size_t linear) const;
  std::size_t endpoint_count() const;
  /// Junctions count 26-adjacent voxels of degree >= 3 as one.
  std::size_t junction_count() const;
};

/// Topology-preserving thinning: border voxels that are simple (26-connected
/// foreground, 6-connected background) and are not line ends are removed in
/// six directional sub-iterations per pass until nothing changes.
Skeleton skeletonize_3d(const MaskVolume& m);

/// True if p can be removed without changing the local topology, judged on
/// its 3x3x3 neighbourhood (bit i = offset (i%3-1, i/3%3-1, i/9-1); bit 13 ignored).
bool is_simple_point(std::uint32_t neighbourhood);

struct Branch {
  std::vector<std::size_t> path;  // linear indices, node to node
  double length_mm = 0.0;
  bool loop = false;
  /// path[i] belongs to a junction cluster
  std::vector<bool> junction;
};

/// Splits the skeleton at endpoints and junction clusters. Steps between two
/// voxels of the same junction cluster belong to no branch. Cycles without any
/// node become a single loop branch.
std::vector<Branch> branch_decompose(const Skeleton& s, const Spacing& spacing);

/// Total length of skeleton edges, excluding steps inside a junction cluster.
double skeleton_edge_length(const Skeleton& s, const Spacing& spacing);

/// Fraction of centerline length whose steps have both ends inside pred.
double tree_detected(const std::vector<Branch>& gt_branches, const MaskVolume& pred, const Spacing& spacing);

/// A branch counts as detected when at least max(1, min_fraction * n) of its
/// n voxels lie inside pred. Junction voxels are shared between branches and
/// only count for branches made of nothing else.
bool branch_detected(const Branch& b, const MaskVolume& pred, double min_fraction);
double branches_detected(const std::vector<Branch>& branches, const MaskVolume& pred, double min_fraction = 0.0);

struct MetricsReport {
  std::string scan_id;
  double dice = 0, fne = 0, fpe = 0, td = 0, bd = 0;
  ConfusionCounts counts;
  std::size_t gt_branches = 0;
  std::size_t detected_branches = 0;
  double gt_tree_length_mm = 0;
};

MetricsReport evaluate_pair(const MaskVolume& pred, const MaskVolume& gt, const std::string& scan_id = {},
                            double bd_min_fraction = 0.0);

inline constexpr const char* kMetricsCsvHeader =
    "scan_id,dice,fne,fpe,td,bd,tp,fp,fn,gt_branches,detected_branches,gt_tree_length_mm";

/// Rows, optionally followed by a "mean±std" footer (population std per column).
std::string metrics_csv(const std::vector<MetricsReport>& rows, bool footer = true);

}  // namespace airseg
