#pragma once

#include "airseg/medseg.hpp"
#include "airseg/volume.hpp"

namespace airseg {

/// Runs the model on every axial plane (2.5D input, full resolution, eval
/// mode) and stacks the probability maps. Input must be normalized.
Volume predict_volume(nn::MEDSeg& model, const Volume& v);

/// 1 where p >= t.
MaskVolume threshold(const Volume& p, double t = 0.5);

}  // namespace airseg
