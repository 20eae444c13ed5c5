#include "airseg/inferpost.hpp"

#include <algorithm>

#include "airseg/prep.hpp"

namespace airseg {

Volume predict_volume(nn::MEDSeg& model, const Volume& v) {
  if (v.kind() != IntensityKind::normalized) throw VolumeError("predict_volume expects a normalized volume");
  const Dims d = v.dims();
  const std::size_t plane = d.plane();
  Volume out(d, v.spacing(), IntensityKind::probability);
  out.set_orientation(v.orientation());

  const nn::NormMode saved = model.mode();
  model.set_mode(nn::NormMode::eval);
  nn::NoGradGuard no_grad;
  for (std::size_t z = 0; z < d.nz; ++z) {
    const Slice25D s = extract_25d(v, z);
    nn::Tensor x({1, 3, d.ny, d.nx}, std::vector<float>(s.channels.begin(), s.channels.end()));
    const nn::Tensor p = model.forward(x);
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(z * plane));
  }
  model.set_mode(saved);
  return out;
}

MaskVolume threshold(const Volume& p, double t) {
  MaskVolume m(p.dims(), p.spacing());
  m.set_orientation(p.orientation());
  const auto& src = p.data();
  auto& dst = m.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<double>(src[i]) >= t ? 1 : 0;
  return m;
}

}  // namespace airseg
