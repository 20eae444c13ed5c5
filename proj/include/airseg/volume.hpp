#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace airseg {

/// Voxel counts along x, y, z.
struct Dims {
  std::size_t nx = 1;
  std::size_t ny = 1;
  std::size_t nz = 1;

  std::size_t voxels() const { return nx * ny * nz; }
  std::size_t plane() const { return nx * ny; }
  bool operator==(const Dims&) const = default;
};

/// Physical voxel size in mm along x, y, z.
struct Spacing {
  double sx = 1.0;
  double sy = 1.0;
  double sz = 1.0;

  double voxel_volume() const { return sx * sy * sz; }
  bool operator==(const Spacing&) const = default;
};

enum class IntensityKind : std::uint8_t { hounsfield, normalized, probability };

const char* to_string(IntensityKind kind);
IntensityKind intensity_kind_from_string(const std::string& name);

/// NIfTI orientation fields carried through read/write without interpretation.
struct Orientation {
  std::int16_t qform_code = 0;
  std::int16_t sform_code = 0;
  std::array<float, 6> quatern{};  // b, c, d, qoffset_x, qoffset_y, qoffset_z
  std::array<float, 12> srow{};    // srow_x, srow_y, srow_z
  bool operator==(const Orientation&) const = default;
};

class VolumeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(Dims dims, Spacing spacing, T fill = T{}) : dims_(dims), spacing_(spacing), data_(checked_count(dims), fill) {
    check_spacing(spacing);
  }
  Grid(Dims dims, Spacing spacing, std::vector<T> data) : dims_(dims), spacing_(spacing), data_(std::move(data)) {
    check_spacing(spacing);
    if (data_.size() != checked_count(dims)) throw VolumeError("voxel data length does not match dims");
  }

  const Dims& dims() const { return dims_; }
  const Spacing& spacing() const { return spacing_; }
  const std::vector<T>& data() const { return data_; }
  std::vector<T>& data() { return data_; }
  std::size_t size() const { return data_.size(); }

  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const { return x + dims_.nx * (y + dims_.ny * z); }
  T& at(std::size_t x, std::size_t y, std::size_t z) { return data_[index(x, y, z)]; }
  const T& at(std::size_t x, std::size_t y, std::size_t z) const { return data_[index(x, y, z)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  const Orientation& orientation() const { return orientation_; }
  void set_orientation(const Orientation& o) { orientation_ = o; }

 protected:
  static std::size_t checked_count(Dims d) {
    if (d.nx < 1 || d.ny < 1 || d.nz < 1) throw VolumeError("volume dims must be >= 1");
    return d.voxels();
  }
  static void check_spacing(Spacing s) {
    if (!(s.sx > 0 && s.sy > 0 && s.sz > 0)) throw VolumeError("volume spacing must be > 0");
  }

  Dims dims_;
  Spacing spacing_;
  std::vector<T> data_;
  Orientation orientation_;
};
}  // namespace detail

/// Scalar 3D grid, x-fastest. Intensity kind travels with the data.
class Volume : public detail::Grid<float> {
 public:
  Volume() = default;
  Volume(Dims dims, Spacing spacing, IntensityKind kind, float fill = 0.0f)
      : Grid(dims, spacing, fill), kind_(kind) {
    validate();
  }
  Volume(Dims dims, Spacing spacing, IntensityKind kind, std::vector<float> data)
      : Grid(dims, spacing, std::move(data)), kind_(kind) {
    validate();
  }

  IntensityKind kind() const { return kind_; }
  void set_kind(IntensityKind kind) {
    kind_ = kind;
    validate();
  }
  /// Throws if normalized/probability data leaves [0,1].
  void validate() const;

  bool operator==(const Volume& o) const {
    return dims_ == o.dims_ && spacing_ == o.spacing_ && kind_ == o.kind_ && data_ == o.data_;
  }

 private:
  IntensityKind kind_ = IntensityKind::hounsfield;
};

/// Binary label grid with values in {0,1}.
class MaskVolume : public detail::Grid<std::uint8_t> {
 public:
  MaskVolume() = default;
  MaskVolume(Dims dims, Spacing spacing) : Grid(dims, spacing, 0) {}
  MaskVolume(Dims dims, Spacing spacing, std::vector<std::uint8_t> data) : Grid(dims, spacing, std::move(data)) {
    validate();
  }

  void validate() const;
  std::size_t count() const;
  bool operator==(const MaskVolume& o) const {
    return dims_ == o.dims_ && spacing_ == o.spacing_ && data_ == o.data_;
  }
};

}  // namespace airseg
