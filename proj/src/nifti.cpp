#include "airseg/nifti.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <iostream>
#include <limits>

#include "airseg/fsutil.hpp"

namespace airseg {

namespace fs = std::filesystem;

namespace {

// Byte offsets of the NIfTI-1 header fields used here.
constexpr std::size_t kOffDim = 40;
constexpr std::size_t kOffDatatype = 70;
constexpr std::size_t kOffBitpix = 72;
constexpr std::size_t kOffPixdim = 76;
constexpr std::size_t kOffVoxOffset = 108;
constexpr std::size_t kOffSclSlope = 112;
constexpr std::size_t kOffSclInter = 116;
constexpr std::size_t kOffXyztUnits = 123;
constexpr std::size_t kOffDescrip = 148;
constexpr std::size_t kOffQformCode = 252;
constexpr std::size_t kOffSformCode = 254;
constexpr std::size_t kOffQuatern = 256;
constexpr std::size_t kOffSrow = 280;
constexpr std::size_t kOffIntentName = 328;
constexpr std::size_t kOffMagic = 344;

class HeaderReader {
 public:
  HeaderReader(const std::vector<std::uint8_t>& bytes, bool swap) : bytes_(bytes), swap_(swap) {}

  template <typename T>
  T get(std::size_t off) const {
    std::array<std::uint8_t, sizeof(T)> raw;
    std::memcpy(raw.data(), bytes_.data() + off, sizeof(T));
    if (swap_) std::reverse(raw.begin(), raw.end());
    T v;
    std::memcpy(&v, raw.data(), sizeof(T));
    return v;
  }
  std::string text(std::size_t off, std::size_t len) const {
    const char* p = reinterpret_cast<const char*>(bytes_.data() + off);
    return std::string(p, strnlen(p, len));
  }

 private:
  const std::vector<std::uint8_t>& bytes_;
  bool swap_;
};

class HeaderWriter {
 public:
  HeaderWriter() : bytes_(kNiftiVoxOffset, 0) {}

  template <typename T>
  void put(std::size_t off, T v) {
    static_assert(std::endian::native == std::endian::little, "writer assumes a little-endian host");
    std::memcpy(bytes_.data() + off, &v, sizeof(T));
  }
  void text(std::size_t off, std::size_t len, const std::string& s) {
    std::memcpy(bytes_.data() + off, s.data(), std::min(len - 1, s.size()));
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

std::size_t bytes_per_voxel(std::int16_t datatype) {
  switch (datatype) {
    case kNiftiUint8: return 1;
    case kNiftiInt16: return 2;
    case kNiftiFloat32: return 4;
    default: throw NiftiError("unsupported NIfTI datatype code " + std::to_string(datatype));
  }
}

template <typename T>
T load_sample(const std::uint8_t* p, bool swap) {
  std::array<std::uint8_t, sizeof(T)> raw;
  std::memcpy(raw.data(), p, sizeof(T));
  if (swap) std::reverse(raw.begin(), raw.end());
  T v;
  std::memcpy(&v, raw.data(), sizeof(T));
  return v;
}

std::vector<std::uint8_t> header_for(Dims dims, Spacing spacing, std::int16_t datatype, const Orientation& o,
                                     const std::string& intent) {
  HeaderWriter h;
  h.put<std::int32_t>(0, static_cast<std::int32_t>(kNiftiHeaderSize));
  h.put<char>(38, 'r');
  const std::array<std::int16_t, 8> dim = {3,
                                           static_cast<std::int16_t>(dims.nx),
                                           static_cast<std::int16_t>(dims.ny),
                                           static_cast<std::int16_t>(dims.nz),
                                           1, 1, 1, 1};
  for (std::size_t i = 0; i < 8; ++i) h.put<std::int16_t>(kOffDim + 2 * i, dim[i]);
  h.put<std::int16_t>(kOffDatatype, datatype);
  h.put<std::int16_t>(kOffBitpix, static_cast<std::int16_t>(8 * bytes_per_voxel(datatype)));
  const std::array<float, 8> pixdim = {1.0f, static_cast<float>(spacing.sx), static_cast<float>(spacing.sy),
                                       static_cast<float>(spacing.sz), 1.0f, 1.0f, 1.0f, 1.0f};
  for (std::size_t i = 0; i < 8; ++i) h.put<float>(kOffPixdim + 4 * i, pixdim[i]);
  h.put<float>(kOffVoxOffset, static_cast<float>(kNiftiVoxOffset));
  h.put<float>(kOffSclSlope, 1.0f);
  h.put<float>(kOffSclInter, 0.0f);
  h.put<std::uint8_t>(kOffXyztUnits, 2);  // mm
  h.text(kOffDescrip, 80, "airseg");
  h.put<std::int16_t>(kOffQformCode, o.qform_code);
  h.put<std::int16_t>(kOffSformCode, o.sform_code);
  for (std::size_t i = 0; i < o.quatern.size(); ++i) h.put<float>(kOffQuatern + 4 * i, o.quatern[i]);
  for (std::size_t i = 0; i < o.srow.size(); ++i) h.put<float>(kOffSrow + 4 * i, o.srow[i]);
  h.text(kOffIntentName, 16, intent);
  h.text(kOffMagic, 4, "n+1");
  return std::move(h.bytes());
}

void check_dims_fit(Dims d) {
  constexpr std::size_t lim = std::numeric_limits<std::int16_t>::max();
  if (d.nx > lim || d.ny > lim || d.nz > lim) throw NiftiError("dims exceed NIfTI-1 int16 limit");
}

}  // namespace

AnyVolume read_nifti(const fs::path& path) {
  const std::vector<std::uint8_t> bytes = read_file_bytes(path);
  if (bytes.size() < kNiftiHeaderSize) throw NiftiError(path.string() + ": truncated header");

  bool swap = false;
  if (HeaderReader(bytes, false).get<std::int32_t>(0) != static_cast<std::int32_t>(kNiftiHeaderSize)) {
    swap = true;
    if (HeaderReader(bytes, true).get<std::int32_t>(0) != static_cast<std::int32_t>(kNiftiHeaderSize))
      throw NiftiError(path.string() + ": malformed header (sizeof_hdr != 348)");
  }
  const HeaderReader h(bytes, swap);

  const std::string magic = h.text(kOffMagic, 4);
  if (magic != "n+1") throw NiftiError(path.string() + ": not a single-file NIfTI-1 image (magic '" + magic + "')");

  std::array<std::int16_t, 8> dim{};
  for (std::size_t i = 0; i < 8; ++i) dim[i] = h.get<std::int16_t>(kOffDim + 2 * i);
  if (dim[0] < 1 || dim[0] > 7) throw NiftiError(path.string() + ": invalid dim[0]");
  for (int i = 4; i <= dim[0]; ++i)
    if (dim[i] > 1) throw NiftiError(path.string() + ": 4D and higher images are not supported");
  auto axis = [&](int i) -> std::size_t {
    if (i > dim[0]) return 1;
    if (dim[i] < 1) throw NiftiError(path.string() + ": non-positive dim[" + std::to_string(i) + "]");
    return static_cast<std::size_t>(dim[i]);
  };
  const Dims dims{axis(1), axis(2), axis(3)};

  const std::int16_t datatype = h.get<std::int16_t>(kOffDatatype);
  const std::size_t bpv = bytes_per_voxel(datatype);

  std::array<double, 3> sp{};
  for (std::size_t i = 0; i < 3; ++i) {
    sp[i] = std::fabs(static_cast<double>(h.get<float>(kOffPixdim + 4 * (i + 1))));
    if (sp[i] == 0.0 || !std::isfinite(sp[i])) {
      std::cerr << "warning: " << path.string() << ": pixdim[" << i + 1 << "] is zero, using 1.0\n";
      sp[i] = 1.0;
    }
  }
  const Spacing spacing{sp[0], sp[1], sp[2]};

  const float vox_offset = h.get<float>(kOffVoxOffset);
  const std::size_t offset = vox_offset < static_cast<float>(kNiftiHeaderSize)
                                 ? kNiftiVoxOffset
                                 : static_cast<std::size_t>(vox_offset);
  const std::size_t n = dims.voxels();
  if (bytes.size() < offset + n * bpv) throw NiftiError(path.string() + ": truncated data section");
  const std::uint8_t* src = bytes.data() + offset;

  const float slope = h.get<float>(kOffSclSlope);
  const float inter = h.get<float>(kOffSclInter);
  const bool scaled = slope != 0.0f && std::isfinite(slope) && !(slope == 1.0f && inter == 0.0f);

  Orientation orient;
  orient.qform_code = h.get<std::int16_t>(kOffQformCode);
  orient.sform_code = h.get<std::int16_t>(kOffSformCode);
  for (std::size_t i = 0; i < orient.quatern.size(); ++i) orient.quatern[i] = h.get<float>(kOffQuatern + 4 * i);
  for (std::size_t i = 0; i < orient.srow.size(); ++i) orient.srow[i] = h.get<float>(kOffSrow + 4 * i);

  if (datatype == kNiftiUint8 && !scaled && std::all_of(src, src + n, [](std::uint8_t v) { return v <= 1; })) {
    MaskVolume m(dims, spacing, std::vector<std::uint8_t>(src, src + n));
    m.set_orientation(orient);
    return m;
  }

  std::vector<float> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* p = src + i * bpv;
    double v = 0.0;
    switch (datatype) {
      case kNiftiUint8: v = *p; break;
      case kNiftiInt16: v = load_sample<std::int16_t>(p, swap); break;
      case kNiftiFloat32: v = load_sample<float>(p, swap); break;
    }
    data[i] = scaled ? static_cast<float>(v * slope + inter) : static_cast<float>(v);
  }

  IntensityKind kind = IntensityKind::hounsfield;
  const std::string intent = h.text(kOffIntentName, 16);
  if (intent == "normalized" || intent == "probability") kind = intensity_kind_from_string(intent);

  Volume v(dims, spacing, kind, std::move(data));
  v.set_orientation(orient);
  return v;
}

Volume read_nifti_volume(const fs::path& path) {
  AnyVolume any = read_nifti(path);
  if (auto* v = std::get_if<Volume>(&any)) return std::move(*v);
  // A 0/1 uint8 image is still a valid intensity image when the caller asks for one.
  const MaskVolume& m = std::get<MaskVolume>(any);
  Volume v(m.dims(), m.spacing(), IntensityKind::hounsfield,
           std::vector<float>(m.data().begin(), m.data().end()));
  v.set_orientation(m.orientation());
  return v;
}

MaskVolume read_nifti_mask(const fs::path& path) {
  AnyVolume any = read_nifti(path);
  if (auto* m = std::get_if<MaskVolume>(&any)) return std::move(*m);
  throw NiftiError(path.string() + ": expected a binary uint8 mask");
}

void write_nifti(const Volume& v, const fs::path& path, NiftiStorage storage) {
  v.validate();
  check_dims_fit(v.dims());
  const std::int16_t datatype = storage == NiftiStorage::int16 ? kNiftiInt16 : kNiftiFloat32;
  std::vector<std::uint8_t> bytes = header_for(v.dims(), v.spacing(), datatype, v.orientation(), to_string(v.kind()));
  const std::size_t bpv = bytes_per_voxel(datatype);
  bytes.resize(kNiftiVoxOffset + v.size() * bpv);
  std::uint8_t* dst = bytes.data() + kNiftiVoxOffset;
  if (datatype == kNiftiFloat32) {
    std::memcpy(dst, v.data().data(), v.size() * sizeof(float));
  } else {
    for (std::size_t i = 0; i < v.size(); ++i) {
      const float x = v[i];
      if (x != std::nearbyint(x) || x < std::numeric_limits<std::int16_t>::min() ||
          x > std::numeric_limits<std::int16_t>::max())
        throw NiftiError("value " + std::to_string(x) + " is not representable as int16");
      const auto s = static_cast<std::int16_t>(x);
      std::memcpy(dst + 2 * i, &s, 2);
    }
  }
  write_file_atomic(path, bytes, ends_with_gz(path));
}

void write_nifti(const MaskVolume& m, const fs::path& path) {
  m.validate();
  check_dims_fit(m.dims());
  std::vector<std::uint8_t> bytes = header_for(m.dims(), m.spacing(), kNiftiUint8, m.orientation(), "");
  bytes.insert(bytes.end(), m.data().begin(), m.data().end());
  write_file_atomic(path, bytes, ends_with_gz(path));
}

std::string nifti_stem(const fs::path& path) {
  std::string name = path.filename().string();
  for (const std::string suffix : {".nii.gz", ".nii"}) {
    if (name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
      return name.substr(0, name.size() - suffix.size());
  }
  return path.stem().string();
}

bool is_nifti_path(const fs::path& path) {
  const std::string name = path.filename().string();
  auto ends = [&](std::string_view s) { return name.size() > s.size() && name.ends_with(s); };
  return ends(".nii") || ends(".nii.gz");
}

}  // namespace airseg
