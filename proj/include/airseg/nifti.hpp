#pragma once

#include <filesystem>
#include <variant>

#include "airseg/volume.hpp"

namespace airseg {

using AnyVolume = std::variant<Volume, MaskVolume>;

class NiftiError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// On-disk sample type for Volume data.
enum class NiftiStorage { float32, int16 };

// NIfTI-1 datatype codes handled here.
inline constexpr std::int16_t kNiftiUint8 = 2;
inline constexpr std::int16_t kNiftiInt16 = 4;
inline constexpr std::int16_t kNiftiFloat32 = 16;
inline constexpr std::size_t kNiftiHeaderSize = 348;
inline constexpr std::size_t kNiftiVoxOffset = 352;

/// Reads a single-file NIfTI-1 image (.nii or .nii.gz; either byte order).
///
/// uint8 images whose values are all 0/1 come back as MaskVolume; everything
/// else is a float Volume with scl_slope/scl_inter applied. The intensity kind
/// is restored from intent_name when it was written by write_nifti, otherwise
/// it defaults to hounsfield.
AnyVolume read_nifti(const std::filesystem::path& path);

/// Convenience wrappers that throw if the file holds the other kind.
Volume read_nifti_volume(const std::filesystem::path& path);
MaskVolume read_nifti_mask(const std::filesystem::path& path);

/// Writes little-endian NIfTI-1 with vox_offset 352; gzip when the path ends in ".gz".
/// The file appears atomically (temp file + rename).
void write_nifti(const Volume& v, const std::filesystem::path& path, NiftiStorage storage = NiftiStorage::float32);
void write_nifti(const MaskVolume& m, const std::filesystem::path& path);

/// Strips ".nii" / ".nii.gz" from a filename.
std::string nifti_stem(const std::filesystem::path& path);
bool is_nifti_path(const std::filesystem::path& path);

}  // namespace airseg
