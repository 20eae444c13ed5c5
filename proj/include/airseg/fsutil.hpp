#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace airseg {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reads a whole file; gzip streams are inflated transparently.
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

/// Writes to "<path>.partial" then renames over path, so readers never see a
/// half-written file. gzip-compresses when `gzip` is set.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes, bool gzip = false);
void write_text_atomic(const std::filesystem::path& path, std::string_view text);

bool ends_with_gz(const std::filesystem::path& path);

}  // namespace airseg
