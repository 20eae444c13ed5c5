#include "airseg/fsutil.hpp"

#include <zlib.h>

#include <cstdio>
#include <fstream>

namespace airseg {

namespace fs = std::filesystem;

bool ends_with_gz(const fs::path& path) { return path.extension() == ".gz"; }

std::vector<std::uint8_t> read_file_bytes(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("no such file: " + path.string());
  gzFile f = gzopen(path.c_str(), "rb");
  if (f == nullptr) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> out;
  std::uint8_t buf[1 << 16];
  for (;;) {
    const int n = gzread(f, buf, sizeof(buf));
    if (n < 0) {
      int errnum = 0;
      std::string msg = gzerror(f, &errnum);
      gzclose(f);
      throw IoError("read error in " + path.string() + ": " + msg);
    }
    if (n == 0) break;
    out.insert(out.end(), buf, buf + n);
  }
  gzclose(f);
  return out;
}

void write_file_atomic(const fs::path& path, std::span<const std::uint8_t> bytes, bool gzip) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  const fs::path tmp = path.string() + ".partial";
  bool ok = false;
  if (gzip) {
    gzFile f = gzopen(tmp.c_str(), "wb6");
    if (f != nullptr) {
      ok = true;
      std::size_t off = 0;
      while (ok && off < bytes.size()) {
        const auto chunk = static_cast<unsigned>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
        ok = gzwrite(f, bytes.data() + off, chunk) == static_cast<int>(chunk);
        off += chunk;
      }
      ok = (gzclose(f) == Z_OK) && ok;
    }
  } else {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (out) {
      out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
      out.close();
      ok = static_cast<bool>(out);
    }
  }
  if (!ok) {
    std::error_code ec;
    fs::remove(tmp, ec);
    throw IoError("cannot write " + path.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot write " + path.string() + ": " + ec.message());
  }
}

void write_text_atomic(const fs::path& path, std::string_view text) {
  write_file_atomic(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()}, false);
}

}  // namespace airseg
