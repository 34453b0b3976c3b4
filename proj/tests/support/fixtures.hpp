#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <string>

#include <unistd.h>

#include "hcbcam/image.hpp"
#include "hcbcam/manifest.hpp"

namespace hcbcam::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
  explicit TempDir(const std::string& tag = "hcbcam") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            (tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
  std::filesystem::path path_;
};

inline void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out << bytes;
}

inline void write_gray_png(const std::filesystem::path& p, int h, int w, std::uint8_t v = 128) {
  write_png(p, Image8(h, w, v));
}

/// Record without a backing file; enough for hierarchy and fold logic.
inline ImageRecord fake_record(const std::string& brand, const std::string& model, int device, int image) {
  return {brand + "_" + model + "_" + std::to_string(device) + "_" + std::to_string(image) + ".jpg",
          brand, model, device, std::to_string(image), 3072, 2304};
}

}  // namespace hcbcam::testing
