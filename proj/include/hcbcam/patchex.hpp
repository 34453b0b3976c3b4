#pragma once

// Patch extraction: sliding-window tiling, homogeneity classification from
// per-channel standard deviations, homogeneous-first selection, per-channel
// mean subtraction, and the on-disk patch cache.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "hcbcam/common.hpp"
#include "hcbcam/image.hpp"

namespace hcbcam {

inline constexpr int kPatchSize = 128;
inline constexpr int kPatchStride = 32;

enum class Homogeneity { Homogeneous, NonHomogeneous, Saturated };

inline const char* to_string(Homogeneity h) {
  switch (h) {
    case Homogeneity::Homogeneous: return "homogeneous";
    case Homogeneity::NonHomogeneous: return "nonhomogeneous";
    case Homogeneity::Saturated: return "saturated";
  }
  return "?";
}

inline Homogeneity homogeneity_from_string(const std::string& s) {
  if (s == "homogeneous") return Homogeneity::Homogeneous;
  if (s == "nonhomogeneous") return Homogeneity::NonHomogeneous;
  if (s == "saturated") return Homogeneity::Saturated;
  throw DataError("unknown homogeneity class: " + s);
}

/// Std bounds on unit-scale pixels. Homogeneous is the closed interval [lower, upper].
struct Thresholds {
  double lower = 0.005;
  double upper = 0.02;
};

struct TileOrigin {
  int row = 0;
  int col = 0;
  friend auto operator<=>(const TileOrigin&, const TileOrigin&) = default;
};

struct TileGeometry {
  int size = kPatchSize;
  int stride = kPatchStride;
};

using ChannelStats = std::array<double, 3>;

struct Patch {
  int size = kPatchSize;
  std::vector<float> values;  // 3 x size x size, channel-major
  TileOrigin origin;
  ChannelStats channel_stds{};
  ChannelStats channel_means{};
  Homogeneity cls = Homogeneity::NonHomogeneous;
  bool preprocessed = false;

  std::span<const float> channel(int c) const {
    const auto n = static_cast<std::size_t>(size) * static_cast<std::size_t>(size);
    return std::span<const float>(values).subspan(static_cast<std::size_t>(c) * n, n);
  }
};

inline std::size_t tile_count(int height, int width, TileGeometry g = {}) {
  if (height < g.size || width < g.size) return 0;
  return static_cast<std::size_t>((height - g.size) / g.stride + 1) *
         static_cast<std::size_t>((width - g.size) / g.stride + 1);
}

/// Row-major tile origins.
inline std::vector<TileOrigin> tile_origins(int height, int width, TileGeometry g = {}) {
  if (g.size <= 0 || g.stride <= 0) throw UsageError("tile size and stride must be positive");
  if (height < g.size || width < g.size)
    throw DataError("image " + std::to_string(width) + "x" + std::to_string(height) + " is smaller than one " +
                    std::to_string(g.size) + "x" + std::to_string(g.size) + " tile");
  std::vector<TileOrigin> out;
  out.reserve(tile_count(height, width, g));
  for (int r = 0; r + g.size <= height; r += g.stride)
    for (int c = 0; c + g.size <= width; c += g.stride) out.push_back({r, c});
  return out;
}

/// Copies one tile into channel-major float storage.
template <class T>
void copy_tile(const basic_image<T>& img, TileOrigin o, int size, std::span<float> out) {
  const auto plane = static_cast<std::size_t>(size) * static_cast<std::size_t>(size);
  for (int ch = 0; ch < 3; ++ch)
    for (int r = 0; r < size; ++r)
      for (int c = 0; c < size; ++c)
        out[static_cast<std::size_t>(ch) * plane + static_cast<std::size_t>(r) * size + static_cast<std::size_t>(c)] =
            static_cast<float>(img.unit(o.row + r, o.col + c, ch));
}

/// Two-pass population mean / std of each channel of channel-major values.
inline void channel_moments(std::span<const float> values, int size, ChannelStats& means, ChannelStats& stds) {
  const auto n = static_cast<std::size_t>(size) * static_cast<std::size_t>(size);
  for (int ch = 0; ch < 3; ++ch) {
    const auto plane = values.subspan(static_cast<std::size_t>(ch) * n, n);
    double sum = 0.0;
    for (float v : plane) sum += v;
    const double mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (float v : plane) {
      const double d = static_cast<double>(v) - mean;
      ss += d * d;
    }
    means[static_cast<std::size_t>(ch)] = mean;
    stds[static_cast<std::size_t>(ch)] = std::sqrt(ss / static_cast<double>(n));
  }
}

inline double max_std(const ChannelStats& stds) { return std::max({stds[0], stds[1], stds[2]}); }

/// Class as a pure function of the channel stds.
inline Homogeneity classify_stds(const ChannelStats& stds, Thresholds t = {}) {
  if (max_std(stds) < t.lower) return Homogeneity::Saturated;
  for (double s : stds)
    if (s < t.lower || s > t.upper) return Homogeneity::NonHomogeneous;
  return Homogeneity::Homogeneous;
}

/// Tiles an image; each patch carries raw values, moments and class.
template <class T>
std::vector<Patch> tile_image(const basic_image<T>& img, TileGeometry g = {}, Thresholds t = {}) {
  std::vector<Patch> out;
  for (const auto& o : tile_origins(img.height(), img.width(), g)) {
    Patch p;
    p.size = g.size;
    p.origin = o;
    p.values.resize(3 * static_cast<std::size_t>(g.size) * static_cast<std::size_t>(g.size));
    copy_tile(img, o, g.size, p.values);
    channel_moments(p.values, p.size, p.channel_means, p.channel_stds);
    p.cls = classify_stds(p.channel_stds, t);
    out.push_back(std::move(p));
  }
  return out;
}

/// Recomputes the moments of `p`, stores them and returns the class.
inline Homogeneity classify_patch(Patch& p, Thresholds t = {}) {
  ChannelStats means{};
  channel_moments(p.values, p.size, means, p.channel_stds);
  if (!p.preprocessed) p.channel_means = means;
  p.cls = classify_stds(p.channel_stds, t);
  return p.cls;
}

/// Subtracts each channel's mean in place.
inline void subtract_channel_means(std::span<float> values, int size) {
  const auto n = static_cast<std::size_t>(size) * static_cast<std::size_t>(size);
  for (int ch = 0; ch < 3; ++ch) {
    auto plane = values.subspan(static_cast<std::size_t>(ch) * n, n);
    double sum = 0.0;
    for (float v : plane) sum += v;
    const double mean = sum / static_cast<double>(n);
    for (float& v : plane) v = static_cast<float>(static_cast<double>(v) - mean);
  }
}

inline Patch preprocess_patch(Patch p) {
  subtract_channel_means(p.values, p.size);
  p.preprocessed = true;
  return p;
}

struct TileInfo {
  TileOrigin origin;
  ChannelStats stds{};
  ChannelStats means{};
  Homogeneity cls = Homogeneity::NonHomogeneous;
};

/// Moments and class of every tile in row-major order, without keeping pixels.
template <class T>
std::vector<TileInfo> survey_tiles(const basic_image<T>& img, TileGeometry g = {}, Thresholds t = {}) {
  std::vector<TileInfo> out;
  std::vector<float> buf(3 * static_cast<std::size_t>(g.size) * static_cast<std::size_t>(g.size));
  for (const auto& o : tile_origins(img.height(), img.width(), g)) {
    TileInfo info;
    info.origin = o;
    copy_tile(img, o, g.size, buf);
    channel_moments(buf, g.size, info.means, info.stds);
    info.cls = classify_stds(info.stds, t);
    out.push_back(info);
  }
  return out;
}

/// Homogeneous tiles by ascending max-channel std, then non-homogeneous by
/// ascending std, then saturated by descending std. Ties keep row-major order.
inline std::vector<TileInfo> rank_tiles(std::vector<TileInfo> tiles) {
  auto group = [](Homogeneity h) {
    switch (h) {
      case Homogeneity::Homogeneous: return 0;
      case Homogeneity::NonHomogeneous: return 1;
      case Homogeneity::Saturated: return 2;
    }
    return 3;
  };
  std::stable_sort(tiles.begin(), tiles.end(), [&](const TileInfo& a, const TileInfo& b) {
    const int ga = group(a.cls), gb = group(b.cls);
    if (ga != gb) return ga < gb;
    const double sa = max_std(a.stds), sb = max_std(b.stds);
    return ga == 2 ? sa > sb : sa < sb;
  });
  return tiles;
}

template <class T>
std::vector<TileInfo> rank_tiles(const basic_image<T>& img, std::size_t p, TileGeometry g = {}, Thresholds t = {}) {
  auto ranked = rank_tiles(survey_tiles(img, g, t));
  if (ranked.size() > p) ranked.resize(p);
  return ranked;
}

struct PatchSelection {
  std::vector<Patch> patches;
  std::size_t n_homogeneous = 0;
  std::size_t n_nonhomogeneous = 0;
  std::size_t n_saturated = 0;
  std::size_t requested = 0;
};

struct ExtractOptions {
  TileGeometry geometry;
  Thresholds thresholds;
};

/// Picks min(p, tiles) patches, homogeneous first, and mean-subtracts them.
/// Selection is a pure function of the image; `seed` is accepted so that
/// randomized strategies can share the signature.
template <class T>
PatchSelection select_patches(const basic_image<T>& img, std::size_t p, std::uint64_t seed = 0,
                              const ExtractOptions& opt = {}) {
  (void)seed;
  if (p < 1) throw UsageError("patch count must be >= 1");
  PatchSelection sel;
  sel.requested = p;
  for (const auto& info : rank_tiles(img, p, opt.geometry, opt.thresholds)) {
    Patch patch;
    patch.size = opt.geometry.size;
    patch.origin = info.origin;
    patch.channel_stds = info.stds;
    patch.channel_means = info.means;
    patch.cls = info.cls;
    patch.values.resize(3 * static_cast<std::size_t>(patch.size) * static_cast<std::size_t>(patch.size));
    copy_tile(img, info.origin, patch.size, patch.values);
    subtract_channel_means(patch.values, patch.size);
    patch.preprocessed = true;
    switch (info.cls) {
      case Homogeneity::Homogeneous: ++sel.n_homogeneous; break;
      case Homogeneity::NonHomogeneous: ++sel.n_nonhomogeneous; break;
      case Homogeneity::Saturated: ++sel.n_saturated; break;
    }
    sel.patches.push_back(std::move(patch));
  }
  return sel;
}

// ---------------------------------------------------------------------------
// Patch cache container:
//   "HCBP" | version u8 | index JSON (u64 length + bytes) | float32 planes
// The index lists {image_path, origin, class, stds, means} per patch in file order.

inline constexpr std::uint8_t kPatchCacheVersion = 1;

struct CachedPatch {
  std::string image_path;
  Patch patch;
};

inline void write_patch_cache(const std::filesystem::path& file, const std::vector<CachedPatch>& patches) {
  json index = json::array();
  int size = patches.empty() ? kPatchSize : patches.front().patch.size;
  for (const auto& cp : patches) {
    if (cp.patch.size != size) throw UsageError("patch cache requires a uniform patch size");
    index.push_back({{"image_path", cp.image_path},
                     {"origin", {cp.patch.origin.row, cp.patch.origin.col}},
                     {"class", to_string(cp.patch.cls)},
                     {"stds", cp.patch.channel_stds},
                     {"means", cp.patch.channel_means}});
  }
  const json header{{"version", kPatchCacheVersion}, {"patch_size", size}, {"patches", index}};
  std::ofstream out(file, std::ios::binary);
  if (!out) throw DataError("cannot write " + file.string());
  out.write("HCBP", 4);
  binio::write_u8(out, kPatchCacheVersion);
  binio::write_string(out, header.dump());
  for (const auto& cp : patches) binio::write_f32(out, cp.patch.values);
  if (!out) throw DataError("write failed: " + file.string());
}

inline std::vector<CachedPatch> read_patch_cache(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DataError("cannot open patch cache " + file.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "HCBP") throw DataError("not a patch cache: " + file.string());
  const auto version = binio::read_u8(in);
  if (version != kPatchCacheVersion)
    throw DataError("unsupported patch cache version " + std::to_string(version));
  json header;
  try {
    header = json::parse(binio::read_string(in));
  } catch (const json::exception& e) {
    throw DataError(std::string("corrupt patch cache index: ") + e.what());
  }
  const int size = header.at("patch_size").get<int>();
  std::vector<CachedPatch> out;
  for (const auto& e : header.at("patches")) {
    CachedPatch cp;
    cp.image_path = e.at("image_path").get<std::string>();
    cp.patch.size = size;
    cp.patch.origin = {e.at("origin")[0].get<int>(), e.at("origin")[1].get<int>()};
    cp.patch.cls = homogeneity_from_string(e.at("class").get<std::string>());
    cp.patch.channel_stds = e.at("stds").get<ChannelStats>();
    cp.patch.channel_means = e.at("means").get<ChannelStats>();
    cp.patch.preprocessed = true;
    cp.patch.values.resize(3 * static_cast<std::size_t>(size) * static_cast<std::size_t>(size));
    binio::read_f32(in, cp.patch.values);
    out.push_back(std::move(cp));
  }
  return out;
}

}  // namespace hcbcam
