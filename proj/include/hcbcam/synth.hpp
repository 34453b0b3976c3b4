#pragma once

// Deterministic synthetic camera dataset. Every model stamps a fixed
// high-frequency 8x8 pattern over a smooth scene, every device adds a weak
// multiplicative pattern, and sensor noise is white.

#include <array>
#include <cmath>
#include <filesystem>
#include <regex>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "hcbcam/common.hpp"
#include "hcbcam/image.hpp"
#include "hcbcam/manifest.hpp"

namespace hcbcam {

inline constexpr int kSignaturePeriod = 8;

struct SynthBrand {
  std::string name;
  int n_models = 1;
  friend bool operator==(const SynthBrand&, const SynthBrand&) = default;
};

struct SynthSpec {
  std::vector<SynthBrand> brands{{"Acme", 1}, {"Borealis", 2}, {"Corvid", 2}, {"Dynamo", 2}};
  int devices_per_model = 2;
  int images_per_device = 40;
  int height = 256;
  int width = 256;
  /// Std of the scene's low-frequency variation across the whole frame.
  double scene_smoothness = 0.012;
  /// Std of the additive model signature on unit-scale pixels.
  double signature_strength = 0.008;
  double noise_std = 0.003;
  /// Probability of one high-contrast disk near the image border.
  double clutter = 0.6;
  std::uint64_t seed = 7;

  friend bool operator==(const SynthSpec&, const SynthSpec&) = default;

  static std::string model_name(int model) { return "M" + std::to_string(model + 1); }
};

inline void validate(const SynthSpec& s) {
  if (s.brands.empty()) throw UsageError("synth spec: at least one brand required");
  std::set<std::string> names;
  static const std::regex brand_re(R"(^[A-Za-z0-9\-]+$)");
  for (const auto& b : s.brands) {
    if (b.n_models < 1) throw UsageError("synth spec: brand " + b.name + " needs at least one model");
    if (!std::regex_match(b.name, brand_re)) throw UsageError("synth spec: invalid brand name '" + b.name + "'");
    if (!names.insert(b.name).second) throw UsageError("synth spec: duplicate brand " + b.name);
  }
  if (s.devices_per_model < 1 || s.images_per_device < 1) throw UsageError("synth spec: counts must be >= 1");
  if (s.height < kMinImageExtent || s.width < kMinImageExtent) throw UsageError("synth spec: image smaller than 128");
  if (s.scene_smoothness < 0 || s.signature_strength < 0 || s.noise_std < 0)
    throw UsageError("synth spec: amplitudes must be non-negative");
  if (s.clutter < 0 || s.clutter > 1) throw UsageError("synth spec: clutter must lie in [0, 1]");
}

inline json to_json(const SynthSpec& s) {
  json brands = json::array();
  for (const auto& b : s.brands) brands.push_back({{"name", b.name}, {"models", b.n_models}});
  return json{{"brands", brands},
              {"devices_per_model", s.devices_per_model},
              {"images_per_device", s.images_per_device},
              {"height", s.height},
              {"width", s.width},
              {"scene_smoothness", s.scene_smoothness},
              {"signature_strength", s.signature_strength},
              {"noise_std", s.noise_std},
              {"clutter", s.clutter},
              {"seed", s.seed}};
}

inline SynthSpec synth_spec_from_json(const json& j) {
  static const std::set<std::string> known{"brands",    "devices_per_model", "images_per_device", "height",
                                           "width",     "scene_smoothness",  "signature_strength", "noise_std",
                                           "clutter",   "seed"};
  if (!j.is_object()) throw UsageError("synth spec must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw UsageError("synth spec: unknown key '" + k + "'");
  SynthSpec s;
  try {
    if (j.contains("brands")) {
      s.brands.clear();
      for (const auto& b : j.at("brands")) s.brands.push_back({b.at("name").get<std::string>(), b.at("models").get<int>()});
    }
    s.devices_per_model = j.value("devices_per_model", s.devices_per_model);
    s.images_per_device = j.value("images_per_device", s.images_per_device);
    s.height = j.value("height", s.height);
    s.width = j.value("width", s.width);
    s.scene_smoothness = j.value("scene_smoothness", s.scene_smoothness);
    s.signature_strength = j.value("signature_strength", s.signature_strength);
    s.noise_std = j.value("noise_std", s.noise_std);
    s.clutter = j.value("clutter", s.clutter);
    s.seed = j.value("seed", s.seed);
  } catch (const json::exception& e) {
    throw UsageError(std::string("synth spec: ") + e.what());
  }
  validate(s);
  return s;
}

/// Zero-mean 8x8x3 pattern (channel-major) with unit std, fixed per model.
/// The 3x3-neighbourhood mean is removed so the pattern has no smooth part.
inline std::vector<double> model_signature(std::uint64_t seed, const std::string& model_name) {
  constexpr int P = kSignaturePeriod;
  Rng rng(mix_seed(mix_seed(seed, "signature"), model_name));
  std::vector<double> raw(3 * P * P), out(3 * P * P);
  for (auto& v : raw) v = rng.normal();
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < P; ++i)
      for (int j = 0; j < P; ++j) {
        double s = 0;
        for (int di = -1; di <= 1; ++di)
          for (int dj = -1; dj <= 1; ++dj) s += raw[(c * P + (i + di + P) % P) * P + (j + dj + P) % P];
        out[(c * P + i) * P + j] = raw[(c * P + i) * P + j] - s / 9.0;
      }
  for (int c = 0; c < 3; ++c) {
    double mean = 0, sq = 0;
    for (int k = 0; k < P * P; ++k) mean += out[c * P * P + k];
    mean /= P * P;
    for (int k = 0; k < P * P; ++k) sq += (out[c * P * P + k] - mean) * (out[c * P * P + k] - mean);
    const double sd = std::sqrt(sq / (P * P));
    for (int k = 0; k < P * P; ++k) out[c * P * P + k] = (out[c * P * P + k] - mean) / sd;
  }
  return out;
}

/// Renders one image. `image_seed` drives the scene and noise; the model
/// and device patterns depend only on the dataset seed and their names.
inline Image8 render_synthetic(const SynthSpec& s, const std::string& model_name, int device,
                               std::uint64_t image_seed) {
  const int H = s.height, W = s.width;
  constexpr int P = kSignaturePeriod;
  const auto sig = model_signature(s.seed, model_name);
  Rng scene(image_seed);

  // scene: per-channel base level plus a few long-wavelength cosines
  struct Wave {
    double fy, fx, phase, amp[3];
  };
  std::array<Wave, 4> waves{};
  const double two_pi = 6.283185307179586;
  for (auto& w : waves) {
    const double wavelength = scene.uniform(1.5, 4.0) * std::max(H, W);
    const double angle = scene.uniform(0, two_pi);
    w.fy = std::sin(angle) * two_pi / wavelength;
    w.fx = std::cos(angle) * two_pi / wavelength;
    w.phase = scene.uniform(0, two_pi);
    const double a = s.scene_smoothness * std::sqrt(2.0 / static_cast<double>(waves.size()));
    for (double& c : w.amp) c = a * scene.uniform(0.6, 1.4);
  }
  const double level = scene.uniform(0.3, 0.7);
  const double base[3] = {level + scene.uniform(-0.05, 0.05), level, level + scene.uniform(-0.05, 0.05)};

  struct Disk {
    double cy, cx, r, delta;
  };
  std::vector<Disk> disks;
  if (scene.uniform() < s.clutter) {
    // centre within 24 px of one edge so most tiles stay clear
    const int edge = static_cast<int>(scene.below(4));
    const double along = scene.uniform(0, edge < 2 ? W : H), depth = scene.uniform(0, 24);
    const double cy = edge == 0 ? depth : edge == 1 ? H - depth : along;
    const double cx = edge < 2 ? along : edge == 2 ? depth : W - depth;
    disks.push_back({cy, cx, scene.uniform(6, 14), scene.uniform(0.08, 0.25) * (scene.uniform() < 0.5 ? -1 : 1)});
  }

  // device pattern: stationary per (model, device), 10x weaker than the signature at mid-grey
  Rng prnu(mix_seed(mix_seed(s.seed, "device"), model_name + "#" + std::to_string(device)));
  Rng noise(mix_seed(image_seed, "noise"));
  const double prnu_std = 2.0 * s.signature_strength / 10.0;

  Image8 img(H, W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double disk = 0;
      for (const auto& d : disks)
        if ((y - d.cy) * (y - d.cy) + (x - d.cx) * (x - d.cx) <= d.r * d.r) disk += d.delta;
      double cosines[4];
      for (std::size_t k = 0; k < waves.size(); ++k)
        cosines[k] = std::cos(waves[k].fy * y + waves[k].fx * x + waves[k].phase);
      for (int c = 0; c < 3; ++c) {
        double v = base[c] + disk;
        for (std::size_t k = 0; k < waves.size(); ++k) v += waves[k].amp[c] * cosines[k];
        v *= 1.0 + prnu_std * prnu.normal();
        v += s.signature_strength * sig[(c * P + y % P) * P + x % P];
        v += s.noise_std * noise.normal();
        img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
    }
  return img;
}

inline std::string synth_file_name(const std::string& brand, const std::string& model, int device, int image) {
  return brand + "_" + model + "_" + std::to_string(device) + "_" + std::to_string(image) + ".png";
}

/// Writes every image of `s` under `out_dir` and returns their manifest.
/// Each image has its own derived seed, so the output does not depend on
/// `threads`.
inline Manifest generate(const SynthSpec& s, const std::filesystem::path& out_dir, int threads = 1) {
  validate(s);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) throw DataError("cannot create " + out_dir.string());
  std::vector<ImageRecord> records;
  for (std::size_t b = 0; b < s.brands.size(); ++b)
    for (int m = 0; m < s.brands[b].n_models; ++m) {
      const std::string model = SynthSpec::model_name(m);
      for (int d = 0; d < s.devices_per_model; ++d)
        for (int i = 0; i < s.images_per_device; ++i) {
          const auto path = out_dir / synth_file_name(s.brands[b].name, model, d, i);
          records.push_back({path.generic_string(), s.brands[b].name, model, d, std::to_string(i), s.width, s.height});
        }
    }
  parallel_for(records.size(), threads, [&](std::size_t index) {
    const auto& r = records[index];
    write_png(r.path, render_synthetic(s, r.model_name(), r.device, mix_seed(s.seed, index)));
  });
  return Manifest(std::move(records), false);
}

/// Non-learned oracle: folds a mean-subtracted patch onto the signature
/// period and returns the index of the best-correlated signature.
inline std::size_t correlate_signature(std::span<const float> patch, int size,
                                       const std::vector<std::vector<double>>& signatures) {
  constexpr int P = kSignaturePeriod;
  std::vector<double> folded(3 * P * P, 0.0);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        folded[(c * P + y % P) * P + x % P] +=
            patch[(static_cast<std::size_t>(c) * size + y) * size + x];
  std::size_t best = 0;
  double best_score = -1e300;
  for (std::size_t k = 0; k < signatures.size(); ++k) {
    double score = 0;
    for (std::size_t i = 0; i < folded.size(); ++i) score += folded[i] * signatures[k][i];
    if (score > best_score) {
      best_score = score;
      best = k;
    }
  }
  return best;
}

}  // namespace hcbcam
