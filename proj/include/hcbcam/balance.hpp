#pragma once

// Hierarchical patch quotas: a global budget k is split evenly over brands,
// then models of a brand, devices of a model and images of a device.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hcbcam/common.hpp"
#include "hcbcam/manifest.hpp"

namespace hcbcam {

/// [num / den] with halves rounded up, evaluated exactly on the rational.
inline std::uint64_t round_half_up(std::uint64_t num, std::uint64_t den) {
  if (den == 0) throw std::invalid_argument("round_half_up: zero denominator");
  const auto n = static_cast<unsigned __int128>(num);
  const auto d = static_cast<unsigned __int128>(den);
  return static_cast<std::uint64_t>((2 * n + d) / (2 * d));
}

struct DeviceQuota {
  int device = 0;
  std::size_t n_images = 0;
  std::uint64_t k_d = 0;
  std::uint64_t k_i = 0;  // per image of this device
};

struct ModelQuota {
  std::string model;
  std::uint64_t k_m = 0;
  std::vector<DeviceQuota> devices;
};

struct BrandQuota {
  std::string brand;
  std::uint64_t k_b = 0;
  std::vector<ModelQuota> models;
};

struct SamplingPlan {
  std::uint64_t k = 0;
  std::vector<BrandQuota> brands;
  /// record path -> k_i, filled by assign_image_quotas
  std::map<std::string, std::uint64_t> image_quota;

  const DeviceQuota* device_quota(const std::string& brand, const std::string& model, int device) const {
    for (const auto& b : brands)
      if (b.brand == brand)
        for (const auto& m : b.models)
          if (m.model == model)
            for (const auto& d : m.devices)
              if (d.device == device) return &d;
    return nullptr;
  }

  /// Sum of k_i over all images the plan covers.
  std::uint64_t planned_total() const {
    std::uint64_t t = 0;
    for (const auto& b : brands)
      for (const auto& m : b.models)
        for (const auto& d : m.devices) t += d.k_i * d.n_images;
    return t;
  }
};

/// k_b = [k/n_b], k_m = [k/(n_m n_b)], k_d = [k/(n_d n_m n_b)],
/// k_i = [k/(n_i n_d n_m n_b)], with n_m, n_d, n_i taken from the owning
/// brand, model and device respectively.
inline SamplingPlan plan_counts(const Hierarchy& h, std::uint64_t k) {
  if (k < 1) throw UsageError("k must be >= 1");
  if (h.brands.empty()) throw DataError("cannot plan quotas: hierarchy has no brands");
  SamplingPlan plan;
  plan.k = k;
  const std::uint64_t n_b = h.brands.size();
  for (const auto& b : h.brands) {
    if (b.models.empty()) throw DataError("cannot plan quotas: brand " + b.name + " has no models");
    BrandQuota bq{b.name, round_half_up(k, n_b), {}};
    const std::uint64_t n_m = b.models.size();
    for (const auto& m : b.models) {
      if (m.devices.empty())
        throw DataError("cannot plan quotas: model " + b.name + "_" + m.name + " has no devices");
      ModelQuota mq{m.name, round_half_up(k, n_m * n_b), {}};
      const std::uint64_t n_d = m.devices.size();
      for (const auto& d : m.devices) {
        if (d.n_images == 0)
          throw DataError("cannot plan quotas: device " + std::to_string(d.index) + " of " + b.name + "_" + m.name +
                          " has no images");
        DeviceQuota dq;
        dq.device = d.index;
        dq.n_images = d.n_images;
        dq.k_d = round_half_up(k, n_d * n_m * n_b);
        dq.k_i = round_half_up(k, static_cast<std::uint64_t>(d.n_images) * n_d * n_m * n_b);
        mq.devices.push_back(dq);
      }
      bq.models.push_back(std::move(mq));
    }
    plan.brands.push_back(std::move(bq));
  }
  return plan;
}

inline void assign_image_quotas(SamplingPlan& plan, const std::vector<ImageRecord>& records) {
  for (const auto& r : records) {
    const auto* dq = plan.device_quota(r.brand, r.model, r.device);
    if (!dq) throw DataError("record outside the planned hierarchy: " + r.path);
    plan.image_quota[r.path] = dq->k_i;
  }
}

inline SamplingPlan plan_counts(const std::vector<ImageRecord>& records, std::uint64_t k) {
  auto plan = plan_counts(build_hierarchy(records), k);
  assign_image_quotas(plan, records);
  return plan;
}

/// Number of homogeneity-ranked patches available per record path.
using PatchCatalog = std::map<std::string, std::size_t>;

struct RealizedEntry {
  std::string image_path;
  std::vector<std::size_t> patch_indices;  // ranks into the image's ranked tile list
};

struct RealizedSample {
  std::vector<RealizedEntry> entries;
  std::map<std::string, std::uint64_t> deficits;  // only images with a shortfall

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.patch_indices.size();
    return n;
  }
};

/// Takes the first min(k_i, available) ranked patches of every planned image.
/// Shortfalls are recorded, never redistributed.
inline RealizedSample realize_plan(const SamplingPlan& plan, const PatchCatalog& catalog, std::uint64_t seed = 0) {
  (void)seed;
  RealizedSample out;
  for (const auto& [path, quota] : plan.image_quota) {
    const auto it = catalog.find(path);
    if (it == catalog.end()) throw DataError("image missing from patch cache: " + path);
    const auto take = static_cast<std::size_t>(std::min<std::uint64_t>(quota, it->second));
    RealizedEntry e{path, {}};
    for (std::size_t i = 0; i < take; ++i) e.patch_indices.push_back(i);
    if (take < quota) out.deficits[path] = quota - take;
    out.entries.push_back(std::move(e));
  }
  return out;
}

inline json to_json(const SamplingPlan& p) {
  json brands = json::array();
  for (const auto& b : p.brands) {
    json models = json::array();
    for (const auto& m : b.models) {
      json devs = json::array();
      for (const auto& d : m.devices)
        devs.push_back({{"device", d.device}, {"n_images", d.n_images}, {"k_d", d.k_d}, {"k_i", d.k_i}});
      models.push_back({{"model", m.model}, {"k_m", m.k_m}, {"devices", devs}});
    }
    brands.push_back({{"brand", b.brand}, {"k_b", b.k_b}, {"models", models}});
  }
  return json{{"k", p.k}, {"brands", brands}, {"image_quota", p.image_quota}, {"planned_total", p.planned_total()}};
}

}  // namespace hcbcam
