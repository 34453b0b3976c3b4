#pragma once

// Brand -> model -> device -> image bookkeeping for a camera collection:
// directory ingestion, collection filters, hierarchy statistics and
// leave-one-device-out fold planning.

#include <algorithm>
#include <filesystem>
#include <map>
#include <regex>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "hcbcam/common.hpp"
#include "hcbcam/image.hpp"

namespace hcbcam {

inline constexpr int kMinImageExtent = 128;

/// Default file naming rule, e.g. "Kodak_M1063_3_1021.JPG" or
/// "Olympus_mju_1050SW_0_17.jpg". Groups: brand, model, device, image id.
inline const std::string kDefaultNamePattern =
    R"(^([A-Za-z0-9\-]+)_(.+)_([0-9]+)_([0-9]+)\.(jpg|JPG|jpeg|JPEG|png|PNG)$)";

struct ImageRecord {
  std::string path;
  std::string brand;
  std::string model;
  int device = 0;
  std::string image_id;
  int width = 0;
  int height = 0;

  /// "Brand_Model", the class name used throughout reports.
  std::string model_name() const { return brand + "_" + model; }

  auto key() const { return std::tie(brand, model, device, image_id); }
  friend bool operator==(const ImageRecord& a, const ImageRecord& b) {
    return a.key() == b.key() && a.path == b.path && a.width == b.width && a.height == b.height;
  }
};

inline void to_json(json& j, const ImageRecord& r) {
  j = json{{"path", r.path},     {"brand", r.brand}, {"model", r.model}, {"device", r.device},
           {"image_id", r.image_id}, {"w", r.width},     {"h", r.height}};
}

inline void from_json(const json& j, ImageRecord& r) {
  j.at("path").get_to(r.path);
  j.at("brand").get_to(r.brand);
  j.at("model").get_to(r.model);
  j.at("device").get_to(r.device);
  j.at("image_id").get_to(r.image_id);
  j.at("w").get_to(r.width);
  j.at("h").get_to(r.height);
}

struct DeviceNode {
  int index = 0;
  std::size_t n_images = 0;
  friend bool operator==(const DeviceNode&, const DeviceNode&) = default;
};

struct ModelNode {
  std::string name;  // model part only, e.g. "M1063"
  std::vector<DeviceNode> devices;
  std::size_t n_images() const {
    std::size_t n = 0;
    for (const auto& d : devices) n += d.n_images;
    return n;
  }
  friend bool operator==(const ModelNode&, const ModelNode&) = default;
};

struct BrandNode {
  std::string name;
  std::vector<ModelNode> models;
  friend bool operator==(const BrandNode&, const BrandNode&) = default;
};

/// Nested counts n_b, n_m (per brand), n_d (per model), n_i (per device),
/// every level sorted by name / index.
struct Hierarchy {
  std::vector<BrandNode> brands;

  std::size_t n_brands() const { return brands.size(); }
  std::size_t n_models() const {
    std::size_t n = 0;
    for (const auto& b : brands) n += b.models.size();
    return n;
  }
  std::size_t n_devices() const {
    std::size_t n = 0;
    for (const auto& b : brands)
      for (const auto& m : b.models) n += m.devices.size();
    return n;
  }
  std::size_t n_images() const {
    std::size_t n = 0;
    for (const auto& b : brands)
      for (const auto& m : b.models) n += m.n_images();
    return n;
  }
  friend bool operator==(const Hierarchy&, const Hierarchy&) = default;
};

inline Hierarchy build_hierarchy(const std::vector<ImageRecord>& records) {
  std::map<std::string, std::map<std::string, std::map<int, std::size_t>>> tree;
  for (const auto& r : records) ++tree[r.brand][r.model][r.device];
  Hierarchy h;
  for (const auto& [brand, models] : tree) {
    BrandNode b{brand, {}};
    for (const auto& [model, devices] : models) {
      ModelNode m{model, {}};
      for (const auto& [dev, n] : devices) m.devices.push_back({dev, n});
      b.models.push_back(std::move(m));
    }
    h.brands.push_back(std::move(b));
  }
  return h;
}

/// Immutable collection of image records with its cached hierarchy.
class Manifest {
public:
  Manifest() = default;
  explicit Manifest(std::vector<ImageRecord> records, bool filters_applied = false)
      : records_(std::move(records)), filters_applied_(filters_applied) {
    std::sort(records_.begin(), records_.end(),
              [](const ImageRecord& a, const ImageRecord& b) { return a.key() < b.key(); });
    for (std::size_t i = 1; i < records_.size(); ++i)
      if (records_[i - 1].key() == records_[i].key())
        throw DataError("duplicate image record: " + records_[i].model_name() + " device " +
                        std::to_string(records_[i].device) + " image " + records_[i].image_id);
    hierarchy_ = build_hierarchy(records_);
  }

  const std::vector<ImageRecord>& records() const { return records_; }
  const Hierarchy& hierarchy() const { return hierarchy_; }
  bool filters_applied() const { return filters_applied_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

  friend bool operator==(const Manifest& a, const Manifest& b) {
    return a.records_ == b.records_ && a.filters_applied_ == b.filters_applied_;
  }

private:
  std::vector<ImageRecord> records_;
  Hierarchy hierarchy_;
  bool filters_applied_ = false;
};

inline json manifest_to_json(const Manifest& m) {
  return json{{"records", m.records()}, {"filters_applied", m.filters_applied()}};
}

inline Manifest manifest_from_json(const json& j) {
  try {
    return Manifest(j.at("records").get<std::vector<ImageRecord>>(), j.value("filters_applied", false));
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed manifest: ") + e.what());
  }
}

struct SkippedFile {
  std::string path;
  std::string reason;
};

struct IngestResult {
  Manifest manifest;
  std::vector<SkippedFile> skipped;
};

/// Scans `root` recursively. Files whose names do not match `name_pattern`,
/// whose headers cannot be read, or which are smaller than 128x128 are
/// recorded in the skip report instead of the manifest.
inline IngestResult ingest_dataset(const std::filesystem::path& root,
                                   const std::string& name_pattern = kDefaultNamePattern) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(root, ec)) throw DataError("not a readable directory: " + root.string());
  std::regex re;
  try {
    re = std::regex(name_pattern);
  } catch (const std::regex_error& e) {
    throw UsageError("invalid name pattern: " + name_pattern);
  }
  if (re.mark_count() < 4) throw UsageError("name pattern must capture brand, model, device and image id");

  std::vector<fs::path> files;
  fs::recursive_directory_iterator it(root, ec), end;
  if (ec) throw DataError("cannot scan " + root.string() + ": " + ec.message());
  for (; it != end; it.increment(ec)) {
    if (ec) throw DataError("cannot scan " + root.string() + ": " + ec.message());
    if (it->is_regular_file(ec)) files.push_back(it->path());
  }
  std::sort(files.begin(), files.end());

  IngestResult out;
  std::vector<ImageRecord> records;
  std::set<std::tuple<std::string, std::string, int, std::string>> seen;
  for (const auto& f : files) {
    const std::string name = f.filename().string();
    std::smatch match;
    if (!std::regex_match(name, match, re)) {
      out.skipped.push_back({f.generic_string(), "name does not match pattern"});
      continue;
    }
    ImageRecord r;
    r.path = f.generic_string();
    r.brand = match[1].str();
    r.model = match[2].str();
    r.device = std::stoi(match[3].str());
    r.image_id = match[4].str();
    try {
      const auto size = probe_image(f);
      r.width = size.width;
      r.height = size.height;
    } catch (const DataError& e) {
      out.skipped.push_back({r.path, e.what()});
      continue;
    }
    if (r.width < kMinImageExtent || r.height < kMinImageExtent) {
      out.skipped.push_back({r.path, "smaller than 128x128"});
      continue;
    }
    if (!seen.emplace(r.brand, r.model, r.device, r.image_id).second) {
      out.skipped.push_back({r.path, "duplicate (brand, model, device, image id)"});
      continue;
    }
    records.push_back(std::move(r));
  }
  out.manifest = Manifest(std::move(records), false);
  return out;
}

/// Keeps models with at least two devices, then folds Nikon D70s into
/// Nikon D70. D70s device indices are shifted past the largest D70 index.
inline Manifest apply_paper_filters(const Manifest& m) {
  std::map<std::pair<std::string, std::string>, std::set<int>> devices;
  for (const auto& r : m.records()) devices[{r.brand, r.model}].insert(r.device);

  std::vector<ImageRecord> kept;
  for (const auto& r : m.records())
    if (devices[{r.brand, r.model}].size() >= 2) kept.push_back(r);

  int d70_offset = 0;
  for (const auto& r : kept)
    if (r.brand == "Nikon" && r.model == "D70") d70_offset = std::max(d70_offset, r.device + 1);
  for (auto& r : kept) {
    if (r.brand == "Nikon" && r.model == "D70s") {
      r.model = "D70";
      r.device += d70_offset;
    }
  }
  return Manifest(std::move(kept), true);
}

struct ModelStats {
  std::string model_name;
  std::size_t n_devices = 0;
  std::size_t n_images = 0;
};

struct HierarchyStats {
  std::vector<ModelStats> models;
  std::size_t n_brands = 0;
  std::size_t total_devices = 0;
  std::size_t total_images = 0;

  const ModelStats* find(const std::string& model_name) const {
    for (const auto& s : models)
      if (s.model_name == model_name) return &s;
    return nullptr;
  }
};

inline HierarchyStats hierarchy_stats(const Manifest& m) {
  HierarchyStats s;
  s.n_brands = m.hierarchy().n_brands();
  for (const auto& b : m.hierarchy().brands)
    for (const auto& mod : b.models) {
      s.models.push_back({b.name + "_" + mod.name, mod.devices.size(), mod.n_images()});
      s.total_devices += mod.devices.size();
      s.total_images += mod.n_images();
    }
  return s;
}

inline json to_json(const HierarchyStats& s) {
  json models = json::array();
  for (const auto& m : s.models) models.push_back({{"model", m.model_name}, {"devices", m.n_devices}, {"images", m.n_images}});
  return json{{"brands", s.n_brands}, {"models", models}, {"total_models", s.models.size()},
              {"total_devices", s.total_devices}, {"total_images", s.total_images}};
}

// ---------------------------------------------------------------------------
// Fold planning

struct Fold {
  /// model name ("Brand_Model") -> device index held out for testing
  std::map<std::string, int> held_out;
  /// record paths of the validation subset carved from the training devices
  std::vector<std::string> validation;

  friend bool operator==(const Fold&, const Fold&) = default;
};

struct FoldPlan {
  int n_folds = 0;
  double val_fraction = 0.15;
  std::uint64_t seed = 0;
  std::vector<Fold> folds;

  friend bool operator==(const FoldPlan&, const FoldPlan&) = default;
};

enum class Split { Train, Validation, Test };

/// Which side of `fold` a record falls on.
inline Split split_of(const Fold& fold, const ImageRecord& r) {
  const auto it = fold.held_out.find(r.model_name());
  if (it != fold.held_out.end() && it->second == r.device) return Split::Test;
  if (std::binary_search(fold.validation.begin(), fold.validation.end(), r.path)) return Split::Validation;
  return Split::Train;
}

inline std::vector<ImageRecord> records_in(const Manifest& m, const Fold& fold, Split split) {
  std::vector<ImageRecord> out;
  for (const auto& r : m.records())
    if (split_of(fold, r) == split) out.push_back(r);
  return out;
}

/// Leave-one-device-out folds: fold f holds out the device of rank
/// (f mod n_d) of every model, rotating each model independently.
inline FoldPlan make_folds(const Manifest& m, int n_folds, double val_fraction, std::uint64_t seed) {
  if (n_folds < 1) throw UsageError("n_folds must be >= 1");
  if (!(val_fraction > 0.0 && val_fraction < 0.5)) throw UsageError("val_fraction must lie in (0, 0.5)");
  for (const auto& b : m.hierarchy().brands)
    for (const auto& mod : b.models)
      if (mod.devices.size() < 2)
        throw DataError("model " + b.name + "_" + mod.name + " has a single device; cannot hold one out");

  // model name -> sorted record paths per device
  std::map<std::string, std::map<int, std::vector<std::string>>> images;
  for (const auto& r : m.records()) images[r.model_name()][r.device].push_back(r.path);

  FoldPlan plan{n_folds, val_fraction, seed, {}};
  for (int f = 0; f < n_folds; ++f) {
    Fold fold;
    for (auto& [model, by_device] : images) {
      std::vector<int> devs;
      for (const auto& [d, paths] : by_device) devs.push_back(d);
      const int held = devs[static_cast<std::size_t>(f) % devs.size()];
      fold.held_out[model] = held;

      std::vector<std::string> train;
      for (auto& [d, paths] : by_device)
        if (d != held) train.insert(train.end(), paths.begin(), paths.end());
      std::sort(train.begin(), train.end());
      const auto n_val = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(train.size()) + 0.5));
      Rng rng(mix_seed(mix_seed(seed, static_cast<std::uint64_t>(f)), model));
      rng.shuffle(train);
      fold.validation.insert(fold.validation.end(), train.begin(),
                             train.begin() + static_cast<std::ptrdiff_t>(std::min(n_val, train.size())));
    }
    std::sort(fold.validation.begin(), fold.validation.end());
    plan.folds.push_back(std::move(fold));
  }
  return plan;
}

inline json fold_plan_to_json(const FoldPlan& p) {
  json folds = json::object();
  for (std::size_t f = 0; f < p.folds.size(); ++f)
    folds[std::to_string(f)] = json{{"held_out", p.folds[f].held_out}, {"validation", p.folds[f].validation}};
  return json{{"n_folds", p.n_folds}, {"validation_rule", {{"fraction", p.val_fraction}, {"seed", p.seed}}},
              {"folds", folds}};
}

inline FoldPlan fold_plan_from_json(const json& j) {
  try {
    FoldPlan p;
    p.n_folds = j.at("n_folds").get<int>();
    p.val_fraction = j.at("validation_rule").at("fraction").get<double>();
    p.seed = j.at("validation_rule").at("seed").get<std::uint64_t>();
    for (int f = 0; f < p.n_folds; ++f) {
      const auto& jf = j.at("folds").at(std::to_string(f));
      Fold fold;
      jf.at("held_out").get_to(fold.held_out);
      jf.at("validation").get_to(fold.validation);
      std::sort(fold.validation.begin(), fold.validation.end());
      p.folds.push_back(std::move(fold));
    }
    return p;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed fold plan: ") + e.what());
  }
}

}  // namespace hcbcam
