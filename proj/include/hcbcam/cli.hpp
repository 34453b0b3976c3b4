#pragma once

// Command-line front end. Every subcommand prints one JSON summary line on
// stdout and writes its artifacts under the output directory. Failures print
// a one-line JSON error record on stderr and map to exit codes:
//   0 ok, 1 usage error, 2 data error, 3 numeric divergence.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hcbcam/autograd/checkpoint.hpp"
#include "hcbcam/balance.hpp"
#include "hcbcam/common.hpp"
#include "hcbcam/hcbnet.hpp"
#include "hcbcam/manifest.hpp"
#include "hcbcam/patchex.hpp"
#include "hcbcam/pipeline.hpp"
#include "hcbcam/synth.hpp"

namespace hcbcam::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;

inline constexpr const char* kEnvOutputDir = "HCBCAM_OUTPUT_DIR";
inline constexpr const char* kEnvCacheDir = "HCBCAM_CACHE_DIR";

struct Paths {
  std::string dataset_root;
  std::string cache_dir;  // empty: <output_dir>/cache
  std::string output_dir = "hcbcam-out";
  friend bool operator==(const Paths&, const Paths&) = default;
};

struct FoldSettings {
  int n_folds = 5;
  double val_fraction = 0.15;
  std::uint64_t seed = 0;
  friend bool operator==(const FoldSettings&, const FoldSettings&) = default;
};

struct RunConfig {
  Paths paths;
  TrainConfig train;
  /// "paper", "toy" or a path to a NetworkSpec JSON file.
  std::string network = "paper";
  std::string head = "hierarchical";
  FoldSettings folds;
  /// Path to a saved FoldPlan; empty: <output_dir>/folds.json, created on demand.
  std::string fold_plan;
  bool paper_filters = true;
  std::string name_pattern = kDefaultNamePattern;
  ExtractOptions extract;
  SynthSpec synth;
};

inline json to_json(const RunConfig& c) {
  return json{{"paths",
               {{"dataset_root", c.paths.dataset_root},
                {"cache_dir", c.paths.cache_dir},
                {"output_dir", c.paths.output_dir}}},
              {"train", to_json(c.train)},
              {"network", c.network},
              {"head", c.head},
              {"folds",
               {{"n_folds", c.folds.n_folds}, {"val_fraction", c.folds.val_fraction}, {"seed", c.folds.seed}}},
              {"fold_plan", c.fold_plan},
              {"paper_filters", c.paper_filters},
              {"name_pattern", c.name_pattern},
              {"extract",
               {{"patch_size", c.extract.geometry.size},
                {"stride", c.extract.geometry.stride},
                {"lower", c.extract.thresholds.lower},
                {"upper", c.extract.thresholds.upper}}},
              {"synth", to_json(c.synth)}};
}

namespace detail {

inline void reject_unknown(const json& j, const json& known, const std::string& where) {
  if (!j.is_object()) throw UsageError(where + " must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (!known.contains(k)) throw UsageError(where + ": unknown key '" + k + "'");
}

inline Head parse_head(const std::string& s) {
  if (s == "hierarchical") return Head::Hierarchical;
  if (s == "flat") return Head::Flat;
  throw UsageError("head must be hierarchical or flat, got '" + s + "'");
}

}  // namespace detail

inline void validate(const RunConfig& c) {
  validate(c.train);
  validate(c.synth);
  if (c.head != "hierarchical" && c.head != "flat" && c.head != "both")
    throw UsageError("head must be hierarchical, flat or both");
  if (c.folds.n_folds < 1) throw UsageError("folds.n_folds must be >= 1");
  if (!(c.folds.val_fraction >= 0 && c.folds.val_fraction < 1))
    throw UsageError("folds.val_fraction must lie in [0, 1)");
  if (c.extract.geometry.size < 1 || c.extract.geometry.stride < 1)
    throw UsageError("extract.patch_size and extract.stride must be >= 1");
  if (!(c.extract.thresholds.lower >= 0 && c.extract.thresholds.lower <= c.extract.thresholds.upper))
    throw UsageError("extract thresholds must satisfy 0 <= lower <= upper");
  if (c.paths.output_dir.empty()) throw UsageError("paths.output_dir must not be empty");
}

inline RunConfig run_config_from_json(const json& j) {
  const RunConfig defaults;
  const json known = to_json(defaults);
  detail::reject_unknown(j, known, "run config");
  RunConfig c;
  try {
    if (j.contains("paths")) {
      const auto& p = j.at("paths");
      detail::reject_unknown(p, known.at("paths"), "run config paths");
      c.paths.dataset_root = p.value("dataset_root", c.paths.dataset_root);
      c.paths.cache_dir = p.value("cache_dir", c.paths.cache_dir);
      c.paths.output_dir = p.value("output_dir", c.paths.output_dir);
    }
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    c.network = j.value("network", c.network);
    c.head = j.value("head", c.head);
    if (j.contains("folds")) {
      const auto& f = j.at("folds");
      detail::reject_unknown(f, known.at("folds"), "run config folds");
      c.folds.n_folds = f.value("n_folds", c.folds.n_folds);
      c.folds.val_fraction = f.value("val_fraction", c.folds.val_fraction);
      c.folds.seed = f.value("seed", c.folds.seed);
    }
    c.fold_plan = j.value("fold_plan", c.fold_plan);
    c.paper_filters = j.value("paper_filters", c.paper_filters);
    c.name_pattern = j.value("name_pattern", c.name_pattern);
    if (j.contains("extract")) {
      const auto& e = j.at("extract");
      detail::reject_unknown(e, known.at("extract"), "run config extract");
      c.extract.geometry.size = e.value("patch_size", c.extract.geometry.size);
      c.extract.geometry.stride = e.value("stride", c.extract.geometry.stride);
      c.extract.thresholds.lower = e.value("lower", c.extract.thresholds.lower);
      c.extract.thresholds.upper = e.value("upper", c.extract.thresholds.upper);
    }
    if (j.contains("synth")) c.synth = synth_spec_from_json(j.at("synth"));
  } catch (const json::exception& e) {
    throw UsageError(std::string("run config: ") + e.what());
  }
  validate(c);
  return c;
}

inline json read_json_file(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot read " + file.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("invalid JSON in " + file.string() + ": " + e.what());
  }
}

inline void write_text_file(const fs::path& file, const std::string& text) {
  std::error_code ec;
  if (file.has_parent_path()) fs::create_directories(file.parent_path(), ec);
  std::ofstream out(file, std::ios::binary);
  if (!out) throw DataError("cannot write " + file.string());
  out << text;
  if (!out) throw DataError("write failed: " + file.string());
}

inline void write_json_file(const fs::path& file, const json& j) { write_text_file(file, j.dump(2) + "\n"); }

/// Builds the network spec named by `ref` for `hierarchy`. Named specs adopt
/// the hierarchy; a spec file must already agree with it.
inline NetworkSpec resolve_network(const std::string& ref, const std::vector<BrandSpec>& hierarchy, Head head,
                                   std::uint64_t seed) {
  NetworkSpec s;
  if (ref == "paper" || ref == "toy") {
    s = ref == "paper" ? paper_default_spec(hierarchy, head) : toy_spec(hierarchy, head);
    s.seed = seed;
  } else {
    s = network_spec_from_json(read_json_file(ref));
    if (!hierarchy.empty() && s.hierarchy != hierarchy)
      throw DataError("network spec " + ref + " was built for a different brand/model hierarchy");
    s.head = head;
    if (head == Head::Flat) s.flat_fc_dims[2] = static_cast<int>(s.n_models());
  }
  validate(s);
  return s;
}

/// Brand/model hierarchy the synthetic generator would produce, in manifest order.
inline std::vector<BrandSpec> synth_hierarchy(const SynthSpec& s) {
  std::vector<BrandSpec> h;
  for (const auto& b : s.brands) {
    BrandSpec bs{b.name, {}};
    for (int m = 0; m < b.n_models; ++m) bs.models.push_back(SynthSpec::model_name(m));
    std::sort(bs.models.begin(), bs.models.end());
    h.push_back(std::move(bs));
  }
  std::sort(h.begin(), h.end(), [](const BrandSpec& a, const BrandSpec& b) { return a.name < b.name; });
  return h;
}

/// Parsed command line plus everything derived from it.
struct Context {
  RunConfig cfg;
  std::ostream* out = &std::cout;
  std::ostream* err = &std::cerr;

  fs::path output_dir() const { return cfg.paths.output_dir; }
  fs::path cache_dir() const {
    return cfg.paths.cache_dir.empty() ? output_dir() / "cache" : fs::path(cfg.paths.cache_dir);
  }
  fs::path manifest_file(const std::string& flag) const {
    return flag.empty() ? output_dir() / "manifest.json" : fs::path(flag);
  }
  void emit(const json& summary) const { *out << summary.dump() << std::endl; }
  void log(const std::string& line) const { *err << line << std::endl; }
};

inline Manifest load_manifest(const fs::path& file) { return manifest_from_json(read_json_file(file)); }

/// Uses the configured fold plan file, else <output>/folds.json, else plans
/// folds from the run config and saves them there.
inline FoldPlan load_or_make_folds(const Context& ctx, const Manifest& m, const std::string& flag) {
  const std::string ref = !flag.empty() ? flag : ctx.cfg.fold_plan;
  if (!ref.empty()) return fold_plan_from_json(read_json_file(ref));
  const auto file = ctx.output_dir() / "folds.json";
  if (fs::exists(file)) return fold_plan_from_json(read_json_file(file));
  const auto& f = ctx.cfg.folds;
  auto plan = make_folds(m, f.n_folds, f.val_fraction, f.seed);
  write_json_file(file, fold_plan_to_json(plan));
  return plan;
}

inline std::vector<std::string> heads_of(const std::string& head) {
  if (head == "both") return {"flat", "hierarchical"};
  detail::parse_head(head);
  return {head};
}

inline fs::path checkpoint_file(const fs::path& dir, int fold) {
  return dir / ("fold-" + std::to_string(fold) + ".hcbk");
}

// ---------------------------------------------------------------------------
// Subcommands

inline json cmd_scan(const Context& ctx, const std::string& root_flag, const std::string& pattern_flag) {
  const std::string root = root_flag.empty() ? ctx.cfg.paths.dataset_root : root_flag;
  if (root.empty()) throw UsageError("scan needs --root or paths.dataset_root");
  const auto result = ingest_dataset(root, pattern_flag.empty() ? ctx.cfg.name_pattern : pattern_flag);
  for (const auto& s : result.skipped) ctx.log("warning: skipped " + s.path + ": " + s.reason);
  const Manifest m = ctx.cfg.paper_filters ? apply_paper_filters(result.manifest) : result.manifest;
  const auto file = ctx.output_dir() / "manifest.json";
  write_json_file(file, manifest_to_json(m));
  json skipped = json::array();
  for (const auto& s : result.skipped) skipped.push_back({{"path", s.path}, {"reason", s.reason}});
  write_json_file(ctx.output_dir() / "skipped.json", skipped);
  return json{{"command", "scan"},
              {"manifest", file.generic_string()},
              {"n_images", m.size()},
              {"n_skipped", result.skipped.size()},
              {"filters_applied", m.filters_applied()},
              {"stats", to_json(hierarchy_stats(m))}};
}

inline json cmd_folds(const Context& ctx, const std::string& manifest_flag) {
  const auto m = load_manifest(ctx.manifest_file(manifest_flag));
  const auto& f = ctx.cfg.folds;
  const auto plan = make_folds(m, f.n_folds, f.val_fraction, f.seed);
  const auto file = ctx.output_dir() / "folds.json";
  write_json_file(file, fold_plan_to_json(plan));
  json folds = json::array();
  for (const auto& fold : plan.folds)
    folds.push_back({{"held_out_devices", fold.held_out.size()},
                     {"train", records_in(m, fold, Split::Train).size()},
                     {"validation", records_in(m, fold, Split::Validation).size()},
                     {"test", records_in(m, fold, Split::Test).size()}});
  return json{{"command", "folds"}, {"fold_plan", file.generic_string()}, {"n_folds", plan.n_folds}, {"folds", folds}};
}

inline json cmd_extract(const Context& ctx, const std::string& manifest_flag, const std::vector<std::string>& images,
                        std::size_t patch_count) {
  std::vector<std::string> paths = images;
  if (paths.empty()) {
    const auto m = load_manifest(ctx.manifest_file(manifest_flag));
    for (const auto& r : m.records()) paths.push_back(r.path);
  }
  if (paths.empty()) throw DataError("no images to extract from");
  const auto dir = ctx.cache_dir();
  std::error_code ec;
  fs::create_directories(dir, ec);
  std::vector<json> entries(paths.size());
  parallel_for(paths.size(), ctx.cfg.train.threads, [&](std::size_t i) {
    const auto sel = select_patches(read_image(paths[i]), patch_count, 0, ctx.cfg.extract);
    std::vector<CachedPatch> cached;
    for (const auto& p : sel.patches) cached.push_back({paths[i], p});
    const auto file = dir / (hex64(fnv1a(paths[i])) + ".hcbp");
    write_patch_cache(file, cached);
    entries[i] = {{"image", paths[i]},
                  {"cache", file.generic_string()},
                  {"patches", sel.patches.size()},
                  {"homogeneous", sel.n_homogeneous},
                  {"nonhomogeneous", sel.n_nonhomogeneous},
                  {"saturated", sel.n_saturated}};
  });
  std::size_t total = 0, homo = 0, non = 0, sat = 0;
  for (const auto& e : entries) {
    total += e.at("patches").get<std::size_t>();
    homo += e.at("homogeneous").get<std::size_t>();
    non += e.at("nonhomogeneous").get<std::size_t>();
    sat += e.at("saturated").get<std::size_t>();
  }
  const auto index = ctx.output_dir() / "extract.json";
  write_json_file(index, entries);
  return json{{"command", "extract"},
              {"index", index.generic_string()},
              {"images", paths.size()},
              {"patch_count", patch_count},
              {"patches", total},
              {"homogeneous", homo},
              {"nonhomogeneous", non},
              {"saturated", sat}};
}

inline json cmd_balance(const Context& ctx, const std::string& manifest_flag, const std::string& folds_flag,
                        int fold, std::uint64_t k) {
  const auto m = load_manifest(ctx.manifest_file(manifest_flag));
  std::vector<ImageRecord> records = m.records();
  std::string name = "plan.json";
  if (fold >= 0) {
    const auto plan = load_or_make_folds(ctx, m, folds_flag);
    if (fold >= static_cast<int>(plan.folds.size())) throw UsageError("fold index out of range");
    records = records_in(m, plan.folds[static_cast<std::size_t>(fold)], Split::Train);
    name = "plan-fold-" + std::to_string(fold) + ".json";
  }
  const auto plan = plan_counts(records, k);
  const auto file = ctx.output_dir() / name;
  auto j = to_json(plan);
  write_json_file(file, j);
  j.erase("image_quota");
  return json{{"command", "balance"}, {"plan", file.generic_string()}, {"fold", fold}, {"quotas", j}};
}

inline json cmd_synth(const Context& ctx, const std::string& spec_flag, const std::string& out_flag) {
  SynthSpec spec = ctx.cfg.synth;
  if (!spec_flag.empty() && spec_flag != "default") spec = synth_spec_from_json(read_json_file(spec_flag));
  if (spec_flag == "default") spec = SynthSpec{};
  const fs::path images = out_flag.empty() ? ctx.output_dir() / "synth" : fs::path(out_flag);
  const auto m = generate(spec, images, ctx.cfg.train.threads);
  write_json_file(images / "synth_spec.json", to_json(spec));
  const auto file = ctx.output_dir() / "manifest.json";
  write_json_file(file, manifest_to_json(m));
  return json{{"command", "synth"},
              {"images_dir", images.generic_string()},
              {"manifest", file.generic_string()},
              {"n_images", m.size()},
              {"stats", to_json(hierarchy_stats(m))}};
}

inline json cmd_train(const Context& ctx, const std::string& manifest_flag, const std::string& folds_flag, int only_fold) {
  const auto m = load_manifest(ctx.manifest_file(manifest_flag));
  const auto plan = load_or_make_folds(ctx, m, folds_flag);
  if (only_fold >= static_cast<int>(plan.folds.size())) throw UsageError("fold index out of range");
  json heads = json::array();
  json log = json::object();
  for (const auto& head_name : heads_of(ctx.cfg.head)) {
    const auto spec = resolve_network(ctx.cfg.network, spec_hierarchy(m), detail::parse_head(head_name),
                                      ctx.cfg.train.seed);
    const auto dir = ctx.output_dir() / "checkpoints" / head_name;
    json folds = json::array();
    for (int f = 0; f < static_cast<int>(plan.folds.size()); ++f) {
      if (only_fold >= 0 && f != only_fold) continue;
      const auto r = train_fold<float>(
          m, plan.folds[static_cast<std::size_t>(f)], spec, ctx.cfg.train, f,
          [&](const EpochLog& e) {
            ctx.log(head_name + " fold " + std::to_string(f) + " epoch " + std::to_string(e.epoch) + " loss " +
                    std::to_string(e.mean_loss) + " val " + std::to_string(e.val_accuracy));
          },
          ctx.cfg.extract);
      const auto file = checkpoint_file(dir, f);
      std::error_code ec;
      fs::create_directories(dir, ec);
      ag::save_checkpoint(file, r.checkpoint);
      json epochs = json::array();
      for (const auto& e : r.epochs) epochs.push_back(to_json(e));
      log[head_name][std::to_string(f)] = {{"epochs", epochs},
                                           {"best_epoch", r.best_epoch},
                                           {"best_val_accuracy", r.best_val_accuracy},
                                           {"n_train_patches", r.n_train_patches},
                                           {"n_val_patches", r.n_val_patches}};
      folds.push_back({{"fold", f},
                       {"checkpoint", file.generic_string()},
                       {"best_epoch", r.best_epoch},
                       {"best_val_accuracy", r.best_val_accuracy}});
    }
    heads.push_back({{"head", head_name}, {"params", Network<float>(spec).count_params()}, {"folds", folds}});
  }
  write_json_file(ctx.output_dir() / "train_log.json", log);
  return json{{"command", "train"},
              {"config_hash", config_hash(ctx.cfg.train)},
              {"seed", ctx.cfg.train.seed},
              {"version", std::string(kVersion)},
              {"heads", heads}};
}

inline json cmd_eval(const Context& ctx, const std::string& manifest_flag, const std::string& folds_flag,
                     std::vector<std::string> checkpoint_dirs) {
  const auto m = load_manifest(ctx.manifest_file(manifest_flag));
  const auto plan = load_or_make_folds(ctx, m, folds_flag);
  if (checkpoint_dirs.empty())
    for (const auto& h : heads_of(ctx.cfg.head)) checkpoint_dirs.push_back((ctx.output_dir() / "checkpoints" / h).string());
  std::vector<PredictionReport> reports;
  json summaries = json::array();
  for (const auto& dir : checkpoint_dirs) {
    std::vector<ag::Checkpoint> cks;
    for (int f = 0; f < static_cast<int>(plan.folds.size()); ++f) cks.push_back(ag::load_checkpoint(checkpoint_file(dir, f)));
    auto report = evaluate_folds(cks, m, plan, ctx.cfg.train, ctx.cfg.extract);
    const auto stem = ctx.output_dir() / ("report-" + report.head);
    write_json_file(stem.string() + ".json", to_json(report));
    write_text_file(stem.string() + ".csv", to_csv(report));
    summaries.push_back({{"head", report.head},
                         {"report", stem.generic_string() + ".json"},
                         {"fold_accuracy", report.summary.accuracies},
                         {"mean", report.summary.mean},
                         {"std", report.summary.sample_std},
                         {"population_std", report.summary.population_std}});
    reports.push_back(std::move(report));
  }
  const auto table = fold_table(reports);
  write_text_file(ctx.output_dir() / "table.txt", table);
  return json{{"command", "eval"}, {"reports", summaries}, {"table", table}};
}

inline json cmd_predict(const Context& ctx, const std::string& checkpoint, const std::vector<std::string>& images) {
  if (images.empty()) throw UsageError("predict needs at least one --image");
  auto net = Network<float>::from_checkpoint(ag::load_checkpoint(checkpoint));
  net.set_mode(Mode::Eval);
  std::vector<json> rows(images.size());
  parallel_for(images.size(), ctx.cfg.train.threads, [&](std::size_t i) {
    const auto p = predict_image(net, read_image(images[i]),
                                 static_cast<std::size_t>(ctx.cfg.train.patches_per_image_eval), 64, ctx.cfg.extract);
    rows[i] = {{"image", images[i]},
               {"brand", p.brand_name},
               {"model", p.model_name},
               {"brand_tally", p.brand_tally},
               {"model_tally", p.model_tally},
               {"n_patches", p.n_patches}};
  });
  const auto file = ctx.output_dir() / "predictions.json";
  write_json_file(file, rows);
  return json{{"command", "predict"}, {"predictions", rows}, {"file", file.generic_string()}};
}

inline json cmd_count_params(const Context& ctx, const std::string& spec_flag, const std::string& head_flag) {
  const std::string ref = spec_flag.empty() ? ctx.cfg.network : spec_flag;
  const Head head = detail::parse_head(head_flag.empty() ? (ctx.cfg.head == "both" ? "hierarchical" : ctx.cfg.head)
                                                         : head_flag);
  NetworkSpec spec;
  if (ref == "paper")
    spec = paper_default_spec(dresden_hierarchy(), head);
  else if (ref == "toy")
    spec = toy_spec(synth_hierarchy(ctx.cfg.synth), head);
  else
    spec = resolve_network(ref, {}, head, 0);
  const Network<float> net(spec);
  return json{{"command", "count-params"},
              {"params", net.count_params()},
              {"head", to_string(spec.head)},
              {"spec_hash", spec_hash(spec)}};
}

// ---------------------------------------------------------------------------
// Entry point

inline json error_record(const char* kind, const std::string& message, int code) {
  return json{{"error", kind}, {"message", message}, {"exit_code", code}};
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Hierarchical camera brand/model identification"};
  app.name("hcbcam");
  app.set_version_flag("--version", json{{"name", "hcbcam"}, {"version", std::string(kVersion)}}.dump());
  app.require_subcommand(1);

  std::string config_file, output_dir, cache_dir;
  std::optional<int> threads;
  app.add_option("--config", config_file, "run configuration JSON")->check(CLI::ExistingFile);
  app.add_option("--output", output_dir, "output directory (env " + std::string(kEnvOutputDir) + ")");
  app.add_option("--cache", cache_dir, "patch cache directory (env " + std::string(kEnvCacheDir) + ")");
  app.add_option("--threads", threads, "worker threads; 1 is bitwise reproducible")->check(CLI::PositiveNumber);

  std::string root, pattern, manifest, folds_file, spec_ref, out_dir, checkpoint, head, network, thresholds;
  std::vector<std::string> images, checkpoint_dirs;
  std::optional<int> n_folds, epochs, batch, patch_size, stride;
  std::optional<double> val_fraction;
  std::optional<std::uint64_t> seed, k;
  std::optional<std::size_t> patch_count;
  int fold = -1;
  bool no_filters = false;

  auto* scan = app.add_subcommand("scan", "index a dataset directory into a manifest");
  scan->add_option("--root", root, "dataset root");
  scan->add_option("--pattern", pattern, "file name regex capturing brand, model, device, image id");
  scan->add_flag("--no-filters", no_filters, "keep single-device models and the D70/D70s split");

  auto* folds = app.add_subcommand("folds", "plan leave-one-device-out folds");
  folds->add_option("--manifest", manifest);
  folds->add_option("--folds", n_folds)->check(CLI::PositiveNumber);
  folds->add_option("--val-fraction", val_fraction);
  folds->add_option("--seed", seed);

  auto* extract = app.add_subcommand("extract", "extract ranked patches into the patch cache");
  extract->add_option("--manifest", manifest);
  extract->add_option("--image", images, "image file (repeatable); default: every manifest image");
  extract->add_option("--patch-count", patch_count)->check(CLI::PositiveNumber);
  extract->add_option("--thresholds", thresholds, "lower,upper std thresholds");
  extract->add_option("--patch-size", patch_size)->check(CLI::PositiveNumber);
  extract->add_option("--stride", stride)->check(CLI::PositiveNumber);

  auto* balance = app.add_subcommand("balance", "compute the hierarchical patch quota plan");
  balance->add_option("--manifest", manifest);
  balance->add_option("--fold-plan", folds_file);
  balance->add_option("--fold", fold, "plan the training split of this fold");
  balance->add_option("--k", k)->check(CLI::PositiveNumber);

  auto* synth = app.add_subcommand("synth", "generate the synthetic camera dataset");
  synth->add_option("--spec", spec_ref, "'default' or a synth spec JSON file");
  synth->add_option("--out", out_dir, "image directory (default <output>/synth)");
  synth->add_option("--seed", seed);

  auto* train = app.add_subcommand("train", "train one checkpoint per fold");
  train->add_option("--manifest", manifest);
  train->add_option("--fold-plan", folds_file);
  train->add_option("--fold", fold, "train only this fold");
  train->add_option("--head", head, "hierarchical, flat or both");
  train->add_option("--network", network, "paper, toy or a network spec JSON file");
  train->add_option("--epochs", epochs)->check(CLI::PositiveNumber);
  train->add_option("--batch-size", batch)->check(CLI::PositiveNumber);
  train->add_option("--k", k)->check(CLI::PositiveNumber);
  train->add_option("--seed", seed);
  train->add_option("--thresholds", thresholds, "lower,upper std thresholds");

  auto* eval = app.add_subcommand("eval", "evaluate fold checkpoints on held-out devices");
  eval->add_option("--manifest", manifest);
  eval->add_option("--fold-plan", folds_file);
  eval->add_option("--checkpoints", checkpoint_dirs, "checkpoint directory (repeatable)");
  eval->add_option("--head", head, "hierarchical, flat or both");
  eval->add_option("--patch-count", patch_count)->check(CLI::PositiveNumber);
  eval->add_option("--thresholds", thresholds, "lower,upper std thresholds");

  auto* predict = app.add_subcommand("predict", "predict brand and model of images");
  predict->add_option("--checkpoint", checkpoint)->required();
  predict->add_option("--image", images, "image file (repeatable)")->required();
  predict->add_option("--patch-count", patch_count)->check(CLI::PositiveNumber);

  auto* count = app.add_subcommand("count-params", "print the trainable parameter count");
  count->add_option("--spec", spec_ref, "paper, toy or a network spec JSON file");
  count->add_option("--head", head, "hierarchical or flat");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << app.help() << error_record("usage", e.what(), kExitUsage).dump() << std::endl;
    return kExitUsage;
  }

  try {
    Context ctx;
    ctx.out = &out;
    ctx.err = &err;
    if (!config_file.empty()) ctx.cfg = run_config_from_json(read_json_file(config_file));
    auto& c = ctx.cfg;
    if (const char* env = std::getenv(kEnvOutputDir); env && *env) c.paths.output_dir = env;
    if (const char* env = std::getenv(kEnvCacheDir); env && *env) c.paths.cache_dir = env;
    if (!output_dir.empty()) c.paths.output_dir = output_dir;
    if (!cache_dir.empty()) c.paths.cache_dir = cache_dir;
    if (threads) c.train.threads = *threads;
    if (no_filters) c.paper_filters = false;
    if (n_folds) c.folds.n_folds = *n_folds;
    if (val_fraction) c.folds.val_fraction = *val_fraction;
    if (epochs) c.train.epochs = *epochs;
    if (batch) c.train.batch_size = *batch;
    if (k) c.train.k = *k;
    if (patch_size) c.extract.geometry.size = *patch_size;
    if (stride) c.extract.geometry.stride = *stride;
    if (patch_count) c.train.patches_per_image_eval = static_cast<int>(*patch_count);
    if (!head.empty()) c.head = head;
    if (!network.empty()) c.network = network;
    if (!thresholds.empty()) {
      const auto comma = thresholds.find(',');
      if (comma == std::string::npos) throw UsageError("--thresholds expects lower,upper");
      try {
        c.extract.thresholds.lower = std::stod(thresholds.substr(0, comma));
        c.extract.thresholds.upper = std::stod(thresholds.substr(comma + 1));
      } catch (const std::logic_error&) {
        throw UsageError("--thresholds expects two numbers, got '" + thresholds + "'");
      }
    }
    if (seed) {
      if (*folds) c.folds.seed = *seed;
      if (*synth) c.synth.seed = *seed;
      if (*train) c.train.seed = *seed;
    }
    validate(c);

    json summary;
    if (*scan)
      summary = cmd_scan(ctx, root, pattern);
    else if (*folds)
      summary = cmd_folds(ctx, manifest);
    else if (*extract)
      summary = cmd_extract(ctx, manifest, images, static_cast<std::size_t>(c.train.patches_per_image_eval));
    else if (*balance)
      summary = cmd_balance(ctx, manifest, folds_file, fold, c.train.k);
    else if (*synth)
      summary = cmd_synth(ctx, spec_ref, out_dir);
    else if (*train)
      summary = cmd_train(ctx, manifest, folds_file, fold);
    else if (*eval)
      summary = cmd_eval(ctx, manifest, folds_file, checkpoint_dirs);
    else if (*predict)
      summary = cmd_predict(ctx, checkpoint, images);
    else if (*count)
      summary = cmd_count_params(ctx, spec_ref, head);
    ctx.emit(summary);
    return kExitOk;
  } catch (const UsageError& e) {
    err << error_record("usage", e.what(), kExitUsage).dump() << std::endl;
    return kExitUsage;
  } catch (const NumericError& e) {
    err << error_record("numeric", e.what(), kExitNumeric).dump() << std::endl;
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << error_record("data", e.what(), kExitData).dump() << std::endl;
    return kExitData;
  }
}

}  // namespace hcbcam::cli
