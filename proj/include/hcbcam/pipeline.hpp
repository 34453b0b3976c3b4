#pragma once

// Per-fold training with best-epoch selection, patch-level majority voting
// and fold-level reporting.

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstdio>
#include <exception>
#include <cmath>
#include <functional>
#include <future>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "hcbcam/balance.hpp"
#include "hcbcam/common.hpp"
#include "hcbcam/hcbnet.hpp"
#include "hcbcam/image.hpp"
#include "hcbcam/manifest.hpp"
#include "hcbcam/patchex.hpp"

namespace hcbcam {

struct TrainConfig {
  int epochs = 40;
  int batch_size = 512;
  double lr0 = 0.1;
  double momentum = 0.9;
  double lr_gamma = 0.9;
  double weight_decay = 0.005;
  /// false: biases and batchnorm gamma/beta are exempt from weight decay.
  bool decay_bias_and_norm = true;
  double alpha = 1.0;
  std::uint64_t k = 260000;
  /// Patch budget of the validation stream, balanced like the training one.
  std::uint64_t val_k = 39000;
  int patches_per_image_eval = 200;
  std::uint64_t seed = 1;
  int threads = 1;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline void validate(const TrainConfig& c) {
  if (c.epochs < 1) throw UsageError("train config: epochs must be >= 1");
  if (c.batch_size < 2) throw UsageError("train config: batch_size must be >= 2");
  if (!(c.lr0 > 0) || !(c.lr_gamma > 0)) throw UsageError("train config: lr0 and lr_gamma must be positive");
  if (c.momentum < 0 || c.weight_decay < 0 || c.alpha < 0)
    throw UsageError("train config: momentum, weight_decay and alpha must be non-negative");
  if (c.k < 1 || c.val_k < 1) throw UsageError("train config: k and val_k must be >= 1");
  if (c.patches_per_image_eval < 1) throw UsageError("train config: patches_per_image_eval must be >= 1");
  if (c.threads < 1) throw UsageError("train config: threads must be >= 1");
}

inline json to_json(const TrainConfig& c) {
  return json{{"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"lr0", c.lr0},
              {"momentum", c.momentum},
              {"lr_gamma", c.lr_gamma},
              {"weight_decay", c.weight_decay},
              {"decay_bias_and_norm", c.decay_bias_and_norm},
              {"alpha", c.alpha},
              {"k", c.k},
              {"val_k", c.val_k},
              {"patches_per_image_eval", c.patches_per_image_eval},
              {"seed", c.seed},
              {"threads", c.threads}};
}

inline TrainConfig train_config_from_json(const json& j) {
  if (!j.is_object()) throw UsageError("train config must be a JSON object");
  TrainConfig c;
  const json defaults = to_json(c);
  for (const auto& [key, v] : j.items())
    if (!defaults.contains(key)) throw UsageError("train config: unknown key '" + key + "'");
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr0 = j.value("lr0", c.lr0);
    c.momentum = j.value("momentum", c.momentum);
    c.lr_gamma = j.value("lr_gamma", c.lr_gamma);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.decay_bias_and_norm = j.value("decay_bias_and_norm", c.decay_bias_and_norm);
    c.alpha = j.value("alpha", c.alpha);
    c.k = j.value("k", c.k);
    c.val_k = j.value("val_k", c.val_k);
    c.patches_per_image_eval = j.value("patches_per_image_eval", c.patches_per_image_eval);
    c.seed = j.value("seed", c.seed);
    c.threads = j.value("threads", c.threads);
  } catch (const json::exception& e) {
    throw UsageError(std::string("train config: ") + e.what());
  }
  validate(c);
  return c;
}

/// Hash of everything that influences training; the thread count is excluded.
inline std::string config_hash(const TrainConfig& c) {
  auto j = to_json(c);
  j.erase("threads");
  return json_hash(j);
}

// ---------------------------------------------------------------------------
// Labels

/// Brands and models of a manifest in sorted order, as network branches.
inline std::vector<BrandSpec> spec_hierarchy(const Manifest& m) {
  std::vector<BrandSpec> out;
  for (const auto& b : m.hierarchy().brands) {
    BrandSpec bs{b.name, {}};
    for (const auto& mod : b.models) bs.models.push_back(mod.name);
    out.push_back(std::move(bs));
  }
  return out;
}

struct Label {
  int brand = 0;
  int model = 0;   // within the brand
  int global = 0;  // over all models in hierarchy order
};

class LabelMap {
public:
  explicit LabelMap(const std::vector<BrandSpec>& h) : hierarchy_(h) {
    int g = 0;
    for (std::size_t b = 0; b < h.size(); ++b)
      for (std::size_t m = 0; m < h[b].models.size(); ++m, ++g) {
        index_[{h[b].name, h[b].models[m]}] = {static_cast<int>(b), static_cast<int>(m), g};
        globals_.push_back({static_cast<int>(b), static_cast<int>(m), g});
      }
  }

  Label of(const std::string& brand, const std::string& model) const {
    const auto it = index_.find({brand, model});
    if (it == index_.end()) throw DataError("camera " + brand + "_" + model + " is not part of the network hierarchy");
    return it->second;
  }
  Label of(const ImageRecord& r) const { return of(r.brand, r.model); }
  Label from_global(int g) const { return globals_.at(static_cast<std::size_t>(g)); }

  const std::string& brand_name(int b) const { return hierarchy_.at(static_cast<std::size_t>(b)).name; }
  const std::string& model_name(int b, int m) const {
    return hierarchy_.at(static_cast<std::size_t>(b)).models.at(static_cast<std::size_t>(m));
  }
  std::size_t n_brands() const { return hierarchy_.size(); }
  std::size_t n_models(int b) const { return hierarchy_.at(static_cast<std::size_t>(b)).models.size(); }
  std::size_t n_models() const { return globals_.size(); }

private:
  std::vector<BrandSpec> hierarchy_;
  std::map<std::pair<std::string, std::string>, Label> index_;
  std::vector<Label> globals_;
};

// ---------------------------------------------------------------------------
// Patch streams

/// One training or validation patch with its provenance.
struct PatchRef {
  std::size_t image = 0;  // index into PatchStream::images
  TileOrigin origin;
  Label label;
};

struct PatchStream {
  std::vector<ImageRecord> records;
  std::vector<Image8> images;
  std::vector<PatchRef> patches;
  std::map<std::string, std::uint64_t> deficits;
  int patch_size = kPatchSize;
};

/// Loads the records, ranks their tiles and realizes a balanced sample of
/// `k` patches over them.
inline PatchStream build_stream(const std::vector<ImageRecord>& records, std::uint64_t k, const LabelMap& labels,
                                int threads = 1, const ExtractOptions& opt = {}) {
  PatchStream s;
  s.patch_size = opt.geometry.size;
  if (records.empty()) return s;
  s.records = records;
  s.images.resize(records.size());
  std::vector<std::vector<TileInfo>> ranked(records.size());
  parallel_for(records.size(), threads, [&](std::size_t i) {
    s.images[i] = read_image(records[i].path);
    ranked[i] = rank_tiles(survey_tiles(s.images[i], opt.geometry, opt.thresholds));
  });
  const auto plan = plan_counts(records, k);
  PatchCatalog catalog;
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < records.size(); ++i) {
    catalog[records[i].path] = ranked[i].size();
    index[records[i].path] = i;
  }
  const auto realized = realize_plan(plan, catalog);
  for (const auto& e : realized.entries) {
    const std::size_t i = index.at(e.image_path);
    const auto label = labels.of(records[i]);
    for (auto r : e.patch_indices) s.patches.push_back({i, ranked[i][r].origin, label});
  }
  s.deficits = realized.deficits;
  return s;
}

/// Mean-subtracted patches of `refs` as an (N, 3, size, size) batch.
template <class T>
Tensor<T> assemble_batch(const PatchStream& s, std::span<const PatchRef> refs) {
  const int size = s.patch_size;
  const std::size_t per = 3 * static_cast<std::size_t>(size) * static_cast<std::size_t>(size);
  std::vector<T> values(refs.size() * per);
  std::vector<float> buf(per);
  for (std::size_t n = 0; n < refs.size(); ++n) {
    copy_tile(s.images[refs[n].image], refs[n].origin, size, buf);
    subtract_channel_means(buf, size);
    std::copy(buf.begin(), buf.end(), values.begin() + static_cast<std::ptrdiff_t>(n * per));
  }
  return Tensor<T>::from({static_cast<int>(refs.size()), 3, size, size}, std::move(values));
}

template <class T>
Tensor<T> assemble_batch(const std::vector<Patch>& patches) {
  if (patches.empty()) throw DataError("no patches to assemble");
  const int size = patches.front().size;
  const std::size_t per = 3 * static_cast<std::size_t>(size) * static_cast<std::size_t>(size);
  std::vector<T> values(patches.size() * per);
  for (std::size_t n = 0; n < patches.size(); ++n)
    std::copy(patches[n].values.begin(), patches[n].values.end(), values.begin() + static_cast<std::ptrdiff_t>(n * per));
  return Tensor<T>::from({static_cast<int>(patches.size()), 3, size, size}, std::move(values));
}

/// Throws if any patch of `s` comes from a device the fold holds out.
inline void check_isolation(const PatchStream& s, const Fold& fold) {
  for (const auto& p : s.patches) {
    const auto& r = s.records[p.image];
    if (split_of(fold, r) == Split::Test)
      throw DataError("test isolation violated: patch from held-out device " + std::to_string(r.device) + " of " +
                      r.model_name() + " (" + r.path + ")");
  }
}

// ---------------------------------------------------------------------------
// Per-patch scoring

/// Class probabilities of one patch. For the hierarchical head `model`
/// holds one vector per brand (empty for single-model brands); for the flat
/// head `brand` is empty and `flat` holds the model distribution.
struct PatchScores {
  std::vector<double> brand;
  std::vector<std::vector<double>> model;
  std::vector<double> flat;
};

inline std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Eval-mode scores for a batch; no tape is recorded. Concurrent calls are
/// safe once the network is already in eval mode.
template <class T>
std::vector<PatchScores> score_batch(Network<T>& net, const Tensor<T>& x) {
  ag::NoGradGuard guard;
  const Mode prev = net.mode();
  if (prev != Mode::Eval) net.set_mode(Mode::Eval);
  const int N = x.dim(0);
  std::vector<PatchScores> out(static_cast<std::size_t>(N));
  if (net.spec().head == Head::Hierarchical) {
    const auto o = net.forward_hierarchical(x);
    const int B = o.brand_probs.dim(1);
    for (int n = 0; n < N; ++n) {
      auto& s = out[static_cast<std::size_t>(n)];
      for (int b = 0; b < B; ++b) s.brand.push_back(o.brand_probs.values()[static_cast<std::size_t>(n * B + b)]);
      for (const auto& mp : o.model_probs) {
        std::vector<double> v;
        if (mp.defined()) {
          const int M = mp.dim(1);
          for (int m = 0; m < M; ++m) v.push_back(mp.values()[static_cast<std::size_t>(n * M + m)]);
        }
        s.model.push_back(std::move(v));
      }
    }
  } else {
    const auto probs = ag::softmax(net.forward_flat(x));
    const int M = probs.dim(1);
    for (int n = 0; n < N; ++n)
      for (int m = 0; m < M; ++m)
        out[static_cast<std::size_t>(n)].flat.push_back(probs.values()[static_cast<std::size_t>(n * M + m)]);
  }
  if (prev != Mode::Eval) net.set_mode(prev);
  return out;
}

/// Patch-level decision: (brand index, model index within the brand).
inline std::pair<int, int> patch_decision(const PatchScores& s, const LabelMap& labels) {
  if (!s.flat.empty()) {
    const auto l = labels.from_global(static_cast<int>(argmax(s.flat)));
    return {l.brand, l.model};
  }
  const int b = static_cast<int>(argmax(s.brand));
  const auto& mp = s.model[static_cast<std::size_t>(b)];
  return {b, mp.empty() ? 0 : static_cast<int>(argmax(mp))};
}

// ---------------------------------------------------------------------------
// Majority voting

struct VoteResult {
  int winner = -1;
  std::vector<std::size_t> tallies;
  std::vector<double> prob_sums;
};

/// Sum of values in ascending order, so the result ignores input order.
inline double order_free_sum(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  long double s = 0;
  for (double x : v) s += x;
  return static_cast<double>(s);
}

/// Majority of `votes` over n classes. Ties go to the larger summed
/// probability, then to the lower class index. probs[i] is patch i's
/// distribution; it may be empty when no probabilities are available.
inline VoteResult majority_vote(const std::vector<int>& votes, const std::vector<std::vector<double>>& probs,
                                std::size_t n_classes) {
  if (votes.empty()) throw DataError("majority vote over zero patches");
  if (!probs.empty() && probs.size() != votes.size()) throw UsageError("majority_vote: probs/votes size mismatch");
  VoteResult r;
  r.tallies.assign(n_classes, 0);
  r.prob_sums.assign(n_classes, 0.0);
  for (int v : votes) {
    if (v < 0 || static_cast<std::size_t>(v) >= n_classes) throw UsageError("majority_vote: vote out of range");
    ++r.tallies[static_cast<std::size_t>(v)];
  }
  for (std::size_t c = 0; c < n_classes && !probs.empty(); ++c) {
    std::vector<double> col;
    for (const auto& p : probs) {
      if (p.size() != n_classes) throw UsageError("majority_vote: distribution size mismatch");
      col.push_back(p[c]);
    }
    r.prob_sums[c] = order_free_sum(std::move(col));
  }
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (r.winner < 0) {
      r.winner = static_cast<int>(c);
      continue;
    }
    const auto w = static_cast<std::size_t>(r.winner);
    if (r.tallies[c] > r.tallies[w] || (r.tallies[c] == r.tallies[w] && r.prob_sums[c] > r.prob_sums[w]))
      r.winner = static_cast<int>(c);
  }
  return r;
}

struct ImagePrediction {
  int brand = -1;
  int model = -1;  // within the brand
  std::string brand_name;
  std::string model_name;
  std::map<std::string, std::size_t> brand_tally;
  std::map<std::string, std::size_t> model_tally;
  std::size_t n_patches = 0;
};

/// Image decision from per-patch scores. Hierarchical: brand vote, then a
/// vote among the predicted brand's model-branch argmaxes over the same
/// patches. Flat: vote over all models.
inline ImagePrediction vote_image(const std::vector<PatchScores>& scores, const LabelMap& labels) {
  if (scores.empty()) throw DataError("no patches to vote on");
  ImagePrediction p;
  p.n_patches = scores.size();
  if (!scores.front().flat.empty()) {
    std::vector<int> votes;
    std::vector<std::vector<double>> probs;
    for (const auto& s : scores) {
      votes.push_back(static_cast<int>(argmax(s.flat)));
      probs.push_back(s.flat);
    }
    const auto v = majority_vote(votes, probs, labels.n_models());
    const auto l = labels.from_global(v.winner);
    p.brand = l.brand;
    p.model = l.model;
    for (std::size_t g = 0; g < v.tallies.size(); ++g) {
      const auto lg = labels.from_global(static_cast<int>(g));
      p.model_tally[labels.brand_name(lg.brand) + "_" + labels.model_name(lg.brand, lg.model)] = v.tallies[g];
      p.brand_tally[labels.brand_name(lg.brand)] += v.tallies[g];
    }
  } else {
    std::vector<int> votes;
    std::vector<std::vector<double>> probs;
    for (const auto& s : scores) {
      votes.push_back(static_cast<int>(argmax(s.brand)));
      probs.push_back(s.brand);
    }
    const auto bv = majority_vote(votes, probs, labels.n_brands());
    p.brand = bv.winner;
    for (std::size_t b = 0; b < bv.tallies.size(); ++b) p.brand_tally[labels.brand_name(static_cast<int>(b))] = bv.tallies[b];
    const auto nm = labels.n_models(p.brand);
    if (nm == 1) {
      p.model = 0;
      p.model_tally[labels.brand_name(p.brand) + "_" + labels.model_name(p.brand, 0)] = scores.size();
    } else {
      std::vector<int> mv;
      std::vector<std::vector<double>> mp;
      for (const auto& s : scores) {
        const auto& d = s.model[static_cast<std::size_t>(p.brand)];
        mv.push_back(static_cast<int>(argmax(d)));
        mp.push_back(d);
      }
      const auto v = majority_vote(mv, mp, nm);
      p.model = v.winner;
      for (std::size_t m = 0; m < nm; ++m)
        p.model_tally[labels.brand_name(p.brand) + "_" + labels.model_name(p.brand, static_cast<int>(m))] = v.tallies[m];
    }
  }
  p.brand_name = labels.brand_name(p.brand);
  p.model_name = labels.model_name(p.brand, p.model);
  return p;
}

/// Scores up to `p` selected patches of `img` in batches of `batch` and votes.
template <class T, class Px>
ImagePrediction predict_image(Network<T>& net, const basic_image<Px>& img, std::size_t p, int batch = 64,
                              const ExtractOptions& opt = {}) {
  const auto sel = select_patches(img, p, 0, opt);
  if (sel.patches.empty()) throw DataError("image admits no tiles");
  const LabelMap labels(net.spec().hierarchy);
  std::vector<PatchScores> scores;
  for (std::size_t i = 0; i < sel.patches.size(); i += static_cast<std::size_t>(batch)) {
    const auto end = std::min(sel.patches.size(), i + static_cast<std::size_t>(batch));
    const std::vector<Patch> chunk(sel.patches.begin() + static_cast<std::ptrdiff_t>(i),
                                   sel.patches.begin() + static_cast<std::ptrdiff_t>(end));
    auto s = score_batch(net, assemble_batch<T>(chunk));
    scores.insert(scores.end(), s.begin(), s.end());
  }
  return vote_image(scores, labels);
}

// ---------------------------------------------------------------------------
// Training

struct EpochLog {
  int epoch = 0;
  double lr = 0;
  double mean_loss = 0;
  double val_accuracy = 0;
};

struct TrainResult {
  ag::Checkpoint checkpoint;  // best epoch
  int best_epoch = -1;
  double best_val_accuracy = -1;
  std::vector<EpochLog> epochs;
  std::vector<float> step_losses;
  std::size_t n_train_patches = 0;
  std::size_t n_val_patches = 0;
};

inline json to_json(const EpochLog& e) {
  return json{{"epoch", e.epoch}, {"lr", e.lr}, {"mean_loss", e.mean_loss}, {"val_accuracy", e.val_accuracy}};
}

/// Fraction of patches whose (brand, model) decision is correct.
template <class T>
double patch_accuracy(Network<T>& net, const PatchStream& s, int batch) {
  if (s.patches.empty()) return 0.0;
  const LabelMap labels(net.spec().hierarchy);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < s.patches.size(); i += static_cast<std::size_t>(batch)) {
    const auto end = std::min(s.patches.size(), i + static_cast<std::size_t>(batch));
    const std::span<const PatchRef> refs(s.patches.data() + i, end - i);
    const auto scores = score_batch(net, assemble_batch<T>(s, refs));
    for (std::size_t n = 0; n < refs.size(); ++n) {
      const auto [b, m] = patch_decision(scores[n], labels);
      correct += (b == refs[n].label.brand && m == refs[n].label.model) ? 1 : 0;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(s.patches.size());
}

using ProgressFn = std::function<void(const EpochLog&)>;

/// SGD over a balanced, per-epoch shuffled patch stream. The returned
/// checkpoint is the epoch with the highest patch-level validation accuracy
/// (earliest on ties). A trailing batch of one patch is dropped because
/// batch normalization needs two samples.
template <class T = float>
TrainResult train_fold(const Manifest& manifest, const Fold& fold, NetworkSpec spec, const TrainConfig& cfg,
                       int fold_index = 0, const ProgressFn& progress = {}, const ExtractOptions& opt = {}) {
  validate(cfg);
  const LabelMap labels(spec.hierarchy);
  const auto train_records = records_in(manifest, fold, Split::Train);
  const auto val_records = records_in(manifest, fold, Split::Validation);
  if (train_records.empty()) throw DataError("fold " + std::to_string(fold_index) + " has an empty training set");
  if (opt.geometry.size != spec.input_size)
    throw UsageError("patch size " + std::to_string(opt.geometry.size) + " does not match network input " +
                     std::to_string(spec.input_size));
  const auto train = build_stream(train_records, cfg.k, labels, cfg.threads, opt);
  const auto val = build_stream(val_records, cfg.val_k, labels, cfg.threads, opt);
  if (train.patches.size() < 2) throw DataError("fold " + std::to_string(fold_index) + " yields fewer than 2 patches");
  check_isolation(train, fold);
  check_isolation(val, fold);

  Network<T> net(spec);
  auto params = net.parameters();
  TrainResult result;
  result.n_train_patches = train.patches.size();
  result.n_val_patches = val.patches.size();
  std::vector<PatchRef> order = train.patches;
  Rng shuffle(mix_seed(mix_seed(cfg.seed, "shuffle"), static_cast<std::uint64_t>(fold_index)));
  std::size_t step = 0;
  const auto B = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle.shuffle(order);
    const ag::SgdOptions sgd{ag::lr_schedule(epoch, cfg.lr0, cfg.lr_gamma), cfg.momentum, cfg.weight_decay,
                             cfg.decay_bias_and_norm};
    net.set_mode(Mode::Train);
    double loss_sum = 0;
    std::size_t n_steps = 0;
    // With more than one thread the next batch is assembled while the
    // current one trains (a buffer of one batch).
    auto batch_at = [&](std::size_t i) {
      return std::span<const PatchRef>(order.data() + i, std::min(order.size(), i + B) - i);
    };
    std::future<Tensor<T>> pending;
    for (std::size_t i = 0; i + 2 <= order.size(); i += B, ++step) {
      const auto refs = batch_at(i);
      const auto x = pending.valid() ? pending.get() : assemble_batch<T>(train, refs);
      if (cfg.threads > 1 && i + B + 2 <= order.size())
        pending = std::async(std::launch::async, [&train, next = batch_at(i + B)] { return assemble_batch<T>(train, next); });
      net.zero_grad();
      try {
        Tensor<T> loss;
        if (spec.head == Head::Hierarchical) {
          std::vector<int> bl, ml;
          for (const auto& r : refs) {
            bl.push_back(r.label.brand);
            ml.push_back(r.label.model);
          }
          loss = net.loss_total(net.forward_hierarchical(x), bl, ml, cfg.alpha).total;
        } else {
          std::vector<int> gl;
          for (const auto& r : refs) gl.push_back(r.label.global);
          loss = net.loss_flat(net.forward_flat(x), gl);
        }
        ag::backward(loss);
        result.step_losses.push_back(static_cast<float>(loss.item()));
        loss_sum += static_cast<double>(loss.item());
      } catch (const NumericError& e) {
        throw NumericError("training diverged at step " + std::to_string(step) + " (epoch " + std::to_string(epoch) +
                           "): " + e.what());
      }
      ag::sgd_step(params, sgd);
      ++n_steps;
    }
    EpochLog log{epoch, sgd.lr, n_steps ? loss_sum / static_cast<double>(n_steps) : 0.0,
                 patch_accuracy(net, val, cfg.batch_size)};
    result.epochs.push_back(log);
    if (progress) progress(log);
    if (log.val_accuracy > result.best_val_accuracy) {
      result.best_val_accuracy = log.val_accuracy;
      result.best_epoch = epoch;
      result.checkpoint = net.to_checkpoint(json{{"epoch", epoch},
                                                 {"lr", sgd.lr},
                                                 {"val_accuracy", log.val_accuracy},
                                                 {"config_hash", config_hash(cfg)},
                                                 {"train_config", to_json(cfg)},
                                                 {"fold", fold_index},
                                                 {"head", to_string(spec.head)},
                                                 {"version", std::string(kVersion)}});
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation and reporting

struct PredictionRow {
  int fold = 0;
  std::string path;
  std::string true_brand, true_model;
  std::string pred_brand, pred_model;
  std::map<std::string, std::size_t> brand_tally;
  std::map<std::string, std::size_t> model_tally;
  bool correct() const { return true_brand == pred_brand && true_model == pred_model; }
};

struct FoldSummary {
  std::vector<double> accuracies;
  double mean = 0;
  double sample_std = 0;      // n - 1 denominator
  double population_std = 0;  // n denominator
};

inline FoldSummary summarize(std::vector<double> acc) {
  FoldSummary s;
  s.accuracies = std::move(acc);
  const auto n = static_cast<double>(s.accuracies.size());
  if (s.accuracies.empty()) return s;
  long double sum = 0;
  for (double a : s.accuracies) sum += a;
  s.mean = static_cast<double>(sum / n);
  long double sq = 0;
  for (double a : s.accuracies) sq += (a - s.mean) * (a - s.mean);
  s.population_std = static_cast<double>(std::sqrt(sq / n));
  s.sample_std = s.accuracies.size() > 1 ? static_cast<double>(std::sqrt(sq / (n - 1))) : 0.0;
  return s;
}

struct PredictionReport {
  std::string head;
  std::vector<PredictionRow> rows;
  FoldSummary summary;
};

/// Per-fold image-level accuracy recomputed from the rows.
inline std::vector<double> fold_accuracies(const std::vector<PredictionRow>& rows, int n_folds) {
  std::vector<std::size_t> total(static_cast<std::size_t>(n_folds), 0), correct(static_cast<std::size_t>(n_folds), 0);
  for (const auto& r : rows) {
    if (r.fold < 0 || r.fold >= n_folds) throw DataError("prediction row for unknown fold " + std::to_string(r.fold));
    ++total[static_cast<std::size_t>(r.fold)];
    correct[static_cast<std::size_t>(r.fold)] += r.correct() ? 1 : 0;
  }
  std::vector<double> acc;
  for (int f = 0; f < n_folds; ++f) {
    if (total[static_cast<std::size_t>(f)] == 0) throw DataError("fold " + std::to_string(f) + " has no test images");
    acc.push_back(static_cast<double>(correct[static_cast<std::size_t>(f)]) /
                  static_cast<double>(total[static_cast<std::size_t>(f)]));
  }
  return acc;
}

inline PredictionReport make_report(std::string head, std::vector<PredictionRow> rows, int n_folds) {
  PredictionReport r{std::move(head), std::move(rows), {}};
  r.summary = summarize(fold_accuracies(r.rows, n_folds));
  return r;
}

/// Predicts every held-out image of each fold with that fold's checkpoint.
inline PredictionReport evaluate_folds(const std::vector<ag::Checkpoint>& checkpoints, const Manifest& manifest,
                                       const FoldPlan& plan, const TrainConfig& cfg,
                                       const ExtractOptions& opt = {}) {
  if (checkpoints.size() != plan.folds.size())
    throw DataError("expected " + std::to_string(plan.folds.size()) + " fold checkpoints, got " +
                    std::to_string(checkpoints.size()));
  std::vector<PredictionRow> rows;
  std::string head;
  for (std::size_t f = 0; f < plan.folds.size(); ++f) {
    auto net = Network<float>::from_checkpoint(checkpoints[f]);
    net.set_mode(Mode::Eval);
    head = to_string(net.spec().head);
    const auto test = records_in(manifest, plan.folds[f], Split::Test);
    std::vector<PredictionRow> fold_rows(test.size());
    parallel_for(test.size(), cfg.threads, [&](std::size_t i) {
      const auto img = read_image(test[i].path);
      const auto p = predict_image(net, img, static_cast<std::size_t>(cfg.patches_per_image_eval), 64, opt);
      auto& row = fold_rows[i];
      row.fold = static_cast<int>(f);
      row.path = test[i].path;
      row.true_brand = test[i].brand;
      row.true_model = test[i].model;
      row.pred_brand = p.brand_name;
      row.pred_model = p.model_name;
      row.brand_tally = p.brand_tally;
      row.model_tally = p.model_tally;
    });
    rows.insert(rows.end(), fold_rows.begin(), fold_rows.end());
  }
  return make_report(head, std::move(rows), static_cast<int>(plan.folds.size()));
}

inline json to_json(const PredictionReport& r) {
  json rows = json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"fold", row.fold},
                    {"path", row.path},
                    {"true_brand", row.true_brand},
                    {"true_model", row.true_model},
                    {"pred_brand", row.pred_brand},
                    {"pred_model", row.pred_model},
                    {"brand_tally", row.brand_tally},
                    {"model_tally", row.model_tally},
                    {"correct", row.correct()}});
  return json{{"head", r.head},
              {"rows", rows},
              {"fold_accuracy", r.summary.accuracies},
              {"mean", r.summary.mean},
              {"std", r.summary.sample_std},
              {"population_std", r.summary.population_std}};
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

inline std::string tally_str(const std::map<std::string, std::size_t>& t) {
  std::string out;
  for (const auto& [k, v] : t)
    if (v) out += (out.empty() ? "" : ";") + k + ":" + std::to_string(v);
  return out;
}

inline std::string to_csv(const PredictionReport& r) {
  std::ostringstream out;
  out << "fold,path,true_brand,true_model,pred_brand,pred_model,brand_tally,model_tally,correct\n";
  for (const auto& row : r.rows)
    out << row.fold << ',' << csv_field(row.path) << ',' << csv_field(row.true_brand) << ','
        << csv_field(row.true_model) << ',' << csv_field(row.pred_brand) << ',' << csv_field(row.pred_model) << ','
        << csv_field(tally_str(row.brand_tally)) << ',' << csv_field(tally_str(row.model_tally)) << ','
        << (row.correct() ? 1 : 0) << '\n';
  return out.str();
}

inline std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

/// "Classification | fold-1 | ... | average" table, one row per report.
inline std::string fold_table(const std::vector<PredictionReport>& reports) {
  std::size_t n_folds = 0;
  for (const auto& r : reports) n_folds = std::max(n_folds, r.summary.accuracies.size());
  std::ostringstream out;
  out << "Classification";
  for (std::size_t f = 0; f < n_folds; ++f) out << " | fold-" << f + 1;
  out << " | average\n";
  for (const auto& r : reports) {
    std::string name = r.head;
    if (!name.empty()) name[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(name[0])));
    out << name;
    for (std::size_t f = 0; f < n_folds; ++f)
      out << " | " << (f < r.summary.accuracies.size() ? fixed4(r.summary.accuracies[f]) : std::string("-"));
    out << " | " << fixed4(r.summary.mean) << " ± " << fixed4(r.summary.sample_std) << '\n';
  }
  return out.str();
}

}  // namespace hcbcam
