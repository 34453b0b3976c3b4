#pragma once

// Camera-identification networks: a four-block conv/batchnorm/ReLU/maxpool
// trunk feeding either a hierarchical head (one conv+FC branch per brand,
// one per model inside multi-model brands) or a flat three-layer classifier.

#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "hcbcam/autograd/checkpoint.hpp"
#include "hcbcam/autograd/ops.hpp"
#include "hcbcam/autograd/optim.hpp"
#include "hcbcam/common.hpp"

namespace hcbcam {

using ag::Mode;
using ag::Parameter;
using ag::Tensor;

struct BlockSpec {
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int padding = 1;
  int pool_kernel = 2;
  int pool_stride = 2;
  friend bool operator==(const BlockSpec&, const BlockSpec&) = default;
};

/// Conv -> batchnorm -> ReLU used by every brand and model branch (no pooling).
struct BranchSpec {
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int padding = 1;
  friend bool operator==(const BranchSpec&, const BranchSpec&) = default;
};

struct BrandSpec {
  std::string name;
  std::vector<std::string> models;
  friend bool operator==(const BrandSpec&, const BrandSpec&) = default;
};

enum class Head { Hierarchical, Flat };
enum class LossKind { BinaryOverSoftmax, Categorical };

struct NetworkSpec {
  int in_channels = 3;
  int input_size = 128;
  std::vector<BlockSpec> feature_blocks;
  BranchSpec branch_block;
  std::vector<BrandSpec> hierarchy;
  Head head = Head::Hierarchical;
  std::array<int, 3> flat_fc_dims{};
  LossKind loss = LossKind::BinaryOverSoftmax;
  std::uint64_t seed = 1;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  std::size_t n_models() const {
    std::size_t n = 0;
    for (const auto& b : hierarchy) n += b.models.size();
    return n;
  }
  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

inline const char* to_string(Head h) { return h == Head::Flat ? "flat" : "hierarchical"; }
inline const char* to_string(LossKind l) { return l == LossKind::Categorical ? "categorical" : "bce_over_softmax"; }

inline json to_json(const NetworkSpec& s) {
  json blocks = json::array();
  for (const auto& b : s.feature_blocks)
    blocks.push_back({{"out_channels", b.out_channels}, {"kernel", b.kernel}, {"stride", b.stride},
                      {"padding", b.padding}, {"pool_kernel", b.pool_kernel}, {"pool_stride", b.pool_stride}});
  json hier = json::array();
  for (const auto& b : s.hierarchy) hier.push_back({{"brand", b.name}, {"models", b.models}});
  return json{{"in_channels", s.in_channels},
              {"input_size", s.input_size},
              {"feature_blocks", blocks},
              {"branch_block",
               {{"out_channels", s.branch_block.out_channels}, {"kernel", s.branch_block.kernel},
                {"stride", s.branch_block.stride}, {"padding", s.branch_block.padding}}},
              {"hierarchy", hier},
              {"head", to_string(s.head)},
              {"flat_fc_dims", s.flat_fc_dims},
              {"loss", to_string(s.loss)},
              {"seed", s.seed},
              {"bn_momentum", s.bn_momentum},
              {"bn_eps", s.bn_eps}};
}

inline NetworkSpec network_spec_from_json(const json& j) {
  static const std::set<std::string> known{"in_channels", "input_size", "feature_blocks", "branch_block",
                                           "hierarchy",   "head",       "flat_fc_dims",   "loss",
                                           "seed",        "bn_momentum", "bn_eps"};
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw UsageError("network spec: unknown key '" + k + "'");
  try {
    NetworkSpec s;
    s.in_channels = j.value("in_channels", 3);
    s.input_size = j.value("input_size", 128);
    for (const auto& b : j.at("feature_blocks"))
      s.feature_blocks.push_back({b.at("out_channels").get<int>(), b.value("kernel", 3), b.value("stride", 1),
                                  b.value("padding", 1), b.value("pool_kernel", 2), b.value("pool_stride", 2)});
    const auto& bb = j.at("branch_block");
    s.branch_block = {bb.at("out_channels").get<int>(), bb.value("kernel", 3), bb.value("stride", 1),
                      bb.value("padding", 1)};
    for (const auto& b : j.at("hierarchy"))
      s.hierarchy.push_back({b.at("brand").get<std::string>(), b.at("models").get<std::vector<std::string>>()});
    const auto head = j.value("head", std::string("hierarchical"));
    if (head == "hierarchical") s.head = Head::Hierarchical;
    else if (head == "flat") s.head = Head::Flat;
    else throw UsageError("network spec: head must be 'hierarchical' or 'flat'");
    if (j.contains("flat_fc_dims")) s.flat_fc_dims = j.at("flat_fc_dims").get<std::array<int, 3>>();
    const auto loss = j.value("loss", std::string("bce_over_softmax"));
    if (loss == "bce_over_softmax") s.loss = LossKind::BinaryOverSoftmax;
    else if (loss == "categorical") s.loss = LossKind::Categorical;
    else throw UsageError("network spec: loss must be 'bce_over_softmax' or 'categorical'");
    s.seed = j.value("seed", std::uint64_t{1});
    s.bn_momentum = j.value("bn_momentum", 0.1);
    s.bn_eps = j.value("bn_eps", 1e-5);
    return s;
  } catch (const json::exception& e) {
    throw UsageError(std::string("network spec: ") + e.what());
  }
}

inline std::string spec_hash(const NetworkSpec& s) { return json_hash(to_json(s)); }

struct FeatureShape {
  int channels = 0, height = 0, width = 0;
  std::size_t numel() const { return static_cast<std::size_t>(channels) * height * width; }
  friend bool operator==(const FeatureShape&, const FeatureShape&) = default;
};

/// Shape of the trunk output X.
inline FeatureShape trunk_shape(const NetworkSpec& s) {
  FeatureShape f{s.in_channels, s.input_size, s.input_size};
  for (std::size_t i = 0; i < s.feature_blocks.size(); ++i) {
    const auto& b = s.feature_blocks[i];
    const auto where = "feature_blocks[" + std::to_string(i) + "]";
    if (b.out_channels < 1 || b.kernel < 1 || b.stride < 1 || b.padding < 0 || b.pool_kernel < 1 || b.pool_stride < 1)
      throw UsageError("network spec: " + where + " has a non-positive field");
    if (b.kernel > f.height + 2 * b.padding) throw UsageError("network spec: " + where + " kernel exceeds input");
    f = {b.out_channels, ag::conv_out_extent(f.height, b.kernel, b.stride, b.padding),
         ag::conv_out_extent(f.width, b.kernel, b.stride, b.padding)};
    if (b.pool_kernel > f.height) throw UsageError("network spec: " + where + " pool window exceeds feature map");
    f.height = ag::pool_out_extent(f.height, b.pool_kernel, b.pool_stride);
    f.width = ag::pool_out_extent(f.width, b.pool_kernel, b.pool_stride);
  }
  return f;
}

/// Shape of a branch output X_b given its input.
inline FeatureShape branch_shape(const NetworkSpec& s, FeatureShape in) {
  const auto& b = s.branch_block;
  if (b.out_channels < 1 || b.kernel < 1 || b.stride < 1 || b.padding < 0)
    throw UsageError("network spec: branch_block has a non-positive field");
  if (b.kernel > in.height + 2 * b.padding) throw UsageError("network spec: branch_block kernel exceeds feature map");
  return {b.out_channels, ag::conv_out_extent(in.height, b.kernel, b.stride, b.padding),
          ag::conv_out_extent(in.width, b.kernel, b.stride, b.padding)};
}

inline void validate(const NetworkSpec& s) {
  if (s.in_channels < 1) throw UsageError("network spec: in_channels must be positive");
  if (s.input_size < 1) throw UsageError("network spec: input_size must be positive");
  if (s.feature_blocks.size() != 4) throw UsageError("network spec: feature_blocks must hold exactly 4 blocks");
  const auto x = trunk_shape(s);
  if (s.hierarchy.empty()) throw UsageError("network spec: hierarchy is empty");
  std::set<std::string> brands;
  for (const auto& b : s.hierarchy) {
    if (b.name.empty() || !brands.insert(b.name).second) throw UsageError("network spec: duplicate or empty brand name");
    if (b.models.empty()) throw UsageError("network spec: brand " + b.name + " has no models");
    std::set<std::string> models(b.models.begin(), b.models.end());
    if (models.size() != b.models.size()) throw UsageError("network spec: duplicate model in brand " + b.name);
  }
  if (s.head == Head::Hierarchical) {
    const auto xb = branch_shape(s, x);
    (void)branch_shape(s, xb);
  } else {
    for (int d : s.flat_fc_dims)
      if (d < 1) throw UsageError("network spec: flat_fc_dims must be positive");
    if (static_cast<std::size_t>(s.flat_fc_dims[2]) != s.n_models())
      throw UsageError("network spec: flat_fc_dims[2] must equal the number of camera models (" +
                       std::to_string(s.n_models()) + ")");
  }
}

template <class T>
struct CBR {
  Parameter<T> weight, bias, gamma, beta;
  ag::BatchNormState<T> bn;
  int stride = 1, padding = 0;
  int pool_kernel = 0, pool_stride = 0;  // 0: no pooling
};

/// CBR followed by a single-logit affine layer.
template <class T>
struct Unit {
  CBR<T> cbr;
  Parameter<T> fc_weight, fc_bias;
};

template <class T>
struct BrandBranch {
  std::string name;
  std::vector<std::string> models;
  Unit<T> unit;
  std::vector<Unit<T>> model_units;  // empty for single-model brands
};

template <class T>
struct HierarchicalOutput {
  Tensor<T> features;                      // X, (N, C, H, W)
  Tensor<T> brand_logits;                  // (N, K)
  Tensor<T> brand_probs;                   // (N, K)
  std::vector<Tensor<T>> brand_features;   // X_b per brand
  std::vector<Tensor<T>> model_logits;     // (N, N_b) per brand; undefined for single-model brands
  std::vector<Tensor<T>> model_probs;
};

template <class T>
struct LossParts {
  Tensor<T> total;
  T brand = T(0);
  T model = T(0);
};

template <class T>
class Network {
public:
  explicit Network(NetworkSpec spec) : spec_(std::move(spec)) {
    validate(spec_);
    FeatureShape in{spec_.in_channels, spec_.input_size, spec_.input_size};
    for (std::size_t i = 0; i < spec_.feature_blocks.size(); ++i) {
      const auto& b = spec_.feature_blocks[i];
      features_.push_back(make_cbr("features." + std::to_string(i), in.channels, b.out_channels, b.kernel, b.stride,
                                   b.padding, b.pool_kernel, b.pool_stride, spec_.seed));
      in.channels = b.out_channels;
    }
    x_shape_ = trunk_shape(spec_);
    if (spec_.head == Head::Hierarchical) {
      xb_shape_ = branch_shape(spec_, x_shape_);
      for (const auto& b : spec_.hierarchy) brands_.push_back(make_brand(b, spec_.seed));
    } else {
      int d = static_cast<int>(x_shape_.numel());
      for (int j = 0; j < 3; ++j) {
        const auto base = "flat.fc" + std::to_string(j);
        flat_.push_back(he_param(base + ".weight", {spec_.flat_fc_dims[static_cast<std::size_t>(j)], d}, d, spec_.seed));
        flat_.push_back(Parameter<T>(base + ".bias", Tensor<T>({spec_.flat_fc_dims[static_cast<std::size_t>(j)]}), true));
        d = spec_.flat_fc_dims[static_cast<std::size_t>(j)];
      }
    }
  }

  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  const NetworkSpec& spec() const { return spec_; }
  FeatureShape feature_shape() const { return x_shape_; }
  FeatureShape branch_feature_shape() const { return xb_shape_; }
  std::size_t n_brand_branches() const { return brands_.size(); }
  std::size_t n_model_branches() const {
    std::size_t n = 0;
    for (const auto& b : brands_) n += b.model_units.empty() ? 0 : 1;
    return n;
  }
  const std::vector<BrandBranch<T>>& brands() const { return brands_; }

  void set_mode(Mode m) { mode_ = m; }
  Mode mode() const { return mode_; }

  Tensor<T> trunk(const Tensor<T>& x) {
    check_input(x);
    Tensor<T> h = x;
    for (auto& cbr : features_) h = apply(cbr, h);
    return h;
  }

  HierarchicalOutput<T> forward_hierarchical(const Tensor<T>& x) {
    if (spec_.head != Head::Hierarchical) throw UsageError("forward_hierarchical called on a flat network");
    HierarchicalOutput<T> out;
    out.features = trunk(x);
    std::vector<Tensor<T>> logits;
    for (auto& b : brands_) {
      auto xb = apply(b.unit.cbr, out.features);
      logits.push_back(head_logit(b.unit, xb));
      if (b.model_units.empty()) {
        out.model_logits.emplace_back();
        out.model_probs.emplace_back();
      } else {
        std::vector<Tensor<T>> ml;
        for (auto& mu : b.model_units) ml.push_back(head_logit(mu, apply(mu.cbr, xb)));
        out.model_logits.push_back(ag::concat_cols(ml));
        out.model_probs.push_back(ag::softmax(out.model_logits.back()));
      }
      out.brand_features.push_back(std::move(xb));
    }
    out.brand_logits = ag::concat_cols(logits);
    out.brand_probs = ag::softmax(out.brand_logits);
    return out;
  }

  /// Logits over all camera models in hierarchy order.
  Tensor<T> forward_flat(const Tensor<T>& x) {
    if (spec_.head != Head::Flat) throw UsageError("forward_flat called on a hierarchical network");
    auto h = ag::flatten(trunk(x));
    for (std::size_t j = 0; j < 3; ++j) {
      h = ag::linear(h, flat_[2 * j].tensor, flat_[2 * j + 1].tensor);
      if (j < 2) h = ag::relu(h);
    }
    return h;
  }

  /// L_bc + alpha * L_mc averaged over the batch. L_mc uses only the model
  /// branch of each sample's true brand; single-model brands contribute 0.
  LossParts<T> loss_total(const HierarchicalOutput<T>& out, const std::vector<int>& brand_labels,
                          const std::vector<int>& model_labels, double alpha) const {
    const int N = out.brand_probs.dim(0);
    const int K = out.brand_probs.dim(1);
    if (brand_labels.size() != static_cast<std::size_t>(N) || model_labels.size() != static_cast<std::size_t>(N))
      throw UsageError("loss_total: label count does not match batch");
    for (int n = 0; n < N; ++n) {
      const int b = brand_labels[static_cast<std::size_t>(n)];
      if (b < 0 || b >= K) throw UsageError("loss_total: brand label out of range");
      const auto nm = static_cast<int>(brands_[static_cast<std::size_t>(b)].models.size());
      if (nm > 1 && (model_labels[static_cast<std::size_t>(n)] < 0 || model_labels[static_cast<std::size_t>(n)] >= nm))
        throw UsageError("loss_total: model label out of range for brand " + brands_[static_cast<std::size_t>(b)].name);
    }
    const std::vector<T> mean_w(static_cast<std::size_t>(N), T(1) / static_cast<T>(N));
    LossParts<T> parts;
    auto bc = class_loss(out.brand_probs, brand_labels, mean_w);
    parts.brand = bc.item();
    if (alpha == 0.0) {
      parts.total = bc;
      return parts;
    }
    std::optional<Tensor<T>> mc;
    for (std::size_t j = 0; j < brands_.size(); ++j) {
      if (brands_[j].model_units.empty()) continue;
      std::vector<T> w(static_cast<std::size_t>(N), T(0));
      std::vector<int> labels(static_cast<std::size_t>(N), 0);
      bool any = false;
      for (int n = 0; n < N; ++n)
        if (brand_labels[static_cast<std::size_t>(n)] == static_cast<int>(j)) {
          w[static_cast<std::size_t>(n)] = T(1) / static_cast<T>(N);
          labels[static_cast<std::size_t>(n)] = model_labels[static_cast<std::size_t>(n)];
          any = true;
        }
      if (!any) continue;
      auto term = class_loss(out.model_probs[j], labels, w);
      mc = mc ? ag::add(*mc, term) : term;
    }
    if (!mc) {
      parts.total = bc;
      return parts;
    }
    parts.model = mc->item();
    parts.total = ag::add(bc, ag::scale(*mc, static_cast<T>(alpha)));
    return parts;
  }

  /// Loss of the flat head; labels index models in hierarchy order.
  Tensor<T> loss_flat(const Tensor<T>& logits, const std::vector<int>& labels) const {
    const int N = logits.dim(0);
    const std::vector<T> mean_w(static_cast<std::size_t>(N), T(1) / static_cast<T>(N));
    return class_loss(ag::softmax(logits), labels, mean_w);
  }

  /// Trainable parameters in a fixed order.
  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& c : features_) push_cbr(out, c);
    for (auto& b : brands_) {
      push_unit(out, b.unit);
      for (auto& mu : b.model_units) push_unit(out, mu);
    }
    for (auto& p : flat_) out.push_back(&p);
    return out;
  }

  std::vector<const Parameter<T>*> parameters() const {
    std::vector<const Parameter<T>*> out;
    for (auto* p : const_cast<Network*>(this)->parameters()) out.push_back(p);
    return out;
  }

  std::size_t count_params() const {
    std::size_t n = 0;
    for (const auto* p : parameters()) n += p->tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->tensor.zero_grad();
  }

  /// Adds a brand branch (single model unless `models` lists several).
  void add_brand(const std::string& brand, std::vector<std::string> models, std::uint64_t seed) {
    if (spec_.head != Head::Hierarchical) throw UsageError("add_branch requires a hierarchical network");
    for (const auto& b : spec_.hierarchy)
      if (b.name == brand) throw UsageError("add_branch: brand " + brand + " already present");
    if (models.empty()) models.push_back(brand);
    BrandSpec bs{brand, std::move(models)};
    auto next = spec_;
    next.hierarchy.push_back(bs);
    validate(next);
    brands_.push_back(make_brand(bs, seed));
    spec_ = std::move(next);
  }

  /// Adds a model to an existing brand. A single-model brand gains a model
  /// branch holding units for both its old and new model.
  void add_model(const std::string& brand, const std::string& model, std::uint64_t seed) {
    if (spec_.head != Head::Hierarchical) throw UsageError("add_branch requires a hierarchical network");
    for (std::size_t j = 0; j < brands_.size(); ++j) {
      auto& b = brands_[j];
      if (b.name != brand) continue;
      for (const auto& m : b.models)
        if (m == model) throw UsageError("add_branch: model " + brand + "_" + model + " already present");
      if (b.model_units.empty()) b.model_units.push_back(make_model_unit(brand, b.models.front(), seed));
      b.model_units.push_back(make_model_unit(brand, model, seed));
      b.models.push_back(model);
      spec_.hierarchy[j].models.push_back(model);
      return;
    }
    throw UsageError("add_branch: unknown brand " + brand);
  }

  ag::Checkpoint to_checkpoint(json metadata = json::object()) const {
    ag::Checkpoint ck;
    metadata["network_spec"] = to_json(spec_);
    metadata["spec_hash"] = spec_hash(spec_);
    ck.metadata = std::move(metadata);
    auto self = const_cast<Network*>(this);
    for (const auto* p : parameters()) ck.arrays.push_back(to_array(p->name, p->tensor.shape(), p->tensor.storage()));
    self->for_each_bn([&](const std::string& name, const CBR<T>& c) {
      const std::vector<int> shape{static_cast<int>(c.bn.running_mean.size())};
      ck.arrays.push_back(to_array(name + ".bn.running_mean", shape, c.bn.running_mean));
      ck.arrays.push_back(to_array(name + ".bn.running_var", shape, c.bn.running_var));
    });
    return ck;
  }

  /// Rebuilds a network from a checkpoint's embedded spec and arrays.
  static Network from_checkpoint(const ag::Checkpoint& ck, const NetworkSpec* expected = nullptr) {
    if (!ck.metadata.contains("network_spec")) throw DataError("checkpoint has no network spec");
    auto spec = network_spec_from_json(ck.metadata.at("network_spec"));
    if (ck.metadata.value("spec_hash", std::string()) != spec_hash(spec))
      throw DataError("checkpoint spec hash does not match its embedded spec");
    if (expected && spec_hash(*expected) != spec_hash(spec))
      throw DataError("checkpoint was written for a different network spec");
    Network net(spec);
    net.load_arrays(ck);
    return net;
  }

  void load_arrays(const ag::Checkpoint& ck) {
    auto fetch = [&](const std::string& name, const ag::Shape& shape, std::vector<T>& dst) {
      const auto* a = ck.find(name);
      if (!a) throw DataError("checkpoint is missing array " + name);
      if (a->shape != shape) throw DataError("checkpoint array " + name + " has shape " + ag::shape_str(a->shape));
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(a->values[i]);
    };
    for (auto* p : parameters()) {
      fetch(p->name, p->tensor.shape(), p->tensor.storage());
      std::fill(p->momentum_buffer.begin(), p->momentum_buffer.end(), T(0));
    }
    for_each_bn([&](const std::string& name, CBR<T>& c) {
      const ag::Shape shape{static_cast<int>(c.bn.running_mean.size())};
      fetch(name + ".bn.running_mean", shape, c.bn.running_mean);
      fetch(name + ".bn.running_var", shape, c.bn.running_var);
    });
  }

private:
  static ag::NamedArray to_array(const std::string& name, const ag::Shape& shape, const std::vector<T>& v) {
    ag::NamedArray a{name, shape, {}};
    a.values.reserve(v.size());
    for (T x : v) a.values.push_back(static_cast<float>(x));
    return a;
  }

  template <class F>
  void for_each_bn(F&& f) {
    for (std::size_t i = 0; i < features_.size(); ++i) f("features." + std::to_string(i), features_[i]);
    for (auto& b : brands_) {
      f("brand." + b.name + ".cbr", b.unit.cbr);
      for (std::size_t m = 0; m < b.model_units.size(); ++m)
        f("model." + b.name + "." + b.models[m] + ".cbr", b.model_units[m].cbr);
    }
  }

  void check_input(const Tensor<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != spec_.in_channels || x.dim(2) != spec_.input_size || x.dim(3) != spec_.input_size)
      throw ShapeError("network input " + ag::shape_str(x.shape()) + " does not match spec (N," +
                       std::to_string(spec_.in_channels) + "," + std::to_string(spec_.input_size) + "," +
                       std::to_string(spec_.input_size) + ")");
  }

  Tensor<T> apply(CBR<T>& c, const Tensor<T>& x) {
    auto h = ag::conv2d(x, c.weight.tensor, c.bias.tensor, c.stride, c.padding);
    h = ag::batchnorm2d(h, c.gamma.tensor, c.beta.tensor, c.bn, mode_, spec_.bn_momentum, spec_.bn_eps);
    h = ag::relu(h);
    if (c.pool_kernel > 0) h = ag::maxpool2d(h, c.pool_kernel, c.pool_stride);
    return h;
  }

  Tensor<T> head_logit(Unit<T>& u, const Tensor<T>& xb) {
    return ag::linear(ag::flatten(xb), u.fc_weight.tensor, u.fc_bias.tensor);
  }

  Tensor<T> class_loss(const Tensor<T>& probs, const std::vector<int>& labels, const std::vector<T>& w) const {
    return spec_.loss == LossKind::Categorical ? ag::ce_over_softmax(probs, labels, w)
                                               : ag::bce_over_softmax(probs, labels, w);
  }

  static Parameter<T> he_param(const std::string& name, ag::Shape shape, int fan_in, std::uint64_t seed) {
    Rng rng(mix_seed(seed, name));
    const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
    std::vector<T> v(ag::numel_of(shape));
    for (auto& x : v) x = static_cast<T>(sd * rng.normal());
    return Parameter<T>(name, Tensor<T>::from(std::move(shape), std::move(v)), false);
  }

  static CBR<T> make_cbr(const std::string& base, int in_c, int out_c, int k, int stride, int pad, int pool_k,
                         int pool_s, std::uint64_t seed) {
    CBR<T> c;
    c.weight = he_param(base + ".conv.weight", {out_c, in_c, k, k}, in_c * k * k, seed);
    c.bias = Parameter<T>(base + ".conv.bias", Tensor<T>({out_c}), true);
    c.gamma = Parameter<T>(base + ".bn.weight", Tensor<T>({out_c}, T(1)), true);
    c.beta = Parameter<T>(base + ".bn.bias", Tensor<T>({out_c}), true);
    c.bn = ag::BatchNormState<T>(out_c);
    c.stride = stride;
    c.padding = pad;
    c.pool_kernel = pool_k;
    c.pool_stride = pool_s;
    return c;
  }

  Unit<T> make_unit(const std::string& base, FeatureShape in, FeatureShape out, std::uint64_t seed) const {
    const auto& bb = spec_.branch_block;
    Unit<T> u;
    u.cbr = make_cbr(base + ".cbr", in.channels, bb.out_channels, bb.kernel, bb.stride, bb.padding, 0, 0, seed);
    const int d = static_cast<int>(out.numel());
    u.fc_weight = he_param(base + ".fc.weight", {1, d}, d, seed);
    u.fc_bias = Parameter<T>(base + ".fc.bias", Tensor<T>({1}), true);
    return u;
  }

  Unit<T> make_model_unit(const std::string& brand, const std::string& model, std::uint64_t seed) const {
    return make_unit("model." + brand + "." + model, xb_shape_, branch_shape(spec_, xb_shape_), seed);
  }

  BrandBranch<T> make_brand(const BrandSpec& bs, std::uint64_t seed) const {
    BrandBranch<T> b;
    b.name = bs.name;
    b.models = bs.models;
    b.unit = make_unit("brand." + bs.name, x_shape_, xb_shape_, seed);
    if (bs.models.size() > 1)
      for (const auto& m : bs.models) b.model_units.push_back(make_model_unit(bs.name, m, seed));
    return b;
  }

  static void push_cbr(std::vector<Parameter<T>*>& out, CBR<T>& c) {
    out.insert(out.end(), {&c.weight, &c.bias, &c.gamma, &c.beta});
  }
  static void push_unit(std::vector<Parameter<T>*>& out, Unit<T>& u) {
    push_cbr(out, u.cbr);
    out.insert(out.end(), {&u.fc_weight, &u.fc_bias});
  }

  NetworkSpec spec_;
  FeatureShape x_shape_{}, xb_shape_{};
  std::vector<CBR<T>> features_;
  std::vector<BrandBranch<T>> brands_;
  std::vector<Parameter<T>> flat_;
  Mode mode_ = Mode::Train;
};

template <class T>
Network<T> build_network(const NetworkSpec& spec) {
  return Network<T>(spec);
}

/// Brand-or-(brand, model) extension of a hierarchical network.
template <class T>
void add_branch(Network<T>& net, const std::string& brand, const std::optional<std::string>& model,
                std::uint64_t seed) {
  const bool brand_known = [&] {
    for (const auto& b : net.spec().hierarchy)
      if (b.name == brand) return true;
    return false;
  }();
  if (!brand_known) net.add_brand(brand, model ? std::vector<std::string>{*model} : std::vector<std::string>{}, seed);
  else if (model) net.add_model(brand, *model, seed);
  else throw UsageError("add_branch: brand " + brand + " already present");
}

// ---------------------------------------------------------------------------
// Built-in specs

/// Brands and models of the 18-model Dresden configuration.
inline std::vector<BrandSpec> dresden_hierarchy() {
  return {{"Canon", {"Ixus70"}},
          {"Casio", {"EX-Z150"}},
          {"FujiFilm", {"FinePixJ50"}},
          {"Kodak", {"M1063"}},
          {"Nikon", {"CoolPixS710", "D200", "D70"}},
          {"Olympus", {"mju_1050SW"}},
          {"Panasonic", {"DMC-FZ50"}},
          {"Pentax", {"OptioA40"}},
          {"Praktica", {"DCZ5.9"}},
          {"Ricoh", {"GX100"}},
          {"Rollei", {"RCP-7325XS"}},
          {"Samsung", {"L74wide", "NV15"}},
          {"Sony", {"DSC-H50", "DSC-T77", "DSC-W170"}}};
}

/// Full-size default: 3->32->64->128->128 channels, kernels 7,5,5,3, 2x2
/// pooling, 128->32 branch convs. The layer widths are a configuration
/// choice, not a published architecture.
inline NetworkSpec paper_default_spec(std::vector<BrandSpec> hierarchy = dresden_hierarchy(),
                                      Head head = Head::Hierarchical) {
  NetworkSpec s;
  s.feature_blocks = {{32, 7, 1, 3, 2, 2}, {64, 5, 1, 2, 2, 2}, {128, 5, 1, 2, 2, 2}, {128, 3, 1, 1, 2, 2}};
  s.branch_block = {32, 3, 1, 1};
  s.hierarchy = std::move(hierarchy);
  s.head = head;
  s.flat_fc_dims = {256, 128, static_cast<int>(s.n_models())};
  return s;
}

/// Desk-scale network for 128x128 patches (well under 150k parameters).
inline NetworkSpec toy_spec(std::vector<BrandSpec> hierarchy, Head head = Head::Hierarchical) {
  NetworkSpec s;
  s.feature_blocks = {{8, 3, 2, 1, 2, 2}, {16, 3, 1, 1, 2, 2}, {16, 3, 1, 1, 2, 2}, {16, 3, 1, 1, 2, 2}};
  s.branch_block = {16, 3, 1, 1};
  s.hierarchy = std::move(hierarchy);
  s.head = head;
  s.flat_fc_dims = {64, 32, static_cast<int>(s.n_models())};
  return s;
}

}  // namespace hcbcam
