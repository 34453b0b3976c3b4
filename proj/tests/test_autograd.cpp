#include <cmath>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "hcbcam/autograd/checkpoint.hpp"
#include "hcbcam/autograd/ops.hpp"
#include "hcbcam/autograd/optim.hpp"
#include "support/gradcheck.hpp"

using namespace hcbcam;
using namespace hcbcam::ag;
using hcbcam::testing::grad_check;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool grad = true) {
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>::from(std::move(shape), std::move(v), grad);
}

// Direct loop nest over (n, f, oh, ow, c, i, j); independent of im2col.
std::vector<double> conv_reference(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b, int s,
                                   int p) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), F = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int Ho = (H + 2 * p - kh) / s + 1, Wo = (W + 2 * p - kw) / s + 1;
  std::vector<double> out(static_cast<std::size_t>(N) * F * Ho * Wo);
  auto X = [&](int n, int c, int h, int ww) -> double {
    if (h < 0 || h >= H || ww < 0 || ww >= W) return 0.0;
    return x.values()[((static_cast<std::size_t>(n) * C + c) * H + h) * W + ww];
  };
  for (int n = 0; n < N; ++n)
    for (int f = 0; f < F; ++f)
      for (int oh = 0; oh < Ho; ++oh)
        for (int ow = 0; ow < Wo; ++ow) {
          double acc = b.values()[f];
          for (int c = 0; c < C; ++c)
            for (int i = 0; i < kh; ++i)
              for (int j = 0; j < kw; ++j)
                acc += w.values()[((static_cast<std::size_t>(f) * C + c) * kh + i) * kw + j] *
                       X(n, c, oh * s - p + i, ow * s - p + j);
          out[((static_cast<std::size_t>(n) * F + f) * Ho + oh) * Wo + ow] = acc;
        }
  return out;
}

// Weighted sum of outputs so every output element carries a distinct gradient.
Tensor<double> probe(const Tensor<double>& y, const Tensor<double>& weights) { return sum(mul(y, weights)); }

}  // namespace

TEST(Conv2d, IdentityKernel) {
  auto x = Tensor<double>::from({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto w = Tensor<double>::from({1, 1, 1, 1}, {1});
  auto b = Tensor<double>({1});
  auto y = conv2d(x, w, b, 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(y.values()[i], x.values()[i]);
}

TEST(Conv2d, OnesKernelOnConstantInput) {
  auto x = Tensor<double>({1, 1, 5, 5}, 7.0);
  auto w = Tensor<double>({1, 1, 3, 3}, 1.0);
  auto b = Tensor<double>({1});
  auto y = conv2d(x, w, b, 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  for (double v : y.values()) EXPECT_EQ(v, 63.0);
}

TEST(Conv2d, MatchesLoopNestAndFiniteDifferences) {
  Rng rng(11);
  auto x = random_tensor({2, 3, 8, 8}, rng);
  auto w = random_tensor({4, 3, 3, 3}, rng);
  auto b = random_tensor({4}, rng);
  for (auto [s, p] : {std::pair{1, 0}, std::pair{1, 1}, std::pair{2, 1}, std::pair{2, 2}}) {
    auto y = conv2d(x, w, b, s, p);
    const auto ref = conv_reference(x, w, b, s, p);
    ASSERT_EQ(y.numel(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.values()[i], ref[i], 1e-12);
    auto pw = random_tensor(y.shape(), rng, -1, 1, false);
    auto r = grad_check([&] { return probe(conv2d(x, w, b, s, p), pw); }, {{"x", x}, {"w", w}, {"b", b}});
    EXPECT_LT(r.max_rel_error, 1e-4) << "stride " << s << " pad " << p << " worst " << r.worst;
  }
}

TEST(Conv2d, ShapeFormulaAndErrors) {
  Rng rng(3);
  for (int H : {5, 8, 13})
    for (int k : {1, 3, 5})
      for (int s : {1, 2, 3})
        for (int p : {0, 1, 2}) {
          if (k > H + 2 * p) continue;
          auto x = random_tensor({1, 2, H, H + 1}, rng, -1, 1, false);
          auto w = random_tensor({3, 2, k, k}, rng, -1, 1, false);
          auto y = conv2d(x, w, Tensor<double>({3}), s, p);
          EXPECT_EQ(y.dim(2), (H + 2 * p - k) / s + 1);
          EXPECT_EQ(y.dim(3), (H + 1 + 2 * p - k) / s + 1);
        }
  auto x = Tensor<double>({1, 2, 4, 4});
  EXPECT_THROW(conv2d(x, Tensor<double>({1, 3, 3, 3}), Tensor<double>({1})), ShapeError);
  EXPECT_THROW(conv2d(x, Tensor<double>({1, 2, 7, 7}), Tensor<double>({1})), ShapeError);
  EXPECT_THROW(conv2d(x, Tensor<double>({1, 2, 3, 3}), Tensor<double>({2})), ShapeError);
}

TEST(BatchNorm, TrainModeNormalizes) {
  Rng rng(5);
  auto x = random_tensor({4, 3, 5, 5}, rng, -3, 7, false);
  auto g = Tensor<double>({3}, 1.0), b = Tensor<double>({3});
  BatchNormState<double> st(3);
  auto y = batchnorm2d(x, g, b, st, Mode::Train);
  for (int c = 0; c < 3; ++c) {
    double s = 0, ss = 0;
    int m = 0;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 25; ++i) {
        const double v = y.values()[(static_cast<std::size_t>(n) * 3 + c) * 25 + i];
        s += v;
        ss += v * v;
        ++m;
      }
    EXPECT_NEAR(s / m, 0.0, 1e-12);
    EXPECT_NEAR(ss / m, 1.0, 1e-4);
  }
  EXPECT_NE(st.running_mean[0], 0.0);
}

TEST(BatchNorm, EvalModeWithUnitRunningStats) {
  Rng rng(6);
  auto x = random_tensor({2, 2, 3, 3}, rng, -1, 1, false);
  auto g = Tensor<double>::from({2}, {2.0, -0.5}), b = Tensor<double>::from({2}, {0.25, 1.0});
  BatchNormState<double> st(2);
  const double eps = 1e-5;
  auto y = batchnorm2d(x, g, b, st, Mode::Eval, 0.1, eps);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 2; ++c)
      for (int i = 0; i < 9; ++i) {
        const std::size_t idx = (static_cast<std::size_t>(n) * 2 + c) * 9 + i;
        EXPECT_NEAR(y.values()[idx], g.values()[c] * x.values()[idx] / std::sqrt(1 + eps) + b.values()[c], 1e-12);
      }
}

TEST(BatchNorm, GradientsMatchFiniteDifferences) {
  Rng rng(7);
  auto x = random_tensor({3, 2, 4, 4}, rng);
  auto g = random_tensor({2}, rng, 0.5, 1.5);
  auto b = random_tensor({2}, rng);
  auto pw = random_tensor({3, 2, 4, 4}, rng, -1, 1, false);
  for (Mode mode : {Mode::Train, Mode::Eval}) {
    BatchNormState<double> st(2);
    st.running_mean = {0.1, -0.2};
    st.running_var = {0.8, 1.3};
    auto r = grad_check([&] { return probe(batchnorm2d(x, g, b, st, mode), pw); }, {{"x", x}, {"gamma", g}, {"beta", b}});
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
  }
}

TEST(BatchNorm, RejectsSingleSampleTrainBatch) {
  BatchNormState<double> st(1);
  EXPECT_THROW(batchnorm2d(Tensor<double>({1, 1, 4, 4}), Tensor<double>({1}, 1.0), Tensor<double>({1}), st, Mode::Train),
               ShapeError);
}

TEST(Relu, Elementwise) {
  auto x = Tensor<double>::from({3}, {-1, 0, 2}, true);
  auto y = relu(x);
  EXPECT_EQ(y.storage(), (std::vector<double>{0, 0, 2}));
  backward(sum(y));
  EXPECT_EQ(x.grad_storage(), (std::vector<double>{0, 0, 1}));
}

TEST(MaxPool, RoutesGradientToArgmax) {
  auto x = Tensor<double>::from({1, 1, 2, 2}, {1, 2, 3, 4}, true);
  auto y = maxpool2d(x, 2, 2);
  ASSERT_EQ(y.numel(), 1u);
  EXPECT_EQ(y.item(), 4.0);
  backward(sum(y));
  EXPECT_EQ(x.grad_storage(), (std::vector<double>{0, 0, 0, 1}));
}

TEST(MaxPool, TiesGoToFirstOccurrence) {
  auto x = Tensor<double>::from({1, 1, 2, 2}, {5, 5, 5, 5}, true);
  backward(sum(maxpool2d(x, 2, 2)));
  EXPECT_EQ(x.grad_storage(), (std::vector<double>{1, 0, 0, 0}));
}

TEST(MaxPool, GradientsAndShapes) {
  Rng rng(8);
  auto x = random_tensor({2, 2, 7, 6}, rng);
  for (auto [k, s] : {std::pair{2, 2}, std::pair{3, 1}, std::pair{3, 2}}) {
    auto y = maxpool2d(x, k, s);
    EXPECT_EQ(y.dim(2), (7 - k) / s + 1);
    EXPECT_EQ(y.dim(3), (6 - k) / s + 1);
    auto pw = random_tensor(y.shape(), rng, -1, 1, false);
    auto r = grad_check([&] { return probe(maxpool2d(x, k, s), pw); }, {{"x", x}});
    EXPECT_LT(r.max_rel_error, 1e-4);
  }
  EXPECT_THROW(maxpool2d(x, 8, 1), ShapeError);
}

TEST(Linear, GradientsMatchFiniteDifferences) {
  Rng rng(9);
  auto a = random_tensor({3, 5}, rng);
  auto w = random_tensor({4, 5}, rng);
  auto b = random_tensor({4}, rng);
  auto pw = random_tensor({3, 4}, rng, -1, 1, false);
  auto r = grad_check([&] { return probe(linear(a, w, b), pw); }, {{"a", a}, {"w", w}, {"b", b}});
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
  EXPECT_THROW(linear(a, Tensor<double>({4, 6}), b), ShapeError);
}

TEST(Flatten, IsBijectiveReshape) {
  Rng rng(10);
  auto x = random_tensor({2, 3, 2, 2}, rng);
  auto y = flatten(x);
  EXPECT_EQ(y.shape(), (Shape{2, 12}));
  EXPECT_EQ(y.storage(), x.storage());
}

TEST(Softmax, UniformAndStable) {
  auto p = softmax(Tensor<double>::from({4}, {3, 3, 3, 3}));
  for (double v : p.values()) EXPECT_DOUBLE_EQ(v, 0.25);
  auto q = softmax(Tensor<double>::from({2}, {1000, 0}));
  EXPECT_NEAR(q.values()[0], 1.0, 1e-12);
  EXPECT_GE(q.values()[1], 0.0);
  EXPECT_LT(q.values()[1], 1e-300);
}

TEST(Softmax, MatchesExtendedPrecisionAndShiftInvariance) {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const int K = 1 + static_cast<int>(rng.below(10));
    auto z = random_tensor({K}, rng, -20, 20, false);
    auto p = softmax(z);
    long double denom = 0;
    for (double v : z.values()) denom += std::exp(static_cast<long double>(v));
    double total = 0;
    for (int i = 0; i < K; ++i) {
      EXPECT_NEAR(p.values()[i], static_cast<double>(std::exp(static_cast<long double>(z.values()[i])) / denom), 1e-12);
      EXPECT_GT(p.values()[i], 0.0);
      total += p.values()[i];
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
    auto shifted = z.clone();
    const double c = rng.uniform(-50, 50);
    for (auto& v : shifted.storage()) v += c;
    auto ps = softmax(shifted);
    for (int i = 0; i < K; ++i) EXPECT_NEAR(ps.values()[i], p.values()[i], 1e-6);
    EXPECT_EQ(std::max_element(ps.values().begin(), ps.values().end()) - ps.values().begin(),
              std::max_element(p.values().begin(), p.values().end()) - p.values().begin());
  }
}

TEST(Softmax, GradientsMatchFiniteDifferences) {
  Rng rng(13);
  auto z = random_tensor({3, 5}, rng, -2, 2);
  auto pw = random_tensor({3, 5}, rng, -1, 1, false);
  auto r = grad_check([&] { return probe(softmax(z), pw); }, {{"z", z}});
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(BceOverSoftmax, HandValues) {
  auto p = Tensor<double>::from({2}, {0.5, 0.5});
  EXPECT_NEAR(bce_over_softmax(p, std::vector<double>{1, 0}).item(), 0.693147, 1e-6);
  auto exact = Tensor<double>::from({3}, {0, 1, 0});
  EXPECT_LT(bce_over_softmax(exact, std::vector<double>{0, 1, 0}).item(), 1e-6);
  EXPECT_THROW(bce_over_softmax(p, std::vector<double>{1, 1}), ShapeError);
  EXPECT_THROW(bce_over_softmax(p, std::vector<double>{0.5, 0.5}), ShapeError);
  EXPECT_THROW(bce_over_softmax(p, std::vector<double>{0, 0}), ShapeError);
}

TEST(BceOverSoftmax, GradientThroughSoftmax) {
  Rng rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    const int K = 2 + static_cast<int>(rng.below(6));
    auto z = random_tensor({2, K}, rng, -3, 3);
    std::vector<int> labels{static_cast<int>(rng.below(static_cast<std::uint64_t>(K))),
                            static_cast<int>(rng.below(static_cast<std::uint64_t>(K)))};
    std::vector<double> w{0.5, 0.5};
    auto r = grad_check([&] { return bce_over_softmax(softmax(z), labels, w); }, {{"z", z}});
    EXPECT_LT(r.max_rel_error, 1e-4);
    auto r2 = grad_check([&] { return ce_over_softmax(softmax(z), labels, w); }, {{"z", z}});
    EXPECT_LT(r2.max_rel_error, 1e-4);
  }
}

TEST(Backward, IdentityAndSharedUse) {
  auto x = Tensor<double>::from({}, {3.0}, true);
  backward(scale(x, 1.0));
  EXPECT_EQ(x.grad_storage()[0], 1.0);

  auto a = Tensor<double>::from({2}, {2.0, -1.0}, true);
  auto shared = Tensor<double>::from({2}, {0.5, 4.0}, true);
  auto z = sum(add(mul(a, shared), mul(a, shared)));
  backward(z);
  EXPECT_EQ(shared.grad_storage(), (std::vector<double>{4.0, -2.0}));
  EXPECT_EQ(a.grad_storage(), (std::vector<double>{1.0, 8.0}));
}

TEST(Backward, VisitsEachNodeOnce) {
  auto a = Tensor<double>::from({2}, {1, 2}, true);
  auto b = mul(a, a);
  auto c = add(b, b);
  auto order = topological_order(sum(c));
  std::set<const void*> seen(order.begin(), order.end());
  EXPECT_EQ(seen.size(), order.size());
  EXPECT_EQ(order.size(), 4u);
}

TEST(Backward, RejectsNonScalarAndCycles) {
  auto a = Tensor<double>::from({2}, {1, 2}, true);
  EXPECT_THROW(backward(scale(a, 2.0)), ShapeError);
  auto b = scale(a, 2.0);
  auto c = scale(b, 2.0);
  b.impl()->creator->inputs.push_back(c.impl());  // forge a cycle
  EXPECT_THROW(backward(sum(c)), NumericError);
  b.impl()->creator->inputs.pop_back();
}

TEST(Tensor, NonFiniteValuesTrip) {
  auto a = Tensor<double>::from({1}, {std::numeric_limits<double>::infinity()});
  EXPECT_THROW(scale(a, 1.0), NumericError);
}

TEST(Sgd, ZeroGradientNoDecayLeavesParameters) {
  Parameter<double> p("w", Tensor<double>::from({2}, {1.5, -2.0}));
  p.tensor.grad_storage() = {0.0, 0.0};
  sgd_step<double>({&p}, {0.1, 0.9, 0.0, true});
  EXPECT_EQ(p.tensor.storage(), (std::vector<double>{1.5, -2.0}));
}

TEST(Sgd, PlainStep) {
  Parameter<double> p("w", Tensor<double>::from({1}, {1.0}));
  p.tensor.grad_storage() = {1.0};
  sgd_step<double>({&p}, {0.1, 0.0, 0.0, true});
  EXPECT_DOUBLE_EQ(p.tensor.storage()[0], 0.9);
}

TEST(Sgd, ThreeStepMomentumDecayTrace) {
  // Hand-rolled recurrence with a constant gradient of 0.3.
  const double lr = 0.1, mom = 0.9, wd = 0.005, grad = 0.3;
  double w = 1.0, buf = 0.0;
  Parameter<double> p("w", Tensor<double>::from({1}, {1.0}));
  for (int step = 0; step < 3; ++step) {
    const double g = grad + wd * w;
    buf = mom * buf + g;
    w -= lr * buf;
    p.tensor.grad_storage() = {grad};
    sgd_step<double>({&p}, {lr, mom, wd, true});
    EXPECT_DOUBLE_EQ(p.tensor.storage()[0], w) << "step " << step;
  }
  EXPECT_NEAR(w, 0.828968192375, 1e-12);
}

TEST(Sgd, BiasAndNormExclusion) {
  Parameter<double> p("bn", Tensor<double>::from({1}, {2.0}), true);
  sgd_step<double>({&p}, {0.1, 0.0, 0.5, false});
  EXPECT_EQ(p.tensor.storage()[0], 2.0);
  sgd_step<double>({&p}, {0.1, 0.0, 0.5, true});
  EXPECT_DOUBLE_EQ(p.tensor.storage()[0], 2.0 - 0.1 * 0.5 * 2.0);
}

TEST(LrSchedule, ExponentialDecay) {
  EXPECT_DOUBLE_EQ(lr_schedule(0), 0.1);
  EXPECT_NEAR(lr_schedule(1), 0.09, 1e-15);
  const long double oracle = 0.1L * std::pow(0.9L, 39);
  EXPECT_NEAR(lr_schedule(39), static_cast<double>(oracle), 1e-15);
  EXPECT_THROW(lr_schedule(-1), UsageError);
}

TEST(Checkpoint, RoundTripAndCorruption) {
  Checkpoint ck;
  ck.metadata = {{"epoch", 3}, {"lr", 0.05}};
  ck.arrays.push_back({"a.weight", {2, 3}, {1, 2, 3, 4, 5, 6}});
  ck.arrays.push_back({"a.bias", {2}, {-0.5f, 0.25f}});
  std::stringstream ss;
  write_checkpoint(ss, ck);
  const std::string bytes = ss.str();
  std::stringstream in(bytes);
  auto back = read_checkpoint(in);
  EXPECT_EQ(back.metadata, ck.metadata);
  EXPECT_EQ(back.arrays, ck.arrays);
  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_checkpoint(truncated), DataError);
  std::stringstream bad("XXXX");
  EXPECT_THROW(read_checkpoint(bad), DataError);
}
