#include <cmath>
#include <fstream>
#include <iterator>

#include <gtest/gtest.h>

#include "hcbcam/patchex.hpp"
#include "hcbcam/synth.hpp"
#include "support/fixtures.hpp"

using namespace hcbcam;
using hcbcam::testing::TempDir;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

SynthSpec tiny_spec() {
  SynthSpec s;
  s.brands = {{"Acme", 1}, {"Borealis", 2}};
  s.devices_per_model = 2;
  s.images_per_device = 2;
  s.height = 160;
  s.width = 192;
  return s;
}

// Folded residual score of a whole image against one signature.
double signature_score(const Image8& img, const std::vector<double>& sig) {
  const auto patches = tile_image(to_unit_image(img));
  double total = 0;
  for (auto p : patches) {
    subtract_channel_means(p.values, p.size);
    constexpr int P = kSignaturePeriod;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < p.size; ++y)
        for (int x = 0; x < p.size; ++x)
          total += p.values[(static_cast<std::size_t>(c) * p.size + y) * p.size + x] * sig[(c * P + y % P) * P + x % P];
  }
  return total / static_cast<double>(patches.size());
}

// Welch statistic of two samples.
double welch_t(const std::vector<double>& a, const std::vector<double>& b) {
  auto moments = [](const std::vector<double>& v) {
    double m = 0, s = 0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    for (double x : v) s += (x - m) * (x - m);
    return std::pair{m, s / static_cast<double>(v.size() - 1)};
  };
  const auto [ma, va] = moments(a);
  const auto [mb, vb] = moments(b);
  return (ma - mb) / std::sqrt(va / static_cast<double>(a.size()) + vb / static_cast<double>(b.size()));
}

}  // namespace

TEST(Spec, DefaultsAndValidation) {
  const SynthSpec s;
  ASSERT_EQ(s.brands.size(), 4u);
  EXPECT_EQ(s.brands[0].n_models + s.brands[1].n_models + s.brands[2].n_models + s.brands[3].n_models, 7);
  EXPECT_EQ(s.devices_per_model, 2);
  EXPECT_EQ(s.images_per_device, 40);
  EXPECT_EQ(s.height, 256);
  auto bad = s;
  bad.brands[1].n_models = 0;
  EXPECT_THROW(validate(bad), UsageError);
  bad = s;
  bad.brands[1].name = "Acme";
  EXPECT_THROW(validate(bad), UsageError);
  bad = s;
  bad.brands[0].name = "has_underscore";
  EXPECT_THROW(validate(bad), UsageError);
  bad = s;
  bad.width = 100;
  EXPECT_THROW(validate(bad), UsageError);
}

TEST(Spec, JsonRoundTripRejectsUnknownKeys) {
  const auto s = tiny_spec();
  EXPECT_EQ(synth_spec_from_json(to_json(s)), s);
  auto j = to_json(s);
  j["gamma"] = 2.2;
  EXPECT_THROW(synth_spec_from_json(j), UsageError);
  EXPECT_EQ(synth_spec_from_json(json::object()), SynthSpec{});
}

TEST(Generate, CountsFilesAndRecords) {
  TempDir dir("synth");
  SynthSpec s;
  s.brands = {{"Alpha", 1}, {"Beta", 1}};
  s.devices_per_model = 1;
  s.images_per_device = 3;
  s.height = s.width = 128;
  const auto m = generate(s, dir.path());
  EXPECT_EQ(m.size(), 6u);
  std::size_t files = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir.path())) files += e.path().extension() == ".png";
  EXPECT_EQ(files, 6u);
  for (const auto& r : m.records()) {
    EXPECT_TRUE(std::filesystem::exists(r.path));
    EXPECT_EQ(read_image(r.path).width(), 128);
  }
}

TEST(Generate, NamesFollowDatasetPattern) {
  TempDir dir("synth");
  const auto m = generate(tiny_spec(), dir.path());
  const auto ingested = ingest_dataset(dir.path()).manifest;
  ASSERT_EQ(ingested.size(), m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    EXPECT_EQ(ingested.records()[i].brand, m.records()[i].brand);
    EXPECT_EQ(ingested.records()[i].model, m.records()[i].model);
    EXPECT_EQ(ingested.records()[i].device, m.records()[i].device);
  }
}

TEST(Generate, ByteIdenticalAcrossRunsAndThreadCounts) {
  TempDir a("synth"), b("synth");
  const auto ma = generate(tiny_spec(), a.path(), 1);
  const auto mb = generate(tiny_spec(), b.path(), 4);
  ASSERT_EQ(ma.size(), mb.size());
  for (std::size_t i = 0; i < ma.size(); ++i) {
    const auto name = std::filesystem::path(ma.records()[i].path).filename();
    EXPECT_EQ(slurp(a.path() / name), slurp(b.path() / name)) << name;
  }
  auto other = tiny_spec();
  other.seed = 8;
  EXPECT_NE(to_image8(to_unit_image(render_synthetic(other, "Acme_M1", 0, 1))).data(),
            render_synthetic(tiny_spec(), "Acme_M1", 0, 1).data());
}

TEST(Generate, UnwritableDestination) {
  TempDir dir("synth");
  hcbcam::testing::write_bytes(dir / "blocker", "x");
  EXPECT_THROW(generate(tiny_spec(), dir / "blocker" / "sub"), DataError);
}

TEST(Signatures, DistinctPerModelAndNormalized) {
  const SynthSpec s;
  std::vector<std::vector<double>> sigs;
  for (const auto& b : s.brands)
    for (int m = 0; m < b.n_models; ++m) sigs.push_back(model_signature(s.seed, b.name + "_" + SynthSpec::model_name(m)));
  ASSERT_EQ(sigs.size(), 7u);
  for (std::size_t i = 0; i < sigs.size(); ++i) {
    double ss = 0;
    for (double v : sigs[i]) ss += v * v;
    EXPECT_NEAR(ss / 192.0, 1.0, 1e-9);
    for (std::size_t j = i + 1; j < sigs.size(); ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < 192; ++k) dot += sigs[i][k] * sigs[j][k];
      EXPECT_LT(std::fabs(dot / 192.0), 0.3) << i << "," << j;
    }
  }
}

TEST(Signatures, CorrelationOracleSeparatesDefaultModels) {
  const SynthSpec s;
  std::vector<std::string> names;
  std::vector<std::vector<double>> sigs;
  for (const auto& b : s.brands)
    for (int m = 0; m < b.n_models; ++m) {
      names.push_back(b.name + "_" + SynthSpec::model_name(m));
      sigs.push_back(model_signature(s.seed, names.back()));
    }
  std::size_t correct = 0, total = 0, min_homogeneous = 1000, n_tiles = 0;
  std::uint64_t index = 0;
  for (std::size_t k = 0; k < names.size(); ++k)
    for (int d = 0; d < 2; ++d)
      for (int i = 0; i < 2; ++i, ++index) {
        const auto img = to_unit_image(render_synthetic(s, names[k], d, mix_seed(s.seed, 1000 + index)));
        std::size_t homogeneous = 0;
        for (auto p : tile_image(img)) {
          homogeneous += p.cls == Homogeneity::Homogeneous;
          subtract_channel_means(p.values, p.size);
          correct += correlate_signature(p.values, p.size, sigs) == k;
          ++total;
        }
        n_tiles = tile_count(img.height(), img.width());
        min_homogeneous = std::min(min_homogeneous, homogeneous);
      }
  EXPECT_GE(static_cast<double>(correct) / static_cast<double>(total), 0.99);
  // homogeneity supply: at least half the tiles of every image
  EXPECT_GE(2 * min_homogeneous, n_tiles);
}

TEST(Signatures, ZeroStrengthModelsIndistinguishable) {
  auto s = tiny_spec();
  s.height = s.width = 128;
  s.signature_strength = 0.0;
  const auto probe = model_signature(s.seed, "Acme_M1");
  std::vector<double> a, b;
  for (int i = 0; i < 50; ++i) {
    a.push_back(signature_score(render_synthetic(s, "Acme_M1", 0, mix_seed(3, i)), probe));
    b.push_back(signature_score(render_synthetic(s, "Borealis_M1", 0, mix_seed(4, i)), probe));
  }
  // two-sided p = 0.01 at ~98 degrees of freedom
  EXPECT_LT(std::fabs(welch_t(a, b)), 2.63);

  // control: the same statistic separates the models once the signature is on
  s.signature_strength = 0.008;
  a.clear();
  b.clear();
  for (int i = 0; i < 50; ++i) {
    a.push_back(signature_score(render_synthetic(s, "Acme_M1", 0, mix_seed(3, i)), probe));
    b.push_back(signature_score(render_synthetic(s, "Borealis_M1", 0, mix_seed(4, i)), probe));
  }
  EXPECT_GT(std::fabs(welch_t(a, b)), 2.63);
}

TEST(Folds, SyntheticManifestSatisfiesFoldInvariants) {
  TempDir dir("synth");
  const auto m = generate(tiny_spec(), dir.path());
  const auto plan = make_folds(m, 2, 0.15, 5);
  ASSERT_EQ(plan.folds.size(), 2u);
  for (const auto& f : plan.folds) {
    EXPECT_EQ(f.held_out.size(), 3u);
    std::size_t test = 0, train = 0, val = 0;
    for (const auto& r : m.records()) {
      switch (split_of(f, r)) {
        case Split::Test: ++test; break;
        case Split::Train: ++train; break;
        case Split::Validation: ++val; break;
      }
      if (split_of(f, r) != Split::Test) {
        EXPECT_NE(f.held_out.at(r.model_name()), r.device);
      }
    }
    EXPECT_EQ(test, 6u);
    EXPECT_EQ(train + val, 6u);
  }
  EXPECT_NE(plan.folds[0].held_out, plan.folds[1].held_out);
}
