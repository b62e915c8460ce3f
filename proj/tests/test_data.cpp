#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <set>

#include "test_util.hpp"

using namespace deacl;

namespace {

void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream os(p, std::ios::binary);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Image asymmetric_image() {
  Image im{1, 4, 4, std::vector<Real>(16, 0)};
  im.at(0, 1, 0) = 1;
  im.at(0, 2, 1) = 0.5;
  return im;
}

}  // namespace

TEST(Cifar, AllOnesRecord) {
  const auto dir = testutil::scratch_dir("cifar_ones");
  std::vector<unsigned char> rec(3073, 255);
  rec[0] = 7;
  write_bytes(dir / "b.bin", rec);
  const Dataset ds = load_cifar_binary(dir / "b.bin");
  ASSERT_EQ(ds.size(), 1u);
  EXPECT_EQ(ds.label(0), 7);
  for (Real v : ds.image(0)) EXPECT_EQ(v, 1.0f);
}

TEST(Cifar, EmptyFileIsEmptyDataset) {
  const auto dir = testutil::scratch_dir("cifar_empty");
  write_bytes(dir / "e.bin", {});
  EXPECT_TRUE(load_cifar_binary(dir / "e.bin").empty());
}

TEST(Cifar, MalformedInputs) {
  const auto dir = testutil::scratch_dir("cifar_bad");
  write_bytes(dir / "short.bin", std::vector<unsigned char>(3072, 0));
  EXPECT_THROW(load_cifar_binary(dir / "short.bin"), IoError);
  std::vector<unsigned char> rec(3073, 0);
  rec[0] = 10;
  write_bytes(dir / "label.bin", rec);
  EXPECT_THROW(load_cifar_binary(dir / "label.bin"), IoError);
}

TEST(Cifar, MatchesByteLevelReader) {
  const auto dir = testutil::scratch_dir("cifar_parse");
  std::mt19937_64 gen(1);
  std::vector<unsigned char> bytes(3 * 3073);
  for (auto& b : bytes) b = static_cast<unsigned char>(gen() & 0xff);
  for (int r = 0; r < 3; ++r) bytes[r * 3073] = static_cast<unsigned char>(r * 3);
  write_bytes(dir / "r.bin", bytes);
  const Dataset ds = load_cifar_binary(dir / "r.bin");
  ASSERT_EQ(ds.size(), 3u);
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_EQ(ds.label(r), bytes[r * 3073]);
    std::uint64_t expected = 0, got = 0;
    for (std::size_t i = 1; i < 3073; ++i) expected += bytes[r * 3073 + i];
    for (Real v : ds.image(r)) got += static_cast<std::uint64_t>(std::lround(v * 255));
    EXPECT_EQ(got, expected);
    // Red plane first, row-major: pixel (c=1, y=2, x=5).
    EXPECT_FLOAT_EQ(ds.image(r)[1024 + 2 * 32 + 5], bytes[r * 3073 + 1 + 1024 + 2 * 32 + 5] / 255.0f);
  }
}

TEST(Cifar, SyntheticExportRoundTrip) {
  SyntheticSpec spec;
  spec.n_per_class = 3;
  spec.channels = 3;
  const Dataset ds = gen_synthetic(spec);
  const auto dir = testutil::scratch_dir("cifar_export");
  write_cifar_binary(ds, dir / "s.bin");
  const Dataset back = load_cifar_binary(dir / "s.bin", 3, 16, 16, 4);
  ASSERT_EQ(back.size(), ds.size());
  EXPECT_EQ(back.labels(), ds.labels());
  for (std::size_t i = 0; i < ds.image_size(); ++i) EXPECT_NEAR(back.image(5)[i], ds.image(5)[i], 0.5 / 255 + 1e-6);
}

TEST(Synthetic, DeterministicAndBounded) {
  SyntheticSpec spec;
  spec.n_per_class = 5;
  const Dataset a = gen_synthetic(spec), b = gen_synthetic(spec);
  ASSERT_EQ(a.size(), 20u);
  for (std::size_t p = 0; p < a.size(); ++p) {
    EXPECT_TRUE(std::equal(a.image(p).begin(), a.image(p).end(), b.image(p).begin()));
    for (Real v : a.image(p)) {
      EXPECT_GE(v, 0);
      EXPECT_LE(v, 1);
    }
  }
  EXPECT_EQ(a.labels(), b.labels());
  spec.seed = 2;
  const Dataset c = gen_synthetic(spec);
  EXPECT_FALSE(std::equal(a.image(0).begin(), a.image(0).end(), c.image(0).begin()));
}

TEST(Synthetic, EmptyAndTooManyClasses) {
  SyntheticSpec spec;
  spec.n_per_class = 0;
  EXPECT_TRUE(gen_synthetic(spec).empty());
  spec.classes = 7;
  EXPECT_THROW(gen_synthetic(spec), ConfigError);
}

TEST(Synthetic, PixelMeanClassifierIsImperfect) {
  SyntheticSpec spec;
  spec.n_per_class = 64;
  const Dataset train = gen_synthetic(spec);
  spec.split = "test";
  const Dataset test = gen_synthetic(spec);
  const auto K = train.classes(), D = train.image_size();
  std::vector<std::vector<double>> centroid(K, std::vector<double>(D, 0));
  for (std::size_t p = 0; p < train.size(); ++p)
    for (std::size_t i = 0; i < D; ++i) centroid[train.label(p)][i] += train.image(p)[i] / double(spec.n_per_class);
  std::size_t hits = 0;
  for (std::size_t p = 0; p < test.size(); ++p) {
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t k = 0; k < K; ++k) {
      double d = 0;
      for (std::size_t i = 0; i < D; ++i) d += std::pow(test.image(p)[i] - centroid[k][i], 2);
      if (d < best_d) best_d = d, best = k;
    }
    hits += best == static_cast<std::size_t>(test.label(p));
  }
  const double acc = 100.0 * double(hits) / double(test.size());
  EXPECT_LT(acc, 100.0);
  EXPECT_GT(acc, 100.0 / double(K));  // above chance, so the classes do carry signal
}

TEST(Dataset, SampleIndexSurvivesSubsetAndShuffle) {
  SyntheticSpec spec;
  spec.n_per_class = 4;
  const Dataset ds = gen_synthetic(spec);
  const std::vector<std::size_t> pick{7, 2, 11};
  const Dataset sub = ds.subset(pick);
  for (std::size_t i = 0; i < pick.size(); ++i) {
    EXPECT_EQ(sub.sample_index(i), ds.sample_index(pick[i]));
    EXPECT_TRUE(std::equal(sub.image(i).begin(), sub.image(i).end(), ds.image(pick[i]).begin()));
  }
  const SeedStreams streams(3);
  std::set<std::size_t> seen;
  for (const auto& b : epoch_batches(ds.size(), 5, 0, streams, false))
    for (auto p : b) seen.insert(p);
  EXPECT_EQ(seen.size(), ds.size());
  EXPECT_EQ(epoch_batches(ds.size(), 5, 1, streams, false), epoch_batches(ds.size(), 5, 1, streams, false));
  EXPECT_NE(epoch_batches(ds.size(), 5, 1, streams, false), epoch_batches(ds.size(), 5, 2, streams, false));
}

TEST(Dataset, RejectsOutOfRangePixelsAndLabels) {
  Dataset ds(1, 2, 2, 3, "x");
  const std::vector<Real> ok{0, 0.5, 1, 0.2}, bad{0, 1.5, 0, 0};
  EXPECT_NO_THROW(ds.push_back(ok, 2, 0));
  EXPECT_THROW(ds.push_back(bad, 0, 1), Error);
  EXPECT_THROW(ds.push_back(ok, 3, 1), Error);
}

TEST(LabelGuard, BlocksAndLifts) {
  SyntheticSpec spec;
  spec.n_per_class = 1;
  const Dataset ds = gen_synthetic(spec);
  {
    LabelGuard guard;
    EXPECT_THROW(ds.label(0), LabelAccessError);
    EXPECT_THROW(ds.labels(), LabelAccessError);
    {
      LabelGuard::Lift lift;
      EXPECT_NO_THROW(ds.label(0));
    }
    EXPECT_THROW(ds.label(0), LabelAccessError);
  }
  EXPECT_NO_THROW(ds.label(0));
}

TEST(Augment, NoneIsBitwiseIdentity) {
  SyntheticSpec spec;
  spec.n_per_class = 2;
  const Dataset ds = gen_synthetic(spec);
  Rng rng(1);
  const auto policy = AugmentationPolicy::of(AugKind::None);
  const Image out = augment(policy, ds.image_copy(3), rng);
  EXPECT_TRUE(std::equal(out.pixels.begin(), out.pixels.end(), ds.image(3).begin()));
  const std::vector<std::size_t> pos{0, 1, 2};
  const auto [a, b] = make_views(policy, ds, pos, 0, SeedStreams(1));
  EXPECT_EQ(testutil::as_doubles(a.values()), testutil::as_doubles(b.values()));
  EXPECT_EQ(testutil::as_doubles(a.values()), testutil::as_doubles(stack_images(ds, pos).values()));
}

TEST(Augment, SolarizeAtOneIsIdentity) {
  const Image im = asymmetric_image();
  EXPECT_EQ(aug::solarize(im, 1.0).pixels, im.pixels);
  const Image s = aug::solarize(im, 0.5);
  EXPECT_EQ(s.at(0, 1, 0), 0);    // 1.0 inverted
  EXPECT_EQ(s.at(0, 2, 1), 0.5);  // at the threshold: kept
}

TEST(Augment, TinyBlurIsNearlyIdentity) {
  SyntheticSpec spec;
  spec.n_per_class = 1;
  const Image im = gen_synthetic(spec).image_copy(0);
  const auto k = aug::gaussian_kernel(1e-6, 4);
  // Kernel-weight oracle: the centre tap carries essentially all the mass.
  EXPECT_NEAR(k[k.size() / 2], 1.0, 1e-12);
  const Image out = aug::gaussian_blur(im, 1e-6);
  double worst = 0;
  for (std::size_t i = 0; i < im.size(); ++i) worst = std::max(worst, double(std::abs(out.pixels[i] - im.pixels[i])));
  EXPECT_LT(worst, 1e-4);
}

TEST(Augment, OutputsStayInRangeAndKeepShape) {
  SyntheticSpec spec;
  spec.n_per_class = 4;
  spec.channels = 3;
  const Dataset ds = gen_synthetic(spec);
  Rng rng(5);
  for (auto kind : {AugKind::None, AugKind::Weak, AugKind::Strong}) {
    const auto policy = AugmentationPolicy::of(kind);
    for (std::size_t p = 0; p < ds.size(); ++p)
      for (int draw = 0; draw < 10; ++draw) {
        const Image out = augment(policy, ds.image_copy(p), rng);
        EXPECT_EQ(out.channels, 3u);
        EXPECT_EQ(out.height, 16u);
        EXPECT_EQ(out.width, 16u);
        for (Real v : out.pixels) {
          ASSERT_GE(v, 0);
          ASSERT_LE(v, 1);
        }
      }
  }
}

TEST(Augment, ViewsReproducibleAndIndependent) {
  SyntheticSpec spec;
  spec.n_per_class = 2;
  const Dataset ds = gen_synthetic(spec);
  const std::vector<std::size_t> pos{0, 1, 2, 3};
  const auto policy = AugmentationPolicy::of(AugKind::Strong);
  const SeedStreams streams(9);
  const auto [a1, b1] = make_views(policy, ds, pos, 4, streams);
  const auto [a2, b2] = make_views(policy, ds, pos, 4, streams);
  EXPECT_EQ(testutil::as_doubles(a1.values()), testutil::as_doubles(a2.values()));
  EXPECT_EQ(testutil::as_doubles(b1.values()), testutil::as_doubles(b2.values()));
  EXPECT_NE(testutil::as_doubles(a1.values()), testutil::as_doubles(b1.values()));
  // Draws depend on the sample index, not on the batch layout.
  const std::vector<std::size_t> reordered{2, 0};
  const Tensor r = augment_batch(policy, ds, reordered, 4, 0, streams);
  EXPECT_TRUE(std::equal(r.values().begin(), r.values().begin() + 256, a1.values().begin() + 2 * 256));
}

TEST(Augment, FlipFrequency) {
  const Image im = asymmetric_image();
  const Image flipped = aug::hflip(im);
  AugmentationPolicy policy = AugmentationPolicy::of(AugKind::Weak);
  policy.weak.pad = 0;  // crop becomes the identity, leaving only the flip
  Rng rng(11);
  int flips = 0;
  for (int i = 0; i < 1000; ++i) {
    const Image out = augment(policy, im, rng);
    if (out.pixels == flipped.pixels)
      ++flips;
    else
      ASSERT_EQ(out.pixels, im.pixels);
  }
  EXPECT_GE(flips / 1000.0, 0.45);
  EXPECT_LE(flips / 1000.0, 0.55);
}

TEST(Augment, PolicyJson) {
  AugmentationPolicy p = AugmentationPolicy::of(AugKind::Strong, "s");
  p.strong.crop_scale_min = 0.5;
  const nlohmann::json j = p;
  const auto back = j.get<AugmentationPolicy>();
  EXPECT_EQ(back.kind, AugKind::Strong);
  EXPECT_EQ(back.strong.crop_scale_min, 0.5);
  EXPECT_EQ(nlohmann::json("weak").get<AugmentationPolicy>().kind, AugKind::Weak);
  EXPECT_THROW(nlohmann::json("medium").get<AugmentationPolicy>(), ConfigError);
}
