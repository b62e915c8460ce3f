#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "test_util.hpp"

using namespace deacl;

namespace {

struct Small {
  Dataset train, test;
  Encoder encoder;
};

Small small_setup() {
  SyntheticSpec spec;
  spec.n_per_class = 6;
  spec.classes = 3;
  spec.size = 8;
  Dataset train = gen_synthetic(spec);
  spec.split = "test";
  spec.n_per_class = 4;
  Dataset test = gen_synthetic(spec);
  EncoderConfig ec;
  ec.height = ec.width = 8;
  ec.widths = {4, 6};
  ec.rep_dim = 8;
  Rng rng(3);
  return {std::move(train), std::move(test), Encoder(ec, rng)};
}

AttackConfig ce_attack(double eps, std::size_t steps) {
  return AttackConfig{eps, steps ? 2.5 * eps / double(steps) : eps, steps, 1, false, Objective::CrossEntropy};
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(Measure, ConstantLabelModel) {
  Dataset ds(1, 4, 4, 2, "const");
  std::mt19937_64 gen(1);
  for (std::size_t i = 0; i < 10; ++i) {
    const Tensor img = testutil::random_tensor({16}, gen, 0, 1);
    ds.push_back(img.values(), 1, i);
  }
  // Ignores its input entirely.
  const LogitsFn model = [](const Tensor& x) {
    return add_bias(scale(matmul(reshape(x, {x.dim(0), 16}), Tensor::zeros({16, 2})), 1), Tensor({2}, {0, 1}));
  };
  const auto m = measure(model, ds, ce_attack(8.0 / 255, 5), 0);
  EXPECT_EQ(m.sa, 100.0);
  EXPECT_EQ(m.ra, 100.0);
}

TEST(Measure, ZeroEpsilonMakesRobustEqualClean) {
  const auto fx = testutil::linear_fixture();
  const auto m = measure(fx.model(), fx.test, ce_attack(0, 10), 0);
  EXPECT_EQ(m.ra, m.sa);
  EXPECT_EQ(m.clean_correct, m.robust_correct);
}

TEST(Measure, BitmapsAreConsistent) {
  const auto fx = testutil::linear_fixture();
  const auto m = measure(fx.model(), fx.test, ce_attack(4.0 / 255, 5), 0, 37);
  EXPECT_DOUBLE_EQ(m.ra, accuracy_from_bitmap(m.robust_correct));
  EXPECT_DOUBLE_EQ(m.sa, accuracy_from_bitmap(m.clean_correct));
  EXPECT_GT(m.sa, 90.0);
  for (std::size_t i = 0; i < m.robust_correct.size(); ++i) EXPECT_LE(m.robust_correct[i], m.clean_correct[i]);
  // Batch size does not change the outcome for a deterministic attack.
  EXPECT_EQ(measure(fx.model(), fx.test, ce_attack(4.0 / 255, 5), 0, 128).robust_correct, m.robust_correct);
}

TEST(Measure, RobustAccuracyFallsWithEpsilon) {
  const auto fx = testutil::linear_fixture();
  double prev = 101;
  for (double eps : {0.0, 1.0 / 255, 2.0 / 255, 4.0 / 255, 8.0 / 255, 16.0 / 255}) {
    const double ra = measure(fx.model(), fx.test, ce_attack(eps, 5), 0).ra;
    EXPECT_LE(ra, prev);
    prev = ra;
  }
  EXPECT_LT(prev, 50.0);
}

TEST(Sweep, ZeroEpsilonColumnIsCleanAccuracy) {
  const auto fx = testutil::linear_fixture();
  const double sa = measure(fx.model(), fx.test, ce_attack(0, 0), 0).sa;
  const auto rows = sweep(fx.model(), fx.test, {1, 5, 5}, {0.0, 4.0 / 255, 8.0 / 255}, AttackConfig{}, 0);
  ASSERT_EQ(rows.size(), 9u);
  for (const auto& r : rows) {
    if (r.eps == 0) {
      EXPECT_EQ(r.ra, sa);
    }
  }
  for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(rows[3 + k].ra, rows[6 + k].ra);  // duplicate step count
  const auto csv = sweep_csv(rows, 0xabc);
  EXPECT_EQ(csv.rfind("# config_hash: 0000000000000abc\nsteps,eps,RA\n", 0), 0u);
  EXPECT_EQ(count_lines(csv), 11u);
  EXPECT_DOUBLE_EQ(sweep_alpha(4, 0.1), 0.0625);
  EXPECT_DOUBLE_EQ(sweep_alpha(0, 0.1), 0.1);
}

TEST(Probe, ZeroLearningRateLeavesClassifierAtInit) {
  std::mt19937_64 gen(2);
  const Tensor feats = testutil::random_tensor({12, 4}, gen);
  const std::vector<std::size_t> labels{0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2};
  ProbeConfig cfg;
  cfg.epochs = 0;
  const auto init = train_linear_probe(feats, labels, 3, cfg);
  cfg.epochs = 5;
  cfg.lr = 0;
  EXPECT_EQ(train_linear_probe(feats, labels, 3, cfg).params().hash(), init.params().hash());
  EXPECT_THROW(train_linear_probe(feats, {0, 1}, 3, cfg), ShapeError);
}

TEST(Probe, SeparableFeaturesAreFit) {
  std::mt19937_64 gen(3);
  std::normal_distribution<double> noise(0, 0.01);
  const std::size_t N = 60, K = 4;
  std::vector<Real> f(N * K);
  std::vector<std::size_t> labels(N);
  for (std::size_t i = 0; i < N; ++i) {
    labels[i] = i % K;
    for (std::size_t k = 0; k < K; ++k) f[i * K + k] = static_cast<Real>((k == labels[i] ? 1.0 : 0.0) + noise(gen));
  }
  const Tensor feats({N, K}, f);
  const auto clf = train_linear_probe(feats, labels, K, ProbeConfig{});
  EXPECT_EQ(probe_accuracy(clf, feats, labels), 100.0);
}

TEST(Slf, EncoderStaysFrozen) {
  auto s = small_setup();
  const auto before = s.encoder.params().hash();
  ProbeConfig cfg;
  cfg.epochs = 3;
  const auto res = slf(s.encoder, s.train, s.test, cfg, ce_attack(8.0 / 255, 2));
  EXPECT_EQ(res.encoder_hash_before, before);
  EXPECT_EQ(res.encoder_hash_after, before);
  EXPECT_EQ(s.encoder.params().hash(), before);
  EXPECT_EQ(res.metrics.protocol, "SLF");
  EXPECT_GE(res.metrics.sa, res.metrics.ra);
}

TEST(Aff, ZeroEpochsKeepsEncoder) {
  auto s = small_setup();
  AffConfig cfg;
  cfg.epochs = 0;
  const auto res = aff(s.encoder, s.train, s.test, cfg, ce_attack(0, 0));
  EXPECT_EQ(res.encoder.params().hash(), s.encoder.params().hash());
  EXPECT_EQ(res.measurement.sa, res.measurement.ra);
  EXPECT_TRUE(res.probe_ra.empty());
}

TEST(Aff, TrainsEncoderAndRecordsProbeCurve) {
  auto s = small_setup();
  AffConfig cfg;
  cfg.epochs = 2;
  cfg.attack.steps = 2;
  cfg.probe_attack.steps = 2;
  cfg.probe_size = 6;
  const auto res = aff(s.encoder, s.train, s.test, cfg, ce_attack(8.0 / 255, 2));
  EXPECT_NE(res.encoder.params().hash(), s.encoder.params().hash());
  EXPECT_EQ(res.probe_ra.size(), 2u);
  EXPECT_EQ(res.metrics.protocol, "AFF");
}

TEST(Aff, EpochsToReach) {
  EXPECT_EQ(epochs_to_reach({10, 20, 35, 30}, 30), 3u);
  EXPECT_EQ(epochs_to_reach({10, 20}, 30), std::nullopt);
  EXPECT_EQ(epochs_to_reach({50}, 30), 1u);
}

TEST(Export, OneRowPerSampleMatchingTheEncoder) {
  auto s = small_setup();
  const auto dir = testutil::scratch_dir("export");
  export_embeddings(s.encoder, s.test, dir / "a.csv", 7);
  export_embeddings(s.encoder, s.test, dir / "b.csv", 7);
  std::ifstream a(dir / "a.csv"), b(dir / "b.csv");
  const std::string ta((std::istreambuf_iterator<char>(a)), {}), tb((std::istreambuf_iterator<char>(b)), {});
  EXPECT_EQ(ta, tb);
  EXPECT_EQ(count_lines(ta), s.test.size() + 2);
  std::istringstream in(ta);
  std::string line;
  std::getline(in, line);
  std::getline(in, line);
  EXPECT_EQ(line.rfind("sample_index,label,z0,", 0), 0u);
  const std::size_t pos[] = {0};
  const Tensor z = s.encoder.infer(stack_images(s.test, pos));
  std::getline(in, line);
  std::istringstream row(line);
  std::string cell;
  std::getline(row, cell, ',');
  EXPECT_EQ(std::stoul(cell), s.test.sample_index(0));
  std::getline(row, cell, ',');
  EXPECT_EQ(std::stoi(cell), s.test.label(0));
  for (std::size_t k = 0; k < z.dim(1); ++k) {
    std::getline(row, cell, ',');
    EXPECT_NEAR(std::stod(cell), z.values()[k], 1e-6);
  }
}

TEST(Metrics, RowFormatting) {
  MetricsRecord r;
  r.run_id = "x";
  r.protocol = "SLF";
  r.sa = 12.5;
  r.ra = 3;
  const auto row = metrics_row(r);
  EXPECT_EQ(row.rfind("x,SLF,12.5", 0), 0u) << row;
  EXPECT_NE(row.find(",NA,"), std::string::npos);
  EXPECT_EQ(std::count(row.begin(), row.end(), ','), std::count(kMetricsHeader, kMetricsHeader + std::strlen(kMetricsHeader), ','));
  EXPECT_EQ(fmt(std::nan("")), "NA");
}
