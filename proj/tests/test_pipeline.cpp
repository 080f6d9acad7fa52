#include <cmath>
#include <numbers>
#include <random>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "afem/errors.hpp"
#include "afem/fem_ops.hpp"
#include "afem/pipeline.hpp"
#include "oracles.hpp"

using namespace afem;
using namespace afem::pipeline;
using std::numbers::pi;

namespace {

GenConfig small_config(std::size_t n_train = 6, std::size_t n_test = 3, std::size_t n = 6) {
  GenConfig c;
  c.n_train = n_train;
  c.n_test = n_test;
  c.nx = n;
  c.ny = n;
  return c;
}

/// Model whose output is the constant `c` everywhere: zero weights, final bias c.
nn::ModelParams constant_model(const nn::ModelConfig& cfg, double c) {
  nn::ModelParams p = nn::init_params(cfg, 0);
  p.unflatten(std::vector<double>(p.count(), 0.0));
  auto vals = p.values();
  vals.back()[0] = c;
  p.assign(vals);
  return p;
}

double dense_normsq(const Mesh& mesh, const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  return oracle::dot(d, oracle::matvec(oracle::mass(mesh), d));
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration and seeds

TEST(GenConfig, ValidationAndJson) {
  GenConfig c = small_config();
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(GenConfig::from_json(c.to_json()).to_json(), c.to_json());
  c.n_test = 0;
  EXPECT_THROW(c.validate(), DomainError);
  c = small_config();
  c.noise = -0.1;
  EXPECT_THROW(c.validate(), DomainError);
  c = small_config();
  c.source = "gaussian";
  EXPECT_THROW(c.validate(), DomainError);
  c = small_config();
  c.n_train = kMaxSplitSize;
  EXPECT_THROW(c.validate(), DomainError);
}

TEST(Seeds, TrainAndTestAreDisjoint) {
  std::set<std::uint64_t> train, test;
  for (std::uint64_t master : {0ULL, 1ULL, 7ULL, 0xFFFFFFFFULL}) {
    for (std::size_t i = 0; i < 2000; ++i) {
      train.insert(train_seed(master, i));
      test.insert(test_seed(master, i));
    }
    // Extremes of the allowed index range stay in their halves.
    EXPECT_LT(train_seed(master, kMaxSplitSize - 1), test_seed(master, 0));
  }
  for (std::uint64_t s : test) EXPECT_EQ(train.count(s), 0u);
  EXPECT_EQ(train.size(), 4u * 2000u);
}

// ---------------------------------------------------------------------------
// Data generation

TEST(GenerateKappa, ZeroAmplitudeAndDeterminism) {
  const auto mesh = build_unit_square_mesh(8, 8);
  GenConfig c;
  c.sigma_kappa = 0.0;
  const FeFunction zero = generate_kappa(5, c, mesh);
  for (double v : zero.dofs()) EXPECT_EQ(v, 0.0);
  c.sigma_kappa = 0.5;
  EXPECT_EQ(generate_kappa(5, c, mesh).dofs(), generate_kappa(5, c, mesh).dofs());
  EXPECT_NE(generate_kappa(5, c, mesh).dofs(), generate_kappa(6, c, mesh).dofs());
  const FeFunction k = generate_kappa(9, c, mesh);
  for (std::size_t v : mesh->boundary_nodes()) EXPECT_NEAR(k[v], 0.0, 1e-15);
}

TEST(GenerateKappa, MonteCarloMeanAndVarianceAtCentre) {
  const auto mesh = build_unit_square_mesh(8, 8);
  const GenConfig c;  // K = 8, decay = 1, sigma = 0.5
  const std::size_t centre = mesh->vertex_index(4, 4);
  const int n = 1000;
  double sum = 0.0, sumsq = 0.0;
  for (int s = 0; s < n; ++s) {
    const double v = generate_kappa(static_cast<std::uint64_t>(s), c, mesh)[centre];
    sum += v;
    sumsq += v * v;
  }
  const double mean = sum / n;
  const double var = sumsq / n - mean * mean;
  // Variance of the series at (1/2, 1/2): only odd k, l contribute.
  double expected_var = 0.0;
  for (int k = 1; k <= 8; ++k) {
    for (int l = 1; l <= 8; ++l) {
      const double a = std::pow(k * k + l * l, -1.0) * std::sin(k * pi / 2) * std::sin(l * pi / 2);
      expected_var += 0.25 * a * a;
    }
  }
  EXPECT_LT(std::abs(mean), 3.0 * std::sqrt(expected_var / n));
  // The sample variance of a Gaussian has relative standard error sqrt(2/n).
  EXPECT_NEAR(var / expected_var, 1.0, 4.0 * std::sqrt(2.0 / n));
}

TEST(GenerateSample, NoiseFreeObservationsSolveThePde) {
  GenConfig c = small_config();
  c.noise = 0.0;
  const auto mesh = build_unit_square_mesh(c.nx, c.ny);
  const FeFunction f = source_term(c, mesh);
  const Sample s = generate_sample(3, c, mesh, f);
  const FeFunction u = solve_forward(s.kappa_exact, f, {.tol = 1e-13});
  double scale = 0.0;
  for (double v : u.dofs()) scale = std::max(scale, std::abs(v));
  for (std::size_t i = 0; i < u.size(); ++i) EXPECT_NEAR(s.u_obs[i], u[i], 1e-9 * scale);
}

TEST(GenerateSample, NoiseLevelMatchesRelativeRms) {
  GenConfig c = small_config();
  c.noise = 0.01;
  const auto mesh = build_unit_square_mesh(c.nx, c.ny);
  const FeFunction f = source_term(c, mesh);
  double ratio_sq = 0.0;
  std::size_t count = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const Sample s = generate_sample(seed, c, mesh, f);
    const FeFunction u = solve_forward(s.kappa_exact, f, {.tol = c.tol});
    const double rms = std::sqrt(oracle::dot(u.dofs(), u.dofs()) / static_cast<double>(u.size()));
    for (std::size_t i = 0; i < u.size(); ++i) {
      const double e = (s.u_obs[i] - u[i]) / (c.noise * rms);
      ratio_sq += e * e;
      ++count;
    }
  }
  EXPECT_NEAR(std::sqrt(ratio_sq / static_cast<double>(count)), 1.0, 0.05);
}

TEST(GenerateDataset, SplitsSeedsAndNormalization) {
  const GenConfig c = small_config(5, 4);
  const Dataset d = generate_dataset(c);
  ASSERT_EQ(d.train.size(), 5u);
  ASSERT_EQ(d.test.size(), 4u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(d.train[i].seed, train_seed(c.seed, i));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(d.test[i].seed, test_seed(c.seed, i));

  double sum = 0.0, sumsq = 0.0, n = 0.0;
  for (const auto& s : d.train) {
    for (double v : s.u_obs.dofs()) {
      sum += v;
      sumsq += v * v;
      n += 1.0;
    }
  }
  const double mean = sum / n;
  EXPECT_NEAR(d.norm.mean, mean, 1e-14);
  EXPECT_NEAR(d.norm.std, std::sqrt(sumsq / n - mean * mean), 1e-12);
}

TEST(GenerateDataset, Deterministic) {
  const Dataset a = generate_dataset(small_config());
  const Dataset b = generate_dataset(small_config());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(a.train[i].kappa_exact.dofs(), b.train[i].kappa_exact.dofs());
    EXPECT_EQ(a.train[i].u_obs.dofs(), b.train[i].u_obs.dofs());
  }
  EXPECT_EQ(a.norm.mean, b.norm.mean);
}

TEST(GenerateDataset, PaperSplitSizes) {
  GenConfig c = small_config(500, 100, 2);
  const Dataset d = generate_dataset(c);
  EXPECT_EQ(d.train.size(), 500u);
  EXPECT_EQ(d.test.size(), 100u);
}

// ---------------------------------------------------------------------------
// Sample loss

class SampleLossTest : public ::testing::Test {
 protected:
  SampleLossTest() : data(generate_dataset(small_config(4, 2, 8))), cfg(nn::ModelConfig::default_cnn(9, 9)),
                     ctx(make_context(data, cfg, 1e-12)) {}
  Dataset data;
  nn::ModelConfig cfg;
  LossContext ctx;
};

TEST_F(SampleLossTest, ValueMatchesDenseOracle) {
  const nn::ModelParams p = nn::init_params(cfg, 3);
  const Sample& s = data.train[1];
  const double alpha = 0.7;
  const FeFunction kappa = grid_unview(nn::predict(cfg, p, model_input(s, data.norm)), data.mesh);
  const FeFunction u = solve_forward(kappa, source_term(data.config, data.mesh), {.tol = 1e-13});
  const double expected = 0.5 * dense_normsq(*data.mesh, kappa.dofs(), s.kappa_exact.dofs()) +
                          0.5 * alpha * dense_normsq(*data.mesh, u.dofs(), s.u_obs.dofs());
  EXPECT_NEAR(sample_loss_value(ctx, p, s, alpha), expected, 1e-10 * expected);
}

TEST_F(SampleLossTest, TwoFemCoupledNodes) {
  ad::Tape tape;
  const auto vars = nn::bind(tape, nn::init_params(cfg, 0));
  sample_loss(tape, ctx, vars, data.train[0], 0.5);
  std::size_t coupled = 0;
  for (std::size_t id = 0; id < tape.size(); ++id) {
    const auto& node = tape.node(id);
    if (node.op && node.op->fem_coupled()) ++coupled;
  }
  EXPECT_EQ(coupled, 2u);
}

TEST_F(SampleLossTest, ExactPredictionWithoutModelTermIsZero) {
  // kappa_exact = 0 everywhere: the zero model predicts it exactly.
  Sample s = data.train[0];
  s.kappa_exact = FeFunction(data.mesh);
  EXPECT_EQ(sample_loss_value(ctx, constant_model(cfg, 0.0), s, 0.0), 0.0);
}

TEST_F(SampleLossTest, ExactPredictionOfNoiseFreeDataIsZeroForAnyAlpha) {
  const double c = 0.3;
  Sample s{FeFunction(data.mesh, std::vector<double>(data.mesh->num_vertices(), c)), FeFunction(data.mesh), 0};
  s.u_obs = solve_forward(s.kappa_exact, source_term(data.config, data.mesh), {.tol = 1e-12});
  for (double alpha : {0.0, 0.5, 10.0}) EXPECT_NEAR(sample_loss_value(ctx, constant_model(cfg, c), s, alpha), 0.0, 1e-20);
}

TEST_F(SampleLossTest, ZeroAlphaBypassesThePde) {
  const nn::ModelParams p = nn::init_params(cfg, 4);
  const Sample& s = data.train[2];

  ad::Tape tape;
  const auto vars = nn::bind(tape, p);
  const SampleLoss sl = sample_loss(tape, ctx, vars, s, 0.0);
  ad::ReducedFunctional rf(sl.loss, vars);
  const auto g = ad::backward(rf, Tensor::scalar(1.0));
  ASSERT_NE(sl.u.cotangent(), nullptr);
  const Tensor& w = *sl.u.cotangent();
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_EQ(w[i], 0.0);

  // Pure regression loss on a fresh tape.
  ad::Tape plain;
  const auto pv = nn::bind(plain, p);
  const auto kappa = ad::cast_to_dofs(nn::model_forward(cfg, pv, plain.constant(model_input(s, data.norm))), data.mesh);
  const auto loss = ad::l2_lossq(ctx.mass, kappa, plain.constant(Tensor::vector(s.kappa_exact.dofs())), 0.5);
  ad::ReducedFunctional rp(loss, pv);
  const auto gp = rp.gradient(Tensor::scalar(1.0));
  for (std::size_t k = 0; k < g.size(); ++k) {
    ASSERT_EQ(g[k].size(), gp[k].size());
    for (std::size_t i = 0; i < g[k].size(); ++i) EXPECT_EQ(g[k][i], gp[k][i]) << k;
  }
}

TEST_F(SampleLossTest, TaylorAlongFinalBias) {
  const nn::ModelParams p = nn::init_params(cfg, 5);
  ad::Tape tape;
  const auto vars = nn::bind(tape, p);
  const SampleLoss sl = sample_loss(tape, ctx, vars, data.train[0], 0.5);
  ad::ReducedFunctional rf(sl.loss, vars);
  std::vector<Tensor> dir;
  for (const auto& v : vars) dir.emplace_back(v.shape());
  dir.back()[0] = 1.0;
  const double steps[] = {1e-2, 5e-3, 2.5e-3, 1.25e-3};
  const auto r = ad::taylor_test(rf, p.values(), dir, steps);
  EXPECT_TRUE(r.passed(1.9)) << r.min_order();
}

TEST_F(SampleLossTest, RejectsMismatchedModelGrid) {
  EXPECT_THROW(make_context(data, nn::ModelConfig::default_cnn(9, 10)), CastError);
}

// ---------------------------------------------------------------------------
// Evaluation

TEST(Evaluate, PerfectAndZeroPredictors) {
  const Dataset d = generate_dataset(small_config(2, 5));
  const SparseMatrix mass = assemble_mass(*d.mesh);
  std::vector<FeFunction> exact, zero;
  for (const auto& s : d.test) {
    exact.push_back(s.kappa_exact);
    zero.emplace_back(d.mesh);
  }
  EXPECT_EQ(relative_error(mass, exact, d.test), 0.0);
  EXPECT_NEAR(relative_error(mass, zero, d.test), 1.0, 1e-15);

  const nn::ModelConfig cfg = nn::ModelConfig::default_cnn(7, 7);
  EXPECT_NEAR(evaluate(make_context(d, cfg), constant_model(cfg, 0.0), d.test), 1.0, 1e-15);
}

TEST(Evaluate, MatchesRatioOfSquaredNorms) {
  const Dataset d = generate_dataset(small_config(2, 3));
  const nn::ModelConfig cfg = nn::ModelConfig::default_cnn(7, 7);
  const nn::ModelParams p = nn::init_params(cfg, 9);
  double expected = 0.0;
  for (const auto& s : d.test) {
    const auto pred = grid_unview(nn::predict(cfg, p, model_input(s, d.norm)), d.mesh).dofs();
    const auto zero = std::vector<double>(pred.size(), 0.0);
    expected += dense_normsq(*d.mesh, pred, s.kappa_exact.dofs()) / dense_normsq(*d.mesh, s.kappa_exact.dofs(), zero);
  }
  expected /= 3.0;
  EXPECT_NEAR(evaluate(make_context(d, cfg), p, d.test), expected, 1e-12 * expected);
}

TEST(Evaluate, RejectsVanishingExactField) {
  const Dataset d = generate_dataset(small_config(2, 2));
  std::vector<Sample> samples = d.test;
  samples[1].kappa_exact = FeFunction(d.mesh);
  const SparseMatrix mass = assemble_mass(*d.mesh);
  std::vector<FeFunction> preds(2, FeFunction(d.mesh));
  EXPECT_THROW(relative_error(mass, preds, samples), DomainError);
}

TEST(Evaluate, NoisierPredictionsScoreWorse) {
  const Dataset d = generate_dataset(small_config(2, 6));
  const SparseMatrix mass = assemble_mass(*d.mesh);
  std::vector<FeFunction> base;
  for (const auto& s : d.test) {
    std::vector<double> v = s.kappa_exact.dofs();
    for (double& x : v) x *= 0.6;
    base.emplace_back(d.mesh, v);
  }
  const double r0 = relative_error(mass, base, d.test);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> normal(0.0, 0.05);
  int worse = 0;
  double mean = 0.0;
  for (int t = 0; t < 20; ++t) {
    std::vector<FeFunction> noisy;
    for (const auto& b : base) {
      std::vector<double> v = b.dofs();
      for (double& x : v) x += normal(rng);
      noisy.emplace_back(d.mesh, v);
    }
    const double r = relative_error(mass, noisy, d.test);
    worse += r > r0;
    mean += r / 20.0;
  }
  EXPECT_GT(mean, r0);
  EXPECT_GE(worse, 18);
}

// ---------------------------------------------------------------------------
// Mesh independence of the loss

TEST(MeshIndependence, L2LossConvergesRawSumGrows) {
  const auto ka = [](double x, double y) { return std::sin(pi * x) * std::sin(2 * pi * y); };
  const auto kb = [](double x, double y) { return 0.5 * x * (1 - x) * std::exp(y); };
  const auto ua = [](double x, double y) { return x * y * (1 - x) * (1 - y); };
  const auto ub = [](double x, double y) { return std::sin(pi * x) * std::sin(pi * y) / 20.0; };
  const double alpha = 0.5;
  std::vector<double> loss, raw;
  for (std::size_t n : {16u, 32u, 64u}) {
    const auto mesh = build_unit_square_mesh(n, n);
    ad::Tape tape;
    auto leaf = [&](auto g) { return tape.constant(Tensor::vector(interpolate(g, mesh).dofs())); };
    const auto mass = std::make_shared<const SparseMatrix>(assemble_mass(*mesh));
    const ad::L2Term terms[] = {{leaf(ka), leaf(kb), 0.5}, {leaf(ua), leaf(ub), 0.5 * alpha}};
    loss.push_back(ad::l2_lossq(mass, terms).value().item());
    double s = 0.0;
    const auto a = interpolate(ka, mesh).dofs(), b = interpolate(kb, mesh).dofs();
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    raw.push_back(s);
  }
  EXPECT_GE((loss[0] - loss[1]) / (loss[1] - loss[2]), 3.5);
  EXPECT_GE(raw[1] / raw[0], 3.5);
  EXPECT_LE(raw[1] / raw[0], 4.5);
}

// ---------------------------------------------------------------------------
// Training

TEST(Train, ZeroLearningRateKeepsParams) {
  const Dataset d = generate_dataset(small_config(4, 1));
  const nn::ModelConfig cfg = nn::ModelConfig::default_cnn(7, 7);
  TrainConfig tc;
  tc.lr = 0.0;
  tc.epochs = 3;
  tc.batch_size = 3;
  const TrainState init = initial_state(cfg, 1);
  const TrainState out = train(init, d, cfg, tc);
  EXPECT_EQ(out.params.flatten(), init.params.flatten());
  ASSERT_EQ(out.loss_history.size(), 4u);
  for (double l : out.loss_history) EXPECT_EQ(l, out.loss_history.front());
  EXPECT_EQ(out.epoch, 3u);
  EXPECT_EQ(out.adam.step, 6u);
}

TEST(Train, DeterministicAcrossRunsAndThreads) {
  const Dataset d = generate_dataset(small_config(7, 1));
  const nn::ModelConfig cfg = nn::ModelConfig::default_cnn(7, 7);
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 3;
  const TrainState a = train(initial_state(cfg, 2), d, cfg, tc);
  const TrainState b = train(initial_state(cfg, 2), d, cfg, tc);
  EXPECT_EQ(a.loss_history, b.loss_history);
  EXPECT_EQ(a.params.flatten(), b.params.flatten());
  tc.threads = 3;
  const TrainState c = train(initial_state(cfg, 2), d, cfg, tc);
  ASSERT_EQ(c.loss_history.size(), a.loss_history.size());
  for (std::size_t i = 0; i < a.loss_history.size(); ++i) EXPECT_NEAR(c.loss_history[i], a.loss_history[i], 1e-12);
}

TEST(Train, HooksFollowCadence) {
  const Dataset d = generate_dataset(small_config(3, 1));
  const nn::ModelConfig cfg = nn::ModelConfig::default_cnn(7, 7);
  TrainConfig tc;
  tc.epochs = 5;
  tc.checkpoint_every = 2;
  std::vector<std::size_t> epochs, checkpoints;
  TrainHooks hooks;
  hooks.on_epoch = [&](const TrainState& s) {
    epochs.push_back(s.epoch);
    EXPECT_EQ(s.loss_history.size(), s.epoch + 1);
  };
  hooks.checkpoint = [&](const TrainState& s) { checkpoints.push_back(s.epoch); };
  train(initial_state(cfg, 0), d, cfg, tc, hooks);
  EXPECT_EQ(epochs, (std::vector<std::size_t>{1, 2, 3, 4, 5}));
  EXPECT_EQ(checkpoints, (std::vector<std::size_t>{2, 4, 5}));
}

TEST(Train, CosineScheduleEndpoints) {
  TrainConfig tc;
  tc.lr = 0.02;
  tc.epochs = 10;
  EXPECT_EQ(tc.lr_at(0), 0.02);
  EXPECT_NEAR(tc.lr_at(5), 0.01, 1e-17);
  EXPECT_GT(tc.lr_at(9), 0.0);
  tc.lr_schedule = "constant";
  EXPECT_EQ(tc.lr_at(9), 0.02);
  tc.lr_schedule = "step";
  EXPECT_THROW(tc.validate(), DomainError);
}

TEST(Train, DivergenceIsReported) {
  const Dataset d = generate_dataset(small_config(2, 1));
  const nn::ModelConfig cfg = nn::ModelConfig::default_cnn(7, 7);
  TrainState s = initial_state(cfg, 0);
  auto vals = s.params.values();
  vals.back()[0] = 800.0;  // e^kappa overflows in assembly
  s.params.assign(vals);
  TrainConfig tc;
  tc.epochs = 1;
  EXPECT_THROW(train(s, d, cfg, tc), std::runtime_error);
}

TEST(Train, DeskScaleHalvesTheLoss) {
  GenConfig gc;  // 16x16, 50 train
  gc.n_test = 1;
  const Dataset d = generate_dataset(gc);
  const nn::ModelConfig cfg = nn::ModelConfig::default_cnn(17, 17);
  TrainConfig tc;
  tc.epochs = 100;
  const TrainState out = train(initial_state(cfg, 0), d, cfg, tc);
  EXPECT_LT(out.loss_history.back(), 0.5 * out.loss_history.front());
}
