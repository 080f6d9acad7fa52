#include "afem/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <numbers>
#include <numeric>
#include <random>
#include <thread>

#include <fmt/format.h>

#include "afem/errors.hpp"
#include "afem/fem_ops.hpp"
#include "afem/ops.hpp"

namespace afem::pipeline {

using std::numbers::pi;

// ---------------------------------------------------------------------------
// Configs

void GenConfig::validate() const {
  if (n_train == 0 || n_test == 0) throw DomainError("dataset needs at least one train and one test sample");
  if (n_train >= kMaxSplitSize || n_test >= kMaxSplitSize) throw DomainError("split too large for seed layout");
  if (nx == 0 || ny == 0) throw DomainError("mesh resolution must be positive");
  if (source != "sine10") throw DomainError(fmt::format("unknown source term '{}'", source));
  if (modes == 0) throw DomainError("random field needs at least one mode");
  if (!(sigma_kappa >= 0.0) || !(decay >= 0.0) || !(noise >= 0.0)) {
    throw DomainError("field amplitude, decay and noise must be non-negative");
  }
  if (!(tol > 0.0)) throw DomainError("solver tolerance must be positive");
}

nlohmann::json GenConfig::to_json() const {
  return {{"n_train", n_train}, {"n_test", n_test},         {"nx", nx},       {"ny", ny},
          {"source", source},   {"modes", modes},           {"sigma_kappa", sigma_kappa},
          {"decay", decay},     {"noise", noise},           {"seed", seed},   {"tol", tol}};
}

GenConfig GenConfig::from_json(const nlohmann::json& j) {
  GenConfig c;
  c.n_train = j.at("n_train").get<std::size_t>();
  c.n_test = j.at("n_test").get<std::size_t>();
  c.nx = j.at("nx").get<std::size_t>();
  c.ny = j.at("ny").get<std::size_t>();
  c.source = j.at("source").get<std::string>();
  c.modes = j.at("modes").get<std::size_t>();
  c.sigma_kappa = j.at("sigma_kappa").get<double>();
  c.decay = j.at("decay").get<double>();
  c.noise = j.at("noise").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.tol = j.at("tol").get<double>();
  c.validate();
  return c;
}

void TrainConfig::validate() const {
  if (!(alpha >= 0.0)) throw DomainError("alpha must be non-negative");
  if (!(lr >= 0.0)) throw DomainError("learning rate must be non-negative");
  if (batch_size == 0) throw DomainError("batch size must be positive");
  if (!(tol > 0.0)) throw DomainError("solver tolerance must be positive");
  if (lr_schedule != "constant" && lr_schedule != "cosine") {
    throw DomainError(fmt::format("unknown learning-rate schedule '{}'", lr_schedule));
  }
}

double TrainConfig::lr_at(std::size_t epoch) const {
  if (lr_schedule == "constant" || epochs == 0) return lr;
  return 0.5 * lr * (1.0 + std::cos(pi * static_cast<double>(epoch) / static_cast<double>(epochs)));
}

nlohmann::json TrainConfig::to_json() const {
  return {{"alpha", alpha}, {"lr", lr}, {"lr_schedule", lr_schedule}, {"epochs", epochs},
          {"batch_size", batch_size}, {"tol", tol}, {"seed", seed},
          {"checkpoint_every", checkpoint_every}};
}

std::uint64_t train_seed(std::uint64_t master, std::size_t index) { return (master << 32) + index; }

std::uint64_t test_seed(std::uint64_t master, std::size_t index) { return (master << 32) + kMaxSplitSize + index; }

// ---------------------------------------------------------------------------
// Data generation

FeFunction source_term(const GenConfig& config, const MeshPtr& mesh) {
  if (config.source != "sine10") throw DomainError(fmt::format("unknown source term '{}'", config.source));
  return interpolate([](double x, double y) { return 10.0 * std::sin(pi * x) * std::sin(pi * y); }, mesh);
}

FeFunction generate_kappa(std::uint64_t seed, const GenConfig& config, const MeshPtr& mesh) {
  const std::size_t K = config.modes;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> coeff(K * K);
  for (std::size_t k = 1; k <= K; ++k) {
    for (std::size_t l = 1; l <= K; ++l) {
      const double decay = std::pow(static_cast<double>(k * k + l * l), -config.decay);
      coeff[(k - 1) * K + (l - 1)] = config.sigma_kappa * normal(rng) * decay;
    }
  }
  return interpolate(
      [&](double x, double y) {
        double s = 0.0;
        for (std::size_t k = 1; k <= K; ++k) {
          const double sx = std::sin(static_cast<double>(k) * pi * x);
          for (std::size_t l = 1; l <= K; ++l) {
            s += coeff[(k - 1) * K + (l - 1)] * sx * std::sin(static_cast<double>(l) * pi * y);
          }
        }
        return s;
      },
      mesh);
}

Sample generate_sample(std::uint64_t seed, const GenConfig& config, const MeshPtr& mesh, const FeFunction& f) {
  FeFunction kappa = generate_kappa(seed, config, mesh);
  FeFunction u = [&] {
    try {
      return solve_forward(kappa, f, {.tol = config.tol});
    } catch (const SolverError& e) {
      throw SolverError(fmt::format("sample seed {}: {}", seed, e.what()), e.residual(), e.phase());
    }
  }();
  if (config.noise == 0.0) return {std::move(kappa), std::move(u), seed};

  const double rms = std::sqrt(dot(u.dofs(), u.dofs()) / static_cast<double>(u.size()));
  std::vector<double> obs = u.dofs();
  std::mt19937_64 rng(seed ^ 0x5DEECE66DULL);
  if (rms > 0.0) {
    std::normal_distribution<double> normal(0.0, config.noise * rms);
    for (double& v : obs) v += normal(rng);
  }
  return {std::move(kappa), FeFunction(mesh, std::move(obs)), seed};
}

Normalization compute_normalization(std::span<const Sample> samples) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const Sample& s : samples) {
    for (double v : s.u_obs.dofs()) sum += v;
    n += s.u_obs.size();
  }
  if (n == 0) return {};
  const double mean = sum / static_cast<double>(n);
  double var = 0.0;
  for (const Sample& s : samples) {
    for (double v : s.u_obs.dofs()) var += (v - mean) * (v - mean);
  }
  const double sd = std::sqrt(var / static_cast<double>(n));
  return {mean, sd > 0.0 ? sd : 1.0};
}

Dataset generate_dataset(const GenConfig& config) {
  config.validate();
  Dataset data;
  data.mesh = build_unit_square_mesh(config.nx, config.ny);
  data.config = config;
  const FeFunction f = source_term(config, data.mesh);
  data.train.reserve(config.n_train);
  for (std::size_t i = 0; i < config.n_train; ++i) {
    data.train.push_back(generate_sample(train_seed(config.seed, i), config, data.mesh, f));
  }
  data.test.reserve(config.n_test);
  for (std::size_t i = 0; i < config.n_test; ++i) {
    data.test.push_back(generate_sample(test_seed(config.seed, i), config, data.mesh, f));
  }
  data.norm = compute_normalization(data.train);
  return data;
}

// ---------------------------------------------------------------------------
// Loss

LossContext make_context(const Dataset& data, const nn::ModelConfig& model, double tol) {
  model.validate();
  if (model.grid_rows != data.mesh->ny() + 1 || model.grid_cols != data.mesh->nx() + 1) {
    throw CastError(fmt::format("model grid {}x{} does not match the dataset mesh {}x{}", model.grid_rows,
                                model.grid_cols, data.mesh->ny() + 1, data.mesh->nx() + 1));
  }
  return {data.mesh,
          std::make_shared<const SparseMatrix>(assemble_mass(*data.mesh)),
          source_term(data.config, data.mesh),
          model,
          data.norm,
          {.tol = tol}};
}

Tensor model_input(const Sample& sample, const Normalization& norm) {
  Tensor grid = grid_view(sample.u_obs);
  for (double& v : grid.values()) v = (v - norm.mean) / norm.std;
  return grid;
}

SampleLoss sample_loss(ad::Tape& tape, const LossContext& ctx, std::span<const ad::Variable> params,
                       const Sample& sample, double alpha) {
  const ad::Variable input = tape.constant(model_input(sample, ctx.norm));
  const ad::Variable kappa_grid = nn::model_forward(ctx.model, params, input);
  const ad::Variable kappa = ad::cast_to_dofs(kappa_grid, ctx.mesh);
  const ad::Variable u = ad::pde_solve(kappa, ctx.f, ctx.solver);
  const ad::Variable kappa_exact = tape.constant(Tensor::vector(sample.kappa_exact.dofs()));
  const ad::Variable u_obs = tape.constant(Tensor::vector(sample.u_obs.dofs()));
  const ad::L2Term terms[] = {{kappa, kappa_exact, 0.5}, {u, u_obs, 0.5 * alpha}};
  return {ad::l2_lossq(ctx.mass, terms), kappa, u};
}

double sample_loss_value(const LossContext& ctx, const nn::ModelParams& params, const Sample& sample, double alpha) {
  ad::Tape tape;
  const auto vars = nn::bind(tape, params, false);
  return sample_loss(tape, ctx, vars, sample, alpha).loss.value().item();
}

double mean_loss(const LossContext& ctx, const nn::ModelParams& params, std::span<const Sample> samples,
                 double alpha) {
  double sum = 0.0;
  for (const Sample& s : samples) sum += sample_loss_value(ctx, params, s, alpha);
  return sum / static_cast<double>(samples.size());
}

// ---------------------------------------------------------------------------
// Training

std::size_t threads_from_env() {
  if (const char* env = std::getenv("AFEM_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end != env && n > 0) return static_cast<std::size_t>(n);
  }
  return 1;
}

TrainState initial_state(const nn::ModelConfig& model, std::uint64_t seed) {
  TrainState s;
  s.params = nn::init_params(model, seed);
  const auto values = s.params.values();
  s.adam = nn::AdamState::zeros_like(values);
  return s;
}

namespace {

struct SampleGradient {
  double loss = 0.0;
  std::vector<Tensor> grads;
};

SampleGradient sample_gradient(const LossContext& ctx, const nn::ModelParams& params, const Sample& sample,
                               double alpha) {
  ad::Tape tape;
  const auto vars = nn::bind(tape, params, true);
  const SampleLoss sl = sample_loss(tape, ctx, vars, sample, alpha);
  ad::ReducedFunctional rf(sl.loss, vars);
  return {sl.loss.value().item(), rf.gradient(Tensor::scalar(1.0))};
}

/// Per-sample gradients for `batch`, computed by up to `threads` workers.
/// Output order follows `batch`, so the reduction is thread-count independent.
std::vector<SampleGradient> batch_gradients(const LossContext& ctx, const nn::ModelParams& params,
                                            std::span<const Sample> samples, std::span<const std::size_t> batch,
                                            double alpha, std::size_t threads) {
  std::vector<SampleGradient> out(batch.size());
  const std::size_t workers = std::min(threads, batch.size());
  if (workers <= 1) {
    for (std::size_t b = 0; b < batch.size(); ++b) out[b] = sample_gradient(ctx, params, samples[batch[b]], alpha);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t b = next++; b < batch.size(); b = next++) {
          out[b] = sample_gradient(ctx, params, samples[batch[b]], alpha);
        }
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

}  // namespace

TrainState train(TrainState state, const Dataset& data, const nn::ModelConfig& model, const TrainConfig& cfg,
                 const TrainHooks& hooks) {
  cfg.validate();
  const LossContext ctx = make_context(data, model, cfg.tol);
  const std::span<const Sample> samples = data.train;
  const std::size_t n = samples.size();

  if (state.loss_history.empty()) {
    const double l0 = mean_loss(ctx, state.params, samples, cfg.alpha);
    if (!std::isfinite(l0)) throw DivergenceError("initial loss is not finite");
    state.loss_history.push_back(l0);
  }

  std::vector<std::size_t> order(n);
  std::vector<double> per_sample(n);
  while (state.epoch < cfg.epochs) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ULL + state.epoch);
    std::shuffle(order.begin(), order.end(), rng);
    const nn::AdamOptions adam{.lr = cfg.lr_at(state.epoch)};

    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::span<const std::size_t> batch(order.data() + start, std::min(cfg.batch_size, n - start));
      const auto results = batch_gradients(ctx, state.params, samples, batch, cfg.alpha, cfg.threads);

      std::vector<Tensor> grads = results.front().grads;
      for (auto& g : grads) std::fill(g.values().begin(), g.values().end(), 0.0);
      const double inv = 1.0 / static_cast<double>(batch.size());
      for (std::size_t b = 0; b < batch.size(); ++b) {
        if (!std::isfinite(results[b].loss)) {
          throw DivergenceError(fmt::format("non-finite loss at epoch {} (sample seed {})", state.epoch + 1,
                                            samples[batch[b]].seed));
        }
        per_sample[batch[b]] = results[b].loss;
        for (std::size_t k = 0; k < grads.size(); ++k) axpy(inv, results[b].grads[k].data(), grads[k].data());
      }

      std::vector<Tensor> values = state.params.values();
      nn::adam_step(values, grads, state.adam, adam);
      state.params.assign(values);
    }

    double sum = 0.0;
    for (double l : per_sample) sum += l;
    state.loss_history.push_back(sum / static_cast<double>(n));
    ++state.epoch;

    const bool last = state.epoch == cfg.epochs;
    const bool cadence = cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0;
    if (hooks.on_epoch) hooks.on_epoch(state);
    if (hooks.checkpoint && (cadence || last)) hooks.checkpoint(state);
  }
  return state;
}

// ---------------------------------------------------------------------------
// Evaluation

double relative_error(const SparseMatrix& mass, std::span<const FeFunction> predictions,
                      std::span<const Sample> samples) {
  if (samples.empty() || predictions.size() != samples.size()) {
    throw DomainError("relative error needs one prediction per sample and at least one sample");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& exact = samples[i].kappa_exact.dofs();
    const double denom = l2_normsq(mass, exact);
    if (denom < 1e-14) {
      throw DomainError(fmt::format("sample seed {} has ||kappa_exact||^2 = {:.3e}; relative error undefined",
                                    samples[i].seed, denom));
    }
    std::vector<double> diff = predictions[i].dofs();
    axpy(-1.0, exact, diff);
    total += l2_normsq(mass, diff) / denom;
  }
  return total / static_cast<double>(samples.size());
}

double evaluate(const LossContext& ctx, const nn::ModelParams& params, std::span<const Sample> samples) {
  std::vector<FeFunction> predictions;
  predictions.reserve(samples.size());
  for (const Sample& s : samples) {
    predictions.push_back(grid_unview(nn::predict(ctx.model, params, model_input(s, ctx.norm)), ctx.mesh));
  }
  return relative_error(*ctx.mass, predictions, samples);
}

}  // namespace afem::pipeline
