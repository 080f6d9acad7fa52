#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "afem/fem.hpp"
#include "afem/mesh.hpp"
#include "afem/nn.hpp"
#include "afem/tape.hpp"

namespace afem::pipeline {

/// Synthetic data settings. kappa is a truncated sine series
///   sigma_kappa * sum_{k,l=1..modes} a_kl (k^2 + l^2)^-decay sin(k pi x) sin(l pi y)
/// with a_kl ~ N(0, 1); observations carry Gaussian noise of standard
/// deviation noise * rms(u).
struct GenConfig {
  std::size_t n_train = 50;
  std::size_t n_test = 20;
  std::size_t nx = 16;
  std::size_t ny = 16;
  std::string source = "sine10";
  std::size_t modes = 8;
  double sigma_kappa = 0.5;
  double decay = 1.0;
  double noise = 0.01;
  std::uint64_t seed = 0;
  double tol = 1e-10;

  void validate() const;
  nlohmann::json to_json() const;
  static GenConfig from_json(const nlohmann::json& j);
};

/// Per-sample seeds. Train and test use disjoint halves of the 64-bit range
/// below the master seed's block: (master << 32) + i and
/// (master << 32) + 2^31 + i.
std::uint64_t train_seed(std::uint64_t master, std::size_t index);
std::uint64_t test_seed(std::uint64_t master, std::size_t index);
inline constexpr std::size_t kMaxSplitSize = std::size_t{1} << 31;

struct Sample {
  FeFunction kappa_exact;
  FeFunction u_obs;
  std::uint64_t seed = 0;
};

/// Standardization applied to u_obs before it enters the model.
struct Normalization {
  double mean = 0.0;
  double std = 1.0;
};

struct Dataset {
  MeshPtr mesh;
  GenConfig config;
  std::vector<Sample> train;
  std::vector<Sample> test;
  Normalization norm;
};

/// f for the configured source tag ("sine10": 10 sin(pi x) sin(pi y)).
FeFunction source_term(const GenConfig& config, const MeshPtr& mesh);

FeFunction generate_kappa(std::uint64_t seed, const GenConfig& config, const MeshPtr& mesh);

/// One sample: kappa from `seed`, u(kappa) from the forward solve, and
/// nodewise noise from a second generator derived from `seed`.
Sample generate_sample(std::uint64_t seed, const GenConfig& config, const MeshPtr& mesh, const FeFunction& f);

/// Train/test splits plus train-split normalization statistics.
Dataset generate_dataset(const GenConfig& config);

Normalization compute_normalization(std::span<const Sample> samples);

/// Everything a loss evaluation needs besides the parameters.
struct LossContext {
  MeshPtr mesh;
  std::shared_ptr<const SparseMatrix> mass;
  FeFunction f;
  nn::ModelConfig model;
  Normalization norm;
  SolverOptions solver;
};

LossContext make_context(const Dataset& data, const nn::ModelConfig& model, double tol = 1e-10);

/// Standardized observation grid fed to the model.
Tensor model_input(const Sample& sample, const Normalization& norm);

struct SampleLoss {
  ad::Variable loss;
  ad::Variable kappa;  // predicted DoFs
  ad::Variable u;      // u(kappa_theta(u_obs)), the pde_solve node
};

/// 1/2 ||kappa_theta - kappa_exact||^2 + alpha/2 ||u(kappa_theta) - u_obs||^2,
/// both in L2(Omega), recorded with one pde_solve and one l2_lossq node.
SampleLoss sample_loss(ad::Tape& tape, const LossContext& ctx, std::span<const ad::Variable> params,
                       const Sample& sample, double alpha);

/// Loss value only.
double sample_loss_value(const LossContext& ctx, const nn::ModelParams& params, const Sample& sample, double alpha);

/// Mean sample loss over `samples`, summed in index order.
double mean_loss(const LossContext& ctx, const nn::ModelParams& params, std::span<const Sample> samples,
                 double alpha);

struct TrainConfig {
  double alpha = 0.5;
  double lr = 1e-2;
  /// "constant", or "cosine": lr * (1 + cos(pi * epoch / epochs)) / 2 per epoch.
  std::string lr_schedule = "cosine";
  std::size_t epochs = 200;
  std::size_t batch_size = 5;
  double tol = 1e-10;
  std::uint64_t seed = 0;
  /// Checkpoint every n epochs; 0 writes only at the end.
  std::size_t checkpoint_every = 0;
  /// Worker threads per minibatch; results do not depend on it.
  std::size_t threads = 1;

  void validate() const;
  nlohmann::json to_json() const;
  /// Learning rate used during the epoch that starts at `epoch`.
  double lr_at(std::size_t epoch) const;
};

struct TrainState {
  nn::ModelParams params;
  nn::AdamState adam;
  std::size_t epoch = 0;
  /// Entry 0 is the initial mean loss; entry e the mean loss seen during epoch e.
  std::vector<double> loss_history;
};

TrainState initial_state(const nn::ModelConfig& model, std::uint64_t seed);

struct TrainHooks {
  /// After every epoch, with the updated history.
  std::function<void(const TrainState&)> on_epoch;
  /// Per checkpoint cadence and after the last epoch.
  std::function<void(const TrainState&)> checkpoint;
};

/// Minibatch Adam on the sample-averaged loss, continuing from `state`
/// until cfg.epochs. Throws DivergenceError on a non-finite loss or
/// gradient; the last checkpoint written is then the last good state.
TrainState train(TrainState state, const Dataset& data, const nn::ModelConfig& model, const TrainConfig& cfg,
                 const TrainHooks& hooks = {});

/// Mean over samples of ||kappa_theta(u_obs) - kappa_exact||^2 / ||kappa_exact||^2
/// (squared L2 norms). Throws DomainError if some ||kappa_exact||^2 < 1e-14.
double evaluate(const LossContext& ctx, const nn::ModelParams& params, std::span<const Sample> samples);

/// Same metric for given predictions.
double relative_error(const SparseMatrix& mass, std::span<const FeFunction> predictions,
                      std::span<const Sample> samples);

/// Worker count from AFEM_THREADS (default 1).
std::size_t threads_from_env();

}  // namespace afem::pipeline
