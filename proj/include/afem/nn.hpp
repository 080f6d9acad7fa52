#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "afem/tape.hpp"
#include "afem/tensor.hpp"

namespace afem::nn {

enum class Architecture { kCnn, kMlp };
enum class Activation { kTanh, kRelu, kLinear };
enum class Init { kGlorotUniform, kZeros };

/// Model description. The CNN stacks same-padded convolutions with
/// channel widths `channels` (first and last must be 1); the MLP flattens
/// the grid and applies dense layers of widths `hidden`. Hidden layers use
/// `activation`, the output layer is linear.
struct ModelConfig {
  Architecture architecture = Architecture::kCnn;
  std::vector<std::size_t> channels{1, 16, 16, 16, 1};
  std::size_t kernel_size = 3;
  std::vector<std::size_t> hidden{64};
  Activation activation = Activation::kTanh;
  Init init = Init::kGlorotUniform;
  std::size_t grid_rows = 0;  // ny + 1
  std::size_t grid_cols = 0;  // nx + 1

  static ModelConfig default_cnn(std::size_t grid_rows, std::size_t grid_cols);

  /// Throws DomainError on unsupported combinations.
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

class ModelParams {
 public:
  ModelParams() = default;
  ModelParams(std::vector<NamedTensor> tensors, std::uint64_t seed)
      : tensors_(std::move(tensors)), seed_(seed) {}

  const std::vector<NamedTensor>& tensors() const noexcept { return tensors_; }
  std::uint64_t seed() const noexcept { return seed_; }
  std::size_t count() const;

  std::vector<Tensor> values() const;
  /// Replaces all values; shapes must match.
  void assign(std::span<const Tensor> values);

  std::vector<double> flatten() const;
  void unflatten(std::span<const double> flat);

 private:
  std::vector<NamedTensor> tensors_;
  std::uint64_t seed_ = 0;
};

/// Deterministic initialization from `seed`; biases start at zero.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

/// Total trainable scalars for a config. For the CNN this is
/// sum_l c_{l+1} * (c_l * k^2 + 1); 4945 for the default 1-16-16-16-1 3x3.
std::size_t parameter_count(const ModelConfig& config);

/// Records each parameter tensor as a leaf on `tape`.
std::vector<ad::Variable> bind(ad::Tape& tape, const ModelParams& params, bool requires_grad = true);

/// kappa grid from an observation grid of shape (grid_rows, grid_cols).
ad::Variable model_forward(const ModelConfig& config, std::span<const ad::Variable> params,
                           ad::Variable input);

/// Forward pass without retained gradients.
Tensor predict(const ModelConfig& config, const ModelParams& params, const Tensor& input);

namespace layers {
/// Same-padded 2-D convolution: x (Cin, H, W), w (Cout, Cin, k, k), b (Cout).
ad::Variable conv2d(ad::Variable x, ad::Variable w, ad::Variable b);
/// y = W x + b with x flattened: W (out, in), b (out).
ad::Variable dense(ad::Variable x, ad::Variable w, ad::Variable b);
}  // namespace layers

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;

  static AdamState zeros_like(std::span<const Tensor> params);
};

/// One bias-corrected Adam update. Non-finite gradients throw
/// DivergenceError and leave params and state untouched.
void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state,
               const AdamOptions& options);

}  // namespace afem::nn
