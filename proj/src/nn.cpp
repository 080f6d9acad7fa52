#include "afem/nn.hpp"

#include <cmath>
#include <random>

#include <fmt/format.h>

#include "afem/errors.hpp"
#include "afem/ops.hpp"

namespace afem::nn {

namespace {

template <typename Enum>
struct EnumName {
  Enum value;
  const char* name;
};

constexpr EnumName<Architecture> kArchitectures[] = {{Architecture::kCnn, "cnn"}, {Architecture::kMlp, "mlp"}};
constexpr EnumName<Activation> kActivations[] = {
    {Activation::kTanh, "tanh"}, {Activation::kRelu, "relu"}, {Activation::kLinear, "linear"}};
constexpr EnumName<Init> kInits[] = {{Init::kGlorotUniform, "glorot_uniform"}, {Init::kZeros, "zeros"}};

template <typename Enum, std::size_t N>
const char* to_name(const EnumName<Enum> (&table)[N], Enum v) {
  for (const auto& e : table) {
    if (e.value == v) return e.name;
  }
  throw DomainError("unknown enum value");
}

template <typename Enum, std::size_t N>
Enum from_name(const EnumName<Enum> (&table)[N], const std::string& name) {
  for (const auto& e : table) {
    if (name == e.name) return e.value;
  }
  throw DomainError(fmt::format("unsupported model option '{}'", name));
}

ad::Variable activate(Activation a, ad::Variable x) {
  switch (a) {
    case Activation::kTanh:
      return ad::tanh(x);
    case Activation::kRelu:
      return ad::relu(x);
    case Activation::kLinear:
      return x;
  }
  return x;
}

struct LayerShape {
  std::string prefix;
  Shape weight;
  Shape bias;
  std::size_t fan_in;
  std::size_t fan_out;
};

std::vector<LayerShape> layer_shapes(const ModelConfig& c) {
  std::vector<LayerShape> out;
  if (c.architecture == Architecture::kCnn) {
    const std::size_t kk = c.kernel_size * c.kernel_size;
    for (std::size_t l = 0; l + 1 < c.channels.size(); ++l) {
      const std::size_t ci = c.channels[l];
      const std::size_t co = c.channels[l + 1];
      out.push_back({fmt::format("conv{}", l), {co, ci, c.kernel_size, c.kernel_size}, {co}, ci * kk, co * kk});
    }
  } else {
    std::vector<std::size_t> widths{c.grid_rows * c.grid_cols};
    widths.insert(widths.end(), c.hidden.begin(), c.hidden.end());
    widths.push_back(c.grid_rows * c.grid_cols);
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      out.push_back({fmt::format("dense{}", l), {widths[l + 1], widths[l]}, {widths[l + 1]}, widths[l], widths[l + 1]});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layer operators

class Conv2dOp final : public ad::Operator {
 public:
  std::string_view name() const override { return "conv2d"; }

  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& x = *in[0];
    const Tensor& w = *in[1];
    const Tensor& b = *in[2];
    if (x.rank() != 3 || w.rank() != 4 || b.rank() != 1 || w.dim(1) != x.dim(0) || w.dim(2) != w.dim(3) ||
        w.dim(2) % 2 == 0 || b.dim(0) != w.dim(0)) {
      throw CastError(fmt::format("conv2d: incompatible shapes x{} w{} b{}", shape_string(x.shape()),
                                  shape_string(w.shape()), shape_string(b.shape())));
    }
    const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2), cout = w.dim(0), k = w.dim(2);
    Tensor y(Shape{cout, h, wd});
    for (std::size_t co = 0; co < cout; ++co) {
      double* yc = &y[co * h * wd];
      for (std::size_t i = 0; i < h * wd; ++i) yc[i] = b[co];
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const double* xc = x.data().data() + ci * h * wd;
        for_each_tap(h, wd, k, [&](std::size_t ky, std::size_t kx, std::size_t oy, std::size_t iy,
                                   std::size_t ox, std::size_t ix, std::size_t len) {
          const double wv = w[((co * cin + ci) * k + ky) * k + kx];
          double* yr = yc + oy * wd + ox;
          const double* xr = xc + iy * wd + ix;
          for (std::size_t t = 0; t < len; ++t) yr[t] += wv * xr[t];
        });
      }
    }
    return y;
  }

  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) override {
    const Tensor& x = *in[0];
    const Tensor& w = *in[1];
    const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2), cout = w.dim(0), k = w.dim(2);
    for (std::size_t co = 0; co < cout; ++co) {
      const double* gc = g.data().data() + co * h * wd;
      if (grads[2]) {
        double s = 0.0;
        for (std::size_t i = 0; i < h * wd; ++i) s += gc[i];
        (*grads[2])[co] += s;
      }
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const double* xc = x.data().data() + ci * h * wd;
        for_each_tap(h, wd, k, [&](std::size_t ky, std::size_t kx, std::size_t oy, std::size_t iy,
                                   std::size_t ox, std::size_t ix, std::size_t len) {
          const std::size_t widx = ((co * cin + ci) * k + ky) * k + kx;
          const double* gr = gc + oy * wd + ox;
          if (grads[1]) {
            const double* xr = xc + iy * wd + ix;
            double s = 0.0;
            for (std::size_t t = 0; t < len; ++t) s += gr[t] * xr[t];
            (*grads[1])[widx] += s;
          }
          if (grads[0]) {
            double* dx = &(*grads[0])[ci * h * wd + iy * wd + ix];
            const double wv = w[widx];
            for (std::size_t t = 0; t < len; ++t) dx[t] += wv * gr[t];
          }
        });
      }
    }
  }

 private:
  /// Calls fn(ky, kx, out_row, in_row, out_col0, in_col0, run_length) for
  /// every kernel tap and output row with a non-empty valid column run.
  template <typename Fn>
  static void for_each_tap(std::size_t h, std::size_t wd, std::size_t k, Fn&& fn) {
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
    const auto H = static_cast<std::ptrdiff_t>(h);
    const auto W = static_cast<std::ptrdiff_t>(wd);
    for (std::size_t ky = 0; ky < k; ++ky) {
      const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
      for (std::size_t kx = 0; kx < k; ++kx) {
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
        const std::ptrdiff_t ox0 = std::max<std::ptrdiff_t>(0, -dx);
        const std::ptrdiff_t ox1 = std::min<std::ptrdiff_t>(W, W - dx);
        if (ox1 <= ox0) continue;
        for (std::ptrdiff_t oy = std::max<std::ptrdiff_t>(0, -dy); oy < std::min<std::ptrdiff_t>(H, H - dy); ++oy) {
          fn(ky, kx, static_cast<std::size_t>(oy), static_cast<std::size_t>(oy + dy), static_cast<std::size_t>(ox0),
             static_cast<std::size_t>(ox0 + dx), static_cast<std::size_t>(ox1 - ox0));
        }
      }
    }
  }
};

class DenseOp final : public ad::Operator {
 public:
  std::string_view name() const override { return "dense"; }

  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& x = *in[0];
    const Tensor& w = *in[1];
    const Tensor& b = *in[2];
    if (w.rank() != 2 || w.dim(1) != x.size() || b.shape() != Shape{w.dim(0)}) {
      throw CastError(fmt::format("dense: incompatible shapes x{} w{} b{}", shape_string(x.shape()),
                                  shape_string(w.shape()), shape_string(b.shape())));
    }
    const std::size_t n_out = w.dim(0), n_in = w.dim(1);
    Tensor y(Shape{n_out});
    for (std::size_t o = 0; o < n_out; ++o) {
      y[o] = b[o] + dot(w.data().subspan(o * n_in, n_in), x.data());
    }
    return y;
  }

  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) override {
    const Tensor& x = *in[0];
    const Tensor& w = *in[1];
    const std::size_t n_out = w.dim(0), n_in = w.dim(1);
    for (std::size_t o = 0; o < n_out; ++o) {
      if (grads[0]) axpy(g[o], w.data().subspan(o * n_in, n_in), grads[0]->data());
      if (grads[1]) axpy(g[o], x.data(), grads[1]->data().subspan(o * n_in, n_in));
      if (grads[2]) (*grads[2])[o] += g[o];
    }
  }
};

}  // namespace

// ---------------------------------------------------------------------------
// Config

ModelConfig ModelConfig::default_cnn(std::size_t grid_rows, std::size_t grid_cols) {
  ModelConfig c;
  c.grid_rows = grid_rows;
  c.grid_cols = grid_cols;
  return c;
}

void ModelConfig::validate() const {
  if (grid_rows == 0 || grid_cols == 0) throw DomainError("model grid shape must be positive");
  if (architecture == Architecture::kCnn) {
    if (channels.size() < 2 || channels.front() != 1 || channels.back() != 1) {
      throw DomainError("cnn channel list must start and end with 1");
    }
    for (std::size_t c : channels) {
      if (c == 0) throw DomainError("cnn channel widths must be positive");
    }
    if (kernel_size == 0 || kernel_size % 2 == 0) throw DomainError("cnn kernel size must be odd");
  } else {
    for (std::size_t h : hidden) {
      if (h == 0) throw DomainError("mlp hidden widths must be positive");
    }
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {{"architecture", to_name(kArchitectures, architecture)},
          {"channels", channels},
          {"kernel_size", kernel_size},
          {"hidden", hidden},
          {"activation", to_name(kActivations, activation)},
          {"init", to_name(kInits, init)},
          {"grid_rows", grid_rows},
          {"grid_cols", grid_cols}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.architecture = from_name(kArchitectures, j.at("architecture").get<std::string>());
  c.channels = j.at("channels").get<std::vector<std::size_t>>();
  c.kernel_size = j.at("kernel_size").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  c.activation = from_name(kActivations, j.at("activation").get<std::string>());
  c.init = from_name(kInits, j.at("init").get<std::string>());
  c.grid_rows = j.at("grid_rows").get<std::size_t>();
  c.grid_cols = j.at("grid_cols").get<std::size_t>();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Params

std::size_t ModelParams::count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.value.size();
  return n;
}

std::vector<Tensor> ModelParams::values() const {
  std::vector<Tensor> out;
  out.reserve(tensors_.size());
  for (const auto& t : tensors_) out.push_back(t.value);
  return out;
}

void ModelParams::assign(std::span<const Tensor> values) {
  if (values.size() != tensors_.size()) throw CastError("parameter list length mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i].shape() != tensors_[i].value.shape()) {
      throw CastError(fmt::format("parameter {} has shape {}, got {}", tensors_[i].name,
                                  shape_string(tensors_[i].value.shape()), shape_string(values[i].shape())));
    }
    tensors_[i].value = values[i];
  }
}

std::vector<double> ModelParams::flatten() const {
  std::vector<double> flat;
  flat.reserve(count());
  for (const auto& t : tensors_) flat.insert(flat.end(), t.value.data().begin(), t.value.data().end());
  return flat;
}

void ModelParams::unflatten(std::span<const double> flat) {
  if (flat.size() != count()) {
    throw CastError(fmt::format("{} values for {} parameters", flat.size(), count()));
  }
  std::size_t off = 0;
  for (auto& t : tensors_) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), t.value.size(), t.value.data().begin());
    off += t.value.size();
  }
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::vector<NamedTensor> tensors;
  for (const LayerShape& l : layer_shapes(config)) {
    Tensor w(l.weight);
    if (config.init == Init::kGlorotUniform) {
      const double limit = std::sqrt(6.0 / static_cast<double>(l.fan_in + l.fan_out));
      std::uniform_real_distribution<double> dist(-limit, limit);
      for (double& v : w.values()) v = dist(rng);
    }
    tensors.push_back({l.prefix + ".weight", std::move(w)});
    tensors.push_back({l.prefix + ".bias", Tensor(l.bias)});
  }
  return ModelParams(std::move(tensors), seed);
}

std::size_t parameter_count(const ModelConfig& config) {
  std::size_t n = 0;
  for (const LayerShape& l : layer_shapes(config)) n += shape_size(l.weight) + shape_size(l.bias);
  return n;
}

std::vector<ad::Variable> bind(ad::Tape& tape, const ModelParams& params, bool requires_grad) {
  std::vector<ad::Variable> vars;
  for (const auto& t : params.tensors()) vars.push_back(tape.leaf(t.value, requires_grad));
  return vars;
}

// ---------------------------------------------------------------------------
// Forward

namespace layers {
ad::Variable conv2d(ad::Variable x, ad::Variable w, ad::Variable b) { return x.tape().record<Conv2dOp>({x, w, b}); }
ad::Variable dense(ad::Variable x, ad::Variable w, ad::Variable b) { return x.tape().record<DenseOp>({x, w, b}); }
}  // namespace layers

ad::Variable model_forward(const ModelConfig& config, std::span<const ad::Variable> params, ad::Variable input) {
  const Shape grid{config.grid_rows, config.grid_cols};
  if (input.shape() != grid) {
    throw CastError(fmt::format("model expects input of shape {}, got {}", shape_string(grid),
                                shape_string(input.shape())));
  }
  const std::size_t n_layers = params.size() / 2;
  if (params.size() != 2 * layer_shapes(config).size()) throw CastError("parameter list does not match config");

  ad::Variable x = config.architecture == Architecture::kCnn
                       ? ad::reshape(input, {1, config.grid_rows, config.grid_cols})
                       : ad::reshape(input, {config.grid_rows * config.grid_cols});
  for (std::size_t l = 0; l < n_layers; ++l) {
    x = config.architecture == Architecture::kCnn ? layers::conv2d(x, params[2 * l], params[2 * l + 1])
                                                  : layers::dense(x, params[2 * l], params[2 * l + 1]);
    if (l + 1 < n_layers) x = activate(config.activation, x);
  }
  return ad::reshape(x, grid);
}

Tensor predict(const ModelConfig& config, const ModelParams& params, const Tensor& input) {
  ad::Tape tape;
  const auto vars = bind(tape, params, false);
  return model_forward(config, vars, tape.constant(input)).value();
}

// ---------------------------------------------------------------------------
// Adam

AdamState AdamState::zeros_like(std::span<const Tensor> params) {
  AdamState s;
  for (const Tensor& p : params) {
    s.m.emplace_back(p.shape());
    s.v.emplace_back(p.shape());
  }
  return s;
}

void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state,
               const AdamOptions& options) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw CastError("adam: parameter, gradient and moment lists differ in length");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (grads[k].shape() != params[k].shape()) {
      throw CastError(fmt::format("adam: gradient {} has shape {}, parameter has {}", k,
                                  shape_string(grads[k].shape()), shape_string(params[k].shape())));
    }
    if (!grads[k].all_finite()) throw DivergenceError(fmt::format("adam: non-finite gradient in tensor {}", k));
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(options.beta1, t);
  const double c2 = 1.0 - std::pow(options.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < params[k].size(); ++i) {
      const double g = grads[k][i];
      m[i] = options.beta1 * m[i] + (1.0 - options.beta1) * g;
      v[i] = options.beta2 * v[i] + (1.0 - options.beta2) * g * g;
      params[k][i] -= options.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + options.eps);
    }
  }
}

}  // namespace afem::nn
