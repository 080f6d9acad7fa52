#include "afem/ops.hpp"

#include <cmath>

#include <fmt/format.h>

#include "afem/errors.hpp"

namespace afem::ad {

namespace {

void require_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw CastError(fmt::format("{}: shapes {} and {} differ", op, shape_string(a.shape()),
                                shape_string(b.shape())));
  }
}

class AddOp final : public Operator {
 public:
  explicit AddOp(double sign) : sign_(sign) {}
  std::string_view name() const override { return sign_ > 0 ? "add" : "sub"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    require_same_shape(name(), *in[0], *in[1]);
    Tensor out = *in[0];
    axpy(sign_, in[1]->data(), out.data());
    return out;
  }
  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& w,
                std::span<Tensor* const> grads) override {
    if (grads[0]) axpy(1.0, w.data(), grads[0]->data());
    if (grads[1]) axpy(sign_, w.data(), grads[1]->data());
  }

 private:
  double sign_;
};

class MulOp final : public Operator {
 public:
  std::string_view name() const override { return "mul"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    require_same_shape(name(), *in[0], *in[1]);
    Tensor out = *in[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*in[1])[i];
    return out;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& w,
                std::span<Tensor* const> grads) override {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!grads[k]) continue;
      const Tensor& other = *in[1 - k];
      for (std::size_t i = 0; i < w.size(); ++i) (*grads[k])[i] += w[i] * other[i];
    }
  }
};

class ScaleOp final : public Operator {
 public:
  std::string_view name() const override { return "scale"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    if (in[0]->rank() != 0) throw CastError("scale: factor must be a scalar");
    Tensor out = *in[1];
    for (double& v : out.values()) v *= in[0]->item();
    return out;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& w,
                std::span<Tensor* const> grads) override {
    if (grads[0]) (*grads[0])[0] += dot(w.data(), in[1]->data());
    if (grads[1]) axpy(in[0]->item(), w.data(), grads[1]->data());
  }
};

class ConstScaleOp final : public Operator {
 public:
  explicit ConstScaleOp(double c) : c_(c) {}
  std::string_view name() const override { return "scale_const"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    Tensor out = *in[0];
    for (double& v : out.values()) v *= c_;
    return out;
  }
  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& w,
                std::span<Tensor* const> grads) override {
    if (grads[0]) axpy(c_, w.data(), grads[0]->data());
  }

 private:
  double c_;
};

class SumOp final : public Operator {
 public:
  std::string_view name() const override { return "sum"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    double s = 0.0;
    for (double v : in[0]->data()) s += v;
    return Tensor::scalar(s);
  }
  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& w,
                std::span<Tensor* const> grads) override {
    if (!grads[0]) return;
    for (double& g : grads[0]->values()) g += w.item();
  }
};

class InnerOp final : public Operator {
 public:
  explicit InnerOp(Tensor weight) : weight_(std::move(weight)) {}
  std::string_view name() const override { return "inner"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    require_same_shape(name(), *in[0], weight_);
    return Tensor::scalar(dot(weight_.data(), in[0]->data()));
  }
  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& w,
                std::span<Tensor* const> grads) override {
    if (grads[0]) axpy(w.item(), weight_.data(), grads[0]->data());
  }

 private:
  Tensor weight_;
};

class ReshapeOp final : public Operator {
 public:
  explicit ReshapeOp(Shape shape) : shape_(std::move(shape)) {}
  std::string_view name() const override { return "reshape"; }
  Tensor forward(std::span<const Tensor* const> in) override { return in[0]->reshaped(shape_); }
  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& w,
                std::span<Tensor* const> grads) override {
    if (grads[0]) axpy(1.0, w.data(), grads[0]->data());
  }

 private:
  Shape shape_;
};

class TanhOp final : public Operator {
 public:
  std::string_view name() const override { return "tanh"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    Tensor out = *in[0];
    for (double& v : out.values()) v = std::tanh(v);
    return out;
  }
  void backward(std::span<const Tensor* const>, const Tensor& y, const Tensor& w,
                std::span<Tensor* const> grads) override {
    if (!grads[0]) return;
    for (std::size_t i = 0; i < w.size(); ++i) (*grads[0])[i] += w[i] * (1.0 - y[i] * y[i]);
  }
};

class ReluOp final : public Operator {
 public:
  std::string_view name() const override { return "relu"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    Tensor out = *in[0];
    for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
    return out;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& w,
                std::span<Tensor* const> grads) override {
    if (!grads[0]) return;
    for (std::size_t i = 0; i < w.size(); ++i) {
      if ((*in[0])[i] > 0.0) (*grads[0])[i] += w[i];
    }
  }
};

}  // namespace

Variable add(Variable a, Variable b) { return a.tape().record<AddOp>({a, b}, 1.0); }
Variable sub(Variable a, Variable b) { return a.tape().record<AddOp>({a, b}, -1.0); }
Variable mul(Variable a, Variable b) { return a.tape().record<MulOp>({a, b}); }
Variable scale(Variable s, Variable x) { return x.tape().record<ScaleOp>({s, x}); }
Variable scale(double c, Variable x) { return x.tape().record<ConstScaleOp>({x}, c); }
Variable sum(Variable x) { return x.tape().record<SumOp>({x}); }
Variable inner(Variable x, Tensor w) { return x.tape().record<InnerOp>({x}, std::move(w)); }
Variable reshape(Variable x, Shape shape) { return x.tape().record<ReshapeOp>({x}, std::move(shape)); }
Variable tanh(Variable x) { return x.tape().record<TanhOp>({x}); }
Variable relu(Variable x) { return x.tape().record<ReluOp>({x}); }

}  // namespace afem::ad
