#include "holdfield/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace holdfield {

Tape::Tape(ParamSet* params) : params_(params) {
  if (params_) param_grad_.assign(params_->size(), 0.0);
}

int Tape::push(Op op, double value, int a, double pa, int b, double pb) {
  nodes_.push_back({op, a, b, pa, pb});
  val_.push_back(value);
  return (int)val_.size() - 1;
}

Var Tape::constant(double v) { return {this, push(Op::Const, v, -1, 0, -1, 0)}; }

Var Tape::leaf(int param_index) {
  return {this, push(Op::Leaf, params_->values[param_index], param_index, 0, -1, 0)};
}

Var Tape::leaf(const std::string& slice, int i) {
  return leaf(params_->slice(slice).offset + i);
}

Var Tape::unary(double value, Var a, double pa) {
  return {this, push(Op::Scalar, value, a.id, pa, -1, 0)};
}

Var Tape::binary(double value, Var a, double pa, Var b, double pb) {
  return {this, push(Op::Scalar, value, a.id, pa, b.id, pb)};
}

int Tape::push_fat(std::unique_ptr<FatNode> node) {
  fats_.push_back(std::move(node));
  push(Op::FatMark, 0.0, (int)fats_.size() - 1, 0, -1, 0);
  return (int)fats_.size() - 1;
}

Var Tape::fat_output(double value) { return {this, push(Op::FatOut, value, -1, 0, -1, 0)}; }

void Tape::backward(const std::vector<std::pair<Var, double>>& seeds) {
  adj_.assign(val_.size(), 0.0);
  for (const auto& [root, w] : seeds) adj_[root.id] += w;
  for (int i = (int)nodes_.size() - 1; i >= 0; --i) {
    const Node& n = nodes_[i];
    switch (n.op) {
      case Op::Scalar: {
        const double g = adj_[i];
        if (g != 0.0) {
          adj_[n.a] += n.pa * g;
          if (n.b >= 0) adj_[n.b] += n.pb * g;
        }
        break;
      }
      case Op::Leaf:
        param_grad_[n.a] += adj_[i];
        break;
      case Op::FatMark:
        fats_[n.a]->backward(*this);
        break;
      default:
        break;
    }
  }
}

void Tape::reset() {
  nodes_.clear();
  val_.clear();
  adj_.clear();
  fats_.clear();
  if (params_) param_grad_.assign(params_->size(), 0.0);
}

// --- operators --------------------------------------------------------------

Var operator+(Var a, Var b) { return a.tape->binary(a.value() + b.value(), a, 1, b, 1); }
Var operator+(Var a, double b) { return a.tape->unary(a.value() + b, a, 1); }
Var operator-(Var a, Var b) { return a.tape->binary(a.value() - b.value(), a, 1, b, -1); }
Var operator-(Var a, double b) { return a.tape->unary(a.value() - b, a, 1); }
Var operator-(double a, Var b) { return b.tape->unary(a - b.value(), b, -1); }
Var operator-(Var a) { return a.tape->unary(-a.value(), a, -1); }
Var operator*(Var a, Var b) {
  return a.tape->binary(a.value() * b.value(), a, b.value(), b, a.value());
}
Var operator*(Var a, double b) { return a.tape->unary(a.value() * b, a, b); }
Var operator/(Var a, Var b) {
  const double ib = 1.0 / b.value();
  return a.tape->binary(a.value() * ib, a, ib, b, -a.value() * ib * ib);
}
Var operator/(Var a, double b) { return a.tape->unary(a.value() / b, a, 1.0 / b); }
Var operator/(double a, Var b) {
  const double ib = 1.0 / b.value();
  return b.tape->unary(a * ib, b, -a * ib * ib);
}

Var exp(Var a) {
  const double e = std::exp(a.value());
  return a.tape->unary(e, a, e);
}
Var log(Var a) { return a.tape->unary(std::log(a.value()), a, 1.0 / a.value()); }
Var sqrt(Var a) {
  const double s = std::sqrt(a.value());
  return a.tape->unary(s, a, 0.5 / s);
}
Var abs(Var a) {
  const double v = a.value();
  return a.tape->unary(std::abs(v), a, v >= 0 ? 1.0 : -1.0);
}
Var max(Var a, Var b) {
  const bool take_a = a.value() >= b.value();
  return a.tape->binary(take_a ? a.value() : b.value(), a, take_a ? 1.0 : 0.0, b,
                        take_a ? 0.0 : 1.0);
}
Var min(Var a, Var b) {
  const bool take_a = a.value() <= b.value();
  return a.tape->binary(take_a ? a.value() : b.value(), a, take_a ? 1.0 : 0.0, b,
                        take_a ? 0.0 : 1.0);
}
Var max(Var a, double b) {
  const bool take_a = a.value() >= b;
  return a.tape->unary(take_a ? a.value() : b, a, take_a ? 1.0 : 0.0);
}
Var sin(Var a) { return a.tape->unary(std::sin(a.value()), a, std::cos(a.value())); }
Var cos(Var a) { return a.tape->unary(std::cos(a.value()), a, -std::sin(a.value())); }
Var tanh(Var a) {
  const double t = std::tanh(a.value());
  return a.tape->unary(t, a, 1.0 - t * t);
}
Var sigmoid(Var a) {
  const double v = a.value();
  const double s = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  return a.tape->unary(s, a, s * (1.0 - s));
}
Var pow(Var a, double e) {
  const double v = std::pow(a.value(), e);
  return a.tape->unary(v, a, e * std::pow(a.value(), e - 1.0));
}

// --- gradient driver ---------------------------------------------------------

std::vector<double> grad(const std::function<Var(Tape&)>& loss_fn, ParamSet& params) {
  Tape tape(&params);
  const Var loss = loss_fn(tape);
  if (!std::isfinite(loss.value())) throw NonFiniteLoss();
  tape.backward(loss);
  return tape.param_grad();
}

std::vector<double> finite_difference(const std::function<double(ParamSet&)>& loss_fn,
                                      ParamSet& params, const std::vector<int>& indices,
                                      double h) {
  std::vector<double> out;
  out.reserve(indices.size());
  for (int idx : indices) {
    const double saved = params.values[idx];
    params.values[idx] = saved + h;
    const double fp = loss_fn(params);
    params.values[idx] = saved - h;
    const double fm = loss_fn(params);
    params.values[idx] = saved;
    out.push_back((fp - fm) / (2.0 * h));
  }
  return out;
}

double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// --- Adam ---------------------------------------------------------------------

void Adam::step(ParamSet& params, std::vector<double> grads) {
  const int n = params.size();
  if ((int)grads.size() != n) throw Error("gradient size mismatch");
  if (m.empty()) {
    m.assign(n, 0.0);
    v.assign(n, 0.0);
  }

  double norm_sq = 0;
  for (double g : grads) norm_sq += g * g;
  const double gnorm = std::sqrt(norm_sq);
  if (config.clip_norm > 0 && gnorm > config.clip_norm) {
    const double scale = config.clip_norm / gnorm;
    for (double& g : grads) g *= scale;
  }

  ++step_count;
  const double bc1 = 1.0 - std::pow(config.beta1, (double)step_count);
  const double bc2 = 1.0 - std::pow(config.beta2, (double)step_count);
  for (const auto& slice : params.slices) {
    const double lr = slice.group == LrGroup::Pose ? config.lr_pose : config.lr_field;
    for (int i = slice.offset; i < slice.offset + slice.count; ++i) {
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * grads[i];
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * grads[i] * grads[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      params.values[i] -= lr * mhat / (std::sqrt(vhat) + config.eps);
    }
  }
}

}  // namespace holdfield
