#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "holdfield/geometry.hpp"

// Reverse-mode differentiation on an explicit tape. Scalar primitives store
// their local partials at forward time; heavyweight operations (MLP
// evaluations, blended-skinning warps, rasterized silhouettes) register as
// fat nodes with hand-written backward passes. Parameters live outside the
// node graph: leaves read them, backward accumulates into a dense gradient
// buffer aligned with the ParamSet.

namespace holdfield {

struct NonFiniteLoss : Error {
  explicit NonFiniteLoss(const std::string& msg = "forward pass produced NaN/Inf") : Error(msg) {}
};

enum class LrGroup : int { Field = 0, Pose = 1 };

struct ParamSlice {
  std::string name;
  int offset = 0;
  int count = 0;
  LrGroup group = LrGroup::Field;
};

struct ParamSet {
  std::vector<double> values;
  std::vector<ParamSlice> slices;

  int add_slice(const std::string& name, int count, LrGroup group) {
    const int offset = (int)values.size();
    slices.push_back({name, offset, count, group});
    values.resize(values.size() + count, 0.0);
    return offset;
  }
  const ParamSlice& slice(const std::string& name) const {
    for (const auto& s : slices)
      if (s.name == name) return s;
    throw Error("unknown parameter slice: " + name);
  }
  bool has_slice(const std::string& name) const {
    for (const auto& s : slices)
      if (s.name == name) return true;
    return false;
  }
  double* slice_data(const std::string& name) { return values.data() + slice(name).offset; }
  const double* slice_data(const std::string& name) const {
    return values.data() + slice(name).offset;
  }
  int size() const { return (int)values.size(); }
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;
  double value() const;
  bool valid() const { return tape != nullptr && id >= 0; }
};

struct FatNode {
  virtual ~FatNode() = default;
  virtual void backward(Tape& tape) = 0;
};

class Tape {
 public:
  explicit Tape(ParamSet* params = nullptr);

  ParamSet* params() { return params_; }
  const double* param_values() const { return params_ ? params_->values.data() : nullptr; }

  Var constant(double v);
  Var leaf(int param_index);
  Var leaf(const std::string& slice, int i);

  // Scalar primitives. Partials are evaluated at forward time.
  Var unary(double value, Var a, double pa);
  Var binary(double value, Var a, double pa, Var b, double pb);

  // Fat-node protocol: push the marker, then allocate its outputs.
  int push_fat(std::unique_ptr<FatNode> node);
  Var fat_output(double value);

  double val(int id) const { return val_[id]; }
  double adj(int id) const { return adj_[id]; }
  void add_adj(int id, double v) { adj_[id] += v; }
  void add_param_grad(int index, double v) { param_grad_[index] += v; }

  // Runs the reverse sweep from the given seeded roots. Adjoints reset first.
  void backward(const std::vector<std::pair<Var, double>>& seeds);
  void backward(Var root) { backward({{root, 1.0}}); }

  std::vector<double>& param_grad() { return param_grad_; }
  size_t node_count() const { return val_.size(); }
  void reset();

 private:
  enum class Op : uint8_t { Const, Leaf, Scalar, FatMark, FatOut };
  struct Node {
    Op op;
    int a = -1, b = -1;
    double pa = 0, pb = 0;
  };

  int push(Op op, double value, int a, double pa, int b, double pb);

  ParamSet* params_;
  std::vector<Node> nodes_;
  std::vector<double> val_;
  std::vector<double> adj_;
  std::vector<double> param_grad_;
  std::vector<std::unique_ptr<FatNode>> fats_;
};

inline double Var::value() const { return tape->val(id); }

// --- scalar operator set -----------------------------------------------

Var operator+(Var a, Var b);
Var operator+(Var a, double b);
inline Var operator+(double a, Var b) { return b + a; }
Var operator-(Var a, Var b);
Var operator-(Var a, double b);
Var operator-(double a, Var b);
Var operator-(Var a);
Var operator*(Var a, Var b);
Var operator*(Var a, double b);
inline Var operator*(double a, Var b) { return b * a; }
Var operator/(Var a, Var b);
Var operator/(Var a, double b);
Var operator/(double a, Var b);

Var exp(Var a);
Var log(Var a);
Var sqrt(Var a);
Var abs(Var a);
Var max(Var a, Var b);
Var min(Var a, Var b);
Var max(Var a, double b);
Var sin(Var a);
Var cos(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var pow(Var a, double e);

// Uniform scalar access for code templated over double / Var.
inline double scalar_value(double x) { return x; }
inline double scalar_value(Var x) { return x.value(); }

// --- gradient driver -----------------------------------------------------

// Exact gradient of a tape-built scalar loss with respect to every parameter.
// Throws NonFiniteLoss when the forward value is not finite.
std::vector<double> grad(const std::function<Var(Tape&)>& loss_fn, ParamSet& params);

// Central finite differences on selected coordinates; the oracle for gradient
// checks (h = 1e-4 by default).
std::vector<double> finite_difference(const std::function<double(ParamSet&)>& loss_fn,
                                      ParamSet& params, const std::vector<int>& indices,
                                      double h = 1e-4);

double relative_error(double a, double b, double floor = 1e-6);

// --- optimizer ------------------------------------------------------------

struct AdamConfig {
  double lr_field = 5e-4;
  double lr_pose = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // global-norm clipping applied before the update
};

struct Adam {
  AdamConfig config;
  std::vector<double> m, v;
  int64_t step_count = 0;

  explicit Adam(AdamConfig cfg = {}) : config(cfg) {}
  void step(ParamSet& params, std::vector<double> grads);
};

}  // namespace holdfield
