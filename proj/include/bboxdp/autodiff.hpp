#pragma once

// Dense 64-bit tensors with a reverse-mode tape and an Adam optimizer.
// Only the op set the denoiser and the detector regressors use is provided;
// the sole broadcast is the bias row in `affine`.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "bboxdp/common.hpp"

namespace bxl::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// Eigen picks packet or scalar paths (and FMA or not) from the buffer address,
// so every buffer it maps is aligned to keep results independent of the heap.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

struct Tensor {
  Shape shape;
  Buffer data;
  Buffer grad;  // empty until backward writes it

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(shape_size(shape), fill) {}
  Tensor(Shape s, const std::vector<double>& values) : shape(std::move(s)), data(values.begin(), values.end()) {
    if (data.size() != shape_size(shape))
      throw DimensionError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                           shape_str(shape));
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return shape.at(0); }
  std::size_t cols() const { return shape.at(1); }
  bool has_grad() const { return !grad.empty(); }
  double item() const {
    if (data.size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape));
    return data[0];
  }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
};

enum class Op { leaf, add, mul, matmul, affine, relu, silu, concat, mean, mse };

constexpr std::string_view op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::add: return "add";
    case Op::mul: return "mul";
    case Op::matmul: return "matmul";
    case Op::affine: return "affine";
    case Op::relu: return "relu";
    case Op::silu: return "silu";
    case Op::concat: return "concat";
    case Op::mean: return "mean";
    case Op::mse: return "mse";
  }
  return "?";
}

struct Var {
  std::size_t id;
};

namespace detail {
using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const MatR>;
using Map = Eigen::Map<MatR>;

using ArrC = Eigen::Map<const Eigen::ArrayXd>;
using Arr = Eigen::Map<Eigen::ArrayXd>;

inline ArrC arr(const Buffer& v) { return ArrC(v.data(), static_cast<Eigen::Index>(v.size())); }
inline Arr arr(Buffer& v) { return Arr(v.data(), static_cast<Eigen::Index>(v.size())); }

// Scalar std::exp on purpose: Eigen's packet exp differs from the scalar one in
// the last bits, and which elements take which path depends on buffer alignment.
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
}  // namespace detail

/// Records operations in execution order. A tape is single-use: build the
/// graph with forward(), call backward() once on a scalar node.
class Tape {
 public:
  Var constant(Tensor t) {
    nodes_.push_back(Node{Op::leaf, {}, std::move(t), nullptr, false});
    return Var{nodes_.size() - 1};
  }

  /// Registers externally owned storage. backward() overwrites its grad.
  Var parameter(Tensor& t) {
    nodes_.push_back(Node{Op::leaf, {}, Tensor{}, &t, true});
    return Var{nodes_.size() - 1};
  }

  const Tensor& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.param ? *n.param : n.value;
  }

  std::size_t size() const { return nodes_.size(); }

  Var forward(Op op, std::initializer_list<Var> inputs) {
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (Var v : inputs) {
      if (v.id >= nodes_.size()) throw ContractError("tape input id out of range");
      ids.push_back(v.id);
    }
    Tensor out = evaluate(op, ids);
    const bool needs = std::any_of(ids.begin(), ids.end(), [&](std::size_t id) { return nodes_[id].needs_grad; });
    nodes_.push_back(Node{op, std::move(ids), std::move(out), nullptr, needs});
    return Var{nodes_.size() - 1};
  }

  void backward(Var loss) {
    const Tensor& lv = value(loss);
    if (lv.size() != 1)
      throw ContractError("backward requires a scalar loss, got shape " + shape_str(lv.shape));
    std::vector<Buffer> g(loss.id + 1);
    g[loss.id] = {1.0};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.op == Op::leaf && n.param) {
        // parameters the loss never reached get a zero gradient
        if (g[i].empty()) n.param->grad.assign(n.param->size(), 0.0);
        else n.param->grad = std::move(g[i]);
        continue;
      }
      if (g[i].empty() || !n.needs_grad || n.op == Op::leaf) continue;
      propagate(n, g[i], g);
      g[i].clear();
      g[i].shrink_to_fit();
    }
  }

 private:
  struct Node {
    Op op;
    std::vector<std::size_t> inputs;
    Tensor value;
    Tensor* param;
    bool needs_grad;
  };

  bool wants(std::size_t id) const { return nodes_[id].needs_grad; }

  const Tensor& in(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.param ? *n.param : n.value;
  }

  [[noreturn]] static void mismatch(Op op, std::initializer_list<const Tensor*> ts) {
    std::string msg = std::string(op_name(op)) + ": incompatible shapes";
    for (const Tensor* t : ts) msg += " " + shape_str(t->shape);
    throw DimensionError(msg);
  }

  static void expect_arity(Op op, const std::vector<std::size_t>& ids, std::size_t n) {
    if (ids.size() != n)
      throw ContractError(std::string(op_name(op)) + ": expected " + std::to_string(n) + " inputs, got " +
                          std::to_string(ids.size()));
  }

  Tensor evaluate(Op op, const std::vector<std::size_t>& ids) const {
    using namespace detail;
    switch (op) {
      case Op::leaf:
        throw ContractError("forward: leaf is not an operation");
      case Op::add:
      case Op::mul: {
        expect_arity(op, ids, 2);
        const Tensor& a = in(ids[0]);
        const Tensor& b = in(ids[1]);
        if (a.shape != b.shape) mismatch(op, {&a, &b});
        Tensor out(a.shape);
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = op == Op::add ? a[i] + b[i] : a[i] * b[i];
        return out;
      }
      case Op::matmul: {
        expect_arity(op, ids, 2);
        const Tensor& a = in(ids[0]);
        const Tensor& b = in(ids[1]);
        if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) mismatch(op, {&a, &b});
        Tensor out({a.rows(), b.cols()});
        Map(out.data.data(), a.rows(), b.cols()).noalias() =
            MapC(a.data.data(), a.rows(), a.cols()) * MapC(b.data.data(), b.rows(), b.cols());
        return out;
      }
      case Op::affine: {
        expect_arity(op, ids, 3);
        const Tensor& x = in(ids[0]);
        const Tensor& w = in(ids[1]);
        const Tensor& b = in(ids[2]);
        if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1 || x.cols() != w.rows() || b.shape[0] != w.cols())
          mismatch(op, {&x, &w, &b});
        Tensor out({x.rows(), w.cols()});
        Map o(out.data.data(), x.rows(), w.cols());
        o.noalias() = MapC(x.data.data(), x.rows(), x.cols()) * MapC(w.data.data(), w.rows(), w.cols());
        o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data.data(), static_cast<Eigen::Index>(b.size()));
        return out;
      }
      case Op::relu:
      case Op::silu: {
        expect_arity(op, ids, 1);
        const Tensor& a = in(ids[0]);
        Tensor out(a.shape);
        if (op == Op::relu)
          arr(out.data) = arr(a.data).max(0.0);
        else
          for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * sigmoid(a[i]);
        return out;
      }
      case Op::concat: {
        if (ids.empty()) throw ContractError("concat: no inputs");
        const Tensor& first = in(ids[0]);
        if (first.rank() == 1) {
          std::size_t total = 0;
          for (auto id : ids) {
            if (in(id).rank() != 1) mismatch(op, {&first, &in(id)});
            total += in(id).size();
          }
          Tensor out({total});
          std::size_t off = 0;
          for (auto id : ids) {
            std::copy(in(id).data.begin(), in(id).data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
            off += in(id).size();
          }
          return out;
        }
        if (first.rank() != 2) mismatch(op, {&first});
        std::size_t cols = 0;
        for (auto id : ids) {
          const Tensor& t = in(id);
          if (t.rank() != 2 || t.rows() != first.rows()) mismatch(op, {&first, &t});
          cols += t.cols();
        }
        Tensor out({first.rows(), cols});
        for (std::size_t r = 0; r < first.rows(); ++r) {
          std::size_t off = r * cols;
          for (auto id : ids) {
            const Tensor& t = in(id);
            auto src = t.data.begin() + static_cast<std::ptrdiff_t>(r * t.cols());
            std::copy(src, src + static_cast<std::ptrdiff_t>(t.cols()),
                      out.data.begin() + static_cast<std::ptrdiff_t>(off));
            off += t.cols();
          }
        }
        return out;
      }
      case Op::mean: {
        expect_arity(op, ids, 1);
        const Tensor& a = in(ids[0]);
        if (a.size() == 0) mismatch(op, {&a});
        double s = 0.0;
        for (double v : a.data) s += v;
        return Tensor::scalar(s / static_cast<double>(a.size()));
      }
      case Op::mse: {
        expect_arity(op, ids, 2);
        const Tensor& a = in(ids[0]);
        const Tensor& b = in(ids[1]);
        if (a.shape != b.shape || a.size() == 0) mismatch(op, {&a, &b});
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
          const double d = a[i] - b[i];
          s += d * d;
        }
        return Tensor::scalar(s / static_cast<double>(a.size()));
      }
    }
    throw ContractError("forward: unknown op");
  }

  static Buffer& slot(std::vector<Buffer>& g, std::size_t id, std::size_t n) {
    if (g[id].empty()) g[id].assign(n, 0.0);
    return g[id];
  }

  void propagate(const Node& n, const Buffer& go, std::vector<Buffer>& g) const {
    using namespace detail;
    const auto& ids = n.inputs;
    switch (n.op) {
      case Op::leaf:
        return;
      case Op::add:
        for (auto id : {ids[0], ids[1]}) {
          if (!wants(id)) continue;
          arr(slot(g, id, go.size())) += arr(go);
        }
        return;
      case Op::mul: {
        const Tensor& a = in(ids[0]);
        const Tensor& b = in(ids[1]);
        if (wants(ids[0])) {
          auto& ga = slot(g, ids[0], a.size());
          for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * b[i];
        }
        if (wants(ids[1])) {
          auto& gb = slot(g, ids[1], b.size());
          for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * a[i];
        }
        return;
      }
      case Op::matmul:
      case Op::affine: {
        const Tensor& a = in(ids[0]);
        const Tensor& b = in(ids[1]);
        const auto m = static_cast<Eigen::Index>(a.rows());
        const auto k = static_cast<Eigen::Index>(a.cols());
        const auto c = static_cast<Eigen::Index>(b.cols());
        MapC G(go.data(), m, c);
        if (wants(ids[0])) {
          auto& ga = slot(g, ids[0], a.size());
          Map(ga.data(), m, k).noalias() += G * MapC(b.data.data(), k, c).transpose();
        }
        if (wants(ids[1])) {
          auto& gb = slot(g, ids[1], b.size());
          Map(gb.data(), k, c).noalias() += MapC(a.data.data(), m, k).transpose() * G;
        }
        if (n.op == Op::affine && wants(ids[2])) {
          auto& gbias = slot(g, ids[2], static_cast<std::size_t>(c));
          Eigen::Map<Eigen::RowVectorXd>(gbias.data(), c) += G.colwise().sum();
        }
        return;
      }
      case Op::relu: {
        const Tensor& a = in(ids[0]);
        if (!wants(ids[0])) return;
        auto& s = slot(g, ids[0], a.size());
        for (std::size_t i = 0; i < go.size(); ++i)
          if (a[i] > 0.0) s[i] += go[i];
        return;
      }
      case Op::silu: {
        const Tensor& a = in(ids[0]);
        if (!wants(ids[0])) return;
        auto& s = slot(g, ids[0], a.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
          const double sg = sigmoid(a[i]);
          s[i] += go[i] * (sg * (1.0 + a[i] * (1.0 - sg)));
        }
        return;
      }
      case Op::concat: {
        const Tensor& out = n.value;
        if (out.rank() == 1) {
          std::size_t off = 0;
          for (auto id : ids) {
            const std::size_t len = in(id).size();
            if (!wants(id)) {
              off += len;
              continue;
            }
            auto& s = slot(g, id, len);
            for (std::size_t i = 0; i < len; ++i) s[i] += go[off + i];
            off += len;
          }
          return;
        }
        const std::size_t cols = out.cols();
        std::size_t col_off = 0;
        for (auto id : ids) {
          const Tensor& t = in(id);
          if (!wants(id)) {
            col_off += t.cols();
            continue;
          }
          auto& s = slot(g, id, t.size());
          for (std::size_t r = 0; r < t.rows(); ++r)
            for (std::size_t cc = 0; cc < t.cols(); ++cc) s[r * t.cols() + cc] += go[r * cols + col_off + cc];
          col_off += t.cols();
        }
        return;
      }
      case Op::mean: {
        const Tensor& a = in(ids[0]);
        if (!wants(ids[0])) return;
        auto& s = slot(g, ids[0], a.size());
        const double scale = go[0] / static_cast<double>(a.size());
        for (auto& v : s) v += scale;
        return;
      }
      case Op::mse: {
        const Tensor& a = in(ids[0]);
        const Tensor& b = in(ids[1]);
        const double scale = 2.0 * go[0] / static_cast<double>(a.size());
        if (wants(ids[0])) {
          auto& ga = slot(g, ids[0], a.size());
          for (std::size_t i = 0; i < a.size(); ++i) ga[i] += scale * (a[i] - b[i]);
        }
        if (wants(ids[1])) {
          auto& gb = slot(g, ids[1], b.size());
          for (std::size_t i = 0; i < b.size(); ++i) gb[i] -= scale * (a[i] - b[i]);
        }
        return;
      }
    }
  }

  std::vector<Node> nodes_;
};

inline Var add(Tape& t, Var a, Var b) { return t.forward(Op::add, {a, b}); }
inline Var mul(Tape& t, Var a, Var b) { return t.forward(Op::mul, {a, b}); }
inline Var matmul(Tape& t, Var a, Var b) { return t.forward(Op::matmul, {a, b}); }
inline Var affine(Tape& t, Var x, Var w, Var b) { return t.forward(Op::affine, {x, w, b}); }
inline Var relu(Tape& t, Var a) { return t.forward(Op::relu, {a}); }
inline Var silu(Tape& t, Var a) { return t.forward(Op::silu, {a}); }
inline Var mean(Tape& t, Var a) { return t.forward(Op::mean, {a}); }
inline Var mse(Tape& t, Var a, Var b) { return t.forward(Op::mse, {a, b}); }

/// Central-difference gradient estimate of a scalar function.
inline std::vector<double> finite_diff_grad(const std::function<double(const std::vector<double>&)>& f,
                                            std::vector<double> x, double h) {
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f(x);
    x[i] = orig - h;
    const double fm = f(x);
    x[i] = orig;
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::int64_t step = 0;
  std::vector<Buffer> m;
  std::vector<Buffer> v;
};

/// Bias-corrected Adam update using each parameter's stored gradient.
inline void adam_step(std::span<Tensor* const> params, AdamState& state) {
  if (state.m.empty()) {
    for (const Tensor* p : params) {
      state.m.emplace_back(p->size(), 0.0);
      state.v.emplace_back(p->size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("adam_step: parameter count changed between steps");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& p = *params[i];
    if (p.grad.size() != p.size() || state.m[i].size() != p.size())
      throw DimensionError("adam_step: gradient/moment shape mismatch for parameter " + std::to_string(i));
    if (!detail::arr(p.grad).allFinite())
        throw NumericError("adam_step: non-finite gradient in parameter " + std::to_string(i) + " at step " +
                           std::to_string(state.step + 1));
  }
  ++state.step;
  const AdamConfig& c = state.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    auto m = detail::arr(state.m[i]);
    auto v = detail::arr(state.v[i]);
    const auto g = detail::arr(std::as_const(p.grad));
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g.square();
    detail::arr(p.data) -= c.lr * (m / bc1) / ((v / bc2).sqrt() + c.eps);
  }
}

}  // namespace bxl::ad
