#pragma once
// Minimal dense-tensor arithmetic with reverse-mode differentiation.
//
// Tensors are shared handles to graph nodes.  Every op appends a node whose
// creation id gives a topological order, so backward() is a reverse sweep over
// the reachable subgraph.  Precision is a template parameter: double for test
// oracles and gradient checks, float for training speed.  Dense matmul and
// convolution are backed by BLAS (im2col + gemm).

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include <cblas.h>

namespace lar {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

inline void gemm(bool ta, bool tb, int m, int n, int k, float alpha,
                 const float* a, int lda, const float* b, int ldb, float beta,
                 float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
              beta, c, ldc);
}

inline void gemm(bool ta, bool tb, int m, int n, int k, double alpha,
                 const double* a, int lda, const double* b, int ldb,
                 double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
              beta, c, ldc);
}

template <typename S>
struct Node {
  Shape shape;
  std::vector<S> val;
  std::vector<S> grad;  // allocated on demand; same size as val
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backprop;  // adds into inputs' grads
  const char* op = "leaf";
  uint64_t id = 0;

  void ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), S(0));
  }
};

template <typename S>
inline std::atomic<uint64_t>& node_counter() {
  static std::atomic<uint64_t> c{0};
  return c;
}

template <typename S>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<S>> n) : n_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return from_data(std::move(shape), {}, requires_grad);
  }

  static Tensor from_data(Shape shape, std::vector<S> data,
                          bool requires_grad = false) {
    auto n = std::make_shared<Node<S>>();
    int64_t count = shape_numel(shape);
    if (data.empty()) data.assign(count, S(0));
    if ((int64_t)data.size() != count)
      throw std::invalid_argument("tensor: data size " +
                                  std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    n->shape = std::move(shape);
    n->val = std::move(data);
    n->requires_grad = requires_grad;
    n->id = node_counter<S>()++;
    return Tensor(std::move(n));
  }

  static Tensor scalar(S v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int64_t numel() const { return (int64_t)n_->val.size(); }
  std::vector<S>& data() { return n_->val; }
  const std::vector<S>& data() const { return n_->val; }
  std::vector<S>& grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  bool requires_grad() const { return n_->requires_grad; }
  S item() const {
    if (numel() != 1)
      throw std::invalid_argument("item(): tensor is not scalar, shape " +
                                  shape_str(n_->shape));
    return n_->val[0];
  }
  void zero_grad() { n_->grad.assign(n_->val.size(), S(0)); }

  std::shared_ptr<Node<S>> node() const { return n_; }

 private:
  std::shared_ptr<Node<S>> n_;
};

template <typename S>
Tensor<S> make_op(const char* op, Shape shape, std::vector<S> val,
                  std::vector<std::shared_ptr<Node<S>>> inputs,
                  std::function<void(Node<S>&)> backprop) {
  auto n = std::make_shared<Node<S>>();
  n->shape = std::move(shape);
  n->val = std::move(val);
  n->op = op;
  n->inputs = std::move(inputs);
  for (auto& in : n->inputs)
    if (in->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->backprop = std::move(backprop);
  n->id = node_counter<S>()++;
  return Tensor<S>(std::move(n));
}

// ---- backward -------------------------------------------------------------

// Reverse sweep from a scalar loss.  Gradients accumulate into leaf grad
// buffers and are only cleared by an explicit zero_grad().
template <typename S>
void backward(const Tensor<S>& loss) {
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_str(loss.shape()));
  // collect reachable nodes
  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> seen;
  std::vector<Node<S>*> stack{loss.node().get()};
  while (!stack.empty()) {
    Node<S>* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    order.push_back(n);
    for (auto& in : n->inputs) stack.push_back(in.get());
  }
  std::sort(order.begin(), order.end(),
            [](Node<S>* a, Node<S>* b) { return a->id > b->id; });
  loss.node()->ensure_grad();
  loss.node()->grad[0] += S(1);
  for (Node<S>* n : order) {
    if (!n->requires_grad || !n->backprop) continue;
    n->ensure_grad();
    for (auto& in : n->inputs)
      if (in->requires_grad) in->ensure_grad();
    n->backprop(*n);
  }
}

// ---- elementwise ----------------------------------------------------------

template <typename S>
void check_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

template <typename S, typename FwdFn, typename BwdFn>
Tensor<S> binary_ew(const char* op, const Tensor<S>& a, const Tensor<S>& b,
                    FwdFn f, BwdFn df) {
  check_same_shape(op, a, b);
  std::vector<S> out(a.numel());
  const auto& av = a.data();
  const auto& bv = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
  auto an = a.node();
  auto bn = b.node();
  return make_op<S>(op, a.shape(), std::move(out), {an, bn},
                    [an, bn, df](Node<S>& n) {
                      for (size_t i = 0; i < n.val.size(); ++i) {
                        S da, db;
                        df(an->val[i], bn->val[i], n.val[i], da, db);
                        if (an->requires_grad) an->grad[i] += n.grad[i] * da;
                        if (bn->requires_grad) bn->grad[i] += n.grad[i] * db;
                      }
                    });
}

template <typename S, typename FwdFn, typename BwdFn>
Tensor<S> unary_ew(const char* op, const Tensor<S>& a, FwdFn f, BwdFn df) {
  std::vector<S> out(a.numel());
  const auto& av = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  auto an = a.node();
  return make_op<S>(op, a.shape(), std::move(out), {an},
                    [an, df](Node<S>& n) {
                      for (size_t i = 0; i < n.val.size(); ++i)
                        an->grad[i] += n.grad[i] * df(an->val[i], n.val[i]);
                    });
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_ew(
      "add", a, b, [](S x, S y) { return x + y; },
      [](S, S, S, S& da, S& db) { da = S(1); db = S(1); });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_ew(
      "sub", a, b, [](S x, S y) { return x - y; },
      [](S, S, S, S& da, S& db) { da = S(1); db = S(-1); });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_ew(
      "mul", a, b, [](S x, S y) { return x * y; },
      [](S x, S y, S, S& da, S& db) { da = y; db = x; });
}

template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_ew(
      "div", a, b, [](S x, S y) { return x / y; },
      [](S x, S y, S, S& da, S& db) {
        da = S(1) / y;
        db = -x / (y * y);
      });
}

template <typename S>
Tensor<S> muls(const Tensor<S>& a, S c) {
  return unary_ew(
      "muls", a, [c](S x) { return x * c; }, [c](S, S) { return c; });
}

template <typename S>
Tensor<S> adds(const Tensor<S>& a, S c) {
  return unary_ew(
      "adds", a, [c](S x) { return x + c; }, [](S, S) { return S(1); });
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) {
  return muls(a, S(-1));
}

template <typename S>
Tensor<S> tanh_t(const Tensor<S>& a) {
  return unary_ew(
      "tanh", a, [](S x) { return std::tanh(x); },
      [](S, S y) { return S(1) - y * y; });
}

template <typename S>
Tensor<S> relu_t(const Tensor<S>& a) {
  return unary_ew(
      "relu", a, [](S x) { return x > S(0) ? x : S(0); },
      [](S x, S) { return x > S(0) ? S(1) : S(0); });
}

template <typename S>
Tensor<S> sigmoid_t(const Tensor<S>& a) {
  return unary_ew(
      "sigmoid", a, [](S x) { return S(1) / (S(1) + std::exp(-x)); },
      [](S, S y) { return y * (S(1) - y); });
}

template <typename S>
Tensor<S> erf_t(const Tensor<S>& a) {
  const S two_over_sqrt_pi = S(1.1283791670955126);
  return unary_ew(
      "erf", a, [](S x) { return std::erf(x); },
      [two_over_sqrt_pi](S x, S) { return two_over_sqrt_pi * std::exp(-x * x); });
}

template <typename S>
Tensor<S> exp_t(const Tensor<S>& a) {
  return unary_ew(
      "exp", a, [](S x) { return std::exp(x); }, [](S, S y) { return y; });
}

template <typename S>
Tensor<S> log_t(const Tensor<S>& a) {
  return unary_ew(
      "log", a, [](S x) { return std::log(x); },
      [](S x, S) { return S(1) / x; });
}

template <typename S>
Tensor<S> sqrt_t(const Tensor<S>& a) {
  return unary_ew(
      "sqrt", a, [](S x) { return std::sqrt(x); },
      [](S, S y) { return y > S(0) ? S(0.5) / y : S(0); });
}

template <typename S>
Tensor<S> square_t(const Tensor<S>& a) {
  return unary_ew(
      "square", a, [](S x) { return x * x; },
      [](S x, S) { return S(2) * x; });
}

template <typename S>
Tensor<S> abs_t(const Tensor<S>& a) {
  return unary_ew(
      "abs", a, [](S x) { return std::abs(x); },
      [](S x, S) { return x > S(0) ? S(1) : (x < S(0) ? S(-1) : S(0)); });
}

template <typename S>
Tensor<S> clamp_min_t(const Tensor<S>& a, S lo) {
  return unary_ew(
      "clamp_min", a, [lo](S x) { return x > lo ? x : lo; },
      [lo](S x, S) { return x > lo ? S(1) : S(0); });
}

// ---- reductions / reshaping ----------------------------------------------

template <typename S>
Tensor<S> sum_t(const Tensor<S>& a) {
  S total = S(0);
  for (S v : a.data()) total += v;
  auto an = a.node();
  return make_op<S>("sum", {1}, {total}, {an}, [an](Node<S>& n) {
    for (size_t i = 0; i < an->val.size(); ++i) an->grad[i] += n.grad[0];
  });
}

template <typename S>
Tensor<S> mean_t(const Tensor<S>& a) {
  return muls(sum_t(a), S(1) / S(a.numel()));
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw std::invalid_argument("reshape: cannot view " +
                                shape_str(a.shape()) + " as " +
                                shape_str(shape));
  auto an = a.node();
  std::vector<S> out = a.data();
  return make_op<S>("reshape", std::move(shape), std::move(out), {an},
                    [an](Node<S>& n) {
                      for (size_t i = 0; i < n.val.size(); ++i)
                        an->grad[i] += n.grad[i];
                    });
}

// Constant copy: same values, no gradient flow.
template <typename S>
Tensor<S> detach(const Tensor<S>& a) {
  return Tensor<S>::from_data(a.shape(), a.data(), false);
}

// Forwards `hard_val` but routes the gradient straight to `soft`.
template <typename S>
Tensor<S> straight_through(const Tensor<S>& soft, std::vector<S> hard_val) {
  if ((int64_t)hard_val.size() != soft.numel())
    throw std::invalid_argument("straight_through: value size mismatch");
  auto sn = soft.node();
  return make_op<S>("straight_through", soft.shape(), std::move(hard_val),
                    {sn}, [sn](Node<S>& n) {
                      for (size_t i = 0; i < n.val.size(); ++i)
                        sn->grad[i] += n.grad[i];
                    });
}

// ---- per-channel ops (layout [B,C] or [B,C,H,W]) --------------------------

template <typename S>
void check_channel(const char* op, const Tensor<S>& x, const Tensor<S>& c) {
  if (x.shape().size() < 2 || c.shape().size() != 1 ||
      c.shape()[0] != x.shape()[1])
    throw std::invalid_argument(std::string(op) + ": expected [B,C,...] x " +
                                "[C], got " + shape_str(x.shape()) + " x " +
                                shape_str(c.shape()));
}

// mean over batch and spatial dims -> [C]
template <typename S>
Tensor<S> channel_mean(const Tensor<S>& x) {
  if (x.shape().size() < 2)
    throw std::invalid_argument("channel_mean: need [B,C,...], got " +
                                shape_str(x.shape()));
  int64_t B = x.shape()[0], C = x.shape()[1];
  int64_t sp = x.numel() / (B * C);
  if (B * sp == 0) throw std::invalid_argument("channel_mean: empty batch");
  std::vector<S> out(C, S(0));
  const auto& xv = x.data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      const S* p = &xv[(b * C + c) * sp];
      S acc = S(0);
      for (int64_t s = 0; s < sp; ++s) acc += p[s];
      out[c] += acc;
    }
  S inv = S(1) / S(B * sp);
  for (auto& v : out) v *= inv;
  auto xn = x.node();
  return make_op<S>("channel_mean", {C}, std::move(out), {xn},
                    [xn, B, C, sp, inv](Node<S>& n) {
                      for (int64_t b = 0; b < B; ++b)
                        for (int64_t c = 0; c < C; ++c) {
                          S g = n.grad[c] * inv;
                          S* p = &xn->grad[(b * C + c) * sp];
                          for (int64_t s = 0; s < sp; ++s) p[s] += g;
                        }
                    });
}

namespace detail {
enum class ChanOp { Add, Sub, Mul };
}

template <typename S>
Tensor<S> channel_op(detail::ChanOp kind, const char* name, const Tensor<S>& x,
                     const Tensor<S>& c) {
  check_channel(name, x, c);
  int64_t B = x.shape()[0], C = x.shape()[1];
  int64_t sp = x.numel() / (B * C);
  std::vector<S> out(x.numel());
  const auto& xv = x.data();
  const auto& cv = c.data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t ch = 0; ch < C; ++ch) {
      const S* p = &xv[(b * C + ch) * sp];
      S* o = &out[(b * C + ch) * sp];
      S k = cv[ch];
      switch (kind) {
        case detail::ChanOp::Add:
          for (int64_t s = 0; s < sp; ++s) o[s] = p[s] + k;
          break;
        case detail::ChanOp::Sub:
          for (int64_t s = 0; s < sp; ++s) o[s] = p[s] - k;
          break;
        case detail::ChanOp::Mul:
          for (int64_t s = 0; s < sp; ++s) o[s] = p[s] * k;
          break;
      }
    }
  auto xn = x.node();
  auto cn = c.node();
  return make_op<S>(
      name, x.shape(), std::move(out), {xn, cn},
      [xn, cn, kind, B, C, sp](Node<S>& n) {
        for (int64_t b = 0; b < B; ++b)
          for (int64_t ch = 0; ch < C; ++ch) {
            const S* g = &n.grad[(b * C + ch) * sp];
            S k = cn->val[ch];
            if (xn->requires_grad) {
              S* gx = &xn->grad[(b * C + ch) * sp];
              if (kind == detail::ChanOp::Mul)
                for (int64_t s = 0; s < sp; ++s) gx[s] += g[s] * k;
              else
                for (int64_t s = 0; s < sp; ++s) gx[s] += g[s];
            }
            if (cn->requires_grad) {
              S acc = S(0);
              if (kind == detail::ChanOp::Mul) {
                const S* xv = &xn->val[(b * C + ch) * sp];
                for (int64_t s = 0; s < sp; ++s) acc += g[s] * xv[s];
              } else {
                for (int64_t s = 0; s < sp; ++s) acc += g[s];
                if (kind == detail::ChanOp::Sub) acc = -acc;
              }
              cn->grad[ch] += acc;
            }
          }
      });
}

template <typename S>
Tensor<S> add_channel(const Tensor<S>& x, const Tensor<S>& c) {
  return channel_op(detail::ChanOp::Add, "add_channel", x, c);
}
template <typename S>
Tensor<S> sub_channel(const Tensor<S>& x, const Tensor<S>& c) {
  return channel_op(detail::ChanOp::Sub, "sub_channel", x, c);
}
template <typename S>
Tensor<S> mul_channel(const Tensor<S>& x, const Tensor<S>& c) {
  return channel_op(detail::ChanOp::Mul, "mul_channel", x, c);
}

// ---- linear algebra -------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 ||
      a.shape()[1] != b.shape()[0])
    throw std::invalid_argument("matmul: incompatible shapes " +
                                shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  int64_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
  std::vector<S> out(M * N, S(0));
  gemm(false, false, (int)M, (int)N, (int)K, S(1), a.data().data(), (int)K,
       b.data().data(), (int)N, S(0), out.data(), (int)N);
  auto an = a.node();
  auto bn = b.node();
  return make_op<S>("matmul", {M, N}, std::move(out), {an, bn},
                    [an, bn, M, K, N](Node<S>& n) {
                      if (an->requires_grad)  // dA = dC B^T
                        gemm(false, true, (int)M, (int)K, (int)N, S(1),
                             n.grad.data(), (int)N, bn->val.data(), (int)N,
                             S(1), an->grad.data(), (int)K);
                      if (bn->requires_grad)  // dB = A^T dC
                        gemm(true, false, (int)K, (int)N, (int)M, S(1),
                             an->val.data(), (int)K, n.grad.data(), (int)N,
                             S(1), bn->grad.data(), (int)N);
                    });
}

// y[B,out] = x[B,in] * w[out,in]^T
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w) {
  if (x.shape().size() != 2 || w.shape().size() != 2 ||
      x.shape()[1] != w.shape()[1])
    throw std::invalid_argument("linear: incompatible shapes " +
                                shape_str(x.shape()) + " x " +
                                shape_str(w.shape()));
  int64_t B = x.shape()[0], in = x.shape()[1], out_f = w.shape()[0];
  std::vector<S> out(B * out_f, S(0));
  gemm(false, true, (int)B, (int)out_f, (int)in, S(1), x.data().data(),
       (int)in, w.data().data(), (int)in, S(0), out.data(), (int)out_f);
  auto xn = x.node();
  auto wn = w.node();
  return make_op<S>("linear", {B, out_f}, std::move(out), {xn, wn},
                    [xn, wn, B, in, out_f](Node<S>& n) {
                      if (xn->requires_grad)  // dX = dY W
                        gemm(false, false, (int)B, (int)in, (int)out_f, S(1),
                             n.grad.data(), (int)out_f, wn->val.data(),
                             (int)in, S(1), xn->grad.data(), (int)in);
                      if (wn->requires_grad)  // dW = dY^T X
                        gemm(true, false, (int)out_f, (int)in, (int)B, S(1),
                             n.grad.data(), (int)out_f, xn->val.data(),
                             (int)in, S(1), wn->grad.data(), (int)in);
                    });
}

// ---- 2-D convolution (NCHW, zero padding, stride; no dilation) ------------

struct ConvDims {
  int64_t B, C, H, W, O, kh, kw, stride, pad, Ho, Wo;
};

template <typename S>
ConvDims conv_dims(const Tensor<S>& x, const Tensor<S>& w, int64_t stride,
                   int64_t pad) {
  if (x.shape().size() != 4 || w.shape().size() != 4 ||
      x.shape()[1] != w.shape()[1])
    throw std::invalid_argument("conv2d: incompatible shapes " +
                                shape_str(x.shape()) + " x " +
                                shape_str(w.shape()));
  ConvDims d;
  d.B = x.shape()[0];
  d.C = x.shape()[1];
  d.H = x.shape()[2];
  d.W = x.shape()[3];
  d.O = w.shape()[0];
  d.kh = w.shape()[2];
  d.kw = w.shape()[3];
  d.stride = stride;
  d.pad = pad;
  d.Ho = (d.H + 2 * pad - d.kh) / stride + 1;
  d.Wo = (d.W + 2 * pad - d.kw) / stride + 1;
  if (d.Ho <= 0 || d.Wo <= 0)
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  return d;
}

template <typename S>
void im2col(const S* x, const ConvDims& d, S* col) {
  // col is [C*kh*kw, Ho*Wo]
  int64_t ohw = d.Ho * d.Wo;
  for (int64_t c = 0; c < d.C; ++c)
    for (int64_t ky = 0; ky < d.kh; ++ky)
      for (int64_t kx = 0; kx < d.kw; ++kx) {
        S* row = col + ((c * d.kh + ky) * d.kw + kx) * ohw;
        for (int64_t oy = 0; oy < d.Ho; ++oy) {
          int64_t iy = oy * d.stride - d.pad + ky;
          for (int64_t ox = 0; ox < d.Wo; ++ox) {
            int64_t ix = ox * d.stride - d.pad + kx;
            row[oy * d.Wo + ox] =
                (iy >= 0 && iy < d.H && ix >= 0 && ix < d.W)
                    ? x[(c * d.H + iy) * d.W + ix]
                    : S(0);
          }
        }
      }
}

template <typename S>
void col2im_add(const S* col, const ConvDims& d, S* x) {
  int64_t ohw = d.Ho * d.Wo;
  for (int64_t c = 0; c < d.C; ++c)
    for (int64_t ky = 0; ky < d.kh; ++ky)
      for (int64_t kx = 0; kx < d.kw; ++kx) {
        const S* row = col + ((c * d.kh + ky) * d.kw + kx) * ohw;
        for (int64_t oy = 0; oy < d.Ho; ++oy) {
          int64_t iy = oy * d.stride - d.pad + ky;
          if (iy < 0 || iy >= d.H) continue;
          for (int64_t ox = 0; ox < d.Wo; ++ox) {
            int64_t ix = ox * d.stride - d.pad + kx;
            if (ix < 0 || ix >= d.W) continue;
            x[(c * d.H + iy) * d.W + ix] += row[oy * d.Wo + ox];
          }
        }
      }
}

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, int64_t stride,
                 int64_t pad) {
  ConvDims d = conv_dims(x, w, stride, pad);
  int64_t ck = d.C * d.kh * d.kw;
  int64_t ohw = d.Ho * d.Wo;
  std::vector<S> out(d.B * d.O * ohw, S(0));
  std::vector<S> col(ck * ohw);
  for (int64_t b = 0; b < d.B; ++b) {
    im2col(&x.data()[b * d.C * d.H * d.W], d, col.data());
    gemm(false, false, (int)d.O, (int)ohw, (int)ck, S(1), w.data().data(),
         (int)ck, col.data(), (int)ohw, S(0), &out[b * d.O * ohw], (int)ohw);
  }
  auto xn = x.node();
  auto wn = w.node();
  return make_op<S>(
      "conv2d", {d.B, d.O, d.Ho, d.Wo}, std::move(out), {xn, wn},
      [xn, wn, d](Node<S>& n) {
        int64_t ck = d.C * d.kh * d.kw;
        int64_t ohw = d.Ho * d.Wo;
        std::vector<S> col(ck * ohw), dcol(ck * ohw);
        for (int64_t b = 0; b < d.B; ++b) {
          const S* gy = &n.grad[b * d.O * ohw];
          if (wn->requires_grad) {  // dW += dY col^T (recompute col)
            im2col(&xn->val[b * d.C * d.H * d.W], d, col.data());
            gemm(false, true, (int)d.O, (int)ck, (int)ohw, S(1), gy, (int)ohw,
                 col.data(), (int)ohw, S(1), wn->grad.data(), (int)ck);
          }
          if (xn->requires_grad) {  // dcol = W^T dY, scatter back
            gemm(true, false, (int)ck, (int)ohw, (int)d.O, S(1),
                 wn->val.data(), (int)ck, gy, (int)ohw, S(0), dcol.data(),
                 (int)ohw);
            col2im_add(dcol.data(), d, &xn->grad[b * d.C * d.H * d.W]);
          }
        }
      });
}

// ---- softmax / loss -------------------------------------------------------

// softmax along the last dim of [N,K]
template <typename S>
Tensor<S> softmax_lastdim(const Tensor<S>& x) {
  if (x.shape().size() != 2)
    throw std::invalid_argument("softmax_lastdim: expected [N,K], got " +
                                shape_str(x.shape()));
  int64_t N = x.shape()[0], K = x.shape()[1];
  std::vector<S> out(x.numel());
  const auto& xv = x.data();
  for (int64_t i = 0; i < N; ++i) {
    const S* row = &xv[i * K];
    S mx = *std::max_element(row, row + K);
    S z = S(0);
    for (int64_t k = 0; k < K; ++k) {
      out[i * K + k] = std::exp(row[k] - mx);
      z += out[i * K + k];
    }
    for (int64_t k = 0; k < K; ++k) out[i * K + k] /= z;
  }
  auto xn = x.node();
  return make_op<S>("softmax", x.shape(), std::move(out), {xn},
                    [xn, N, K](Node<S>& n) {
                      for (int64_t i = 0; i < N; ++i) {
                        const S* y = &n.val[i * K];
                        const S* gy = &n.grad[i * K];
                        S dot = S(0);
                        for (int64_t k = 0; k < K; ++k) dot += gy[k] * y[k];
                        for (int64_t k = 0; k < K; ++k)
                          xn->grad[i * K + k] += y[k] * (gy[k] - dot);
                      }
                    });
}

// Sum over the batch of -log softmax(logits)[label].
template <typename S>
Tensor<S> softmax_ce_sum(const Tensor<S>& logits,
                         const std::vector<int>& labels) {
  if (logits.shape().size() != 2 ||
      (int64_t)labels.size() != logits.shape()[0])
    throw std::invalid_argument("softmax_ce_sum: logits " +
                                shape_str(logits.shape()) + " vs " +
                                std::to_string(labels.size()) + " labels");
  int64_t N = logits.shape()[0], K = logits.shape()[1];
  auto probs = std::make_shared<std::vector<S>>(logits.numel());
  const auto& xv = logits.data();
  S loss = S(0);
  for (int64_t i = 0; i < N; ++i) {
    if (labels[i] < 0 || labels[i] >= K)
      throw std::invalid_argument("softmax_ce_sum: label out of range");
    const S* row = &xv[i * K];
    S mx = *std::max_element(row, row + K);
    S z = S(0);
    for (int64_t k = 0; k < K; ++k) {
      (*probs)[i * K + k] = std::exp(row[k] - mx);
      z += (*probs)[i * K + k];
    }
    for (int64_t k = 0; k < K; ++k) (*probs)[i * K + k] /= z;
    loss -= std::log(std::max((*probs)[i * K + labels[i]],
                              std::numeric_limits<S>::min()));
  }
  auto xn = logits.node();
  auto lab = labels;
  return make_op<S>("softmax_ce_sum", {1}, {loss}, {xn},
                    [xn, probs, lab, N, K](Node<S>& n) {
                      S g = n.grad[0];
                      for (int64_t i = 0; i < N; ++i)
                        for (int64_t k = 0; k < K; ++k)
                          xn->grad[i * K + k] +=
                              g * ((*probs)[i * K + k] -
                                   (lab[i] == (int)k ? S(1) : S(0)));
                    });
}

// ---- finite differences (test oracle) -------------------------------------

// Max over all parameter elements of |analytic - numeric| / max(|a|,|n|,eps).
// f must rebuild its graph on each call and be deterministic.
template <typename S>
double finite_difference_check(const std::function<Tensor<S>()>& f,
                               std::vector<Tensor<S>> params, S step,
                               double eps = 1e-10) {
  for (auto& p : params) p.zero_grad();
  Tensor<S> loss = f();
  backward(loss);
  std::vector<std::vector<S>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.grad());
  double max_err = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& data = params[pi].data();
    for (size_t i = 0; i < data.size(); ++i) {
      S saved = data[i];
      data[i] = saved + step;
      double up = (double)f().item();
      data[i] = saved - step;
      double down = (double)f().item();
      data[i] = saved;
      double numeric = (up - down) / (2.0 * (double)step);
      double a = (double)analytic[pi][i];
      double denom = std::max({std::abs(a), std::abs(numeric), eps});
      max_err = std::max(max_err, std::abs(a - numeric) / denom);
    }
  }
  return max_err;
}

template <typename S>
int64_t argmax_row(const std::vector<S>& v, int64_t row, int64_t K) {
  int64_t best = 0;
  for (int64_t k = 1; k < K; ++k)
    if (v[row * K + k] > v[row * K + best]) best = k;
  return best;
}

}  // namespace lar
