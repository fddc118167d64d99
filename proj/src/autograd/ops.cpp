#include "aegis/autograd/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace aegis::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b, const std::string& detail = "") {
  std::string msg = std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b);
  if (!detail.empty()) msg += " (" + detail + ")";
  throw ShapeError(msg);
}

const std::vector<double>& data_of(const Node& node, std::size_t i) { return node.inputs[i]->data; }

// ---------------------------------------------------------------------------
// Broadcasting

struct BroadcastPlan {
  enum class Kind { same, suffix_b, suffix_a, general };
  Kind kind = Kind::same;
  Shape out;
  std::size_t na = 0, nb = 0;
  std::vector<std::size_t> ia, ib;
};

Shape strip_leading_ones(const Shape& s) {
  std::size_t k = 0;
  while (k + 1 < s.size() && s[k] == 1) ++k;
  return Shape(s.begin() + static_cast<std::ptrdiff_t>(k), s.end());
}

bool is_suffix(const Shape& small, const Shape& big) {
  Shape s = strip_leading_ones(small);
  if (s.size() > big.size()) return false;
  return std::equal(s.begin(), s.end(), big.end() - static_cast<std::ptrdiff_t>(s.size()));
}

BroadcastPlan plan_broadcast(const char* op, const Shape& a, const Shape& b) {
  BroadcastPlan plan;
  plan.na = numel_of(a);
  plan.nb = numel_of(b);
  const std::size_t nd = std::max(a.size(), b.size());
  plan.out.assign(nd, 1);
  for (std::size_t k = 0; k < nd; ++k) {
    std::size_t ea = k < nd - a.size() ? 1 : a[k - (nd - a.size())];
    std::size_t eb = k < nd - b.size() ? 1 : b[k - (nd - b.size())];
    if (ea != eb && ea != 1 && eb != 1) shape_fail(op, a, b);
    plan.out[k] = std::max(ea, eb);
  }
  const std::size_t n = numel_of(plan.out);
  if (a == b) {
    plan.kind = BroadcastPlan::Kind::same;
  } else if (plan.na == n && is_suffix(b, plan.out)) {
    plan.kind = BroadcastPlan::Kind::suffix_b;
  } else if (plan.nb == n && is_suffix(a, plan.out)) {
    plan.kind = BroadcastPlan::Kind::suffix_a;
  } else {
    plan.kind = BroadcastPlan::Kind::general;
    auto strides_for = [&](const Shape& s) {
      std::vector<std::size_t> st(nd, 0);
      std::size_t acc = 1;
      for (std::size_t k = s.size(); k-- > 0;) {
        std::size_t ok = k + (nd - s.size());
        st[ok] = s[k] == 1 ? 0 : acc;
        acc *= s[k];
      }
      return st;
    };
    auto sa = strides_for(a);
    auto sb = strides_for(b);
    plan.ia.resize(n);
    plan.ib.resize(n);
    std::vector<std::size_t> idx(nd, 0);
    std::size_t offa = 0, offb = 0;
    for (std::size_t i = 0; i < n; ++i) {
      plan.ia[i] = offa;
      plan.ib[i] = offb;
      for (std::size_t k = nd; k-- > 0;) {
        ++idx[k];
        offa += sa[k];
        offb += sb[k];
        if (idx[k] < plan.out[k]) break;
        offa -= sa[k] * idx[k];
        offb -= sb[k] * idx[k];
        idx[k] = 0;
      }
    }
  }
  return plan;
}

// f(a, b) -> y; da(a, b, y, g) and db(a, b, y, g) give local contributions.
template <class F, class DA, class DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(op, a.shape(), b.shape()));
  const auto& av = a.impl()->data;
  const auto& bv = b.impl()->data;
  const std::size_t n = numel_of(plan->out);
  std::vector<double> out(n);
  using Kind = BroadcastPlan::Kind;
  switch (plan->kind) {
    case Kind::same:
      for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i], bv[i]);
      break;
    case Kind::suffix_b:
      for (std::size_t i = 0; i < n; i += plan->nb)
        for (std::size_t j = 0; j < plan->nb; ++j) out[i + j] = f(av[i + j], bv[j]);
      break;
    case Kind::suffix_a:
      for (std::size_t i = 0; i < n; i += plan->na)
        for (std::size_t j = 0; j < plan->na; ++j) out[i + j] = f(av[j], bv[i + j]);
      break;
    case Kind::general:
      for (std::size_t i = 0; i < n; ++i) out[i] = f(av[plan->ia[i]], bv[plan->ib[i]]);
      break;
  }
  return make_result(op, plan->out, std::move(out), {a.impl_ptr(), b.impl_ptr()},
                     [plan, da, db](const TensorImpl& y, std::span<const double> g, Node& node, GradSink& sink) {
                       const auto& av = data_of(node, 0);
                       const auto& bv = data_of(node, 1);
                       double* ga = sink(node.inputs[0]);
                       double* gb = sink(node.inputs[1]);
                       const double* yv = y.data.data();
                       auto body = [&](std::size_t i, std::size_t ia, std::size_t ib) {
                         if (ga) ga[ia] += da(av[ia], bv[ib], yv[i], g[i]);
                         if (gb) gb[ib] += db(av[ia], bv[ib], yv[i], g[i]);
                       };
                       const std::size_t n = g.size();
                       switch (plan->kind) {
                         case Kind::same:
                           for (std::size_t i = 0; i < n; ++i) body(i, i, i);
                           break;
                         case Kind::suffix_b:
                           for (std::size_t i = 0; i < n; i += plan->nb)
                             for (std::size_t j = 0; j < plan->nb; ++j) body(i + j, i + j, j);
                           break;
                         case Kind::suffix_a:
                           for (std::size_t i = 0; i < n; i += plan->na)
                             for (std::size_t j = 0; j < plan->na; ++j) body(i + j, j, i + j);
                           break;
                         case Kind::general:
                           for (std::size_t i = 0; i < n; ++i) body(i, plan->ia[i], plan->ib[i]);
                           break;
                       }
                     });
}

// f(x) -> y; df(x, y) -> dy/dx.
template <class F, class DF>
Tensor unary(const char* op, const Tensor& x, F f, DF df) {
  const auto& xv = x.impl()->data;
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_result(op, x.shape(), std::move(out), {x.impl_ptr()},
                     [df](const TensorImpl& y, std::span<const double> g, Node& node, GradSink& sink) {
                       double* gx = sink(node.inputs[0]);
                       if (!gx) return;
                       const auto& xv = data_of(node, 0);
                       for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv[i], y.data[i]);
                     });
}

// libm tanh is several times slower than exp; exact to a few ulp in absolute terms.
inline double fast_tanh(double u) { return 1.0 - 2.0 / (std::exp(2.0 * u) + 1.0); }

void accumulate(double* dst, std::span<const double> src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double, double g) { return g; }, [](double, double, double, double g) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double, double g) { return g; }, [](double, double, double, double g) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double, double g) { return g * y; }, [](double x, double, double, double g) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double, double g) { return g / y; },
      [](double, double y, double out, double g) { return -g * out / y; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor scale(const Tensor& x, double factor) {
  return unary(
      "scale", x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary(
      "add_scalar", x, [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& x) {
  return unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  return unary(
      "sqrt", x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Tensor pow(const Tensor& x, double exponent) {
  if (exponent == 2.0) {
    return unary(
        "pow", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
  }
  return unary(
      "pow", x, [exponent](double v) { return std::pow(v, exponent); },
      [exponent](double v, double) { return exponent * std::pow(v, exponent - 1.0); });
}

Tensor tanh(const Tensor& x) {
  return unary(
      "tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor gelu(const Tensor& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  return unary(
      "gelu", x,
      [](double v) { return 0.5 * v * (1.0 + fast_tanh(c * (v + k * v * v * v))); },
      [](double v, double) {
        const double t = fast_tanh(c * (v + k * v * v * v));
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * k * v * v);
      });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_result("sum", {1}, {total}, {x.impl_ptr()},
                     [](const TensorImpl&, std::span<const double> g, Node& node, GradSink& sink) {
                       double* gx = sink(node.inputs[0]);
                       if (!gx) return;
                       const std::size_t n = node.inputs[0]->data.size();
                       for (std::size_t i = 0; i < n; ++i) gx[i] += g[0];
                     });
}

Tensor sum(const Tensor& x, std::size_t axis, bool keepdim) {
  if (axis >= x.dim()) throw ShapeError("sum: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t k = 0; k < axis; ++k) outer *= s[k];
  for (std::size_t k = axis + 1; k < s.size(); ++k) inner *= s[k];
  const std::size_t ext = s[axis];
  Shape out_shape = s;
  if (keepdim) {
    out_shape[axis] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    if (out_shape.empty()) out_shape = {1};
  }
  const auto& xv = x.impl()->data;
  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t e = 0; e < ext; ++e) {
      const double* src = &xv[(o * ext + e) * inner];
      double* dst = &out[o * inner];
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  return make_result("sum", out_shape, std::move(out), {x.impl_ptr()},
                     [outer, ext, inner](const TensorImpl&, std::span<const double> g, Node& node, GradSink& sink) {
                       double* gx = sink(node.inputs[0]);
                       if (!gx) return;
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t e = 0; e < ext; ++e) {
                           double* dst = gx + (o * ext + e) * inner;
                           const double* src = g.data() + o * inner;
                           for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
                         }
                     });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor mean(const Tensor& x, std::size_t axis, bool keepdim) {
  if (axis >= x.dim()) throw ShapeError("mean: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  return scale(sum(x, axis, keepdim), 1.0 / static_cast<double>(x.shape()[axis]));
}

// ---------------------------------------------------------------------------
// Contractions

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) shape_fail("matmul", sa, sb, "operands need at least 2 dims");

  if (sb.size() == 2) {
    const std::size_t K = sa.back();
    const std::size_t bk = transpose_b ? sb[1] : sb[0];
    const std::size_t N = transpose_b ? sb[0] : sb[1];
    if (K != bk) shape_fail("matmul", sa, sb, "inner extents differ");
    const std::size_t R = a.numel() / K;
    Shape out_shape = sa;
    out_shape.back() = N;
    std::vector<double> out(R * N);
    {
      ConstMap A(a.impl()->data.data(), static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(K));
      ConstMap B(b.impl()->data.data(), static_cast<Eigen::Index>(sb[0]), static_cast<Eigen::Index>(sb[1]));
      MutMap C(out.data(), static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(N));
      if (transpose_b)
        C.noalias() = A * B.transpose();
      else
        C.noalias() = A * B;
    }
    return make_result(
        "matmul", out_shape, std::move(out), {a.impl_ptr(), b.impl_ptr()},
        [R, K, N, transpose_b](const TensorImpl&, std::span<const double> g, Node& node, GradSink& sink) {
          const auto& bshape = node.inputs[1]->shape;
          ConstMap G(g.data(), static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(N));
          ConstMap A(data_of(node, 0).data(), static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(K));
          ConstMap B(data_of(node, 1).data(), static_cast<Eigen::Index>(bshape[0]),
                     static_cast<Eigen::Index>(bshape[1]));
          if (double* ga = sink(node.inputs[0])) {
            MutMap GA(ga, static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(K));
            if (transpose_b)
              GA.noalias() += G * B;
            else
              GA.noalias() += G * B.transpose();
          }
          if (double* gb = sink(node.inputs[1])) {
            MutMap GB(gb, static_cast<Eigen::Index>(bshape[0]), static_cast<Eigen::Index>(bshape[1]));
            if (transpose_b)
              GB.noalias() += G.transpose() * A;
            else
              GB.noalias() += A.transpose() * G;
          }
        });
  }

  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0]) shape_fail("matmul", sa, sb, "batched operands must be [T,M,K] and [T,K,N]");
  const std::size_t T = sa[0], M = sa[1], K = sa[2];
  const std::size_t bk = transpose_b ? sb[2] : sb[1];
  const std::size_t N = transpose_b ? sb[1] : sb[2];
  if (K != bk) shape_fail("matmul", sa, sb, "inner extents differ");
  std::vector<double> out(T * M * N);
  for (std::size_t t = 0; t < T; ++t) {
    ConstMap A(a.impl()->data.data() + t * M * K, static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(K));
    ConstMap B(b.impl()->data.data() + t * sb[1] * sb[2], static_cast<Eigen::Index>(sb[1]),
               static_cast<Eigen::Index>(sb[2]));
    MutMap C(out.data() + t * M * N, static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(N));
    if (transpose_b)
      C.noalias() = A * B.transpose();
    else
      C.noalias() = A * B;
  }
  return make_result(
      "matmul", {T, M, N}, std::move(out), {a.impl_ptr(), b.impl_ptr()},
      [T, M, K, N, transpose_b](const TensorImpl&, std::span<const double> g, Node& node, GradSink& sink) {
        const auto& bshape = node.inputs[1]->shape;
        const std::size_t b1 = bshape[1], b2 = bshape[2];
        double* ga = sink(node.inputs[0]);
        double* gb = sink(node.inputs[1]);
        for (std::size_t t = 0; t < T; ++t) {
          ConstMap G(g.data() + t * M * N, static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(N));
          ConstMap A(data_of(node, 0).data() + t * M * K, static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(K));
          ConstMap B(data_of(node, 1).data() + t * b1 * b2, static_cast<Eigen::Index>(b1), static_cast<Eigen::Index>(b2));
          if (ga) {
            MutMap GA(ga + t * M * K, static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(K));
            if (transpose_b)
              GA.noalias() += G * B;
            else
              GA.noalias() += G * B.transpose();
          }
          if (gb) {
            MutMap GB(gb + t * b1 * b2, static_cast<Eigen::Index>(b1), static_cast<Eigen::Index>(b2));
            if (transpose_b)
              GB.noalias() += G.transpose() * A;
            else
              GB.noalias() += A.transpose() * G;
          }
        }
      });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const Shape& sx = x.shape();
  const Shape& sw = weight.shape();
  if (sw.size() != 2 || sx.back() != sw[1]) shape_fail("linear", sx, sw, "expected x[..., in] and weight[out, in]");
  const std::size_t in = sw[1], out_f = sw[0];
  if (bias.defined() && (bias.dim() != 1 || bias.size(0) != out_f)) shape_fail("linear", sw, bias.shape(), "bias must be [out]");
  const std::size_t R = x.numel() / in;
  Shape out_shape = sx;
  out_shape.back() = out_f;
  std::vector<double> out(R * out_f);
  {
    ConstMap X(x.impl()->data.data(), static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(in));
    ConstMap W(weight.impl()->data.data(), static_cast<Eigen::Index>(out_f), static_cast<Eigen::Index>(in));
    MutMap Y(out.data(), static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(out_f));
    Y.noalias() = X * W.transpose();
    if (bias.defined()) {
      Eigen::Map<const Eigen::RowVectorXd> bv(bias.impl()->data.data(), static_cast<Eigen::Index>(out_f));
      Y.rowwise() += bv;
    }
  }
  std::vector<std::shared_ptr<TensorImpl>> inputs{x.impl_ptr(), weight.impl_ptr()};
  if (bias.defined()) inputs.push_back(bias.impl_ptr());
  return make_result("linear", out_shape, std::move(out), std::move(inputs),
                     [R, in, out_f](const TensorImpl&, std::span<const double> g, Node& node, GradSink& sink) {
                       ConstMap G(g.data(), static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(out_f));
                       ConstMap X(data_of(node, 0).data(), static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(in));
                       ConstMap W(data_of(node, 1).data(), static_cast<Eigen::Index>(out_f), static_cast<Eigen::Index>(in));
                       if (double* gx = sink(node.inputs[0])) {
                         MutMap GX(gx, static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(in));
                         GX.noalias() += G * W;
                       }
                       if (double* gw = sink(node.inputs[1])) {
                         MutMap GW(gw, static_cast<Eigen::Index>(out_f), static_cast<Eigen::Index>(in));
                         GW.noalias() += G.transpose() * X;
                       }
                       if (node.inputs.size() > 2) {
                         if (double* gb = sink(node.inputs[2])) {
                           const double* g = G.data();
                           for (std::size_t r = 0; r < R; ++r)
                             for (std::size_t c = 0; c < out_f; ++c) gb[c] += g[r * out_f + c];
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Shape manipulation

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) shape_fail("reshape", x.shape(), shape, "element counts differ");
  return make_result("reshape", std::move(shape), x.impl()->data, {x.impl_ptr()},
                     [](const TensorImpl&, std::span<const double> g, Node& node, GradSink& sink) {
                       if (double* gx = sink(node.inputs[0])) accumulate(gx, g);
                     });
}

Tensor transpose(const Tensor& x, std::size_t dim0, std::size_t dim1) {
  const Shape& s = x.shape();
  if (dim0 >= s.size() || dim1 >= s.size()) {
    throw ShapeError("transpose: dims (" + std::to_string(dim0) + "," + std::to_string(dim1) + ") out of range for " +
                     shape_str(s));
  }
  const std::size_t nd = s.size();
  std::vector<std::size_t> in_strides(nd, 1);
  for (std::size_t k = nd - 1; k-- > 0;) in_strides[k] = in_strides[k + 1] * s[k + 1];
  Shape out_shape = s;
  std::swap(out_shape[dim0], out_shape[dim1]);
  std::vector<std::size_t> src_strides = in_strides;
  std::swap(src_strides[dim0], src_strides[dim1]);

  const std::size_t n = x.numel();
  auto src_index = std::make_shared<std::vector<std::size_t>>(n);
  {
    std::vector<std::size_t> idx(nd, 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < n; ++i) {
      (*src_index)[i] = off;
      for (std::size_t k = nd; k-- > 0;) {
        ++idx[k];
        off += src_strides[k];
        if (idx[k] < out_shape[k]) break;
        off -= src_strides[k] * idx[k];
        idx[k] = 0;
      }
    }
  }
  const auto& xv = x.impl()->data;
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[(*src_index)[i]];
  return make_result("transpose", out_shape, std::move(out), {x.impl_ptr()},
                     [src_index](const TensorImpl&, std::span<const double> g, Node& node, GradSink& sink) {
                       double* gx = sink(node.inputs[0]);
                       if (!gx) return;
                       for (std::size_t i = 0; i < g.size(); ++i) gx[(*src_index)[i]] += g[i];
                     });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  if (axis >= s.size() || begin >= end || end > s[axis]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " invalid for " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t k = 0; k < axis; ++k) outer *= s[k];
  for (std::size_t k = axis + 1; k < s.size(); ++k) inner *= s[k];
  const std::size_t ext = s[axis], len = end - begin;
  Shape out_shape = s;
  out_shape[axis] = len;
  const auto& xv = x.impl()->data;
  std::vector<double> out(outer * len * inner);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * ext + begin) * inner), len * inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * len * inner));
  return make_result("slice", out_shape, std::move(out), {x.impl_ptr()},
                     [outer, ext, inner, begin, len](const TensorImpl&, std::span<const double> g, Node& node,
                                                      GradSink& sink) {
                       double* gx = sink(node.inputs[0]);
                       if (!gx) return;
                       for (std::size_t o = 0; o < outer; ++o)
                         accumulate(gx + (o * ext + begin) * inner, g.subspan(o * len * inner, len * inner));
                     });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(s0));
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size()) shape_fail("concat", s0, s, "rank differs");
    for (std::size_t k = 0; k < s.size(); ++k)
      if (k != axis && s[k] != s0[k]) shape_fail("concat", s0, s, "non-concat extents differ");
    total += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t k = 0; k < axis; ++k) outer *= s0[k];
  for (std::size_t k = axis + 1; k < s0.size(); ++k) inner *= s0[k];
  Shape out_shape = s0;
  out_shape[axis] = total;
  std::vector<double> out(outer * total * inner);
  std::vector<std::size_t> exts;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t ext = p.shape()[axis];
    const auto& pv = p.impl()->data;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * ext * inner), ext * inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * total + offset) * inner));
    offset += ext;
    exts.push_back(ext);
    inputs.push_back(p.impl_ptr());
  }
  return make_result("concat", out_shape, std::move(out), std::move(inputs),
                     [outer, inner, total, exts](const TensorImpl&, std::span<const double> g, Node& node,
                                                 GradSink& sink) {
                       std::size_t offset = 0;
                       for (std::size_t p = 0; p < exts.size(); ++p) {
                         if (double* gp = sink(node.inputs[p])) {
                           for (std::size_t o = 0; o < outer; ++o)
                             accumulate(gp + o * exts[p] * inner, g.subspan((o * total + offset) * inner, exts[p] * inner));
                         }
                         offset += exts[p];
                       }
                     });
}

Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids, const Shape& ids_shape) {
  if (table.dim() != 2) throw ShapeError("embedding: table must be [V, d], got " + shape_str(table.shape()));
  if (numel_of(ids_shape) != ids.size()) throw ShapeError("embedding: ids length does not match " + shape_str(ids_shape));
  const std::size_t V = table.size(0), d = table.size(1);
  auto rows = std::make_shared<std::vector<std::size_t>>(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V) {
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " outside vocabulary of size " +
                              std::to_string(V));
    }
    (*rows)[i] = static_cast<std::size_t>(ids[i]);
  }
  Shape out_shape = ids_shape;
  out_shape.push_back(d);
  const auto& tv = table.impl()->data;
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < rows->size(); ++i)
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>((*rows)[i] * d), d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  return make_result("embedding", out_shape, std::move(out), {table.impl_ptr()},
                     [rows, d](const TensorImpl&, std::span<const double> g, Node& node, GradSink& sink) {
                       double* gt = sink(node.inputs[0]);
                       if (!gt) return;
                       for (std::size_t i = 0; i < rows->size(); ++i) accumulate(gt + (*rows)[i] * d, g.subspan(i * d, d));
                     });
}

Tensor index_select_rows(const Tensor& x, std::span<const std::size_t> rows) {
  if (rows.empty()) throw ShapeError("index_select_rows: empty row list for " + shape_str(x.shape()));
  const std::size_t d = x.shape().back();
  const std::size_t n = x.numel() / d;
  auto idx = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  for (auto r : *idx)
    if (r >= n) throw std::out_of_range("index_select_rows: row " + std::to_string(r) + " of " + std::to_string(n));
  const auto& xv = x.impl()->data;
  std::vector<double> out(idx->size() * d);
  for (std::size_t i = 0; i < idx->size(); ++i)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((*idx)[i] * d), d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  return make_result("index_select_rows", {idx->size(), d}, std::move(out), {x.impl_ptr()},
                     [idx, d](const TensorImpl&, std::span<const double> g, Node& node, GradSink& sink) {
                       double* gx = sink(node.inputs[0]);
                       if (!gx) return;
                       for (std::size_t i = 0; i < idx->size(); ++i) accumulate(gx + (*idx)[i] * d, g.subspan(i * d, d));
                     });
}

// ---------------------------------------------------------------------------
// Normalizations and losses

Tensor softmax(const Tensor& x) {
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  const auto& xv = x.impl()->data;
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = &xv[r * d];
    double* dst = &out[r * d];
    const double mx = *std::max_element(src, src + d);
    if (!std::isfinite(mx)) throw std::domain_error("softmax: row " + std::to_string(r) + " has no finite entries");
    double total = 0.0;
    for (std::size_t i = 0; i < d; ++i) total += dst[i] = std::exp(src[i] - mx);
    for (std::size_t i = 0; i < d; ++i) dst[i] /= total;
  }
  return make_result("softmax", x.shape(), std::move(out), {x.impl_ptr()},
                     [rows, d](const TensorImpl& y, std::span<const double> g, Node& node, GradSink& sink) {
                       double* gx = sink(node.inputs[0]);
                       if (!gx) return;
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* yr = &y.data[r * d];
                         const double* gr = g.data() + r * d;
                         double dot = 0.0;
                         for (std::size_t i = 0; i < d; ++i) dot += yr[i] * gr[i];
                         for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += yr[i] * (gr[i] - dot);
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d) shape_fail("layer_norm", x.shape(), gain.shape(), "gain/bias must be [d]");
  const std::size_t rows = x.numel() / d;
  const auto& xv = x.impl()->data;
  const auto& gv = gain.impl()->data;
  const auto& bv = bias.impl()->data;
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = &xv[r * d];
    double mu = 0.0;
    for (std::size_t i = 0; i < d; ++i) mu += src[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t i = 0; i < d; ++i) {
      const double xh = (src[i] - mu) * rs;
      (*xhat)[r * d + i] = xh;
      out[r * d + i] = xh * gv[i] + bv[i];
    }
  }
  return make_result("layer_norm", x.shape(), std::move(out), {x.impl_ptr(), gain.impl_ptr(), bias.impl_ptr()},
                     [rows, d, xhat, rstd](const TensorImpl&, std::span<const double> g, Node& node, GradSink& sink) {
                       const auto& gv = data_of(node, 1);
                       double* gx = sink(node.inputs[0]);
                       double* gg = sink(node.inputs[1]);
                       double* gb = sink(node.inputs[2]);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* gr = g.data() + r * d;
                         const double* xh = xhat->data() + r * d;
                         if (gg)
                           for (std::size_t i = 0; i < d; ++i) gg[i] += gr[i] * xh[i];
                         if (gb)
                           for (std::size_t i = 0; i < d; ++i) gb[i] += gr[i];
                         if (gx) {
                           double m1 = 0.0, m2 = 0.0;
                           for (std::size_t i = 0; i < d; ++i) {
                             const double dxh = gr[i] * gv[i];
                             m1 += dxh;
                             m2 += dxh * xh[i];
                           }
                           m1 /= static_cast<double>(d);
                           m2 /= static_cast<double>(d);
                           for (std::size_t i = 0; i < d; ++i)
                             gx[r * d + i] += (*rstd)[r] * (gr[i] * gv[i] - m1 - xh[i] * m2);
                         }
                       }
                     });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets) {
  if (logits.dim() != 2) throw ShapeError("cross_entropy: logits must be [N, V], got " + shape_str(logits.shape()));
  const std::size_t N = logits.size(0), V = logits.size(1);
  if (targets.size() != N) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " + shape_str(logits.shape()));
  }
  const auto& lv = logits.impl()->data;
  auto probs = std::make_shared<std::vector<double>>(lv.size());
  auto tgt = std::make_shared<std::vector<std::size_t>>(N);
  double total = 0.0;
  for (std::size_t r = 0; r < N; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= V)
      throw std::out_of_range("cross_entropy: target " + std::to_string(targets[r]) + " outside [0," + std::to_string(V) + ")");
    (*tgt)[r] = static_cast<std::size_t>(targets[r]);
    const double* src = &lv[r * V];
    const double mx = *std::max_element(src, src + V);
    double z = 0.0;
    for (std::size_t i = 0; i < V; ++i) z += (*probs)[r * V + i] = std::exp(src[i] - mx);
    for (std::size_t i = 0; i < V; ++i) (*probs)[r * V + i] /= z;
    total += mx + std::log(z) - src[(*tgt)[r]];
  }
  return make_result("cross_entropy", {1}, {total / static_cast<double>(N)}, {logits.impl_ptr()},
                     [N, V, probs, tgt](const TensorImpl&, std::span<const double> g, Node& node, GradSink& sink) {
                       double* gl = sink(node.inputs[0]);
                       if (!gl) return;
                       const double s = g[0] / static_cast<double>(N);
                       for (std::size_t r = 0; r < N; ++r) {
                         for (std::size_t i = 0; i < V; ++i) gl[r * V + i] += s * (*probs)[r * V + i];
                         gl[r * V + (*tgt)[r]] -= s;
                       }
                     });
}

Tensor mse_loss(const Tensor& prediction, const Tensor& target) {
  if (prediction.shape() != target.shape()) shape_fail("mse_loss", prediction.shape(), target.shape());
  const auto& pv = prediction.impl()->data;
  const auto& tv = target.impl()->data;
  double total = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) total += (pv[i] - tv[i]) * (pv[i] - tv[i]);
  const double n = static_cast<double>(pv.size());
  return make_result("mse_loss", {1}, {total / n}, {prediction.impl_ptr(), target.impl_ptr()},
                     [n](const TensorImpl&, std::span<const double> g, Node& node, GradSink& sink) {
                       const auto& pv = data_of(node, 0);
                       const auto& tv = data_of(node, 1);
                       double* gp = sink(node.inputs[0]);
                       double* gt = sink(node.inputs[1]);
                       const double s = 2.0 * g[0] / n;
                       for (std::size_t i = 0; i < pv.size(); ++i) {
                         const double d = s * (pv[i] - tv[i]);
                         if (gp) gp[i] += d;
                         if (gt) gt[i] -= d;
                       }
                     });
}

}  // namespace aegis::ag
