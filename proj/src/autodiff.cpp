#include "m2d/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <unordered_set>

namespace m2d::ad {

namespace {

Value make_node(Tensor val, std::vector<Value> parents,
                std::function<void(Node&)> backward, const char* op) {
  auto n = std::make_shared<Node>();
  n->val = std::move(val);
  n->op = op;
  bool needs = false;
  for (const auto& p : parents) needs = needs || p->requires_grad;
  n->requires_grad = needs;
  if (needs) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward);
  }
  return n;
}

void ensure_grad(Node& n) {
  if (!n.grad.same_shape(n.val)) n.grad = Tensor(n.val.shape());
}

// Walks the broadcasted iteration space of two operands, invoking
// f(off_a, off_b, off_out) for every output element. Fast paths cover the
// two layouts that dominate here: equal shapes and suffix broadcasts
// (bias rows, positional tables, masks).
template <typename F>
void broadcast_walk(const std::vector<int>& sa, const std::vector<int>& sb,
                    const std::vector<int>& so, F&& f) {
  int64_t total = shape_size(so);
  if (sa == sb) {
    for (int64_t i = 0; i < total; ++i) f(i, i, i);
    return;
  }
  auto is_suffix = [](const std::vector<int>& small,
                      const std::vector<int>& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
  };
  if (sa == so && is_suffix(sb, sa)) {
    int64_t block = shape_size(sb);
    for (int64_t i = 0; i < total; ++i) f(i, i % block, i);
    return;
  }
  if (sb == so && is_suffix(sa, sb)) {
    int64_t block = shape_size(sa);
    for (int64_t i = 0; i < total; ++i) f(i % block, i, i);
    return;
  }
  // Generic odometer over the output shape with zero strides on broadcast
  // dimensions.
  size_t rank = so.size();
  std::vector<int64_t> stride_a(rank, 0), stride_b(rank, 0), idx(rank, 0);
  auto fill_strides = [&](const std::vector<int>& s, std::vector<int64_t>& out) {
    int64_t acc = 1;
    size_t off = rank - s.size();
    for (size_t i = s.size(); i-- > 0;) {
      out[off + i] = (s[i] == 1) ? 0 : acc;
      acc *= s[i];
    }
  };
  fill_strides(sa, stride_a);
  fill_strides(sb, stride_b);
  int64_t oa = 0, ob = 0;
  for (int64_t o = 0; o < total; ++o) {
    f(oa, ob, o);
    for (size_t d = rank; d-- > 0;) {
      ++idx[d];
      oa += stride_a[d];
      ob += stride_b[d];
      if (idx[d] < so[d]) break;
      oa -= stride_a[d] * so[d];
      ob -= stride_b[d] * so[d];
      idx[d] = 0;
    }
  }
}

enum class BinOp { kAdd, kSub, kMul, kDiv };

Value binary(const Value& a, const Value& b, BinOp op, const char* name) {
  std::vector<int> so = broadcast_shape(a->shape(), b->shape());
  Tensor out(so);
  const double* pa = a->val.data();
  const double* pb = b->val.data();
  double* po = out.data();
  switch (op) {
    case BinOp::kAdd:
      broadcast_walk(a->shape(), b->shape(), so,
                     [&](int64_t ia, int64_t ib, int64_t io) { po[io] = pa[ia] + pb[ib]; });
      break;
    case BinOp::kSub:
      broadcast_walk(a->shape(), b->shape(), so,
                     [&](int64_t ia, int64_t ib, int64_t io) { po[io] = pa[ia] - pb[ib]; });
      break;
    case BinOp::kMul:
      broadcast_walk(a->shape(), b->shape(), so,
                     [&](int64_t ia, int64_t ib, int64_t io) { po[io] = pa[ia] * pb[ib]; });
      break;
    case BinOp::kDiv:
      broadcast_walk(a->shape(), b->shape(), so,
                     [&](int64_t ia, int64_t ib, int64_t io) { po[io] = pa[ia] / pb[ib]; });
      break;
  }
  auto backward = [a, b, op, so](Node& n) {
    const double* g = n.grad.data();
    const double* pa = a->val.data();
    const double* pb = b->val.data();
    bool ga = a->requires_grad, gb = b->requires_grad;
    if (ga) ensure_grad(*a);
    if (gb) ensure_grad(*b);
    double* da = ga ? a->grad.data() : nullptr;
    double* db = gb ? b->grad.data() : nullptr;
    broadcast_walk(a->shape(), b->shape(), so,
                   [&](int64_t ia, int64_t ib, int64_t io) {
                     switch (op) {
                       case BinOp::kAdd:
                         if (ga) da[ia] += g[io];
                         if (gb) db[ib] += g[io];
                         break;
                       case BinOp::kSub:
                         if (ga) da[ia] += g[io];
                         if (gb) db[ib] -= g[io];
                         break;
                       case BinOp::kMul:
                         if (ga) da[ia] += g[io] * pb[ib];
                         if (gb) db[ib] += g[io] * pa[ia];
                         break;
                       case BinOp::kDiv:
                         if (ga) da[ia] += g[io] / pb[ib];
                         if (gb) db[ib] -= g[io] * pa[ia] / (pb[ib] * pb[ib]);
                         break;
                     }
                   });
  };
  return make_node(std::move(out), {a, b}, backward, name);
}

template <typename Fwd, typename Bwd>
Value unary(const Value& a, Fwd fwd, Bwd bwd, const char* name) {
  Tensor out(a->shape());
  const double* pa = a->val.data();
  double* po = out.data();
  int64_t n = out.size();
  for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
  auto backward = [a, bwd](Node& node) {
    if (!a->requires_grad) return;
    ensure_grad(*a);
    const double* g = node.grad.data();
    const double* x = a->val.data();
    const double* y = node.val.data();
    double* da = a->grad.data();
    int64_t n = node.val.size();
    for (int64_t i = 0; i < n; ++i) da[i] += g[i] * bwd(x[i], y[i]);
  };
  return make_node(std::move(out), {a}, backward, name);
}

}  // namespace

Value leaf(Tensor v) {
  auto n = std::make_shared<Node>();
  n->val = std::move(v);
  n->requires_grad = true;
  return n;
}

Value constant(Tensor v) {
  auto n = std::make_shared<Node>();
  n->val = std::move(v);
  n->op = "const";
  return n;
}

Value add(const Value& a, const Value& b) { return binary(a, b, BinOp::kAdd, "add"); }
Value sub(const Value& a, const Value& b) { return binary(a, b, BinOp::kSub, "sub"); }
Value mul(const Value& a, const Value& b) { return binary(a, b, BinOp::kMul, "mul"); }
Value divide(const Value& a, const Value& b) { return binary(a, b, BinOp::kDiv, "div"); }

Value add_scalar(const Value& a, double s) {
  return unary(
      a, [s](double x) { return x + s; },
      [](double, double) { return 1.0; }, "add_scalar");
}

Value mul_scalar(const Value& a, double s) {
  return unary(
      a, [s](double x) { return x * s; },
      [s](double, double) { return s; }, "mul_scalar");
}

Value tanh(const Value& a) {
  return unary(
      a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; }, "tanh");
}

Value relu(const Value& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; }, "relu");
}

Value exp(const Value& a) {
  return unary(
      a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; }, "exp");
}

Value log(const Value& a) {
  return unary(
      a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; }, "log");
}

Value square(const Value& a) {
  return unary(
      a, [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; }, "square");
}

Value clamp(const Value& a, double lo, double hi) {
  check_arg(lo <= hi, "clamp: lo > hi");
  return unary(
      a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; },
      "clamp");
}

Value matmul(const Value& a, const Value& b) {
  const auto& sa = a->shape();
  const auto& sb = b->shape();
  int ra = a->val.rank(), rb = b->val.rank();
  check_shape((ra == 2 && rb == 2) || (ra == 3 && rb == 3) || (ra == 3 && rb == 2),
              "matmul: unsupported ranks ", shape_str(sa), " x ", shape_str(sb));
  if (ra == 2 && rb == 2) {
    int m = sa[0], k = sa[1], n = sb[1];
    check_shape(k == sb[0], "matmul: inner dims ", shape_str(sa), " x ", shape_str(sb));
    Tensor out({m, n});
    gemm_nn(a->val.data(), b->val.data(), out.data(), m, k, n, false);
    auto backward = [a, b, m, k, n](Node& node) {
      if (a->requires_grad) {
        ensure_grad(*a);
        gemm_nt(node.grad.data(), b->val.data(), a->grad.data(), m, n, k, true);
      }
      if (b->requires_grad) {
        ensure_grad(*b);
        gemm_tn(a->val.data(), node.grad.data(), b->grad.data(), k, m, n, true);
      }
    };
    return make_node(std::move(out), {a, b}, backward, "matmul");
  }
  if (ra == 3 && rb == 2) {
    // [B x m x k] @ [k x n]: flatten the batch into rows.
    int bsz = sa[0], m = sa[1], k = sa[2], n = sb[1];
    check_shape(k == sb[0], "matmul: inner dims ", shape_str(sa), " x ", shape_str(sb));
    Tensor out({bsz, m, n});
    gemm_nn(a->val.data(), b->val.data(), out.data(), bsz * m, k, n, false);
    auto backward = [a, b, bsz, m, k, n](Node& node) {
      if (a->requires_grad) {
        ensure_grad(*a);
        gemm_nt(node.grad.data(), b->val.data(), a->grad.data(), bsz * m, n, k, true);
      }
      if (b->requires_grad) {
        ensure_grad(*b);
        gemm_tn(a->val.data(), node.grad.data(), b->grad.data(), k, bsz * m, n, true);
      }
    };
    return make_node(std::move(out), {a, b}, backward, "matmul");
  }
  int bsz = sa[0], m = sa[1], k = sa[2], n = sb[2];
  check_shape(sb[0] == bsz && sb[1] == k, "matmul: batched dims ", shape_str(sa),
              " x ", shape_str(sb));
  Tensor out({bsz, m, n});
  for (int i = 0; i < bsz; ++i) {
    gemm_nn(a->val.data() + static_cast<int64_t>(i) * m * k,
            b->val.data() + static_cast<int64_t>(i) * k * n,
            out.data() + static_cast<int64_t>(i) * m * n, m, k, n, false);
  }
  auto backward = [a, b, bsz, m, k, n](Node& node) {
    for (int i = 0; i < bsz; ++i) {
      const double* ga = node.grad.data() + static_cast<int64_t>(i) * m * n;
      if (a->requires_grad) {
        ensure_grad(*a);
        gemm_nt(ga, b->val.data() + static_cast<int64_t>(i) * k * n,
                a->grad.data() + static_cast<int64_t>(i) * m * k, m, n, k, true);
      }
      if (b->requires_grad) {
        ensure_grad(*b);
        gemm_tn(a->val.data() + static_cast<int64_t>(i) * m * k, ga,
                b->grad.data() + static_cast<int64_t>(i) * k * n, k, m, n, true);
      }
    }
  };
  return make_node(std::move(out), {a, b}, backward, "matmul");
}

Value transpose_last(const Value& a) {
  const auto& s = a->shape();
  check_shape(a->val.rank() >= 2, "transpose_last: rank < 2");
  int m = s[s.size() - 2], n = s.back();
  int64_t batch = a->val.size() / (static_cast<int64_t>(m) * n);
  std::vector<int> so = s;
  std::swap(so[so.size() - 2], so.back());
  Tensor out(so);
  for (int64_t bi = 0; bi < batch; ++bi) {
    const double* src = a->val.data() + bi * m * n;
    double* dst = out.data() + bi * m * n;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) dst[static_cast<int64_t>(j) * m + i] = src[static_cast<int64_t>(i) * n + j];
  }
  auto backward = [a, batch, m, n](Node& node) {
    if (!a->requires_grad) return;
    ensure_grad(*a);
    for (int64_t bi = 0; bi < batch; ++bi) {
      const double* g = node.grad.data() + bi * m * n;
      double* da = a->grad.data() + bi * m * n;
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < m; ++i) da[static_cast<int64_t>(i) * n + j] += g[static_cast<int64_t>(j) * m + i];
    }
  };
  return make_node(std::move(out), {a}, backward, "transpose");
}

Value reshape(const Value& a, std::vector<int> shape) {
  check_shape(shape_size(shape) == a->val.size(), "reshape: size mismatch ",
              shape_str(a->shape()), " -> ", shape_str(shape));
  Tensor out(std::move(shape));
  std::copy(a->val.data(), a->val.data() + a->val.size(), out.data());
  auto backward = [a](Node& node) {
    if (!a->requires_grad) return;
    ensure_grad(*a);
    double* da = a->grad.data();
    const double* g = node.grad.data();
    int64_t n = node.val.size();
    for (int64_t i = 0; i < n; ++i) da[i] += g[i];
  };
  return make_node(std::move(out), {a}, backward, "reshape");
}

namespace {
std::vector<int> drop_last_axis(const std::vector<int>& s) {
  std::vector<int> out(s.begin(), s.end() - 1);
  if (out.empty()) out.push_back(1);
  return out;
}
}  // namespace

Value sum_last(const Value& a) {
  const auto& s = a->shape();
  check_shape(!s.empty() && s.back() >= 1, "sum_last: empty last axis");
  int c = s.back();
  int64_t rows = a->val.size() / c;
  Tensor out(drop_last_axis(s));
  for (int64_t r = 0; r < rows; ++r) {
    const double* src = a->val.data() + r * c;
    double acc = 0.0;
    for (int j = 0; j < c; ++j) acc += src[j];
    out[r] = acc;
  }
  auto backward = [a, rows, c](Node& node) {
    if (!a->requires_grad) return;
    ensure_grad(*a);
    for (int64_t r = 0; r < rows; ++r) {
      double g = node.grad[r];
      double* da = a->grad.data() + r * c;
      for (int j = 0; j < c; ++j) da[j] += g;
    }
  };
  return make_node(std::move(out), {a}, backward, "sum_last");
}

Value sum_all(const Value& a) {
  double acc = 0.0;
  const double* p = a->val.data();
  int64_t n = a->val.size();
  for (int64_t i = 0; i < n; ++i) acc += p[i];
  Tensor out = Tensor::scalar(acc);
  auto backward = [a, n](Node& node) {
    if (!a->requires_grad) return;
    ensure_grad(*a);
    double g = node.grad[0];
    double* da = a->grad.data();
    for (int64_t i = 0; i < n; ++i) da[i] += g;
  };
  return make_node(std::move(out), {a}, backward, "sum_all");
}

Value mean_all(const Value& a) {
  int64_t n = a->val.size();
  check_shape(n >= 1, "mean_all: empty tensor");
  return mul_scalar(sum_all(a), 1.0 / static_cast<double>(n));
}

Value log_sum_exp(const Value& a) {
  const auto& s = a->shape();
  check_shape(!s.empty() && s.back() >= 1, "log_sum_exp: empty last axis");
  int c = s.back();
  int64_t rows = a->val.size() / c;
  Tensor out(drop_last_axis(s));
  for (int64_t r = 0; r < rows; ++r) {
    const double* src = a->val.data() + r * c;
    double m = src[0];
    for (int j = 1; j < c; ++j) m = std::max(m, src[j]);
    double acc = 0.0;
    for (int j = 0; j < c; ++j) acc += std::exp(src[j] - m);
    out[r] = m + std::log(acc);
  }
  auto backward = [a, rows, c](Node& node) {
    if (!a->requires_grad) return;
    ensure_grad(*a);
    for (int64_t r = 0; r < rows; ++r) {
      double g = node.grad[r];
      double lse = node.val[r];
      const double* src = a->val.data() + r * c;
      double* da = a->grad.data() + r * c;
      for (int j = 0; j < c; ++j) da[j] += g * std::exp(src[j] - lse);
    }
  };
  return make_node(std::move(out), {a}, backward, "log_sum_exp");
}

Value softmax(const Value& a) {
  const auto& s = a->shape();
  check_shape(!s.empty() && s.back() >= 1, "softmax: empty last axis");
  int c = s.back();
  int64_t rows = a->val.size() / c;
  Tensor out(s);
  for (int64_t r = 0; r < rows; ++r) {
    const double* src = a->val.data() + r * c;
    double* dst = out.data() + r * c;
    double m = src[0];
    for (int j = 1; j < c; ++j) m = std::max(m, src[j]);
    double acc = 0.0;
    for (int j = 0; j < c; ++j) {
      dst[j] = std::exp(src[j] - m);
      acc += dst[j];
    }
    double inv = 1.0 / acc;
    for (int j = 0; j < c; ++j) dst[j] *= inv;
  }
  auto backward = [a, rows, c](Node& node) {
    if (!a->requires_grad) return;
    ensure_grad(*a);
    for (int64_t r = 0; r < rows; ++r) {
      const double* g = node.grad.data() + r * c;
      const double* y = node.val.data() + r * c;
      double* da = a->grad.data() + r * c;
      double dot = 0.0;
      for (int j = 0; j < c; ++j) dot += g[j] * y[j];
      for (int j = 0; j < c; ++j) da[j] += (g[j] - dot) * y[j];
    }
  };
  return make_node(std::move(out), {a}, backward, "softmax");
}

Value concat(const std::vector<Value>& parts, int axis) {
  check_arg(!parts.empty(), "concat: no inputs");
  const auto& s0 = parts[0]->shape();
  int rank = parts[0]->val.rank();
  check_shape(axis >= 0 && axis < rank, "concat: axis out of range");
  std::vector<int> so = s0;
  so[axis] = 0;
  for (const auto& p : parts) {
    check_shape(p->val.rank() == rank, "concat: rank mismatch");
    for (int d = 0; d < rank; ++d)
      check_shape(d == axis || p->shape()[d] == s0[d], "concat: shape mismatch at dim ", d);
    so[axis] += p->shape()[axis];
  }
  int64_t inner = 1;
  for (int d = axis + 1; d < rank; ++d) inner *= s0[d];
  int64_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= s0[d];
  Tensor out(so);
  int64_t out_row = static_cast<int64_t>(so[axis]) * inner;
  int64_t off = 0;
  for (const auto& p : parts) {
    int64_t block = static_cast<int64_t>(p->shape()[axis]) * inner;
    for (int64_t o = 0; o < outer; ++o)
      std::copy(p->val.data() + o * block, p->val.data() + (o + 1) * block,
                out.data() + o * out_row + off);
    off += block;
  }
  auto backward = [parts, outer, out_row](Node& node) {
    int64_t off = 0;
    for (const auto& p : parts) {
      int64_t pblock = p->val.size() / outer;
      if (p->requires_grad) {
        ensure_grad(*p);
        for (int64_t o = 0; o < outer; ++o) {
          const double* g = node.grad.data() + o * out_row + off;
          double* dp = p->grad.data() + o * pblock;
          for (int64_t i = 0; i < pblock; ++i) dp[i] += g[i];
        }
      }
      off += pblock;
    }
  };
  std::vector<Value> parents = parts;
  return make_node(std::move(out), std::move(parents), backward, "concat");
}

Value slice(const Value& a, int axis, int start, int len) {
  const auto& s = a->shape();
  int rank = a->val.rank();
  check_shape(axis >= 0 && axis < rank, "slice: axis out of range");
  check_shape(start >= 0 && len >= 1 && start + len <= s[axis],
              "slice: range [", start, ",", start + len, ") out of bounds for dim ",
              s[axis]);
  std::vector<int> so = s;
  so[axis] = len;
  int64_t inner = 1;
  for (int d = axis + 1; d < rank; ++d) inner *= s[d];
  int64_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= s[d];
  int64_t src_row = static_cast<int64_t>(s[axis]) * inner;
  int64_t dst_row = static_cast<int64_t>(len) * inner;
  Tensor out(so);
  for (int64_t o = 0; o < outer; ++o)
    std::copy(a->val.data() + o * src_row + start * inner,
              a->val.data() + o * src_row + (start + len) * inner,
              out.data() + o * dst_row);
  auto backward = [a, outer, inner, src_row, dst_row, start](Node& node) {
    if (!a->requires_grad) return;
    ensure_grad(*a);
    for (int64_t o = 0; o < outer; ++o) {
      const double* g = node.grad.data() + o * dst_row;
      double* da = a->grad.data() + o * src_row + start * inner;
      for (int64_t i = 0; i < dst_row; ++i) da[i] += g[i];
    }
  };
  return make_node(std::move(out), {a}, backward, "slice");
}

Value gather_axis1(const Value& a, const std::vector<int>& idx, int s) {
  const auto& sh = a->shape();
  check_shape(a->val.rank() == 3, "gather_axis1: expected rank 3, got ",
              shape_str(sh));
  int bsz = sh[0], c = sh[1], d = sh[2];
  check_arg(static_cast<int>(idx.size()) == bsz * s,
            "gather_axis1: index count mismatch");
  for (int v : idx) check_arg(v >= 0 && v < c, "gather_axis1: index out of range");
  Tensor out({bsz, s, d});
  for (int b = 0; b < bsz; ++b)
    for (int j = 0; j < s; ++j) {
      const double* src = a->val.data() + (static_cast<int64_t>(b) * c + idx[static_cast<size_t>(b) * s + j]) * d;
      double* dst = out.data() + (static_cast<int64_t>(b) * s + j) * d;
      std::copy(src, src + d, dst);
    }
  auto backward = [a, idx, bsz, c, d, s](Node& node) {
    if (!a->requires_grad) return;
    ensure_grad(*a);
    for (int b = 0; b < bsz; ++b)
      for (int j = 0; j < s; ++j) {
        const double* g = node.grad.data() + (static_cast<int64_t>(b) * s + j) * d;
        double* da = a->grad.data() + (static_cast<int64_t>(b) * c + idx[static_cast<size_t>(b) * s + j]) * d;
        for (int i = 0; i < d; ++i) da[i] += g[i];
      }
  };
  return make_node(std::move(out), {a}, backward, "gather_axis1");
}

Value dense(const Value& x, const Value& w, const Value& b, Activation act) {
  check_shape(w->val.rank() == 2, "dense: weight must be 2-D, got ",
              shape_str(w->shape()));
  check_shape(b->val.rank() == 1 && b->shape()[0] == w->shape()[1],
              "dense: bias shape ", shape_str(b->shape()),
              " does not match weight ", shape_str(w->shape()));
  check_shape(x->shape().back() == w->shape()[0], "dense: input dim ",
              x->shape().back(), " != weight rows ", w->shape()[0]);
  Value y = add(matmul(x, w), b);
  switch (act) {
    case Activation::kIdentity:
      return y;
    case Activation::kTanh:
      return tanh(y);
    case Activation::kRelu:
      return relu(y);
  }
  check_arg(false, "dense: unsupported activation");
  return y;
}

Value causal_self_attention(const Value& tokens, const AttentionParams& p,
                            int max_context) {
  const auto& s = tokens->shape();
  check_shape(tokens->val.rank() == 3, "attention: tokens must be [B x T x D]");
  int t = s[1], d = s[2];
  check_arg(t <= max_context, "attention: sequence length ", t,
            " exceeds max context ", max_context);
  Value q = add(matmul(tokens, p.wq), p.bq);
  Value k = add(matmul(tokens, p.wk), p.bk);
  Value v = add(matmul(tokens, p.wv), p.bv);
  Value scores = mul_scalar(matmul(q, transpose_last(k)), 1.0 / std::sqrt(d));
  // Large negative bias above the diagonal; exp() underflows to exactly 0.
  Tensor mask({t, t});
  for (int i = 0; i < t; ++i)
    for (int j = i + 1; j < t; ++j) mask[static_cast<int64_t>(i) * t + j] = -1e30;
  Value att = softmax(add(scores, constant(std::move(mask))));
  Value ctx = matmul(att, v);
  Value out = add(matmul(ctx, p.wo), p.bo);
  return add(tokens, out);
}

std::vector<Tensor> backprop(const Value& loss, const std::vector<Value>& params) {
  check_arg(loss != nullptr, "backprop: null loss");
  check_arg(loss->val.size() == 1, "backprop: loss must be scalar, got ",
            shape_str(loss->shape()));
  check_numeric(std::isfinite(loss->val[0]), "backprop: non-finite loss");

  // Iterative post-order over grad-requiring nodes.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  if (loss->requires_grad) {
    stack.emplace_back(loss.get(), 0);
    seen.insert(loss.get());
  }
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second)
        stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order) {
    ensure_grad(*n);
    std::fill(n->grad.data(), n->grad.data() + n->grad.size(), 0.0);
  }
  if (loss->requires_grad) loss->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (const auto& p : params) {
    if (seen.count(p.get()))
      grads.push_back(p->grad);
    else
      grads.push_back(Tensor(p->shape()));
  }
  return grads;
}

double finite_diff_check(const std::function<Value()>& f,
                         const std::vector<Value>& params, double eps) {
  check_arg(eps > 0.0, "finite_diff_check: eps must be positive");
  Value loss = f();
  check_arg(loss->val.size() == 1, "finite_diff_check: f must return a scalar");
  check_numeric(std::isfinite(loss->val[0]), "finite_diff_check: non-finite f");
  std::vector<Tensor> grads = backprop(loss, params);

  auto eval = [&]() {
    double v = f()->val.item();
    check_numeric(std::isfinite(v), "finite_diff_check: non-finite f");
    return v;
  };
  double max_rel = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& val = params[pi]->val;
    for (int64_t i = 0; i < val.size(); ++i) {
      double saved = val[i];
      val[i] = saved + eps;
      double fp = eval();
      val[i] = saved - eps;
      double fm = eval();
      val[i] = saved;
      double numeric = (fp - fm) / (2.0 * eps);
      double analytic = grads[pi][i];
      double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
      max_rel = std::max(max_rel, std::fabs(analytic - numeric) / denom);
    }
  }
  return max_rel;
}

}  // namespace m2d::ad
