#include "sctx/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace sctx {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

bool is_suffix(const Shape& whole, const Shape& tail) {
  if (tail.size() > whole.size()) return false;
  return std::equal(tail.rbegin(), tail.rend(), whole.rbegin());
}

// Right operand must be a suffix of the left one or a single element.
void check_broadcast(const Shape& a, const Shape& b, const char* op) {
  if (shape_size(b) == 1 || is_suffix(a, b)) return;
  throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(b) + " onto " + shape_str(a));
}

std::size_t leading(const Shape& s, std::size_t trailing_axes) {
  std::size_t n = 1;
  for (std::size_t i = 0; i + trailing_axes < s.size(); ++i) n *= s[i];
  return n;
}

std::size_t prod(const Shape& s, std::size_t from, std::size_t to) {
  std::size_t n = 1;
  for (std::size_t i = from; i < to; ++i) n *= s[i];
  return n;
}

template <typename T>
void accumulate_reduced(Tensor<T>& dst, const std::vector<T>& src) {
  // dst is broadcast over src: fold src back onto dst by index modulo.
  auto& d = dst.storage();
  const std::size_t m = d.size();
  for (std::size_t i = 0; i < src.size(); ++i) d[i % m] += src[i];
}

std::uint64_t hash_bits(const std::vector<std::uint8_t>& bits) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bits) h = (h ^ b) * 0x100000001b3ULL;
  return h;
}

}  // namespace

// Below this many multiply-adds the packed GEMM path costs more than it saves.
constexpr std::size_t kSmallProduct = 16384;

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool transpose_b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.empty()) throw DimensionError("matmul: left operand needs rank >= 1");
  if (bs.size() != 2) throw DimensionError("matmul: right operand must be a matrix, got " + shape_str(bs));
  const std::size_t k = as.back();
  const std::size_t bk = transpose_b ? bs[1] : bs[0];
  const std::size_t n = transpose_b ? bs[0] : bs[1];
  if (k != bk) {
    throw DimensionError("matmul: inner extents differ, " + shape_str(as) + " x " + shape_str(bs) +
                         (transpose_b ? "^T" : ""));
  }
  const std::size_t m = a.value().size() / k;
  Shape out_shape = as;
  out_shape.back() = n;
  Tensor<T> out(out_shape);
  ConstMapMat<T> A(a.value().ptr(), m, k);
  MapMat<T> C(out.ptr(), m, n);
  const bool small = m * k * n <= kSmallProduct;
  if (transpose_b) {
    ConstMapMat<T> B(b.value().ptr(), n, k);
    if (small) C.noalias() = A.lazyProduct(B.transpose()); else C.noalias() = A * B.transpose();
  } else {
    ConstMapMat<T> B(b.value().ptr(), k, n);
    if (small) C.noalias() = A.lazyProduct(B); else C.noalias() = A * B;
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, m, k, n, transpose_b, small](Tape<T>& t, std::size_t self) {
    ConstMapMat<T> G(t.grad(self).ptr(), m, n);
    ConstMapMat<T> A(t.value(ia).ptr(), m, k);
    if (t.requires_grad(ia)) {
      MapMat<T> dA(t.grad(ia).ptr(), m, k);
      if (transpose_b) {
        ConstMapMat<T> B(t.value(ib).ptr(), n, k);
        if (small) dA.noalias() += G.lazyProduct(B); else dA.noalias() += G * B;
      } else {
        ConstMapMat<T> B(t.value(ib).ptr(), k, n);
        if (small) dA.noalias() += G.lazyProduct(B.transpose()); else dA.noalias() += G * B.transpose();
      }
    }
    if (t.requires_grad(ib)) {
      if (transpose_b) {
        MapMat<T> dB(t.grad(ib).ptr(), n, k);
        if (small) dB.noalias() += G.transpose().lazyProduct(A); else dB.noalias() += G.transpose() * A;
      } else {
        MapMat<T> dB(t.grad(ib).ptr(), k, n);
        if (small) dB.noalias() += A.transpose().lazyProduct(G); else dB.noalias() += A.transpose() * G;
      }
    }
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check_broadcast(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  const auto& bv = b.value().storage();
  auto& o = out.storage();
  const std::size_t m = bv.size();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i % m];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self).storage();
    if (t.requires_grad(ia)) {
      auto& da = t.grad(ia).storage();
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
    }
    if (t.requires_grad(ib)) accumulate_reduced(t.grad(ib), g);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  check_broadcast(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  const auto& bv = b.value().storage();
  auto& o = out.storage();
  const std::size_t m = bv.size();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i % m];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self).storage();
    if (t.requires_grad(ia)) {
      auto& da = t.grad(ia).storage();
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      std::vector<T> neg(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
      accumulate_reduced(t.grad(ib), neg);
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check_broadcast(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value().storage();
  auto& o = out.storage();
  const std::size_t m = bv.size();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i % m];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self).storage();
    const auto& av = t.value(ia).storage();
    const auto& bv = t.value(ib).storage();
    const std::size_t m = bv.size();
    if (t.requires_grad(ia)) {
      auto& da = t.grad(ia).storage();
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv[i % m];
    }
    if (t.requires_grad(ib)) {
      std::vector<T> prod(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) prod[i] = g[i] * av[i];
      accumulate_reduced(t.grad(ib), prod);
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v *= factor;
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, factor](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self).storage();
    auto& da = t.grad(ia).storage();
    for (std::size_t i = 0; i < g.size(); ++i) da[i] += factor * g[i];
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.storage()) v = v > T(0) ? v : T(0);
  Tape<T>& tape = x.tape();
  if (tape.tracking_branches()) {
    std::vector<std::uint8_t> bits(out.size());
    for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = x.value()[i] > T(0);
    tape.note_branch(hash_bits(bits));
  }
  const std::size_t ix = x.id();
  return tape.record(std::move(out), {x}, [ix](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self).storage();
    const auto& xv = t.value(ix).storage();
    auto& dx = t.grad(ix).storage();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > T(0)) dx[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.storage()) v = T(1) / (T(1) + std::exp(-v));
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self).storage();
    const auto& y = t.value(self).storage();
    auto& dx = t.grad(ix).storage();
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * y[i] * (T(1) - y[i]);
  });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.storage()) v = std::tanh(v);
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self).storage();
    const auto& y = t.value(self).storage();
    auto& dx = t.grad(ix).storage();
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * (T(1) - y[i] * y[i]);
  });
}

template <typename T>
Var<T> softmax(const Var<T>& x, const BoolTensor* mask) {
  const Shape& s = x.shape();
  const std::size_t n = s.back();
  const std::size_t rows = x.value().size() / n;
  if (mask && !(mask->shape() == s || is_suffix(s, mask->shape()))) {
    throw DimensionError("softmax: mask " + shape_str(mask->shape()) + " does not fit " + shape_str(s));
  }
  Tensor<T> out(s);
  const auto& xv = x.value().storage();
  auto& o = out.storage();
  const std::size_t msize = mask ? mask->size() : 1;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * n;
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && !(*mask)[(base + j) % msize]) continue;
      any = true;
      mx = std::max(mx, xv[base + j]);
    }
    if (!any) throw DegenerateMaskError("softmax: every position of a row is masked");
    T total = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && !(*mask)[(base + j) % msize]) {
        o[base + j] = 0;
        continue;
      }
      o[base + j] = std::exp(xv[base + j] - mx);
      total += o[base + j];
    }
    for (std::size_t j = 0; j < n; ++j) o[base + j] /= total;
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, n, rows](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self).storage();
    const auto& y = t.value(self).storage();
    auto& dx = t.grad(ix).storage();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * n;
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += g[base + j] * y[base + j];
      for (std::size_t j = 0; j < n; ++j) dx[base + j] += y[base + j] * (g[base + j] - dot);
    }
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const std::size_t d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layer_norm: affine parameters must be [" + std::to_string(d) + "]");
  }
  const std::size_t rows = x.value().size() / d;
  auto xhat = std::make_shared<std::vector<T>>(x.value().size());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  Tensor<T> out(x.shape());
  const auto& xv = x.value().storage();
  const auto& gv = gamma.value().storage();
  const auto& bv = beta.value().storage();
  auto& o = out.storage();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += xv[base + j];
    mean /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xv[base + j] - mean) * (xv[base + j] - mean);
    var /= T(d);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (xv[base + j] - mean) * is;
      (*xhat)[base + j] = h;
      o[base + j] = gv[j] * h + bv[j];
    }
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().record(std::move(out), {x, gamma, beta},
                         [ix, ig, ib, d, rows, xhat, inv_std](Tape<T>& t, std::size_t self) {
                           const auto& g = t.grad(self).storage();
                           const auto& gv = t.value(ig).storage();
                           if (t.requires_grad(ig)) {
                             auto& dg = t.grad(ig).storage();
                             for (std::size_t i = 0; i < g.size(); ++i) dg[i % d] += g[i] * (*xhat)[i];
                           }
                           if (t.requires_grad(ib)) {
                             auto& db = t.grad(ib).storage();
                             for (std::size_t i = 0; i < g.size(); ++i) db[i % d] += g[i];
                           }
                           if (!t.requires_grad(ix)) return;
                           auto& dx = t.grad(ix).storage();
                           for (std::size_t r = 0; r < rows; ++r) {
                             const std::size_t base = r * d;
                             T mean_dh = 0, mean_dh_h = 0;
                             for (std::size_t j = 0; j < d; ++j) {
                               const T dh = g[base + j] * gv[j];
                               mean_dh += dh;
                               mean_dh_h += dh * (*xhat)[base + j];
                             }
                             mean_dh /= T(d);
                             mean_dh_h /= T(d);
                             for (std::size_t j = 0; j < d; ++j) {
                               const T dh = g[base + j] * gv[j];
                               dx[base + j] += (*inv_std)[r] * (dh - mean_dh - (*xhat)[base + j] * mean_dh_h);
                             }
                           }
                         });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no operands");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) {
        throw DimensionError("concat: " + shape_str(s) + " vs " + shape_str(first) + " off axis " +
                             std::to_string(axis));
      }
    }
    out_shape[axis] += s[axis];
  }
  const std::size_t outer = prod(first, 0, axis);
  const std::size_t inner = prod(first, axis + 1, first.size());
  const std::size_t out_row = out_shape[axis] * inner;
  Tensor<T> out(out_shape);
  std::vector<std::size_t> ids, widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[axis] * inner;
    const auto& src = p.value().storage();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.begin() + o * w, w, out.storage().begin() + o * out_row + offset);
    }
    ids.push_back(p.id());
    widths.push_back(w);
    offset += w;
  }
  return parts[0].tape().record(std::move(out), parts, [ids, widths, outer, out_row](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self).storage();
    std::size_t off = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      const std::size_t w = widths[p];
      if (t.requires_grad(ids[p])) {
        auto& d = t.grad(ids[p]).storage();
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t i = 0; i < w; ++i) d[o * w + i] += g[o * out_row + off + i];
        }
      }
      off += w;
    }
  });
}

template <typename T>
Var<T> concat_last_dim(const Var<T>& a, const Var<T>& b) {
  return concat<T>({a, b}, a.shape().size() - 1);
}

template <typename T>
Var<T> narrow(const Var<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& s = x.shape();
  if (axis >= s.size() || length == 0 || start + length > s[axis]) {
    throw DimensionError("narrow: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") invalid for axis " + std::to_string(axis) + " of " + shape_str(s));
  }
  const std::size_t outer = prod(s, 0, axis);
  const std::size_t inner = prod(s, axis + 1, s.size());
  const std::size_t src_row = s[axis] * inner;
  const std::size_t w = length * inner;
  const std::size_t off = start * inner;
  Shape out_shape = s;
  out_shape[axis] = length;
  Tensor<T> out(out_shape);
  const auto& src = x.value().storage();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(src.begin() + o * src_row + off, w, out.storage().begin() + o * w);
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, outer, src_row, w, off](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self).storage();
    auto& d = t.grad(ix).storage();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < w; ++i) d[o * src_row + off + i] += g[o * w + i];
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self).storage();
    auto& d = t.grad(ix).storage();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

template <typename T>
Var<T> expand(const Var<T>& x, std::size_t axis, std::size_t n) {
  const Shape& s = x.shape();
  if (axis > s.size()) throw DimensionError("expand: axis out of range");
  if (n == 0) throw DimensionError("expand: extent must be positive");
  const std::size_t outer = prod(s, 0, axis);
  const std::size_t inner = prod(s, axis, s.size());
  Shape out_shape = s;
  out_shape.insert(out_shape.begin() + static_cast<std::ptrdiff_t>(axis), n);
  Tensor<T> out(out_shape);
  const auto& src = x.value().storage();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t r = 0; r < n; ++r) {
      std::copy_n(src.begin() + o * inner, inner, out.storage().begin() + (o * n + r) * inner);
    }
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, outer, inner, n](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self).storage();
    auto& d = t.grad(ix).storage();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t i = 0; i < inner; ++i) d[o * inner + i] += g[(o * n + r) * inner + i];
      }
    }
  });
}

template <typename T>
Var<T> index_select(const Var<T>& x, const std::vector<std::size_t>& indices) {
  const Shape& s = x.shape();
  if (indices.empty()) throw DimensionError("index_select: no indices");
  const std::size_t inner = x.value().size() / s[0];
  for (auto i : indices) {
    if (i >= s[0]) throw IndexError("index_select: index " + std::to_string(i) + " out of range");
  }
  Shape out_shape = s;
  out_shape[0] = indices.size();
  Tensor<T> out(out_shape);
  const auto& src = x.value().storage();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    std::copy_n(src.begin() + indices[r] * inner, inner, out.storage().begin() + r * inner);
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, indices, inner](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self).storage();
    auto& d = t.grad(ix).storage();
    for (std::size_t r = 0; r < indices.size(); ++r) {
      for (std::size_t i = 0; i < inner; ++i) d[indices[r] * inner + i] += g[r * inner + i];
    }
  });
}

template <typename T>
Var<T> embedding(const Var<T>& table, const IdTensor& ids) {
  const Shape& ts = table.shape();
  if (ts.size() != 2) throw DimensionError("embedding: table must be [V, d]");
  const std::size_t vocab = ts[0], d = ts[1];
  for (auto id : ids.storage()) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw IndexError("embedding: id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab));
    }
  }
  Shape out_shape = ids.shape();
  out_shape.push_back(d);
  Tensor<T> out(out_shape);
  const auto& src = table.value().storage();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(src.begin() + static_cast<std::size_t>(ids[i]) * d, d, out.storage().begin() + i * d);
  }
  const std::size_t it = table.id();
  return table.tape().record(std::move(out), {table}, [it, ids, d](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self).storage();
    auto& dt = t.grad(it).storage();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const std::size_t row = static_cast<std::size_t>(ids[i]) * d;
      for (std::size_t j = 0; j < d; ++j) dt[row + j] += g[i * d + j];
    }
  });
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const IdTensor& targets, const BoolTensor* mask, T smoothing) {
  const std::size_t vocab = logits.shape().back();
  const std::size_t rows = logits.value().size() / vocab;
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " rows");
  }
  if (mask && mask->size() != rows) throw DimensionError("cross_entropy: mask size mismatch");
  const auto& x = logits.value().storage();
  auto probs = std::make_shared<std::vector<T>>(x.size());
  std::vector<std::uint8_t> valid(rows, 1);
  std::size_t count = 0;
  T total = 0;
  const T off = smoothing / T(vocab);
  for (std::size_t r = 0; r < rows; ++r) {
    if (mask && !(*mask)[r]) {
      valid[r] = 0;
      continue;
    }
    const auto y = targets[r];
    if (y < 0 || static_cast<std::size_t>(y) >= vocab) {
      throw IndexError("cross_entropy: target " + std::to_string(y) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    const std::size_t base = r * vocab;
    T mx = x[base];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, x[base + j]);
    T z = 0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(x[base + j] - mx);
    const T lse = mx + std::log(z);
    T sum_logp = 0;
    for (std::size_t j = 0; j < vocab; ++j) {
      const T lp = x[base + j] - lse;
      sum_logp += lp;
      (*probs)[base + j] = std::exp(lp);
    }
    total += -(T(1) - smoothing) * (x[base + static_cast<std::size_t>(y)] - lse) - off * sum_logp;
    ++count;
  }
  if (count == 0) throw DegenerateMaskError("cross_entropy: no valid target positions");
  const T inv = T(1) / T(count);
  const std::size_t il = logits.id();
  return logits.tape().record(
      Tensor<T>::scalar(total * inv), {logits},
      [il, probs, valid, targets, vocab, rows, smoothing, off, inv](Tape<T>& t, std::size_t self) {
        const T g = t.grad(self)[0] * inv;
        auto& d = t.grad(il).storage();
        for (std::size_t r = 0; r < rows; ++r) {
          if (!valid[r]) continue;
          const std::size_t base = r * vocab;
          for (std::size_t j = 0; j < vocab; ++j) d[base + j] += g * ((*probs)[base + j] - off);
          d[base + static_cast<std::size_t>(targets[r])] -= g * (T(1) - smoothing);
        }
      });
}

namespace {

struct PoolGeometry {
  std::size_t batch, steps, width;
  Shape out_shape;
};

PoolGeometry pool_geometry(const Shape& s, const BoolTensor& mask, const char* op) {
  if (s.size() < 2) throw DimensionError(std::string(op) + ": input needs rank >= 2");
  PoolGeometry g{leading(s, 2), s[s.size() - 2], s.back(), Shape(s.begin(), s.end() - 2)};
  g.out_shape.push_back(g.width);
  if (mask.size() != g.batch * g.steps) {
    throw DimensionError(std::string(op) + ": mask " + shape_str(mask.shape()) + " does not fit " + shape_str(s));
  }
  for (std::size_t b = 0; b < g.batch; ++b) {
    bool any = false;
    for (std::size_t t = 0; t < g.steps; ++t) any = any || mask[b * g.steps + t];
    if (!any) throw DegenerateMaskError(std::string(op) + ": sequence has no valid position");
  }
  return g;
}

}  // namespace

template <typename T>
Var<T> mean_pool(const Var<T>& x, const BoolTensor& mask) {
  const PoolGeometry geo = pool_geometry(x.shape(), mask, "mean_pool");
  Tensor<T> out(geo.out_shape);
  const auto& xv = x.value().storage();
  std::vector<T> inv_count(geo.batch);
  for (std::size_t b = 0; b < geo.batch; ++b) {
    std::size_t count = 0;
    for (std::size_t t = 0; t < geo.steps; ++t) {
      if (!mask[b * geo.steps + t]) continue;
      ++count;
      for (std::size_t j = 0; j < geo.width; ++j) out[b * geo.width + j] += xv[(b * geo.steps + t) * geo.width + j];
    }
    inv_count[b] = T(1) / T(count);
    for (std::size_t j = 0; j < geo.width; ++j) out[b * geo.width + j] *= inv_count[b];
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, geo, mask, inv_count](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self).storage();
    auto& d = t.grad(ix).storage();
    for (std::size_t b = 0; b < geo.batch; ++b) {
      for (std::size_t s = 0; s < geo.steps; ++s) {
        if (!mask[b * geo.steps + s]) continue;
        for (std::size_t j = 0; j < geo.width; ++j) {
          d[(b * geo.steps + s) * geo.width + j] += g[b * geo.width + j] * inv_count[b];
        }
      }
    }
  });
}

template <typename T>
Var<T> max_pool(const Var<T>& x, const BoolTensor& mask) {
  const PoolGeometry geo = pool_geometry(x.shape(), mask, "max_pool");
  Tensor<T> out(geo.out_shape);
  const auto& xv = x.value().storage();
  std::vector<std::size_t> argmax(geo.batch * geo.width, 0);
  for (std::size_t b = 0; b < geo.batch; ++b) {
    for (std::size_t j = 0; j < geo.width; ++j) {
      bool seen = false;
      T best = 0;
      std::size_t where = 0;
      for (std::size_t s = 0; s < geo.steps; ++s) {
        if (!mask[b * geo.steps + s]) continue;
        const T v = xv[(b * geo.steps + s) * geo.width + j];
        if (!seen || v > best) {
          best = v;
          where = s;
          seen = true;
        }
      }
      out[b * geo.width + j] = best;
      argmax[b * geo.width + j] = where;
    }
  }
  Tape<T>& tape = x.tape();
  if (tape.tracking_branches()) {
    std::vector<std::uint8_t> bits(argmax.begin(), argmax.end());
    tape.note_branch(hash_bits(bits));
  }
  const std::size_t ix = x.id();
  return tape.record(std::move(out), {x}, [ix, geo, argmax](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self).storage();
    auto& d = t.grad(ix).storage();
    for (std::size_t b = 0; b < geo.batch; ++b) {
      for (std::size_t j = 0; j < geo.width; ++j) {
        d[(b * geo.steps + argmax[b * geo.width + j]) * geo.width + j] += g[b * geo.width + j];
      }
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T total = 0;
  for (auto v : x.value().storage()) total += v;
  const std::size_t ix = x.id();
  return x.tape().record(Tensor<T>::scalar(total), {x}, [ix](Tape<T>& t, std::size_t self) {
    const T g = t.grad(self)[0];
    for (auto& v : t.grad(ix).storage()) v += g;
  });
}

template <typename T>
Var<T> dropout(const Var<T>& x, T rate, Rng& rng) {
  if (rate <= T(0)) return x;
  if (rate >= T(1)) throw ConfigError("dropout rate must be below 1");
  const T keep_scale = T(1) / (T(1) - rate);
  auto keep = std::make_shared<std::vector<T>>(x.value().size());
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*keep)[i] = rng.uniform() >= static_cast<double>(rate) ? keep_scale : T(0);
    out[i] *= (*keep)[i];
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, keep](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self).storage();
    auto& d = t.grad(ix).storage();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * (*keep)[i];
  });
}

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const AttentionSpec<T>& spec,
                 Tensor<T>* weights) {
  const Shape& qs = q.shape();
  const Shape& ks = k.shape();
  if (qs.size() != 3 || ks.size() != 3 || v.shape() != ks || qs[0] != ks[0] || qs[2] != ks[2]) {
    throw DimensionError("attention: shapes " + shape_str(qs) + ", " + shape_str(ks) + ", " +
                         shape_str(v.shape()) + " do not fit [B,Tq,d], [B,Tk,d], [B,Tk,d]");
  }
  const std::size_t B = qs[0], Tq = qs[1], Tk = ks[1], d = qs[2], H = spec.heads;
  if (H == 0 || d % H != 0) throw DimensionError("attention: width not divisible by head count");
  if (spec.key_mask && spec.key_mask->size() != B * Tk) throw DimensionError("attention: key mask size mismatch");
  if (spec.causal && Tk < Tq) throw DimensionError("attention: causal attention needs Tk >= Tq");
  const std::size_t dh = d / H;
  const T inv_sqrt = T(1) / std::sqrt(T(dh));
  const std::size_t shift = Tk - Tq;

  // probs holds softmax weights, mixed holds the weights actually applied
  // after dropout. Both [B, H, Tq, Tk].
  auto probs = std::make_shared<std::vector<T>>(B * H * Tq * Tk, T(0));
  auto mixed = probs;
  const bool drop = spec.dropout > T(0);
  if (drop) mixed = std::make_shared<std::vector<T>>(probs->size(), T(0));

  const auto& qv = q.value().storage();
  const auto& kv = k.value().storage();
  const auto& vv = v.value().storage();
  Tensor<T> out(qs);
  std::vector<T> scores(Tk);
  const T keep_scale = drop ? T(1) / (T(1) - spec.dropout) : T(1);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < Tq; ++i) {
        const T* qi = &qv[(b * Tq + i) * d + h * dh];
        T mx = -std::numeric_limits<T>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < Tk; ++j) {
          const bool ok = (!spec.key_mask || (*spec.key_mask)[b * Tk + j]) && (!spec.causal || j <= i + shift);
          if (!ok) {
            scores[j] = -std::numeric_limits<T>::infinity();
            continue;
          }
          const T* kj = &kv[(b * Tk + j) * d + h * dh];
          T s = 0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          scores[j] = s * inv_sqrt;
          mx = std::max(mx, scores[j]);
          any = true;
        }
        if (!any) throw DegenerateMaskError("attention: a query has no key it may attend to");
        T* p = &(*probs)[((b * H + h) * Tq + i) * Tk];
        T total = 0;
        for (std::size_t j = 0; j < Tk; ++j) {
          p[j] = std::isinf(scores[j]) ? T(0) : std::exp(scores[j] - mx);
          total += p[j];
        }
        for (std::size_t j = 0; j < Tk; ++j) p[j] /= total;
        T* m = &(*mixed)[((b * H + h) * Tq + i) * Tk];
        if (drop) {
          for (std::size_t j = 0; j < Tk; ++j) {
            m[j] = spec.rng->uniform() >= static_cast<double>(spec.dropout) ? p[j] * keep_scale : T(0);
          }
        }
        T* oi = &out[(b * Tq + i) * d + h * dh];
        for (std::size_t j = 0; j < Tk; ++j) {
          if (m[j] == T(0)) continue;
          const T* vj = &vv[(b * Tk + j) * d + h * dh];
          for (std::size_t c = 0; c < dh; ++c) oi[c] += m[j] * vj[c];
        }
      }
    }
  }
  if (weights) *weights = Tensor<T>({B, H, Tq, Tk}, *probs);

  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape().record(std::move(out), {q, k, v},
                         [=](Tape<T>& t, std::size_t self) {
                           const auto& g = t.grad(self).storage();
                           const auto& qv = t.value(iq).storage();
                           const auto& kv = t.value(ik).storage();
                           const auto& vv = t.value(iv).storage();
                           const bool gq = t.requires_grad(iq), gk = t.requires_grad(ik), gv = t.requires_grad(iv);
                           T* dq = gq ? t.grad(iq).ptr() : nullptr;
                           T* dk = gk ? t.grad(ik).ptr() : nullptr;
                           T* dv = gv ? t.grad(iv).ptr() : nullptr;
                           std::vector<T> dmix(Tk), ds(Tk);
                           for (std::size_t b = 0; b < B; ++b) {
                             for (std::size_t h = 0; h < H; ++h) {
                               for (std::size_t i = 0; i < Tq; ++i) {
                                 const std::size_t row = ((b * H + h) * Tq + i) * Tk;
                                 const T* p = &(*probs)[row];
                                 const T* m = &(*mixed)[row];
                                 const T* gi = &g[(b * Tq + i) * d + h * dh];
                                 for (std::size_t j = 0; j < Tk; ++j) {
                                   const T* vj = &vv[(b * Tk + j) * d + h * dh];
                                   T s = 0;
                                   for (std::size_t c = 0; c < dh; ++c) s += gi[c] * vj[c];
                                   // d(mixed)/d(probs) is the dropout scale, or 0 where dropped
                                   dmix[j] = drop ? (m[j] == T(0) ? T(0) : s * keep_scale) : s;
                                   if (gv && m[j] != T(0)) {
                                     T* dvj = dv + (b * Tk + j) * d + h * dh;
                                     for (std::size_t c = 0; c < dh; ++c) dvj[c] += m[j] * gi[c];
                                   }
                                 }
                                 T dot = 0;
                                 for (std::size_t j = 0; j < Tk; ++j) dot += dmix[j] * p[j];
                                 for (std::size_t j = 0; j < Tk; ++j) ds[j] = p[j] * (dmix[j] - dot) * inv_sqrt;
                                 const T* qi = &qv[(b * Tq + i) * d + h * dh];
                                 for (std::size_t j = 0; j < Tk; ++j) {
                                   if (ds[j] == T(0)) continue;
                                   const T* kj = &kv[(b * Tk + j) * d + h * dh];
                                   if (gq) {
                                     T* dqi = dq + (b * Tq + i) * d + h * dh;
                                     for (std::size_t c = 0; c < dh; ++c) dqi[c] += ds[j] * kj[c];
                                   }
                                   if (gk) {
                                     T* dkj = dk + (b * Tk + j) * d + h * dh;
                                     for (std::size_t c = 0; c < dh; ++c) dkj[c] += ds[j] * qi[c];
                                   }
                                 }
                               }
                             }
                           }
                         });
}

#define SCTX_INSTANTIATE_OPS(T)                                                                          \
  template Var<T> matmul(const Var<T>&, const Var<T>&, bool);                                            \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                     \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                     \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                     \
  template Var<T> scale(const Var<T>&, T);                                                               \
  template Var<T> relu(const Var<T>&);                                                                   \
  template Var<T> sigmoid(const Var<T>&);                                                                \
  template Var<T> tanh(const Var<T>&);                                                                   \
  template Var<T> softmax(const Var<T>&, const BoolTensor*);                                             \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                            \
  template Var<T> concat(const std::vector<Var<T>>&, std::size_t);                                       \
  template Var<T> concat_last_dim(const Var<T>&, const Var<T>&);                                         \
  template Var<T> narrow(const Var<T>&, std::size_t, std::size_t, std::size_t);                          \
  template Var<T> reshape(const Var<T>&, Shape);                                                         \
  template Var<T> expand(const Var<T>&, std::size_t, std::size_t);                                      \
  template Var<T> index_select(const Var<T>&, const std::vector<std::size_t>&);                          \
  template Var<T> embedding(const Var<T>&, const IdTensor&);                                             \
  template Var<T> cross_entropy(const Var<T>&, const IdTensor&, const BoolTensor*, T);                   \
  template Var<T> mean_pool(const Var<T>&, const BoolTensor&);                                           \
  template Var<T> max_pool(const Var<T>&, const BoolTensor&);                                            \
  template Var<T> sum(const Var<T>&);                                                                    \
  template Var<T> dropout(const Var<T>&, T, Rng&);                                                       \
  template Var<T> attention(const Var<T>&, const Var<T>&, const Var<T>&, const AttentionSpec<T>&, Tensor<T>*);

SCTX_INSTANTIATE_OPS(float)
SCTX_INSTANTIATE_OPS(double)

}  // namespace sctx
