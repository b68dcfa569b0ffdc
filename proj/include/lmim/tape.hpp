#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "lmim/errors.hpp"
#include "lmim/tensor.hpp"

namespace lmim {

using NodeId = std::size_t;

enum class ReconKind { L2, L1, Huber };

template <typename T>
T cosine_sim(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "cosine_sim");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += double(a.at(i)) * double(b.at(i));
    na += double(a.at(i)) * double(a.at(i));
    nb += double(b.at(i)) * double(b.at(i));
  }
  if (na == 0 || nb == 0) throw NumericError("cosine_sim: degenerate zero-norm vector");
  double c = dot / (std::sqrt(na) * std::sqrt(nb));
  return static_cast<T>(std::clamp(c, -1.0, 1.0));
}

template <typename T>
T gelu_scalar(T x) {
  // Exact-erf form x * Phi(x), not the tanh approximation.
  return x * T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
}

// Reverse-mode tape. Nodes are appended in evaluation order; backward
// walks them in strict reverse insertion order. Every forward result is
// checked for non-finite values and the offending op is named.
template <typename T>
class Tape {
 public:
  using Grads = std::vector<Tensor<T>>;

  const Tensor<T>& value(NodeId id) const { return nodes_[id].value; }
  std::size_t size() const { return nodes_.size(); }

  // Leaf holding an optimizable parameter. Re-binding the same tensor
  // address returns the existing node so gradients accumulate.
  NodeId param(const Tensor<T>& t) {
    auto it = param_ids_.find(&t);
    if (it != param_ids_.end()) return it->second;
    NodeId id = leaf(t, "param");
    param_ids_.emplace(&t, id);
    return id;
  }

  NodeId constant(Tensor<T> t) { return leaf(std::move(t), "const"); }

  // ---- elementwise / structural ops ----

  NodeId add(NodeId a, NodeId b) {
    check_same_shape(value(a), value(b), "add");
    Tensor<T> out = value(a);
    const Tensor<T>& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out.at(i) += vb.at(i);
    return push("add", {a, b}, std::move(out), [a, b](Tape& t, const Tensor<T>& g) {
      t.accum(a, g);
      t.accum(b, g);
    });
  }

  NodeId sub(NodeId a, NodeId b) {
    check_same_shape(value(a), value(b), "sub");
    Tensor<T> out = value(a);
    const Tensor<T>& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out.at(i) -= vb.at(i);
    return push("sub", {a, b}, std::move(out), [a, b](Tape& t, const Tensor<T>& g) {
      t.accum(a, g);
      Tensor<T> ng = g;
      for (std::size_t i = 0; i < ng.size(); ++i) ng.at(i) = -ng.at(i);
      t.accum(b, ng);
    });
  }

  NodeId mul(NodeId a, NodeId b) {
    check_same_shape(value(a), value(b), "mul");
    Tensor<T> out = value(a);
    const Tensor<T>& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out.at(i) *= vb.at(i);
    return push("mul", {a, b}, std::move(out), [a, b](Tape& t, const Tensor<T>& g) {
      Tensor<T> ga = g, gb = g;
      const Tensor<T>& va = t.value(a);
      const Tensor<T>& vb2 = t.value(b);
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga.at(i) *= vb2.at(i);
        gb.at(i) *= va.at(i);
      }
      t.accum(a, ga);
      t.accum(b, gb);
    });
  }

  NodeId scale(NodeId x, T c) {
    Tensor<T> out = value(x);
    for (std::size_t i = 0; i < out.size(); ++i) out.at(i) *= c;
    return push("scale", {x}, std::move(out), [x, c](Tape& t, const Tensor<T>& g) {
      Tensor<T> gx = g;
      for (std::size_t i = 0; i < gx.size(); ++i) gx.at(i) *= c;
      t.accum(x, gx);
    });
  }

  // A[n x d] + v[d] broadcast over rows.
  NodeId add_rowvec(NodeId a, NodeId v) {
    const Tensor<T>& va = value(a);
    const Tensor<T>& vv = value(v);
    if (va.rank() != 2 || vv.rank() != 1 || va.cols() != vv.size())
      throw ShapeError("add_rowvec: " + shape_str(va.shape()) + " vs " + shape_str(vv.shape()));
    Tensor<T> out = va;
    for (std::size_t r = 0; r < va.rows(); ++r)
      for (std::size_t c = 0; c < va.cols(); ++c) out.at(r, c) += vv.at(c);
    return push("add_rowvec", {a, v}, std::move(out), [a, v](Tape& t, const Tensor<T>& g) {
      t.accum(a, g);
      Tensor<T> gv(Shape{g.cols()});
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gv.at(c) += g.at(r, c);
      t.accum(v, gv);
    });
  }

  // v[d] replicated n times -> [n x d].
  NodeId broadcast_row(NodeId v, std::size_t n) {
    const Tensor<T>& vv = value(v);
    if (vv.rank() != 1) throw ShapeError("broadcast_row: want rank-1, got " + shape_str(vv.shape()));
    Tensor<T> out(Shape{n, vv.size()});
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < vv.size(); ++c) out.at(r, c) = vv.at(c);
    return push("broadcast_row", {v}, std::move(out), [v](Tape& t, const Tensor<T>& g) {
      Tensor<T> gv(Shape{g.cols()});
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gv.at(c) += g.at(r, c);
      t.accum(v, gv);
    });
  }

  // ---- linear algebra ----

  NodeId matmul(NodeId a, NodeId b) {
    const Tensor<T>& va = value(a);
    const Tensor<T>& vb = value(b);
    if (va.rank() != 2 || vb.rank() != 2 || va.cols() != vb.rows())
      throw ShapeError("matmul: shape mismatch " + shape_str(va.shape()) + " vs " +
                       shape_str(vb.shape()));
    Tensor<T> out(Shape{va.rows(), vb.cols()});
    gemm(va, vb, out, false, false);
    return push("matmul", {a, b}, std::move(out), [a, b](Tape& t, const Tensor<T>& g) {
      const Tensor<T>& va2 = t.value(a);
      const Tensor<T>& vb2 = t.value(b);
      Tensor<T> ga(va2.shape()), gb(vb2.shape());
      gemm(g, vb2, ga, false, true);   // dA = g . B^T
      gemm(va2, g, gb, true, false);   // dB = A^T . g
      t.accum(a, ga);
      t.accum(b, gb);
    });
  }

  NodeId transpose(NodeId x) {
    const Tensor<T>& vx = value(x);
    if (vx.rank() != 2) throw ShapeError("transpose: want rank-2, got " + shape_str(vx.shape()));
    Tensor<T> out(Shape{vx.cols(), vx.rows()});
    for (std::size_t r = 0; r < vx.rows(); ++r)
      for (std::size_t c = 0; c < vx.cols(); ++c) out.at(c, r) = vx.at(r, c);
    return push("transpose", {x}, std::move(out), [x](Tape& t, const Tensor<T>& g) {
      Tensor<T> gx(Shape{g.cols(), g.rows()});
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gx.at(c, r) = g.at(r, c);
      t.accum(x, gx);
    });
  }

  // ---- nonlinearities ----

  // Max-subtracted softmax along `axis` of a rank-1 or rank-2 tensor.
  NodeId softmax(NodeId x, std::size_t axis) {
    const Tensor<T>& vx = value(x);
    if (axis >= std::max<std::size_t>(vx.rank(), 1))
      throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                       shape_str(vx.shape()));
    NodeId src = x;
    bool transposed = vx.rank() == 2 && axis == 0;
    if (transposed) src = transpose(x);
    const Tensor<T>& vs = value(src);
    Tensor<T> out = vs;
    std::size_t nrows = vs.rank() == 2 ? vs.rows() : 1;
    std::size_t ncols = vs.rank() == 2 ? vs.cols() : vs.size();
    for (std::size_t r = 0; r < nrows; ++r) {
      T* row = out.data() + r * ncols;
      T m = *std::max_element(row, row + ncols);
      T sum = 0;
      for (std::size_t c = 0; c < ncols; ++c) {
        row[c] = std::exp(row[c] - m);
        sum += row[c];
      }
      for (std::size_t c = 0; c < ncols; ++c) row[c] /= sum;
    }
    NodeId sm = push("softmax", {src}, std::move(out), nullptr);
    // dx = y * (g - sum(g*y)) per row; needs the node's own output
    nodes_[sm].backward = [src, sm, nrows, ncols](Tape& t, const Tensor<T>& g) {
      const Tensor<T>& y = t.value(sm);
      Tensor<T> gx = g;
      for (std::size_t r = 0; r < nrows; ++r) {
        T dot = 0;
        for (std::size_t c = 0; c < ncols; ++c) dot += g.at(r * ncols + c) * y.at(r * ncols + c);
        for (std::size_t c = 0; c < ncols; ++c) {
          std::size_t i = r * ncols + c;
          gx.at(i) = y.at(i) * (g.at(i) - dot);
        }
      }
      t.accum(src, gx);
    };
    return transposed ? transpose(sm) : sm;
  }

  NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta, T eps) {
    const Tensor<T>& vx = value(x);
    const Tensor<T>& vg = value(gamma);
    const Tensor<T>& vb = value(beta);
    std::size_t d = vx.cols();
    if (vg.size() != d || vb.size() != d)
      throw ShapeError("layer_norm: gamma/beta " + shape_str(vg.shape()) + "/" +
                       shape_str(vb.shape()) + " do not match last axis of " +
                       shape_str(vx.shape()));
    std::size_t n = vx.rank() == 2 ? vx.rows() : 1;
    Tensor<T> out = vx;
    Tensor<T> xhat = vx;
    Tensor<T> rstd(Shape{n});
    for (std::size_t r = 0; r < n; ++r) {
      const T* row = vx.data() + r * d;
      T mean = 0;
      for (std::size_t c = 0; c < d; ++c) mean += row[c];
      mean /= T(d);
      T var = 0;
      for (std::size_t c = 0; c < d; ++c) var += (row[c] - mean) * (row[c] - mean);
      var /= T(d);
      T r_ = T(1) / std::sqrt(var + eps);
      rstd.at(r) = r_;
      for (std::size_t c = 0; c < d; ++c) {
        T xh = (row[c] - mean) * r_;
        xhat.at(r * d + c) = xh;
        out.at(r * d + c) = xh * vg.at(c) + vb.at(c);
      }
    }
    return push("layer_norm", {x, gamma, beta}, std::move(out),
                [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd), n,
                 d](Tape& t, const Tensor<T>& g) {
                  const Tensor<T>& vg2 = t.value(gamma);
                  Tensor<T> gx(t.value(x).shape());
                  Tensor<T> gg(Shape{d}), gb(Shape{d});
                  for (std::size_t r = 0; r < n; ++r) {
                    T mh = 0, mhx = 0;
                    for (std::size_t c = 0; c < d; ++c) {
                      std::size_t i = r * d + c;
                      T h = g.at(i) * vg2.at(c);
                      mh += h;
                      mhx += h * xhat.at(i);
                      gg.at(c) += g.at(i) * xhat.at(i);
                      gb.at(c) += g.at(i);
                    }
                    mh /= T(d);
                    mhx /= T(d);
                    for (std::size_t c = 0; c < d; ++c) {
                      std::size_t i = r * d + c;
                      T h = g.at(i) * vg2.at(c);
                      gx.at(i) = rstd.at(r) * (h - mh - xhat.at(i) * mhx);
                    }
                  }
                  t.accum(x, gx);
                  t.accum(gamma, gg);
                  t.accum(beta, gb);
                });
  }

  NodeId gelu(NodeId x) {
    const Tensor<T>& vx = value(x);
    Tensor<T> out = vx;
    for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = gelu_scalar(out.at(i));
    return push("gelu", {x}, std::move(out), [x](Tape& t, const Tensor<T>& g) {
      const Tensor<T>& vx2 = t.value(x);
      Tensor<T> gx = g;
      const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * T(M_PI));
      for (std::size_t i = 0; i < gx.size(); ++i) {
        T v = vx2.at(i);
        T phi_cdf = T(0.5) * (T(1) + std::erf(v / std::sqrt(T(2))));
        T phi_pdf = std::exp(-v * v / T(2)) * inv_sqrt2pi;
        gx.at(i) *= phi_cdf + v * phi_pdf;
      }
      t.accum(x, gx);
    });
  }

  // ---- reductions ----

  NodeId sum_all(NodeId x) {
    const Tensor<T>& vx = value(x);
    T s = 0;
    for (std::size_t i = 0; i < vx.size(); ++i) s += vx.at(i);
    return push("sum", {x}, Tensor<T>::scalar(s), [x](Tape& t, const Tensor<T>& g) {
      Tensor<T> gx = Tensor<T>::full(t.value(x).shape(), g.item());
      t.accum(x, gx);
    });
  }

  NodeId mean_all(NodeId x) {
    const Tensor<T>& vx = value(x);
    T s = 0;
    for (std::size_t i = 0; i < vx.size(); ++i) s += vx.at(i);
    std::size_t n = vx.size();
    return push("mean", {x}, Tensor<T>::scalar(s / T(n)), [x, n](Tape& t, const Tensor<T>& g) {
      Tensor<T> gx = Tensor<T>::full(t.value(x).shape(), g.item() / T(n));
      t.accum(x, gx);
    });
  }

  // log(sum(exp(x))) along each row, max-shifted.
  NodeId lse_rows(NodeId x) {
    const Tensor<T>& vx = value(x);
    if (vx.rank() != 2) throw ShapeError("lse_rows: want rank-2, got " + shape_str(vx.shape()));
    std::size_t n = vx.rows(), d = vx.cols();
    Tensor<T> out(Shape{n});
    for (std::size_t r = 0; r < n; ++r) {
      const T* row = vx.data() + r * d;
      T m = *std::max_element(row, row + d);
      T s = 0;
      for (std::size_t c = 0; c < d; ++c) s += std::exp(row[c] - m);
      out.at(r) = m + std::log(s);
    }
    NodeId id = push("lse_rows", {x}, std::move(out), nullptr);
    nodes_[id].backward = [x, id, n, d](Tape& t, const Tensor<T>& g) {
      const Tensor<T>& vx2 = t.value(x);
      const Tensor<T>& y = t.value(id);
      Tensor<T> gx(vx2.shape());
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c)
          gx.at(r * d + c) = g.at(r) * std::exp(vx2.at(r * d + c) - y.at(r));
      t.accum(x, gx);
    };
    return id;
  }

  NodeId diag(NodeId x) {
    const Tensor<T>& vx = value(x);
    if (vx.rank() != 2 || vx.rows() != vx.cols())
      throw ShapeError("diag: want square matrix, got " + shape_str(vx.shape()));
    std::size_t n = vx.rows();
    Tensor<T> out(Shape{n});
    for (std::size_t i = 0; i < n; ++i) out.at(i) = vx.at(i, i);
    return push("diag", {x}, std::move(out), [x, n](Tape& t, const Tensor<T>& g) {
      Tensor<T> gx(t.value(x).shape());
      for (std::size_t i = 0; i < n; ++i) gx.at(i * n + i) = g.at(i);
      t.accum(x, gx);
    });
  }

  // ---- slicing / concatenation (row-major 2-D) ----

  NodeId slice_rows(NodeId x, std::size_t r0, std::size_t r1) {
    const Tensor<T>& vx = value(x);
    if (vx.rank() != 2 || r1 > vx.rows() || r0 >= r1)
      throw ShapeError("slice_rows: bad range [" + std::to_string(r0) + "," + std::to_string(r1) +
                       ") for " + shape_str(vx.shape()));
    std::size_t d = vx.cols();
    Tensor<T> out(Shape{r1 - r0, d});
    std::copy(vx.data() + r0 * d, vx.data() + r1 * d, out.data());
    return push("slice_rows", {x}, std::move(out), [x, r0, d](Tape& t, const Tensor<T>& g) {
      Tensor<T> gx(t.value(x).shape());
      std::copy(g.data(), g.data() + g.size(), gx.data() + r0 * d);
      t.accum(x, gx);
    });
  }

  NodeId slice_cols(NodeId x, std::size_t c0, std::size_t c1) {
    const Tensor<T>& vx = value(x);
    if (vx.rank() != 2 || c1 > vx.cols() || c0 >= c1)
      throw ShapeError("slice_cols: bad range [" + std::to_string(c0) + "," + std::to_string(c1) +
                       ") for " + shape_str(vx.shape()));
    std::size_t n = vx.rows(), d = vx.cols(), w = c1 - c0;
    Tensor<T> out(Shape{n, w});
    for (std::size_t r = 0; r < n; ++r)
      std::copy(vx.data() + r * d + c0, vx.data() + r * d + c1, out.data() + r * w);
    return push("slice_cols", {x}, std::move(out), [x, c0, n, d, w](Tape& t, const Tensor<T>& g) {
      Tensor<T> gx(t.value(x).shape());
      for (std::size_t r = 0; r < n; ++r)
        std::copy(g.data() + r * w, g.data() + (r + 1) * w, gx.data() + r * d + c0);
      t.accum(x, gx);
    });
  }

  NodeId concat_rows(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty");
    std::size_t d = value(parts[0]).cols(), n = 0;
    for (NodeId p : parts) {
      if (value(p).rank() != 2 || value(p).cols() != d)
        throw ShapeError("concat_rows: inconsistent widths");
      n += value(p).rows();
    }
    Tensor<T> out(Shape{n, d});
    std::size_t r = 0;
    for (NodeId p : parts) {
      const Tensor<T>& v = value(p);
      std::copy(v.data(), v.data() + v.size(), out.data() + r * d);
      r += v.rows();
    }
    return push("concat_rows", parts, std::move(out), [parts, d](Tape& t, const Tensor<T>& g) {
      std::size_t r = 0;
      for (NodeId p : parts) {
        std::size_t pr = t.value(p).rows();
        Tensor<T> gp(Shape{pr, d});
        std::copy(g.data() + r * d, g.data() + (r + pr) * d, gp.data());
        t.accum(p, gp);
        r += pr;
      }
    });
  }

  NodeId concat_cols(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty");
    std::size_t n = value(parts[0]).rows(), d = 0;
    for (NodeId p : parts) {
      if (value(p).rank() != 2 || value(p).rows() != n)
        throw ShapeError("concat_cols: inconsistent heights");
      d += value(p).cols();
    }
    Tensor<T> out(Shape{n, d});
    std::size_t c = 0;
    for (NodeId p : parts) {
      const Tensor<T>& v = value(p);
      for (std::size_t r = 0; r < n; ++r)
        std::copy(v.data() + r * v.cols(), v.data() + (r + 1) * v.cols(),
                  out.data() + r * d + c);
      c += v.cols();
    }
    return push("concat_cols", parts, std::move(out), [parts, n, d](Tape& t, const Tensor<T>& g) {
      std::size_t c = 0;
      for (NodeId p : parts) {
        std::size_t pc = t.value(p).cols();
        Tensor<T> gp(Shape{n, pc});
        for (std::size_t r = 0; r < n; ++r)
          std::copy(g.data() + r * d + c, g.data() + r * d + c + pc, gp.data() + r * pc);
        t.accum(p, gp);
        c += pc;
      }
    });
  }

  // Rows scaled to unit L2 norm. Zero rows are degenerate inputs.
  NodeId normalize_rows(NodeId x) {
    const Tensor<T>& vx = value(x);
    if (vx.rank() != 2) throw ShapeError("normalize_rows: want rank-2");
    std::size_t n = vx.rows(), d = vx.cols();
    Tensor<T> out = vx;
    Tensor<T> norms(Shape{n});
    for (std::size_t r = 0; r < n; ++r) {
      T s = 0;
      for (std::size_t c = 0; c < d; ++c) s += vx.at(r, c) * vx.at(r, c);
      if (s == T(0)) throw NumericError("normalize_rows: degenerate zero-norm row");
      T nr = std::sqrt(s);
      norms.at(r) = nr;
      for (std::size_t c = 0; c < d; ++c) out.at(r, c) /= nr;
    }
    NodeId id = push("normalize_rows", {x}, std::move(out), nullptr);
    nodes_[id].backward = [x, id, norms = std::move(norms), n, d](Tape& t, const Tensor<T>& g) {
      const Tensor<T>& y = t.value(id);
      Tensor<T> gx(t.value(x).shape());
      for (std::size_t r = 0; r < n; ++r) {
        T dot = 0;
        for (std::size_t c = 0; c < d; ++c) dot += g.at(r * d + c) * y.at(r * d + c);
        for (std::size_t c = 0; c < d; ++c)
          gx.at(r * d + c) = (g.at(r * d + c) - y.at(r * d + c) * dot) / norms.at(r);
      }
      t.accum(x, gx);
    };
    return id;
  }

  // Mean over rows of the direct reconstruction discrepancy. Fused so the
  // Huber branch condition stays out of the generic op set.
  NodeId recon_direct(NodeId zhat, NodeId z, ReconKind kind, T delta) {
    const Tensor<T>& a = value(zhat);
    const Tensor<T>& b = value(z);
    check_same_shape(a, b, "recon_direct");
    if (a.rank() != 2) throw ShapeError("recon_direct: want rank-2 latents");
    std::size_t n = a.rows(), d = a.cols();
    T total = 0;
    std::vector<bool> quad(n, true);
    for (std::size_t r = 0; r < n; ++r) {
      T l2 = 0, l1 = 0;
      for (std::size_t c = 0; c < d; ++c) {
        T diff = a.at(r, c) - b.at(r, c);
        l2 += diff * diff;
        l1 += std::abs(diff);
      }
      switch (kind) {
        case ReconKind::L2: total += l2; break;
        case ReconKind::L1: total += l1; break;
        case ReconKind::Huber:
          if (l2 < delta * delta) {
            total += T(0.5) * l2;
          } else {
            total += delta * (l1 - delta / T(2));
            quad[r] = false;
          }
          break;
      }
    }
    total /= T(n);
    return push("recon_direct", {zhat, z}, Tensor<T>::scalar(total),
                [zhat, z, kind, delta, quad = std::move(quad), n, d](Tape& t, const Tensor<T>& g) {
                  const Tensor<T>& a2 = t.value(zhat);
                  const Tensor<T>& b2 = t.value(z);
                  Tensor<T> ga(a2.shape()), gb(b2.shape());
                  T go = g.item() / T(n);
                  for (std::size_t r = 0; r < n; ++r) {
                    for (std::size_t c = 0; c < d; ++c) {
                      T diff = a2.at(r, c) - b2.at(r, c);
                      T dd = 0;
                      switch (kind) {
                        case ReconKind::L2: dd = T(2) * diff; break;
                        case ReconKind::L1: dd = sign(diff); break;
                        case ReconKind::Huber:
                          dd = quad[r] ? diff : delta * sign(diff);
                          break;
                      }
                      ga.at(r, c) = go * dd;
                      gb.at(r, c) = -go * dd;
                    }
                  }
                  t.accum(zhat, ga);
                  t.accum(z, gb);
                });
  }

  // ---- backward ----

  // Gradient of a scalar root w.r.t. every reachable node; unreachable
  // leaves read back as zero.
  void backward(NodeId root) {
    if (!value(root).is_scalar())
      throw ContractError("backward: root must be scalar, got " +
                          shape_str(value(root).shape()));
    grads_.assign(nodes_.size(), Tensor<T>());
    grads_[root] = Tensor<T>::scalar(T(1));
    std::vector<bool> needed(nodes_.size(), false);
    needed[root] = true;
    for (std::size_t i = root + 1; i-- > 0;) {
      if (!needed[i]) continue;
      for (NodeId p : nodes_[i].parents) needed[p] = true;
      if (nodes_[i].backward && grads_[i].size() > 0) nodes_[i].backward(*this, grads_[i]);
    }
    has_grads_ = true;
  }

  Tensor<T> grad(NodeId id) const {
    if (!has_grads_) throw ContractError("grad: backward() has not run");
    if (grads_[id].size() == 0) return Tensor<T>(value(id).shape());
    return grads_[id];
  }

  // Gradient for a parameter tensor bound via param(); zeros if the
  // parameter never entered the graph.
  Tensor<T> grad_for(const Tensor<T>& t) const {
    auto it = param_ids_.find(&t);
    if (it == param_ids_.end()) return Tensor<T>(t.shape());
    return grad(it->second);
  }

  const char* op_name(NodeId id) const { return nodes_[id].op; }
  const std::vector<NodeId>& parents(NodeId id) const { return nodes_[id].parents; }

 private:
  struct Node {
    const char* op;
    std::vector<NodeId> parents;
    Tensor<T> value;
    std::function<void(Tape&, const Tensor<T>&)> backward;
  };

  static T sign(T v) { return v > 0 ? T(1) : (v < 0 ? T(-1) : T(0)); }

  NodeId leaf(Tensor<T> t, const char* op) {
    if (!t.all_finite()) throw NumericError(std::string("tape op '") + op +
                                            "' received non-finite values");
    nodes_.push_back(Node{op, {}, std::move(t), nullptr});
    return nodes_.size() - 1;
  }

  NodeId push(const char* op, std::vector<NodeId> parents, Tensor<T> value,
              std::function<void(Tape&, const Tensor<T>&)> bwd) {
    if (!value.all_finite())
      throw NumericError(std::string("tape op '") + op + "' produced non-finite values");
    nodes_.push_back(Node{op, std::move(parents), std::move(value), std::move(bwd)});
    return nodes_.size() - 1;
  }

  void accum(NodeId id, const Tensor<T>& g) {
    if (grads_[id].size() == 0) {
      grads_[id] = g;
    } else {
      for (std::size_t i = 0; i < g.size(); ++i) grads_[id].at(i) += g.at(i);
    }
  }

  static void gemm(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out, bool ta, bool tb) {
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const Mat> ma(a.data(), long(a.rows()), long(a.cols()));
    Eigen::Map<const Mat> mb(b.data(), long(b.rows()), long(b.cols()));
    Eigen::Map<Mat> mo(out.data(), long(out.rows()), long(out.cols()));
    if (!ta && !tb) mo.noalias() = ma * mb;
    else if (!ta && tb) mo.noalias() = ma * mb.transpose();
    else if (ta && !tb) mo.noalias() = ma.transpose() * mb;
    else mo.noalias() = ma.transpose() * mb.transpose();
  }

  std::vector<Node> nodes_;
  std::vector<Tensor<T>> grads_;
  bool has_grads_ = false;
  std::unordered_map<const Tensor<T>*, NodeId> param_ids_;
};

// Central finite differences, the independent oracle for every backward
// rule in this library.
template <typename T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x, T h) {
  if (!(h > 0)) throw ContractError("finite_diff_grad: h must be positive");
  Tensor<T> g(x.shape());
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    T orig = probe.at(i);
    probe.at(i) = orig + h;
    T fp = f(probe);
    probe.at(i) = orig - h;
    T fm = f(probe);
    probe.at(i) = orig;
    g.at(i) = (fp - fm) / (T(2) * h);
  }
  return g;
}

// max_i |a_i - b_i| / max(1, |a_i|, |b_i|)
template <typename T>
double max_rel_err(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "max_rel_err");
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double av = a.at(i), bv = b.at(i);
    double err = std::abs(av - bv) / std::max({1.0, std::abs(av), std::abs(bv)});
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace lmim
