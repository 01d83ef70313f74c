#include "qec/diff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "qec/error.hpp"
#include "qec/pointcloud.hpp"
#include "qec/quat.hpp"
#include "qec/quat_mean.hpp"

namespace qec::diff {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

namespace {

void check(bool ok, const char* what) {
  if (!ok) throw Error(ErrorCode::ShapeMismatch, what);
}

}  // namespace

Var Tape::parameter(Shape shape, std::vector<double> values) {
  check(numel(shape) == values.size(), "parameter shape does not match value count");
  nodes_.push_back(Node{std::move(shape), std::move(values), {}, true, nullptr});
  return Var{nodes_.size() - 1};
}

Var Tape::constant(Shape shape, std::vector<double> values) {
  check(numel(shape) == values.size(), "constant shape does not match value count");
  nodes_.push_back(Node{std::move(shape), std::move(values), {}, false, nullptr});
  return Var{nodes_.size() - 1};
}

Var Tape::push(Shape shape, std::vector<double> values, std::initializer_list<Var> parents,
               BackwardFn backward) {
  bool rg = false;
  for (Var p : parents) rg = rg || nodes_[p.id].requires_grad;
  nodes_.push_back(Node{std::move(shape), std::move(values), {}, rg, rg ? std::move(backward) : nullptr});
  return Var{nodes_.size() - 1};
}

std::vector<double>& Tape::grad(Var v) {
  auto& n = nodes_[v.id];
  if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

void Tape::backward(Var loss) {
  check(nodes_[loss.id].value.size() == 1, "backward needs a scalar loss");
  grad(loss)[0] += 1.0;
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    auto& n = nodes_[id];
    if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
    n.backward(*this, id);
  }
}

// ---------------------------------------------------------------------------

Var matmul(Tape& t, Var a, Var b) {
  const Shape& sa = t.shape(a);
  const Shape& sb = t.shape(b);
  check(sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0], "matmul shapes");
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = &c[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      if (aip == 0.0) continue;
      const double* bp = &B[p * n];
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
  return t.push({m, n}, std::move(c), {a, b}, [a, b, m, k, n](Tape& t, std::size_t self) {
    const auto& G = t.grad(self);
    if (t.requires_grad(a)) {
      const auto& B = t.value(b);
      auto& ga = t.grad(a);
      // dA = G Bᵀ, accumulated row by row against a transposed copy of B.
      std::vector<double> bt(k * n);
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = B[p * n + j];
      for (std::size_t i = 0; i < m; ++i) {
        double* gai = &ga[i * k];
        for (std::size_t j = 0; j < n; ++j) {
          const double gij = G[i * n + j];
          if (gij == 0.0) continue;
          const double* btj = &bt[j * k];
          for (std::size_t p = 0; p < k; ++p) gai[p] += gij * btj[p];
        }
      }
    }
    if (t.requires_grad(b)) {
      const auto& A = t.value(a);
      auto& gb = t.grad(b);
      for (std::size_t i = 0; i < m; ++i) {
        const double* gi = &G[i * n];
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A[i * k + p];
          if (aip == 0.0) continue;
          double* gbp = &gb[p * n];
          for (std::size_t j = 0; j < n; ++j) gbp[j] += aip * gi[j];
        }
      }
    }
  });
}

Var add_bias(Tape& t, Var a, Var bias) {
  const Shape& sa = t.shape(a);
  check(sa.size() == 2 && t.value(bias).size() == sa[1], "add_bias shapes");
  const std::size_t m = sa[0], n = sa[1];
  std::vector<double> out = t.value(a);
  const auto& b = t.value(bias);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b[j];
  return t.push(sa, std::move(out), {a, bias}, [a, bias, m, n](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(a)) {
      auto& ga = t.grad(a);
      for (std::size_t i = 0; i < m * n; ++i) ga[i] += g[i];
    }
    if (t.requires_grad(bias)) {
      auto& gb = t.grad(bias);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
  });
}

Var add(Tape& t, Var a, Var b) {
  check(t.value(a).size() == t.value(b).size(), "add shapes");
  std::vector<double> out = t.value(a);
  const auto& vb = t.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
  return t.push(t.shape(a), std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    for (Var p : {a, b}) {
      if (!t.requires_grad(p)) continue;
      auto& gp = t.grad(p);
      for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
    }
  });
}

Var mul(Tape& t, Var a, Var b) {
  check(t.value(a).size() == t.value(b).size(), "mul shapes");
  std::vector<double> out = t.value(a);
  const auto& vb = t.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
  return t.push(t.shape(a), std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(a)) {
      const auto& vb = t.value(b);
      auto& ga = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
    }
    if (t.requires_grad(b)) {
      const auto& va = t.value(a);
      auto& gb = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
    }
  });
}

Var scale(Tape& t, Var a, double s) {
  std::vector<double> out = t.value(a);
  for (double& v : out) v *= s;
  return t.push(t.shape(a), std::move(out), {a}, [a, s](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var relu(Tape& t, Var a) {
  std::vector<double> out = t.value(a);
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return t.push(t.shape(a), std::move(out), {a}, [a](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& x = t.value(a);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > 0.0) ga[i] += g[i];
  });
}

Var sigmoid(Tape& t, Var a) {
  std::vector<double> out = t.value(a);
  for (double& v : out) v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  return t.push(t.shape(a), std::move(out), {a}, [a](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& y = t.value(self);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Var sum(Tape& t, Var a) {
  double s = 0.0;
  for (double v : t.value(a)) s += v;
  return t.push({1}, {s}, {a}, [a](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (double& v : t.grad(a)) v += g;
  });
}

Var sum_groups(Tape& t, Var a, std::size_t group) {
  const auto& x = t.value(a);
  check(group > 0 && x.size() % group == 0, "sum_groups size");
  const std::size_t n = x.size() / group;
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < group; ++j) out[i] += x[i * group + j];
  return t.push({n}, std::move(out), {a}, [a, n, group](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < group; ++j) ga[i * group + j] += g[i];
  });
}

Var reshape(Tape& t, Var a, Shape shape) {
  check(numel(shape) == t.value(a).size(), "reshape size");
  return t.push(std::move(shape), t.value(a), {a}, [a](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var gather_rows(Tape& t, Var a, std::span<const std::size_t> rows) {
  const Shape& sa = t.shape(a);
  check(!sa.empty(), "gather_rows needs rank >= 1");
  const std::size_t width = sa[0] == 0 ? 0 : t.value(a).size() / sa[0];
  const auto& x = t.value(a);
  std::vector<double> out(rows.size() * width);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    check(rows[r] < sa[0], "gather_rows index out of range");
    std::copy_n(&x[rows[r] * width], width, &out[r * width]);
  }
  Shape shape = sa;
  shape[0] = rows.size();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return t.push(std::move(shape), std::move(out), {a},
                [a, width, idx = std::move(idx)](Tape& t, std::size_t self) {
                  const auto& g = t.grad(self);
                  auto& ga = t.grad(a);
                  for (std::size_t r = 0; r < idx.size(); ++r) {
                    const double* src = &g[r * width];
                    double* dst = &ga[idx[r] * width];
                    for (std::size_t c = 0; c < width; ++c) dst[c] += src[c];
                  }
                });
}

Var slice_cols(Tape& t, Var a, std::size_t begin, std::size_t count) {
  const Shape& sa = t.shape(a);
  check(sa.size() == 2 && begin + count <= sa[1], "slice_cols range");
  const std::size_t m = sa[0], n = sa[1];
  const auto& x = t.value(a);
  std::vector<double> out(m * count);
  for (std::size_t i = 0; i < m; ++i) std::copy_n(&x[i * n + begin], count, &out[i * count]);
  return t.push({m, count}, std::move(out), {a}, [a, m, n, begin, count](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t c = 0; c < count; ++c) ga[i * n + begin + c] += g[i * count + c];
  });
}

// ---------------------------------------------------------------------------

namespace {

std::size_t rows4(Tape& t, Var a) {
  const auto n = t.value(a).size();
  check(n % 4 == 0 && !t.shape(a).empty() && t.shape(a).back() == 4, "trailing dimension must be 4");
  return n / 4;
}

Vec4 load4(const std::vector<double>& v, std::size_t r) {
  return {v[4 * r], v[4 * r + 1], v[4 * r + 2], v[4 * r + 3]};
}

}  // namespace

Var normalize_last4(Tape& t, Var a) {
  const std::size_t n = rows4(t, a);
  const auto& x = t.value(a);
  std::vector<double> out(x.size());
  std::vector<double> inv_norm(n, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const Vec4 v = load4(x, r);
    const double len = norm(v);
    if (len < 1e-12) {
      out[4 * r] = 1.0;
      out[4 * r + 1] = out[4 * r + 2] = out[4 * r + 3] = 0.0;
      ++t.zero_norm_events;
      continue;
    }
    inv_norm[r] = 1.0 / len;
    for (int c = 0; c < 4; ++c) out[4 * r + c] = v[c] * inv_norm[r];
  }
  return t.push(t.shape(a), std::move(out), {a},
                [a, n, inv_norm = std::move(inv_norm)](Tape& t, std::size_t self) {
                  const auto& g = t.grad(self);
                  const auto& y = t.value(self);
                  auto& ga = t.grad(a);
                  for (std::size_t r = 0; r < n; ++r) {
                    if (inv_norm[r] == 0.0) continue;
                    double yg = 0.0;
                    for (int c = 0; c < 4; ++c) yg += y[4 * r + c] * g[4 * r + c];
                    for (int c = 0; c < 4; ++c)
                      ga[4 * r + c] += inv_norm[r] * (g[4 * r + c] - yg * y[4 * r + c]);
                  }
                });
}

Var canonicalize_last4(Tape& t, Var a) {
  const std::size_t n = rows4(t, a);
  std::vector<double> out = t.value(a);
  std::vector<double> sign(n);
  for (std::size_t r = 0; r < n; ++r) {
    sign[r] = hemisphere_sign(load4(out, r));
    for (int c = 0; c < 4; ++c) out[4 * r + c] *= sign[r];
  }
  return t.push(t.shape(a), std::move(out), {a}, [a, n, sign = std::move(sign)](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(a);
    for (std::size_t r = 0; r < n; ++r)
      for (int c = 0; c < 4; ++c) ga[4 * r + c] += sign[r] * g[4 * r + c];
  });
}

Var conjugate_last4(Tape& t, Var a) {
  const std::size_t n = rows4(t, a);
  std::vector<double> out = t.value(a);
  for (std::size_t r = 0; r < n; ++r)
    for (int c = 1; c < 4; ++c) out[4 * r + c] = -out[4 * r + c];
  return t.push(t.shape(a), std::move(out), {a}, [a, n](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(a);
    for (std::size_t r = 0; r < n; ++r) {
      ga[4 * r] += g[4 * r];
      for (int c = 1; c < 4; ++c) ga[4 * r + c] -= g[4 * r + c];
    }
  });
}

Var hamilton_batch(Tape& t, Var p, Var r) {
  const std::size_t n = rows4(t, p);
  check(rows4(t, r) == n, "hamilton_batch row counts differ");
  const auto& P = t.value(p);
  const auto& R = t.value(r);
  std::vector<double> out(4 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec4 h = hamilton(load4(P, i), load4(R, i));
    std::copy(h.begin(), h.end(), &out[4 * i]);
  }
  return t.push(t.shape(p), std::move(out), {p, r}, [p, r, n](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    // out = T(p) r = T̃(r) p, so dL/dr = T(p)ᵀ g and dL/dp = T̃(r)ᵀ g, where
    // T̃(r) is the right-multiplication matrix of r.
    if (t.requires_grad(r)) {
      const auto& P = t.value(p);
      auto& gr = t.grad(r);
      for (std::size_t i = 0; i < n; ++i) {
        const Mat4 tp = to_matrix(load4(P, i));
        for (int a = 0; a < 4; ++a) {
          double s = 0.0;
          for (int b = 0; b < 4; ++b) s += tp[b][a] * g[4 * i + b];
          gr[4 * i + a] += s;
        }
      }
    }
    if (t.requires_grad(p)) {
      const auto& R = t.value(r);
      auto& gp = t.grad(p);
      for (std::size_t i = 0; i < n; ++i) {
        const double a0 = R[4 * i], b0 = R[4 * i + 1], c0 = R[4 * i + 2], d0 = R[4 * i + 3];
        const Mat4 tr{{
            {a0, -b0, -c0, -d0},
            {b0, a0, d0, -c0},
            {c0, -d0, a0, b0},
            {d0, c0, -b0, a0},
        }};
        for (int a = 0; a < 4; ++a) {
          double s = 0.0;
          for (int b = 0; b < 4; ++b) s += tr[b][a] * g[4 * i + b];
          gp[4 * i + a] += s;
        }
      }
    }
  });
}

Var embed_pure(Tape& t, Var x) {
  const auto& v = t.value(x);
  check(v.size() % 3 == 0, "embed_pure needs [n,3]");
  const std::size_t n = v.size() / 3;
  std::vector<double> out(4 * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) out[4 * i + 1 + c] = v[3 * i + c];
  return t.push({n, 4}, std::move(out), {x}, [x, n](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < n; ++i)
      for (int c = 0; c < 3; ++c) gx[3 * i + c] += g[4 * i + 1 + c];
  });
}

Var vector_part(Tape& t, Var q) {
  const std::size_t n = rows4(t, q);
  const auto& v = t.value(q);
  std::vector<double> out(3 * n);
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) out[3 * i + c] = v[4 * i + 1 + c];
  return t.push({n, 3}, std::move(out), {q}, [q, n](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gq = t.grad(q);
    for (std::size_t i = 0; i < n; ++i)
      for (int c = 0; c < 3; ++c) gq[4 * i + 1 + c] += g[3 * i + c];
  });
}

Var rotate_batch(Tape& t, Var q, Var x) {
  const Var left = hamilton_batch(t, q, embed_pure(t, x));
  return vector_part(t, hamilton_batch(t, left, conjugate_last4(t, q)));
}

Var geodesic_batch(Tape& t, Var a, Var b) {
  const std::size_t n = rows4(t, a);
  check(rows4(t, b) == n, "geodesic_batch row counts differ");
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  std::vector<double> out(n);
  std::vector<double> dfactor(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double d = dot(load4(A, i), load4(B, i));
    const double ad = std::min(std::abs(d), 1.0);
    out[i] = 2.0 * std::acos(ad);
    const double c = std::min(ad, kAcosClamp);
    // dδ/dd = −2 sign(d) / sqrt(1 − d²)
    dfactor[i] = -2.0 * (d >= 0.0 ? 1.0 : -1.0) / std::sqrt(1.0 - c * c);
  }
  return t.push({n}, std::move(out), {a, b}, [a, b, n, dfactor = std::move(dfactor)](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(a)) {
      const auto& B = t.value(b);
      auto& ga = t.grad(a);
      for (std::size_t i = 0; i < n; ++i)
        for (int c = 0; c < 4; ++c) ga[4 * i + c] += g[i] * dfactor[i] * B[4 * i + c];
    }
    if (t.requires_grad(b)) {
      const auto& A = t.value(a);
      auto& gb = t.grad(b);
      for (std::size_t i = 0; i < n; ++i)
        for (int c = 0; c < 4; ++c) gb[4 * i + c] += g[i] * dfactor[i] * A[4 * i + c];
    }
  });
}

Var quat_mean_node(Tape& t, Var sets, Var weights) {
  const Shape& ss = t.shape(sets);
  check(ss.size() == 3 && ss[2] == 4, "quat_mean_node needs sets [B,n,4]");
  const std::size_t nb = ss[0], n = ss[1];
  check(t.value(weights).size() == nb * n, "quat_mean_node weights must be [B,n]");
  const auto& Q = t.value(sets);
  const auto& W = t.value(weights);

  std::vector<DominantEigen> eig(nb);
  std::vector<double> out(4 * nb);
  const auto* qv = reinterpret_cast<const Vec4*>(Q.data());
  for (std::size_t s = 0; s < nb; ++s) {
    eig[s] = weighted_mean_eigen(std::span<const Vec4>(qv + s * n, n),
                                 std::span<const double>(W.data() + s * n, n));
    if (eig[s].degenerate) ++t.degenerate_means;
    const Vec4& v = eig[s].vector.vec();
    std::copy(v.begin(), v.end(), &out[4 * s]);
  }
  return t.push({nb, 4}, std::move(out), {sets, weights},
                [sets, weights, nb, n, eig = std::move(eig)](Tape& t, std::size_t self) {
                  const auto& g = t.grad(self);
                  const auto* qv = reinterpret_cast<const Vec4*>(t.value(sets).data());
                  const auto& W = t.value(weights);
                  const bool want_q = t.requires_grad(sets);
                  const bool want_w = t.requires_grad(weights);
                  Vec4* gq = want_q ? reinterpret_cast<Vec4*>(t.grad(sets).data()) : nullptr;
                  double* gw = want_w ? t.grad(weights).data() : nullptr;
                  for (std::size_t s = 0; s < nb; ++s) {
                    if (eig[s].degenerate) continue;
                    const Vec4 up{g[4 * s], g[4 * s + 1], g[4 * s + 2], g[4 * s + 3]};
                    weighted_mean_backward(
                        std::span<const Vec4>(qv + s * n, n), std::span<const double>(W.data() + s * n, n),
                        eig[s], up, want_q ? std::span<Vec4>(gq + s * n, n) : std::span<Vec4>(),
                        want_w ? std::span<double>(gw + s * n, n) : std::span<double>());
                  }
                });
}

// ---------------------------------------------------------------------------

double spread_loss_value(std::span<const double> a, std::size_t target, double margin) {
  if (target >= a.size()) throw Error(ErrorCode::BadTarget, "target class out of range");
  double loss = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (i == target) continue;
    const double h = margin - (a[target] - a[i]);
    if (h > 0.0) loss += h * h;
  }
  return loss;
}

Var spread_loss(Tape& t, Var activations, std::size_t target, double margin) {
  const auto& a = t.value(activations);
  const double loss = spread_loss_value(a, target, margin);
  return t.push({1}, {loss}, {activations}, [activations, target, margin](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    const auto& a = t.value(activations);
    auto& ga = t.grad(activations);
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (i == target) continue;
      const double h = margin - (a[target] - a[i]);
      if (h <= 0.0) continue;
      ga[i] += g * 2.0 * h;
      ga[target] -= g * 2.0 * h;
    }
  });
}

Var rotation_loss(Tape& t, Var pred, Var truth) {
  check(t.value(pred).size() == 4 && t.value(truth).size() == 4, "rotation_loss needs two 4-vectors");
  const Var p = reshape(t, pred, {1, 4});
  const Var q = reshape(t, truth, {1, 4});
  return reshape(t, geodesic_batch(t, p, q), {1});
}

// ---------------------------------------------------------------------------

void Adam::step(std::vector<Parameter*>& params, const std::vector<std::vector<double>>& grads) {
  check(params.size() == grads.size(), "Adam: parameter/gradient count mismatch");
  if (m_.empty()) {
    for (const auto* p : params) {
      m_.emplace_back(p->value.size(), 0.0);
      v_.emplace_back(p->value.size(), 0.0);
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& val = params[k]->value;
    const auto& g = grads[k];
    check(g.size() == val.size(), "Adam: gradient size mismatch");
    for (std::size_t i = 0; i < val.size(); ++i) {
      m_[k][i] = beta1_ * m_[k][i] + (1.0 - beta1_) * g[i];
      v_[k][i] = beta2_ * v_[k][i] + (1.0 - beta2_) * g[i] * g[i];
      const double mh = m_[k][i] / bc1;
      const double vh = v_[k][i] / bc2;
      val[i] -= lr_ * mh / (std::sqrt(vh) + eps_);
    }
  }
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'Q', 'E', 'C', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kVersion = 1;

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

struct Reader {
  const std::string& s;
  std::size_t pos = 0;

  template <typename U>
  U get() {
    if (pos + sizeof(U) > s.size()) throw Error(ErrorCode::ParseError, "truncated checkpoint");
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(s[pos + i])) << (8 * i);
    pos += sizeof(U);
    return v;
  }
  std::string bytes(std::size_t n) {
    if (pos + n > s.size()) throw Error(ErrorCode::ParseError, "truncated checkpoint");
    std::string out = s.substr(pos, n);
    pos += n;
    return out;
  }
};

}  // namespace

const NamedArray& Checkpoint::at(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return a;
  throw Error(ErrorCode::ParseError, "checkpoint has no array '" + name + "'");
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint64_t>(out, ckpt.manifest.size());
  out += ckpt.manifest;
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.arrays.size()));
  for (const auto& a : ckpt.arrays) {
    check(numel(a.shape) == a.data.size(), "checkpoint array shape mismatch");
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(a.name.size()));
    out += a.name;
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(a.shape.size()));
    for (std::size_t d : a.shape) put_le<std::uint64_t>(out, d);
    for (double v : a.data) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof(bits));
      put_le<std::uint64_t>(out, bits);
    }
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw Error(ErrorCode::ParseError, "not a checkpoint (bad magic)");
  Reader r{bytes, sizeof(kMagic)};
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion)
    throw Error(ErrorCode::ParseError, "unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  ckpt.manifest = r.bytes(r.get<std::uint64_t>());
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t k = 0; k < count; ++k) {
    NamedArray a;
    a.name = r.bytes(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    for (std::uint32_t d = 0; d < rank; ++d) a.shape.push_back(r.get<std::uint64_t>());
    a.data.resize(numel(a.shape));
    for (double& v : a.data) {
      const auto bits = r.get<std::uint64_t>();
      std::memcpy(&v, &bits, sizeof(v));
    }
    ckpt.arrays.push_back(std::move(a));
  }
  if (r.pos != bytes.size()) throw Error(ErrorCode::ParseError, "trailing bytes after checkpoint");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  atomic_write(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace qec::diff
