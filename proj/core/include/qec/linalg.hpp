#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>

namespace qec {

using Vec3 = std::array<double, 3>;
using Vec4 = std::array<double, 4>;

template <std::size_t N>
using SquareMatrix = std::array<std::array<double, N>, N>;

using Mat3 = SquareMatrix<3>;
using Mat4 = SquareMatrix<4>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }

inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double dot(const Vec4& a, const Vec4& b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3];
}
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline double norm(const Vec4& a) { return std::sqrt(dot(a, a)); }

template <std::size_t N>
SquareMatrix<N> zero_matrix() {
  SquareMatrix<N> m{};
  for (auto& row : m) row.fill(0.0);
  return m;
}

template <std::size_t N>
SquareMatrix<N> identity_matrix() {
  auto m = zero_matrix<N>();
  for (std::size_t i = 0; i < N; ++i) m[i][i] = 1.0;
  return m;
}

template <std::size_t N>
SquareMatrix<N> matmul(const SquareMatrix<N>& a, const SquareMatrix<N>& b) {
  auto c = zero_matrix<N>();
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t k = 0; k < N; ++k)
      for (std::size_t j = 0; j < N; ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

template <std::size_t N>
std::array<double, N> matvec(const SquareMatrix<N>& a, const std::array<double, N>& x) {
  std::array<double, N> y{};
  for (std::size_t i = 0; i < N; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < N; ++j) s += a[i][j] * x[j];
    y[i] = s;
  }
  return y;
}

template <std::size_t N>
SquareMatrix<N> transpose(const SquareMatrix<N>& a) {
  SquareMatrix<N> t{};
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j) t[i][j] = a[j][i];
  return t;
}

/// Eigen-decomposition of a small symmetric matrix. Eigenvalues are sorted
/// in descending order; column k of `vectors` pairs with `values[k]`.
template <std::size_t N>
struct SymEigen {
  std::array<double, N> values{};
  SquareMatrix<N> vectors{};
  int sweeps = 0;

  std::array<double, N> vector(std::size_t k) const {
    std::array<double, N> v{};
    for (std::size_t i = 0; i < N; ++i) v[i] = vectors[i][k];
    return v;
  }
};

/// Cyclic Jacobi rotations until the off-diagonal Frobenius norm drops
/// below `tol` times the matrix Frobenius norm (absolute floor 1e-300).
template <std::size_t N>
SymEigen<N> jacobi_eigen(SquareMatrix<N> a, double tol = 1e-12, int max_sweeps = 100) {
  SymEigen<N> out;
  auto v = identity_matrix<N>();

  double total = 0.0;
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j) total += a[i][j] * a[i][j];
  const double threshold = std::max(tol * std::sqrt(total), 1e-300);

  int sweep = 0;
  for (; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < N; ++p)
      for (std::size_t q = p + 1; q < N; ++q) off += 2.0 * a[p][q] * a[p][q];
    if (std::sqrt(off) < threshold) break;

    for (std::size_t p = 0; p < N; ++p) {
      for (std::size_t q = p + 1; q < N; ++q) {
        const double apq = a[p][q];
        if (apq == 0.0) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        const double tau = s / (1.0 + c);
        a[p][p] -= t * apq;
        a[q][q] += t * apq;
        a[p][q] = a[q][p] = 0.0;
        for (std::size_t r = 0; r < N; ++r) {
          if (r == p || r == q) continue;
          const double arp = a[r][p];
          const double arq = a[r][q];
          a[r][p] = a[p][r] = arp - s * (arq + tau * arp);
          a[r][q] = a[q][r] = arq + s * (arp - tau * arq);
        }
        for (std::size_t r = 0; r < N; ++r) {
          const double vrp = v[r][p];
          const double vrq = v[r][q];
          v[r][p] = vrp - s * (vrq + tau * vrp);
          v[r][q] = vrq + s * (vrp - tau * vrq);
        }
      }
    }
  }
  out.sweeps = sweep;

  std::array<std::size_t, N> order{};
  for (std::size_t i = 0; i < N; ++i) order[i] = i;
  // Stable: equal eigenvalues keep Jacobi's column order, so ties resolve deterministically.
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t l, std::size_t r) { return a[l][l] > a[r][r]; });
  for (std::size_t k = 0; k < N; ++k) {
    out.values[k] = a[order[k]][order[k]];
    for (std::size_t i = 0; i < N; ++i) out.vectors[i][k] = v[i][order[k]];
  }
  return out;
}

}  // namespace qec
