// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0

#include "serq/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace serq {

Tensor2D cholesky(const Tensor2D& a) {
  if (a.rows() != a.cols()) throw std::invalid_argument("cholesky: matrix is not square");
  const std::size_t n = a.rows();
  Tensor2D l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0) || !std::isfinite(d)) {
      throw std::runtime_error("cholesky: matrix not positive definite at pivot " +
                               std::to_string(j));
    }
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return l;
}

Tensor2D spd_inverse(const Tensor2D& a) {
  const Tensor2D l = cholesky(a);
  const std::size_t n = l.rows();
  // Invert L (lower-triangular), then A⁻¹ = L⁻ᵀ L⁻¹.
  Tensor2D linv(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    linv(j, j) = 1.0 / l(j, j);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = 0.0;
      for (std::size_t k = j; k < i; ++k) s -= l(i, k) * linv(k, j);
      linv(i, j) = s / l(i, i);
    }
  }
  Tensor2D inv(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = 0.0;
      for (std::size_t k = i; k < n; ++k) s += linv(k, i) * linv(k, j);
      inv(i, j) = s;
      inv(j, i) = s;
    }
  }
  return inv;
}

namespace {

// One-sided Jacobi on the columns of a tall matrix (m >= n). Columns are kept
// as contiguous rows of `cols` / `vecs` for cache friendliness.
SvdResult jacobi_tall(const Tensor2D& a, const SvdOptions& options) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  Tensor2D cols = transpose(a);            // n × m
  Tensor2D vecs = Tensor2D::identity(n);   // row j = column j of V
  const std::size_t cap = options.max_sweeps ? options.max_sweeps : std::max<std::size_t>(10 * n, 1);

  bool converged = n < 2;
  for (std::size_t sweep = 0; sweep < cap && !converged; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double* up = cols.row(p).data();
        double* uq = cols.row(q).data();
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += up[i] * up[i];
          beta += uq[i] * uq[i];
          gamma += up[i] * uq[i];
        }
        if (gamma == 0.0 || std::abs(gamma) <= options.tolerance * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double x = up[i];
          const double y = uq[i];
          up[i] = c * x - s * y;
          uq[i] = s * x + c * y;
        }
        double* vp = vecs.row(p).data();
        double* vq = vecs.row(q).data();
        for (std::size_t i = 0; i < n; ++i) {
          const double x = vp[i];
          const double y = vq[i];
          vp[i] = c * x - s * y;
          vq[i] = s * x + c * y;
        }
      }
    }
    converged = !rotated;
  }
  if (!converged) {
    throw std::runtime_error("jacobi_svd: no convergence within " + std::to_string(cap) + " sweeps");
  }

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (double v : cols.row(j)) s += v * v;
    sigma[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

  SvdResult out{Tensor2D(m, n), std::vector<double>(n), Tensor2D(n, n)};
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    out.sigma[k] = sigma[j];
    if (sigma[j] > 0.0) {
      for (std::size_t i = 0; i < m; ++i) out.u(i, k) = cols(j, i) / sigma[j];
    }
    for (std::size_t i = 0; i < n; ++i) out.v(i, k) = vecs(j, i);
  }
  return out;
}

void normalize_signs(SvdResult& r) {
  for (std::size_t k = 0; k < r.sigma.size(); ++k) {
    double lead = 0.0;
    for (std::size_t i = 0; i < r.u.rows() && lead == 0.0; ++i) lead = r.u(i, k);
    if (lead < 0.0) {
      for (std::size_t i = 0; i < r.u.rows(); ++i) r.u(i, k) = -r.u(i, k);
      for (std::size_t i = 0; i < r.v.rows(); ++i) r.v(i, k) = -r.v(i, k);
    }
  }
}

}  // namespace

SvdResult jacobi_svd(const Tensor2D& a, const SvdOptions& options) {
  require_finite(a, "jacobi_svd");
  SvdResult r;
  if (a.rows() >= a.cols()) {
    r = jacobi_tall(a, options);
  } else {
    SvdResult t = jacobi_tall(transpose(a), options);
    r = SvdResult{std::move(t.v), std::move(t.sigma), std::move(t.u)};
  }
  normalize_signs(r);
  return r;
}

Tensor2D low_rank_reconstruct(const SvdResult& svd, std::size_t rank) {
  if (rank > svd.sigma.size()) throw std::invalid_argument("low_rank_reconstruct: rank too large");
  Tensor2D out(svd.u.rows(), svd.v.rows());
  for (std::size_t k = 0; k < rank; ++k) {
    for (std::size_t i = 0; i < out.rows(); ++i) {
      const double a = svd.u(i, k) * svd.sigma[k];
      if (a == 0.0) continue;
      for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += a * svd.v(j, k);
    }
  }
  return out;
}

}  // namespace serq
