#include "satts/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace satts {

Matrix::Matrix(int rows, int cols, double fill) : rows_(rows), cols_(cols) {
  if (rows < 0 || cols < 0) fail_shape("Matrix: negative dimensions");
  data_.assign(static_cast<size_t>(rows) * static_cast<size_t>(cols), fill);
}

Matrix Matrix::identity(int n) {
  Matrix m(n, n);
  for (int i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::from_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return Matrix();
  const int r = static_cast<int>(rows.size());
  const int c = static_cast<int>(rows[0].size());
  Matrix m(r, c);
  for (int i = 0; i < r; ++i) {
    if (static_cast<int>(rows[i].size()) != c) fail_shape("Matrix::from_rows: ragged rows");
    std::copy(rows[i].begin(), rows[i].end(), m.row(i));
  }
  return m;
}

namespace numkit {

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) fail_shape("matmul: inner dimensions disagree");
  Matrix out(a.rows(), b.cols());
  for (int i = 0; i < a.rows(); ++i) {
    const double* ai = a.row(i);
    double* oi = out.row(i);
    for (int k = 0; k < a.cols(); ++k) {
      const double aik = ai[k];
      if (aik == 0.0) continue;
      const double* bk = b.row(k);
      for (int j = 0; j < b.cols(); ++j) oi[j] += aik * bk[j];
    }
  }
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

void axpy(Matrix& a, double s, const Matrix& b) {
  if (!a.same_shape(b)) fail_shape("axpy: shape mismatch");
  double* pa = a.data();
  const double* pb = b.data();
  for (size_t i = 0; i < a.size(); ++i) pa[i] += s * pb[i];
}

double frobenius_norm(const Matrix& a) {
  double s = 0.0;
  const double* p = a.data();
  for (size_t i = 0; i < a.size(); ++i) s += p[i] * p[i];
  return std::sqrt(s);
}

std::vector<double> col_mean(const Matrix& a) {
  if (a.rows() == 0) fail_shape("col_mean: empty matrix");
  std::vector<double> mu(static_cast<size_t>(a.cols()), 0.0);
  for (int i = 0; i < a.rows(); ++i) {
    const double* r = a.row(i);
    for (int j = 0; j < a.cols(); ++j) mu[static_cast<size_t>(j)] += r[j];
  }
  for (double& v : mu) v /= a.rows();
  return mu;
}

Matrix center_rows(const Matrix& a, const std::vector<double>& mu) {
  if (static_cast<int>(mu.size()) != a.cols()) fail_shape("center_rows: mean length mismatch");
  Matrix out(a.rows(), a.cols());
  for (int i = 0; i < a.rows(); ++i) {
    const double* r = a.row(i);
    double* o = out.row(i);
    for (int j = 0; j < a.cols(); ++j) o[j] = r[j] - mu[static_cast<size_t>(j)];
  }
  return out;
}

MeanCov covariance(const Matrix& x) {
  if (x.rows() < 1) fail_shape("covariance: need at least one sample row");
  std::vector<double> mu = col_mean(x);
  const Matrix xc = center_rows(x, mu);
  const int n = x.rows(), d = x.cols();
  Matrix cov(d, d);
  for (int i = 0; i < n; ++i) {
    const double* r = xc.row(i);
    for (int a = 0; a < d; ++a) {
      const double ra = r[a];
      if (ra == 0.0) continue;
      double* ca = cov.row(a);
      for (int b = 0; b < d; ++b) ca[b] += ra * r[b];
    }
  }
  const double inv_n = 1.0 / n;
  for (int a = 0; a < d; ++a)
    for (int b = 0; b < d; ++b) cov(a, b) *= inv_n;
  // Symmetrize away accumulation-order asymmetry.
  for (int a = 0; a < d; ++a)
    for (int b = a + 1; b < d; ++b) {
      const double v = 0.5 * (cov(a, b) + cov(b, a));
      cov(a, b) = v;
      cov(b, a) = v;
    }
  return {std::move(mu), std::move(cov)};
}

EigResult sym_eig(const Matrix& s, bool clamp_negative) {
  const int n = s.rows();
  if (n != s.cols()) fail_shape("sym_eig: matrix must be square");
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (std::abs(s(i, j) - s(j, i)) > 1e-9 * (1.0 + std::abs(s(i, j))))
        fail_validation("sym_eig: input is not symmetric");

  Matrix a = s;
  Matrix v = Matrix::identity(n);
  const double scale = frobenius_norm(s);
  const double tol = 1e-12 * (scale > 0.0 ? scale : 1.0);

  // Cyclic Jacobi sweeps; each rotation zeroes one off-diagonal pair.
  const int max_sweeps = 100;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (std::sqrt(2.0 * off) <= tol) break;

    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) <= tol / (n * n + 1.0)) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double sn = t * c;
        for (int k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - sn * akq;
          a(k, q) = sn * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - sn * aqk;
          a(q, k) = sn * apk + c * aqk;
        }
        for (int k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - sn * vkq;
          v(k, q) = sn * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int x, int y) { return a(x, x) > a(y, y); });

  EigResult res;
  res.values.resize(static_cast<size_t>(n));
  res.vectors = Matrix(n, n);
  const double clamp_tol = 1e-12 * (scale > 1.0 ? scale : 1.0);
  for (int j = 0; j < n; ++j) {
    double lam = a(order[static_cast<size_t>(j)], order[static_cast<size_t>(j)]);
    if (clamp_negative && lam < 0.0) {
      if (lam < -clamp_tol) fail_numeric("sym_eig: negative eigenvalue beyond round-off");
      lam = 0.0;
    }
    res.values[static_cast<size_t>(j)] = lam;
    for (int i = 0; i < n; ++i) res.vectors(i, j) = v(i, order[static_cast<size_t>(j)]);
  }
  // Sign convention: make the largest-magnitude component of each column positive.
  for (int j = 0; j < n; ++j) {
    int arg = 0;
    double best = 0.0;
    for (int i = 0; i < n; ++i) {
      const double m = std::abs(res.vectors(i, j));
      if (m > best) { best = m; arg = i; }
    }
    if (res.vectors(arg, j) < 0.0)
      for (int i = 0; i < n; ++i) res.vectors(i, j) = -res.vectors(i, j);
  }
  return res;
}

QrPivotResult qr_pivot(const Matrix& a) {
  const int m = a.rows(), n = a.cols();
  if (m == 0 || n == 0) fail_shape("qr_pivot: empty matrix");

  // Work on a column copy; residual norms are recomputed exactly after each
  // projection step (no downdating) to keep pivot choices stable.
  std::vector<std::vector<double>> cols(static_cast<size_t>(n),
                                        std::vector<double>(static_cast<size_t>(m)));
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < m; ++i) cols[static_cast<size_t>(j)][static_cast<size_t>(i)] = a(i, j);

  auto norm2 = [m](const std::vector<double>& v) {
    double s = 0.0;
    for (int i = 0; i < m; ++i) s += v[static_cast<size_t>(i)] * v[static_cast<size_t>(i)];
    return s;
  };

  double init_max = 0.0;
  for (int j = 0; j < n; ++j) init_max = std::max(init_max, std::sqrt(norm2(cols[static_cast<size_t>(j)])));
  const double eps_rank = 1e-12 * (init_max > 0.0 ? init_max : 1.0);

  QrPivotResult res;
  std::vector<bool> used(static_cast<size_t>(n), false);
  const int steps = std::min(m, n);

  for (int step = 0; step < steps; ++step) {
    int pick = -1;
    double best = -1.0;
    for (int j = 0; j < n; ++j) {
      if (used[static_cast<size_t>(j)]) continue;
      const double nj = std::sqrt(norm2(cols[static_cast<size_t>(j)]));
      if (nj > best) {  // strict >, so ties keep the lowest index
        best = nj;
        pick = j;
      }
    }
    if (pick < 0 || best <= eps_rank) break;

    used[static_cast<size_t>(pick)] = true;
    res.pivots.push_back(pick);
    res.rank = static_cast<int>(res.pivots.size());

    // Normalize the chosen column, then strip its component from the rest.
    std::vector<double> q = cols[static_cast<size_t>(pick)];
    const double qn = std::sqrt(norm2(q));
    for (double& x : q) x /= qn;
    for (int j = 0; j < n; ++j) {
      if (used[static_cast<size_t>(j)]) continue;
      auto& cj = cols[static_cast<size_t>(j)];
      double dot = 0.0;
      for (int i = 0; i < m; ++i) dot += q[static_cast<size_t>(i)] * cj[static_cast<size_t>(i)];
      for (int i = 0; i < m; ++i) cj[static_cast<size_t>(i)] -= dot * q[static_cast<size_t>(i)];
    }
  }

  for (int j = 0; j < n; ++j)
    if (!used[static_cast<size_t>(j)]) res.pivots.push_back(j);
  return res;
}

GaussianParams make_gaussian(const std::vector<double>& mean, const Matrix& cov,
                             double eps_scale) {
  const int d = static_cast<int>(mean.size());
  if (cov.rows() != d || cov.cols() != d) fail_shape("make_gaussian: covariance shape mismatch");
  if (eps_scale < 0.0) fail_validation("make_gaussian: eps_scale must be nonnegative");

  Matrix c = cov;
  if (eps_scale > 0.0) {
    double tr = 0.0;
    for (int i = 0; i < d; ++i) tr += c(i, i);
    const double eps = std::max(eps_scale * tr / d, 1e-12);
    for (int i = 0; i < d; ++i) c(i, i) += eps;
  }

  // Cholesky, lower triangular.
  Matrix l(d, d);
  double log_det = 0.0;
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j <= i; ++j) {
      double s = c(i, j);
      for (int k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      if (i == j) {
        if (s <= 0.0) fail_numeric("make_gaussian: covariance is not positive definite");
        l(i, i) = std::sqrt(s);
        log_det += 2.0 * std::log(l(i, i));
      } else {
        l(i, j) = s / l(j, j);
      }
    }
  }

  GaussianParams g;
  g.mean = mean;
  g.cov = std::move(c);
  g.chol = std::move(l);
  g.log_det = log_det;
  g.dim = d;
  return g;
}

double gauss_logpdf(const double* z, const GaussianParams& g) {
  const int d = g.dim;
  // Solve L w = (z - mean); quadratic form is then |w|^2.
  std::vector<double> w(static_cast<size_t>(d));
  for (int i = 0; i < d; ++i) {
    double s = z[i] - g.mean[static_cast<size_t>(i)];
    for (int k = 0; k < i; ++k) s -= g.chol(i, k) * w[static_cast<size_t>(k)];
    w[static_cast<size_t>(i)] = s / g.chol(i, i);
  }
  double quad = 0.0;
  for (int i = 0; i < d; ++i) quad += w[static_cast<size_t>(i)] * w[static_cast<size_t>(i)];
  return -0.5 * (d * std::log(2.0 * std::numbers::pi) + g.log_det + quad);
}

double gauss_logpdf(const std::vector<double>& z, const GaussianParams& g) {
  if (static_cast<int>(z.size()) != g.dim) fail_shape("gauss_logpdf: dimension mismatch");
  return gauss_logpdf(z.data(), g);
}

}  // namespace numkit
}  // namespace satts
