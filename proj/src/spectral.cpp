#include "s3m/spectral.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SparseCholesky>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "s3m/geomcore.hpp"
#include "s3m/rng.hpp"

namespace s3m::spectral {

namespace {

constexpr double kCotClamp = 1e4;

LaplaceOperator graph_laplacian_fallback(const Mesh& mesh, int k) {
  const int n = mesh.n_vertices();
  KnnGraph g = geom::knn_graph(mesh.vertices, std::min(k, n - 1));

  double mean_d = 0.0;
  int count = 0;
  for (int i = 0; i < n; ++i) {
    for (int j : g.neighbors[i]) {
      mean_d += (mesh.vertices.row(i) - mesh.vertices.row(j)).norm();
      ++count;
    }
  }
  mean_d /= std::max(count, 1);
  const double h2 = std::max(mean_d * mean_d, 1e-12);

  std::vector<Eigen::Triplet<double>> trip;
  VecX diag = VecX::Zero(n);
  for (int i = 0; i < n; ++i) {
    for (int j : g.neighbors[i]) {
      const double d2 = (mesh.vertices.row(i) - mesh.vertices.row(j)).squaredNorm();
      const double w = std::exp(-d2 / (2.0 * h2));
      trip.emplace_back(i, j, -w);
      diag[i] += w;
    }
  }
  for (int i = 0; i < n; ++i) trip.emplace_back(i, i, diag[i]);

  LaplaceOperator op;
  op.stiffness.resize(n, n);
  op.stiffness.setFromTriplets(trip.begin(), trip.end());
  op.mass = VecX::Ones(n);
  return op;
}

}  // namespace

LaplaceOperator cotan_laplacian(const Mesh& mesh, int fallback_knn) {
  const int n = mesh.n_vertices();
  if (n < 4) throw DataError("cotan_laplacian: need at least 4 vertices");
  if (!mesh.has_faces()) return graph_laplacian_fallback(mesh, fallback_knn);
  if (!geom::is_connected(mesh)) {
    throw DataError("cotan_laplacian: mesh is disconnected; split components first");
  }

  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(mesh.faces.size() * 12);
  VecX diag = VecX::Zero(n);
  VecX mass = VecX::Zero(n);

  for (const auto& f : mesh.faces) {
    const Vec3 p0 = mesh.vertices.row(f[0]);
    const Vec3 p1 = mesh.vertices.row(f[1]);
    const Vec3 p2 = mesh.vertices.row(f[2]);
    const double area = 0.5 * (p1 - p0).cross(p2 - p0).norm();
    for (int k = 0; k < 3; ++k) mass[f[k]] += area / 3.0;

    // cot of the angle at corner k weights the opposite edge (i, j).
    for (int k = 0; k < 3; ++k) {
      const int i = f[(k + 1) % 3], j = f[(k + 2) % 3];
      const Vec3 a = mesh.vertices.row(f[k]);
      const Vec3 u = Vec3(mesh.vertices.row(i).transpose()) - a;
      const Vec3 v = Vec3(mesh.vertices.row(j).transpose()) - a;
      const double cross = u.cross(v).norm();
      double cot = cross > 1e-300 ? u.dot(v) / cross : kCotClamp;
      cot = std::clamp(cot, -kCotClamp, kCotClamp);
      const double w = 0.5 * cot;
      trip.emplace_back(i, j, -w);
      trip.emplace_back(j, i, -w);
      diag[i] += w;
      diag[j] += w;
    }
  }
  for (int i = 0; i < n; ++i) trip.emplace_back(i, i, diag[i]);

  // Guard against zero lumped mass at vertices touched only by degenerate faces.
  const double floor = std::max(mass.sum(), 1e-300) / n * 1e-10;
  for (int i = 0; i < n; ++i) mass[i] = std::max(mass[i], floor);

  LaplaceOperator op;
  op.stiffness.resize(n, n);
  op.stiffness.setFromTriplets(trip.begin(), trip.end());
  op.mass = mass;
  return op;
}

namespace {

void fix_signs(MatX& psi) {
  for (Eigen::Index c = 0; c < psi.cols(); ++c) {
    int arg = 0;
    double best = -1.0;
    for (Eigen::Index r = 0; r < psi.rows(); ++r) {
      const double a = std::abs(psi(r, c));
      if (a > best) {
        best = a;
        arg = static_cast<int>(r);
      }
    }
    if (psi(arg, c) < 0.0) psi.col(c) *= -1.0;
  }
}

SpectralBasis dense_eigenbasis(const LaplaceOperator& op, int m) {
  const int n = static_cast<int>(op.mass.size());
  MatX s = MatX(op.stiffness);
  MatX mm = MatX(op.mass.asDiagonal());
  Eigen::GeneralizedSelfAdjointEigenSolver<MatX> solver(s, mm);
  if (solver.info() != Eigen::Success) throw NumericalError("dense generalized eigensolver failed");
  SpectralBasis basis;
  basis.n = n;
  basis.m = m;
  basis.eigenvalues = solver.eigenvalues().head(m).cwiseMax(0.0);
  basis.eigenfunctions = solver.eigenvectors().leftCols(m);
  basis.mass = op.mass;
  fix_signs(basis.eigenfunctions);
  return basis;
}

// Gram-Schmidt in the mass inner product, two passes per column.
void m_orthonormalize(MatX& x, const VecX& mass) {
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    for (int pass = 0; pass < 2; ++pass) {
      for (Eigen::Index p = 0; p < c; ++p) {
        const double dot = x.col(p).dot(mass.cwiseProduct(x.col(c)));
        x.col(c) -= dot * x.col(p);
      }
    }
    const double nrm = std::sqrt(x.col(c).dot(mass.cwiseProduct(x.col(c))));
    if (nrm < 1e-300) throw NumericalError("eigenbasis: block lost rank during orthonormalization");
    x.col(c) /= nrm;
  }
}

}  // namespace

SpectralBasis eigenbasis(const LaplaceOperator& op, int m) {
  const int n = static_cast<int>(op.mass.size());
  if (m < 1 || m >= n) throw DataError("eigenbasis: need 1 <= m < n");
  if ((op.mass.array() <= 0.0).any()) throw DataError("eigenbasis: mass must be positive");

  if (n <= 600 || 3 * m >= n) return dense_eigenbasis(op, m);

  // Shift-invert block subspace iteration on (S + tau M)^-1 M.
  const double lambda_avg = (op.stiffness.diagonal().array() / op.mass.array()).mean();
  const double tau = std::max(1e-12, 1e-4 * lambda_avg);
  SpMat shifted = op.stiffness;
  for (int i = 0; i < n; ++i) shifted.coeffRef(i, i) += tau * op.mass[i];
  shifted.makeCompressed();
  Eigen::SimplicialLDLT<SpMat> chol(shifted);
  if (chol.info() != Eigen::Success) throw NumericalError("eigenbasis: factorization failed");

  const int p = std::min(n - 1, m + std::max(10, m / 2));
  Rng rng(0x534d4549ULL + static_cast<std::uint64_t>(n) * 1315423911ULL + static_cast<std::uint64_t>(m));
  MatX x(n, p);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < p; ++c) x(i, c) = rng.normal();
  m_orthonormalize(x, op.mass);

  VecX ritz = VecX::Zero(p);
  const int max_iters = 300;
  const double tol = 1e-9;
  double worst_residual = std::numeric_limits<double>::infinity();

  for (int it = 0; it < max_iters; ++it) {
    MatX y = chol.solve(op.mass.asDiagonal() * x);
    m_orthonormalize(y, op.mass);
    const MatX sy = op.stiffness * y;
    const MatX h = y.transpose() * sy;
    Eigen::SelfAdjointEigenSolver<MatX> small(0.5 * (h + h.transpose()));
    x = y * small.eigenvectors();
    ritz = small.eigenvalues();

    if (it % 3 == 2 || it == max_iters - 1) {
      worst_residual = 0.0;
      for (int c = 0; c < m; ++c) {
        const VecX sx = op.stiffness * x.col(c);
        const VecX mx = op.mass.cwiseProduct(x.col(c));
        // The null mode has ||S x|| ~ 0; fall back to a spectrum-scale floor.
        const double denom = std::max({sx.norm(), 1e-3 * lambda_avg * mx.norm(), 1e-300});
        worst_residual = std::max(worst_residual, (sx - ritz[c] * mx).norm() / denom);
      }
      if (worst_residual < tol) break;
    }
  }
  if (worst_residual >= 1e-6) {
    std::ostringstream msg;
    msg << "eigenbasis: no convergence after " << max_iters
        << " iterations; worst relative residual " << worst_residual;
    throw NumericalError(msg.str());
  }

  SpectralBasis basis;
  basis.n = n;
  basis.m = m;
  basis.eigenvalues = ritz.head(m).cwiseMax(0.0);
  basis.eigenfunctions = x.leftCols(m);
  basis.mass = op.mass;
  fix_signs(basis.eigenfunctions);
  return basis;
}

MatX project_to_basis(const SpectralBasis& basis, const MatX& features,
                      const std::vector<int>* row_subset) {
  if (!features.allFinite()) throw DataError("project_to_basis: non-finite features");
  if (row_subset == nullptr) {
    if (features.rows() != basis.n) throw DataError("project_to_basis: feature rows != basis n");
    return basis.eigenfunctions.transpose() * basis.mass.asDiagonal() * features;
  }

  const int ns = static_cast<int>(row_subset->size());
  if (ns < basis.m) throw DataError("project_to_basis: subset smaller than m is rank-deficient");

  MatX psi_s(ns, basis.m);
  VecX mass_s(ns);
  for (int r = 0; r < ns; ++r) {
    const int v = (*row_subset)[r];
    if (v < 0 || v >= basis.n) throw DataError("project_to_basis: subset index out of range");
    psi_s.row(r) = basis.eigenfunctions.row(v);
    mass_s[r] = basis.mass[v];
  }
  MatX f_s;
  if (features.rows() == ns) {
    f_s = features;
  } else if (features.rows() == basis.n) {
    f_s.resize(ns, features.cols());
    for (int r = 0; r < ns; ++r) f_s.row(r) = features.row((*row_subset)[r]);
  } else {
    throw DataError("project_to_basis: feature rows match neither n nor subset size");
  }

  MatX normal = psi_s.transpose() * mass_s.asDiagonal() * psi_s;
  normal.diagonal().array() += 1e-8;
  return normal.ldlt().solve(psi_s.transpose() * (mass_s.asDiagonal() * f_s));
}

namespace {

// First eigenvalue above numerical zero; throws when the tail is all zero.
double first_positive(const VecX& lambda) {
  for (Eigen::Index i = 0; i < lambda.size(); ++i) {
    if (lambda[i] > 1e-12) return lambda[i];
  }
  throw DataError("spectral descriptor: all nonzero modes vanish");
}

void l2_normalize_columns(MatX& d) {
  for (Eigen::Index c = 0; c < d.cols(); ++c) {
    const double nrm = d.col(c).norm();
    if (nrm > 1e-300) d.col(c) /= nrm;
  }
}

}  // namespace

MatX hks_descriptor(const SpectralBasis& basis, int n_times) {
  if (n_times < 1) throw DataError("hks_descriptor: need n_times >= 1");
  const double l1 = first_positive(basis.eigenvalues);
  const double lmax = basis.eigenvalues[basis.m - 1];
  if (lmax <= 1e-12) throw DataError("hks_descriptor: degenerate spectrum");
  const double t_min = 4.0 * std::log(10.0) / lmax;
  const double t_max = 4.0 * std::log(10.0) / l1;

  MatX d = MatX::Zero(basis.n, n_times);
  for (int c = 0; c < n_times; ++c) {
    const double frac = n_times > 1 ? static_cast<double>(c) / (n_times - 1) : 0.0;
    const double t = t_min * std::pow(t_max / t_min, frac);
    for (int k = 0; k < basis.m; ++k) {
      d.col(c) += std::exp(-basis.eigenvalues[k] * t) *
                  basis.eigenfunctions.col(k).array().square().matrix();
    }
  }
  l2_normalize_columns(d);
  return d;
}

MatX wks_descriptor(const SpectralBasis& basis, int n_energies) {
  if (n_energies < 1) throw DataError("wks_descriptor: need n_energies >= 1");
  const double l1 = first_positive(basis.eigenvalues);
  const double lmax = basis.eigenvalues[basis.m - 1];
  const double e_min = std::log(l1);
  const double e_max = std::log(lmax);
  const double step = (e_max - e_min) / std::max(1, n_energies - 1);
  const double var = std::max(7.0 * step, 1e-6);

  MatX d = MatX::Zero(basis.n, n_energies);
  for (int c = 0; c < n_energies; ++c) {
    const double e = n_energies > 1 ? e_min + c * step : 0.5 * (e_min + e_max);
    for (int k = 0; k < basis.m; ++k) {
      if (basis.eigenvalues[k] <= 1e-12) continue;
      const double de = e - std::log(basis.eigenvalues[k]);
      d.col(c) += std::exp(-de * de / (2.0 * var)) *
                  basis.eigenfunctions.col(k).array().square().matrix();
    }
  }
  l2_normalize_columns(d);
  return d;
}

void write_basis(const SpectralBasis& basis, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path);
  os.write("S3MBAS1\n", 8);
  const std::uint32_t n = basis.n, m = basis.m;
  os.write(reinterpret_cast<const char*>(&n), 4);
  os.write(reinterpret_cast<const char*>(&m), 4);
  os.write(reinterpret_cast<const char*>(basis.eigenvalues.data()), 8LL * basis.m);
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = basis.eigenfunctions;
  os.write(reinterpret_cast<const char*>(rm.data()), 8LL * basis.n * basis.m);
  os.write(reinterpret_cast<const char*>(basis.mass.data()), 8LL * basis.n);
}

SpectralBasis read_basis(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open for reading: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, "S3MBAS1\n", 8) != 0) throw DataError("not a basis blob: " + path);
  std::uint32_t n = 0, m = 0;
  is.read(reinterpret_cast<char*>(&n), 4);
  is.read(reinterpret_cast<char*>(&m), 4);
  SpectralBasis basis;
  basis.n = static_cast<int>(n);
  basis.m = static_cast<int>(m);
  basis.eigenvalues.resize(basis.m);
  is.read(reinterpret_cast<char*>(basis.eigenvalues.data()), 8LL * basis.m);
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(basis.n, basis.m);
  is.read(reinterpret_cast<char*>(rm.data()), 8LL * basis.n * basis.m);
  basis.eigenfunctions = rm;
  basis.mass.resize(basis.n);
  is.read(reinterpret_cast<char*>(basis.mass.data()), 8LL * basis.n);
  if (!is) throw DataError("truncated basis blob: " + path);
  return basis;
}

}  // namespace s3m::spectral
