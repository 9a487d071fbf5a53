#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "s3m/geomcore.hpp"
#include "s3m/rng.hpp"
#include "s3m/spectral.hpp"
#include "s3m/synth.hpp"

using namespace s3m;
using namespace s3m::spectral;

namespace {

Mesh bumpy_sphere(int rings, int segments, std::uint64_t seed, double bump = 0.15) {
  Mesh m = synth::make_uv_sphere(rings, segments);
  Rng rng(seed);
  for (int i = 0; i < m.n_vertices(); ++i) {
    m.vertices.row(i) *= 1.0 + bump * (2.0 * rng.uniform() - 1.0);
  }
  return m;
}

double mass_norm(const MatX& f, const VecX& mass) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < f.rows(); ++i) s += mass[i] * f.row(i).squaredNorm();
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("cotan laplacian: regular tetrahedron has equal weights, zero row sums") {
  Mesh tet;
  tet.vertices.resize(4, 3);
  tet.vertices << 1, 1, 1, 1, -1, -1, -1, 1, -1, -1, -1, 1;
  tet.faces = {{0, 1, 2}, {0, 3, 1}, {0, 2, 3}, {1, 3, 2}};
  LaplaceOperator op = cotan_laplacian(tet);
  const MatX s(op.stiffness);
  const double w01 = s(0, 1);
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) {
      if (i != j) CHECK(s(i, j) == doctest::Approx(w01).epsilon(1e-12));
    }
    CHECK(std::abs(s.row(i).sum()) < 1e-12);
  }
  CHECK((op.mass.array() > 0).all());
}

TEST_CASE("cotan laplacian: constant vector in the null space") {
  Mesh m = bumpy_sphere(8, 16, 3);
  LaplaceOperator op = cotan_laplacian(m);
  const VecX one = VecX::Ones(m.n_vertices());
  const double row_norm = MatX(op.stiffness).cwiseAbs().rowwise().sum().maxCoeff();
  CHECK((op.stiffness * one).cwiseAbs().maxCoeff() < 1e-8 * row_norm);
  // Symmetry
  const MatX s(op.stiffness);
  CHECK((s - s.transpose()).cwiseAbs().maxCoeff() < 1e-12 * row_norm);
}

TEST_CASE("cotan laplacian: disconnected mesh is rejected") {
  Mesh m;
  m.vertices.resize(8, 3);
  m.vertices << 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 9, 9, 9, 10, 9, 9, 9, 10, 9, 9, 9, 10;
  m.faces = {{0, 1, 2}, {0, 2, 3}, {4, 5, 6}, {4, 6, 7}};
  CHECK_THROWS_AS(cotan_laplacian(m), DataError);
}

TEST_CASE("eigenbasis: icosphere spectrum matches l(l+1) with multiplicities") {
  Mesh sphere = synth::make_icosphere(3);  // 642 vertices, iterative path
  LaplaceOperator op = cotan_laplacian(sphere);
  SpectralBasis basis = eigenbasis(op, 20);

  CHECK(basis.eigenvalues[0] < 1e-8);
  // psi_0 is constant
  const VecX psi0 = basis.eigenfunctions.col(0);
  CHECK((psi0.array() - psi0.mean()).abs().maxCoeff() < 1e-6 * std::abs(psi0.mean()));

  // clusters: l = 1 (3 values near 2), l = 2 (5 near 6), l = 3 (7 near 12)
  int at = 1;
  for (int l = 1; l <= 3; ++l) {
    const double expected = l * (l + 1.0);
    for (int c = 0; c < 2 * l + 1; ++c, ++at) {
      CHECK(std::abs(basis.eigenvalues[at] - expected) < 0.05 * expected);
    }
  }
  // ascending
  for (int k = 1; k < 20; ++k) CHECK(basis.eigenvalues[k] >= basis.eigenvalues[k - 1]);

  // mass-orthonormality
  const MatX gram =
      basis.eigenfunctions.transpose() * basis.mass.asDiagonal() * basis.eigenfunctions;
  CHECK((gram - MatX::Identity(20, 20)).cwiseAbs().maxCoeff() < 1e-6);

  // eigenpair residuals (k >= 1; the null pair is certified by its eigenvalue)
  for (int k = 1; k < 20; ++k) {
    const VecX sx = op.stiffness * basis.eigenfunctions.col(k);
    const VecX mx = op.mass.cwiseProduct(basis.eigenfunctions.col(k));
    CHECK((sx - basis.eigenvalues[k] * mx).norm() / sx.norm() < 1e-6);
  }
}

TEST_CASE("eigenbasis: rigid invariance and scale covariance of the spectrum") {
  Mesh m = bumpy_sphere(9, 18, 7);
  SpectralBasis a = eigenbasis(cotan_laplacian(m), 8);

  Mesh rotated = m;
  Mat3 rot;
  rot = Eigen::AngleAxisd(0.83, Vec3(1, 2, -1).normalized());
  rotated.vertices = (m.vertices * rot.transpose()).rowwise() + Eigen::RowVector3d(4, -7, 2);
  SpectralBasis b = eigenbasis(cotan_laplacian(rotated), 8);
  for (int k = 1; k < 8; ++k) {
    CHECK(std::abs(a.eigenvalues[k] - b.eigenvalues[k]) < 1e-8 * a.eigenvalues[k]);
  }

  Mesh scaled = m;
  const double s = 3.7;
  scaled.vertices *= s;
  SpectralBasis c = eigenbasis(cotan_laplacian(scaled), 8);
  for (int k = 1; k < 8; ++k) {
    CHECK(std::abs(c.eigenvalues[k] - a.eigenvalues[k] / (s * s)) < 1e-8 * a.eigenvalues[k]);
  }
}

TEST_CASE("project_to_basis: identity on the eigenfunctions, constants, subset path") {
  Mesh m = bumpy_sphere(7, 14, 5);
  SpectralBasis basis = eigenbasis(cotan_laplacian(m), 10);

  // F = psi -> coefficients are the identity
  const MatX a_id = project_to_basis(basis, basis.eigenfunctions);
  CHECK((a_id - MatX::Identity(10, 10)).cwiseAbs().maxCoeff() < 1e-6);

  // constant column c: only the first coefficient survives, = c * sqrt(total mass)
  const double c = 2.5;
  const MatX f_const = MatX::Constant(basis.n, 1, c);
  const MatX a_const = project_to_basis(basis, f_const);
  CHECK(std::abs(std::abs(a_const(0, 0)) - c * std::sqrt(basis.mass.sum())) < 1e-6);
  for (int k = 1; k < 10; ++k) CHECK(std::abs(a_const(k, 0)) < 1e-6);

  // subset = all rows matches the full path
  Rng rng(11);
  MatX f(basis.n, 4);
  for (int i = 0; i < basis.n; ++i)
    for (int j = 0; j < 4; ++j) f(i, j) = rng.normal();
  std::vector<int> all(basis.n);
  for (int i = 0; i < basis.n; ++i) all[i] = i;
  const MatX a_full = project_to_basis(basis, f);
  const MatX a_sub = project_to_basis(basis, f, &all);
  CHECK((a_full - a_sub).cwiseAbs().maxCoeff() < 1e-5 * std::max(1.0, a_full.cwiseAbs().maxCoeff()));

  // subsets smaller than m are rank-deficient by construction
  std::vector<int> tiny(all.begin(), all.begin() + 5);
  CHECK_THROWS_AS(project_to_basis(basis, f, &tiny), DataError);

  // projection then reconstruction is a non-expansive smoother in the mass norm
  const MatX recon = basis.eigenfunctions * a_full;
  CHECK(mass_norm(recon, basis.mass) <= mass_norm(f, basis.mass) + 1e-9);
}

TEST_CASE("hks/wks: limits, determinism, sphere homogeneity") {
  Mesh m = bumpy_sphere(7, 14, 9);
  SpectralBasis basis = eigenbasis(cotan_laplacian(m), 12);

  const MatX hks = hks_descriptor(basis, 8);
  const MatX hks2 = hks_descriptor(basis, 8);
  CHECK((hks - hks2).cwiseAbs().maxCoeff() == 0.0);  // bitwise on the same basis
  CHECK(hks.rows() == basis.n);
  CHECK(hks.cols() == 8);
  for (int c = 0; c < 8; ++c) CHECK(hks.col(c).norm() == doctest::Approx(1.0).epsilon(1e-9));

  // large-t column approaches the constant psi_0^2 profile
  const VecX last = hks.col(7);
  CHECK((last.array() - last.mean()).abs().maxCoeff() < 0.01 * last.mean());

  const MatX wks = wks_descriptor(basis, 8);
  CHECK(wks.rows() == basis.n);
  for (int c = 0; c < 8; ++c) CHECK(wks.col(c).norm() == doctest::Approx(1.0).epsilon(1e-9));

  // homogeneous space: HKS nearly constant over a sphere
  Mesh ico = synth::make_icosphere(2);
  SpectralBasis sb = eigenbasis(cotan_laplacian(ico), 16);
  const MatX shks = hks_descriptor(sb, 5);
  for (int c = 0; c < 5; ++c) {
    const double mean = shks.col(c).mean();
    CHECK((shks.col(c).array() - mean).abs().maxCoeff() < 0.02 * mean);
  }

  // degenerate spectrum rejected
  SpectralBasis flat = basis;
  flat.eigenvalues.setZero();
  CHECK_THROWS_AS(hks_descriptor(flat, 4), DataError);
  CHECK_THROWS_AS(wks_descriptor(flat, 4), DataError);
}

TEST_CASE("point-cloud fallback laplacian") {
  Mesh cloud = bumpy_sphere(7, 14, 13);
  cloud.faces.clear();
  LaplaceOperator op = cotan_laplacian(cloud, 8);
  CHECK((op.mass.array() == 1.0).all());
  SpectralBasis basis = eigenbasis(op, 6);
  CHECK(basis.eigenvalues[0] < 1e-8);
  for (int k = 1; k < 6; ++k) CHECK(basis.eigenvalues[k] >= 0.0);
}

TEST_CASE("basis io round trip") {
  Mesh m = bumpy_sphere(6, 12, 17);
  SpectralBasis basis = eigenbasis(cotan_laplacian(m), 7);
  write_basis(basis, "/tmp/s3m_test_basis.bin");
  SpectralBasis back = read_basis("/tmp/s3m_test_basis.bin");
  CHECK(back.n == basis.n);
  CHECK(back.m == basis.m);
  CHECK((back.eigenvalues - basis.eigenvalues).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.eigenfunctions - basis.eigenfunctions).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.mass - basis.mass).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("eigenbasis rejects bad truncation orders") {
  Mesh m = bumpy_sphere(5, 10, 19);
  LaplaceOperator op = cotan_laplacian(m);
  CHECK_THROWS_AS(eigenbasis(op, 0), DataError);
  CHECK_THROWS_AS(eigenbasis(op, m.n_vertices()), DataError);
}
