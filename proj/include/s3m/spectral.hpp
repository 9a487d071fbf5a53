#pragma once

#include <optional>
#include <string>
#include <vector>

#include "s3m/types.hpp"

namespace s3m::spectral {

// Discrete Laplace-Beltrami operator: cotangent stiffness (positive
// semi-definite, rows sum to 0) and lumped vertex mass in mm^2.
struct LaplaceOperator {
  SpMat stiffness;
  VecX mass;
};

// Truncated eigenbasis of the generalized problem  stiffness ψ = Λ diag(mass) ψ,
// mass-orthonormal, eigenvalues ascending, Λ[0] ≈ 0.
struct SpectralBasis {
  int n = 0;
  int m = 0;
  VecX eigenvalues;   // m, ascending
  MatX eigenfunctions;  // n x m
  VecX mass;          // n, carried along for projections
};

// Cotangent-weight stiffness with lumped (1/3 incident area) mass.
// Cotangents are clamped to [-1e4, 1e4]. Face-less inputs fall back to a
// Gaussian-weighted kNN graph Laplacian with unit mass.
LaplaceOperator cotan_laplacian(const Mesh& mesh, int fallback_knn = 10);

// m smallest eigenpairs via blocked shift-invert iteration (dense solve for
// small problems). Each eigenvector's largest-magnitude entry is made positive.
SpectralBasis eigenbasis(const LaplaceOperator& op, int m);

// Spectral coefficients of per-vertex features.
//  - full rows: A = ψᵀ diag(mass) F
//  - row subset (training-time FPS subsample): mass-weighted least squares on
//    the selected ψ rows with a 1e-8 ridge. Requires |subset| >= m.
MatX project_to_basis(const SpectralBasis& basis, const MatX& features,
                      const std::vector<int>* row_subset = nullptr);

// Heat kernel signature over n_times log-spaced scales, columns L2-normalized.
MatX hks_descriptor(const SpectralBasis& basis, int n_times);

// Wave kernel signature over n_energies log-spaced energies, columns L2-normalized.
MatX wks_descriptor(const SpectralBasis& basis, int n_energies);

// Binary blob: magic, header (n, m), payload Λ, ψ row-major, mass (float64).
void write_basis(const SpectralBasis& basis, const std::string& path);
SpectralBasis read_basis(const std::string& path);

}  // namespace s3m::spectral
