#pragma once

#include <string>
#include <vector>

#include "s3m/rng.hpp"
#include "s3m/types.hpp"

namespace s3m::ssm {

// Linear point distribution model over corresponded, aligned point sets.
// Modes are unit eigenvectors of the sample covariance (1/(N-1) normalization);
// eigenvalues below 1e-12 * max are dropped.
struct PointDistributionModel {
  int n_points = 0;
  int n_train = 0;
  VecX mean;         // 3n, row-major xyz
  VecX eigenvalues;  // descending, kept modes only
  MatX modes;        // n_modes x 3n, orthonormal rows
};

PointDistributionModel build_pdm(const std::vector<MatX>& corresponded);

MatX mean_shape(const PointDistributionModel& pdm);

// s = mean + sum_j alpha_j sqrt(lambda_j) v_j. strict_paper scales by lambda_j
// instead, reproducing the sampling equation exactly as printed.
MatX sample_shape(const PointDistributionModel& pdm, const VecX& alpha, bool strict_paper = false);
MatX sample_shape(const PointDistributionModel& pdm, Rng& rng, bool strict_paper = false);

struct Reconstruction {
  MatX shape;
  VecX coefficients;
};

// Projection onto the retained modes (optionally truncated to the leading
// n_modes). The input must already be rigidly aligned to the model mean.
Reconstruction reconstruct(const PointDistributionModel& pdm, const MatX& shape, int n_modes = 0);

struct MetricStat {
  double mean = 0.0;
  double sd = 0.0;
};

// Chamfer distance between full-resolution originals and their reconstructions
// from template-ordered correspondences (aligned internally to the model mean).
MetricStat generality(const PointDistributionModel& pdm, const std::vector<MatX>& corresponded,
                      const std::vector<MatX>& fullres_originals, int n_modes = 0);

// Minimum Chamfer distance from random samples to the training point sets.
MetricStat specificity(const PointDistributionModel& pdm, const std::vector<MatX>& training_aligned,
                       int n_samples, std::uint64_t seed, bool strict_paper = false);

void write_pdm(const PointDistributionModel& pdm, const std::string& path);
PointDistributionModel read_pdm(const std::string& path);

}  // namespace s3m::ssm
