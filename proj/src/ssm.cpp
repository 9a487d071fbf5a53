#include "s3m/ssm.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <cstring>
#include <fstream>

#include "s3m/geomcore.hpp"

namespace s3m::ssm {

namespace {

VecX flatten(const MatX& shape) {
  VecX flat(shape.rows() * 3);
  for (Eigen::Index i = 0; i < shape.rows(); ++i) flat.segment<3>(3 * i) = shape.row(i).transpose();
  return flat;
}

MatX unflatten(const VecX& flat) {
  MatX shape(flat.size() / 3, 3);
  for (Eigen::Index i = 0; i < shape.rows(); ++i) shape.row(i) = flat.segment<3>(3 * i).transpose();
  return shape;
}

}  // namespace

PointDistributionModel build_pdm(const std::vector<MatX>& corresponded) {
  const int n_shapes = static_cast<int>(corresponded.size());
  if (n_shapes < 2) throw DataError("build_pdm: need at least 2 shapes");
  const Eigen::Index n_points = corresponded[0].rows();
  for (const auto& s : corresponded) {
    if (s.rows() != n_points || s.cols() != 3) throw DataError("build_pdm: cardinality mismatch");
  }

  PointDistributionModel pdm;
  pdm.n_points = static_cast<int>(n_points);
  pdm.n_train = n_shapes;

  MatX y(n_shapes, 3 * n_points);
  for (int i = 0; i < n_shapes; ++i) y.row(i) = flatten(corresponded[i]).transpose();
  pdm.mean = y.colwise().mean().transpose();
  y.rowwise() -= pdm.mean.transpose();

  // Gram trick: eigenpairs of Y Y^T / (N-1) lift to covariance eigenpairs.
  const MatX gram = y * y.transpose() / (n_shapes - 1);
  Eigen::SelfAdjointEigenSolver<MatX> solver(gram);
  if (solver.info() != Eigen::Success) throw NumericalError("build_pdm: eigensolver failed");

  const VecX evals = solver.eigenvalues();  // ascending
  const double lambda_max = std::max(evals[n_shapes - 1], 0.0);
  std::vector<std::pair<double, int>> keep;
  for (int i = n_shapes - 1; i >= 0; --i) {
    if (evals[i] > 1e-12 * lambda_max && evals[i] > 0.0) keep.push_back({evals[i], i});
  }
  const int n_modes = std::min<int>(static_cast<int>(keep.size()), n_shapes - 1);

  pdm.eigenvalues.resize(n_modes);
  pdm.modes.resize(n_modes, 3 * n_points);
  for (int k = 0; k < n_modes; ++k) {
    pdm.eigenvalues[k] = keep[k].first;
    const VecX lifted = y.transpose() * solver.eigenvectors().col(keep[k].second);
    pdm.modes.row(k) = (lifted / lifted.norm()).transpose();
  }
  return pdm;
}

MatX mean_shape(const PointDistributionModel& pdm) { return unflatten(pdm.mean); }

MatX sample_shape(const PointDistributionModel& pdm, const VecX& alpha, bool strict_paper) {
  const int n_modes = static_cast<int>(pdm.eigenvalues.size());
  if (alpha.size() != n_modes) throw DataError("sample_shape: alpha length mismatch");
  VecX flat = pdm.mean;
  for (int k = 0; k < n_modes; ++k) {
    const double scale = strict_paper ? pdm.eigenvalues[k] : std::sqrt(pdm.eigenvalues[k]);
    flat += alpha[k] * scale * pdm.modes.row(k).transpose();
  }
  return unflatten(flat);
}

MatX sample_shape(const PointDistributionModel& pdm, Rng& rng, bool strict_paper) {
  VecX alpha(pdm.eigenvalues.size());
  for (Eigen::Index k = 0; k < alpha.size(); ++k) alpha[k] = rng.normal();
  return sample_shape(pdm, alpha, strict_paper);
}

Reconstruction reconstruct(const PointDistributionModel& pdm, const MatX& shape, int n_modes) {
  if (shape.rows() != pdm.n_points || shape.cols() != 3) {
    throw DataError("reconstruct: shape size mismatch");
  }
  const int total = static_cast<int>(pdm.eigenvalues.size());
  const int used = n_modes > 0 ? std::min(n_modes, total) : total;
  const VecX centered = flatten(shape) - pdm.mean;
  Reconstruction rec;
  rec.coefficients = pdm.modes.topRows(used) * centered;
  rec.shape = unflatten(pdm.mean + pdm.modes.topRows(used).transpose() * rec.coefficients);
  return rec;
}

MetricStat generality(const PointDistributionModel& pdm, const std::vector<MatX>& corresponded,
                      const std::vector<MatX>& fullres_originals, int n_modes) {
  if (corresponded.size() != fullres_originals.size() || corresponded.empty()) {
    throw DataError("generality: shape lists mismatch");
  }
  const MatX mean = mean_shape(pdm);
  std::vector<double> values;
  for (std::size_t i = 0; i < corresponded.size(); ++i) {
    const RigidTransform tf = geom::rigid_align(corresponded[i], mean);
    const Reconstruction rec = reconstruct(pdm, tf.apply(corresponded[i]), n_modes);
    // Back into the original frame before comparing to the full-resolution mesh.
    const MatX back = (rec.shape.rowwise() - tf.translation.transpose()) * tf.rotation;
    values.push_back(geom::chamfer_distance(back, fullres_originals[i]));
  }
  MetricStat stat;
  for (double v : values) stat.mean += v;
  stat.mean /= values.size();
  if (values.size() > 1) {
    for (double v : values) stat.sd += (v - stat.mean) * (v - stat.mean);
    stat.sd = std::sqrt(stat.sd / (values.size() - 1));
  }
  return stat;
}

MetricStat specificity(const PointDistributionModel& pdm, const std::vector<MatX>& training_aligned,
                       int n_samples, std::uint64_t seed, bool strict_paper) {
  if (training_aligned.empty()) throw DataError("specificity: no training shapes");
  if (n_samples < 1) throw DataError("specificity: need n_samples >= 1");
  Rng rng(seed);
  std::vector<double> values;
  values.reserve(n_samples);
  for (int s = 0; s < n_samples; ++s) {
    const MatX sample = sample_shape(pdm, rng, strict_paper);
    double best = std::numeric_limits<double>::infinity();
    for (const auto& train : training_aligned) {
      best = std::min(best, geom::chamfer_distance(sample, train));
    }
    values.push_back(best);
  }
  MetricStat stat;
  for (double v : values) stat.mean += v;
  stat.mean /= values.size();
  if (values.size() > 1) {
    for (double v : values) stat.sd += (v - stat.mean) * (v - stat.mean);
    stat.sd = std::sqrt(stat.sd / (values.size() - 1));
  }
  return stat;
}

void write_pdm(const PointDistributionModel& pdm, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path);
  os.write("S3MPDM1\n", 8);
  auto w32 = [&](std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); };
  w32(static_cast<std::uint32_t>(pdm.n_points));
  w32(static_cast<std::uint32_t>(pdm.eigenvalues.size()));
  w32(static_cast<std::uint32_t>(pdm.n_train));
  os.write(reinterpret_cast<const char*>(pdm.mean.data()), 8LL * pdm.mean.size());
  os.write(reinterpret_cast<const char*>(pdm.eigenvalues.data()), 8LL * pdm.eigenvalues.size());
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = pdm.modes;
  os.write(reinterpret_cast<const char*>(rm.data()), 8LL * rm.size());
}

PointDistributionModel read_pdm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open for reading: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, "S3MPDM1\n", 8) != 0) throw DataError("not a PDM blob: " + path);
  auto r32 = [&]() {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return static_cast<int>(v);
  };
  PointDistributionModel pdm;
  pdm.n_points = r32();
  const int n_modes = r32();
  pdm.n_train = r32();
  pdm.mean.resize(3LL * pdm.n_points);
  is.read(reinterpret_cast<char*>(pdm.mean.data()), 8LL * pdm.mean.size());
  pdm.eigenvalues.resize(n_modes);
  is.read(reinterpret_cast<char*>(pdm.eigenvalues.data()), 8LL * n_modes);
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(n_modes, 3LL * pdm.n_points);
  is.read(reinterpret_cast<char*>(rm.data()), 8LL * rm.size());
  pdm.modes = rm;
  if (!is) throw DataError("truncated PDM blob: " + path);
  return pdm;
}

}  // namespace s3m::ssm
