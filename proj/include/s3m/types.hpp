#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace s3m {

using MatX = Eigen::MatrixXd;
using VecX = Eigen::VectorXd;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using SpMat = Eigen::SparseMatrix<double>;
using SpMatRM = Eigen::SparseMatrix<double, Eigen::RowMajor>;

// Malformed or inconsistent input data (bad mesh, missing file, size mismatch).
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// A numerical procedure failed (non-convergence, singular system).
struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// Triangle surface mesh in mm. Faces may be empty (pure point cloud).
struct Mesh {
  MatX vertices;                          // n x 3
  std::vector<std::array<int, 3>> faces;  // indices into vertices

  int n_vertices() const { return static_cast<int>(vertices.rows()); }
  bool has_faces() const { return !faces.empty(); }
};

// Scalar samples on a regular grid, x-fastest layout, spacing in mm/voxel.
struct VoxelGrid {
  std::array<int, 3> dims{0, 0, 0};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::vector<double> data;

  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(dims[0]) *
               (static_cast<std::size_t>(y) + static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(z));
  }
  double at(int x, int y, int z) const { return data[index(x, y, z)]; }
  void validate() const;
};

// Union-symmetrized k-nearest-neighbor graph.
struct KnnGraph {
  int n = 0;
  int k = 0;
  std::vector<std::vector<int>> neighbors;  // sorted, self excluded
  SpMat adjacency;                          // symmetric 0/1
  SpMatRM normalized;                       // random-walk D^-1 A; isolated rows fall back to self-loop
  SpMatRM normalized_t;                     // transpose cached for adjoint passes

  int degree(int v) const { return static_cast<int>(neighbors[v].size()); }
};

struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  MatX apply(const MatX& points) const {
    return (points * rotation.transpose()).rowwise() + translation.transpose();
  }
};

}  // namespace s3m
