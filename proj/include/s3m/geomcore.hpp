#pragma once

#include <optional>
#include <string>
#include <vector>

#include "s3m/types.hpp"

namespace s3m::geom {

// --- Isosurface extraction ------------------------------------------------

// Classic 256-case marching cubes. Vertices land on grid edges by linear
// interpolation and are welded per edge, in mm coordinates (index * spacing).
// Throws DataError("empty surface") when no cell crosses the isovalue.
Mesh marching_cubes(const VoxelGrid& grid, double iso);

// --- Sampling and graphs ----------------------------------------------------

// Farthest point sampling with explicit first index. Ties broken by lowest index.
std::vector<int> fps_from(const MatX& points, int target_n, int first_index);

// Farthest point sampling with seeded uniform random initialization.
std::vector<int> fps_subsample(const MatX& points, int target_n, std::uint64_t seed);

// Directed kNN edges symmetrized by union; self excluded; distance ties broken
// by lower index. Throws when k >= n.
KnnGraph knn_graph(const MatX& points, int k);

// --- Alignment and metrics --------------------------------------------------

struct ProcrustesResult {
  std::vector<MatX> aligned;
  std::vector<RigidTransform> transforms;  // aligned[i] = transforms[i].apply(input[i])
  int iterations = 0;
};

// Generalized Procrustes without scaling. Rotations are proper (det = +1).
// Converges when the mean shape moves < 1e-6 mm per vertex or at 50 iterations.
ProcrustesResult procrustes_align(const std::vector<MatX>& shapes);

// Rigid alignment of a single point set onto a target with identical ordering.
RigidTransform rigid_align(const MatX& source, const MatX& target);

// Symmetric mean nearest-neighbor distance (unsquared, in mm).
double chamfer_distance(const MatX& a, const MatX& b);

// --- Mesh utilities -----------------------------------------------------------

// Keeps the largest vertex-connected component (by vertex count; first wins ties).
Mesh largest_component(const Mesh& mesh);

bool is_connected(const Mesh& mesh);

// Area-weighted vertex normals; falls back to directions from the centroid
// for face-less inputs.
MatX vertex_normals(const Mesh& mesh);

double bounding_diameter(const MatX& points);

// Restrict a mesh to a vertex subset (faces are dropped).
Mesh subset_mesh(const Mesh& mesh, const std::vector<int>& indices);

void validate_mesh(const Mesh& mesh);

// --- I/O ---------------------------------------------------------------------

// ASCII OFF.
void write_off(const Mesh& mesh, const std::string& path);
Mesh read_off(const std::string& path);

// Binary little-endian PLY: float64 vertices, uint32 face indices.
void write_ply(const Mesh& mesh, const std::string& path);
Mesh read_ply(const std::string& path);

// Raw voxel format: magic "S3MVOX1\n", uint32 dims[3], float64 spacing[3],
// uint32 dtype (0 = float64, 1 = uint8), then the payload, x-fastest.
void write_voxels(const VoxelGrid& grid, const std::string& path, bool as_uint8 = false);
VoxelGrid read_voxels(const std::string& path);

Mesh read_mesh_auto(const std::string& path);  // dispatch on extension

}  // namespace s3m::geom
