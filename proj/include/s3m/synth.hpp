#pragma once

#include <string>
#include <vector>

#include "s3m/correspond.hpp"
#include "s3m/types.hpp"

namespace s3m::synth {

// Sphere tessellations used as shared parameterizations.
Mesh make_icosphere(int subdivisions, double radius = 1.0);
Mesh make_uv_sphere(int rings, int segments, double radius = 1.0);

enum class BaseShape { Ellipsoid, TwoLobe, MultiLobe };

struct FamilySpec {
  BaseShape base = BaseShape::Ellipsoid;
  Vec3 semi_axes{30.0, 20.0, 15.0};  // mm
  int n_shapes = 10;
  double deform_amplitude = 0.05;  // fraction of diameter
  int deform_modes = 6;
  double noise_sigma = 0.0;        // fraction of diameter, radial per-vertex
  double rotation_max_deg = 0.0;   // random rigid rotation per member
  bool remesh = false;             // voxelize + marching cubes path
  bool label_noise = false;        // random voxel flips (implies remesh)
  double label_flip_prob = 0.002;
  int voxel_res = 48;
  std::uint64_t seed = 1;
  int resolution = 1500;  // target vertex count

  static FamilySpec from_kv_text(const std::string& text);
  static FamilySpec from_kv_file(const std::string& path);
  std::string to_kv_text() const;
  bool operator==(const FamilySpec& other) const;
};

struct Family {
  FamilySpec spec;
  Mesh base;                                  // undeformed shared parameterization
  std::vector<Mesh> shapes;
  std::vector<std::vector<int>> gt_to_base;   // per shape: vertex -> base index
  bool exact_gt = true;                       // false on the remesh path
  std::vector<VoxelGrid> grids;               // only on the remesh path
};

// Deforms a shared parametric base per member; exact identity ground truth on
// the clean path, nearest-neighbor (approximate) ground truth after remeshing.
Family generate_family(const FamilySpec& spec);

struct CorrErrorStats {
  double mean_mm = 0.0;
  double frac_within_1pct = 0.0;
  double frac_within_5pct = 0.0;
  double frac_within_10pct = 0.0;
};

// Mean Euclidean distance on the target between predicted and ground-truth
// correspondents, plus fractions within 1/5/10% of the target diameter.
CorrErrorStats correspondence_error(const corresp::PointMap& predicted,
                                    const corresp::PointMap& gt, const MatX& target_points);

// Same metric with explicit ground-truth target positions per source vertex.
CorrErrorStats correspondence_error_positions(const std::vector<int>& predicted,
                                              const MatX& target_points,
                                              const MatX& gt_positions);

// Directory layout: manifest.txt, base.ply, shape_###.ply, gt_###.csv.
void write_family(const Family& family, const std::string& dir);
Family read_family(const std::string& dir);

}  // namespace s3m::synth
