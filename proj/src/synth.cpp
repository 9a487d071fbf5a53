#include "s3m/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "s3m/geomcore.hpp"
#include "s3m/kdtree.hpp"
#include "s3m/kv.hpp"
#include "s3m/rng.hpp"

namespace s3m {

KeyValues read_kv_file(const std::string& path) { return KeyValues::parse_text(read_text_file(path)); }

void write_kv_file(const KeyValues& kv, const std::string& path) { write_text_file(kv.emit(), path); }

std::string read_text_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open for reading: " + path);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

void write_text_file(const std::string& text, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open for writing: " + path);
  os << text;
}

namespace synth {

// ---------------------------------------------------------------------------
// Sphere tessellations

Mesh make_icosphere(int subdivisions, double radius) {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3> verts = {
      {-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
      {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1},
  };
  std::vector<std::array<int, 3>> faces = {
      {0, 11, 5}, {0, 5, 1}, {0, 1, 7}, {0, 7, 10}, {0, 10, 11},
      {1, 5, 9}, {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
      {3, 9, 4}, {3, 4, 2}, {3, 2, 6}, {3, 6, 8}, {3, 8, 9},
      {4, 9, 5}, {2, 4, 11}, {6, 2, 10}, {8, 6, 7}, {9, 8, 1},
  };
  for (auto& v : verts) v.normalize();

  for (int s = 0; s < subdivisions; ++s) {
    std::map<std::pair<int, int>, int> midpoint;
    auto mid = [&](int a, int b) {
      const auto key = std::minmax(a, b);
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      verts.push_back(((verts[a] + verts[b]) * 0.5).normalized());
      const int id = static_cast<int>(verts.size()) - 1;
      midpoint.emplace(key, id);
      return id;
    };
    std::vector<std::array<int, 3>> next;
    next.reserve(faces.size() * 4);
    for (const auto& f : faces) {
      const int ab = mid(f[0], f[1]), bc = mid(f[1], f[2]), ca = mid(f[2], f[0]);
      next.push_back({f[0], ab, ca});
      next.push_back({f[1], bc, ab});
      next.push_back({f[2], ca, bc});
      next.push_back({ab, bc, ca});
    }
    faces = std::move(next);
  }

  Mesh mesh;
  mesh.vertices.resize(static_cast<int>(verts.size()), 3);
  for (std::size_t i = 0; i < verts.size(); ++i) {
    mesh.vertices.row(static_cast<int>(i)) = radius * verts[i].transpose();
  }
  mesh.faces = std::move(faces);
  return mesh;
}

Mesh make_uv_sphere(int rings, int segments, double radius) {
  if (rings < 2 || segments < 3) throw DataError("make_uv_sphere: need rings >= 2, segments >= 3");
  Mesh mesh;
  const int n = rings * segments + 2;
  mesh.vertices.resize(n, 3);
  mesh.vertices.row(0) = Eigen::RowVector3d(0, 0, radius);
  mesh.vertices.row(n - 1) = Eigen::RowVector3d(0, 0, -radius);
  auto vid = [&](int r, int s) { return 1 + r * segments + (s % segments); };
  for (int r = 0; r < rings; ++r) {
    const double phi = M_PI * (r + 1) / (rings + 1);
    for (int s = 0; s < segments; ++s) {
      const double theta = 2.0 * M_PI * s / segments;
      mesh.vertices.row(vid(r, s)) =
          radius * Eigen::RowVector3d(std::sin(phi) * std::cos(theta),
                                      std::sin(phi) * std::sin(theta), std::cos(phi));
    }
  }
  for (int s = 0; s < segments; ++s) mesh.faces.push_back({0, vid(0, s), vid(0, s + 1)});
  for (int r = 0; r + 1 < rings; ++r) {
    for (int s = 0; s < segments; ++s) {
      mesh.faces.push_back({vid(r, s), vid(r + 1, s), vid(r + 1, s + 1)});
      mesh.faces.push_back({vid(r, s), vid(r + 1, s + 1), vid(r, s + 1)});
    }
  }
  for (int s = 0; s < segments; ++s) {
    mesh.faces.push_back({n - 1, vid(rings - 1, s + 1), vid(rings - 1, s)});
  }
  return mesh;
}

// ---------------------------------------------------------------------------
// FamilySpec round-trip

namespace {

std::string base_name(BaseShape b) {
  switch (b) {
    case BaseShape::Ellipsoid: return "ellipsoid";
    case BaseShape::TwoLobe: return "two_lobe";
    case BaseShape::MultiLobe: return "multi_lobe";
  }
  return "ellipsoid";
}

BaseShape base_from_name(const std::string& s) {
  if (s == "ellipsoid") return BaseShape::Ellipsoid;
  if (s == "two_lobe") return BaseShape::TwoLobe;
  if (s == "multi_lobe") return BaseShape::MultiLobe;
  throw DataError("unknown base shape: " + s);
}

}  // namespace

FamilySpec FamilySpec::from_kv_text(const std::string& text) {
  const KeyValues kv = KeyValues::parse_text(text);
  FamilySpec spec;
  spec.base = base_from_name(kv.get("base", base_name(spec.base)));
  spec.semi_axes[0] = kv.get_double("semi_axis_x", spec.semi_axes[0]);
  spec.semi_axes[1] = kv.get_double("semi_axis_y", spec.semi_axes[1]);
  spec.semi_axes[2] = kv.get_double("semi_axis_z", spec.semi_axes[2]);
  spec.n_shapes = static_cast<int>(kv.get_int("n_shapes", spec.n_shapes));
  spec.deform_amplitude = kv.get_double("deform_amplitude", spec.deform_amplitude);
  spec.deform_modes = static_cast<int>(kv.get_int("deform_modes", spec.deform_modes));
  spec.noise_sigma = kv.get_double("noise_sigma", spec.noise_sigma);
  spec.rotation_max_deg = kv.get_double("rotation_max_deg", spec.rotation_max_deg);
  spec.remesh = kv.get_bool("remesh", spec.remesh);
  spec.label_noise = kv.get_bool("label_noise", spec.label_noise);
  spec.label_flip_prob = kv.get_double("label_flip_prob", spec.label_flip_prob);
  spec.voxel_res = static_cast<int>(kv.get_int("voxel_res", spec.voxel_res));
  spec.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(spec.seed)));
  spec.resolution = static_cast<int>(kv.get_int("resolution", spec.resolution));
  if (spec.n_shapes < 2) throw DataError("family spec: n_shapes must be >= 2");
  if (spec.deform_amplitude < 0 || spec.noise_sigma < 0) throw DataError("family spec: negative amplitude");
  if (spec.resolution < 500) throw DataError("family spec: resolution must yield >= 500 vertices");
  return spec;
}

FamilySpec FamilySpec::from_kv_file(const std::string& path) {
  return from_kv_text(read_text_file(path));
}

std::string FamilySpec::to_kv_text() const {
  KeyValues kv;
  kv.set("base", base_name(base));
  kv.set_double("semi_axis_x", semi_axes[0]);
  kv.set_double("semi_axis_y", semi_axes[1]);
  kv.set_double("semi_axis_z", semi_axes[2]);
  kv.set_int("n_shapes", n_shapes);
  kv.set_double("deform_amplitude", deform_amplitude);
  kv.set_int("deform_modes", deform_modes);
  kv.set_double("noise_sigma", noise_sigma);
  kv.set_double("rotation_max_deg", rotation_max_deg);
  kv.set_int("remesh", remesh ? 1 : 0);
  kv.set_int("label_noise", label_noise ? 1 : 0);
  kv.set_double("label_flip_prob", label_flip_prob);
  kv.set_int("voxel_res", voxel_res);
  kv.set_int("seed", static_cast<long long>(seed));
  kv.set_int("resolution", resolution);
  return kv.emit();
}

bool FamilySpec::operator==(const FamilySpec& o) const {
  return base == o.base && semi_axes == o.semi_axes && n_shapes == o.n_shapes &&
         deform_amplitude == o.deform_amplitude && deform_modes == o.deform_modes &&
         noise_sigma == o.noise_sigma && rotation_max_deg == o.rotation_max_deg &&
         remesh == o.remesh && label_noise == o.label_noise &&
         label_flip_prob == o.label_flip_prob && voxel_res == o.voxel_res && seed == o.seed &&
         resolution == o.resolution;
}

// ---------------------------------------------------------------------------
// Family generation

namespace {

struct Bump {
  Vec3 dir;
  double amp = 0.0;
  double width = 0.3;
};

// Star-shaped analytic model: p(u) = (semi_axes ∘ u) * base(u) * (1 + deform(u)).
struct RadialModel {
  Vec3 semi_axes;
  std::vector<Bump> base_bumps;
  std::vector<Bump> deform_bumps;

  double base_profile(const Vec3& u) const {
    double r = 1.0;
    for (const auto& b : base_bumps) r += b.amp * std::exp((u.dot(b.dir) - 1.0) / b.width);
    return r;
  }
  double deform_field(const Vec3& u) const {
    double d = 0.0;
    for (const auto& b : deform_bumps) d += b.amp * std::exp((u.dot(b.dir) - 1.0) / b.width);
    return d;
  }
  Vec3 point_at(const Vec3& u) const {
    return semi_axes.cwiseProduct(u) * (base_profile(u) * (1.0 + deform_field(u)));
  }
  bool inside(const Vec3& p) const {
    const Vec3 w = p.cwiseQuotient(semi_axes);
    const double wn = w.norm();
    if (wn < 1e-12) return true;
    const Vec3 u = w / wn;
    return p.norm() <= point_at(u).norm();
  }
};

std::vector<Bump> base_bumps_for(BaseShape base) {
  switch (base) {
    case BaseShape::Ellipsoid:
      return {};
    case BaseShape::TwoLobe:
      return {{Vec3(1, 0, 0), 0.9, 0.18}, {Vec3(-1, 0, 0), 0.9, 0.18}};
    case BaseShape::MultiLobe:
      return {{Vec3(1, 0, 0), 0.8, 0.15},
              {Vec3(-0.5, 0, std::sqrt(3.0) / 2.0), 0.8, 0.15},
              {Vec3(-0.5, 0, -std::sqrt(3.0) / 2.0), 0.8, 0.15}};
  }
  return {};
}

Vec3 random_unit(Rng& rng) {
  Vec3 v;
  do {
    v = Vec3(rng.normal(), rng.normal(), rng.normal());
  } while (v.norm() < 1e-9);
  return v.normalized();
}

Mat3 random_rotation(Rng& rng, double max_angle_rad) {
  const Vec3 axis = random_unit(rng);
  const double angle = rng.uniform() * max_angle_rad;
  return Eigen::AngleAxisd(angle, axis).toRotationMatrix();
}

int rings_for_resolution(int resolution) {
  // uv-sphere vertex count is 2 r^2 + 2 with segments = 2 r
  return std::max(3, static_cast<int>(std::lround(std::sqrt((resolution - 2) / 2.0))));
}

}  // namespace

Family generate_family(const FamilySpec& spec) {
  if (spec.n_shapes < 2) throw DataError("generate_family: n_shapes must be >= 2");
  Family family;
  family.spec = spec;

  const int rings = rings_for_resolution(spec.resolution);
  const Mesh sphere = make_uv_sphere(rings, 2 * rings);
  const int n = sphere.n_vertices();

  RadialModel base_model;
  base_model.semi_axes = spec.semi_axes;
  base_model.base_bumps = base_bumps_for(spec.base);

  family.base = sphere;
  for (int i = 0; i < n; ++i) {
    const Vec3 u = sphere.vertices.row(i).transpose();
    family.base.vertices.row(i) = base_model.point_at(u).transpose();
  }
  const double diameter = geom::bounding_diameter(family.base.vertices);
  const bool remesh = spec.remesh || spec.label_noise;
  family.exact_gt = !remesh;

  Rng rng(spec.seed);
  for (int s = 0; s < spec.n_shapes; ++s) {
    RadialModel model = base_model;
    bool valid = false;
    for (int attempt = 0; attempt < 10 && !valid; ++attempt) {
      model.deform_bumps.clear();
      const double amp_scale =
          spec.deform_modes > 0
              ? 2.0 * spec.deform_amplitude / std::sqrt(static_cast<double>(spec.deform_modes))
              : 0.0;
      for (int b = 0; b < spec.deform_modes; ++b) {
        Bump bump;
        bump.dir = random_unit(rng);
        bump.amp = amp_scale * (2.0 * rng.uniform() - 1.0) * 1.5;
        bump.width = rng.uniform(0.1, 0.5);
        if (spec.deform_amplitude == 0.0) bump.amp = 0.0;
        model.deform_bumps.push_back(bump);
      }
      valid = true;
      for (int i = 0; i < n && valid; ++i) {
        const Vec3 u = sphere.vertices.row(i).transpose();
        if (1.0 + model.deform_field(u) < 0.2) valid = false;
      }
    }
    if (!valid) throw DataError("generate_family: could not draw a valid deformation in 10 attempts");

    // Clean deformed instance on the shared parameterization.
    Mesh clean = sphere;
    for (int i = 0; i < n; ++i) {
      const Vec3 u = sphere.vertices.row(i).transpose();
      clean.vertices.row(i) = model.point_at(u).transpose();
    }

    Mesh shape;
    std::vector<int> gt;
    if (!remesh) {
      shape = clean;
      if (spec.noise_sigma > 0.0) {
        for (int i = 0; i < n; ++i) {
          const Vec3 dir = Vec3(shape.vertices.row(i).transpose()).normalized();
          shape.vertices.row(i) += (spec.noise_sigma * diameter * rng.normal()) * dir.transpose();
        }
      }
      gt.resize(n);
      for (int i = 0; i < n; ++i) gt[i] = i;
    } else {
      // Voxelize the analytic model, corrupt, and re-extract the surface.
      const Vec3 lo = clean.vertices.colwise().minCoeff().transpose() - Vec3::Constant(0.08 * diameter);
      const Vec3 hi = clean.vertices.colwise().maxCoeff().transpose() + Vec3::Constant(0.08 * diameter);
      VoxelGrid grid;
      grid.dims = {spec.voxel_res, spec.voxel_res, spec.voxel_res};
      for (int a = 0; a < 3; ++a) grid.spacing[a] = (hi[a] - lo[a]) / (spec.voxel_res - 1);
      grid.data.resize(static_cast<std::size_t>(spec.voxel_res) * spec.voxel_res * spec.voxel_res);
      for (int z = 0; z < spec.voxel_res; ++z)
        for (int y = 0; y < spec.voxel_res; ++y)
          for (int x = 0; x < spec.voxel_res; ++x) {
            const Vec3 p = lo + Vec3(x * grid.spacing[0], y * grid.spacing[1], z * grid.spacing[2]);
            grid.data[grid.index(x, y, z)] = model.inside(p) ? 1.0 : 0.0;
          }
      if (spec.label_noise && spec.label_flip_prob > 0.0) {
        for (auto& v : grid.data) {
          if (rng.uniform() < spec.label_flip_prob) v = 1.0 - v;
        }
      }
      shape = geom::largest_component(geom::marching_cubes(grid, 0.5));
      shape.vertices.rowwise() += lo.transpose();
      if (spec.noise_sigma > 0.0) {
        const MatX normals = geom::vertex_normals(shape);
        for (int i = 0; i < shape.n_vertices(); ++i) {
          shape.vertices.row(i) += (spec.noise_sigma * diameter * rng.normal()) * normals.row(i);
        }
      }
      if (shape.n_vertices() > spec.resolution) {
        const auto keep = geom::fps_subsample(shape.vertices, spec.resolution, rng.next_u64());
        shape = geom::subset_mesh(shape, keep);
      }
      // Approximate ground truth: nearest clean vertex (shared base indexing).
      KdTree tree(clean.vertices);
      gt.resize(shape.n_vertices());
      for (int i = 0; i < shape.n_vertices(); ++i) {
        gt[i] = tree.nearest(shape.vertices.row(i).transpose()).index;
      }
      family.grids.push_back(std::move(grid));
    }

    if (spec.rotation_max_deg > 0.0) {
      const Mat3 rot = random_rotation(rng, spec.rotation_max_deg * M_PI / 180.0);
      const Vec3 centroid = shape.vertices.colwise().mean().transpose();
      shape.vertices =
          ((shape.vertices.rowwise() - centroid.transpose()) * rot.transpose()).rowwise() +
          centroid.transpose();
    }

    geom::validate_mesh(shape);
    family.shapes.push_back(std::move(shape));
    family.gt_to_base.push_back(std::move(gt));
  }
  return family;
}

// ---------------------------------------------------------------------------
// Evaluation

CorrErrorStats correspondence_error_positions(const std::vector<int>& predicted,
                                              const MatX& target_points,
                                              const MatX& gt_positions) {
  if (static_cast<Eigen::Index>(predicted.size()) != gt_positions.rows()) {
    throw DataError("correspondence_error: size mismatch");
  }
  const double diameter = geom::bounding_diameter(target_points);
  CorrErrorStats stats;
  const int n = static_cast<int>(predicted.size());
  if (n == 0) throw DataError("correspondence_error: empty map");
  for (int v = 0; v < n; ++v) {
    const double err = (target_points.row(predicted[v]) - gt_positions.row(v)).norm();
    stats.mean_mm += err;
    if (err <= 0.01 * diameter) stats.frac_within_1pct += 1.0;
    if (err <= 0.05 * diameter) stats.frac_within_5pct += 1.0;
    if (err <= 0.10 * diameter) stats.frac_within_10pct += 1.0;
  }
  stats.mean_mm /= n;
  stats.frac_within_1pct /= n;
  stats.frac_within_5pct /= n;
  stats.frac_within_10pct /= n;
  return stats;
}

CorrErrorStats correspondence_error(const corresp::PointMap& predicted,
                                    const corresp::PointMap& gt, const MatX& target_points) {
  if (predicted.assignment.size() != gt.assignment.size()) {
    throw DataError("correspondence_error: maps cover different source sizes");
  }
  MatX gt_pos(static_cast<Eigen::Index>(gt.assignment.size()), 3);
  for (std::size_t v = 0; v < gt.assignment.size(); ++v) {
    gt_pos.row(static_cast<Eigen::Index>(v)) = target_points.row(gt.assignment[v]);
  }
  return correspondence_error_positions(predicted.assignment, target_points, gt_pos);
}

// ---------------------------------------------------------------------------
// Family I/O

void write_family(const Family& family, const std::string& dir) {
  std::filesystem::create_directories(dir);
  write_text_file(family.spec.to_kv_text(), dir + "/manifest.txt");
  geom::write_ply(family.base, dir + "/base.ply");
  char name[64];
  for (std::size_t i = 0; i < family.shapes.size(); ++i) {
    std::snprintf(name, sizeof(name), "/shape_%03zu.ply", i);
    geom::write_ply(family.shapes[i], dir + name);
    corresp::PointMap gt;
    gt.source_id = static_cast<int>(i);
    gt.target_id = -1;  // the shared base
    gt.assignment = family.gt_to_base[i];
    gt.bijective = family.exact_gt;
    std::snprintf(name, sizeof(name), "/gt_%03zu.csv", i);
    corresp::write_pointmap_csv(gt, dir + name);
  }
}

Family read_family(const std::string& dir) {
  Family family;
  family.spec = FamilySpec::from_kv_file(dir + "/manifest.txt");
  family.base = geom::read_ply(dir + "/base.ply");
  family.exact_gt = !(family.spec.remesh || family.spec.label_noise);
  char name[64];
  for (int i = 0; i < family.spec.n_shapes; ++i) {
    std::snprintf(name, sizeof(name), "/shape_%03d.ply", i);
    family.shapes.push_back(geom::read_ply(dir + name));
    std::snprintf(name, sizeof(name), "/gt_%03d.csv", i);
    family.gt_to_base.push_back(corresp::read_pointmap_csv(dir + name).assignment);
  }
  return family;
}

}  // namespace synth
}  // namespace s3m
