#include "s3m/geomcore.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

#include "s3m/kdtree.hpp"
#include "s3m/mc_tables.hpp"
#include "s3m/rng.hpp"

namespace s3m {

void VoxelGrid::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (dims[a] < 2) throw DataError("voxel grid dims must be >= 2 along every axis");
    if (!(spacing[a] > 0.0)) throw DataError("voxel grid spacing must be positive");
  }
  const std::size_t expect = static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  if (data.size() != expect) throw DataError("voxel grid payload size does not match dims");
}

namespace geom {

// ---------------------------------------------------------------------------
// Marching cubes

namespace {

// Offsets of the 8 cell corners, Lorensen/Bourke ordering.
constexpr int kCorner[8][3] = {
    {0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
    {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1},
};

}  // namespace

Mesh marching_cubes(const VoxelGrid& grid, double iso) {
  grid.validate();
  const int nx = grid.dims[0], ny = grid.dims[1], nz = grid.dims[2];

  // Welding key: global grid edge = 3 * point index + axis.
  auto point_id = [&](int x, int y, int z) -> std::uint64_t {
    return static_cast<std::uint64_t>(x) +
           static_cast<std::uint64_t>(nx) * (static_cast<std::uint64_t>(y) +
                                             static_cast<std::uint64_t>(ny) * static_cast<std::uint64_t>(z));
  };

  std::unordered_map<std::uint64_t, int> edge_vertex;
  std::vector<Vec3> verts;
  std::vector<std::array<int, 3>> faces;

  auto edge_point = [&](int cx, int cy, int cz, int edge) -> int {
    const int a = kMcEdgeCorners[edge][0], b = kMcEdgeCorners[edge][1];
    const int ax = cx + kCorner[a][0], ay = cy + kCorner[a][1], az = cz + kCorner[a][2];
    const int bx = cx + kCorner[b][0], by = cy + kCorner[b][1], bz = cz + kCorner[b][2];
    // Axis along which the edge runs, and its lower endpoint.
    int axis = 0;
    if (ay != by) axis = 1;
    if (az != bz) axis = 2;
    const int lx = std::min(ax, bx), ly = std::min(ay, by), lz = std::min(az, bz);
    const std::uint64_t key = 3 * point_id(lx, ly, lz) + static_cast<std::uint64_t>(axis);
    auto it = edge_vertex.find(key);
    if (it != edge_vertex.end()) return it->second;

    const double va = grid.at(ax, ay, az), vb = grid.at(bx, by, bz);
    double t = (vb != va) ? (iso - va) / (vb - va) : 0.5;
    t = std::clamp(t, 0.0, 1.0);
    Vec3 p(ax + t * (bx - ax), ay + t * (by - ay), az + t * (bz - az));
    p = p.cwiseProduct(Vec3(grid.spacing[0], grid.spacing[1], grid.spacing[2]));
    const int id = static_cast<int>(verts.size());
    verts.push_back(p);
    edge_vertex.emplace(key, id);
    return id;
  };

  for (int z = 0; z + 1 < nz; ++z) {
    for (int y = 0; y + 1 < ny; ++y) {
      for (int x = 0; x + 1 < nx; ++x) {
        int ci = 0;
        for (int c = 0; c < 8; ++c) {
          if (grid.at(x + kCorner[c][0], y + kCorner[c][1], z + kCorner[c][2]) < iso) ci |= 1 << c;
        }
        const int* row = kMcTriTable[ci];
        for (int t = 0; row[t] != -1; t += 3) {
          const int i0 = edge_point(x, y, z, row[t]);
          const int i1 = edge_point(x, y, z, row[t + 1]);
          const int i2 = edge_point(x, y, z, row[t + 2]);
          if (i0 == i1 || i1 == i2 || i2 == i0) continue;  // collapsed by welding
          faces.push_back({i0, i1, i2});
        }
      }
    }
  }

  if (faces.empty()) throw DataError("empty surface");

  Mesh mesh;
  mesh.vertices.resize(static_cast<int>(verts.size()), 3);
  for (std::size_t i = 0; i < verts.size(); ++i) mesh.vertices.row(static_cast<int>(i)) = verts[i];
  mesh.faces = std::move(faces);
  return mesh;
}

// ---------------------------------------------------------------------------
// Sampling and graphs

std::vector<int> fps_from(const MatX& points, int target_n, int first_index) {
  const int n = static_cast<int>(points.rows());
  if (target_n < 1 || target_n > n) throw DataError("fps: target_n out of range");
  if (first_index < 0 || first_index >= n) throw DataError("fps: bad first index");

  std::vector<int> picked;
  picked.reserve(target_n);
  VecX min_d2 = VecX::Constant(n, std::numeric_limits<double>::infinity());
  int current = first_index;
  picked.push_back(current);
  for (int s = 1; s < target_n; ++s) {
    min_d2 = min_d2.cwiseMin((points.rowwise() - points.row(current)).rowwise().squaredNorm());
    int best = -1;
    double best_d2 = -1.0;
    for (int i = 0; i < n; ++i) {
      if (min_d2[i] > best_d2) {  // strict: ties keep the lower index
        best_d2 = min_d2[i];
        best = i;
      }
    }
    current = best;
    picked.push_back(current);
  }
  return picked;
}

std::vector<int> fps_subsample(const MatX& points, int target_n, std::uint64_t seed) {
  const int n = static_cast<int>(points.rows());
  if (n == 0) throw DataError("fps: empty point set");
  Rng rng(seed);
  return fps_from(points, target_n, rng.uniform_int(n));
}

KnnGraph knn_graph(const MatX& points, int k) {
  const int n = static_cast<int>(points.rows());
  if (k < 1 || k >= n) throw DataError("knn_graph: need 1 <= k < n");

  KdTree tree(points);
  std::vector<std::set<int>> nbh(n);
  for (int i = 0; i < n; ++i) {
    for (const auto& hit : tree.knearest(points.row(i).transpose(), k, i)) {
      nbh[i].insert(hit.index);
      nbh[hit.index].insert(i);  // union symmetrization
    }
  }

  KnnGraph g;
  g.n = n;
  g.k = k;
  g.neighbors.resize(n);
  std::vector<Eigen::Triplet<double>> adj, nrm;
  for (int i = 0; i < n; ++i) {
    g.neighbors[i].assign(nbh[i].begin(), nbh[i].end());
    const double deg = static_cast<double>(g.neighbors[i].size());
    if (deg == 0.0) {
      nrm.emplace_back(i, i, 1.0);  // isolated vertex: identity row
      continue;
    }
    for (int j : g.neighbors[i]) {
      adj.emplace_back(i, j, 1.0);
      nrm.emplace_back(i, j, 1.0 / deg);
    }
  }
  g.adjacency.resize(n, n);
  g.adjacency.setFromTriplets(adj.begin(), adj.end());
  g.normalized.resize(n, n);
  g.normalized.setFromTriplets(nrm.begin(), nrm.end());
  g.normalized_t = g.normalized.transpose();
  return g;
}

// ---------------------------------------------------------------------------
// Alignment and metrics

RigidTransform rigid_align(const MatX& source, const MatX& target) {
  if (source.rows() != target.rows() || source.rows() == 0) {
    throw DataError("rigid_align: point sets must be nonempty with equal cardinality");
  }
  const Vec3 cs = source.colwise().mean();
  const Vec3 ct = target.colwise().mean();
  const Mat3 h = (source.rowwise() - cs.transpose()).transpose() * (target.rowwise() - ct.transpose());
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0 ? -1.0 : 1.0;
  RigidTransform tf;
  tf.rotation = svd.matrixV() * d * svd.matrixU().transpose();
  tf.translation = ct - tf.rotation * cs;
  return tf;
}

ProcrustesResult procrustes_align(const std::vector<MatX>& shapes) {
  if (shapes.size() < 2) throw DataError("procrustes_align: need at least 2 shapes");
  const Eigen::Index n = shapes[0].rows();
  for (const auto& s : shapes) {
    if (s.rows() != n || s.cols() != 3) throw DataError("procrustes_align: cardinality mismatch");
  }

  ProcrustesResult res;
  res.transforms.resize(shapes.size());
  res.aligned.resize(shapes.size());

  // Start from centroid-centered copies.
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    res.transforms[i].translation = -shapes[i].colwise().mean().transpose();
    res.aligned[i] = res.transforms[i].apply(shapes[i]);
  }
  MatX mean = res.aligned[0];
  for (std::size_t i = 1; i < shapes.size(); ++i) mean += res.aligned[i];
  mean /= static_cast<double>(shapes.size());

  for (int it = 0; it < 50; ++it) {
    res.iterations = it + 1;
    for (std::size_t i = 0; i < shapes.size(); ++i) {
      res.transforms[i] = rigid_align(shapes[i], mean);
      res.aligned[i] = res.transforms[i].apply(shapes[i]);
    }
    MatX new_mean = res.aligned[0];
    for (std::size_t i = 1; i < shapes.size(); ++i) new_mean += res.aligned[i];
    new_mean /= static_cast<double>(shapes.size());
    const double movement = (new_mean - mean).rowwise().norm().mean();
    mean = new_mean;
    if (movement < 1e-6) break;
  }
  return res;
}

double chamfer_distance(const MatX& a, const MatX& b) {
  if (a.rows() == 0 || b.rows() == 0) throw DataError("chamfer_distance: empty point set");
  KdTree ta(a), tb(b);
  double sum_ab = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    sum_ab += std::sqrt(tb.nearest(a.row(i).transpose()).d2);
  }
  double sum_ba = 0.0;
  for (Eigen::Index i = 0; i < b.rows(); ++i) {
    sum_ba += std::sqrt(ta.nearest(b.row(i).transpose()).d2);
  }
  return 0.5 * (sum_ab / static_cast<double>(a.rows()) + sum_ba / static_cast<double>(b.rows()));
}

// ---------------------------------------------------------------------------
// Mesh utilities

namespace {

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(int n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

}  // namespace

bool is_connected(const Mesh& mesh) {
  const int n = mesh.n_vertices();
  if (n <= 1) return true;
  if (!mesh.has_faces()) return false;
  UnionFind uf(n);
  for (const auto& f : mesh.faces) {
    uf.unite(f[0], f[1]);
    uf.unite(f[1], f[2]);
  }
  const int root = uf.find(0);
  for (int i = 1; i < n; ++i) {
    if (uf.find(i) != root) return false;
  }
  return true;
}

Mesh largest_component(const Mesh& mesh) {
  if (!mesh.has_faces()) return mesh;
  const int n = mesh.n_vertices();
  UnionFind uf(n);
  for (const auto& f : mesh.faces) {
    uf.unite(f[0], f[1]);
    uf.unite(f[1], f[2]);
  }
  std::vector<int> count(n, 0);
  for (int i = 0; i < n; ++i) count[uf.find(i)]++;
  int best_root = 0;
  for (int r = 0; r < n; ++r) {
    if (count[r] > count[best_root]) best_root = r;  // ties keep the lower root
  }

  std::vector<int> remap(n, -1);
  int kept = 0;
  for (int i = 0; i < n; ++i) {
    if (uf.find(i) == best_root) remap[i] = kept++;
  }
  Mesh out;
  out.vertices.resize(kept, 3);
  for (int i = 0; i < n; ++i) {
    if (remap[i] >= 0) out.vertices.row(remap[i]) = mesh.vertices.row(i);
  }
  for (const auto& f : mesh.faces) {
    if (remap[f[0]] >= 0) out.faces.push_back({remap[f[0]], remap[f[1]], remap[f[2]]});
  }
  return out;
}

MatX vertex_normals(const Mesh& mesh) {
  const int n = mesh.n_vertices();
  MatX normals = MatX::Zero(n, 3);
  if (mesh.has_faces()) {
    for (const auto& f : mesh.faces) {
      const Vec3 a = mesh.vertices.row(f[0]);
      const Vec3 b = mesh.vertices.row(f[1]);
      const Vec3 c = mesh.vertices.row(f[2]);
      const Vec3 fn = (b - a).cross(c - a);  // area-weighted
      for (int k = 0; k < 3; ++k) normals.row(f[k]) += fn.transpose();
    }
  }
  const Vec3 centroid = mesh.vertices.colwise().mean();
  for (int i = 0; i < n; ++i) {
    double len = normals.row(i).norm();
    if (len < 1e-12) {
      normals.row(i) = mesh.vertices.row(i) - centroid.transpose();
      len = normals.row(i).norm();
      if (len < 1e-12) {
        normals.row(i) = Eigen::RowVector3d(0, 0, 1);
        len = 1.0;
      }
    }
    normals.row(i) /= len;
  }
  return normals;
}

double bounding_diameter(const MatX& points) {
  if (points.rows() == 0) return 0.0;
  const Eigen::RowVector3d centroid = points.colwise().mean();
  return 2.0 * (points.rowwise() - centroid).rowwise().norm().maxCoeff();
}

Mesh subset_mesh(const Mesh& mesh, const std::vector<int>& indices) {
  Mesh out;
  out.vertices.resize(static_cast<int>(indices.size()), 3);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    out.vertices.row(static_cast<int>(i)) = mesh.vertices.row(indices[i]);
  }
  return out;
}

void validate_mesh(const Mesh& mesh) {
  const int n = mesh.n_vertices();
  if (!mesh.vertices.allFinite()) throw DataError("mesh has non-finite vertices");
  for (const auto& f : mesh.faces) {
    for (int k = 0; k < 3; ++k) {
      if (f[k] < 0 || f[k] >= n) throw DataError("face index out of range");
    }
    if (f[0] == f[1] || f[1] == f[2] || f[2] == f[0]) throw DataError("degenerate face");
  }
}

// ---------------------------------------------------------------------------
// I/O

namespace {

template <typename T>
void write_raw(std::ostream& os, const T& value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw DataError("unexpected end of file");
  return value;
}

std::ofstream open_out(const std::string& path, bool binary) {
  std::ofstream os(path, binary ? std::ios::binary : std::ios::out);
  if (!os) throw DataError("cannot open for writing: " + path);
  return os;
}

std::ifstream open_in(const std::string& path, bool binary) {
  std::ifstream is(path, binary ? std::ios::binary : std::ios::in);
  if (!is) throw DataError("cannot open for reading: " + path);
  return is;
}

}  // namespace

void write_off(const Mesh& mesh, const std::string& path) {
  auto os = open_out(path, false);
  os << "OFF\n" << mesh.n_vertices() << " " << mesh.faces.size() << " 0\n";
  os.precision(17);
  for (int i = 0; i < mesh.n_vertices(); ++i) {
    os << mesh.vertices(i, 0) << " " << mesh.vertices(i, 1) << " " << mesh.vertices(i, 2) << "\n";
  }
  for (const auto& f : mesh.faces) os << "3 " << f[0] << " " << f[1] << " " << f[2] << "\n";
}

Mesh read_off(const std::string& path) {
  auto is = open_in(path, false);
  std::string magic;
  is >> magic;
  if (magic != "OFF") throw DataError("not an OFF file: " + path);
  int nv = 0, nf = 0, ne = 0;
  is >> nv >> nf >> ne;
  if (!is || nv < 0 || nf < 0) throw DataError("bad OFF header: " + path);
  Mesh mesh;
  mesh.vertices.resize(nv, 3);
  for (int i = 0; i < nv; ++i) is >> mesh.vertices(i, 0) >> mesh.vertices(i, 1) >> mesh.vertices(i, 2);
  for (int i = 0; i < nf; ++i) {
    int cnt = 0;
    is >> cnt;
    if (cnt != 3) throw DataError("only triangle faces supported in OFF");
    std::array<int, 3> f{};
    is >> f[0] >> f[1] >> f[2];
    mesh.faces.push_back(f);
  }
  if (!is) throw DataError("truncated OFF file: " + path);
  validate_mesh(mesh);
  return mesh;
}

void write_ply(const Mesh& mesh, const std::string& path) {
  auto os = open_out(path, true);
  os << "ply\nformat binary_little_endian 1.0\n"
     << "element vertex " << mesh.n_vertices() << "\n"
     << "property double x\nproperty double y\nproperty double z\n"
     << "element face " << mesh.faces.size() << "\n"
     << "property list uchar uint32 vertex_indices\n"
     << "end_header\n";
  for (int i = 0; i < mesh.n_vertices(); ++i) {
    for (int c = 0; c < 3; ++c) write_raw(os, mesh.vertices(i, c));
  }
  for (const auto& f : mesh.faces) {
    write_raw<std::uint8_t>(os, 3);
    for (int k = 0; k < 3; ++k) write_raw(os, static_cast<std::uint32_t>(f[k]));
  }
}

Mesh read_ply(const std::string& path) {
  auto is = open_in(path, true);
  std::string line;
  std::getline(is, line);
  if (line != "ply") throw DataError("not a PLY file: " + path);

  int nv = -1, nf = -1;
  bool vertex_is_float32 = false;
  std::string current_element;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt != "binary_little_endian") throw DataError("unsupported PLY format: " + fmt);
    } else if (tok == "element") {
      std::string name;
      int count = 0;
      ls >> name >> count;
      current_element = name;
      if (name == "vertex") nv = count;
      if (name == "face") nf = count;
    } else if (tok == "property" && current_element == "vertex") {
      std::string type;
      ls >> type;
      if (type == "float" || type == "float32") vertex_is_float32 = true;
    } else if (tok == "end_header") {
      break;
    }
  }
  if (nv < 0) throw DataError("PLY missing vertex element: " + path);

  Mesh mesh;
  mesh.vertices.resize(nv, 3);
  for (int i = 0; i < nv; ++i) {
    for (int c = 0; c < 3; ++c) {
      mesh.vertices(i, c) = vertex_is_float32 ? static_cast<double>(read_raw<float>(is)) : read_raw<double>(is);
    }
  }
  for (int i = 0; i < std::max(nf, 0); ++i) {
    const auto cnt = read_raw<std::uint8_t>(is);
    if (cnt != 3) throw DataError("only triangle faces supported in PLY");
    std::array<int, 3> f{};
    for (int k = 0; k < 3; ++k) f[k] = static_cast<int>(read_raw<std::uint32_t>(is));
    mesh.faces.push_back(f);
  }
  validate_mesh(mesh);
  return mesh;
}

void write_voxels(const VoxelGrid& grid, const std::string& path, bool as_uint8) {
  grid.validate();
  auto os = open_out(path, true);
  os.write("S3MVOX1\n", 8);
  for (int a = 0; a < 3; ++a) write_raw(os, static_cast<std::uint32_t>(grid.dims[a]));
  for (int a = 0; a < 3; ++a) write_raw(os, grid.spacing[a]);
  write_raw(os, static_cast<std::uint32_t>(as_uint8 ? 1 : 0));
  if (as_uint8) {
    for (double v : grid.data) write_raw(os, static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0)));
  } else {
    os.write(reinterpret_cast<const char*>(grid.data.data()),
             static_cast<std::streamsize>(grid.data.size() * sizeof(double)));
  }
}

VoxelGrid read_voxels(const std::string& path) {
  auto is = open_in(path, true);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, "S3MVOX1\n", 8) != 0) throw DataError("not a voxel file: " + path);
  VoxelGrid grid;
  for (int a = 0; a < 3; ++a) grid.dims[a] = static_cast<int>(read_raw<std::uint32_t>(is));
  for (int a = 0; a < 3; ++a) grid.spacing[a] = read_raw<double>(is);
  const auto dtype = read_raw<std::uint32_t>(is);
  const std::size_t count = static_cast<std::size_t>(grid.dims[0]) * grid.dims[1] * grid.dims[2];
  grid.data.resize(count);
  if (dtype == 0) {
    is.read(reinterpret_cast<char*>(grid.data.data()), static_cast<std::streamsize>(count * sizeof(double)));
    if (!is) throw DataError("truncated voxel payload: " + path);
  } else if (dtype == 1) {
    for (std::size_t i = 0; i < count; ++i) grid.data[i] = static_cast<double>(read_raw<std::uint8_t>(is));
  } else {
    throw DataError("unknown voxel dtype");
  }
  grid.validate();
  return grid;
}

Mesh read_mesh_auto(const std::string& path) {
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".off") return read_off(path);
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".ply") return read_ply(path);
  throw DataError("unknown mesh extension (want .off or .ply): " + path);
}

}  // namespace geom
}  // namespace s3m
