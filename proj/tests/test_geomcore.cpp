#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include "s3m/geomcore.hpp"
#include "s3m/kdtree.hpp"
#include "s3m/mc_tables.hpp"
#include "s3m/rng.hpp"

using namespace s3m;
using namespace s3m::geom;

namespace {

// Euler characteristic V - E + F over distinct undirected edges.
int euler_characteristic(const Mesh& m) {
  std::set<std::pair<int, int>> edges;
  for (const auto& f : m.faces) {
    for (int k = 0; k < 3; ++k) {
      const int a = f[k], b = f[(k + 1) % 3];
      edges.insert({std::min(a, b), std::max(a, b)});
    }
  }
  return m.n_vertices() - static_cast<int>(edges.size()) + static_cast<int>(m.faces.size());
}

// Closed and consistently oriented: every directed edge appears exactly once
// and so does its reverse.
bool closed_consistent(const Mesh& m) {
  std::map<std::pair<int, int>, int> directed;
  for (const auto& f : m.faces) {
    for (int k = 0; k < 3; ++k) directed[{f[k], f[(k + 1) % 3]}]++;
  }
  for (const auto& [e, c] : directed) {
    if (c != 1) return false;
    auto it = directed.find({e.second, e.first});
    if (it == directed.end() || it->second != 1) return false;
  }
  return true;
}

MatX random_points(int n, Rng& rng, double scale = 1.0) {
  MatX p(n, 3);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) p(i, c) = scale * rng.normal();
  return p;
}

}  // namespace

TEST_CASE("mc table only references edges that straddle the isovalue") {
  for (int ci = 0; ci < 256; ++ci) {
    for (int t = 0; kMcTriTable[ci][t] != -1; ++t) {
      const int e = kMcTriTable[ci][t];
      const int a = kMcEdgeCorners[e][0], b = kMcEdgeCorners[e][1];
      const bool ina = (ci >> a) & 1, inb = (ci >> b) & 1;
      CAPTURE(ci);
      CAPTURE(e);
      CHECK(ina != inb);
    }
  }
}

TEST_CASE("marching cubes: single interior voxel gives a closed octahedral shell") {
  VoxelGrid g;
  g.dims = {3, 3, 3};
  g.spacing = {1, 1, 1};
  g.data.assign(27, 0.0);
  g.data[g.index(1, 1, 1)] = 1.0;
  Mesh m = marching_cubes(g, 0.5);
  // Hand enumeration of the 8 cell configurations: one triangle per cell,
  // welded on the 6 grid edges incident to the hot sample -> octahedron.
  CHECK(m.n_vertices() == 6);
  CHECK(m.faces.size() == 8);
  CHECK(euler_characteristic(m) == 2);
  CHECK(closed_consistent(m));
}

TEST_CASE("marching cubes: all-zero grid raises empty surface") {
  VoxelGrid g;
  g.dims = {3, 3, 3};
  g.spacing = {1, 1, 1};
  g.data.assign(27, 0.0);
  CHECK_THROWS_AS(marching_cubes(g, 0.5), DataError);
}

TEST_CASE("marching cubes: linear field yields a plane at iso * spacing") {
  VoxelGrid g;
  g.dims = {4, 3, 3};
  g.spacing = {0.5, 1.0, 2.0};
  g.data.resize(4 * 3 * 3);
  for (int z = 0; z < 3; ++z)
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 4; ++x) g.data[g.index(x, y, z)] = static_cast<double>(x);
  const double iso = 1.5;
  Mesh m = marching_cubes(g, iso);
  REQUIRE(m.n_vertices() > 0);
  for (int i = 0; i < m.n_vertices(); ++i) {
    CHECK(std::abs(m.vertices(i, 0) - iso * g.spacing[0]) < 1e-9);
  }
}

TEST_CASE("marching cubes: invariant to affine rescaling of the field") {
  Rng rng(11);
  VoxelGrid g;
  g.dims = {6, 6, 6};
  g.spacing = {1, 1, 1};
  g.data.resize(216);
  for (auto& v : g.data) v = rng.uniform();
  Mesh a = marching_cubes(g, 0.5);
  VoxelGrid h = g;
  for (auto& v : h.data) v = 3.0 * v + 2.0;
  Mesh b = marching_cubes(h, 3.0 * 0.5 + 2.0);
  REQUIRE(a.n_vertices() == b.n_vertices());
  REQUIRE(a.faces.size() == b.faces.size());
  CHECK((a.vertices - b.vertices).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("marching cubes: sphere field is closed, oriented, genus 0") {
  const int n = 14;
  VoxelGrid g;
  g.dims = {n, n, n};
  g.spacing = {1, 1, 1};
  g.data.resize(static_cast<std::size_t>(n) * n * n);
  const Vec3 c(6.5, 6.5, 6.5);
  for (int z = 0; z < n; ++z)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) g.data[g.index(x, y, z)] = (Vec3(x, y, z) - c).norm();
  const double r = 4.2;
  Mesh m = marching_cubes(g, r);
  CHECK(closed_consistent(m));
  CHECK(euler_characteristic(m) == 2);
  for (int i = 0; i < m.n_vertices(); ++i) {
    CHECK(std::abs((m.vertices.row(i).transpose() - c).norm() - r) < 0.6);
  }
}

TEST_CASE("marching cubes: smooth random fields stay watertight") {
  for (std::uint64_t seed : {3u, 17u, 29u, 41u}) {
    Rng rng(seed);
    const int n = 9;
    VoxelGrid g;
    g.dims = {n, n, n};
    g.spacing = {1, 1, 1};
    g.data.assign(static_cast<std::size_t>(n) * n * n, 0.0);
    std::vector<Vec3> centers;
    for (int b = 0; b < 4; ++b)
      centers.emplace_back(rng.uniform(2.5, 5.5), rng.uniform(2.5, 5.5), rng.uniform(2.5, 5.5));
    for (int z = 0; z < n; ++z)
      for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
          double v = 0;
          for (const auto& c : centers) v += std::exp(-(Vec3(x, y, z) - c).squaredNorm() / 4.0);
          g.data[g.index(x, y, z)] = v;
        }
    // Isovalue high enough that the surface cannot reach the grid boundary.
    Mesh m = marching_cubes(g, 0.55);
    CAPTURE(seed);
    CHECK(closed_consistent(m));
    CHECK(euler_characteristic(m) % 2 == 0);
  }
}

TEST_CASE("fps: farthest of collinear points") {
  MatX p(4, 3);
  p << 0, 0, 0, 1, 0, 0, 2, 0, 0, 10, 0, 0;
  auto idx = fps_from(p, 2, 0);
  CHECK(idx == std::vector<int>{0, 3});
}

TEST_CASE("fps: target_n = n exhausts all indices") {
  Rng rng(5);
  MatX p = random_points(12, rng);
  auto idx = fps_from(p, 12, 4);
  std::set<int> s(idx.begin(), idx.end());
  CHECK(s.size() == 12);
}

TEST_CASE("fps: unit square tie broken by lowest index") {
  MatX p(4, 3);
  p << 0, 0, 0, 1, 0, 0, 1, 1, 0, 0, 1, 0;
  auto idx = fps_from(p, 3, 0);
  CHECK(idx[1] == 2);  // the opposite corner
  CHECK(idx[2] == 1);  // both remaining corners tie at distance 1
}

TEST_CASE("fps: errors and determinism") {
  Rng rng(7);
  MatX p = random_points(20, rng);
  CHECK_THROWS_AS(fps_subsample(p, 21, 1), DataError);
  auto a = fps_subsample(p, 10, 42);
  auto b = fps_subsample(p, 10, 42);
  CHECK(a == b);
  // Some seed among these yields a different first pick.
  bool any_different = false;
  for (std::uint64_t s = 0; s < 8; ++s) any_different |= (fps_subsample(p, 10, s) != a);
  CHECK(any_different);
}

TEST_CASE("fps: min pairwise distance of the selection never increases") {
  Rng rng(9);
  MatX p = random_points(40, rng);
  auto idx = fps_from(p, 40, 0);
  double prev = std::numeric_limits<double>::infinity();
  for (int m = 2; m <= 40; ++m) {
    double mind = std::numeric_limits<double>::infinity();
    for (int i = 0; i < m; ++i)
      for (int j = i + 1; j < m; ++j)
        mind = std::min(mind, (p.row(idx[i]) - p.row(idx[j])).norm());
    CHECK(mind <= prev + 1e-12);
    prev = mind;
  }
}

TEST_CASE("knn graph: collinear distinct distances, k=1") {
  MatX p(3, 3);
  p << 0, 0, 0, 1, 0, 0, 3, 0, 0;
  KnnGraph g = knn_graph(p, 1);
  int edges = 0;
  for (int i = 0; i < g.n; ++i) edges += g.degree(i);
  CHECK(edges / 2 == 2);
  CHECK(g.neighbors[0] == std::vector<int>{1});
  CHECK(g.neighbors[1] == (std::vector<int>{0, 2}));
}

TEST_CASE("knn graph: k = n-1 gives the complete graph") {
  Rng rng(3);
  MatX p = random_points(8, rng);
  KnnGraph g = knn_graph(p, 7);
  for (int i = 0; i < 8; ++i) CHECK(g.degree(i) == 7);
}

TEST_CASE("knn graph: duplicated points become mutual neighbors") {
  MatX p(4, 3);
  p << 0, 0, 0, 0, 0, 0, 5, 5, 5, 9, 9, 9;
  KnnGraph g = knn_graph(p, 1);
  CHECK(std::find(g.neighbors[0].begin(), g.neighbors[0].end(), 1) != g.neighbors[0].end());
  CHECK(std::find(g.neighbors[1].begin(), g.neighbors[1].end(), 0) != g.neighbors[1].end());
}

TEST_CASE("knn graph: symmetry and edge count bound") {
  Rng rng(13);
  MatX p = random_points(50, rng);
  KnnGraph g = knn_graph(p, 6);
  int edges = 0;
  for (int i = 0; i < g.n; ++i) {
    for (int j : g.neighbors[i]) {
      CHECK(std::find(g.neighbors[j].begin(), g.neighbors[j].end(), i) != g.neighbors[j].end());
    }
    edges += g.degree(i);
  }
  CHECK(edges / 2 >= 50 * 6 / 2);
  CHECK_THROWS_AS(knn_graph(p, 50), DataError);
  // Random-walk rows sum to 1.
  for (int i = 0; i < g.n; ++i) {
    CHECK(g.normalized.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("kd-tree matches brute force including ties") {
  Rng rng(21);
  MatX p = random_points(120, rng);
  p.row(60) = p.row(10);  // exact duplicate to exercise tie-breaking
  KdTree tree(p);
  for (int q = 0; q < 40; ++q) {
    const VecX query = random_points(1, rng).row(0).transpose();
    auto hits = tree.knearest(query, 5);
    std::vector<std::pair<double, int>> brute;
    for (int i = 0; i < 120; ++i) brute.push_back({(p.row(i).transpose() - query).squaredNorm(), i});
    std::sort(brute.begin(), brute.end());
    REQUIRE(hits.size() == 5);
    for (int k = 0; k < 5; ++k) {
      CHECK(hits[k].index == brute[k].second);
    }
  }
}

TEST_CASE("procrustes: translation and rotation are recovered exactly") {
  Rng rng(2);
  MatX a = random_points(25, rng, 10.0);
  MatX b = a;
  b.rowwise() += Eigen::RowVector3d(5, 0, 0);
  auto res = procrustes_align({a, b});
  CHECK((res.aligned[0] - res.aligned[1]).rowwise().norm().mean() < 1e-9);

  Mat3 rot;
  rot = Eigen::AngleAxisd(M_PI / 2, Vec3::UnitZ());
  MatX c = a * rot.transpose();
  auto res2 = procrustes_align({a, c});
  CHECK((res2.aligned[0] - res2.aligned[1]).rowwise().norm().mean() < 1e-9);
}

TEST_CASE("procrustes: reflections are not recovered (det +1 enforced)") {
  MatX a(4, 3);
  a << 0, 0, 0, 3, 0, 0, 0, 2, 0, 0.5, 0.7, 1.9;  // asymmetric tetrahedron
  MatX b = a;
  b.col(2) *= -1.0;  // mirror
  auto res = procrustes_align({a, b});
  const double rmsd = std::sqrt((res.aligned[0] - res.aligned[1]).rowwise().squaredNorm().mean());
  CHECK(rmsd > 1e-3);
  for (const auto& tf : res.transforms) {
    CHECK(tf.rotation.determinant() == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("procrustes: rigid motion keeps intra-shape distances") {
  Rng rng(6);
  MatX a = random_points(15, rng, 4.0);
  MatX b = random_points(15, rng, 4.0);
  auto res = procrustes_align({a, b});
  for (int i = 0; i < 15; ++i)
    for (int j = i + 1; j < 15; ++j) {
      const double before = (a.row(i) - a.row(j)).norm();
      const double after = (res.aligned[0].row(i) - res.aligned[0].row(j)).norm();
      CHECK(std::abs(before - after) <= 1e-9 * std::max(1.0, before));
    }
  CHECK_THROWS_AS(procrustes_align({a}), DataError);
}

TEST_CASE("chamfer distance examples") {
  MatX a(1, 3), b(1, 3);
  a << 0, 0, 0;
  b << 3, 4, 0;
  CHECK(chamfer_distance(a, a) == 0.0);
  CHECK(chamfer_distance(a, b) == doctest::Approx(5.0));

  MatX c(2, 3), d(1, 3);
  c << 0, 0, 0, 1, 0, 0;
  d << 0, 0, 0;
  CHECK(chamfer_distance(c, d) == doctest::Approx(0.25));

  Rng rng(31);
  MatX x = random_points(30, rng), y = random_points(45, rng);
  CHECK(chamfer_distance(x, y) == doctest::Approx(chamfer_distance(y, x)));
  CHECK_THROWS_AS(chamfer_distance(MatX(0, 3), y), DataError);
}

TEST_CASE("chamfer matches an O(n^2) oracle") {
  Rng rng(33);
  MatX x = random_points(24, rng), y = random_points(18, rng);
  double sx = 0;
  for (int i = 0; i < x.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (int j = 0; j < y.rows(); ++j) best = std::min(best, (x.row(i) - y.row(j)).norm());
    sx += best;
  }
  double sy = 0;
  for (int j = 0; j < y.rows(); ++j) {
    double best = std::numeric_limits<double>::infinity();
    for (int i = 0; i < x.rows(); ++i) best = std::min(best, (x.row(i) - y.row(j)).norm());
    sy += best;
  }
  const double oracle = 0.5 * (sx / x.rows() + sy / y.rows());
  CHECK(chamfer_distance(x, y) == doctest::Approx(oracle).epsilon(1e-12));
}

TEST_CASE("largest component keeps the bigger piece") {
  Mesh m;
  m.vertices.resize(7, 3);
  m.vertices << 0, 0, 0, 1, 0, 0, 0, 1, 0, 9, 9, 9, 10, 9, 9, 9, 10, 9, 9, 9, 10;
  m.faces = {{0, 1, 2}, {3, 4, 5}, {3, 5, 6}};
  Mesh big = largest_component(m);
  CHECK(big.n_vertices() == 4);
  CHECK(big.faces.size() == 2);
  CHECK(is_connected(big));
  CHECK_FALSE(is_connected(m));
}

TEST_CASE("mesh and voxel io round trips") {
  Rng rng(44);
  Mesh m;
  m.vertices = random_points(30, rng, 7.0);
  for (int i = 0; i + 2 < 30; i += 3) m.faces.push_back({i, i + 1, i + 2});

  write_off(m, "/tmp/s3m_test_mesh.off");
  Mesh off = read_off("/tmp/s3m_test_mesh.off");
  CHECK((off.vertices - m.vertices).cwiseAbs().maxCoeff() == 0.0);
  CHECK(off.faces == m.faces);

  write_ply(m, "/tmp/s3m_test_mesh.ply");
  Mesh ply = read_ply("/tmp/s3m_test_mesh.ply");
  CHECK((ply.vertices - m.vertices).cwiseAbs().maxCoeff() == 0.0);
  CHECK(ply.faces == m.faces);

  VoxelGrid g;
  g.dims = {3, 4, 5};
  g.spacing = {0.5, 1.5, 2.0};
  g.data.resize(60);
  for (auto& v : g.data) v = rng.uniform();
  write_voxels(g, "/tmp/s3m_test_grid.vox");
  VoxelGrid h = read_voxels("/tmp/s3m_test_grid.vox");
  CHECK(h.dims == g.dims);
  CHECK(h.spacing == g.spacing);
  CHECK(h.data == g.data);
}

TEST_CASE("vertex normals point outward on a shell") {
  VoxelGrid g;
  g.dims = {10, 10, 10};
  g.spacing = {1, 1, 1};
  g.data.resize(1000);
  const Vec3 c(4.5, 4.5, 4.5);
  for (int z = 0; z < 10; ++z)
    for (int y = 0; y < 10; ++y)
      for (int x = 0; x < 10; ++x) g.data[g.index(x, y, z)] = (Vec3(x, y, z) - c).norm();
  Mesh m = marching_cubes(g, 3.0);
  MatX nrm = vertex_normals(m);
  int agree = 0;
  for (int i = 0; i < m.n_vertices(); ++i) {
    const Vec3 out = (m.vertices.row(i).transpose() - c).normalized();
    if (nrm.row(i).dot(out) > 0) ++agree;
  }
  // Consistent orientation: all normals on one side.
  CHECK((agree == 0 || agree == m.n_vertices()));
}
