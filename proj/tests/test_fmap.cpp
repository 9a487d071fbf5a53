#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "s3m/fmap.hpp"
#include "s3m/geomcore.hpp"
#include "s3m/rng.hpp"
#include "s3m/synth.hpp"

using namespace s3m;
using namespace s3m::fmap;

namespace {

MatX randn(int r, int c, Rng& rng) {
  MatX m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = rng.normal();
  return m;
}

// Small deformed sphere as a ShapeContext (all rows, subset projection path).
ShapeContext tiny_context(std::uint64_t seed, int m, double bump = 0.2) {
  Mesh mesh = synth::make_uv_sphere(4, 8);  // 34 vertices
  Rng rng(seed);
  for (int i = 0; i < mesh.n_vertices(); ++i) mesh.vertices.row(i) *= 1.0 + bump * rng.uniform();
  const auto basis = spectral::eigenbasis(spectral::cotan_laplacian(mesh), m);
  ShapeContext ctx;
  ctx.coords = mesh.vertices;
  ctx.graph = geom::knn_graph(mesh.vertices, 4);
  ctx.psi = basis.eigenfunctions;
  ctx.mass = basis.mass;
  ctx.lambda = basis.eigenvalues;
  ctx.complete = false;
  return ctx;
}

// Independent dense re-implementation of the point loss (one direction).
double point_loss_oracle(const MatX& c, const MatX& psi_i, const MatX& psi_j, const MatX& d_i,
                         const MatX& d_j, double tau) {
  const int nj = static_cast<int>(psi_j.rows());
  const int ni = static_cast<int>(psi_i.rows());
  MatX pi(nj, ni);
  for (int r = 0; r < nj; ++r) {
    VecX row(ni);
    for (int cc = 0; cc < ni; ++cc) {
      row[cc] = tau * (psi_j.row(r) * c).dot(psi_i.row(cc));
    }
    const double mx = row.maxCoeff();
    double denom = 0.0;
    for (int cc = 0; cc < ni; ++cc) denom += std::exp(row[cc] - mx);
    for (int cc = 0; cc < ni; ++cc) pi(r, cc) = std::exp(row[cc] - mx) / denom;
  }
  double loss = 0.0;
  for (int r = 0; r < nj; ++r) {
    VecX mapped = VecX::Zero(d_i.cols());
    for (int cc = 0; cc < ni; ++cc) mapped += pi(r, cc) * d_i.row(cc).transpose();
    loss += (mapped - d_j.row(r).transpose()).squaredNorm();
  }
  return loss / nj;
}

}  // namespace

TEST_CASE("solve_fmap: identity and planted linear maps") {
  Rng rng(1);
  const int m = 6, d = 12;
  for (int trial = 0; trial < 20; ++trial) {
    const MatX a = randn(m, d, rng);
    CHECK((solve_fmap(a, a, 0.0) - MatX::Identity(m, m)).cwiseAbs().maxCoeff() < 1e-8);
    const MatX r = randn(m, m, rng);
    const MatX c = solve_fmap(a, r * a, 0.0);
    CHECK((c - r).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("solve_fmap: returned map is the ridge optimum") {
  Rng rng(2);
  const int m = 5, d = 9;
  const MatX a = randn(m, d, rng);
  const MatX b = randn(m, d, rng);
  const double eps = 1e-3;
  const MatX c = solve_fmap(a, b, eps);
  auto objective = [&](const MatX& x) {
    return (x * a - b).squaredNorm() + eps * x.squaredNorm();
  };
  const double at_opt = objective(c);
  for (int trial = 0; trial < 100; ++trial) {
    MatX delta = randn(m, m, rng);
    delta *= 1e-3 / delta.norm();
    CHECK(objective(c + delta) >= at_opt - 1e-12);
  }
  CHECK_THROWS_AS(solve_fmap(a, MatX::Constant(m, d, std::nan("")), 0.0), DataError);
}

TEST_CASE("loss_bij: canonical values") {
  const MatX id2 = MatX::Identity(2, 2);
  CHECK(loss_bij(id2, id2) == 0.0);
  CHECK(loss_bij(2.0 * id2, id2) == doctest::Approx(2.0 * std::sqrt(2.0)));
  Rng rng(3);
  MatX c = randn(4, 4, rng);
  c += 4.0 * MatX::Identity(4, 4);  // well-conditioned
  const MatX cinv = c.inverse();
  CHECK(loss_bij(c, cinv) < 1e-8);
}

TEST_CASE("loss_orth: canonical values and direct formula") {
  Mat3 rot;
  rot = Eigen::AngleAxisd(0.7, Vec3(1, 1, 0).normalized());
  MatX r = rot;
  CHECK(loss_orth(r, r.transpose()) < 1e-10);

  const int m = 7;
  const MatX zero = MatX::Zero(m, m);
  CHECK(loss_orth(zero, zero) == doctest::Approx(2.0 * std::sqrt(double(m))));

  const double delta = 0.3;
  MatX diag = MatX::Identity(4, 4);
  diag(1, 1) = 1.0 + delta;
  diag(2, 2) = 1.0 - delta;
  // direct evaluation
  const MatX e = diag.transpose() * diag - MatX::Identity(4, 4);
  CHECK(loss_orth(diag, MatX::Identity(4, 4)) == doctest::Approx(e.norm()));
}

TEST_CASE("loss_iso: canonical values, direct evaluation, homogeneity") {
  VecX l1(3), l2(3);
  l1 << 0.0, 1.0, 2.0;
  l2 << 0.0, 1.0, 2.0;
  MatX diag = VecX::LinSpaced(3, 1.0, 3.0).asDiagonal();
  CHECK(loss_iso(diag, diag, l1, l2) == 0.0);

  VecX l3(3);
  l3 << 0.5, 1.5, 3.0;
  const MatX id3 = MatX::Identity(3, 3);
  const double direct = (id3 * l1.asDiagonal() - l3.asDiagonal() * id3).norm() +
                        (id3 * l3.asDiagonal() - l1.asDiagonal() * id3).norm();
  CHECK(loss_iso(id3, id3, l1, l3) == doctest::Approx(direct));

  Rng rng(4);
  const MatX c1 = randn(3, 3, rng), c2 = randn(3, 3, rng);
  const double base = loss_iso(c1, c2, l1, l3);
  const double s = 3.25;
  CHECK(loss_iso(c1, c2, s * l1, s * l3) == doctest::Approx(s * base));
}

TEST_CASE("loss_point: identity map, constant rows, dense oracle") {
  Rng rng(5);
  const int n = 10, m = 4, d = 3;
  MatX psi = randn(n, m, rng);
  MatX feats = randn(n, d, rng);
  const MatX id = MatX::Identity(m, m);

  // identical shape, sharp softmax: near-zero loss
  const double sharp = loss_point(id, id, psi, psi, feats, feats, 1e4);
  CHECK(sharp < 1e-6);

  // constant descriptor rows: exact zero whatever the map (rows sum to 1)
  const MatX ones = MatX::Ones(n, d);
  CHECK(loss_point(randn(m, m, rng), randn(m, m, rng), psi, psi, ones, ones, 7.0) ==
        doctest::Approx(0.0).epsilon(1e-12));

  // dense oracle on a random instance
  const MatX c_ij = randn(m, m, rng);
  const MatX c_ji = randn(m, m, rng);
  MatX psi_j = randn(n, m, rng);
  MatX d_j = randn(n, d, rng);
  const double tau = default_tau(m);
  const double expect = point_loss_oracle(c_ij, psi, psi_j, feats, d_j, tau) +
                        point_loss_oracle(c_ji, psi_j, psi, d_j, feats, tau);
  CHECK(loss_point(c_ij, c_ji, psi, psi_j, feats, d_j, tau) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("total_loss: additivity and weight selection") {
  Rng rng(6);
  const int n = 8, m = 3, d = 2;
  const MatX c1 = randn(m, m, rng), c2 = randn(m, m, rng);
  const MatX psi_i = randn(n, m, rng), psi_j = randn(n, m, rng);
  const MatX d_i = randn(n, d, rng), d_j = randn(n, d, rng);
  VecX l1(m), l2(m);
  l1 << 0, 1, 2;
  l2 << 0, 1.4, 2.2;
  const double tau = default_tau(m);

  LossWeights w;
  const LossBreakdown all = total_loss(c1, c2, l1, l2, psi_i, psi_j, d_i, d_j, tau, w);
  CHECK(all.total ==
        doctest::Approx(all.bij + all.orth + all.iso + all.point).epsilon(1e-12));

  LossWeights only_bij{1, 0, 0, 0};
  const LossBreakdown bij = total_loss(c1, c2, l1, l2, psi_i, psi_j, d_i, d_j, tau, only_bij);
  CHECK(bij.total == doctest::Approx(loss_bij(c1, c2)).epsilon(1e-12));

  const MatX id = MatX::Identity(m, m);
  VecX zero_l = VecX::Zero(m);
  const MatX ones = MatX::Ones(n, d);
  const LossBreakdown zeros = total_loss(id, id, zero_l, zero_l, psi_i, psi_i, ones, ones, tau, w);
  CHECK(zeros.total < 1e-12);
}

TEST_CASE("grad_pair: finite differences through the whole chain") {
  for (std::uint64_t seed : {11u, 22u, 33u}) {
    const int m = 6;
    ShapeContext a = tiny_context(seed, m);
    ShapeContext b = tiny_context(seed + 100, m);

    desc::DescriptorNet net = desc::init_weights({8, 8, 8}, 8, seed);
    TrainConfig cfg;
    cfg.ridge = 1e-4;
    cfg.tau = default_tau(m);

    const PairGradient pg = grad_pair(net, a, b, cfg);
    const VecX analytic = desc::flatten_grads(pg.grads);

    const VecX params = desc::flatten_params(net);
    const int np = desc::param_count(net);
    VecX fd(np);
    const double eps = 1e-5;
    for (int p = 0; p < np; ++p) {
      VecX plus = params, minus = params;
      plus[p] += eps;
      minus[p] -= eps;
      desc::DescriptorNet pert = net;
      desc::unflatten_params(pert, plus);
      const double f_plus = eval_pair_loss(pert, a, b, cfg).total;
      desc::unflatten_params(pert, minus);
      const double f_minus = eval_pair_loss(pert, a, b, cfg).total;
      fd[p] = (f_plus - f_minus) / (2.0 * eps);
    }
    const double scale = std::max(1.0, fd.cwiseAbs().maxCoeff());
    CAPTURE(seed);
    CHECK((analytic - fd).cwiseAbs().maxCoeff() < 2e-4 * scale);
  }
}

TEST_CASE("grad_pair: vanishing signal on identical shapes") {
  const int m = 6;
  ShapeContext a = tiny_context(77, m);
  desc::DescriptorNet net = desc::init_weights({8, 8, 8}, 8, 5);
  TrainConfig cfg;
  cfg.ridge = 1e-10;
  cfg.tau = 500.0;
  cfg.weights = {1.0, 0.0, 0.0, 1.0};  // bij + point only

  const PairGradient pg = grad_pair(net, a, a, cfg);
  CHECK(
      desc::flatten_grads(pg.grads).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(pg.loss.bij < 1e-4);
  CHECK(pg.loss.point < 1e-6);
}

TEST_CASE("grad_pair: doubling loss weights doubles every gradient exactly") {
  const int m = 5;
  ShapeContext a = tiny_context(8, m);
  ShapeContext b = tiny_context(9, m);
  desc::DescriptorNet net = desc::init_weights({6, 6, 6}, 6, 2);
  TrainConfig cfg;
  cfg.ridge = 1e-5;

  const VecX g1 = desc::flatten_grads(grad_pair(net, a, b, cfg).grads);
  TrainConfig cfg2 = cfg;
  cfg2.weights = {2.0, 2.0, 2.0, 2.0};
  const VecX g2 = desc::flatten_grads(grad_pair(net, a, b, cfg2).grads);
  CHECK((g2 - 2.0 * g1).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("train: zero iterations, determinism, config round trip") {
  std::vector<TrainShape> dataset;
  for (int s = 0; s < 3; ++s) {
    Mesh mesh = synth::make_uv_sphere(5, 10);
    Rng rng(40 + s);
    for (int i = 0; i < mesh.n_vertices(); ++i) mesh.vertices.row(i) *= 1.0 + 0.2 * rng.uniform();
    dataset.push_back(make_train_shape(mesh, 5, 6));
  }
  desc::DescriptorNet net = desc::init_weights({6, 6, 6}, 6, 1);

  TrainConfig cfg;
  cfg.iterations = 0;
  TrainResult unchanged = train(dataset, net, cfg);
  CHECK((desc::flatten_params(unchanged.net) - desc::flatten_params(net)).cwiseAbs().maxCoeff() == 0.0);
  CHECK(unchanged.history.empty());

  cfg.iterations = 4;
  cfg.n_train = 30;
  cfg.graph_k = 4;
  cfg.seed = 99;
  TrainResult r1 = train(dataset, net, cfg);
  TrainResult r2 = train(dataset, net, cfg);
  REQUIRE(r1.history.size() == 4);
  for (int i = 0; i < 4; ++i) CHECK(r1.history[i].total == r2.history[i].total);
  CHECK((desc::flatten_params(r1.net) - desc::flatten_params(r2.net)).cwiseAbs().maxCoeff() == 0.0);

  CHECK_THROWS_AS(train({dataset[0]}, net, cfg), DataError);

  cfg.to_kv_file("/tmp/s3m_test_traincfg.txt");
  TrainConfig back = TrainConfig::from_kv_file("/tmp/s3m_test_traincfg.txt");
  CHECK(back.iterations == cfg.iterations);
  CHECK(back.n_train == cfg.n_train);
  CHECK(back.seed == cfg.seed);
  CHECK(back.learning_rate == cfg.learning_rate);

  write_loss_history_csv(r1.history, "/tmp/s3m_test_history.csv");
  const std::string text = read_text_file("/tmp/s3m_test_history.csv");
  CHECK(text.find("iteration,total,bij,orth,iso,point") == 0);
}

TEST_CASE("train: loss decreases on a small synthetic family") {
  synth::FamilySpec spec;
  spec.base = synth::BaseShape::Ellipsoid;
  spec.semi_axes = Vec3(10, 8, 6);
  spec.n_shapes = 5;
  spec.deform_amplitude = 0.08;
  spec.deform_modes = 4;
  spec.resolution = 500;
  spec.seed = 3;
  synth::Family family = synth::generate_family(spec);

  std::vector<TrainShape> dataset;
  for (const auto& mesh : family.shapes) dataset.push_back(make_train_shape(mesh, 8, 8));

  TrainConfig cfg;
  cfg.iterations = 60;
  cfg.n_train = 120;
  cfg.graph_k = 8;
  cfg.learning_rate = 2e-3;
  cfg.seed = 7;
  cfg.deform_sigma = 0.01;
  cfg.rotation_augment = false;

  desc::DescriptorNet net = desc::init_weights({16, 16, 16}, 16, 11);
  TrainResult result = train(dataset, net, cfg);

  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };
  std::vector<double> head, tail;
  for (int i = 0; i < 6; ++i) head.push_back(result.history[i].total);
  for (int i = 54; i < 60; ++i) tail.push_back(result.history[i].total);
  CHECK(median(tail) < median(head));
}
