#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "s3m/descnet.hpp"
#include "s3m/geomcore.hpp"
#include "s3m/rng.hpp"

using namespace s3m;
using namespace s3m::desc;

namespace {

MatX random_points(int n, Rng& rng, double scale = 1.0) {
  MatX p(n, 3);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) p(i, c) = scale * rng.normal();
  return p;
}

// Identity normalized adjacency: an edgeless graph.
KnnGraph empty_graph(int n) {
  KnnGraph g;
  g.n = n;
  g.k = 0;
  g.neighbors.resize(n);
  g.adjacency.resize(n, n);
  g.normalized.resize(n, n);
  g.normalized.setIdentity();
  g.normalized_t = g.normalized.transpose();
  return g;
}

}  // namespace

TEST_CASE("init: determinism, glorot bounds, seed sensitivity") {
  DescriptorNet a = init_weights({8, 8, 8}, 16, 42);
  DescriptorNet b = init_weights({8, 8, 8}, 16, 42);
  CHECK((flatten_params(a) - flatten_params(b)).cwiseAbs().maxCoeff() == 0.0);

  DescriptorNet c = init_weights({8, 8, 8}, 16, 43);
  CHECK((flatten_params(a) - flatten_params(c)).cwiseAbs().maxCoeff() > 0.0);

  for (int l = 0; l < 3; ++l) {
    for (const auto& w : a.layers[l].weights) {
      const double limit = std::sqrt(6.0 / (w.rows() + w.cols()));
      CHECK(w.cwiseAbs().maxCoeff() <= limit);
    }
    CHECK(a.layers[l].bias.cwiseAbs().maxCoeff() == 0.0);
  }
  const double head_limit = std::sqrt(6.0 / (a.head_weight.rows() + a.head_weight.cols()));
  CHECK(a.head_weight.cwiseAbs().maxCoeff() <= head_limit);
}

TEST_CASE("forward: zero weights give zero output") {
  Rng rng(1);
  MatX coords = random_points(20, rng);
  KnnGraph g = geom::knn_graph(coords, 4);
  DescriptorNet net = init_weights({4, 4, 4}, 6, 7);
  unflatten_params(net, VecX::Zero(param_count(net)));
  const MatX out = forward(net, g, coords);
  CHECK(out.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("forward: edgeless graph reduces to a per-vertex MLP") {
  Rng rng(2);
  const int n = 15;
  MatX coords = random_points(n, rng);
  KnnGraph g = empty_graph(n);
  DescriptorNet net = init_weights({5, 4, 6}, 3, 11);
  const MatX out = forward(net, g, coords);

  // With A = I every hop sees the same features; effective weight is the sum.
  MatX h = coords.rowwise() - coords.colwise().mean();
  for (int l = 0; l < 3; ++l) {
    MatX w_eff = net.layers[l].weights[0];
    for (int hh = 1; hh <= net.hops[l]; ++hh) w_eff += net.layers[l].weights[hh];
    MatX z = h * w_eff;
    z.rowwise() += net.layers[l].bias.transpose();
    h = z.unaryExpr([](double v) { return v > 0 ? v : 0.2 * v; });
  }
  MatX expect = h * net.head_weight;
  expect.rowwise() += net.head_bias.transpose();
  CHECK((out - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("forward: permutation equivariance") {
  Rng rng(3);
  const int n = 50;
  MatX coords = random_points(n, rng);
  KnnGraph g = geom::knn_graph(coords, 6);
  DescriptorNet net = init_weights({12, 12, 12}, 8, 5);
  const MatX out = forward(net, g, coords);

  // random permutation
  std::vector<int> perm(n);
  for (int i = 0; i < n; ++i) perm[i] = i;
  for (int i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(i + 1)]);

  MatX coords_p(n, 3);
  for (int i = 0; i < n; ++i) coords_p.row(perm[i]) = coords.row(i);
  KnnGraph gp = geom::knn_graph(coords_p, 6);
  const MatX out_p = forward(net, gp, coords_p);

  double worst = 0.0;
  for (int i = 0; i < n; ++i) worst = std::max(worst, (out_p.row(perm[i]) - out.row(i)).norm());
  CHECK(worst < 1e-9);
}

TEST_CASE("backward: finite differences over every parameter") {
  for (std::uint64_t seed : {4u, 14u, 24u}) {
    Rng rng(seed);
    const int n = 20;
    MatX coords = random_points(n, rng);
    KnnGraph g = geom::knn_graph(coords, 4);
    DescriptorNet net = init_weights({4, 4, 4}, 3, seed);
    MatX grad_out(n, 3);
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < 3; ++c) grad_out(i, c) = rng.normal();

    ForwardCache cache;
    forward(net, g, coords, &cache);
    const VecX analytic = flatten_grads(backward(net, g, cache, grad_out));

    const VecX params = flatten_params(net);
    const int np = param_count(net);
    VecX fd(np);
    const double eps = 1e-5;
    for (int p = 0; p < np; ++p) {
      VecX plus = params, minus = params;
      plus[p] += eps;
      minus[p] -= eps;
      DescriptorNet np_net = net;
      unflatten_params(np_net, plus);
      const double f_plus = forward(np_net, g, coords).cwiseProduct(grad_out).sum();
      unflatten_params(np_net, minus);
      const double f_minus = forward(np_net, g, coords).cwiseProduct(grad_out).sum();
      fd[p] = (f_plus - f_minus) / (2.0 * eps);
    }
    const double scale = std::max(1.0, fd.cwiseAbs().maxCoeff());
    CAPTURE(seed);
    CHECK((analytic - fd).cwiseAbs().maxCoeff() < 1e-4 * scale);
  }
}

TEST_CASE("backward: zero upstream gradient, exact head gradient") {
  Rng rng(6);
  const int n = 18;
  MatX coords = random_points(n, rng);
  KnnGraph g = geom::knn_graph(coords, 4);
  DescriptorNet net = init_weights({5, 5, 5}, 4, 9);

  ForwardCache cache;
  forward(net, g, coords, &cache);
  const NetGrads zero = backward(net, g, cache, MatX::Zero(n, 4));
  CHECK(flatten_grads(zero).cwiseAbs().maxCoeff() == 0.0);

  MatX grad_out(n, 4);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < 4; ++c) grad_out(i, c) = rng.normal();
  const NetGrads grads = backward(net, g, cache, grad_out);
  const MatX expect = cache.activation[2].transpose() * grad_out;
  CHECK((grads.head_weight - expect).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("backward: directional derivative matches finite differences") {
  Rng rng(8);
  const int n = 24;
  MatX coords = random_points(n, rng);
  KnnGraph g = geom::knn_graph(coords, 5);
  DescriptorNet net = init_weights({6, 6, 6}, 5, 3);
  MatX grad_out(n, 5);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < 5; ++c) grad_out(i, c) = rng.normal();

  ForwardCache cache;
  forward(net, g, coords, &cache);
  const VecX analytic = flatten_grads(backward(net, g, cache, grad_out));

  VecX dir(analytic.size());
  for (Eigen::Index i = 0; i < dir.size(); ++i) dir[i] = rng.normal();
  dir.normalize();

  const double eps = 1e-6;
  const VecX params = flatten_params(net);
  DescriptorNet pert = net;
  unflatten_params(pert, params + eps * dir);
  const double f_plus = forward(pert, g, coords).cwiseProduct(grad_out).sum();
  unflatten_params(pert, params - eps * dir);
  const double f_minus = forward(pert, g, coords).cwiseProduct(grad_out).sum();
  const double fd = (f_plus - f_minus) / (2.0 * eps);
  const double an = analytic.dot(dir);
  CHECK(std::abs(fd - an) < 1e-4 * std::max(1.0, std::abs(fd)));
}

TEST_CASE("checkpoint round trip is bitwise") {
  DescriptorNet net = init_weights({7, 9, 11}, 13, 1234);
  // perturb away from the init to make the payload nontrivial
  VecX p = flatten_params(net);
  Rng rng(5);
  for (Eigen::Index i = 0; i < p.size(); ++i) p[i] += 0.01 * rng.normal();
  unflatten_params(net, p);

  save_checkpoint(net, "/tmp/s3m_test_net.bin");
  DescriptorNet back = load_checkpoint("/tmp/s3m_test_net.bin");
  CHECK(back.widths == net.widths);
  CHECK(back.hops == net.hops);
  CHECK(back.d_out == net.d_out);
  CHECK((flatten_params(back) - flatten_params(net)).cwiseAbs().maxCoeff() == 0.0);
}
