#include "s3m/fmap.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Geometry>
#include <cmath>
#include <fstream>

#include "s3m/geomcore.hpp"
#include "s3m/kv.hpp"
#include "s3m/rng.hpp"

namespace s3m::fmap {

double default_tau(int m) { return 30.0 / std::sqrt(static_cast<double>(m)); }

namespace {

double adaptive_ridge(const MatX& a_i) {
  const int m = static_cast<int>(a_i.rows());
  return 1e-6 * a_i.squaredNorm() / m;  // tr(A A^T) = ||A||_F^2
}

// Frobenius-norm subgradient: E / ||E||, zero at E = 0.
MatX norm_dir(const MatX& e, double nrm) {
  if (nrm < 1e-300) return MatX::Zero(e.rows(), e.cols());
  return e / nrm;
}

}  // namespace

MatX solve_fmap(const MatX& a_i, const MatX& a_j, double ridge) {
  if (a_i.cols() != a_j.cols() || a_i.rows() != a_j.rows()) {
    throw DataError("solve_fmap: descriptor shapes differ");
  }
  if (!a_i.allFinite() || !a_j.allFinite()) throw DataError("solve_fmap: non-finite input");
  const double eps = ridge < 0.0 ? adaptive_ridge(a_i) : ridge;
  MatX gram = a_i * a_i.transpose();
  gram.diagonal().array() += eps;
  Eigen::LLT<MatX> llt(gram);
  if (llt.info() != Eigen::Success) {
    throw NumericalError("solve_fmap: normal matrix singular beyond ridge");
  }
  // C = A_j A_i^T (A_i A_i^T + eps I)^-1, via the symmetric solve.
  return llt.solve(a_i * a_j.transpose()).transpose();
}

double loss_bij(const MatX& c_ij, const MatX& c_ji) {
  if (c_ij.rows() != c_ji.cols() || c_ij.cols() != c_ji.rows()) {
    throw DataError("loss_bij: shape mismatch");
  }
  const int m = static_cast<int>(c_ij.rows());
  const MatX id = MatX::Identity(m, m);
  return (c_ij * c_ji - id).norm() + (c_ji * c_ij - id).norm();
}

double loss_orth(const MatX& c_ij, const MatX& c_ji) {
  const MatX id_i = MatX::Identity(c_ij.cols(), c_ij.cols());
  const MatX id_j = MatX::Identity(c_ji.cols(), c_ji.cols());
  return (c_ij.transpose() * c_ij - id_i).norm() + (c_ji.transpose() * c_ji - id_j).norm();
}

double loss_iso(const MatX& c_ij, const MatX& c_ji, const VecX& lambda_i, const VecX& lambda_j) {
  return (c_ij * lambda_i.asDiagonal() - lambda_j.asDiagonal() * c_ij).norm() +
         (c_ji * lambda_j.asDiagonal() - lambda_i.asDiagonal() * c_ji).norm();
}

namespace {

MatX row_softmax(const MatX& logits) {
  MatX p(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    p.row(r) = (logits.row(r).array() - mx).exp();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

// One direction of the point loss; optionally accumulates gradients.
double point_loss_dir(const MatX& c_ij, const MatX& psi_i, const MatX& psi_j, const MatX& d_i,
                      const MatX& d_j, double tau, MatX* g_c, MatX* g_di, MatX* g_dj) {
  const MatX logits = tau * (psi_j * c_ij) * psi_i.transpose();  // n_j x n_i
  const MatX pi = row_softmax(logits);
  const MatX resid = pi * d_i - d_j;
  const double nj = static_cast<double>(psi_j.rows());
  const double loss = resid.squaredNorm() / nj;
  if (g_c == nullptr) return loss;

  const MatX d_resid = (2.0 / nj) * resid;
  *g_di += pi.transpose() * d_resid;
  *g_dj -= d_resid;
  const MatX d_pi = d_resid * d_i.transpose();  // n_j x n_i
  MatX d_logits(pi.rows(), pi.cols());
  for (Eigen::Index r = 0; r < pi.rows(); ++r) {
    const double dot = d_pi.row(r).dot(pi.row(r));
    d_logits.row(r) = pi.row(r).cwiseProduct(d_pi.row(r).array().operator-(dot).matrix());
  }
  *g_c += tau * psi_j.transpose() * d_logits * psi_i;
  return loss;
}

}  // namespace

double loss_point(const MatX& c_ij, const MatX& c_ji, const MatX& psi_i, const MatX& psi_j,
                  const MatX& d_i, const MatX& d_j, double tau) {
  return point_loss_dir(c_ij, psi_i, psi_j, d_i, d_j, tau, nullptr, nullptr, nullptr) +
         point_loss_dir(c_ji, psi_j, psi_i, d_j, d_i, tau, nullptr, nullptr, nullptr);
}

LossBreakdown total_loss(const MatX& c_ij, const MatX& c_ji, const VecX& lambda_i,
                         const VecX& lambda_j, const MatX& psi_i, const MatX& psi_j,
                         const MatX& d_i, const MatX& d_j, double tau, const LossWeights& w) {
  LossBreakdown out;
  out.bij = loss_bij(c_ij, c_ji);
  out.orth = loss_orth(c_ij, c_ji);
  out.iso = loss_iso(c_ij, c_ji, lambda_i, lambda_j);
  out.point = loss_point(c_ij, c_ji, psi_i, psi_j, d_i, d_j, tau);
  out.total = w.bij * out.bij + w.orth * out.orth + w.iso * out.iso + w.point * out.point;
  return out;
}

// ---------------------------------------------------------------------------
// Pair evaluation and gradients

namespace {

struct Projection {
  MatX a;  // m x d coefficients
  MatX p;  // m x n operator, A = P F
};

Projection project(const ShapeContext& ctx, const MatX& features) {
  Projection out;
  if (ctx.complete) {
    out.p = ctx.psi.transpose() * ctx.mass.asDiagonal();
  } else {
    const int m = static_cast<int>(ctx.psi.cols());
    if (ctx.psi.rows() < m) throw DataError("projection: subset smaller than m is rank-deficient");
    MatX normal = ctx.psi.transpose() * ctx.mass.asDiagonal() * ctx.psi;
    normal.diagonal().array() += 1e-8;
    out.p = normal.ldlt().solve(ctx.psi.transpose() * MatX(ctx.mass.asDiagonal()));
  }
  out.a = out.p * features;
  return out;
}

struct SolveState {
  MatX c;         // functional map
  Eigen::LLT<MatX> llt;  // factorization of A_i A_i^T + eps I
};

SolveState solve_state(const MatX& a_i, const MatX& a_j, double eps) {
  SolveState st;
  MatX gram = a_i * a_i.transpose();
  gram.diagonal().array() += eps;
  st.llt.compute(gram);
  if (st.llt.info() != Eigen::Success) {
    throw NumericalError("solve_fmap: normal matrix singular beyond ridge");
  }
  st.c = st.llt.solve(a_i * a_j.transpose()).transpose();
  return st;
}

// Adjoint of C = A_j A_i^T M^-1 with M = A_i A_i^T + eps I:
//   dL/dA_j = G M^-1 A_i
//   dL/dA_i = M^-1 G^T (A_j - C A_i) - C^T G M^-1 A_i
void solve_backward(const SolveState& st, const MatX& a_i, const MatX& a_j, const MatX& g,
                    MatX& grad_a_i, MatX& grad_a_j) {
  const MatX minv_g_t = st.llt.solve(g.transpose());        // M^-1 G^T
  const MatX g_minv_a_i = minv_g_t.transpose() * a_i;       // G M^-1 A_i
  grad_a_j += g_minv_a_i;
  grad_a_i += minv_g_t * (a_j - st.c * a_i) - st.c.transpose() * g_minv_a_i;
}

struct PairWork {
  LossBreakdown loss;
  MatX g_c_ab, g_c_ba;  // gradients wrt the two maps
  MatX g_fa, g_fb;      // direct descriptor gradients from the point loss
  SolveState ab, ba;
  Projection pa, pb;
  MatX fa, fb;
};

PairWork pair_forward(const desc::DescriptorNet& net, const ShapeContext& a, const ShapeContext& b,
                      const TrainConfig& cfg, bool with_grads, desc::ForwardCache* cache_a,
                      desc::ForwardCache* cache_b) {
  PairWork w;
  w.fa = desc::forward(net, a.graph, a.coords, cache_a);
  w.fb = desc::forward(net, b.graph, b.coords, cache_b);
  w.pa = project(a, w.fa);
  w.pb = project(b, w.fb);

  const double eps_ab = cfg.ridge < 0.0 ? adaptive_ridge(w.pa.a) : cfg.ridge;
  const double eps_ba = cfg.ridge < 0.0 ? adaptive_ridge(w.pb.a) : cfg.ridge;
  w.ab = solve_state(w.pa.a, w.pb.a, eps_ab);
  w.ba = solve_state(w.pb.a, w.pa.a, eps_ba);

  const int m = static_cast<int>(a.psi.cols());
  const double tau = cfg.tau < 0.0 ? default_tau(m) : cfg.tau;
  const MatX id = MatX::Identity(m, m);

  const MatX& c_ab = w.ab.c;
  const MatX& c_ba = w.ba.c;

  if (!with_grads) {
    w.loss = total_loss(c_ab, c_ba, a.lambda, b.lambda, a.psi, b.psi, w.fa, w.fb, tau, cfg.weights);
    return w;
  }

  w.g_c_ab = MatX::Zero(m, m);
  w.g_c_ba = MatX::Zero(m, m);
  w.g_fa = MatX::Zero(w.fa.rows(), w.fa.cols());
  w.g_fb = MatX::Zero(w.fb.rows(), w.fb.cols());

  // bijectivity
  {
    const MatX e1 = c_ab * c_ba - id;
    const MatX e2 = c_ba * c_ab - id;
    const double n1 = e1.norm(), n2 = e2.norm();
    w.loss.bij = n1 + n2;
    const MatX d1 = norm_dir(e1, n1), d2 = norm_dir(e2, n2);
    w.g_c_ab += cfg.weights.bij * (d1 * c_ba.transpose() + c_ba.transpose() * d2);
    w.g_c_ba += cfg.weights.bij * (c_ab.transpose() * d1 + d2 * c_ab.transpose());
  }
  // orthogonality
  {
    const MatX e1 = c_ab.transpose() * c_ab - id;
    const MatX e2 = c_ba.transpose() * c_ba - id;
    const double n1 = e1.norm(), n2 = e2.norm();
    w.loss.orth = n1 + n2;
    w.g_c_ab += cfg.weights.orth * 2.0 * c_ab * norm_dir(e1, n1);
    w.g_c_ba += cfg.weights.orth * 2.0 * c_ba * norm_dir(e2, n2);
  }
  // isometry (commutation with the spectra)
  {
    const MatX e1 = c_ab * a.lambda.asDiagonal() - b.lambda.asDiagonal() * c_ab;
    const MatX e2 = c_ba * b.lambda.asDiagonal() - a.lambda.asDiagonal() * c_ba;
    const double n1 = e1.norm(), n2 = e2.norm();
    w.loss.iso = n1 + n2;
    const MatX d1 = norm_dir(e1, n1), d2 = norm_dir(e2, n2);
    w.g_c_ab += cfg.weights.iso * (d1 * a.lambda.asDiagonal() - b.lambda.asDiagonal() * d1);
    w.g_c_ba += cfg.weights.iso * (d2 * b.lambda.asDiagonal() - a.lambda.asDiagonal() * d2);
  }
  // soft point correspondence
  {
    MatX g_ab = MatX::Zero(m, m), g_ba = MatX::Zero(m, m);
    const double l1 = point_loss_dir(c_ab, a.psi, b.psi, w.fa, w.fb, tau, &g_ab, &w.g_fa, &w.g_fb);
    const double l2 = point_loss_dir(c_ba, b.psi, a.psi, w.fb, w.fa, tau, &g_ba, &w.g_fb, &w.g_fa);
    w.loss.point = l1 + l2;
    w.g_c_ab += cfg.weights.point * g_ab;
    w.g_c_ba += cfg.weights.point * g_ba;
    w.g_fa *= cfg.weights.point;
    w.g_fb *= cfg.weights.point;
  }
  w.loss.total = cfg.weights.bij * w.loss.bij + cfg.weights.orth * w.loss.orth +
                 cfg.weights.iso * w.loss.iso + cfg.weights.point * w.loss.point;
  return w;
}

}  // namespace

LossBreakdown eval_pair_loss(const desc::DescriptorNet& net, const ShapeContext& a,
                             const ShapeContext& b, const TrainConfig& cfg) {
  return pair_forward(net, a, b, cfg, false, nullptr, nullptr).loss;
}

PairGradient grad_pair(const desc::DescriptorNet& net, const ShapeContext& a,
                       const ShapeContext& b, const TrainConfig& cfg) {
  if (cfg.ridge < 0.0) {
    throw DataError("grad_pair: training requires a fixed least-squares ridge");
  }
  desc::ForwardCache cache_a, cache_b;
  PairWork w = pair_forward(net, a, b, cfg, true, &cache_a, &cache_b);

  // Through both solves back to the spectral coefficients.
  MatX g_aa = MatX::Zero(w.pa.a.rows(), w.pa.a.cols());
  MatX g_ab = MatX::Zero(w.pb.a.rows(), w.pb.a.cols());
  solve_backward(w.ab, w.pa.a, w.pb.a, w.g_c_ab, g_aa, g_ab);
  solve_backward(w.ba, w.pb.a, w.pa.a, w.g_c_ba, g_ab, g_aa);

  // Projection is linear: dF = P^T dA, plus the direct point-loss term.
  const MatX g_fa = w.pa.p.transpose() * g_aa + w.g_fa;
  const MatX g_fb = w.pb.p.transpose() * g_ab + w.g_fb;

  PairGradient out;
  out.loss = w.loss;
  out.grads = desc::backward(net, a.graph, cache_a, g_fa);
  desc::accumulate(out.grads, desc::backward(net, b.graph, cache_b, g_fb));
  return out;
}

// ---------------------------------------------------------------------------
// Training

TrainShape make_train_shape(const Mesh& mesh, int graph_k, int m) {
  TrainShape shape;
  shape.mesh = mesh;
  shape.graph = geom::knn_graph(mesh.vertices, std::min(graph_k, mesh.n_vertices() - 1));
  shape.basis = spectral::eigenbasis(spectral::cotan_laplacian(mesh, graph_k), m);
  return shape;
}

ShapeContext full_context(const TrainShape& shape) {
  ShapeContext ctx;
  ctx.coords = shape.mesh.vertices;
  ctx.graph = shape.graph;
  ctx.psi = shape.basis.eigenfunctions;
  ctx.mass = shape.basis.mass;
  ctx.lambda = shape.basis.eigenvalues;
  ctx.complete = true;
  return ctx;
}

namespace {

Mat3 random_so3(Rng& rng) {
  Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  while (q.norm() < 1e-9) q = Eigen::Quaterniond(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  q.normalize();
  return q.toRotationMatrix();
}

// Random rotation about the centroid, then smooth normal displacements:
// per-vertex Gaussian magnitudes sigma * diameter along vertex normals,
// averaged over kNN neighborhoods three times.
MatX augment_shape(const TrainShape& shape, const TrainConfig& cfg, Rng& rng) {
  MatX coords = shape.mesh.vertices;
  MatX normals = geom::vertex_normals(shape.mesh);
  if (cfg.rotation_augment) {
    const Mat3 rot = random_so3(rng);
    const Eigen::RowVector3d centroid = coords.colwise().mean();
    coords = ((coords.rowwise() - centroid) * rot.transpose()).rowwise() + centroid;
    normals = normals * rot.transpose();
  }
  if (cfg.deform_sigma > 0.0) {
    const double diam = geom::bounding_diameter(shape.mesh.vertices);
    const int n = static_cast<int>(coords.rows());
    MatX disp(n, 3);
    for (int i = 0; i < n; ++i) disp.row(i) = (cfg.deform_sigma * diam * rng.normal()) * normals.row(i);
    for (int round = 0; round < 3; ++round) {
      MatX smoothed = disp;
      for (int i = 0; i < n; ++i) {
        for (int j : shape.graph.neighbors[i]) smoothed.row(i) += disp.row(j);
        smoothed.row(i) /= 1.0 + shape.graph.degree(i);
      }
      disp = std::move(smoothed);
    }
    coords += disp;
  }
  return coords;
}

ShapeContext subset_context(const TrainShape& shape, const MatX& augmented, int n_train, int graph_k,
                            Rng& rng) {
  const int n = static_cast<int>(augmented.rows());
  const int ns = std::min(n_train, n);
  const auto idx = geom::fps_from(augmented, ns, rng.uniform_int(n));

  ShapeContext ctx;
  ctx.coords.resize(ns, 3);
  ctx.psi.resize(ns, shape.basis.m);
  ctx.mass.resize(ns);
  for (int r = 0; r < ns; ++r) {
    ctx.coords.row(r) = augmented.row(idx[r]);
    ctx.psi.row(r) = shape.basis.eigenfunctions.row(idx[r]);
    ctx.mass[r] = shape.basis.mass[idx[r]];
  }
  ctx.graph = geom::knn_graph(ctx.coords, std::min(graph_k, ns - 1));
  ctx.lambda = shape.basis.eigenvalues;
  ctx.complete = false;
  return ctx;
}

}  // namespace

TrainResult train(const std::vector<TrainShape>& dataset, const desc::DescriptorNet& initial,
                  const TrainConfig& cfg) {
  if (dataset.size() < 2) throw DataError("train: need at least 2 shapes");
  for (const auto& s : dataset) {
    if (s.basis.m < 1 || s.basis.n != s.mesh.n_vertices()) throw DataError("train: basis not cached");
  }

  TrainResult result;
  result.net = initial;
  Rng rng(cfg.seed);

  const int n_params = desc::param_count(result.net);
  VecX m1 = VecX::Zero(n_params), m2 = VecX::Zero(n_params);
  const double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

  for (int iter = 0; iter < cfg.iterations; ++iter) {
    const int n_shapes = static_cast<int>(dataset.size());
    const int i = rng.uniform_int(n_shapes);
    int j = rng.uniform_int(n_shapes - 1);
    if (j >= i) ++j;

    const MatX aug_i = augment_shape(dataset[i], cfg, rng);
    const MatX aug_j = augment_shape(dataset[j], cfg, rng);
    const ShapeContext ctx_i = subset_context(dataset[i], aug_i, cfg.n_train, cfg.graph_k, rng);
    const ShapeContext ctx_j = subset_context(dataset[j], aug_j, cfg.n_train, cfg.graph_k, rng);

    PairGradient pg = grad_pair(result.net, ctx_i, ctx_j, cfg);
    result.history.push_back(pg.loss);

    const VecX g = desc::flatten_grads(pg.grads);
    VecX params = desc::flatten_params(result.net);
    const double t = iter + 1;
    for (int p = 0; p < n_params; ++p) {
      m1[p] = beta1 * m1[p] + (1.0 - beta1) * g[p];
      m2[p] = beta2 * m2[p] + (1.0 - beta2) * g[p] * g[p];
      const double mhat = m1[p] / (1.0 - std::pow(beta1, t));
      const double vhat = m2[p] / (1.0 - std::pow(beta2, t));
      params[p] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + adam_eps);
    }
    desc::unflatten_params(result.net, params);
  }
  return result;
}

void write_loss_history_csv(const std::vector<LossBreakdown>& history, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open for writing: " + path);
  os << "iteration,total,bij,orth,iso,point\n";
  char line[256];
  for (std::size_t i = 0; i < history.size(); ++i) {
    const auto& h = history[i];
    std::snprintf(line, sizeof(line), "%zu,%.9g,%.9g,%.9g,%.9g,%.9g\n", i, h.total, h.bij, h.orth,
                  h.iso, h.point);
    os << line;
  }
}

TrainConfig TrainConfig::from_kv_file(const std::string& path) {
  const KeyValues kv = read_kv_file(path);
  TrainConfig cfg;
  cfg.iterations = static_cast<int>(kv.get_int("iterations", cfg.iterations));
  cfg.learning_rate = kv.get_double("learning_rate", cfg.learning_rate);
  cfg.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(cfg.seed)));
  cfg.n_train = static_cast<int>(kv.get_int("n_train", cfg.n_train));
  cfg.rotation_augment = kv.get_bool("rotation_augment", cfg.rotation_augment);
  cfg.deform_sigma = kv.get_double("deform_sigma", cfg.deform_sigma);
  cfg.weights.bij = kv.get_double("w_bij", cfg.weights.bij);
  cfg.weights.orth = kv.get_double("w_orth", cfg.weights.orth);
  cfg.weights.iso = kv.get_double("w_iso", cfg.weights.iso);
  cfg.weights.point = kv.get_double("w_point", cfg.weights.point);
  cfg.tau = kv.get_double("tau", cfg.tau);
  cfg.ridge = kv.get_double("ridge", cfg.ridge);
  cfg.graph_k = static_cast<int>(kv.get_int("graph_k", cfg.graph_k));
  return cfg;
}

void TrainConfig::to_kv_file(const std::string& path) const {
  KeyValues kv;
  kv.set_int("iterations", iterations);
  kv.set_double("learning_rate", learning_rate);
  kv.set_int("seed", static_cast<long long>(seed));
  kv.set_int("n_train", n_train);
  kv.set_int("rotation_augment", rotation_augment ? 1 : 0);
  kv.set_double("deform_sigma", deform_sigma);
  kv.set_double("w_bij", weights.bij);
  kv.set_double("w_orth", weights.orth);
  kv.set_double("w_iso", weights.iso);
  kv.set_double("w_point", weights.point);
  kv.set_double("tau", tau);
  kv.set_double("ridge", ridge);
  kv.set_int("graph_k", graph_k);
  write_kv_file(kv, path);
}

}  // namespace s3m::fmap
