#include "s3m/correspond.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "s3m/geomcore.hpp"
#include "s3m/kdtree.hpp"
#include "s3m/lap.hpp"
#include "s3m/parallel.hpp"

namespace s3m::corresp {

bool is_permutation(const PointMap& map, int target_n) {
  if (static_cast<int>(map.assignment.size()) != target_n) return false;
  std::vector<char> seen(target_n, 0);
  for (int t : map.assignment) {
    if (t < 0 || t >= target_n || seen[t]) return false;
    seen[t] = 1;
  }
  return true;
}

void write_pointmap_csv(const PointMap& map, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open for writing: " + path);
  os << "source_id,target_id,n,bijective\n";
  os << map.source_id << "," << map.target_id << "," << map.assignment.size() << ","
     << (map.bijective ? 1 : 0) << "\n";
  for (int t : map.assignment) os << t << "\n";
}

PointMap read_pointmap_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open for reading: " + path);
  std::string header, meta;
  std::getline(is, header);
  std::getline(is, meta);
  PointMap map;
  int n = 0, bij = 0;
  char comma;
  std::istringstream ms(meta);
  ms >> map.source_id >> comma >> map.target_id >> comma >> n >> comma >> bij;
  if (!ms) throw DataError("bad point map metadata row: " + path);
  map.bijective = bij != 0;
  map.assignment.resize(n);
  for (int i = 0; i < n; ++i) {
    if (!(is >> map.assignment[i])) throw DataError("truncated point map: " + path);
  }
  return map;
}

// ---------------------------------------------------------------------------
// Template selection

namespace {

struct ShapeDescriptors {
  MatX features;      // n x d
  MatX coefficients;  // m x d
};

std::vector<ShapeDescriptors> describe_all(const std::vector<fmap::ShapeContext>& shapes,
                                           const desc::DescriptorNet& net) {
  std::vector<ShapeDescriptors> out(shapes.size());
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto& s = shapes[i];
    out[i].features = desc::forward(net, s.graph, s.coords);
    if (s.complete) {
      out[i].coefficients = s.psi.transpose() * s.mass.asDiagonal() * out[i].features;
    } else {
      // Subset rows: mass-weighted ridge least squares on the given psi rows.
      MatX normal = s.psi.transpose() * s.mass.asDiagonal() * s.psi;
      normal.diagonal().array() += 1e-8;
      out[i].coefficients =
          normal.ldlt().solve(s.psi.transpose() * (s.mass.asDiagonal() * out[i].features));
    }
  }
  return out;
}

MatX pair_loss_matrix(const std::vector<fmap::ShapeContext>& shapes,
                      const std::vector<ShapeDescriptors>& desc, const fmap::TrainConfig& cfg,
                      int workers) {
  const int n = static_cast<int>(shapes.size());
  MatX losses = MatX::Zero(n, n);
  std::vector<std::pair<int, int>> pairs;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) pairs.push_back({i, j});

  parallel_for(static_cast<int>(pairs.size()), workers, [&](int p) {
    const auto [i, j] = pairs[p];
    const MatX c_ij = fmap::solve_fmap(desc[i].coefficients, desc[j].coefficients, cfg.ridge);
    const MatX c_ji = fmap::solve_fmap(desc[j].coefficients, desc[i].coefficients, cfg.ridge);
    const int m = static_cast<int>(shapes[i].psi.cols());
    const double tau = cfg.tau < 0.0 ? fmap::default_tau(m) : cfg.tau;
    const fmap::LossBreakdown loss =
        fmap::total_loss(c_ij, c_ji, shapes[i].lambda, shapes[j].lambda, shapes[i].psi,
                         shapes[j].psi, desc[i].features, desc[j].features, tau, cfg.weights);
    losses(i, j) = loss.total;
    losses(j, i) = loss.total;
  });
  return losses;
}

}  // namespace

TemplateSelection select_template(const std::vector<fmap::ShapeContext>& shapes,
                                  const desc::DescriptorNet& net, const fmap::TrainConfig& cfg,
                                  int workers) {
  if (shapes.size() < 2) throw DataError("select_template: need at least 2 shapes");
  const auto descs = describe_all(shapes, net);
  TemplateSelection sel;
  sel.loss_matrix = pair_loss_matrix(shapes, descs, cfg, workers);
  const VecX row_sums = sel.loss_matrix.rowwise().sum();
  sel.index = 0;
  for (int i = 1; i < row_sums.size(); ++i) {
    if (row_sums[i] < row_sums[sel.index]) sel.index = i;  // ties keep the lower index
  }
  return sel;
}

// ---------------------------------------------------------------------------
// Point map extraction

std::vector<int> extract_pointmap(const MatX& c_source_to_template, const MatX& psi_source,
                                  const MatX& psi_template) {
  if (psi_source.cols() != c_source_to_template.cols() ||
      psi_template.cols() != c_source_to_template.rows()) {
    throw DataError("extract_pointmap: inconsistent truncation order");
  }
  const MatX embedded = psi_source * c_source_to_template.transpose();  // n_i x m
  KdTree tree(psi_template);
  std::vector<int> assignment(embedded.rows());
  for (Eigen::Index v = 0; v < embedded.rows(); ++v) {
    assignment[v] = tree.nearest(embedded.row(v).transpose()).index;
  }
  return assignment;
}

// ---------------------------------------------------------------------------
// Product manifold filter

namespace {

MatX gaussian_kernel(const MatX& coords, double sigma) {
  const int n = static_cast<int>(coords.rows());
  const VecX sq = coords.rowwise().squaredNorm();
  MatX d2 = (-2.0 * coords * coords.transpose());
  d2.colwise() += sq;
  d2.rowwise() += sq.transpose();
  return (-d2.cwiseMax(0.0) / (2.0 * sigma * sigma)).array().exp();
}

double quadratic_objective(const std::vector<int>& a, const MatX& g_t, const MatX& g_i) {
  // tr(P^T G_T P G_i) = sum_{v,w} G_T[a(v), a(w)] G_i[w, v]
  const int n = static_cast<int>(a.size());
  double sum = 0.0;
  for (int v = 0; v < n; ++v) {
    for (int w = 0; w < n; ++w) sum += g_t(a[v], a[w]) * g_i(w, v);
  }
  return sum;
}

double anneal_sigma(const PmfConfig& cfg, int t) {
  if (cfg.iterations <= 1) return cfg.sigma_start;
  const double frac = static_cast<double>(t) / (cfg.iterations - 1);
  return cfg.sigma_start * std::pow(cfg.sigma_end / cfg.sigma_start, frac);
}

}  // namespace

double pmf_objective(const std::vector<int>& assignment, const MatX& coords_source,
                     const MatX& coords_template, double sigma_frac) {
  const MatX g_i = gaussian_kernel(coords_source, sigma_frac * geom::bounding_diameter(coords_source));
  const MatX g_t =
      gaussian_kernel(coords_template, sigma_frac * geom::bounding_diameter(coords_template));
  return quadratic_objective(assignment, g_t, g_i);
}

PointMap pmf_refine(const PointMap& initial, const MatX& coords_source,
                    const MatX& coords_template, const PmfConfig& cfg) {
  const int n = static_cast<int>(coords_source.rows());
  if (coords_template.rows() != n) throw DataError("pmf_refine: vertex counts differ");
  if (static_cast<int>(initial.assignment.size()) != n) throw DataError("pmf_refine: bad initial map");
  for (int t : initial.assignment) {
    if (t < 0 || t >= n) throw DataError("pmf_refine: initial index out of range");
  }

  const double diam_i = geom::bounding_diameter(coords_source);
  const double diam_t = geom::bounding_diameter(coords_template);
  const bool initial_is_perm = is_permutation(initial, n);

  std::vector<int> current = initial.assignment;
  MatX g_i, g_t;
  for (int t = 0; t < cfg.iterations; ++t) {
    const double frac = anneal_sigma(cfg, t);
    g_i = gaussian_kernel(coords_source, frac * diam_i);
    g_t = gaussian_kernel(coords_template, frac * diam_t);

    // K = G_T P G_i with P the current map; columns of G_T gathered by it.
    MatX gathered(n, n);
    for (int w = 0; w < n; ++w) gathered.col(w) = g_t.col(current[w]);
    const MatX k = gathered * g_i;  // K[u, v]

    // Maximize sum_v K[pi(v), v] exactly; rows of the cost are sources.
    const std::vector<int> candidate = solve_lap(-k.transpose());

    // Monotone acceptance under the current kernels.
    const bool current_is_perm = t > 0 || initial_is_perm;
    if (!current_is_perm ||
        quadratic_objective(candidate, g_t, g_i) >= quadratic_objective(current, g_t, g_i)) {
      current = candidate;
    }
  }

  // Never return worse than a bijective initial map at the final bandwidth.
  if (initial_is_perm && cfg.iterations > 0) {
    if (quadratic_objective(initial.assignment, g_t, g_i) > quadratic_objective(current, g_t, g_i)) {
      current = initial.assignment;
    }
  }

  PointMap out;
  out.source_id = initial.source_id;
  out.target_id = initial.target_id;
  out.assignment = std::move(current);
  out.bijective = true;
  if (!is_permutation(out, n)) throw NumericalError("pmf_refine: output is not a permutation");
  return out;
}

// ---------------------------------------------------------------------------
// Dataset correspondence

DatasetCorrespondence correspond_dataset(const std::vector<fmap::TrainShape>& dataset,
                                         const desc::DescriptorNet& net,
                                         const CorrespondConfig& cfg) {
  const int n_shapes = static_cast<int>(dataset.size());
  if (n_shapes < 2) throw DataError("correspond_dataset: need at least 2 shapes");

  int n_common = cfg.n_common;
  for (const auto& s : dataset) n_common = std::min(n_common, s.mesh.n_vertices());

  DatasetCorrespondence result;
  result.sample_indices.resize(n_shapes);
  result.standardized.resize(n_shapes);

  // FPS-standardize every shape to the common count and build subset contexts.
  std::vector<fmap::ShapeContext> contexts(n_shapes);
  parallel_for(n_shapes, cfg.workers, [&](int i) {
    const auto& shape = dataset[i];
    auto idx = geom::fps_subsample(shape.mesh.vertices, n_common, cfg.fps_seed + i);
    fmap::ShapeContext ctx;
    ctx.coords.resize(n_common, 3);
    ctx.psi.resize(n_common, shape.basis.m);
    ctx.mass.resize(n_common);
    for (int r = 0; r < n_common; ++r) {
      ctx.coords.row(r) = shape.mesh.vertices.row(idx[r]);
      ctx.psi.row(r) = shape.basis.eigenfunctions.row(idx[r]);
      ctx.mass[r] = shape.basis.mass[idx[r]];
    }
    ctx.graph = geom::knn_graph(ctx.coords, std::min(cfg.loss_cfg.graph_k, n_common - 1));
    ctx.lambda = shape.basis.eigenvalues;
    ctx.complete = false;
    result.sample_indices[i] = std::move(idx);
    result.standardized[i] = ctx.coords;
    contexts[i] = std::move(ctx);
  });

  const TemplateSelection sel = select_template(contexts, net, cfg.loss_cfg, cfg.workers);
  result.template_index = sel.index;
  result.loss_matrix = sel.loss_matrix;
  const int t = sel.index;

  const auto descs = describe_all(contexts, net);
  result.maps.resize(n_shapes);
  parallel_for(n_shapes, cfg.workers, [&](int i) {
    PointMap map;
    map.source_id = i;
    map.target_id = t;
    if (i == t) {
      map.assignment.resize(n_common);
      for (int v = 0; v < n_common; ++v) map.assignment[v] = v;
      map.bijective = true;
      result.maps[i] = std::move(map);
      return;
    }
    const MatX c_it = fmap::solve_fmap(descs[i].coefficients, descs[t].coefficients, cfg.loss_cfg.ridge);
    map.assignment = extract_pointmap(c_it, contexts[i].psi, contexts[t].psi);
    result.maps[i] = pmf_refine(map, contexts[i].coords, contexts[t].coords, cfg.pmf);
  });
  return result;
}

}  // namespace s3m::corresp
