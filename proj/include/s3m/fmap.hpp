#pragma once

#include <string>
#include <vector>

#include "s3m/descnet.hpp"
#include "s3m/spectral.hpp"
#include "s3m/types.hpp"

namespace s3m::fmap {

struct LossWeights {
  double bij = 1.0;
  double orth = 1.0;
  double iso = 1.0;
  double point = 1.0;
};

struct LossBreakdown {
  double total = 0.0;
  double bij = 0.0;
  double orth = 0.0;
  double iso = 0.0;
  double point = 0.0;
};

struct TrainConfig {
  int iterations = 1000;
  double learning_rate = 1e-3;
  std::uint64_t seed = 1;
  int n_train = 2000;          // FPS subsample per iteration
  bool rotation_augment = true;
  double deform_sigma = 0.02;  // fraction of diameter, along vertex normals
  LossWeights weights;
  double tau = -1.0;    // softmax temperature; < 0 means 30/sqrt(m)
  double ridge = 1e-6;  // least-squares ridge during training
  int graph_k = 10;

  static TrainConfig from_kv_file(const std::string& path);
  void to_kv_file(const std::string& path) const;
};

double default_tau(int m);

// Closed-form ridge solution C = A_j A_i^T (A_i A_i^T + eps I)^-1.
// ridge < 0 selects the adaptive default 1e-6 tr(A_i A_i^T)/m.
MatX solve_fmap(const MatX& a_i, const MatX& a_j, double ridge);

double loss_bij(const MatX& c_ij, const MatX& c_ji);
double loss_orth(const MatX& c_ij, const MatX& c_ji);
double loss_iso(const MatX& c_ij, const MatX& c_ji, const VecX& lambda_i, const VecX& lambda_j);

// Soft point map Pi = row-softmax(tau (psi_j C) psi_i^T); both directions summed.
double loss_point(const MatX& c_ij, const MatX& c_ji, const MatX& psi_i, const MatX& psi_j,
                  const MatX& d_i, const MatX& d_j, double tau);

LossBreakdown total_loss(const MatX& c_ij, const MatX& c_ji, const VecX& lambda_i,
                         const VecX& lambda_j, const MatX& psi_i, const MatX& psi_j,
                         const MatX& d_i, const MatX& d_j, double tau, const LossWeights& w);

// One shape's view for a pair evaluation: coordinates (possibly an FPS subset
// of the full shape), a graph over them, the matching psi rows, their masses,
// and the full eigenvalue list. `complete` marks full-row views, which use the
// exact mass projection instead of the subset least squares.
struct ShapeContext {
  MatX coords;
  KnnGraph graph;
  MatX psi;
  VecX mass;
  VecX lambda;
  bool complete = false;
};

LossBreakdown eval_pair_loss(const desc::DescriptorNet& net, const ShapeContext& a,
                             const ShapeContext& b, const TrainConfig& cfg);

struct PairGradient {
  LossBreakdown loss;
  desc::NetGrads grads;
};

// Loss and exact gradients wrt every net weight, differentiating through the
// ridge-regularized functional map solve in closed form.
PairGradient grad_pair(const desc::DescriptorNet& net, const ShapeContext& a,
                       const ShapeContext& b, const TrainConfig& cfg);

// Cached per-shape training inputs (full resolution).
struct TrainShape {
  Mesh mesh;
  KnnGraph graph;
  spectral::SpectralBasis basis;
};

TrainShape make_train_shape(const Mesh& mesh, int graph_k, int m);

struct TrainResult {
  desc::DescriptorNet net;
  std::vector<LossBreakdown> history;
};

// Pair sampling, independent augmentation, per-iteration FPS, adaptive-moment
// updates. Deterministic under a fixed seed (single-threaded).
TrainResult train(const std::vector<TrainShape>& dataset, const desc::DescriptorNet& initial,
                  const TrainConfig& cfg);

void write_loss_history_csv(const std::vector<LossBreakdown>& history, const std::string& path);

// Inference-time full-row context for one shape.
ShapeContext full_context(const TrainShape& shape);

}  // namespace s3m::fmap
