#pragma once

#include <array>
#include <string>
#include <vector>

#include "s3m/types.hpp"

namespace s3m::desc {

// One topology-adaptive graph convolution layer: a polynomial in the
// normalized adjacency with one weight matrix per hop power plus a bias.
struct TagLayer {
  std::vector<MatX> weights;  // weights[h] for h = 0..hops
  VecX bias;
};

// Three TAG layers (1, 2, 3 hops) followed by a linear head. Input features
// are raw xyz in mm, centered at the shape centroid inside forward().
struct DescriptorNet {
  std::array<TagLayer, 3> layers;
  MatX head_weight;
  VecX head_bias;
  std::array<int, 3> hops{1, 2, 3};
  int in_dim = 3;
  std::array<int, 3> widths{64, 64, 64};
  int d_out = 128;
  std::uint64_t seed = 0;
};

// Gradients mirror the weight layout.
struct NetGrads {
  std::array<TagLayer, 3> layers;
  MatX head_weight;
  VecX head_bias;
};

DescriptorNet init_weights(const std::array<int, 3>& widths, int d_out, std::uint64_t seed,
                           const std::array<int, 3>& hops = {1, 2, 3});

struct ForwardCache {
  MatX input;                              // centered coords
  std::array<std::vector<MatX>, 3> hop_inputs;  // A^h * H_{l-1} per layer
  std::array<MatX, 3> pre_activation;
  std::array<MatX, 3> activation;
};

// H_l = LeakyReLU(sum_h A^h H_{l-1} W_{l,h} + b_l), then the linear head.
MatX forward(const DescriptorNet& net, const KnnGraph& graph, const MatX& coords,
             ForwardCache* cache = nullptr);

// Exact reverse-mode gradients; A^T drives the adjoint pass.
NetGrads backward(const DescriptorNet& net, const KnnGraph& graph, const ForwardCache& cache,
                  const MatX& grad_out);

NetGrads zero_grads(const DescriptorNet& net);
void accumulate(NetGrads& into, const NetGrads& from, double scale = 1.0);

// Flat views for finite-difference tests and the optimizer.
VecX flatten_params(const DescriptorNet& net);
VecX flatten_grads(const NetGrads& grads);
void unflatten_params(DescriptorNet& net, const VecX& flat);
int param_count(const DescriptorNet& net);

// Binary checkpoint plus a human-readable hyperparameter sidecar (path + ".txt").
void save_checkpoint(const DescriptorNet& net, const std::string& path);
DescriptorNet load_checkpoint(const std::string& path);

}  // namespace s3m::desc
