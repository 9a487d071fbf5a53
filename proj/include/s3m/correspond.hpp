#pragma once

#include <string>
#include <vector>

#include "s3m/fmap.hpp"
#include "s3m/types.hpp"

namespace s3m::corresp {

// Dense vertex-to-vertex assignment from a source shape into a target shape.
struct PointMap {
  int source_id = -1;
  int target_id = -1;
  std::vector<int> assignment;
  bool bijective = false;
};

bool is_permutation(const PointMap& map, int target_n);

// CSV: column header, one metadata row (source_id,target_id,n,bijective),
// then one target index per line.
void write_pointmap_csv(const PointMap& map, const std::string& path);
PointMap read_pointmap_csv(const std::string& path);

struct TemplateSelection {
  int index = -1;
  MatX loss_matrix;  // N x N total pair losses, diagonal zero
};

// Template = argmin of row sums of the pairwise loss matrix (full vertex sets,
// no augmentation or subsampling). Ties resolve to the lowest index.
TemplateSelection select_template(const std::vector<fmap::ShapeContext>& shapes,
                                  const desc::DescriptorNet& net, const fmap::TrainConfig& cfg,
                                  int workers = 1);

// Nearest-neighbor matching of the transported source embedding psi_i C^T
// against the template embedding rows. Ties resolve to the lowest index.
std::vector<int> extract_pointmap(const MatX& c_source_to_template, const MatX& psi_source,
                                  const MatX& psi_template);

struct PmfConfig {
  int iterations = 5;
  double sigma_start = 0.10;  // fraction of shape diameter
  double sigma_end = 0.02;
};

// Product manifold filter: alternate Gaussian kernel alignment and an exact
// linear assignment until the annealing schedule ends. Output is a permutation.
PointMap pmf_refine(const PointMap& initial, const MatX& coords_source,
                    const MatX& coords_template, const PmfConfig& cfg);

// Kernel alignment objective tr(P^T G_T P G_i) at bandwidth sigma (fractions
// of each shape's diameter); used by the monotone-acceptance rule and tests.
double pmf_objective(const std::vector<int>& assignment, const MatX& coords_source,
                     const MatX& coords_template, double sigma_frac);

struct CorrespondConfig {
  int n_common = 3000;  // FPS standardization cap; min over dataset applies
  std::uint64_t fps_seed = 1;
  PmfConfig pmf;
  fmap::TrainConfig loss_cfg;  // weights, tau, ridge, graph_k
  int workers = 1;
};

struct DatasetCorrespondence {
  int template_index = -1;
  std::vector<PointMap> maps;                    // shape i -> template, bijective
  std::vector<std::vector<int>> sample_indices;  // per-shape FPS subset into the full mesh
  std::vector<MatX> standardized;                // per-shape n_common x 3 coords
  MatX loss_matrix;
};

// Full inference pass: FPS-standardize to a common vertex count, select the
// template, extract point maps, PMF-refine each to a bijection.
DatasetCorrespondence correspond_dataset(const std::vector<fmap::TrainShape>& dataset,
                                         const desc::DescriptorNet& net,
                                         const CorrespondConfig& cfg);

}  // namespace s3m::corresp
