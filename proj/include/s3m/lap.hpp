#pragma once

#include <vector>

#include "s3m/types.hpp"

namespace s3m {

// Exact minimum-cost linear assignment on a dense square matrix
// (Jonker-Volgenant). Returns row -> column; optionally the optimal cost.
std::vector<int> solve_lap(const MatX& cost, double* total_cost = nullptr);

}  // namespace s3m
