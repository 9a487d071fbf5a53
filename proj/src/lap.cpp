#include "s3m/lap.hpp"

#include <limits>

namespace s3m {

// Dense Jonker-Volgenant: column reduction, reduction transfer, two rounds of
// augmenting row reduction, then shortest augmenting paths with potentials.
std::vector<int> solve_lap(const MatX& cost, double* total_cost) {
  const int n = static_cast<int>(cost.rows());
  if (cost.cols() != n || n == 0) throw DataError("solve_lap: square nonempty cost required");
  if (!cost.allFinite()) throw DataError("solve_lap: non-finite costs");
  constexpr double kBig = std::numeric_limits<double>::infinity();

  std::vector<int> rowsol(n, -1), colsol(n, -1), free_rows(n), collist(n), pred(n);
  std::vector<double> u(n, 0.0), v(n, 0.0), d(n);
  std::vector<int> matches(n, 0);

  // Column reduction, columns in reverse order.
  for (int j = n - 1; j >= 0; --j) {
    double min_c = cost(0, j);
    int imin = 0;
    for (int i = 1; i < n; ++i) {
      if (cost(i, j) < min_c) {
        min_c = cost(i, j);
        imin = i;
      }
    }
    v[j] = min_c;
    if (++matches[imin] == 1) {
      rowsol[imin] = j;
      colsol[j] = imin;
    } else {
      colsol[j] = -1;
    }
  }

  // Reduction transfer for singly-assigned rows.
  int numfree = 0;
  for (int i = 0; i < n; ++i) {
    if (matches[i] == 0) {
      free_rows[numfree++] = i;
    } else if (matches[i] == 1) {
      const int j1 = rowsol[i];
      double min_h = kBig;
      for (int j = 0; j < n; ++j) {
        if (j != j1 && cost(i, j) - v[j] < min_h) min_h = cost(i, j) - v[j];
      }
      v[j1] -= min_h;
    }
  }

  // Augmenting row reduction, two sweeps.
  for (int loop = 0; loop < 2; ++loop) {
    int k = 0;
    const int prvnumfree = numfree;
    numfree = 0;
    while (k < prvnumfree) {
      const int i = free_rows[k++];
      double umin = cost(i, 0) - v[0], usubmin = kBig;
      int j1 = 0, j2 = -1;
      for (int j = 1; j < n; ++j) {
        const double h = cost(i, j) - v[j];
        if (h < usubmin) {
          if (h >= umin) {
            usubmin = h;
            j2 = j;
          } else {
            usubmin = umin;
            umin = h;
            j2 = j1;
            j1 = j;
          }
        }
      }
      int i0 = colsol[j1];
      if (umin < usubmin) {
        v[j1] -= usubmin - umin;
      } else if (i0 >= 0) {
        j1 = j2;
        i0 = colsol[j1];
      }
      rowsol[i] = j1;
      colsol[j1] = i;
      if (i0 >= 0) {
        if (umin < usubmin) {
          free_rows[--k] = i0;
        } else {
          free_rows[numfree++] = i0;
        }
      }
    }
  }

  // Shortest augmenting path for each remaining free row.
  for (int f = 0; f < numfree; ++f) {
    const int freerow = free_rows[f];
    for (int j = 0; j < n; ++j) {
      d[j] = cost(freerow, j) - v[j];
      pred[j] = freerow;
      collist[j] = j;
    }
    int low = 0, up = 0, last = -1, endofpath = -1;
    double min_d = 0.0;
    bool unassigned_found = false;
    do {
      if (up == low) {
        last = low - 1;
        min_d = d[collist[up++]];
        for (int k = up; k < n; ++k) {
          const int j = collist[k];
          const double h = d[j];
          if (h <= min_d) {
            if (h < min_d) {
              up = low;
              min_d = h;
            }
            collist[k] = collist[up];
            collist[up++] = j;
          }
        }
        for (int k = low; k < up; ++k) {
          if (colsol[collist[k]] < 0) {
            endofpath = collist[k];
            unassigned_found = true;
            break;
          }
        }
      }
      if (!unassigned_found) {
        const int j1 = collist[low++];
        const int i = colsol[j1];
        const double h = cost(i, j1) - v[j1] - min_d;
        for (int k = up; k < n; ++k) {
          const int j = collist[k];
          const double v2 = cost(i, j) - v[j] - h;
          if (v2 < d[j]) {
            pred[j] = i;
            if (v2 == min_d) {
              if (colsol[j] < 0) {
                endofpath = j;
                unassigned_found = true;
                break;
              }
              collist[k] = collist[up];
              collist[up++] = j;
            }
            d[j] = v2;
          }
        }
      }
    } while (!unassigned_found);

    for (int k = 0; k <= last; ++k) {
      const int j1 = collist[k];
      v[j1] += d[j1] - min_d;
    }
    int i;
    do {
      i = pred[endofpath];
      colsol[endofpath] = i;
      const int j1 = endofpath;
      endofpath = rowsol[i];
      rowsol[i] = j1;
    } while (i != freerow);
  }

  if (total_cost != nullptr) {
    double sum = 0.0;
    for (int i = 0; i < n; ++i) sum += cost(i, rowsol[i]);
    *total_cost = sum;
  }
  return rowsol;
}

}  // namespace s3m
