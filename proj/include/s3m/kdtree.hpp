#pragma once

#include <algorithm>
#include <limits>
#include <numeric>
#include <vector>

#include "s3m/types.hpp"

namespace s3m {

// Exact kd-tree over row vectors of arbitrary dimension. Ties in distance are
// broken by the lower point index, so queries are fully deterministic.
class KdTree {
 public:
  KdTree() = default;

  explicit KdTree(const MatX& points) { build(points); }

  void build(const MatX& points) {
    pts_ = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>(points);
    const int n = static_cast<int>(pts_.rows());
    order_.resize(n);
    std::iota(order_.begin(), order_.end(), 0);
    nodes_.clear();
    nodes_.reserve(2 * static_cast<std::size_t>(n) / kLeafSize + 2);
    if (n > 0) root_ = build_node(0, n);
  }

  int size() const { return static_cast<int>(pts_.rows()); }
  int dim() const { return static_cast<int>(pts_.cols()); }

  struct Hit {
    double d2 = std::numeric_limits<double>::infinity();
    int index = -1;
    bool better_than(const Hit& o) const { return d2 < o.d2 || (d2 == o.d2 && index < o.index); }
  };

  // Nearest neighbor; `exclude` skips one index (self queries).
  Hit nearest(const Eigen::Ref<const VecX>& query, int exclude = -1) const {
    std::vector<Hit> out = knearest(query, 1, exclude);
    return out.empty() ? Hit{} : out[0];
  }

  // k nearest, ascending by (distance, index).
  std::vector<Hit> knearest(const Eigen::Ref<const VecX>& query, int k, int exclude = -1) const {
    std::vector<Hit> heap;  // max-heap on (d2, index)
    heap.reserve(static_cast<std::size_t>(k) + 1);
    if (size() > 0 && k > 0) search(root_, query, k, exclude, heap);
    std::sort_heap(heap.begin(), heap.end(), hit_less);
    return heap;
  }

 private:
  static constexpr int kLeafSize = 12;

  struct Node {
    int axis = -1;  // -1 for leaf
    double split = 0.0;
    int left = -1, right = -1;
    int begin = 0, end = 0;  // leaf range in order_
  };

  static bool hit_less(const Hit& a, const Hit& b) { return a.better_than(b); }

  int build_node(int begin, int end) {
    Node node;
    if (end - begin <= kLeafSize) {
      node.begin = begin;
      node.end = end;
      nodes_.push_back(node);
      return static_cast<int>(nodes_.size()) - 1;
    }
    // Split on the axis of largest extent.
    const int d = dim();
    int axis = 0;
    double best_extent = -1.0;
    for (int a = 0; a < d; ++a) {
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (int i = begin; i < end; ++i) {
        const double v = pts_(order_[i], a);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      if (hi - lo > best_extent) {
        best_extent = hi - lo;
        axis = a;
      }
    }
    const int mid = (begin + end) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](int a, int b) {
                       const double va = pts_(a, axis), vb = pts_(b, axis);
                       return va < vb || (va == vb && a < b);
                     });
    node.axis = axis;
    node.split = pts_(order_[mid], axis);
    const int self = static_cast<int>(nodes_.size());
    nodes_.push_back(node);
    const int left = build_node(begin, mid);
    const int right = build_node(mid, end);
    nodes_[self].left = left;
    nodes_[self].right = right;
    return self;
  }

  void consider(int idx, const Eigen::Ref<const VecX>& query, int k, int exclude,
                std::vector<Hit>& heap) const {
    if (idx == exclude) return;
    Hit h;
    h.d2 = (pts_.row(idx).transpose() - query).squaredNorm();
    h.index = idx;
    if (static_cast<int>(heap.size()) < k) {
      heap.push_back(h);
      std::push_heap(heap.begin(), heap.end(), hit_less);
    } else if (h.better_than(heap.front())) {
      std::pop_heap(heap.begin(), heap.end(), hit_less);
      heap.back() = h;
      std::push_heap(heap.begin(), heap.end(), hit_less);
    }
  }

  void search(int ni, const Eigen::Ref<const VecX>& query, int k, int exclude,
              std::vector<Hit>& heap) const {
    const Node& node = nodes_[ni];
    if (node.axis < 0) {
      for (int i = node.begin; i < node.end; ++i) consider(order_[i], query, k, exclude, heap);
      return;
    }
    const double delta = query[node.axis] - node.split;
    const int near = delta < 0.0 ? node.left : node.right;
    const int far = delta < 0.0 ? node.right : node.left;
    search(near, query, k, exclude, heap);
    // Descend on equality too: an equidistant lower index may hide there.
    if (static_cast<int>(heap.size()) < k || delta * delta <= heap.front().d2) {
      search(far, query, k, exclude, heap);
    }
  }

  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> pts_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

}  // namespace s3m
