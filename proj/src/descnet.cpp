#include "s3m/descnet.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "s3m/kv.hpp"
#include "s3m/rng.hpp"

namespace s3m::desc {

namespace {

constexpr double kLeakySlope = 0.2;

MatX glorot(int rows, int cols, Rng& rng) {
  const double limit = std::sqrt(6.0 / (rows + cols));
  MatX w(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) w(r, c) = rng.uniform(-limit, limit);
  return w;
}

MatX leaky(const MatX& z) {
  return z.unaryExpr([](double v) { return v > 0.0 ? v : kLeakySlope * v; });
}

MatX leaky_grad(const MatX& z) {
  return z.unaryExpr([](double v) { return v > 0.0 ? 1.0 : kLeakySlope; });
}

}  // namespace

DescriptorNet init_weights(const std::array<int, 3>& widths, int d_out, std::uint64_t seed,
                           const std::array<int, 3>& hops) {
  for (int w : widths) {
    if (w < 1) throw DataError("init_weights: widths must be positive");
  }
  if (d_out < 1) throw DataError("init_weights: d_out must be positive");

  DescriptorNet net;
  net.widths = widths;
  net.d_out = d_out;
  net.hops = hops;
  net.seed = seed;
  Rng rng(seed);
  int in = net.in_dim;
  for (int l = 0; l < 3; ++l) {
    net.layers[l].weights.clear();
    for (int h = 0; h <= hops[l]; ++h) net.layers[l].weights.push_back(glorot(in, widths[l], rng));
    net.layers[l].bias = VecX::Zero(widths[l]);
    in = widths[l];
  }
  net.head_weight = glorot(in, d_out, rng);
  net.head_bias = VecX::Zero(d_out);
  return net;
}

MatX forward(const DescriptorNet& net, const KnnGraph& graph, const MatX& coords,
             ForwardCache* cache) {
  if (coords.rows() != graph.n) throw DataError("forward: coords rows != graph size");
  if (coords.cols() != net.in_dim) throw DataError("forward: input width mismatch");

  ForwardCache local;
  ForwardCache& c = cache ? *cache : local;

  c.input = coords.rowwise() - coords.colwise().mean();  // center at the centroid
  const MatX* h_prev = &c.input;
  for (int l = 0; l < 3; ++l) {
    if (h_prev->cols() != net.layers[l].weights[0].rows()) {
      throw DataError("forward: layer width mismatch");
    }
    c.hop_inputs[l].clear();
    c.hop_inputs[l].push_back(*h_prev);
    MatX z = c.hop_inputs[l][0] * net.layers[l].weights[0];
    for (int h = 1; h <= net.hops[l]; ++h) {
      // A^h applied by repeated sparse multiply.
      c.hop_inputs[l].push_back(graph.normalized * c.hop_inputs[l][h - 1]);
      z += c.hop_inputs[l][h] * net.layers[l].weights[h];
    }
    z.rowwise() += net.layers[l].bias.transpose();
    c.pre_activation[l] = z;
    c.activation[l] = leaky(z);
    h_prev = &c.activation[l];
  }
  MatX out = *h_prev * net.head_weight;
  out.rowwise() += net.head_bias.transpose();
  return out;
}

NetGrads zero_grads(const DescriptorNet& net) {
  NetGrads g;
  for (int l = 0; l < 3; ++l) {
    for (const auto& w : net.layers[l].weights) g.layers[l].weights.push_back(MatX::Zero(w.rows(), w.cols()));
    g.layers[l].bias = VecX::Zero(net.layers[l].bias.size());
  }
  g.head_weight = MatX::Zero(net.head_weight.rows(), net.head_weight.cols());
  g.head_bias = VecX::Zero(net.head_bias.size());
  return g;
}

void accumulate(NetGrads& into, const NetGrads& from, double scale) {
  for (int l = 0; l < 3; ++l) {
    for (std::size_t h = 0; h < into.layers[l].weights.size(); ++h) {
      into.layers[l].weights[h] += scale * from.layers[l].weights[h];
    }
    into.layers[l].bias += scale * from.layers[l].bias;
  }
  into.head_weight += scale * from.head_weight;
  into.head_bias += scale * from.head_bias;
}

NetGrads backward(const DescriptorNet& net, const KnnGraph& graph, const ForwardCache& cache,
                  const MatX& grad_out) {
  if (grad_out.rows() != graph.n || grad_out.cols() != net.d_out) {
    throw DataError("backward: grad_out shape mismatch");
  }
  NetGrads g = zero_grads(net);

  g.head_weight = cache.activation[2].transpose() * grad_out;
  g.head_bias = grad_out.colwise().sum();
  MatX dh = grad_out * net.head_weight.transpose();

  for (int l = 2; l >= 0; --l) {
    const MatX dz = dh.cwiseProduct(leaky_grad(cache.pre_activation[l]));
    g.layers[l].bias = dz.colwise().sum();
    MatX dh_prev = MatX::Zero(dz.rows(), net.layers[l].weights[0].rows());
    for (int h = 0; h <= net.hops[l]; ++h) {
      g.layers[l].weights[h] = cache.hop_inputs[l][h].transpose() * dz;
      // adjoint of A^h uses (A^T)^h
      MatX term = dz * net.layers[l].weights[h].transpose();
      for (int rep = 0; rep < h; ++rep) term = graph.normalized_t * term;
      dh_prev += term;
    }
    dh = std::move(dh_prev);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Flattening

namespace {

template <typename NetLike, typename Fn>
void visit_tensors(NetLike& net, Fn&& fn) {
  for (int l = 0; l < 3; ++l) {
    for (auto& w : net.layers[l].weights) fn(w);
    fn(net.layers[l].bias);
  }
  fn(net.head_weight);
  fn(net.head_bias);
}

}  // namespace

int param_count(const DescriptorNet& net) {
  int count = 0;
  visit_tensors(const_cast<DescriptorNet&>(net), [&](auto& t) { count += static_cast<int>(t.size()); });
  return count;
}

VecX flatten_params(const DescriptorNet& net) {
  VecX flat(param_count(net));
  int at = 0;
  visit_tensors(const_cast<DescriptorNet&>(net), [&](auto& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) flat[at++] = t.data()[i];
  });
  return flat;
}

VecX flatten_grads(const NetGrads& grads) {
  int count = 0;
  visit_tensors(const_cast<NetGrads&>(grads), [&](auto& t) { count += static_cast<int>(t.size()); });
  VecX flat(count);
  int at = 0;
  visit_tensors(const_cast<NetGrads&>(grads), [&](auto& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) flat[at++] = t.data()[i];
  });
  return flat;
}

void unflatten_params(DescriptorNet& net, const VecX& flat) {
  if (flat.size() != param_count(net)) throw DataError("unflatten_params: size mismatch");
  int at = 0;
  visit_tensors(net, [&](auto& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = flat[at++];
  });
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const DescriptorNet& net, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path);
  os.write("S3MNET1\n", 8);
  auto w32 = [&](std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); };
  w32(static_cast<std::uint32_t>(net.in_dim));
  for (int w : net.widths) w32(static_cast<std::uint32_t>(w));
  w32(static_cast<std::uint32_t>(net.d_out));
  for (int h : net.hops) w32(static_cast<std::uint32_t>(h));
  os.write(reinterpret_cast<const char*>(&net.seed), 8);
  const VecX flat = flatten_params(net);
  os.write(reinterpret_cast<const char*>(flat.data()), 8LL * flat.size());

  KeyValues kv;
  kv.set_int("in_dim", net.in_dim);
  kv.set_int("width_1", net.widths[0]);
  kv.set_int("width_2", net.widths[1]);
  kv.set_int("width_3", net.widths[2]);
  kv.set_int("d_out", net.d_out);
  kv.set_int("hops_1", net.hops[0]);
  kv.set_int("hops_2", net.hops[1]);
  kv.set_int("hops_3", net.hops[2]);
  kv.set_int("seed", static_cast<long long>(net.seed));
  kv.set_int("parameters", param_count(net));
  write_kv_file(kv, path + ".txt");
}

DescriptorNet load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open for reading: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, "S3MNET1\n", 8) != 0) throw DataError("not a checkpoint: " + path);
  auto r32 = [&]() {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return static_cast<int>(v);
  };
  const int in_dim = r32();
  std::array<int, 3> widths{r32(), r32(), r32()};
  const int d_out = r32();
  std::array<int, 3> hops{r32(), r32(), r32()};
  std::uint64_t seed = 0;
  is.read(reinterpret_cast<char*>(&seed), 8);

  DescriptorNet net = init_weights(widths, d_out, seed, hops);
  if (net.in_dim != in_dim) throw DataError("checkpoint input width mismatch");
  VecX flat(param_count(net));
  is.read(reinterpret_cast<char*>(flat.data()), 8LL * flat.size());
  if (!is) throw DataError("truncated checkpoint: " + path);
  unflatten_params(net, flat);
  return net;
}

}  // namespace s3m::desc
