#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "dgm_dte/graphs.hpp"
#include "dgm_dte/layers.hpp"

namespace dgm::testing {

inline double act(double x, Activation a) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::relu: return x > 0 ? x : 0.0;
    case Activation::leaky_relu: return x > 0 ? x : 0.2 * x;
    case Activation::sigmoid: return 1.0 / (1.0 + std::exp(-x));
  }
  return x;
}

inline Tensor dense_matmul(const Tensor& a, const Tensor& b) {
  Tensor c = Tensor::matrix(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

/// Per-node double loop over heads and neighborhoods.
inline Tensor gat_oracle(const GatLayer& layer, const RelationGraph& g, const Tensor& x) {
  const Tensor h = dense_matmul(x, layer.weight->value);
  const std::size_t n = g.num_nodes(), d = h.cols(), K = layer.heads();
  const auto adj = g.adjacency();
  Tensor out = Tensor::matrix(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> nb{i};
    for (const auto& [j, w] : adj[i]) nb.push_back(j);
    std::vector<double> acc(d, 0.0);
    for (std::size_t k = 0; k < K; ++k) {
      const Tensor& a = layer.attn[k]->value;
      std::vector<double> e;
      for (auto j : nb) {
        double s = layer.attn_bias[k]->value[0];
        for (std::size_t c = 0; c < d; ++c) s += a[c] * h(i, c) + a[d + c] * h(j, c);
        e.push_back(s > 0 ? s : 0.0);
      }
      double mx = e[0], z = 0.0;
      for (double v : e) mx = std::max(mx, v);
      for (double& v : e) z += (v = std::exp(v - mx));
      for (std::size_t p = 0; p < nb.size(); ++p)
        for (std::size_t c = 0; c < d; ++c) acc[c] += e[p] / z * h(nb[p], c) / static_cast<double>(K);
    }
    for (std::size_t c = 0; c < d; ++c) out(i, c) = act(acc[c], layer.activation);
  }
  return out;
}

inline Tensor gcn_oracle(const GcnLayer& layer, const RelationGraph& g, const Tensor& x) {
  const std::size_t n = g.num_nodes();
  Tensor a = Tensor::identity(n);
  for (const auto& e : g.edges) a(e.a, e.b) = a(e.b, e.a) = 1.0;
  std::vector<double> deg(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) deg[i] += a(i, j);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a(i, j) /= std::sqrt(deg[i] * deg[j]);
  Tensor out = dense_matmul(dense_matmul(a, x), layer.weight->value);
  for (auto& v : out.data()) v = act(v, layer.activation);
  return out;
}

/// Direct Gaussian kernel sum over all labels.
inline double kernel_oracle(const std::vector<double>& labels, double y, double bw) {
  double s = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double z = (y - labels[i]) / bw;
    s += std::exp(-z * z / 2.0) / (bw * std::sqrt(2.0 * std::numbers::pi));
  }
  return s / static_cast<double>(labels.size());
}

/// Smallest error w whose Heaviside coverage count(err <= w) / N reaches p.
inline double ew_oracle(const std::vector<double>& err, double p) {
  std::vector<double> sorted = err;
  std::sort(sorted.begin(), sorted.end());
  const auto n = static_cast<double>(sorted.size());
  for (double w : sorted) {
    std::size_t covered = 0;
    for (double e : sorted) covered += e <= w ? 1 : 0;
    if (static_cast<double>(covered) / n >= p) return w;
  }
  return sorted.back();
}

}  // namespace dgm::testing
