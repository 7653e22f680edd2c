#pragma once

// Shared helpers for the unit and acceptance tests: a central finite
// difference gradient checker and small random fixtures.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dgm_dte/autodiff.hpp"
#include "dgm_dte/graphs.hpp"
#include "dgm_dte/model.hpp"
#include "dgm_dte/params.hpp"

namespace dgm::testing {

using TestRng = std::mt19937_64;

inline Tensor random_tensor(const Shape& shape, TestRng& rng, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor t(shape);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  /// Entries whose +-h evaluations landed on a different smooth piece.
  std::size_t skipped = 0;
  std::string worst;
};

/// Relative error of one tensor: max|a - n| / max(max|a|, max|n|, floor).
inline double tensor_rel_error(std::span<const double> a, std::span<const double> n, double floor = 1e-8) {
  double diff = 0.0, scale = floor;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::fabs(a[i] - n[i]));
    scale = std::max({scale, std::fabs(a[i]), std::fabs(n[i])});
  }
  return diff / scale;
}

namespace detail {

/// Perturbs each entry of each buffer in turn and compares central
/// differences with `analytic`.
inline GradCheckResult compare(std::vector<double*> values, std::vector<std::size_t> sizes,
                               const std::vector<std::vector<double>>& analytic, const std::vector<std::string>& names,
                               const std::function<std::pair<double, std::vector<signed char>>()>& eval,
                               const std::vector<signed char>& base_signature, double h, double base_loss) {
  GradCheckResult r;
  // Central differences carry roundoff near eps |L| / h; gradients far below
  // that are compared at an absolute scale tied to the loss.
  const double floor = 1e-6 * std::max(1.0, std::fabs(base_loss));
  for (std::size_t k = 0; k < values.size(); ++k) {
    std::vector<double> a, n;
    for (std::size_t e = 0; e < sizes[k]; ++e) {
      double& x = values[k][e];
      const double x0 = x;
      x = x0 + h;
      const auto [fp, sp] = eval();
      x = x0 - h;
      const auto [fm, sm] = eval();
      x = x0;
      if (sp != base_signature || sm != base_signature) {
        ++r.skipped;
        continue;
      }
      a.push_back(analytic[k][e]);
      n.push_back((fp - fm) / (2.0 * h));
      ++r.checked;
    }
    if (a.empty()) continue;
    const double err = tensor_rel_error(a, n, floor);
    if (err >= r.max_rel_error) {
      r.max_rel_error = err;
      r.worst = names[k];
    }
  }
  return r;
}

}  // namespace detail

using LossFn = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Gradient of fn with respect to each input tensor versus central differences.
inline GradCheckResult check_gradients(std::vector<Tensor> inputs, const LossFn& fn, double h = 1e-5) {
  Tape tape;
  tape.set_kink_tracking(true);
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.variable(t));
  Var loss = fn(tape, vars);
  const double base_loss = loss.value()[0];
  const auto signature = tape.kink_signature();
  tape.backward(loss);
  std::vector<std::vector<double>> analytic;
  std::vector<std::string> names;
  std::vector<double*> ptrs;
  std::vector<std::size_t> sizes;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor g = tape.grad(vars[k]);
    analytic.emplace_back(g.data().begin(), g.data().end());
    names.push_back("input " + std::to_string(k));
    ptrs.push_back(inputs[k].data().data());
    sizes.push_back(inputs[k].size());
  }
  auto eval = [&]() {
    Tape t;
    t.set_kink_tracking(true);
    std::vector<Var> vs;
    for (const auto& in : inputs) vs.push_back(t.constant(in));
    Var l = fn(t, vs);
    return std::make_pair(l.value()[0], t.kink_signature());
  };
  return detail::compare(ptrs, sizes, analytic, names, eval, signature, h, base_loss);
}

/// Gradient of fn with respect to every trainable parameter of `store`.
inline GradCheckResult check_param_gradients(ParamStore& store, const std::function<Var(Tape&)>& fn,
                                             double h = 1e-5) {
  store.zero_grad();
  std::vector<signed char> signature;
  double base_loss = 0.0;
  {
    Tape tape;
    tape.set_kink_tracking(true);
    Var loss = fn(tape);
    base_loss = loss.value()[0];
    signature = tape.kink_signature();
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  std::vector<std::string> names;
  std::vector<double*> ptrs;
  std::vector<std::size_t> sizes;
  for (auto& p : store) {
    if (!p.trainable) continue;
    analytic.emplace_back(p.grad.data().begin(), p.grad.data().end());
    names.push_back(p.name);
    ptrs.push_back(p.value.data().data());
    sizes.push_back(p.value.size());
  }
  auto eval = [&]() {
    Tape t;
    t.set_kink_tracking(true);
    Var l = fn(t);
    return std::make_pair(l.value()[0], t.kink_signature());
  };
  auto r = detail::compare(ptrs, sizes, analytic, names, eval, signature, h, base_loss);
  store.clear_grad();
  return r;
}

/// Random undirected graph on n nodes without self-loops.
inline RelationGraph random_graph(std::size_t n, double p_edge, std::size_t feature_dim, TestRng& rng,
                                  GraphKind kind = GraphKind::temporal) {
  RelationGraph g;
  g.kind = kind;
  std::bernoulli_distribution coin(p_edge);
  std::uniform_real_distribution<double> w(0.5, 5.0);
  for (std::size_t i = 0; i < n; ++i) g.node_ids.push_back("n" + std::to_string(i));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (coin(rng)) g.edges.push_back(Edge{i, j, kind == GraphKind::spatial ? w(rng) : 1.0});
  g.features = random_tensor({n, feature_dim}, rng, -1.0, 1.0);
  return g;
}

/// Three small random relation graphs with 3-dimensional node features.
inline GraphContext tiny_context(TestRng& rng, std::size_t nodes = 5) {
  GraphSet g;
  g.spatial = random_graph(nodes, 0.5, 3, rng, GraphKind::spatial);
  g.temporal = random_graph(nodes, 0.5, 3, rng, GraphKind::temporal);
  g.merchant = random_graph(nodes, 0.5, 3, rng, GraphKind::merchant);
  return make_graph_context(std::move(g));
}

/// Every learned dimension at `dim`, one hidden layer per MLP.
inline DgmConfig tiny_config(std::string_view variant, std::size_t dim = 2, std::uint64_t seed = 1) {
  DgmConfig c;
  apply_variant(c, variant);
  c.d_o = dim;
  c.gnn_dim = dim;
  c.gat_heads = 2;
  c.fusion_heads = 2;
  c.dnn_widths = {dim};
  c.classifier_widths = {dim};
  c.seed = seed;
  return c;
}

inline std::vector<OrderRef> random_refs(std::size_t n, std::size_t nodes, TestRng& rng) {
  std::uniform_int_distribution<std::size_t> u(0, nodes - 1);
  std::vector<OrderRef> r(n);
  for (auto& o : r) o = OrderRef{u(rng), u(rng), u(rng)};
  return r;
}

/// Finite-difference check of the whole tiny pipeline's training loss with
/// routing fixed to the ground-truth classes.
inline GradCheckResult tiny_pipeline_gradcheck(std::string_view variant, std::uint64_t seed, std::size_t dim = 4) {
  TestRng rng(seed * 7919 + 13);
  const auto ctx = tiny_context(rng);
  const auto refs = random_refs(6, 5, rng);
  std::uniform_real_distribution<double> head(20.0, 90.0), tail(100.0, 300.0);
  std::vector<double> labels, tail_labels;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    labels.push_back(i % 3 == 1 ? tail(rng) : head(rng));
    if (labels.back() > 96.0) tail_labels.push_back(labels.back());
  }
  DgmModel model(tiny_config(variant, dim, seed), feature_dims(ctx.graphs), 50.0);
  const auto density = estimate_density(tail_labels, 10.0);
  const auto classes = class_labels(labels, model.config().t_c);
  return check_param_gradients(model.params(), [&](Tape& tape) {
    return forward(tape, model, ctx, ForwardInputs{refs, labels, &density, classes}).loss;
  });
}

}  // namespace dgm::testing
