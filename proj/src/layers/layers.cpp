#include "dgm_dte/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace dgm {

Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-a, a);
  Tensor t = Tensor::matrix(fan_in, fan_out);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

GraphOperator make_graph_operator(const RelationGraph& g) {
  GraphOperator op;
  const std::size_t n = g.num_nodes();
  op.num_nodes = n;
  const auto adj = g.adjacency();
  const auto deg = g.degrees();

  double weight_sum = 0.0;
  for (const auto& e : g.edges) weight_sum += e.weight;
  const double weight_mean = g.edges.empty() ? 0.0 : weight_sum / static_cast<double>(g.edges.size());

  auto attention = std::make_shared<SparsePattern>();
  auto propagation = std::make_shared<SparsePattern>();
  attention->num_cols = propagation->num_cols = n;
  std::vector<double> bias, prop;
  for (std::size_t i = 0; i < n; ++i) {
    // Self-edge merged into the sorted neighbor list.
    std::vector<std::pair<std::size_t, double>> row = adj[i];
    row.insert(std::upper_bound(row.begin(), row.end(), std::make_pair(i, -1.0)), {i, 0.0});
    for (const auto& [j, w] : row) {
      attention->targets.push_back(j);
      op.attention_src.push_back(i);
      op.attention_dst.push_back(j);
      bias.push_back(g.weighted() && weight_mean > 0.0 && j != i ? -w / weight_mean : 0.0);
      propagation->targets.push_back(j);
      const double di = static_cast<double>(deg[i] + 1);
      const double dj = static_cast<double>(deg[j] + 1);
      prop.push_back(1.0 / std::sqrt(di * dj));
    }
    attention->offsets.push_back(attention->targets.size());
    propagation->offsets.push_back(propagation->targets.size());
  }
  const std::size_t num_entries = bias.size();
  op.attention_bias = Tensor({num_entries, 1}, std::move(bias));
  op.propagation_weights = Tensor({num_entries, 1}, std::move(prop));
  op.attention = std::move(attention);
  op.propagation = std::move(propagation);
  return op;
}

GatLayer make_gat_layer(ParamStore& store, const std::string& prefix, std::size_t in_dim, std::size_t out_dim,
                        std::size_t heads, Activation act, Rng& rng) {
  if (heads == 0) throw std::invalid_argument("gat: at least one attention head required");
  GatLayer layer;
  layer.activation = act;
  layer.weight = &store.add(prefix + "/W", xavier_uniform(in_dim, out_dim, rng));
  for (std::size_t k = 0; k < heads; ++k) {
    const std::string h = prefix + "/head" + std::to_string(k);
    layer.attn.push_back(&store.add(h + "/fa_w", xavier_uniform(2 * out_dim, 1, rng)));
    layer.attn_bias.push_back(&store.add(h + "/fa_b", Tensor::matrix(1, 1)));
  }
  return layer;
}

Var gat_forward(const GatLayer& layer, const GraphOperator& graph, const Var& x, std::vector<Tensor>* attention) {
  Tape& tape = x.tape();
  if (x.rows() != graph.num_nodes) {
    throw std::invalid_argument("gat_forward: " + std::to_string(x.rows()) + " feature rows for " +
                                std::to_string(graph.num_nodes) + " nodes");
  }
  const Var w = tape.param(*layer.weight);
  const Var h = ops::matmul(x, w);
  const std::size_t d = layer.out_dim();
  if (attention) attention->clear();

  Var alpha_sum;
  for (std::size_t k = 0; k < layer.heads(); ++k) {
    const Var a = tape.param(*layer.attn[k]);
    const Var s = ops::matmul(h, ops::slice_rows(a, 0, d));
    const Var t = ops::matmul(h, ops::slice_rows(a, d, 2 * d));
    Var logits = ops::add(ops::gather_rows(s, graph.attention_src), ops::gather_rows(t, graph.attention_dst));
    logits = ops::relu(ops::add(logits, tape.param(*layer.attn_bias[k])));
    if (layer.edge_weight_bias) logits = ops::add(logits, tape.constant(graph.attention_bias));
    const Var alpha = ops::segment_softmax(logits, graph.attention);
    if (attention) attention->push_back(alpha.value());
    alpha_sum = k == 0 ? alpha : ops::add(alpha_sum, alpha);
  }
  const Var alpha_mean = ops::scale(alpha_sum, 1.0 / static_cast<double>(layer.heads()));
  return ops::activate(ops::edge_aggregate(alpha_mean, h, graph.attention), layer.activation);
}

GcnLayer make_gcn_layer(ParamStore& store, const std::string& prefix, std::size_t in_dim, std::size_t out_dim,
                        Activation act, Rng& rng) {
  return GcnLayer{&store.add(prefix + "/W", xavier_uniform(in_dim, out_dim, rng)), act};
}

Var gcn_forward(const GcnLayer& layer, const GraphOperator& graph, const Var& e_prev) {
  Tape& tape = e_prev.tape();
  if (e_prev.rows() != graph.num_nodes) {
    throw std::invalid_argument("gcn_forward: " + std::to_string(e_prev.rows()) + " feature rows for " +
                                std::to_string(graph.num_nodes) + " nodes");
  }
  const Var xw = ops::matmul(e_prev, tape.param(*layer.weight));
  const Var prop = ops::edge_aggregate(tape.constant(graph.propagation_weights), xw, graph.propagation);
  return ops::activate(prop, layer.activation);
}

Var normalize_embeddings(const Var& e) { return ops::normalize_columns(e, 1e-12); }

FusionBlock make_fusion_block(ParamStore& store, const std::string& prefix, std::size_t d_od, std::size_t d_t,
                              std::size_t d_m, std::size_t d_o, std::size_t heads, Rng& rng) {
  if (heads == 0 || d_o % heads != 0) {
    throw std::invalid_argument("fusion: d_O=" + std::to_string(d_o) + " not divisible by " +
                                std::to_string(heads) + " heads");
  }
  const std::size_t dh = d_o / heads;
  FusionBlock b;
  b.wq = &store.add(prefix + "/Wq", xavier_uniform(d_od, d_o, rng));
  b.wk = &store.add(prefix + "/Wk", xavier_uniform(d_t, d_o, rng));
  b.wv = &store.add(prefix + "/Wv", xavier_uniform(d_m, d_o, rng));
  for (std::size_t i = 0; i < heads; ++i) {
    const std::string h = prefix + "/head" + std::to_string(i);
    b.head_q.push_back(&store.add(h + "/Wq", xavier_uniform(d_o, dh, rng)));
    b.head_k.push_back(&store.add(h + "/Wk", xavier_uniform(d_o, dh, rng)));
    b.head_v.push_back(&store.add(h + "/Wv", xavier_uniform(d_o, dh, rng)));
  }
  b.wo = &store.add(prefix + "/Wo", xavier_uniform(d_o, d_o, rng));
  return b;
}

Var fuse(const FusionBlock& block, const Var& e_od, const Var& e_t, const Var& e_m) {
  Tape& tape = e_od.tape();
  const std::size_t n = e_od.rows();
  if (e_t.rows() != n || e_m.rows() != n) {
    throw std::invalid_argument("fuse: attribute embeddings disagree on order count (" + std::to_string(n) + ", " +
                                std::to_string(e_t.rows()) + ", " + std::to_string(e_m.rows()) + ")");
  }
  const Var q = ops::matmul(e_od, tape.param(*block.wq));
  const Var k = ops::matmul(e_t, tape.param(*block.wk));
  const Var v = ops::matmul(e_m, tape.param(*block.wv));
  const Var tokens = ops::concat_rows({q, k, v});  // [3n x d_o]
  const std::size_t dh = block.out_dim() / block.heads();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<Var> heads;
  for (std::size_t i = 0; i < block.heads(); ++i) {
    const Var qa = ops::matmul(tokens, tape.param(*block.head_q[i]));
    const Var ka = ops::matmul(tokens, tape.param(*block.head_k[i]));
    const Var va = ops::matmul(tokens, tape.param(*block.head_v[i]));
    std::vector<Var> qs, ks, vs;
    for (std::size_t j = 0; j < 3; ++j) {
      qs.push_back(ops::slice_rows(qa, j * n, (j + 1) * n));
      ks.push_back(ops::slice_rows(ka, j * n, (j + 1) * n));
      vs.push_back(ops::slice_rows(va, j * n, (j + 1) * n));
    }
    Var pooled;
    for (std::size_t j = 0; j < 3; ++j) {
      std::vector<Var> logits;
      for (std::size_t l = 0; l < 3; ++l) logits.push_back(ops::row_sum(ops::mul(qs[j], ks[l])));
      const Var att = ops::softmax_rows(ops::scale(ops::concat_cols(logits), inv_sqrt));  // [n x 3]
      for (std::size_t l = 0; l < 3; ++l) {
        const Var term = ops::scale_rows(vs[l], ops::slice_cols(att, l, l + 1));
        pooled = pooled.valid() ? ops::add(pooled, term) : term;
      }
    }
    heads.push_back(ops::scale(pooled, 1.0 / 3.0));
  }
  const Var cat = heads.size() == 1 ? heads.front() : ops::concat_cols(heads);
  return ops::matmul(cat, tape.param(*block.wo));
}

MlpHead make_mlp(ParamStore& store, const std::string& prefix, const std::vector<std::size_t>& widths,
                 Activation act, Rng& rng) {
  if (widths.size() < 2) throw std::invalid_argument("mlp: need an input width and at least one layer");
  MlpHead head;
  head.activation = act;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::string p = prefix + "/layer" + std::to_string(l);
    head.weights.push_back(&store.add(p + "/W", xavier_uniform(widths[l], widths[l + 1], rng)));
    head.biases.push_back(&store.add(p + "/b", Tensor::matrix(1, widths[l + 1])));
  }
  return head;
}

Var mlp_forward(const MlpHead& head, const Var& x) {
  Tape& tape = x.tape();
  Var y = x;
  for (std::size_t l = 0; l < head.weights.size(); ++l) {
    y = ops::add(ops::matmul(y, tape.param(*head.weights[l])), tape.param(*head.biases[l]));
    if (l + 1 < head.weights.size()) y = ops::activate(y, head.activation);
  }
  return y;
}

}  // namespace dgm
