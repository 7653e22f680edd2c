#pragma once

#include <cstddef>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "dgm_dte/autodiff.hpp"
#include "dgm_dte/graphs.hpp"
#include "dgm_dte/params.hpp"

namespace dgm {

using Rng = std::mt19937_64;

/// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng);

/// Message-passing structure of one relation graph, computed once and shared
/// by every layer applied to that graph.
struct GraphOperator {
  std::size_t num_nodes = 0;
  /// Neighborhoods with a self-edge per node, rows sorted by target.
  std::shared_ptr<const SparsePattern> attention;
  std::vector<std::size_t> attention_src;
  std::vector<std::size_t> attention_dst;
  /// Additive logit bias -w_ij / mean(w) for weighted graphs (0 on self-edges).
  Tensor attention_bias;
  /// Pattern of A + I and the values of D^-1/2 (A + I) D^-1/2.
  std::shared_ptr<const SparsePattern> propagation;
  Tensor propagation_weights;
};

GraphOperator make_graph_operator(const RelationGraph& g);

struct GatLayer {
  Parameter* weight = nullptr;               // [in x out], shared by all heads
  std::vector<Parameter*> attn;              // f_a weights per head, [2*out x 1]
  std::vector<Parameter*> attn_bias;         // f_a bias per head, [1 x 1]
  Activation activation = Activation::relu;
  bool edge_weight_bias = false;

  std::size_t heads() const noexcept { return attn.size(); }
  std::size_t out_dim() const { return weight->value.cols(); }
};

GatLayer make_gat_layer(ParamStore& store, const std::string& prefix, std::size_t in_dim, std::size_t out_dim,
                        std::size_t heads, Activation act, Rng& rng);

/// out_i = act((1/K) sum_k sum_{j in N(i) + i} alpha^k_ij W x_j) with
/// alpha^k_ij = softmax_j(ReLU(f_a^k([W x_i | W x_j]))). When `attention`
/// is given it receives the per-head coefficients, one [E x 1] per head, in
/// GraphOperator::attention order.
Var gat_forward(const GatLayer& layer, const GraphOperator& graph, const Var& x,
                std::vector<Tensor>* attention = nullptr);

struct GcnLayer {
  Parameter* weight = nullptr;  // [in x out]
  Activation activation = Activation::relu;
};

GcnLayer make_gcn_layer(ParamStore& store, const std::string& prefix, std::size_t in_dim, std::size_t out_dim,
                        Activation act, Rng& rng);

/// act(D^-1/2 (A + I) D^-1/2 E W).
Var gcn_forward(const GcnLayer& layer, const GraphOperator& graph, const Var& e_prev);

/// Each column divided by its L2 norm over all nodes; near-zero columns become zero.
Var normalize_embeddings(const Var& e);

/// Multi-head attention over the three projected attribute tokens of each order.
struct FusionBlock {
  Parameter* wq = nullptr;  // [d_od x d_o]
  Parameter* wk = nullptr;  // [d_t x d_o]
  Parameter* wv = nullptr;  // [d_m x d_o]
  std::vector<Parameter*> head_q, head_k, head_v;  // [d_o x d_o / h] each
  Parameter* wo = nullptr;  // [d_o x d_o]

  std::size_t heads() const noexcept { return head_q.size(); }
  std::size_t out_dim() const { return wo->value.cols(); }
};

FusionBlock make_fusion_block(ParamStore& store, const std::string& prefix, std::size_t d_od, std::size_t d_t,
                              std::size_t d_m, std::size_t d_o, std::size_t heads, Rng& rng);

/// Inputs are per-order rows. Tokens (e_od Wq, e_t Wk, e_m Wv) attend to
/// each other per head with scaled dot products; token outputs are
/// mean-pooled, heads concatenated and projected by W^O.
Var fuse(const FusionBlock& block, const Var& e_od, const Var& e_t, const Var& e_m);

struct MlpHead {
  std::vector<Parameter*> weights;
  std::vector<Parameter*> biases;
  Activation activation = Activation::relu;
};

/// `widths` lists the input width followed by every layer's output width.
MlpHead make_mlp(ParamStore& store, const std::string& prefix, const std::vector<std::size_t>& widths,
                 Activation act, Rng& rng);

/// Affine -> activation chain; the last affine layer has no activation.
Var mlp_forward(const MlpHead& head, const Var& x);

}  // namespace dgm
