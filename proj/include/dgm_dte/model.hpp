#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dgm_dte/autodiff.hpp"
#include "dgm_dte/graphs.hpp"
#include "dgm_dte/imbalance.hpp"
#include "dgm_dte/layers.hpp"
#include "dgm_dte/params.hpp"

namespace dgm {

enum class RoutingMode { teacher_forcing, predicted };

/// How orders reach the regression branches.
enum class BranchLayout {
  routed,     // head/tail subsets by class, merged by index
  both,       // every order through both branches, embeddings averaged
  head_only,  // head branch for everything
  tail_only,  // tail branch (re-weighted) for everything
};

/// Routing used when labels are unknown.
enum class EvalRouting { predicted, all_head };

std::string_view routing_mode_name(RoutingMode m);
std::string_view branch_layout_name(BranchLayout b);
std::string_view eval_routing_name(EvalRouting r);

inline constexpr std::array<std::string_view, 5> kVariants{"full", "ht-reg", "im-reg", "order-rep", "re-weight"};

struct DgmConfig {
  double t_c = 96.0;
  std::size_t d_o = 64;
  std::size_t gnn_dim = 32;
  std::size_t gat_heads = 2;
  std::size_t fusion_heads = 4;
  std::vector<std::size_t> dnn_widths{128, 64, 32};
  std::vector<std::size_t> classifier_widths{64};
  Activation activation = Activation::relu;
  double lr = 5e-4;
  std::size_t batch_size = 256;
  std::size_t epochs = 30;
  std::uint64_t seed = 1;
  double bce_weight = 1.0;

  bool reweight_on = true;
  bool weight_normalize = true;
  /// Gaussian kernel bandwidth in hours; 0 selects Silverman's rule.
  double kde_bandwidth = 0.0;
  RoutingMode routing_mode = RoutingMode::teacher_forcing;
  bool spatial_weight_bias = false;

  std::string variant = "full";
  bool use_classifier = true;
  BranchLayout layout = BranchLayout::routed;
  EvalRouting eval_routing = EvalRouting::predicted;

  void validate() const;
};

/// Sets the variant tag and the switches it implies.
void apply_variant(DgmConfig& cfg, std::string_view variant);

void to_json(nlohmann::json& j, const DgmConfig& c);
void from_json(const nlohmann::json& j, DgmConfig& c);

/// Graphs plus their precomputed message-passing operators.
struct GraphContext {
  GraphSet graphs;
  GraphOperator spatial;
  GraphOperator temporal;
  GraphOperator merchant;
};

GraphContext make_graph_context(GraphSet graphs);

/// GAT x2 on the spatial graph, GCN x2 on the temporal and merchant graphs,
/// per-dimension normalization, attention fusion.
struct ReprStack {
  std::vector<GatLayer> od;
  std::vector<GcnLayer> temporal;
  std::vector<GcnLayer> merchant;
  FusionBlock fusion;
};

struct FeatureDims {
  std::size_t od = 0;
  std::size_t temporal = 0;
  std::size_t merchant = 0;
};

FeatureDims feature_dims(const GraphSet& g);

class DgmModel {
 public:
  /// `output_scale` multiplies the regression DNN output (hours per unit).
  DgmModel(const DgmConfig& cfg, FeatureDims dims, double output_scale);

  const DgmConfig& config() const noexcept { return cfg_; }
  ParamStore& params() noexcept { return params_; }
  const ParamStore& params() const noexcept { return params_; }

  const std::optional<ReprStack>& classifier_stack() const noexcept { return cls_stack_; }
  const std::optional<MlpHead>& classifier_head() const noexcept { return cls_head_; }
  const std::optional<ReprStack>& head_stack() const noexcept { return head_; }
  const std::optional<ReprStack>& tail_stack() const noexcept { return tail_; }
  const MlpHead& regressor() const noexcept { return regressor_; }
  double output_scale() const { return output_scale_->value[0]; }

 private:
  DgmConfig cfg_;
  ParamStore params_;
  std::optional<ReprStack> cls_stack_;
  std::optional<MlpHead> cls_head_;
  std::optional<ReprStack> head_;
  std::optional<ReprStack> tail_;
  MlpHead regressor_;
  Parameter* output_scale_ = nullptr;
};

struct NodeEmbeddings {
  Var od;
  Var temporal;
  Var merchant;
};

/// Full-graph node embeddings of one stack, each normalized per dimension.
NodeEmbeddings embed_nodes(Tape& tape, const ReprStack& stack, const GraphContext& ctx);

/// Per-order embedding E_O: gathered attribute rows fused by attention.
Var order_embeddings(const ReprStack& stack, const NodeEmbeddings& nodes, std::span<const OrderRef> orders);

/// argmax per row of [n x 2] logits; exact ties resolve to class 0 (head).
std::vector<int> argmax_classes(const Tensor& logits);

struct Routing {
  std::vector<std::size_t> head;  // original positions, ascending
  std::vector<std::size_t> tail;
  /// merge_index[i] = row of order i in concat(head rows, tail rows).
  std::vector<std::size_t> merge_index;
};

/// Stable partition by class (0 = head, 1 = tail).
Routing route(std::span<const int> classes);

/// Rows of the head and tail matrices put back in original order. Either
/// side may be invalid when its subset is empty.
Var merge(const Var& head_rows, const Var& tail_rows, const Routing& routing);

/// mean |y - y_hat| + bce_weight * mean cross-entropy(softmax(z), y_c).
/// `logits` may be invalid (no classifier term).
Var dgm_loss(const Var& y_hat, std::span<const double> y, const Var& logits, std::span<const int> y_c,
             double bce_weight = 1.0);

std::vector<int> class_labels(std::span<const double> y, double t_c);

struct ForwardResult {
  Var raw;                 // [n x 1], regressor output before the clamp; the loss reads this
  Var prediction;          // [n x 1], hours, clamped >= 0
  Var logits;              // [n x 2] when the model has a classifier
  std::vector<int> routed; // class each order was routed by
  Var loss;                // when labels were supplied
};

struct ForwardInputs {
  std::span<const OrderRef> orders;
  /// Regression labels; when present the pass is a training pass (teacher
  /// forcing, tail re-weighting) and a loss is produced.
  std::optional<std::span<const double>> labels;
  /// Density for tail re-weighting during training.
  const LabelDensity* density = nullptr;
  /// Overrides the routing decision (used for fixed-routing checks).
  std::optional<std::span<const int>> forced_classes;
};

ForwardResult forward(Tape& tape, const DgmModel& model, const GraphContext& ctx, const ForwardInputs& in);

/// Evaluation-mode predictions in hours.
std::vector<double> predict(const DgmModel& model, const GraphContext& ctx, std::span<const OrderRef> orders);

/// Training data view consumed by train().
struct TrainingSet {
  const GraphContext* ctx = nullptr;
  std::span<const OrderRef> train_refs;
  std::span<const double> train_labels;
  std::span<const OrderRef> val_refs;
  std::span<const double> val_labels;
  const LabelDensity* density = nullptr;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_mae = 0.0;
  double val_mape = 0.0;
  double val_ew = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  double best_val_mae = 0.0;
};

class NonFiniteLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Minibatch Adam training on the joint loss. The parameters with the best
/// validation MAE are restored at the end.
TrainResult train(DgmModel& model, const TrainingSet& data,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

std::string epoch_log_csv(std::span<const EpochLog> log);

}  // namespace dgm
