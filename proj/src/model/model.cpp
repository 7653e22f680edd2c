#include "dgm_dte/model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "dgm_dte/metrics.hpp"
#include "dgm_dte/optim.hpp"

namespace dgm {

std::string_view routing_mode_name(RoutingMode m) {
  return m == RoutingMode::teacher_forcing ? "teacher_forcing" : "predicted";
}

std::string_view branch_layout_name(BranchLayout b) {
  switch (b) {
    case BranchLayout::routed: return "routed";
    case BranchLayout::both: return "both";
    case BranchLayout::head_only: return "head_only";
    case BranchLayout::tail_only: return "tail_only";
  }
  return "routed";
}

std::string_view eval_routing_name(EvalRouting r) { return r == EvalRouting::predicted ? "predicted" : "all_head"; }

namespace {

RoutingMode parse_routing_mode(std::string_view s) {
  if (s == "teacher_forcing") return RoutingMode::teacher_forcing;
  if (s == "predicted") return RoutingMode::predicted;
  throw std::invalid_argument("unknown routing_mode '" + std::string(s) + "'");
}

BranchLayout parse_layout(std::string_view s) {
  for (auto b : {BranchLayout::routed, BranchLayout::both, BranchLayout::head_only, BranchLayout::tail_only})
    if (branch_layout_name(b) == s) return b;
  throw std::invalid_argument("unknown branch layout '" + std::string(s) + "'");
}

EvalRouting parse_eval_routing(std::string_view s) {
  if (s == "predicted") return EvalRouting::predicted;
  if (s == "all_head") return EvalRouting::all_head;
  throw std::invalid_argument("unknown eval_routing '" + std::string(s) + "'");
}

template <class T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace

void DgmConfig::validate() const {
  if (!(t_c > 0.0)) throw std::invalid_argument("config: t_c must be positive");
  if (d_o == 0) throw std::invalid_argument("config: d_O must be positive");
  if (gnn_dim == 0) throw std::invalid_argument("config: gnn_dim must be positive");
  if (gat_heads == 0 || fusion_heads == 0) throw std::invalid_argument("config: head counts must be positive");
  if (d_o % fusion_heads != 0) {
    throw std::invalid_argument("config: d_O (" + std::to_string(d_o) + ") must be divisible by fusion heads (" +
                                std::to_string(fusion_heads) + ")");
  }
  if (batch_size == 0) throw std::invalid_argument("config: batch_size must be at least 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("config: lr must be finite and nonnegative");
  if (!(bce_weight >= 0.0)) throw std::invalid_argument("config: bce_weight must be nonnegative");
  if (!(kde_bandwidth >= 0.0)) throw std::invalid_argument("config: kde_bandwidth must be nonnegative");
  for (auto w : dnn_widths)
    if (w == 0) throw std::invalid_argument("config: DNN widths must be positive");
  for (auto w : classifier_widths)
    if (w == 0) throw std::invalid_argument("config: classifier widths must be positive");
  if (std::find(kVariants.begin(), kVariants.end(), variant) == kVariants.end())
    throw std::invalid_argument("config: unknown variant '" + variant + "'");
}

void apply_variant(DgmConfig& cfg, std::string_view variant) {
  if (variant == "full") {
    cfg.use_classifier = true;
    cfg.layout = BranchLayout::routed;
    cfg.eval_routing = EvalRouting::predicted;
    cfg.reweight_on = true;
  } else if (variant == "ht-reg") {
    cfg.use_classifier = false;
    cfg.layout = BranchLayout::routed;
    cfg.eval_routing = EvalRouting::all_head;
    cfg.routing_mode = RoutingMode::teacher_forcing;
    cfg.reweight_on = true;
  } else if (variant == "im-reg") {
    cfg.use_classifier = false;
    cfg.layout = BranchLayout::both;
    cfg.eval_routing = EvalRouting::all_head;
    cfg.reweight_on = true;
  } else if (variant == "order-rep") {
    cfg.use_classifier = false;
    cfg.layout = BranchLayout::head_only;
    cfg.eval_routing = EvalRouting::all_head;
    cfg.reweight_on = false;
  } else if (variant == "re-weight") {
    cfg.use_classifier = false;
    cfg.layout = BranchLayout::tail_only;
    cfg.eval_routing = EvalRouting::all_head;
    cfg.reweight_on = true;
  } else {
    throw std::invalid_argument("unknown variant '" + std::string(variant) +
                                "' (expected full, ht-reg, im-reg, order-rep or re-weight)");
  }
  cfg.variant = std::string(variant);
}

void to_json(nlohmann::json& j, const DgmConfig& c) {
  j = nlohmann::json{{"variant", c.variant},
                     {"t_c", c.t_c},
                     {"d_O", c.d_o},
                     {"gnn_dim", c.gnn_dim},
                     {"gat_heads", c.gat_heads},
                     {"fusion_heads", c.fusion_heads},
                     {"dnn_widths", c.dnn_widths},
                     {"classifier_widths", c.classifier_widths},
                     {"activation", std::string(activation_name(c.activation))},
                     {"lr", c.lr},
                     {"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"seed", c.seed},
                     {"bce_weight", c.bce_weight},
                     {"reweight_on", c.reweight_on},
                     {"weight_normalize", c.weight_normalize},
                     {"kde_bandwidth", c.kde_bandwidth},
                     {"routing_mode", std::string(routing_mode_name(c.routing_mode))},
                     {"spatial_weight_bias", c.spatial_weight_bias},
                     {"use_classifier", c.use_classifier},
                     {"branch_layout", std::string(branch_layout_name(c.layout))},
                     {"eval_routing", std::string(eval_routing_name(c.eval_routing))}};
}

void from_json(const nlohmann::json& j, DgmConfig& c) {
  // The variant sets its switches first so explicit keys can override them.
  if (j.contains("variant")) apply_variant(c, j.at("variant").get<std::string>());
  read_opt(j, "t_c", c.t_c);
  read_opt(j, "d_O", c.d_o);
  read_opt(j, "gnn_dim", c.gnn_dim);
  read_opt(j, "gat_heads", c.gat_heads);
  read_opt(j, "fusion_heads", c.fusion_heads);
  read_opt(j, "dnn_widths", c.dnn_widths);
  read_opt(j, "classifier_widths", c.classifier_widths);
  if (j.contains("activation")) c.activation = parse_activation(j.at("activation").get<std::string>());
  read_opt(j, "lr", c.lr);
  read_opt(j, "batch_size", c.batch_size);
  read_opt(j, "epochs", c.epochs);
  read_opt(j, "seed", c.seed);
  read_opt(j, "bce_weight", c.bce_weight);
  read_opt(j, "reweight_on", c.reweight_on);
  read_opt(j, "weight_normalize", c.weight_normalize);
  read_opt(j, "kde_bandwidth", c.kde_bandwidth);
  if (j.contains("routing_mode")) c.routing_mode = parse_routing_mode(j.at("routing_mode").get<std::string>());
  read_opt(j, "spatial_weight_bias", c.spatial_weight_bias);
  read_opt(j, "use_classifier", c.use_classifier);
  if (j.contains("branch_layout")) c.layout = parse_layout(j.at("branch_layout").get<std::string>());
  if (j.contains("eval_routing")) c.eval_routing = parse_eval_routing(j.at("eval_routing").get<std::string>());
}

GraphContext make_graph_context(GraphSet graphs) {
  GraphContext ctx;
  ctx.graphs = std::move(graphs);
  ctx.spatial = make_graph_operator(ctx.graphs.spatial);
  ctx.temporal = make_graph_operator(ctx.graphs.temporal);
  ctx.merchant = make_graph_operator(ctx.graphs.merchant);
  return ctx;
}

FeatureDims feature_dims(const GraphSet& g) {
  return FeatureDims{g.spatial.feature_dim(), g.temporal.feature_dim(), g.merchant.feature_dim()};
}

namespace {

ReprStack make_stack(ParamStore& store, const std::string& prefix, const DgmConfig& cfg, FeatureDims dims,
                     Rng& rng) {
  ReprStack s;
  const auto g = cfg.gnn_dim;
  for (std::size_t l = 0; l < 2; ++l) {
    auto layer = make_gat_layer(store, prefix + "/od/gat" + std::to_string(l), l == 0 ? dims.od : g, g,
                                cfg.gat_heads, cfg.activation, rng);
    layer.edge_weight_bias = cfg.spatial_weight_bias;
    s.od.push_back(std::move(layer));
  }
  for (std::size_t l = 0; l < 2; ++l) {
    s.temporal.push_back(make_gcn_layer(store, prefix + "/temporal/gcn" + std::to_string(l),
                                        l == 0 ? dims.temporal : g, g, cfg.activation, rng));
  }
  for (std::size_t l = 0; l < 2; ++l) {
    s.merchant.push_back(make_gcn_layer(store, prefix + "/merchant/gcn" + std::to_string(l),
                                        l == 0 ? dims.merchant : g, g, cfg.activation, rng));
  }
  s.fusion = make_fusion_block(store, prefix + "/fusion", g, g, g, cfg.d_o, cfg.fusion_heads, rng);
  return s;
}

std::vector<std::size_t> mlp_widths(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out) {
  std::vector<std::size_t> w{in};
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(out);
  return w;
}

}  // namespace

DgmModel::DgmModel(const DgmConfig& cfg, FeatureDims dims, double output_scale) : cfg_(cfg) {
  cfg_.validate();
  if (!(output_scale > 0.0) || !std::isfinite(output_scale))
    throw std::invalid_argument("model: output scale must be positive and finite");
  Rng rng(cfg_.seed);
  if (cfg_.use_classifier) cls_stack_ = make_stack(params_, "cls", cfg_, dims, rng);
  if (cfg_.layout != BranchLayout::tail_only) head_ = make_stack(params_, "head", cfg_, dims, rng);
  if (cfg_.layout != BranchLayout::head_only) tail_ = make_stack(params_, "tail", cfg_, dims, rng);
  if (cfg_.use_classifier)
    cls_head_ = make_mlp(params_, "cls/mlp", mlp_widths(cfg_.d_o, cfg_.classifier_widths, 2), cfg_.activation, rng);
  regressor_ = make_mlp(params_, "regressor", mlp_widths(cfg_.d_o, cfg_.dnn_widths, 1), cfg_.activation, rng);
  output_scale_ = &params_.add("regressor/output_scale", Tensor::scalar(output_scale), false);
}

NodeEmbeddings embed_nodes(Tape& tape, const ReprStack& stack, const GraphContext& ctx) {
  NodeEmbeddings out;
  Var od = tape.constant(ctx.graphs.spatial.features);
  for (const auto& layer : stack.od) od = gat_forward(layer, ctx.spatial, od);
  Var t = tape.constant(ctx.graphs.temporal.features);
  for (const auto& layer : stack.temporal) t = gcn_forward(layer, ctx.temporal, t);
  Var m = tape.constant(ctx.graphs.merchant.features);
  for (const auto& layer : stack.merchant) m = gcn_forward(layer, ctx.merchant, m);
  out.od = normalize_embeddings(od);
  out.temporal = normalize_embeddings(t);
  out.merchant = normalize_embeddings(m);
  return out;
}

Var order_embeddings(const ReprStack& stack, const NodeEmbeddings& nodes, std::span<const OrderRef> orders) {
  std::vector<std::size_t> od, t, m;
  od.reserve(orders.size());
  t.reserve(orders.size());
  m.reserve(orders.size());
  for (const auto& r : orders) {
    od.push_back(r.od);
    t.push_back(r.t);
    m.push_back(r.m);
  }
  return fuse(stack.fusion, ops::gather_rows(nodes.od, std::move(od)), ops::gather_rows(nodes.temporal, std::move(t)),
              ops::gather_rows(nodes.merchant, std::move(m)));
}

std::vector<int> argmax_classes(const Tensor& logits) {
  if (logits.rank() != 2 || logits.cols() != 2)
    throw std::invalid_argument("argmax_classes: expected [n x 2] logits, got " + shape_str(logits.shape()));
  std::vector<int> c(logits.rows());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = logits(i, 1) > logits(i, 0) ? 1 : 0;
  return c;
}

Routing route(std::span<const int> classes) {
  Routing r;
  for (std::size_t i = 0; i < classes.size(); ++i) (classes[i] == 0 ? r.head : r.tail).push_back(i);
  r.merge_index.resize(classes.size());
  for (std::size_t p = 0; p < r.head.size(); ++p) r.merge_index[r.head[p]] = p;
  for (std::size_t p = 0; p < r.tail.size(); ++p) r.merge_index[r.tail[p]] = r.head.size() + p;
  return r;
}

Var merge(const Var& head_rows, const Var& tail_rows, const Routing& routing) {
  std::vector<Var> parts;
  if (!routing.head.empty()) {
    if (!head_rows.valid() || head_rows.rows() != routing.head.size())
      throw std::invalid_argument("merge: head rows do not match the routed head subset");
    parts.push_back(head_rows);
  }
  if (!routing.tail.empty()) {
    if (!tail_rows.valid() || tail_rows.rows() != routing.tail.size())
      throw std::invalid_argument("merge: tail rows do not match the routed tail subset");
    parts.push_back(tail_rows);
  }
  if (parts.empty()) throw std::invalid_argument("merge: empty batch");
  Var stacked = parts.size() == 1 ? parts[0] : ops::concat_rows(parts);
  return ops::gather_rows(stacked, routing.merge_index);
}

std::vector<int> class_labels(std::span<const double> y, double t_c) {
  std::vector<int> c(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) c[i] = y[i] > t_c ? 1 : 0;
  return c;
}

Var dgm_loss(const Var& y_hat, std::span<const double> y, const Var& logits, std::span<const int> y_c,
             double bce_weight) {
  const std::size_t n = y.size();
  if (n == 0) throw std::invalid_argument("loss: empty batch");
  if (y_hat.value().size() != n)
    throw std::invalid_argument("loss: " + std::to_string(y_hat.value().size()) + " predictions for " +
                                std::to_string(n) + " labels");
  Tape& tape = y_hat.tape();
  Var target = tape.constant(Tensor({n, 1}, std::vector<double>(y.begin(), y.end())));
  if (y_hat.shape() != Shape{n, 1}) throw std::invalid_argument("loss: predictions must be [n x 1]");
  Var loss = ops::mean(ops::abs(ops::sub(y_hat, target)));
  if (!logits.valid()) return loss;
  if (y_c.size() != n || logits.shape() != Shape{n, 2})
    throw std::invalid_argument("loss: class labels or logits not aligned with the batch");
  Tensor onehot = Tensor::matrix(n, 2);
  for (std::size_t i = 0; i < n; ++i) {
    if (y_c[i] != 0 && y_c[i] != 1) throw std::invalid_argument("loss: class labels must be 0 or 1");
    onehot(i, static_cast<std::size_t>(y_c[i])) = 1.0;
  }
  Var log_p = ops::log_softmax_rows(logits);
  Var ce = ops::scale(ops::sum(ops::mul(log_p, tape.constant(std::move(onehot)))), -1.0 / static_cast<double>(n));
  return ops::add(loss, ops::scale(ce, bce_weight));
}

namespace {

std::vector<OrderRef> subset(std::span<const OrderRef> orders, const std::vector<std::size_t>& idx) {
  std::vector<OrderRef> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(orders[i]);
  return out;
}

std::vector<double> subset(std::span<const double> v, const std::vector<std::size_t>& idx) {
  std::vector<double> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(v[i]);
  return out;
}

}  // namespace

ForwardResult forward(Tape& tape, const DgmModel& model, const GraphContext& ctx, const ForwardInputs& in) {
  const auto& cfg = model.config();
  const std::size_t n = in.orders.size();
  if (n == 0) throw std::invalid_argument("forward: empty batch");
  const bool training = in.labels.has_value();
  if (training && in.labels->size() != n) throw std::invalid_argument("forward: labels not aligned with orders");
  if (in.forced_classes && in.forced_classes->size() != n)
    throw std::invalid_argument("forward: forced classes not aligned with orders");

  ForwardResult res;
  if (model.classifier_stack()) {
    auto nodes = embed_nodes(tape, *model.classifier_stack(), ctx);
    res.logits = mlp_forward(*model.classifier_head(), order_embeddings(*model.classifier_stack(), nodes, in.orders));
  }

  if (in.forced_classes) {
    res.routed.assign(in.forced_classes->begin(), in.forced_classes->end());
  } else if (training && (cfg.routing_mode == RoutingMode::teacher_forcing || !res.logits.valid())) {
    res.routed = class_labels(*in.labels, cfg.t_c);
  } else if (res.logits.valid() && (training || cfg.eval_routing == EvalRouting::predicted)) {
    res.routed = argmax_classes(res.logits.value());
  } else {
    res.routed.assign(n, 0);
  }

  const bool reweight = training && cfg.reweight_on && in.density != nullptr;
  auto tail_embeddings = [&](std::span<const OrderRef> refs, std::span<const double> labels) {
    auto nodes = embed_nodes(tape, *model.tail_stack(), ctx);
    Var e = order_embeddings(*model.tail_stack(), nodes, refs);
    if (!reweight) return e;
    auto w = compute_weights(*in.density, labels, cfg.weight_normalize);
    return reweight_embeddings(e, w.weights);
  };
  auto head_embeddings = [&](std::span<const OrderRef> refs) {
    auto nodes = embed_nodes(tape, *model.head_stack(), ctx);
    return order_embeddings(*model.head_stack(), nodes, refs);
  };
  const std::span<const double> labels = training ? *in.labels : std::span<const double>{};

  Var merged;
  switch (cfg.layout) {
    case BranchLayout::routed: {
      const Routing r = route(res.routed);
      Var head_rows, tail_rows;
      if (!r.head.empty()) head_rows = head_embeddings(subset(in.orders, r.head));
      if (!r.tail.empty()) {
        const auto tail_labels = training ? subset(labels, r.tail) : std::vector<double>{};
        tail_rows = tail_embeddings(subset(in.orders, r.tail), tail_labels);
      }
      merged = merge(head_rows, tail_rows, r);
      break;
    }
    case BranchLayout::both:
      merged = ops::scale(ops::add(head_embeddings(in.orders), tail_embeddings(in.orders, labels)), 0.5);
      break;
    case BranchLayout::head_only:
      merged = head_embeddings(in.orders);
      break;
    case BranchLayout::tail_only:
      merged = tail_embeddings(in.orders, labels);
      break;
  }

  res.raw = ops::scale(mlp_forward(model.regressor(), merged), model.output_scale());
  res.prediction = ops::relu(res.raw);
  if (training) {
    const auto y_c = class_labels(labels, cfg.t_c);
    res.loss = dgm_loss(res.raw, labels, res.logits, y_c, cfg.bce_weight);
  }
  return res;
}

std::vector<double> predict(const DgmModel& model, const GraphContext& ctx, std::span<const OrderRef> orders) {
  if (orders.empty()) return {};
  Tape tape;
  tape.set_grad_enabled(false);
  auto res = forward(tape, model, ctx, ForwardInputs{orders, std::nullopt, nullptr, std::nullopt});
  const auto d = res.prediction.value().data();
  return {d.begin(), d.end()};
}

namespace {

std::string batch_dump(std::span<const std::size_t> rows, std::span<const double> labels, const Tensor& pred) {
  std::ostringstream os;
  os.precision(17);
  const std::size_t show = std::min<std::size_t>(rows.size(), 8);
  os << "batch of " << rows.size() << " orders; first " << show << " (train row, label, prediction):";
  for (std::size_t i = 0; i < show; ++i) os << " (" << rows[i] << ", " << labels[i] << ", " << pred[i] << ")";
  const auto [lo, hi] = std::minmax_element(labels.begin(), labels.end());
  os << "; label range [" << *lo << ", " << *hi << "]";
  return os.str();
}

}  // namespace

TrainResult train(DgmModel& model, const TrainingSet& data, const std::function<void(const EpochLog&)>& on_epoch) {
  const auto& cfg = model.config();
  if (data.ctx == nullptr) throw std::invalid_argument("train: missing graph context");
  if (data.train_refs.size() != data.train_labels.size() || data.val_refs.size() != data.val_labels.size())
    throw std::invalid_argument("train: orders and labels not aligned");
  if (data.train_refs.empty()) throw std::invalid_argument("train: empty training split");
  if (data.val_refs.empty()) throw std::invalid_argument("train: empty validation split");

  AdamState adam;
  adam.lr = cfg.lr;
  Rng shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> perm(data.train_refs.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});

  TrainResult result;
  result.best_val_mae = std::numeric_limits<double>::infinity();
  std::vector<Tensor> best = model.params().snapshot();

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    // Fisher-Yates with a plain modulo draw keeps the order identical across standard libraries.
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[shuffle_rng() % i]);

    double loss_sum = 0.0;
    for (std::size_t begin = 0, b = 0; begin < perm.size(); begin += cfg.batch_size, ++b) {
      const std::size_t end = std::min(perm.size(), begin + cfg.batch_size);
      std::span<const std::size_t> rows(perm.data() + begin, end - begin);
      std::vector<OrderRef> refs;
      std::vector<double> labels;
      refs.reserve(rows.size());
      labels.reserve(rows.size());
      for (auto r : rows) {
        refs.push_back(data.train_refs[r]);
        labels.push_back(data.train_labels[r]);
      }
      Tape tape;
      auto res = forward(tape, model, *data.ctx, ForwardInputs{refs, std::span<const double>(labels), data.density,
                                                               std::nullopt});
      const double loss = res.loss.value()[0];
      if (!std::isfinite(loss)) {
        throw NonFiniteLossError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                 std::to_string(b) + ": " + batch_dump(rows, labels, res.prediction.value()));
      }
      model.params().zero_grad();
      tape.backward(res.loss);
      adam_step(model.params(), adam);
      loss_sum += loss * static_cast<double>(rows.size());
    }

    EpochLog log;
    log.epoch = epoch;
    log.train_loss = loss_sum / static_cast<double>(perm.size());
    const auto val_pred = predict(model, *data.ctx, data.val_refs);
    log.val_mae = mae(data.val_labels, val_pred);
    log.val_mape = mape(data.val_labels, val_pred);
    log.val_ew = ew(data.val_labels, val_pred);
    if (log.val_mae < result.best_val_mae) {
      result.best_val_mae = log.val_mae;
      result.best_epoch = epoch;
      best = model.params().snapshot();
    }
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  model.params().restore(best);
  model.params().clear_grad();
  if (cfg.epochs == 0) result.best_val_mae = mae(data.val_labels, predict(model, *data.ctx, data.val_refs));
  return result;
}

std::string epoch_log_csv(std::span<const EpochLog> log) {
  std::string out = "epoch,train_loss,val_mae,val_mape,val_ew\n";
  auto num = [&](double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    out.append(buf, r.ptr);
  };
  for (const auto& e : log) {
    out += std::to_string(e.epoch);
    out += ',';
    num(e.train_loss);
    out += ',';
    num(e.val_mae);
    out += ',';
    num(e.val_mape);
    out += ',';
    num(e.val_ew);
    out += '\n';
  }
  return out;
}

}  // namespace dgm
