#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dgm_dte/order.hpp"
#include "dgm_dte/tensor.hpp"

namespace dgm {

enum class GraphKind { spatial, temporal, merchant };
std::string_view graph_kind_name(GraphKind k);

/// Undirected edge, stored once with a < b.
struct Edge {
  std::size_t a = 0;
  std::size_t b = 0;
  double weight = 1.0;
};

struct RelationGraph {
  GraphKind kind = GraphKind::spatial;
  std::vector<std::string> node_ids;
  std::vector<Edge> edges;
  Tensor features;  // [num_nodes x feature_dim]
  /// Isolated node standing in for attribute values unseen when the graph was built.
  std::optional<std::size_t> fallback;

  std::size_t num_nodes() const noexcept { return node_ids.size(); }
  std::size_t feature_dim() const noexcept { return features.cols(); }
  bool weighted() const noexcept { return kind == GraphKind::spatial; }
  /// Neighbor lists (both directions), each sorted by node index.
  std::vector<std::vector<std::pair<std::size_t, double>>> adjacency() const;
  std::vector<std::size_t> degrees() const;
};

struct GraphOptions {
  std::size_t knn_k = 8;
  double merchant_tau = 0.5;
  double merchant_bin_hours = 12.0;
  double merchant_range_hours = 360.0;
  /// Region buckets per axis for the one-hot origin/destination regions.
  std::size_t region_grid = 4;
  double box_km = 500.0;
  /// Sin/cos hour-of-week harmonics; 1 gives the 33-dim temporal feature.
  std::size_t temporal_harmonics = 1;
  /// Added to payment_ts before bucketing (timezone shift, seconds).
  std::int64_t tz_offset_s = 0;
  /// A Monday 00:00 in payment_ts time; 1970-01-05T00:00Z by default.
  std::int64_t week_anchor_ts = 345600;
  /// Label scale used for the statistics features.
  double label_scale_hours = 100.0;
};

inline constexpr std::size_t kHoursPerWeek = 168;

/// Hour-of-week slot 0..167, 0 = Monday 00:00-00:59.
std::size_t hour_of_week(std::int64_t payment_ts, const GraphOptions& opt = {});

/// d(i, j) = |origin_i - origin_j| + |dest_i - dest_j|, Euclidean km.
double od_distance(const Point& oi, const Point& di, const Point& oj, const Point& dj);

/// One node per distinct (sender_id, receiver_id), sorted lexicographically.
/// Each node links to its k nearest pairs (ties by node order), symmetric
/// closure applied, edge weight = distance. Features need label statistics,
/// so pass the training orders.
RelationGraph build_spatial(std::span<const Order> orders, std::size_t k, const GraphOptions& opt = {});

/// 168 hour-of-week nodes: ring edges plus same-hour links across the 7 days.
RelationGraph build_temporal(const GraphOptions& opt = {});

/// One node per merchant; edge iff cosine similarity of their normalized
/// delivery-time histograms is >= tau.
RelationGraph build_merchant(std::span<const Order> orders, double tau, const GraphOptions& opt = {});

std::vector<double> label_histogram(std::span<const double> labels, double bin_hours, double range_hours);
double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// Appends an edgeless node whose features are the mean of all node features.
void add_fallback_node(RelationGraph& g, std::string id = "<unseen>");

struct GraphSet {
  RelationGraph spatial;
  RelationGraph temporal;
  RelationGraph merchant;
};

/// Builds all three graphs from `train` and adds fallback nodes to the
/// spatial and merchant graphs (the temporal graph covers every slot).
GraphSet build_graphs(std::span<const Order> train, const GraphOptions& opt = {});

struct OrderRef {
  std::size_t od = 0;
  std::size_t t = 0;
  std::size_t m = 0;
  friend bool operator==(const OrderRef&, const OrderRef&) = default;
};

struct OrderIndex {
  std::vector<OrderRef> refs;
  std::size_t unseen_od = 0;
  std::size_t unseen_merchant = 0;
};

/// Maps each order to its node in every graph. Unknown OD pairs or merchants
/// go to the graph's fallback node; without one they throw.
OrderIndex index_orders(std::span<const Order> orders, const GraphSet& graphs, const GraphOptions& opt = {});

std::string od_node_id(const Order& o);

}  // namespace dgm
