#include "dgm_dte/graphs.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <set>
#include <stdexcept>

#include "dgm_dte/log.hpp"

namespace dgm {

std::string_view graph_kind_name(GraphKind k) {
  switch (k) {
    case GraphKind::spatial: return "spatial";
    case GraphKind::temporal: return "temporal";
    case GraphKind::merchant: return "merchant";
  }
  return "?";
}

std::vector<std::vector<std::pair<std::size_t, double>>> RelationGraph::adjacency() const {
  std::vector<std::vector<std::pair<std::size_t, double>>> adj(num_nodes());
  for (const auto& e : edges) {
    adj[e.a].emplace_back(e.b, e.weight);
    adj[e.b].emplace_back(e.a, e.weight);
  }
  for (auto& row : adj) std::sort(row.begin(), row.end());
  return adj;
}

std::vector<std::size_t> RelationGraph::degrees() const {
  std::vector<std::size_t> deg(num_nodes(), 0);
  for (const auto& e : edges) {
    ++deg[e.a];
    ++deg[e.b];
  }
  return deg;
}

std::size_t hour_of_week(std::int64_t payment_ts, const GraphOptions& opt) {
  const std::int64_t shifted = payment_ts + opt.tz_offset_s - opt.week_anchor_ts;
  std::int64_t hours = shifted / 3600;
  if (shifted % 3600 < 0) --hours;
  std::int64_t slot = hours % static_cast<std::int64_t>(kHoursPerWeek);
  if (slot < 0) slot += kHoursPerWeek;
  return static_cast<std::size_t>(slot);
}

double od_distance(const Point& oi, const Point& di, const Point& oj, const Point& dj) {
  return std::hypot(oi.x - oj.x, oi.y - oj.y) + std::hypot(di.x - dj.x, di.y - dj.y);
}

std::string od_node_id(const Order& o) { return o.sender_id + "|" + o.receiver_id; }

namespace {

struct LabelStats {
  double sum = 0.0;
  double sum_sq = 0.0;
  std::size_t count = 0;
  void add(double y) {
    sum += y;
    sum_sq += y * y;
    ++count;
  }
  double mean() const { return count ? sum / static_cast<double>(count) : 0.0; }
  double stddev() const {
    if (count < 2) return 0.0;
    const double m = mean();
    return std::sqrt(std::max(0.0, sum_sq / static_cast<double>(count) - m * m));
  }
};

std::size_t region_bucket(const Point& p, const GraphOptions& opt) {
  const auto g = static_cast<double>(opt.region_grid);
  auto cell = [&](double v) {
    const double c = std::floor(std::clamp(v / opt.box_km, 0.0, 1.0) * g);
    return std::min(static_cast<std::size_t>(c), opt.region_grid - 1);
  };
  return cell(p.y) * opt.region_grid + cell(p.x);
}

void add_edge(std::set<std::pair<std::size_t, std::size_t>>& seen, std::vector<Edge>& edges, std::size_t a,
              std::size_t b, double w) {
  if (a == b) return;
  if (a > b) std::swap(a, b);
  if (seen.insert({a, b}).second) edges.push_back(Edge{a, b, w});
}

}  // namespace

RelationGraph build_spatial(std::span<const Order> orders, std::size_t k, const GraphOptions& opt) {
  if (orders.empty()) throw std::invalid_argument("build_spatial: no orders");
  struct Acc {
    Point origin, dest;
    LabelStats labels;
  };
  std::map<std::pair<std::string, std::string>, Acc> pairs;
  for (const auto& o : orders) {
    if (!std::isfinite(o.origin.x) || !std::isfinite(o.origin.y) || !std::isfinite(o.dest.x) ||
        !std::isfinite(o.dest.y)) {
      throw std::invalid_argument("build_spatial: non-finite coordinates in order '" + o.order_id + "'");
    }
    auto& acc = pairs[{o.sender_id, o.receiver_id}];
    acc.origin.x += o.origin.x;
    acc.origin.y += o.origin.y;
    acc.dest.x += o.dest.x;
    acc.dest.y += o.dest.y;
    acc.labels.add(o.delivery_hours);
  }

  RelationGraph g;
  g.kind = GraphKind::spatial;
  std::vector<Point> origins, dests;
  std::vector<LabelStats> stats;
  for (auto& [key, acc] : pairs) {
    const auto n = static_cast<double>(acc.labels.count);
    g.node_ids.push_back(key.first + "|" + key.second);
    origins.push_back({acc.origin.x / n, acc.origin.y / n});
    dests.push_back({acc.dest.x / n, acc.dest.y / n});
    stats.push_back(acc.labels);
  }
  const std::size_t n = g.num_nodes();

  if (k >= n) {
    if (k > 0 && n > 0) {
      log::warn("build_spatial: k=" + std::to_string(k) + " >= " + std::to_string(n) + " nodes, clamped to " +
                std::to_string(n - 1));
    }
    k = n - 1;
  }

  std::set<std::pair<std::size_t, std::size_t>> seen;
  std::vector<std::pair<double, std::size_t>> cand;
  for (std::size_t i = 0; i < n && k > 0; ++i) {
    cand.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) cand.emplace_back(od_distance(origins[i], dests[i], origins[j], dests[j]), j);
    }
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
    for (std::size_t r = 0; r < k; ++r) add_edge(seen, g.edges, i, cand[r].second, cand[r].first);
  }
  std::sort(g.edges.begin(), g.edges.end(), [](const Edge& x, const Edge& y) {
    return std::tie(x.a, x.b) < std::tie(y.a, y.b);
  });

  const std::size_t regions = opt.region_grid * opt.region_grid;
  const std::size_t dim = 4 + 2 * regions + 3;
  g.features = Tensor::matrix(n, dim);
  std::size_t max_count = 1;
  for (const auto& s : stats) max_count = std::max(max_count, s.count);
  const double log_max = std::log1p(static_cast<double>(max_count));
  for (std::size_t i = 0; i < n; ++i) {
    auto row = g.features.row(i);
    row[0] = origins[i].x / opt.box_km;
    row[1] = origins[i].y / opt.box_km;
    row[2] = dests[i].x / opt.box_km;
    row[3] = dests[i].y / opt.box_km;
    row[4 + region_bucket(origins[i], opt)] = 1.0;
    row[4 + regions + region_bucket(dests[i], opt)] = 1.0;
    row[dim - 3] = stats[i].mean() / opt.label_scale_hours;
    row[dim - 2] = stats[i].stddev() / opt.label_scale_hours;
    row[dim - 1] = std::log1p(static_cast<double>(stats[i].count)) / log_max;
  }
  return g;
}

RelationGraph build_temporal(const GraphOptions& opt) {
  RelationGraph g;
  g.kind = GraphKind::temporal;
  const std::size_t n = kHoursPerWeek;
  for (std::size_t i = 0; i < n; ++i) g.node_ids.push_back("how" + std::to_string(i));

  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (std::size_t i = 0; i < n; ++i) add_edge(seen, g.edges, i, (i + 1) % n, 1.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 1; j <= 6; ++j) add_edge(seen, g.edges, i, (i + 24 * j) % n, 1.0);
  std::sort(g.edges.begin(), g.edges.end(), [](const Edge& x, const Edge& y) {
    return std::tie(x.a, x.b) < std::tie(y.a, y.b);
  });

  const std::size_t dim = 24 + 7 + 2 * opt.temporal_harmonics;
  g.features = Tensor::matrix(n, dim);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = g.features.row(i);
    row[i % 24] = 1.0;
    row[24 + i / 24] = 1.0;
    for (std::size_t h = 1; h <= opt.temporal_harmonics; ++h) {
      const double phase = 2.0 * std::numbers::pi * static_cast<double>(h * i) / static_cast<double>(n);
      row[31 + 2 * (h - 1)] = std::sin(phase);
      row[32 + 2 * (h - 1)] = std::cos(phase);
    }
  }
  return g;
}

std::vector<double> label_histogram(std::span<const double> labels, double bin_hours, double range_hours) {
  const auto bins = static_cast<std::size_t>(std::ceil(range_hours / bin_hours));
  std::vector<double> h(bins, 0.0);
  if (labels.empty()) return h;
  for (double y : labels) {
    auto b = static_cast<std::size_t>(std::max(0.0, std::floor(y / bin_hours)));
    h[std::min(b, bins - 1)] += 1.0;
  }
  for (auto& v : h) v /= static_cast<double>(labels.size());
  return h;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / std::sqrt(na * nb);
}

RelationGraph build_merchant(std::span<const Order> orders, double tau, const GraphOptions& opt) {
  if (orders.empty()) throw std::invalid_argument("build_merchant: no orders");
  if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("build_merchant: tau must lie in (0, 1)");
  std::map<std::string, std::vector<double>> labels;
  for (const auto& o : orders) labels[o.merchant_id].push_back(o.delivery_hours);

  RelationGraph g;
  g.kind = GraphKind::merchant;
  std::vector<std::vector<double>> hist;
  std::vector<LabelStats> stats;
  std::size_t max_count = 1;
  for (const auto& [id, ys] : labels) {
    g.node_ids.push_back(id);
    hist.push_back(label_histogram(ys, opt.merchant_bin_hours, opt.merchant_range_hours));
    LabelStats s;
    for (double y : ys) s.add(y);
    stats.push_back(s);
    max_count = std::max(max_count, ys.size());
  }
  const std::size_t n = g.num_nodes();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (cosine_similarity(hist[i], hist[j]) >= tau) g.edges.push_back(Edge{i, j, 1.0});

  const std::size_t bins = hist.empty() ? 0 : hist.front().size();
  const std::size_t dim = bins + 3;
  g.features = Tensor::matrix(n, dim);
  const double log_max = std::log1p(static_cast<double>(max_count));
  for (std::size_t i = 0; i < n; ++i) {
    auto row = g.features.row(i);
    std::copy(hist[i].begin(), hist[i].end(), row.begin());
    row[bins] = stats[i].mean() / opt.label_scale_hours;
    row[bins + 1] = stats[i].stddev() / opt.label_scale_hours;
    row[bins + 2] = std::log1p(static_cast<double>(stats[i].count)) / log_max;
  }
  return g;
}

void add_fallback_node(RelationGraph& g, std::string id) {
  const std::size_t n = g.num_nodes();
  const std::size_t d = g.feature_dim();
  Tensor f = Tensor::matrix(n + 1, d);
  std::copy(g.features.data().begin(), g.features.data().end(), f.data().begin());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) f(n, j) += g.features(i, j) / static_cast<double>(n);
  g.features = std::move(f);
  g.node_ids.push_back(std::move(id));
  g.fallback = n;
}

GraphSet build_graphs(std::span<const Order> train, const GraphOptions& opt) {
  GraphSet gs{build_spatial(train, opt.knn_k, opt), build_temporal(opt),
              build_merchant(train, opt.merchant_tau, opt)};
  add_fallback_node(gs.spatial);
  add_fallback_node(gs.merchant);
  return gs;
}

OrderIndex index_orders(std::span<const Order> orders, const GraphSet& graphs, const GraphOptions& opt) {
  std::map<std::string, std::size_t> od_lookup, m_lookup;
  const std::size_t od_real = graphs.spatial.num_nodes() - (graphs.spatial.fallback ? 1 : 0);
  const std::size_t m_real = graphs.merchant.num_nodes() - (graphs.merchant.fallback ? 1 : 0);
  for (std::size_t i = 0; i < od_real; ++i) od_lookup.emplace(graphs.spatial.node_ids[i], i);
  for (std::size_t i = 0; i < m_real; ++i) m_lookup.emplace(graphs.merchant.node_ids[i], i);

  OrderIndex idx;
  idx.refs.reserve(orders.size());
  for (const auto& o : orders) {
    OrderRef r;
    if (auto it = od_lookup.find(od_node_id(o)); it != od_lookup.end()) {
      r.od = it->second;
    } else if (graphs.spatial.fallback) {
      r.od = *graphs.spatial.fallback;
      ++idx.unseen_od;
    } else {
      throw std::out_of_range("index_orders: unknown OD pair '" + od_node_id(o) + "'");
    }
    if (auto it = m_lookup.find(o.merchant_id); it != m_lookup.end()) {
      r.m = it->second;
    } else if (graphs.merchant.fallback) {
      r.m = *graphs.merchant.fallback;
      ++idx.unseen_merchant;
    } else {
      throw std::out_of_range("index_orders: unknown merchant '" + o.merchant_id + "'");
    }
    r.t = hour_of_week(o.payment_ts, opt);
    idx.refs.push_back(r);
  }
  return idx;
}

}  // namespace dgm
