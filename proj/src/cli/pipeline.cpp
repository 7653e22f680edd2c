#include "dgm_dte/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "dgm_dte/log.hpp"

namespace dgm {

namespace {

template <class T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace

void to_json(nlohmann::json& j, const GraphOptions& o) {
  j = nlohmann::json{{"knn_k", o.knn_k},
                     {"merchant_tau", o.merchant_tau},
                     {"merchant_bin_hours", o.merchant_bin_hours},
                     {"merchant_range_hours", o.merchant_range_hours},
                     {"region_grid", o.region_grid},
                     {"box_km", o.box_km},
                     {"temporal_harmonics", o.temporal_harmonics},
                     {"tz_offset_s", o.tz_offset_s},
                     {"week_anchor_ts", o.week_anchor_ts},
                     {"label_scale_hours", o.label_scale_hours}};
}

void from_json(const nlohmann::json& j, GraphOptions& o) {
  read_opt(j, "knn_k", o.knn_k);
  read_opt(j, "merchant_tau", o.merchant_tau);
  read_opt(j, "merchant_bin_hours", o.merchant_bin_hours);
  read_opt(j, "merchant_range_hours", o.merchant_range_hours);
  read_opt(j, "region_grid", o.region_grid);
  read_opt(j, "box_km", o.box_km);
  read_opt(j, "temporal_harmonics", o.temporal_harmonics);
  read_opt(j, "tz_offset_s", o.tz_offset_s);
  read_opt(j, "week_anchor_ts", o.week_anchor_ts);
  read_opt(j, "label_scale_hours", o.label_scale_hours);
}

void RunConfig::validate() const {
  model.validate();
  generator.validate();
  split.validate();
  shots.validate();
  if (graphs.knn_k == 0) throw std::invalid_argument("config: knn_k must be positive");
  if (!(graphs.merchant_tau > 0.0 && graphs.merchant_tau < 1.0))
    throw std::invalid_argument("config: merchant_tau must lie in (0, 1)");
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{{"model", c.model},
                     {"generator", c.generator},
                     {"split", c.split},
                     {"shots", c.shots},
                     {"graphs", c.graphs}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  static const char* const kSections[] = {"model", "generator", "split", "shots", "graphs"};
  for (const auto& [key, _] : j.items()) {
    if (std::find_if(std::begin(kSections), std::end(kSections), [&](const char* s) { return key == s; }) ==
        std::end(kSections))
      throw std::invalid_argument("config: unknown section '" + key + "'");
  }
  const nlohmann::json defaults = RunConfig{};
  for (const auto& [section, body] : j.items()) {
    if (!body.is_object()) throw std::invalid_argument("config: section '" + section + "' must be an object");
    for (const auto& [key, _] : body.items())
      if (!defaults.at(section).contains(key))
        throw std::invalid_argument("config: unknown key '" + section + "." + key + "'");
  }
  if (j.contains("model")) from_json(j.at("model"), c.model);
  if (j.contains("generator")) from_json(j.at("generator"), c.generator);
  if (j.contains("split")) from_json(j.at("split"), c.split);
  if (j.contains("shots")) from_json(j.at("shots"), c.shots);
  if (j.contains("graphs")) from_json(j.at("graphs"), c.graphs);
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("config " + path.string() + ": " + e.what());
  }
  RunConfig c;
  from_json(j, c);
  return c;
}

std::string dump_json(const nlohmann::json& j) { return j.dump(2) + "\n"; }

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

Experiment prepare_experiment(std::span<const Order> orders, const RunConfig& cfg) {
  Experiment exp;
  exp.split = split_temporal(orders, cfg.split);
  if (exp.split.train.empty()) throw std::runtime_error("training split is empty");
  if (exp.split.val.empty()) throw std::runtime_error("validation split is empty");
  if (exp.split.test.empty()) throw std::runtime_error("test split is empty");
  GraphOptions gopt = cfg.graphs;
  gopt.tz_offset_s = cfg.split.tz_offset_s;
  exp.ctx = make_graph_context(build_graphs(exp.split.train, gopt));
  exp.train_index = index_orders(exp.split.train, exp.ctx.graphs, gopt);
  exp.val_index = index_orders(exp.split.val, exp.ctx.graphs, gopt);
  exp.test_index = index_orders(exp.split.test, exp.ctx.graphs, gopt);
  exp.train_labels = labels_of(exp.split.train);
  exp.val_labels = labels_of(exp.split.val);
  exp.test_labels = labels_of(exp.split.test);
  exp.test_shots = shot_labels(exp.train_labels, exp.test_labels, cfg.shots);
  return exp;
}

std::optional<LabelDensity> fit_tail_density(const DgmConfig& cfg, std::span<const double> train_labels) {
  if (!cfg.reweight_on || cfg.layout == BranchLayout::head_only) return std::nullopt;
  std::vector<double> sample;
  if (cfg.layout == BranchLayout::routed) {
    for (double y : train_labels)
      if (y > cfg.t_c) sample.push_back(y);
  } else {
    sample.assign(train_labels.begin(), train_labels.end());
  }
  if (sample.empty()) {
    log::warn("no training label above t_c; tail re-weighting skipped");
    return std::nullopt;
  }
  const double bw = cfg.kde_bandwidth > 0.0 ? cfg.kde_bandwidth : silverman_bandwidth(sample);
  return estimate_density(sample, bw);
}

double mean_label(std::span<const double> labels) {
  if (labels.empty()) throw std::invalid_argument("mean_label: empty input");
  return std::accumulate(labels.begin(), labels.end(), 0.0) / static_cast<double>(labels.size());
}

TrainedRun train_model(const Experiment& exp, const DgmConfig& cfg,
                       const std::function<void(const EpochLog&)>& on_epoch) {
  DgmModel model(cfg, feature_dims(exp.ctx.graphs), mean_label(exp.train_labels));
  const auto density = fit_tail_density(cfg, exp.train_labels);
  TrainingSet data;
  data.ctx = &exp.ctx;
  data.train_refs = exp.train_index.refs;
  data.train_labels = exp.train_labels;
  data.val_refs = exp.val_index.refs;
  data.val_labels = exp.val_labels;
  data.density = density ? &*density : nullptr;
  auto result = train(model, data, on_epoch);
  return TrainedRun{std::move(model), std::move(result)};
}

EvalReport evaluate_test(const DgmModel& model, const Experiment& exp, const ShotSpec& shots,
                         std::optional<std::uint64_t> balanced_seed) {
  if (!balanced_seed) {
    const auto pred = predict(model, exp.ctx, exp.test_index.refs);
    return make_report(exp.test_labels, pred, exp.test_shots, model.config().variant);
  }
  const auto idx = balanced_indices(exp.test_labels, *balanced_seed, shots.bin_hours);
  std::vector<OrderRef> refs;
  std::vector<double> y;
  std::vector<Shot> s;
  for (auto i : idx) {
    refs.push_back(exp.test_index.refs[i]);
    y.push_back(exp.test_labels[i]);
    s.push_back(exp.test_shots[i]);
  }
  const auto pred = predict(model, exp.ctx, refs);
  return make_report(y, pred, s, model.config().variant);
}

std::string model_checkpoint_json(const DgmModel& model, const RunConfig& cfg) {
  RunConfig effective = cfg;
  effective.model = model.config();
  return checkpoint_json(model.params(), nlohmann::json(effective).dump());
}

void save_model(const DgmModel& model, const RunConfig& cfg, const std::filesystem::path& path) {
  write_text(path, model_checkpoint_json(model, cfg));
}

DgmModel load_model(const CheckpointData& ckpt, const RunConfig& cfg, const Experiment& exp) {
  // The output scale is a stored buffer; any positive placeholder is overwritten.
  DgmModel model(cfg.model, feature_dims(exp.ctx.graphs), 1.0);
  load_params(model.params(), ckpt);
  return model;
}

double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median: empty input");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

EvalReport median_report(std::span<const EvalReport> runs, const std::string& variant) {
  if (runs.empty()) throw std::invalid_argument("median_report: no runs");
  EvalReport r;
  r.variant = variant;
  r.n_orders = runs.front().n_orders;
  std::vector<double> a, b, c;
  for (const auto& run : runs) {
    a.push_back(run.overall.mae);
    b.push_back(run.overall.mape);
    c.push_back(run.overall.ew);
  }
  r.overall = MetricSet{median(a), median(b), median(c)};
  for (Shot s : {Shot::high, Shot::medium, Shot::low}) {
    std::vector<double> v;
    std::size_t n = 0;
    for (const auto& run : runs) {
      auto it = run.per_shot.find(s);
      if (it == run.per_shot.end()) continue;
      v.push_back(it->second.mae);
      n = it->second.n;
    }
    if (!v.empty()) r.per_shot[s] = ShotMetrics{median(v), n};
  }
  return r;
}

std::string format_ablation_table(std::span<const AblationRow> rows) {
  std::vector<EvalReport> ok;
  std::string failed;
  for (const auto& row : rows) {
    if (row.failed) {
      failed += row.variant + ": failed (" + row.error + ")\n";
    } else {
      ok.push_back(row.median);
    }
  }
  std::string out = format_table(ok);
  for (const auto& row : rows) {
    if (!row.failed) continue;
    char line[256];
    std::snprintf(line, sizeof line, "%-12s %s\n", row.variant.c_str(), "FAILED");
    out += line;
  }
  return out + failed;
}

nlohmann::json ablation_json(std::span<const AblationRow> rows, std::span<const std::uint64_t> seeds) {
  nlohmann::json j;
  j["seeds"] = std::vector<std::uint64_t>(seeds.begin(), seeds.end());
  nlohmann::json variants = nlohmann::json::array();
  for (const auto& row : rows) {
    nlohmann::json v;
    v["variant"] = row.variant;
    v["failed"] = row.failed;
    if (row.failed) {
      v["error"] = row.error;
    } else {
      v["median"] = to_json(row.median);
      nlohmann::json runs = nlohmann::json::array();
      for (const auto& r : row.runs) runs.push_back(to_json(r));
      v["runs"] = runs;
    }
    variants.push_back(v);
  }
  j["variants"] = variants;
  return j;
}

std::size_t dedupe_values(std::vector<double>& values) {
  std::vector<double> out;
  for (double v : values)
    if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
  const std::size_t dropped = values.size() - out.size();
  values = std::move(out);
  return dropped;
}

}  // namespace dgm
