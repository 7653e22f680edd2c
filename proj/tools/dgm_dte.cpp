// Command-line entry points: gen-data, train, eval, ablate, sweep.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dgm_dte/data.hpp"
#include "dgm_dte/log.hpp"
#include "dgm_dte/pipeline.hpp"

namespace fs = std::filesystem;
using namespace dgm;

namespace {

struct CommonFlags {
  std::string config;
  std::string data;
  std::string out;
  std::optional<std::string> variant;
  std::optional<std::size_t> epochs;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr;
  std::optional<std::size_t> batch_size;
  std::optional<std::size_t> d_o;
  std::optional<double> t_c;
  bool quiet = false;
};

void add_model_flags(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "JSON run configuration");
  cmd->add_option("--variant", f.variant, "full | ht-reg | im-reg | order-rep | re-weight");
  cmd->add_option("--epochs", f.epochs, "training epochs");
  cmd->add_option("--lr", f.lr, "Adam learning rate");
  cmd->add_option("--batch-size", f.batch_size, "minibatch size");
  cmd->add_option("--d-o", f.d_o, "order embedding size");
  cmd->add_option("--t-c", f.t_c, "head/tail threshold, hours");
  cmd->add_flag("--quiet", f.quiet, "suppress warnings");
}

RunConfig merged_config(const CommonFlags& f) {
  RunConfig cfg = f.config.empty() ? RunConfig{} : load_run_config(f.config);
  if (f.variant) apply_variant(cfg.model, *f.variant);
  if (f.epochs) cfg.model.epochs = *f.epochs;
  if (f.seed) cfg.model.seed = *f.seed;
  if (f.lr) cfg.model.lr = *f.lr;
  if (f.batch_size) cfg.model.batch_size = *f.batch_size;
  if (f.d_o) cfg.model.d_o = *f.d_o;
  if (f.t_c) cfg.model.t_c = *f.t_c;
  cfg.validate();
  return cfg;
}

std::vector<Order> load_orders(const std::string& path) {
  if (path.empty()) throw std::invalid_argument("--data is required");
  auto loaded = load_csv(path);
  for (const auto& r : loaded.rejected)
    log::warn("data line " + std::to_string(r.line) + " rejected: " + r.reason);
  return std::move(loaded.orders);
}

fs::path sibling(const fs::path& p, const std::string& suffix) { return fs::path(p.string() + suffix); }

double tail_fraction(std::span<const Order> orders, double threshold) {
  if (orders.empty()) return 0.0;
  std::size_t n = 0;
  for (const auto& o : orders) n += o.delivery_hours > threshold ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(orders.size());
}

std::string epoch_line(const EpochLog& e) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "epoch %3zu  loss %.4f  val MAE %.3f  MAPE %.2f%%  EW %.3f", e.epoch, e.train_loss,
                e.val_mae, 100.0 * e.val_mape, e.val_ew);
  return buf;
}

int cmd_gen_data(const CommonFlags& f, std::optional<std::size_t> n_orders, std::optional<double> tail_weight) {
  RunConfig cfg = f.config.empty() ? RunConfig{} : load_run_config(f.config);
  if (f.seed) cfg.generator.seed = *f.seed;
  if (n_orders) cfg.generator.n_orders = *n_orders;
  if (tail_weight) cfg.generator.tail_weight = *tail_weight;
  cfg.generator.validate();
  if (f.out.empty()) throw std::invalid_argument("--out is required");
  const auto orders = generate(cfg.generator);
  write_csv(f.out, orders);
  write_text(sibling(f.out, ".config.json"), dump_json(nlohmann::json(cfg)));
  std::printf("wrote %zu orders to %s\n", orders.size(), f.out.c_str());
  std::printf("tail fraction (> %g h): %.4f\n", cfg.model.t_c, tail_fraction(orders, cfg.model.t_c));
  return 0;
}

int cmd_train(const CommonFlags& f, std::string log_path) {
  const RunConfig cfg = merged_config(f);
  if (f.out.empty()) throw std::invalid_argument("--out is required");
  const auto orders = load_orders(f.data);
  const auto exp = prepare_experiment(orders, cfg);
  std::printf("train %zu / val %zu / test %zu orders; spatial %zu nodes, merchant %zu nodes\n",
              exp.split.train.size(), exp.split.val.size(), exp.split.test.size(),
              exp.ctx.graphs.spatial.num_nodes(), exp.ctx.graphs.merchant.num_nodes());
  auto run = train_model(exp, cfg.model, [&](const EpochLog& e) {
    if (!f.quiet) std::printf("%s\n", epoch_line(e).c_str());
    std::fflush(stdout);
  });
  if (log_path.empty()) log_path = sibling(f.out, ".log.csv").string();
  save_model(run.model, cfg, f.out);
  write_text(log_path, epoch_log_csv(run.result.log));
  write_text(sibling(f.out, ".config.json"), dump_json(nlohmann::json(cfg)));
  std::printf("best epoch %zu, validation MAE %.4f\n", run.result.best_epoch, run.result.best_val_mae);
  std::printf("checkpoint %s, log %s\n", f.out.c_str(), log_path.c_str());
  return 0;
}

int cmd_eval(const CommonFlags& f, const std::string& checkpoint, bool balanced) {
  if (checkpoint.empty()) throw std::invalid_argument("--checkpoint is required");
  const auto ckpt = read_checkpoint(checkpoint);
  RunConfig cfg;
  if (!f.config.empty()) {
    cfg = load_run_config(f.config);
  } else if (ckpt.config_json) {
    from_json(nlohmann::json::parse(*ckpt.config_json), cfg);
  }
  cfg.validate();
  const auto orders = load_orders(f.data);
  const auto exp = prepare_experiment(orders, cfg);
  const auto model = load_model(ckpt, cfg, exp);
  std::optional<std::uint64_t> balanced_seed;
  if (balanced) balanced_seed = f.seed.value_or(0);
  const auto report = evaluate_test(model, exp, cfg.shots, balanced_seed);

  nlohmann::json j;
  j["checkpoint"] = fs::path(checkpoint).filename().string();
  j["split"] = "test";
  j["balanced"] = balanced;
  if (balanced) j["balanced_seed"] = *balanced_seed;
  j["report"] = to_json(report);
  const std::vector<EvalReport> one{report};
  const std::string table = format_table(one);
  const fs::path prefix = f.out.empty() ? sibling(checkpoint, balanced ? ".balanced" : ".eval") : fs::path(f.out);
  write_text(sibling(prefix, ".json"), dump_json(j));
  write_text(sibling(prefix, ".txt"), table);
  write_text(sibling(prefix, ".config.json"), dump_json(nlohmann::json(cfg)));
  std::printf("%s", table.c_str());
  return 0;
}

std::vector<std::uint64_t> parse_seeds(const std::vector<std::uint64_t>& seeds, const RunConfig& cfg) {
  if (!seeds.empty()) return seeds;
  return {cfg.model.seed};
}

int cmd_ablate(const CommonFlags& f, const std::vector<std::uint64_t>& seed_flag) {
  const RunConfig base = merged_config(f);
  if (f.out.empty()) throw std::invalid_argument("--out is required");
  const auto seeds = parse_seeds(seed_flag, base);
  const auto orders = load_orders(f.data);
  const auto exp = prepare_experiment(orders, base);
  const fs::path dir = f.out;
  fs::create_directories(dir);

  std::vector<AblationRow> rows;
  for (auto variant : kVariants) {
    AblationRow row;
    row.variant = std::string(variant);
    try {
      for (auto seed : seeds) {
        RunConfig cfg = base;
        apply_variant(cfg.model, variant);
        cfg.model.seed = seed;
        const std::string tag = row.variant + ".seed" + std::to_string(seed);
        write_text(dir / (tag + ".config.json"), dump_json(nlohmann::json(cfg)));
        auto run = train_model(exp, cfg.model);
        write_text(dir / (tag + ".log.csv"), epoch_log_csv(run.result.log));
        row.runs.push_back(evaluate_test(run.model, exp, cfg.shots));
        if (!f.quiet) {
          std::printf("%-10s seed %-4llu test MAE %.3f\n", row.variant.c_str(), static_cast<unsigned long long>(seed),
                      row.runs.back().overall.mae);
          std::fflush(stdout);
        }
      }
      row.median = median_report(row.runs, row.variant);
    } catch (const std::exception& e) {
      row.failed = true;
      row.error = e.what();
      row.runs.clear();
    }
    rows.push_back(std::move(row));
  }
  const std::string table = format_ablation_table(rows);
  write_text(dir / "ablation.txt", table);
  write_text(dir / "ablation.json", dump_json(ablation_json(rows, seeds)));
  std::printf("%s", table.c_str());
  for (const auto& row : rows)
    if (row.failed) throw std::runtime_error("variant " + row.variant + " failed: " + row.error);
  return 0;
}

int cmd_sweep(const CommonFlags& f, const std::string& what, std::vector<double> values) {
  const RunConfig base = merged_config(f);
  if (f.out.empty()) throw std::invalid_argument("--out is required");
  if (what != "d_O" && what != "t_c") throw std::invalid_argument("--sweep must be d_O or t_c");
  if (values.empty()) throw std::invalid_argument("--values needs at least one value");
  if (auto dropped = dedupe_values(values); dropped > 0)
    log::warn("dropped " + std::to_string(dropped) + " repeated sweep value(s)");
  const auto orders = load_orders(f.data);
  const auto exp = prepare_experiment(orders, base);
  const fs::path dir = f.out;
  fs::create_directories(dir);

  nlohmann::json rows = nlohmann::json::array();
  std::string table = what + "        val_MAE  best_epoch\n";
  for (double v : values) {
    RunConfig cfg = base;
    if (what == "d_O") {
      if (v < 1 || v != std::floor(v)) throw std::invalid_argument("d_O values must be positive integers");
      cfg.model.d_o = static_cast<std::size_t>(v);
    } else {
      cfg.model.t_c = v;
    }
    cfg.validate();
    std::ostringstream tag;
    tag << what << "_" << v;
    write_text(dir / (tag.str() + ".config.json"), dump_json(nlohmann::json(cfg)));
    auto run = train_model(exp, cfg.model);
    write_text(dir / (tag.str() + ".log.csv"), epoch_log_csv(run.result.log));
    rows.push_back({{"value", v}, {"val_mae", run.result.best_val_mae}, {"best_epoch", run.result.best_epoch}});
    char line[128];
    std::snprintf(line, sizeof line, "%-10g %9.4f  %zu\n", v, run.result.best_val_mae, run.result.best_epoch);
    table += line;
    if (!f.quiet) {
      std::printf("%s", line);
      std::fflush(stdout);
    }
  }
  write_text(dir / "sweep.json", dump_json({{"parameter", what}, {"rows", rows}}));
  write_text(dir / "sweep.txt", table);
  std::printf("%s", table.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-graph multitask delivery-time estimation"};
  app.require_subcommand(1);
  CommonFlags f;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic order CSV");
  std::optional<std::size_t> n_orders;
  std::optional<double> tail_weight;
  gen->add_option("--config", f.config, "JSON run configuration (generator section)");
  gen->add_option("--seed", f.seed, "generator seed");
  gen->add_option("--n-orders", n_orders, "number of orders");
  gen->add_option("--tail-weight", tail_weight, "probability of a heavy-tail draw");
  gen->add_option("--out", f.out, "output CSV")->required();

  auto* tr = app.add_subcommand("train", "train a model and write a checkpoint");
  std::string log_path;
  add_model_flags(tr, f);
  tr->add_option("--data", f.data, "orders CSV")->required();
  tr->add_option("--out", f.out, "checkpoint path")->required();
  tr->add_option("--seed", f.seed, "model seed");
  tr->add_option("--log", log_path, "epoch log CSV (default <out>.log.csv)");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  std::string checkpoint;
  bool balanced = false;
  ev->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
  ev->add_option("--data", f.data, "orders CSV")->required();
  ev->add_option("--config", f.config, "JSON run configuration (default: the checkpoint's)");
  ev->add_flag("--balanced", balanced, "resample the test split to equal counts per label bin");
  ev->add_option("--seed", f.seed, "resampling seed");
  ev->add_option("--out", f.out, "report prefix (writes <prefix>.json and <prefix>.txt)");
  ev->add_flag("--quiet", f.quiet, "suppress warnings");

  auto* ab = app.add_subcommand("ablate", "train and evaluate all five variants");
  std::vector<std::uint64_t> seeds;
  add_model_flags(ab, f);
  ab->add_option("--data", f.data, "orders CSV")->required();
  ab->add_option("--out", f.out, "output directory")->required();
  ab->add_option("--seeds", seeds, "model seeds")->delimiter(',');

  auto* sw = app.add_subcommand("sweep", "validation MAE over values of d_O or t_c");
  std::string sweep_what;
  std::vector<double> sweep_values;
  add_model_flags(sw, f);
  sw->add_option("--data", f.data, "orders CSV")->required();
  sw->add_option("--out", f.out, "output directory")->required();
  sw->add_option("--seed", f.seed, "model seed");
  sw->add_option("--sweep", sweep_what, "d_O or t_c")->required();
  sw->add_option("--values", sweep_values, "comma-separated values")->delimiter(',')->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }

  if (f.quiet) log::set_level(log::Level::quiet);
  try {
    if (gen->parsed()) return cmd_gen_data(f, n_orders, tail_weight);
    if (tr->parsed()) return cmd_train(f, log_path);
    if (ev->parsed()) return cmd_eval(f, checkpoint, balanced);
    if (ab->parsed()) return cmd_ablate(f, seeds);
    if (sw->parsed()) return cmd_sweep(f, sweep_what, sweep_values);
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (auto& c : msg)
      if (c == '\n') c = ' ';
    std::fprintf(stderr, "error: %s\n", msg.c_str());
    return 1;
  }
  return 1;
}
