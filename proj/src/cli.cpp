#include "satts/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "satts/adapt.hpp"
#include "satts/bench.hpp"
#include "satts/common.hpp"
#include "satts/io.hpp"
#include "satts/select.hpp"
#include "satts/srcstats.hpp"
#include "satts/surrogate.hpp"

namespace satts::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// ===== config + manifest plumbing ==========================================

json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream f(path);
  if (!f) fail_io("cannot open config file " + path);
  try {
    json j;
    f >> j;
    if (!j.is_object()) fail_format(path + ": config must be a JSON object");
    return j;
  } catch (const json::exception& e) {
    fail_format(path + ": " + e.what());
  }
}

// Flags win over the config file; the config file wins over defaults.
template <typename T>
void fill(const CLI::App* sub, const char* flag, const json& cfg, const char* key, T* value) {
  if (sub->get_option(flag)->count() > 0) return;
  if (!cfg.contains(key)) return;
  try {
    *value = cfg.at(key).get<T>();
  } catch (const json::exception& e) {
    fail_format(std::string("config key '") + key + "': " + e.what());
  }
}

std::string timestamp_utc() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void append_manifest(const std::string& dir, const std::string& command, const json& resolved,
                     const std::string& config_path, const std::vector<std::string>& inputs,
                     const std::vector<std::string>& outputs) {
  json entry;
  entry["command"] = command;
  entry["config_path"] = config_path;
  entry["resolved"] = resolved;
  json in = json::object();
  for (const std::string& p : inputs) in[p] = io::file_crc32_hex(p);
  entry["inputs"] = in;
  json out = json::object();
  for (const std::string& p : outputs) out[p] = io::file_crc32_hex(p);
  entry["outputs"] = out;
  entry["tool_version"] = kToolVersion;
  entry["timestamp"] = timestamp_utc();

  std::ofstream f(fs::path(dir) / "manifest.jsonl", std::ios::app);
  if (!f) fail_io("cannot append manifest in " + dir);
  f << entry.dump() << "\n";
}

std::vector<double> parse_grid(const std::string& text) {
  if (text == "default") return select::LineSearchConfig{}.grid;
  std::vector<double> grid;
  std::string token;
  for (size_t at = 0; at <= text.size(); ++at) {
    if (at < text.size() && text[at] != ',') {
      token += text[at];
      continue;
    }
    try {
      size_t used = 0;
      const double v = std::stod(token, &used);
      if (used != token.size()) throw std::invalid_argument(token);
      grid.push_back(v);
    } catch (const std::exception&) {
      fail_validation("bad learning-rate grid entry '" + token + "'");
    }
    token.clear();
  }
  if (grid.empty()) fail_validation("empty learning-rate grid");
  return grid;
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::string token;
  for (size_t at = 0; at <= text.size(); ++at) {
    if (at < text.size() && text[at] != ',') {
      token += text[at];
      continue;
    }
    try {
      out.push_back(std::stoi(token));
    } catch (const std::exception&) {
      fail_validation("bad integer list entry '" + token + "'");
    }
    token.clear();
  }
  return out;
}

std::vector<std::string> split_csv(const std::string& text) {
  std::vector<std::string> out;
  std::string token;
  for (size_t at = 0; at <= text.size(); ++at) {
    if (at < text.size() && text[at] != ',') {
      token += text[at];
      continue;
    }
    if (!token.empty()) out.push_back(token);
    token.clear();
  }
  return out;
}

void write_text_file(const std::string& path, const std::string& text) {
  io::write_file_bytes(path, std::vector<uint8_t>(text.begin(), text.end()));
}

std::vector<Matrix> batch_stream(const Matrix& x, int batch_size, uint64_t seed) {
  std::vector<int> perm(static_cast<size_t>(x.rows()));
  for (int i = 0; i < x.rows(); ++i) perm[static_cast<size_t>(i)] = i;
  Rng rng(seed);
  rng.shuffle(perm);
  std::vector<Matrix> stream;
  for (int at = 0; at + 2 <= x.rows(); at += batch_size) {
    const int n = std::min(batch_size, x.rows() - at);
    if (n < 2) break;
    Matrix b(n, x.cols());
    for (int i = 0; i < n; ++i) {
      const double* row = x.row(perm[static_cast<size_t>(at + i)]);
      std::copy(row, row + x.cols(), b.row(i));
    }
    stream.push_back(std::move(b));
  }
  return stream;
}

// ===== gen =================================================================

struct GenOpts {
  std::string config, task = "bump", out = "gen-out";
  int grid_size = 64, gap = 3, n_train = 512, n_val = 256, n_target = 256;
  double noise = 0.01;
  uint64_t seed = 0;
};

int cmd_gen(GenOpts o, const CLI::App* sub) {
  const json cfg = load_config_file(o.config);
  fill(sub, "--task", cfg, "task", &o.task);
  fill(sub, "--grid-size", cfg, "grid_size", &o.grid_size);
  fill(sub, "--gap", cfg, "gap", &o.gap);
  fill(sub, "--n-train", cfg, "n_train", &o.n_train);
  fill(sub, "--n-val", cfg, "n_val", &o.n_val);
  fill(sub, "--n-target", cfg, "n_target", &o.n_target);
  fill(sub, "--noise", cfg, "noise_frac", &o.noise);
  fill(sub, "--seed", cfg, "seed", &o.seed);
  fill(sub, "--out", cfg, "out", &o.out);

  bench::TaskConfig tc = bench::TaskConfig::preset(bench::task_from_name(o.task), o.gap);
  tc.grid_size = o.grid_size;
  tc.n_train = o.n_train;
  tc.n_val = o.n_val;
  tc.n_target = o.n_target;
  tc.noise_frac = o.noise;
  tc.seed = o.seed;
  if (cfg.contains("shift_src"))
    tc.shift_src = {cfg.at("shift_src").at("lo").get<double>(),
                    cfg.at("shift_src").at("hi").get<double>()};
  if (cfg.contains("shift_tgt"))
    tc.shift_tgt = {cfg.at("shift_tgt").at("lo").get<double>(),
                    cfg.at("shift_tgt").at("hi").get<double>()};
  tc.validate();

  const bench::TaskData data = bench::gen_task(tc);
  std::error_code ec;
  fs::create_directories(o.out, ec);
  if (ec) fail_io("cannot create output directory " + o.out);
  const std::string train = (fs::path(o.out) / "train.sttd").string();
  const std::string val = (fs::path(o.out) / "val.sttd").string();
  const std::string target = (fs::path(o.out) / "target.sttd").string();
  bench::save_dataset(data.train, tc, train);
  bench::save_dataset(data.val, tc, val);
  bench::save_dataset(data.target, tc, target);

  json resolved = tc.to_json();
  resolved["gap"] = o.gap;
  append_manifest(o.out, "gen", resolved, o.config, {}, {train, val, target});
  std::printf("wrote %s, %s, %s\n", train.c_str(), val.c_str(), target.c_str());
  return 0;
}

// ===== pretrain ============================================================

struct PretrainOpts {
  std::string config, data = "gen-out", out = "pretrain-out", resume, hidden = "32,32";
  int epochs = 300, batch_size = 64, patience = 30, latent = 8;
  double lr = 1e-3, weight_decay = 1e-4;
  uint64_t seed = 0;
};

int cmd_pretrain(PretrainOpts o, const CLI::App* sub) {
  const json cfg = load_config_file(o.config);
  fill(sub, "--data", cfg, "data", &o.data);
  fill(sub, "--out", cfg, "out", &o.out);
  fill(sub, "--resume", cfg, "resume", &o.resume);
  fill(sub, "--hidden", cfg, "hidden", &o.hidden);
  fill(sub, "--epochs", cfg, "epochs", &o.epochs);
  fill(sub, "--batch-size", cfg, "batch_size", &o.batch_size);
  fill(sub, "--patience", cfg, "patience", &o.patience);
  fill(sub, "--latent", cfg, "latent", &o.latent);
  fill(sub, "--lr", cfg, "lr", &o.lr);
  fill(sub, "--weight-decay", cfg, "weight_decay", &o.weight_decay);
  fill(sub, "--seed", cfg, "seed", &o.seed);

  const std::string train_path = (fs::path(o.data) / "train.sttd").string();
  const std::string val_path = (fs::path(o.data) / "val.sttd").string();
  const bench::LoadedDataset train = bench::load_dataset(train_path);
  const bench::LoadedDataset val = bench::load_dataset(val_path);
  const bench::Normalization& norm = train.data.norm;
  const Matrix xtr = bench::normalize_inputs(train.data.inputs, norm);
  const Matrix ytr = bench::normalize_targets(train.data.targets, norm);
  const Matrix xval = bench::normalize_inputs(val.data.inputs, norm);
  const Matrix yval = bench::normalize_targets(val.data.targets, norm);

  surrogate::SurrogateModel model = [&] {
    if (!o.resume.empty()) return surrogate::load_checkpoint(o.resume);
    surrogate::SurrogateSpec spec;
    spec.input_dim = xtr.cols();
    spec.latent_dim = o.latent;
    spec.output_dim = ytr.cols();
    spec.hidden = parse_int_list(o.hidden);
    spec.seed = derive_seed(o.seed, 11);
    spec.validate();
    return surrogate::SurrogateModel::build(spec);
  }();

  surrogate::TrainConfig tc;
  tc.lr = o.lr;
  tc.weight_decay = o.weight_decay;
  tc.epochs = o.epochs;
  tc.patience = std::min(o.patience, o.epochs);
  tc.batch_size = o.batch_size;
  tc.seed = derive_seed(o.seed, 12);
  const surrogate::PretrainResult res = surrogate::pretrain(model, xtr, ytr, xval, yval, tc);

  std::error_code ec;
  fs::create_directories(o.out, ec);
  if (ec) fail_io("cannot create output directory " + o.out);
  const std::string ckpt = (fs::path(o.out) / "checkpoint.sttc").string();
  const std::string hist = (fs::path(o.out) / "history.csv").string();
  surrogate::save_checkpoint(model, ckpt);
  std::string csv = "epoch,train_loss,val_loss,val_rmse,lr\n";
  char buf[160];
  for (const surrogate::EpochRecord& r : res.history) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.train_loss,
                  r.val_loss, r.val_rmse, r.lr);
    csv += buf;
  }
  write_text_file(hist, csv);

  json resolved = {{"data", o.data},           {"epochs", o.epochs},
                   {"batch_size", o.batch_size}, {"patience", tc.patience},
                   {"latent", o.latent},       {"hidden", o.hidden},
                   {"lr", o.lr},               {"weight_decay", o.weight_decay},
                   {"resume", o.resume},       {"seed", o.seed}};
  std::vector<std::string> inputs = {train_path, val_path};
  if (!o.resume.empty()) inputs.push_back(o.resume);
  append_manifest(o.out, "pretrain", resolved, o.config, inputs, {ckpt, hist});
  std::printf("pretrained %d epochs, best val loss %.6g, wrote %s\n", res.epochs_run,
              res.best_val_loss, ckpt.c_str());
  return 0;
}

// ===== stats ===============================================================

struct StatsOpts {
  std::string config, checkpoint, data, out = "artifact.stta";
  int m = 8;
  double tau = 0.95;
};

int cmd_stats(StatsOpts o, const CLI::App* sub) {
  const json cfg = load_config_file(o.config);
  fill(sub, "--checkpoint", cfg, "checkpoint", &o.checkpoint);
  fill(sub, "--data", cfg, "data", &o.data);
  fill(sub, "--out", cfg, "out", &o.out);
  fill(sub, "--m", cfg, "m", &o.m);
  fill(sub, "--tau", cfg, "tau", &o.tau);
  if (o.checkpoint.empty()) fail_validation("stats: --checkpoint is required");
  if (o.data.empty()) fail_validation("stats: --data is required");

  const surrogate::SurrogateModel model = surrogate::load_checkpoint(o.checkpoint);
  const bench::LoadedDataset ld = bench::load_dataset(o.data);
  const Matrix x = bench::normalize_inputs(ld.data.inputs, ld.data.norm);
  const Matrix y = bench::normalize_targets(ld.data.targets, ld.data.norm);
  const srcstats::SourceStatsArtifact artifact =
      srcstats::build_artifact(model, x, y, o.tau, o.m, io::file_crc32_hex(o.checkpoint));
  srcstats::save_artifact(artifact, o.out);

  const std::string dir = fs::path(o.out).has_parent_path()
                              ? fs::path(o.out).parent_path().string()
                              : std::string(".");
  append_manifest(dir, "stats",
                  {{"checkpoint", o.checkpoint}, {"data", o.data}, {"m", o.m}, {"tau", o.tau}},
                  o.config, {o.checkpoint, o.data}, {o.out});
  std::printf("wrote %s (r=%d, m=%d)\n", o.out.c_str(), artifact.stats.retained,
              artifact.subset.m());
  return 0;
}

// ===== adapt ===============================================================

struct AdaptOpts {
  std::string config, checkpoint, artifact, data, out = "adapt-out";
  std::string method = "satts", alpha_mode = "scaled", grid;
  double lr = -1.0, lambda = -1.0;
  int batch_size = 64;
  uint64_t seed = 0;
};

int cmd_adapt(AdaptOpts o, const CLI::App* sub) {
  const json cfg = load_config_file(o.config);
  fill(sub, "--checkpoint", cfg, "checkpoint", &o.checkpoint);
  fill(sub, "--artifact", cfg, "artifact", &o.artifact);
  fill(sub, "--data", cfg, "data", &o.data);
  fill(sub, "--out", cfg, "out", &o.out);
  fill(sub, "--method", cfg, "method", &o.method);
  fill(sub, "--alpha-mode", cfg, "alpha_mode", &o.alpha_mode);
  fill(sub, "--grid", cfg, "grid", &o.grid);
  fill(sub, "--lr", cfg, "lr", &o.lr);
  fill(sub, "--lambda", cfg, "lambda", &o.lambda);
  fill(sub, "--batch-size", cfg, "batch_size", &o.batch_size);
  fill(sub, "--seed", cfg, "seed", &o.seed);
  if (o.checkpoint.empty()) fail_validation("adapt: --checkpoint is required");
  if (o.data.empty()) fail_validation("adapt: --data is required");

  std::error_code ec;
  fs::create_directories(o.out, ec);
  if (ec) fail_io("cannot create output directory " + o.out);
  const std::string adapted = (fs::path(o.out) / "adapted.sttc").string();
  const json resolved = {{"checkpoint", o.checkpoint}, {"artifact", o.artifact},
                         {"data", o.data},             {"method", o.method},
                         {"alpha_mode", o.alpha_mode}, {"grid", o.grid},
                         {"lr", o.lr},                 {"lambda", o.lambda},
                         {"batch_size", o.batch_size}, {"seed", o.seed}};

  if (o.method == "none") {
    io::write_file_bytes(adapted, io::read_file_bytes(o.checkpoint));
    append_manifest(o.out, "adapt", resolved, o.config, {o.checkpoint, o.data}, {adapted});
    std::printf("method none: copied checkpoint to %s\n", adapted.c_str());
    return 0;
  }
  if (o.artifact.empty()) fail_validation("adapt: --artifact is required");

  surrogate::SurrogateModel model = surrogate::load_checkpoint(o.checkpoint);
  const srcstats::SourceStatsArtifact artifact = srcstats::load_artifact(o.artifact);
  if (!artifact.checkpoint_crc.empty() &&
      artifact.checkpoint_crc != io::file_crc32_hex(o.checkpoint))
    fail_validation("artifact was built from a different checkpoint (hash mismatch)");
  const bench::LoadedDataset ld = bench::load_dataset(o.data);
  const Matrix x = bench::normalize_inputs(ld.data.inputs, ld.data.norm);
  const std::vector<Matrix> stream = batch_stream(x, o.batch_size, derive_seed(o.seed, 21));

  adapt::AdaptationConfig ac;
  ac.alpha_mode = o.alpha_mode == "weighted" ? adapt::AlphaMode::WeightedKl
                                             : adapt::AlphaMode::ScaledFeatures;
  if (o.alpha_mode != "scaled" && o.alpha_mode != "weighted")
    fail_validation("alpha mode must be scaled or weighted");
  ac.lambda_src = o.lambda;
  ac.batch_size = o.batch_size;
  ac.seed = o.seed;

  const std::string trace_path = (fs::path(o.out) / "trace.csv").string();
  std::vector<std::string> outputs = {adapted, trace_path};

  if (o.method == "satts") {
    ac.method = adapt::Method::Satts;
    select::LineSearchConfig ls;
    if (!o.grid.empty())
      ls.grid = parse_grid(o.grid);
    else if (o.lr >= 0.0)
      ls.grid = {o.lr};
    std::vector<adapt::AdaptTrace> traces;
    const select::SelectionResult sel = select::lr_line_search(model, stream, artifact, ac, ls, &traces);
    const std::string sel_path = (fs::path(o.out) / "selection.txt").string();
    select::write_selection_report(sel, sel_path);
    outputs.push_back(sel_path);
    size_t trace_idx = 0;
    for (size_t j = 0; j < ls.grid.size(); ++j)
      if (!sel.fallback && ls.grid[j] == sel.lr) trace_idx = j;
    adapt::export_trace(traces[trace_idx], trace_path);
    std::printf("selected lr %g step %d (iwv %.6g%s)\n", sel.lr, sel.step, sel.iwv,
                sel.fallback ? ", fallback to source model" : "");
  } else if (o.method == "ssa" || o.method == "tent") {
    ac.method = o.method == "ssa" ? adapt::Method::Ssa : adapt::Method::Tent;
    ac.lr = o.lr >= 0.0 ? o.lr : 0.01;
    const adapt::AdaptTrace trace =
        adapt::run_adaptation(model, stream, artifact.stats, artifact.subset, ac);
    adapt::export_trace(trace, trace_path);
    std::printf("%s: %d steps at lr %g\n", o.method.c_str(), static_cast<int>(trace.records.size()),
                ac.lr);
  } else {
    fail_validation("method must be one of none, tent, ssa, satts");
  }

  surrogate::save_checkpoint(model, adapted);
  append_manifest(o.out, "adapt", resolved, o.config,
                  {o.checkpoint, o.artifact, o.data}, outputs);
  return 0;
}

// ===== eval ================================================================

struct EvalOpts {
  std::string config, checkpoint, data, out = "metrics.json";
};

int cmd_eval(EvalOpts o, const CLI::App* sub) {
  const json cfg = load_config_file(o.config);
  fill(sub, "--checkpoint", cfg, "checkpoint", &o.checkpoint);
  fill(sub, "--data", cfg, "data", &o.data);
  fill(sub, "--out", cfg, "out", &o.out);
  if (o.checkpoint.empty()) fail_validation("eval: --checkpoint is required");
  if (o.data.empty()) fail_validation("eval: --data is required");

  const surrogate::SurrogateModel model = surrogate::load_checkpoint(o.checkpoint);
  const bench::LoadedDataset ld = bench::load_dataset(o.data);
  if (ld.data.targets.rows() == 0 || ld.data.targets.cols() == 0)
    fail_validation("eval: dataset carries no labels");
  const Matrix x = bench::normalize_inputs(ld.data.inputs, ld.data.norm);
  const Matrix y = bench::normalize_targets(ld.data.targets, ld.data.norm);
  const Matrix pred = surrogate::forward(model, x).predictions;
  const bench::MetricSet m =
      bench::metrics(pred, y, bench::Normalization::identity(x.cols(), y.cols()));

  const json out = {{"rmse", m.rmse}, {"mae", m.mae}, {"r2", m.r2}};
  write_text_file(o.out, out.dump(2) + "\n");
  const std::string dir = fs::path(o.out).has_parent_path()
                              ? fs::path(o.out).parent_path().string()
                              : std::string(".");
  append_manifest(dir, "eval", {{"checkpoint", o.checkpoint}, {"data", o.data}}, o.config,
                  {o.checkpoint, o.data}, {o.out});
  std::printf("rmse %.6g mae %.6g r2 %.6g\n", m.rmse, m.mae, m.r2);
  return 0;
}

// ===== bench ===============================================================

struct BenchOpts {
  std::string config, task = "bump", methods = "source,tent,ssa,satts", out = "bench-out";
  int gap = 3, seeds = 20, grid_size = 64, epochs = 100, latent = 8;
  double fixed_lr = 0.01;
  uint64_t seed = 0;
  bool oracle_labels = false;
};

int cmd_bench(BenchOpts o, const CLI::App* sub) {
  const json cfg = load_config_file(o.config);
  fill(sub, "--task", cfg, "task", &o.task);
  fill(sub, "--methods", cfg, "methods", &o.methods);
  fill(sub, "--out", cfg, "out", &o.out);
  fill(sub, "--gap", cfg, "gap", &o.gap);
  fill(sub, "--seeds", cfg, "seeds", &o.seeds);
  fill(sub, "--grid-size", cfg, "grid_size", &o.grid_size);
  fill(sub, "--epochs", cfg, "epochs", &o.epochs);
  fill(sub, "--latent", cfg, "latent", &o.latent);
  fill(sub, "--lr", cfg, "fixed_lr", &o.fixed_lr);
  fill(sub, "--seed", cfg, "seed", &o.seed);

  bench::ExperimentConfig ec;
  ec.task = bench::TaskConfig::preset(bench::task_from_name(o.task), o.gap);
  ec.task.grid_size = o.grid_size;
  ec.task.seed = o.seed;
  ec.latent_dim = o.latent;
  ec.train.epochs = o.epochs;
  ec.train.patience = std::min(ec.train.patience, o.epochs);
  ec.methods = split_csv(o.methods);
  ec.seeds = o.seeds;
  ec.fixed_lr = o.fixed_lr;
  ec.seed = o.seed;

  const bool wants_oracle =
      std::find(ec.methods.begin(), ec.methods.end(), "oracle") != ec.methods.end();
  if (wants_oracle && !o.oracle_labels)
    fail_validation(
        "method 'oracle' selects with true target labels; pass --oracle-labels to allow it");

  const bench::ExperimentReport report = bench::run_experiment(ec);
  bench::emit_report(report, o.out);

  const std::string report_path = (fs::path(o.out) / "report.json").string();
  const std::string table_path = (fs::path(o.out) / "table.txt").string();
  const std::string plot_path = (fs::path(o.out) / "plot.svg").string();
  append_manifest(o.out, "bench", ec.to_json(), o.config, {},
                  {report_path, table_path, plot_path});
  std::printf("wrote %s\n", report_path.c_str());
  return 0;
}

}  // namespace

// ===== entry point =========================================================

int run(const std::vector<std::string>& args) {
  CLI::App app{"stable test-time adaptation for regression surrogates"};
  app.require_subcommand(1);

  GenOpts gen;
  CLI::App* sub_gen = app.add_subcommand("gen", "generate a shifted-regression dataset");
  sub_gen->add_option("--config", gen.config, "JSON config file (flags override)");
  sub_gen->add_option("--task", gen.task, "bump or heat-1d");
  sub_gen->add_option("--grid-size", gen.grid_size, "field nodes K");
  sub_gen->add_option("--gap", gen.gap, "shift gap level 0..3 (0 = no shift)");
  sub_gen->add_option("--n-train", gen.n_train);
  sub_gen->add_option("--n-val", gen.n_val);
  sub_gen->add_option("--n-target", gen.n_target);
  sub_gen->add_option("--noise", gen.noise, "noise sigma as fraction of field peak");
  sub_gen->add_option("--seed", gen.seed);
  sub_gen->add_option("--out", gen.out, "output directory");

  PretrainOpts pre;
  CLI::App* sub_pre = app.add_subcommand("pretrain", "train the source surrogate");
  sub_pre->add_option("--config", pre.config);
  sub_pre->add_option("--data", pre.data, "directory with train.sttd / val.sttd");
  sub_pre->add_option("--out", pre.out, "output directory");
  sub_pre->add_option("--resume", pre.resume, "continue from this checkpoint");
  sub_pre->add_option("--hidden", pre.hidden, "comma-separated hidden widths");
  sub_pre->add_option("--epochs", pre.epochs);
  sub_pre->add_option("--batch-size", pre.batch_size);
  sub_pre->add_option("--patience", pre.patience);
  sub_pre->add_option("--latent", pre.latent, "latent channels C");
  sub_pre->add_option("--lr", pre.lr);
  sub_pre->add_option("--weight-decay", pre.weight_decay);
  sub_pre->add_option("--seed", pre.seed);

  StatsOpts stats;
  CLI::App* sub_stats = app.add_subcommand("stats", "build the source statistics artifact");
  sub_stats->add_option("--config", stats.config);
  sub_stats->add_option("--checkpoint", stats.checkpoint);
  sub_stats->add_option("--data", stats.data, "source validation dataset file");
  sub_stats->add_option("--out", stats.out, "artifact file");
  sub_stats->add_option("--m", stats.m, "labeled subset size");
  sub_stats->add_option("--tau", stats.tau, "retained-variance fraction");

  AdaptOpts ad;
  CLI::App* sub_adapt = app.add_subcommand("adapt", "adapt a checkpoint on unlabeled targets");
  sub_adapt->add_option("--config", ad.config);
  sub_adapt->add_option("--checkpoint", ad.checkpoint);
  sub_adapt->add_option("--artifact", ad.artifact, "source statistics artifact");
  sub_adapt->add_option("--data", ad.data, "target dataset file");
  sub_adapt->add_option("--out", ad.out, "output directory");
  sub_adapt->add_option("--method", ad.method, "none, tent, ssa, or satts");
  sub_adapt->add_option("--alpha-mode", ad.alpha_mode, "scaled or weighted");
  sub_adapt->add_option("--grid", ad.grid, "lr grid: 'default' or comma-separated values");
  sub_adapt->add_option("--lr", ad.lr, "single learning rate");
  sub_adapt->add_option("--lambda", ad.lambda, "source-risk weight (<0 = default m/batch)");
  sub_adapt->add_option("--batch-size", ad.batch_size);
  sub_adapt->add_option("--seed", ad.seed);

  EvalOpts ev;
  CLI::App* sub_eval = app.add_subcommand("eval", "evaluate a checkpoint on labeled data");
  sub_eval->add_option("--config", ev.config);
  sub_eval->add_option("--checkpoint", ev.checkpoint);
  sub_eval->add_option("--data", ev.data, "labeled dataset file");
  sub_eval->add_option("--out", ev.out, "metrics file");

  BenchOpts be;
  CLI::App* sub_bench = app.add_subcommand("bench", "run the full method comparison");
  sub_bench->add_option("--config", be.config);
  sub_bench->add_option("--task", be.task, "bump or heat-1d");
  sub_bench->add_option("--methods", be.methods, "comma-separated method list");
  sub_bench->add_option("--out", be.out, "output directory");
  sub_bench->add_option("--gap", be.gap, "shift gap level 0..3");
  sub_bench->add_option("--seeds", be.seeds, "adaptation runs per method");
  sub_bench->add_option("--grid-size", be.grid_size);
  sub_bench->add_option("--epochs", be.epochs);
  sub_bench->add_option("--latent", be.latent);
  sub_bench->add_option("--lr", be.fixed_lr, "fixed lr for ssa/tent arms");
  sub_bench->add_option("--seed", be.seed);
  sub_bench->add_flag("--oracle-labels", be.oracle_labels,
                      "acknowledge that the oracle method reads target labels");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (app.got_subcommand(sub_gen)) return cmd_gen(gen, sub_gen);
    if (app.got_subcommand(sub_pre)) return cmd_pretrain(pre, sub_pre);
    if (app.got_subcommand(sub_stats)) return cmd_stats(stats, sub_stats);
    if (app.got_subcommand(sub_adapt)) return cmd_adapt(ad, sub_adapt);
    if (app.got_subcommand(sub_eval)) return cmd_eval(ev, sub_eval);
    if (app.got_subcommand(sub_bench)) return cmd_bench(be, sub_bench);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 70;
  }
  return 2;
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace satts::cli
