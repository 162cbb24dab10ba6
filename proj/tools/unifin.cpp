// unifin: operator CLI for data generation, staged training, evaluation,
// forecasting, RL sweeps and bulletins.
//
// Exit codes: 0 ok, 1 check failed (grad-check), 2 config, 3 io,
// 4 numerical divergence, 5 schema.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "unifin/training.hpp"

namespace fs = std::filesystem;
using namespace unifin;
using namespace unifin::training;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0, kExitCheck = 1, kExitConfig = 2, kExitIo = 3, kExitDivergence = 4, kExitSchema = 5;

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out;
  std::string data;
};

void add_common(CLI::App* cmd, Common& c, bool with_config = true) {
  if (with_config) {
    cmd->add_option("-c,--config", c.config_path, "Config file (key = value lines)");
    cmd->add_option("-s,--set", c.overrides, "Override one key, e.g. --set train.epochs=10");
  }
  cmd->add_option("-o,--out", c.out, "Output directory (overrides output.dir and UNIFIN_OUTPUT_DIR)");
}

/// Output directory precedence: --out, then UNIFIN_OUTPUT_DIR, then output.dir.
void resolve_output(RunConfig& cfg, const Common& c) {
  if (const char* env = std::getenv("UNIFIN_OUTPUT_DIR"); env && *env) cfg.output_dir = env;
  if (!c.out.empty()) cfg.output_dir = c.out;
}

RunConfig load_config(const Common& c) {
  RunConfig cfg;
  if (!c.config_path.empty()) {
    std::ifstream in(c.config_path);
    if (!in) throw IoError("cannot read config " + c.config_path);
    cfg = parse_config(in);
  }
  for (const auto& o : c.overrides) apply_override(cfg, o);
  resolve_output(cfg, c);
  cfg.validate();
  return cfg;
}

/// Commands that start from a checkpoint may only change evaluation and output keys.
void apply_checkpoint_overrides(RunConfig& cfg, const Common& c) {
  for (const auto& o : c.overrides) {
    const auto key = detail::trim(o.substr(0, o.find('=')));
    if (key.rfind("eval.", 0) != 0 && key != "output.dir" && key != "rl.beta_sweep")
      throw ConfigError(key + " cannot be overridden for a trained checkpoint (only eval.*, output.dir and rl.beta_sweep)");
    apply_override(cfg, o);
  }
  resolve_output(cfg, c);
  cfg.validate();
}

fs::path make_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create " + p.string() + ": " + ec.message());
  return p;
}

void echo_into(const fs::path& dir, const RunConfig& cfg) { write_file_atomic(make_dir(dir) / "config.txt", echo_config(cfg)); }

fs::path data_dir(const Common& c, const RunConfig& cfg) { return c.data.empty() ? fs::path(cfg.output_dir) / "data" : fs::path(c.data); }

std::size_t find_date(const datapipe::AlignedDataset& ds, const std::string& date) {
  for (std::size_t t = 0; t < ds.steps(); ++t)
    if (ds.dates[t].date == date) return t;
  throw ConfigError("date " + date + " is not in the dataset (" + (ds.steps() ? ds.dates.front().date + " .. " + ds.dates.back().date : "empty") + ")");
}

/// A seed directory, or a run directory holding seed-<n> subdirectories.
std::vector<fs::path> seed_dirs(const fs::path& dir) {
  if (fs::exists(dir / "checkpoint.json")) return {dir};
  if (!fs::is_directory(dir)) throw IoError("no checkpoint at " + dir.string());
  std::vector<std::pair<std::uint64_t, fs::path>> found;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (e.is_directory() && name.rfind("seed-", 0) == 0 && fs::exists(e.path() / "checkpoint.json"))
      found.emplace_back(std::stoull(name.substr(5)), e.path());
  }
  if (found.empty()) throw IoError("no checkpoints under " + dir.string());
  std::sort(found.begin(), found.end());
  std::vector<fs::path> out;
  for (auto& [s, p] : found) out.push_back(p);
  return out;
}

std::string modality_label(const ModelConfig& m) {
  std::vector<std::string> on;
  for (std::size_t i = 0; i < kModalityCount; ++i)
    if (m.modalities[i]) on.push_back(to_string(static_cast<Modality>(i)));
  if (on.size() == kModalityCount) return "full";
  if (on.size() == 1) return on[0] + "-only";
  return detail::join(on);
}

Split split_from_string(const std::string& s) {
  for (Split v : {Split::train, Split::test, Split::all})
    if (s == to_string(v)) return v;
  throw ConfigError("--split must be train, test or all, got " + s);
}

json stage_report(const std::vector<EpochLog>& history, std::uint64_t seed) {
  json stages = json::object();
  for (std::size_t s = 0; s < kStageCount; ++s) stages[to_string(static_cast<Stage>(s))] = json::array();
  for (const auto& e : history) stages[to_string(e.stage)].push_back(to_json(e));
  return {{"seed", seed}, {"stages", stages}};
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

int cmd_generate(const Common& c) {
  const RunConfig cfg = load_config(c);
  const fs::path dir = data_dir(c, cfg);
  const auto manifest = write_dataset_dir(dir, cfg, generate_dataset(cfg));
  echo_into(dir, cfg);
  std::cout << "wrote " << manifest["records"]["assets"] << " asset records and " << manifest["records"]["dates"] << " date records to "
            << dir.string() << " (config hash " << manifest["config_hash"].get<std::string>() << ")\n";
  return kExitOk;
}

int cmd_train(const Common& c, bool resume, const std::vector<std::uint64_t>& only_seeds, std::optional<std::size_t> stop_after) {
  const RunConfig cfg = load_config(c);
  const auto ds = read_dataset_dir(data_dir(c, cfg));
  const TaskData data = make_task_data(cfg, ds);
  const fs::path root = fs::path(cfg.output_dir) / "train";
  echo_into(root, cfg);
  std::vector<std::uint64_t> seeds = only_seeds.empty() ? cfg.seeds : only_seeds;
  for (auto seed : seeds) {
    const fs::path dir = make_dir(root / ("seed-" + std::to_string(seed)));
    std::cout << "seed " << seed << ": training\n" << std::flush;
    std::vector<EpochLog> history;
    Model model = train_model(cfg, data, seed, &history, dir, resume, stop_after);
    write_file_atomic(dir / "stage_report.json", stage_report(history, seed).dump(2) + "\n");
    for (std::size_t s = 0; s < kStageCount; ++s) {
      const EpochLog* last = nullptr;
      for (const auto& e : history)
        if (static_cast<std::size_t>(e.stage) == s) last = &e;
      if (last) std::cout << "  " << to_string(last->stage) << ": " << last->epoch + 1 << " epochs, final loss " << last->total << "\n";
    }
  }
  return kExitOk;
}

int cmd_eval(const Common& c, std::vector<std::string> runs, const std::string& split_name) {
  const Split split = split_from_string(split_name);
  if (runs.empty()) {
    RunConfig base;
    resolve_output(base, c);
    runs.push_back((fs::path(base.output_dir) / "train").string());
  }
  std::optional<RunConfig> first_cfg;
  std::optional<datapipe::AlignedDataset> ds;
  json jruns = json::array();
  std::vector<std::pair<std::string, metrics::EvalReport>> rows;
  std::vector<std::pair<std::string, std::string>> score_files;
  for (const auto& spec : runs) {
    std::string label;
    fs::path dir = spec;
    if (const auto eq = spec.find('='); eq != std::string::npos) label = spec.substr(0, eq), dir = spec.substr(eq + 1);
    std::vector<metrics::MetricMap> maps;
    std::vector<std::uint64_t> seeds;
    for (const auto& sd : seed_dirs(dir)) {
      const Checkpoint ck = load_checkpoint(sd);
      RunConfig cfg = ck.config;
      apply_checkpoint_overrides(cfg, c);
      if (!first_cfg) first_cfg = cfg;
      if (!ds) ds = read_dataset_dir(data_dir(c, cfg));
      if (label.empty()) label = modality_label(cfg.model);
      const TaskData data = make_task_data(cfg, *ds, &ck.normalization);
      const Model model = model_from_checkpoint(ck);
      const Predictions p = predict(model, data, split);
      maps.push_back(score(p, {data.flat_band(), cfg.hit_threshold}));
      seeds.push_back(ck.seed);
      std::ostringstream os;
      for (const auto& r : p.macro)
        os << json{{"date", data.ds.dates[r.step].date}, {"step", r.step}, {"score", r.score}, {"warning", r.warning}, {"crisis", r.crisis}}.dump()
           << '\n';
      score_files.emplace_back("scores-" + label + "-seed-" + std::to_string(ck.seed) + ".jsonl", os.str());
    }
    auto rep = metrics::aggregate_seeds(maps, seeds);
    jruns.push_back({{"label", label}, {"report", metrics::to_json(rep)}});
    rows.emplace_back(label, std::move(rep));
  }
  const fs::path out = make_dir(fs::path(first_cfg->output_dir) / "eval");
  echo_into(out, *first_cfg);
  for (const auto& [name, text] : score_files) write_file_atomic(out / name, text);
  write_file_atomic(out / "eval.json", json{{"split", to_string(split)}, {"runs", jruns}}.dump(2) + "\n");
  const std::string text = metrics::render_table("Micro-level forecasting (" + std::string(to_string(split)) + ")", metrics::micro_columns(), rows) +
                           "\n" + metrics::render_table("Credit and node risk", metrics::credit_columns(), rows) + "\n" +
                           metrics::render_table("Macro early warning", metrics::macro_columns(), rows);
  write_file_atomic(out / "eval.txt", text);
  std::cout << text;
  return kExitOk;
}

struct Loaded {
  Checkpoint ck;
  RunConfig cfg;
  datapipe::AlignedDataset ds;
};

Loaded load_for_inference(const Common& c, const std::string& checkpoint) {
  Loaded l{load_checkpoint(checkpoint), {}, {}};
  l.cfg = l.ck.config;
  apply_checkpoint_overrides(l.cfg, c);
  l.ds = read_dataset_dir(data_dir(c, l.cfg));
  return l;
}

int cmd_forecast(const Common& c, const std::string& checkpoint, const std::string& date, long horizon, const std::string& file) {
  if (horizon < 1) throw ConfigError("--horizon must be >= 1");
  const Loaded l = load_for_inference(c, checkpoint);
  const std::size_t step = find_date(l.ds, date);
  const TaskData data = make_task_data(l.cfg, l.ds, &l.ck.normalization);
  const Model model = model_from_checkpoint(l.ck);
  json rows = json::array();
  const auto fs_ = forecasts_at(model, data, step, horizon);
  for (std::size_t a = 0; a < fs_.size(); ++a) {
    const auto& f = fs_[a];
    json mix = json::array();
    for (const auto& m : f.mixture) mix.push_back({{"weight", m.weight}, {"mean", m.mean}, {"stdev", m.stdev}});
    rows.push_back({{"asset", data.ds.assets[a]},
                    {"point", f.point},
                    {"direction", {{"down", f.direction[0]}, {"flat", f.direction[1]}, {"up", f.direction[2]}}},
                    {"class", std::array<const char*, 3>{"down", "flat", "up"}[f.direction_class()]},
                    {"mixture", mix}});
  }
  const std::string text = json{{"date", date}, {"step", step}, {"horizon", horizon}, {"seed", l.ck.seed}, {"forecasts", rows}}.dump(2) + "\n";
  if (!file.empty()) write_file_atomic(file, text);
  std::cout << text;
  return kExitOk;
}

int cmd_report(const Common& c, const std::string& checkpoint, const std::string& date) {
  const Loaded l = load_for_inference(c, checkpoint);
  const std::size_t step = find_date(l.ds, date);
  const TaskData data = make_task_data(l.cfg, l.ds, &l.ck.normalization);
  if (step < data.in.first_step + data.history - 1)
    throw ConfigError("date " + date + " precedes the first step with full feature history (" + data.ds.dates[data.in.first_step + data.history - 1].date + ")");
  const Model model = model_from_checkpoint(l.ck);
  std::vector<std::string> nodes;
  for (std::size_t i = 0; i < data.ds.graph_nodes(); ++i) nodes.push_back("node-" + std::to_string(i));
  const auto b = heads::generate_bulletin(risk_at(model, data, step), forecasts_at(model, data, step, 1), nodes, date);
  const fs::path out = make_dir(fs::path(l.cfg.output_dir) / "reports");
  write_file_atomic(out / ("bulletin-" + date + ".md"), b.text);
  std::cout << b.text;
  return kExitOk;
}

int cmd_rl_run(const Common& c, const std::string& checkpoint) {
  const Loaded l = load_for_inference(c, checkpoint);
  const TaskData data = make_task_data(l.cfg, l.ds, &l.ck.normalization);
  const fs::path out = make_dir(fs::path(l.cfg.output_dir) / "rl" / ("seed-" + std::to_string(l.ck.seed)));
  echo_into(out, l.cfg);
  const auto points = beta_sweep(l.ck, data, l.cfg.beta_sweep, out);
  json rows = json::array();
  std::ostringstream text;
  text << "beta    mean|pos|  stress|pos|  calm|pos|  greedy reward\n";
  for (const auto& p : points) {
    rows.push_back({{"beta", p.beta},
                    {"mean_abs_position", p.stats.mean_abs_position},
                    {"stress_abs_position", p.stats.stress_abs_position},
                    {"calm_abs_position", p.stats.calm_abs_position},
                    {"stress_steps", p.stats.stress_steps},
                    {"greedy_reward", p.stats.greedy_reward},
                    {"greedy_profit", p.stats.greedy_profit},
                    {"final_objective", p.final_objective}});
    char line[160];
    std::snprintf(line, sizeof line, "%-6s  %9.4f  %11.4f  %9.4f  %13.6f\n", heads::format_number(p.beta).c_str(), p.stats.mean_abs_position,
                  p.stats.stress_abs_position, p.stats.calm_abs_position, p.stats.greedy_reward);
    text << line;
  }
  write_file_atomic(out / "rl_report.json", json{{"seed", l.ck.seed}, {"sweep", rows}}.dump(2) + "\n");
  write_file_atomic(out / "rl_report.txt", text.str());
  std::cout << text.str();
  return kExitOk;
}

int cmd_grad_check(std::size_t d_model, std::uint64_t seed, double tolerance) {
  bool ok = true;
  for (const auto& r : end_to_end_grad_check(d_model, seed)) {
    const bool pass = r.error < tolerance;
    ok = ok && pass;
    std::printf("%-8s %6zu params  max rel err %.3e  %s\n", r.group.c_str(), r.coords, r.error, pass ? "ok" : "FAIL");
  }
  return ok ? kExitOk : kExitCheck;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unifin: multimodal financial forecasting and systemic-risk toolkit"};
  app.require_subcommand(1);
  Common c;

  auto* gen = app.add_subcommand("generate", "Generate a synthetic dataset (JSON lines plus manifest)");
  add_common(gen, c);
  gen->add_option("-d,--data", c.data, "Dataset directory (default <output>/data)");

  bool resume = false;
  std::vector<std::uint64_t> train_seeds;
  auto* train = app.add_subcommand("train", "Run the staged curriculum for every seed");
  add_common(train, c);
  train->add_option("-d,--data", c.data, "Dataset directory (default <output>/data)");
  train->add_flag("--resume", resume, "Continue from checkpoints in the output directory");
  train->add_option("--seed", train_seeds, "Train only these seeds (one worker per seed)");
  std::size_t stop_after = 0;
  train->add_option("--stop-after", stop_after, "Stop each seed after this many epochs; continue later with --resume");

  std::vector<std::string> runs;
  std::string split = "test";
  auto* eval = app.add_subcommand("eval", "Score checkpoints and aggregate over seeds");
  add_common(eval, c);
  eval->add_option("-d,--data", c.data, "Dataset directory (default <output>/data)");
  eval->add_option("-r,--run", runs, "Run or seed directory, optionally label=dir; repeatable (default <output>/train)");
  eval->add_option("--split", split, "train, test or all");

  std::string checkpoint, date, file;
  long horizon = 1;
  auto* fc = app.add_subcommand("forecast", "Per-asset forecasts for one date");
  add_common(fc, c);
  fc->add_option("-d,--data", c.data, "Dataset directory (default <output>/data)");
  fc->add_option("-k,--checkpoint", checkpoint, "Seed directory")->required();
  fc->add_option("--date", date, "Forecast origin date (YYYY-MM-DD)")->required();
  fc->add_option("--horizon", horizon, "Steps ahead");
  fc->add_option("-f,--file", file, "Also write the JSON here");

  auto* rlr = app.add_subcommand("rl-run", "Sweep the risk penalty over a trained checkpoint");
  add_common(rlr, c);
  rlr->add_option("-d,--data", c.data, "Dataset directory (default <output>/data)");
  rlr->add_option("-k,--checkpoint", checkpoint, "Seed directory")->required();

  auto* rep = app.add_subcommand("report", "Write the markdown bulletin for one date");
  add_common(rep, c);
  rep->add_option("-d,--data", c.data, "Dataset directory (default <output>/data)");
  rep->add_option("-k,--checkpoint", checkpoint, "Seed directory")->required();
  rep->add_option("--date", date, "Bulletin date (YYYY-MM-DD)")->required();

  std::size_t d_model = 8;
  std::uint64_t gc_seed = 1;
  double tolerance = 1e-3;
  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of every parameter group");
  gc->add_option("--d-model", d_model, "Model width");
  gc->add_option("--seed", gc_seed, "Seed");
  gc->add_option("--tolerance", tolerance, "Maximum relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*gen) return cmd_generate(c);
    if (*train) return cmd_train(c, resume, train_seeds, stop_after ? std::optional<std::size_t>(stop_after) : std::nullopt);
    if (*eval) return cmd_eval(c, runs, split);
    if (*fc) return cmd_forecast(c, checkpoint, date, horizon, file);
    if (*rlr) return cmd_rl_run(c, checkpoint);
    if (*rep) return cmd_report(c, checkpoint, date);
    if (*gc) return cmd_grad_check(d_model, gc_seed, tolerance);
  } catch (const DivergenceError& e) {
    std::cerr << "error: numerical divergence: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const NumericError& e) {
    std::cerr << "error: numerical failure: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const SchemaError& e) {
    std::cerr << "error: schema: " << e.what() << "\n";
    return kExitSchema;
  } catch (const DimensionError& e) {
    std::cerr << "error: checkpoint and dataset shapes disagree: " << e.what() << "\n";
    return kExitSchema;
  } catch (const IoError& e) {
    std::cerr << "error: io: " << e.what() << "\n";
    return kExitIo;
  } catch (const ContractError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IndexError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitConfig;
}
