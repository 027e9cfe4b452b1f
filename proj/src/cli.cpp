#include "dagnas/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include "dagnas/checkpoint.hpp"
#include "dagnas/evolution.hpp"

#ifndef DAGNAS_VERSION
#define DAGNAS_VERSION "unknown"
#endif

namespace dagnas::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

int g_stop_after = 0;

constexpr const char* kMetricsSchema = "dagnas-metrics/1";
constexpr const char* kEpochSchema = "dagnas-epochs/1";

struct CliError : std::runtime_error {
  CliError(int code, const std::string& what) : std::runtime_error(what), code(code) {}
  int code;
};

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string read_text(const std::string& path, int code_if_missing) {
  std::ifstream in(path);
  if (!in) throw CliError(code_if_missing, "cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  const std::vector<unsigned char> bytes(text.begin(), text.end());
  write_file_atomic(path.string(), bytes);
}

void prepare_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw CliError(kRuntimeError, "cannot create output directory " + dir.string() + ": " + ec.message());
}

struct CommonOptions {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool config_required) {
  auto* c = cmd->add_option("--config", o.config, "configuration file (key = value lines)");
  if (config_required) c->required();
  cmd->add_option("--set", o.sets, "override one key, key=value (repeatable)");
  cmd->add_option("--seed", o.seed, "run seed (overrides the config)");
  cmd->add_option("--out", o.out, "output directory");
}

SearchConfig resolve_config(const CommonOptions& o) {
  SearchConfig cfg = load_config(o.config);
  for (const auto& s : o.sets) apply_override(cfg, s);
  if (o.seed) cfg.seed = *o.seed;
  cfg.check();
  return cfg;
}

ordered_json config_json(const SearchConfig& cfg) {
  ordered_json j = ordered_json::object();
  std::istringstream in(render_config(cfg));
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find(" = ");
    j[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return j;
}

ordered_json dataset_json(const Dataset& d) {
  return {{"samples", d.size()},
          {"classes", d.classes},
          {"shape", {d.channels(), d.height(), d.width()}},
          {"fingerprint", hex64(d.fingerprint())}};
}

void write_manifest(const fs::path& dir, const std::string& command, const std::vector<std::string>& args,
                    const SearchConfig& cfg, const DataBundle& data, const ordered_json& outputs,
                    const ordered_json& extra = ordered_json::object()) {
  ordered_json m;
  m["tool"] = "dagnas";
  m["version"] = DAGNAS_VERSION;
  m["command"] = command;
  m["argv"] = args;
  m["config"] = config_json(cfg);
  m["seeds"] = {{"seed", cfg.seed}, {"data_seed", cfg.data.data_seed}};
  m["datasets"] = {{"train", dataset_json(data.train.data)},
                   {"valid", dataset_json(data.valid.data)},
                   {"test", dataset_json(data.test.data)}};
  m["metrics_schema"] = kMetricsSchema;
  m["epochs_schema"] = kEpochSchema;
  m["outputs"] = outputs;
  for (const auto& [k, v] : extra.items()) m[k] = v;
  write_text(dir / "manifest.json", m.dump(2) + "\n");
  write_text(dir / "config.txt", render_config(cfg));
}

DataBundle load_data(const SearchConfig& cfg) { return load_bundle(cfg.data); }

bool should_stop(int generations_run) {
  if (stop_requested().load()) return true;
  return g_stop_after > 0 && generations_run >= g_stop_after;
}

void progress(std::ostream& out, const GenerationReport& r, int total) {
  out << "generation " << (r.generation + 1) << "/" << total << "  best " << std::fixed << std::setprecision(4)
      << r.best_fitness << "  mean " << r.mean_fitness << "  delta_best " << r.delta_best << "  lr "
      << std::setprecision(6) << r.lr << std::defaultfloat << "\n";
}

// Shared by `search` and `baseline param-share`.
int drive_search(const std::string& command, const std::vector<std::string>& args, SearchConfig cfg,
                 const std::optional<std::string>& resume_from, const fs::path& dir, std::ostream& out) {
  const DataBundle data = load_data(cfg);
  prepare_dir(dir);
  const fs::path metrics = dir / "metrics.csv", ckpt = dir / "checkpoint.bin", best = dir / "best.txt";
  ordered_json outputs = {{"metrics", metrics.string()},
                          {"checkpoint", ckpt.string()},
                          {"best", best.string()},
                          {"result", (dir / "result.json").string()}};
  ordered_json extra = {{"resumed_from", resume_from ? ordered_json(*resume_from) : ordered_json(nullptr)}};
  write_manifest(dir, command, args, cfg, data, outputs, extra);

  Search s = resume_from ? Search::resume(*resume_from, data) : Search(cfg, data);
  if (resume_from) out << "resuming at generation " << s.generation() << "/" << cfg.generations << "\n";
  int run_here = 0;
  while (!s.done()) {
    if (should_stop(run_here)) {
      s.save_checkpoint(ckpt.string());
      write_text(metrics, metrics_csv(s.reports()));
      throw CliError(kRuntimeError, "interrupted after generation " + std::to_string(s.generation()) +
                                        "; resume with --resume " + ckpt.string());
    }
    const auto& r = s.step();
    ++run_here;
    write_text(metrics, metrics_csv(s.reports()));
    s.save_checkpoint(ckpt.string());
    progress(out, r, cfg.generations);
  }
  const Individual b = s.best();
  write_text(best, render(b.chromosome));
  ordered_json result = {{"best_fitness", b.fitness.value_or(0.0)},
                         {"generations", cfg.generations},
                         {"evaluations", search_budget(cfg)},
                         {"bank_checksum", hex64(s.bank(0).checksum())}};
  write_text(dir / "result.json", result.dump(2) + "\n");
  out << "best validation accuracy " << b.fitness.value_or(0.0) << "\n" << render(b.chromosome);
  return kOk;
}

Chromosome load_chromosome(const std::string& path) {
  const std::string text = read_text(path, kConfigError);
  Chromosome c;
  try {
    c = parse_chromosome(text);
  } catch (const ParseError& e) {
    throw CliError(kConfigError, path + ": " + e.what());
  }
  const auto violations = validate(c);
  if (!violations.empty()) {
    std::string msg = path + ": invalid chromosome";
    for (const auto& v : violations) msg += "\n  " + to_string(v);
    throw CliError(kConfigError, msg);
  }
  return c;
}

int drive_training(const std::string& command, const std::vector<std::string>& args, const Chromosome& c,
                   const SearchConfig& cfg, const fs::path& dir, bool transfer, std::ostream& out) {
  const DataBundle data = load_data(cfg);
  prepare_dir(dir);
  const fs::path epochs = dir / "epochs.csv";
  ordered_json outputs = {{"epochs", epochs.string()}, {"result", (dir / "result.json").string()}};
  write_manifest(dir, command, args, cfg, data, outputs, {{"chromosome", render(c)}});
  std::string csv = std::string(kEpochHeader) + "\n";
  write_text(epochs, csv);
  auto on_epoch = [&](const EpochRow& r) {
    csv += epoch_row(r) + "\n";
    write_text(epochs, csv);
    out << "epoch " << (r.epoch + 1) << "/" << cfg.train_epochs << "  loss " << r.mean_loss << "  lr " << r.lr << "\n";
  };
  const TrainResult res = transfer ? transfer_eval(c, data, cfg, on_epoch)
                                   : train_best_from_scratch(c, cfg, data.full_train, data.test, on_epoch);
  ordered_json result = {{"test_accuracy", res.test_accuracy},
                         {"classes", data.test.data.classes},
                         {"epochs", cfg.train_epochs},
                         {"parameter_count", res.parameter_count},
                         {"bank_checksum", hex64(res.bank_checksum)}};
  write_text(dir / "result.json", result.dump(2) + "\n");
  out << "test accuracy " << res.test_accuracy << "\n";
  return kOk;
}

struct MetricsTable {
  std::vector<std::vector<std::string>> rows;
};

MetricsTable read_metrics(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw CliError(kDataError, "cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) {
    throw CliError(kDataError, path.string() + ": unexpected header, expected " + kMetricsHeader);
  }
  MetricsTable t;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 8) {
      throw CliError(kDataError, path.string() + ": line " + std::to_string(line_no) + " has " +
                                     std::to_string(cells.size()) + " fields, expected 8");
    }
    t.rows.push_back(std::move(cells));
  }
  return t;
}

int cmd_report(const std::string& run_dir, const std::string& out_dir, std::ostream& out) {
  const fs::path dir(run_dir);
  if (!fs::is_directory(dir)) throw CliError(kDataError, "run directory " + run_dir + " does not exist");
  const MetricsTable t = read_metrics(dir / "metrics.csv");
  std::ostringstream summary, series;
  series << "generation,best_fitness,mean_fitness,delta_best,best_so_far\n";
  double best_so_far = 0;
  int best_gen = -1;
  for (const auto& r : t.rows) {
    const double delta = std::stod(r[3]);
    if (best_gen < 0 || delta > best_so_far) {
      best_so_far = delta;
      best_gen = std::stoi(r[0]);
    }
    series << r[0] << "," << r[1] << "," << r[2] << "," << r[3] << "," << best_so_far << "\n";
  }
  summary << "run: " << run_dir << "\n";
  summary << "generations: " << t.rows.size() << "\n";
  if (!t.rows.empty()) {
    summary << "final best fitness: " << t.rows.back()[1] << "\n";
    summary << "final mean fitness: " << t.rows.back()[2] << "\n";
    summary << "best fitness seen: " << best_so_far << " (generation " << best_gen << ")\n";
  }
  if (fs::exists(dir / "result.json")) {
    try {
      const auto j = nlohmann::json::parse(read_text((dir / "result.json").string(), kDataError));
      for (const auto& [k, v] : j.items()) summary << k << ": " << v.dump() << "\n";
    } catch (const nlohmann::json::exception& e) {
      throw CliError(kDataError, (dir / "result.json").string() + ": " + e.what());
    }
  }
  if (fs::exists(dir / "best.txt")) summary << "best chromosome:\n" << read_text((dir / "best.txt").string(), kDataError);
  summary << "\ngeneration  best_fitness  mean_fitness  delta_best\n";
  for (const auto& r : t.rows) {
    summary << std::setw(10) << r[0] << "  " << std::setw(12) << r[1] << "  " << std::setw(12) << r[2] << "  "
            << std::setw(10) << r[3] << "\n";
  }
  out << summary.str();
  if (!out_dir.empty()) {
    const fs::path o(out_dir);
    if (fs::weakly_canonical(o) == fs::weakly_canonical(dir)) {
      throw CliError(kConfigError, "report output must not be the run directory itself");
    }
    prepare_dir(o);
    write_text(o / "summary.txt", summary.str());
    write_text(o / "fitness_series.csv", series.str());
  }
  return kOk;
}

}  // namespace

std::atomic<bool>& stop_requested() {
  static std::atomic<bool> flag{false};
  return flag;
}

void stop_after_generations(int n) { g_stop_after = n; }

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Evolutionary architecture search over DAG blocks with node inheritance"};
  app.require_subcommand(1);
  app.set_version_flag("--version", DAGNAS_VERSION);

  CommonOptions search_o;
  std::string resume;
  auto* search = app.add_subcommand("search", "run the evolutionary search");
  add_common(search, search_o, false);
  search->add_option("--resume", resume, "continue from a search checkpoint");

  CommonOptions train_o;
  std::string train_chrom;
  auto* train = app.add_subcommand("train-best", "train one architecture from scratch and test it");
  add_common(train, train_o, true);
  train->add_option("--chromosome", train_chrom, "chromosome text file")->required();

  CommonOptions transfer_o;
  std::string transfer_chrom;
  auto* transfer = app.add_subcommand("transfer", "train a fixed architecture on another dataset");
  add_common(transfer, transfer_o, true);
  transfer->add_option("--chromosome", transfer_chrom, "chromosome text file")->required();

  CommonOptions baseline_o;
  std::string baseline_name;
  std::optional<std::int64_t> budget;
  auto* baseline = app.add_subcommand("baseline", "run a comparison baseline: random or param-share");
  add_common(baseline, baseline_o, true);
  baseline->add_option("name", baseline_name, "random | param-share")->required();
  baseline->add_option("--budget", budget, "fitness evaluations for the random baseline");

  std::string report_dir, report_out;
  auto* report = app.add_subcommand("report", "summarize a finished run directory");
  report->add_option("run_dir", report_dir, "run directory")->required();
  report->add_option("--out", report_out, "directory for summary.txt and fitness_series.csv");

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForVersion&) {
    out << DAGNAS_VERSION << "\n";
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    if (auto* sub = app.get_subcommands().empty() ? nullptr : app.get_subcommands().front()) {
      err << sub->help();
    } else {
      err << app.help();
    }
    return kConfigError;
  }

  try {
    if (search->parsed()) {
      const fs::path dir = search_o.out.empty() ? fs::path("run") : fs::path(search_o.out);
      if (!resume.empty()) {
        if (!search_o.config.empty() || !search_o.sets.empty() || search_o.seed) {
          throw CliError(kConfigError, "--resume takes its configuration from the checkpoint; drop --config, --set and --seed");
        }
        SearchConfig cfg;
        try {
          cfg = Search::checkpoint_config(resume);
        } catch (const CheckpointError& e) {
          throw CliError(kDataError, e.what());
        }
        const fs::path rdir = search_o.out.empty() ? fs::path(resume).parent_path() : dir;
        return drive_search("search", args, cfg, resume, rdir.empty() ? fs::path(".") : rdir, out);
      }
      if (search_o.config.empty()) throw CliError(kConfigError, "search needs --config (or --resume)");
      return drive_search("search", args, resolve_config(search_o), std::nullopt, dir, out);
    }
    if (train->parsed()) {
      const SearchConfig cfg = resolve_config(train_o);
      const Chromosome c = load_chromosome(train_chrom);
      return drive_training("train-best", args, c, cfg, train_o.out.empty() ? "train" : train_o.out, false, out);
    }
    if (transfer->parsed()) {
      const SearchConfig cfg = resolve_config(transfer_o);
      const Chromosome c = load_chromosome(transfer_chrom);
      return drive_training("transfer", args, c, cfg, transfer_o.out.empty() ? "transfer" : transfer_o.out, true,
                            out);
    }
    if (baseline->parsed()) {
      if (baseline_name != "random" && baseline_name != "param-share") {
        throw CliError(kConfigError, "unknown baseline '" + baseline_name + "' (expected random or param-share)");
      }
      SearchConfig cfg = resolve_config(baseline_o);
      const fs::path dir = baseline_o.out.empty() ? fs::path("baseline-" + baseline_name) : fs::path(baseline_o.out);
      if (baseline_name == "param-share") {
        cfg.mode = FitnessMode::ParameterSharing;
        return drive_search("baseline param-share", args, cfg, std::nullopt, dir, out);
      }
      const std::int64_t b = budget.value_or(search_budget(cfg));
      if (b < 1) throw CliError(kConfigError, "--budget must be at least 1");
      const DataBundle data = load_data(cfg);
      prepare_dir(dir);
      ordered_json outputs = {{"metrics", (dir / "metrics.csv").string()},
                              {"best", (dir / "best.txt").string()},
                              {"result", (dir / "result.json").string()}};
      write_manifest(dir, "baseline random", args, cfg, data, outputs, {{"budget", b}});
      SearchHooks hooks;
      std::vector<GenerationReport> reports;
      hooks.on_generation = [&](const GenerationEvent& e) {
        reports.push_back(e.report);
        write_text(dir / "metrics.csv", metrics_csv(reports));
        progress(out, e.report, static_cast<int>((b + 2 * cfg.population - 1) / (2 * cfg.population)));
      };
      const SearchResult res = random_search_baseline(cfg, data, b, hooks);
      write_text(dir / "best.txt", render(res.best.chromosome));
      ordered_json result = {{"best_fitness", res.best.fitness.value_or(0.0)}, {"evaluations", b}};
      write_text(dir / "result.json", result.dump(2) + "\n");
      out << "best validation accuracy " << res.best.fitness.value_or(0.0) << "\n" << render(res.best.chromosome);
      return kOk;
    }
    if (report->parsed()) return cmd_report(report_dir, report_out, out);
  } catch (const CliError& e) {
    err << "error: " << e.what() << "\n";
    return e.code;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const InvalidConfig& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const ShapeError& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << "\n";
    return kDataError;
  } catch (const std::exception& e) {
    err << "runtime error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kConfigError;
}

}  // namespace dagnas::cli
