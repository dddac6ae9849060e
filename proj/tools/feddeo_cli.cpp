#include "feddeo/config.hpp"
#include "feddeo/digest.hpp"
#include "feddeo/pipeline.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <cstdio>
#include <iostream>

using namespace feddeo;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kStageError = 3;
constexpr int kIntegrityError = 4;

void print_results(const Evaluation& ev) {
  std::printf("%-14s %8s\n", "method", "average");
  for (const ResultsTable& t : ev.results) std::printf("%-14s %8.4f\n", t.method.c_str(), t.average);
  if (!ev.kl.empty()) {
    std::printf("\n%-6s %10s %12s\n", "client", "kl_feddeo", "kl_prompts");
    for (const ClientKL& row : ev.kl) {
      if (row.prompts_only)
        std::printf("%-6d %10.4f %12.4f\n", row.client_id, row.feddeo, *row.prompts_only);
      else
        std::printf("%-6d %10.4f %12s\n", row.client_id, row.feddeo, "-");
    }
  }
  std::printf("\nsummary digest %s\n", ev.summary_digest.c_str());
}

/// "kind=R" / "values=10,30,50" arguments of the sweep subcommand.
void parse_sweep_args(const std::vector<std::string>& args, SweepKind& kind, std::vector<int>& values) {
  bool have_kind = false;
  for (const std::string& arg : args) {
    const auto eq = arg.find('=');
    if (eq == std::string::npos) throw ConfigError("sweep: expected key=value, got '" + arg + "'");
    const std::string key = arg.substr(0, eq), value = arg.substr(eq + 1);
    if (key == "kind") {
      kind = parse_sweep_kind(value);
      have_kind = true;
    } else if (key == "values") {
      values.clear();
      std::size_t pos = 0;
      while (pos <= value.size()) {
        const auto comma = std::min(value.find(',', pos), value.size());
        int v = 0;
        const char* first = value.data() + pos;
        const char* last = value.data() + comma;
        const auto res = std::from_chars(first, last, v);
        if (res.ec != std::errc{} || res.ptr != last || v < 1)
          throw ConfigError("sweep: bad value list '" + value + "'");
        values.push_back(v);
        pos = comma + 1;
      }
    } else {
      throw ConfigError("sweep: unknown argument '" + key + "'");
    }
  }
  if (!have_kind) throw ConfigError("sweep: kind=R or kind=S is required");
  if (values.empty()) values = kind == SweepKind::R ? std::vector<int>{10, 30, 50} : std::vector<int>{1, 10, 20};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"One-shot federated learning simulator with description-guided diffusion"};
  app.require_subcommand(0, 1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string stage_name;
  bool resume = false;
  bool quiet = false;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "key=value config file")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "override the master seed");
  app.add_option("--out", out, "output directory");
  app.add_option("--stage", stage_name, "run a single stage");
  app.add_flag("--resume", resume, "skip stages whose outputs are current");
  app.add_option("--set", overrides, "extra key=value overrides, applied after --config");
  app.add_flag("-q,--quiet", quiet, "no progress log");

  app.add_subcommand("run", "run every stage (default)");
  for (Stage s : all_stages()) app.add_subcommand(to_string(s), "run only the " + to_string(s) + " stage");
  CLI::App* sweep = app.add_subcommand("sweep", "ablation over R or S, e.g. sweep kind=R values=10,30,50");
  std::vector<std::string> sweep_args;
  sweep->add_option("args", sweep_args, "kind=R|S values=v1,v2,...");
  CLI::App* keys = app.add_subcommand("keys", "list config keys with defaults");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    if (keys->parsed()) {
      for (const ConfigKey& k : describe_config_keys())
        std::printf("%-32s %-24s %s\n", k.key.c_str(), k.default_value.c_str(), k.help.c_str());
      return kOk;
    }

    ExperimentConfig config = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
    for (const std::string& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      set_config_value(config, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed) config.seed = *seed;
    if (!out.empty()) config.out = out;
    validate(config);

    RunOptions options;
    options.resume = resume;
    options.log = quiet ? nullptr : &std::cerr;

    std::optional<Stage> stage;
    if (!stage_name.empty()) stage = parse_stage(stage_name);
    for (const CLI::App* sub : app.get_subcommands())
      if (sub->get_name() != "run" && sub != sweep) {
        const Stage s = parse_stage(sub->get_name());
        if (stage && *stage != s) throw ConfigError("--stage " + stage_name + " conflicts with " + sub->get_name());
        stage = s;
      }

    if (sweep->parsed()) {
      SweepKind kind = SweepKind::R;
      std::vector<int> values;
      parse_sweep_args(sweep_args, kind, values);
      const SweepResult r = ablation_sweep(config, kind, values, options);
      std::printf("%s %8s\n", to_string(kind).c_str(), "average");
      for (std::size_t i = 0; i < r.values.size(); ++i) std::printf("%-3d %8.4f\n", r.values[i], r.tables[i].average);
      std::printf("spearman %.4f\n", r.spearman_rho);
      return kOk;
    }

    if (stage) {
      if (auto ev = run_stage(config, *stage, options)) print_results(*ev);
    } else {
      print_results(run_pipeline(config, options));
    }
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const IntegrityError& e) {
    std::cerr << "integrity error: " << e.what() << "\n";
    return kIntegrityError;
  } catch (const StageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kStageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kStageError;
  }
}
