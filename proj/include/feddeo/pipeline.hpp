#pragma once

#include "feddeo/config.hpp"
#include "feddeo/ledger.hpp"
#include "feddeo/metrics.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace feddeo {

enum class Stage { Pretrain, TrainDescriptions, Generate, TrainAggregate, Baselines, Evaluate };

std::string to_string(Stage stage);
/// Throws ConfigError for an unknown name.
Stage parse_stage(const std::string& name);
const std::vector<Stage>& all_stages();

/// A stage could not run: missing or stale inputs, or a failure inside it.
class StageError : public std::runtime_error {
 public:
  StageError(Stage stage, const std::string& what)
      : std::runtime_error("stage " + to_string(stage) + ": " + what), stage_(stage) {}
  Stage stage() const noexcept { return stage_; }

 private:
  Stage stage_;
};

struct RunOptions {
  /// Skip a stage whose marker matches the current config and whose
  /// outputs all exist.
  bool resume = false;
  /// Directory holding a finished pretrain stage of an equivalent config;
  /// its world and model are copied instead of pretraining again.
  std::optional<std::filesystem::path> reuse_pretrain;
  std::ostream* log = nullptr;
};

/// Files a stage reads and writes, relative to the output directory.
struct StageIO {
  std::vector<std::string> reads;
  std::vector<std::string> writes;
};

StageIO stage_io(Stage stage, const ExperimentConfig& config);

struct ClientKL {
  int client_id = 0;
  double feddeo = 0.0;
  /// Absent when the prompts-only baseline is disabled.
  std::optional<double> prompts_only;
};

/// Everything the evaluate stage reports.
struct Evaluation {
  std::vector<ResultsTable> results;
  std::vector<ClientKL> kl;
  CommLedger ledger;
  std::string results_digest;
  std::string summary_digest;

  const ResultsTable& method(const std::string& name) const;
  bool has_method(const std::string& name) const;
};

/// Runs one stage against the files in config.out. Returns the evaluation
/// for the evaluate stage, nothing otherwise.
std::optional<Evaluation> run_stage(const ExperimentConfig& config, Stage stage, const RunOptions& options = {});

/// All stages in order. Evaluate always reruns; it is cheap and derives
/// only from files on disk.
Evaluation run_pipeline(const ExperimentConfig& config, const RunOptions& options = {});

enum class SweepKind { R, S };

std::string to_string(SweepKind kind);
SweepKind parse_sweep_kind(const std::string& name);

struct SweepResult {
  SweepKind kind = SweepKind::R;
  std::vector<int> values;
  /// FedDEO results, one table per value.
  std::vector<ResultsTable> tables;
  double spearman_rho = 0.0;
};

/// Pretrains once in config.out, then runs the FedDEO chain for each value
/// of R (images per description) or S (description epochs) in
/// config.out/<kind>_<value>/ and writes config.out/sweep_<kind>.csv.
SweepResult ablation_sweep(const ExperimentConfig& config, SweepKind kind, const std::vector<int>& values,
                           const RunOptions& options = {});

}  // namespace feddeo
