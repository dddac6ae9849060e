#include "feddeo/checkpoint.hpp"
#include "feddeo/digest.hpp"
#include "feddeo/io.hpp"
#include "feddeo/pipeline.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include <unistd.h>

using namespace feddeo;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny(const std::string& dir) {
  ExperimentConfig c;
  c.seed = 77;
  c.world.categories = 4;
  c.world.domains = 3;
  c.partition_config.clients = 3;
  c.partition_config.train_per_category = 30;
  c.partition_config.test_per_category = 12;
  c.partition_config.min_per_cell = 5;
  c.corpus.per_cell = 20;
  c.T = 20;
  c.model.hidden = 16;
  c.model.hidden_layers = 2;
  c.model.time_dim = 8;
  c.model.cond_dim = 4;
  c.pretrain.epochs = 3;
  c.client.epochs = 2;
  c.generation.R = 8;
  c.classifier.max_epochs = 15;
  c.fedavg.rounds = 2;
  c.baselines = {"prompts_only", "ceiling", "fedavg", "local"};
  c.out = fs::temp_directory_path() / ("feddeo_pipeline_" + dir);
  fs::remove_all(c.out);
  return c;
}

std::string slurp(const fs::path& p) {
  const std::vector<std::uint8_t> b = read_file(p);
  return {b.begin(), b.end()};
}

int run_cli(const std::string& args) {
  const int status = std::system((std::string(FEDDEO_CLI) + " -q " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

/// One finished tiny run shared by the read-only tests.
const ExperimentConfig& finished() {
  struct Run {
    ExperimentConfig config = tiny("shared_" + std::to_string(::getpid()));
    Run() { run_pipeline(config); }
    ~Run() { fs::remove_all(config.out); }
  };
  static const Run run;
  return run.config;
}

}  // namespace

TEST(Pipeline, WritesEveryDeclaredOutput) {
  const ExperimentConfig& c = finished();
  for (Stage s : all_stages())
    for (const std::string& rel : stage_io(s, resolved(c)).writes) EXPECT_TRUE(fs::exists(c.out / rel)) << rel;
  for (Stage s : all_stages()) EXPECT_TRUE(fs::exists(c.out / "stages" / (to_string(s) + ".done"))) << to_string(s);
}

TEST(Pipeline, ResultsHaveOneRowPerClientPerMethod) {
  const ExperimentConfig& c = finished();
  const std::string text = slurp(c.out / "results.csv");
  EXPECT_EQ(csv_provenance(text).config_digest, config_digest(resolved(c)));
  std::istringstream body(csv_body(text));
  std::string line;
  std::getline(body, line);
  EXPECT_EQ(line, "method,client_id,accuracy");
  int rows = 0;
  while (std::getline(body, line)) ++rows;
  EXPECT_EQ(rows, 3 * 5);

  const nlohmann::json summary = nlohmann::json::parse(slurp(c.out / "summary.json"));
  EXPECT_EQ(summary["partition"], "feature_skew");
  EXPECT_EQ(summary["averages"].size(), 5u);
  EXPECT_EQ(summary["kl"]["k"], 5);
  nlohmann::ordered_json ordered = nlohmann::ordered_json::parse(slurp(c.out / "summary.json"));
  const std::string digest = ordered["digest"];
  ordered.erase("digest");
  EXPECT_EQ(sha256_hex(ordered.dump(2)), digest);
}

TEST(Pipeline, UploadsMatchTheLedger) {
  const ExperimentConfig& c = finished();
  const nlohmann::json manifest = nlohmann::json::parse(slurp(c.out / "uploads/manifest.json"));
  std::uint64_t params = 0;
  for (const auto& client : manifest["clients"]) {
    params += client["parameters"].get<std::uint64_t>();
    const std::vector<std::uint8_t> bytes = read_file(c.out / client["file"].get<std::string>());
    EXPECT_EQ(sha256_hex(bytes), client["sha256"]);
    EXPECT_EQ(parse_upload(bytes).parameter_count(), client["parameters"].get<std::uint64_t>());
  }
  EXPECT_EQ(params, 3u * 4u * 4u);
  const std::string ledger = csv_body(slurp(c.out / "ledger.csv"));
  EXPECT_NE(ledger.find("feddeo,48,192,1,1"), std::string::npos) << ledger;
}

TEST(Pipeline, GenerationNeverReadsClientData) {
  const ExperimentConfig& c = finished();
  const nlohmann::json io = nlohmann::json::parse(slurp(c.out / "io_manifest.json"));
  for (const char* stage : {"generate", "train-aggregate"})
    for (const auto& rel : io[stage]["reads"]) EXPECT_NE(rel.get<std::string>(), "clients.csv") << stage;
}

TEST(Pipeline, SameSeedDifferentDirectoryGivesIdenticalReports) {
  const ExperimentConfig& a = finished();
  ExperimentConfig b = tiny("again");
  const Evaluation eb = run_pipeline(b);
  EXPECT_EQ(csv_body(slurp(a.out / "results.csv")), csv_body(slurp(b.out / "results.csv")));
  EXPECT_EQ(slurp(a.out / "summary.json"), slurp(b.out / "summary.json"));
  EXPECT_EQ(read_file(a.out / "dm.fdeo"), read_file(b.out / "dm.fdeo"));
  fs::remove_all(b.out);
}

TEST(Pipeline, ResumeSkipsFinishedStages) {
  ExperimentConfig c = tiny("resume");
  const Evaluation first = run_pipeline(c);
  const auto stamp = fs::last_write_time(c.out / "dm.fdeo");
  fs::remove(c.out / "summary.json");
  std::ostringstream log;
  const Evaluation second = run_pipeline(c, {.resume = true, .log = &log});
  EXPECT_NE(log.str().find("[pretrain] up to date, skipped"), std::string::npos) << log.str();
  EXPECT_NE(log.str().find("[evaluate] done"), std::string::npos);
  EXPECT_EQ(fs::last_write_time(c.out / "dm.fdeo"), stamp);
  EXPECT_EQ(second.summary_digest, first.summary_digest);

  set_config_value(c, "server.R", "4");
  std::ostringstream log2;
  run_pipeline(c, {.resume = true, .log = &log2});
  EXPECT_NE(log2.str().find("[pretrain] up to date"), std::string::npos);
  EXPECT_NE(log2.str().find("[train-descriptions] done"), std::string::npos);
  fs::remove_all(c.out);
}

TEST(Pipeline, TamperedUploadIsAnIntegrityError) {
  ExperimentConfig c = tiny("tamper");
  for (Stage s : {Stage::Pretrain, Stage::TrainDescriptions}) run_stage(c, s);
  std::vector<std::uint8_t> bytes = read_file(c.out / "uploads/client_1.fdup");
  bytes.back() ^= 0x01;
  write_file_atomic(c.out / "uploads/client_1.fdup", bytes);
  EXPECT_THROW(run_stage(c, Stage::Generate), IntegrityError);
  write_file_atomic(c.out / "run.cfg", canonical_text(c));
  EXPECT_EQ(run_cli("--config " + (c.out / "run.cfg").string() + " --out " + c.out.string() + " generate"), 4);
  fs::remove_all(c.out);
}

TEST(Pipeline, SwappedModelIsAnIntegrityError) {
  ExperimentConfig c = tiny("swap");
  for (Stage s : {Stage::Pretrain, Stage::TrainDescriptions}) run_stage(c, s);
  nlohmann::ordered_json manifest = nlohmann::ordered_json::parse(slurp(c.out / "uploads/manifest.json"));
  manifest["model_digest"] = sha256_hex(std::string_view("some other model"));
  write_file_atomic(c.out / "uploads/manifest.json", manifest.dump(2));
  EXPECT_THROW(run_stage(c, Stage::Generate), IntegrityError);
  fs::remove_all(c.out);
}

TEST(Pipeline, MissingInputNamesTheProducingStage) {
  ExperimentConfig c = tiny("missing");
  try {
    run_stage(c, Stage::Generate);
    FAIL() << "expected StageError";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), Stage::Generate);
    EXPECT_NE(std::string(e.what()).find("run stage 'pretrain'"), std::string::npos) << e.what();
  }
  fs::remove_all(c.out);
}

TEST(Pipeline, EvaluateWithoutClassifierNamesTrainAggregate) {
  ExperimentConfig c = tiny("noclf");
  for (Stage s : {Stage::Pretrain, Stage::TrainDescriptions, Stage::Baselines}) run_stage(c, s);
  try {
    run_stage(c, Stage::Evaluate);
    FAIL() << "expected StageError";
  } catch (const StageError& e) {
    EXPECT_NE(std::string(e.what()).find("train-aggregate"), std::string::npos) << e.what();
  }
  fs::remove_all(c.out);
}

TEST(Pipeline, StaleInputsAreRejected) {
  ExperimentConfig c = tiny("stale");
  for (Stage s : {Stage::Pretrain, Stage::TrainDescriptions, Stage::Generate}) run_stage(c, s);
  set_config_value(c, "client.epochs", "3");
  EXPECT_THROW(run_stage(c, Stage::Generate), StageError);
  set_config_value(c, "diffusion.T", "25");
  EXPECT_THROW(run_stage(c, Stage::TrainDescriptions), StageError);
  fs::remove_all(c.out);
}

TEST(Pipeline, SweepOverRReusesThePretrainedModel) {
  ExperimentConfig c = tiny("sweep");
  std::ostringstream log;
  const SweepResult r = ablation_sweep(c, SweepKind::R, {2, 4, 8}, {.log = &log});
  ASSERT_EQ(r.tables.size(), 3u);
  EXPECT_EQ(r.values, (std::vector<int>{2, 4, 8}));
  EXPECT_TRUE(fs::exists(c.out / "sweep_R.csv"));
  EXPECT_EQ(read_file(c.out / "dm.fdeo"), read_file(c.out / "R_4" / "dm.fdeo"));
  std::vector<double> acc;
  for (const ResultsTable& t : r.tables) acc.push_back(t.average);
  std::vector<double> values(r.values.begin(), r.values.end());
  EXPECT_DOUBLE_EQ(r.spearman_rho, spearman(values, acc));
  fs::remove_all(c.out);
}

TEST(Cli, ExitCodes) {
  const ExperimentConfig& c = finished();
  const std::string out = " --out " + c.out.string();
  EXPECT_EQ(run_cli("keys"), 0);
  EXPECT_EQ(run_cli("--set no.such.key=1" + out), 2);
  EXPECT_EQ(run_cli("--set server.R=0" + out), 2);
  EXPECT_EQ(run_cli("--stage nonsense" + out), 2);
  EXPECT_EQ(run_cli("--config /nonexistent.cfg" + out), 2);
  const fs::path empty = fs::temp_directory_path() / "feddeo_cli_empty";
  fs::remove_all(empty);
  EXPECT_EQ(run_cli("--stage evaluate --out " + empty.string()), 3);
  fs::remove_all(empty);
}

TEST(Pipeline, CeilingIsAtLeastLocal) {
  const nlohmann::json summary = nlohmann::json::parse(slurp(finished().out / "summary.json"));
  EXPECT_GE(summary["averages"]["ceiling"].get<double>(), summary["averages"]["local"].get<double>());
}

TEST(Cli, SweepWritesOneTablePerValue) {
  ExperimentConfig c = tiny("cli_sweep");
  fs::create_directories(c.out);
  write_file_atomic(c.out / "run.cfg", canonical_text(c));
  ASSERT_EQ(run_cli("--config " + (c.out / "run.cfg").string() + " --out " + c.out.string() + " sweep kind=R values=10,30,50"), 0);
  for (int r : {10, 30, 50}) EXPECT_TRUE(fs::exists(c.out / ("R_" + std::to_string(r)) / "results.csv")) << r;
  std::istringstream body(csv_body(slurp(c.out / "sweep_R.csv")));
  std::string line;
  int averages = 0;
  while (std::getline(body, line)) averages += line.find(",average,") != std::string::npos;
  EXPECT_EQ(averages, 3);
  fs::remove_all(c.out);
}
