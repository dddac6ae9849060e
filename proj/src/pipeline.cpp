#include "feddeo/pipeline.hpp"

#include "feddeo/checkpoint.hpp"
#include "feddeo/client.hpp"
#include "feddeo/digest.hpp"
#include "feddeo/io.hpp"
#include "feddeo/server.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

namespace feddeo {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::Pretrain: return "pretrain";
    case Stage::TrainDescriptions: return "train-descriptions";
    case Stage::Generate: return "generate";
    case Stage::TrainAggregate: return "train-aggregate";
    case Stage::Baselines: return "baselines";
    case Stage::Evaluate: return "evaluate";
  }
  return "unknown";
}

const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> stages{Stage::Pretrain,       Stage::TrainDescriptions, Stage::Generate,
                                         Stage::TrainAggregate, Stage::Baselines,         Stage::Evaluate};
  return stages;
}

Stage parse_stage(const std::string& name) {
  for (Stage s : all_stages())
    if (to_string(s) == name) return s;
  throw ConfigError("unknown stage '" + name +
                    "' (pretrain, train-descriptions, generate, train-aggregate, baselines, evaluate)");
}

std::string to_string(SweepKind kind) { return kind == SweepKind::R ? "R" : "S"; }

SweepKind parse_sweep_kind(const std::string& name) {
  if (name == "R") return SweepKind::R;
  if (name == "S") return SweepKind::S;
  throw ConfigError("sweep kind must be R or S, got '" + name + "'");
}

const ResultsTable& Evaluation::method(const std::string& name) const {
  for (const ResultsTable& t : results)
    if (t.method == name) return t;
  throw std::out_of_range("evaluation: no results for method '" + name + "'");
}

bool Evaluation::has_method(const std::string& name) const {
  return std::any_of(results.begin(), results.end(), [&](const ResultsTable& t) { return t.method == name; });
}

namespace {

const char* kWorld = "world.fdeo";
const char* kModel = "dm.fdeo";
const char* kClients = "clients.csv";
const char* kUploadManifest = "uploads/manifest.json";
const char* kSynFedDeo = "synthetic_feddeo.csv";
const char* kSynPromptsOnly = "synthetic_prompts_only.csv";
const char* kResults = "results.csv";
const char* kKL = "kl.csv";
const char* kLedger = "ledger.csv";
const char* kSummary = "summary.json";
const char* kIoManifest = "io_manifest.json";

std::string upload_file(int client) { return "uploads/client_" + std::to_string(client) + ".fdup"; }
std::string classifier_file(const std::string& method) { return "classifier_" + method + ".fdeo"; }

/// Evaluated methods in report order.
std::vector<std::string> methods(const ExperimentConfig& c) {
  std::vector<std::string> out{"feddeo"};
  for (const char* m : {"prompts_only", "ceiling", "fedavg"})
    if (c.baseline_enabled(m)) out.emplace_back(m);
  if (c.baseline_enabled("local"))
    for (int n = 0; n < c.partition_config.clients; ++n) out.push_back("local_" + std::to_string(n));
  return out;
}

Stage producer(const std::string& rel) {
  if (rel == kWorld || rel == kModel) return Stage::Pretrain;
  if (rel == kClients || rel.starts_with("uploads/")) return Stage::TrainDescriptions;
  if (rel.starts_with("synthetic_")) return Stage::Generate;
  if (rel == classifier_file("feddeo") || rel == classifier_file("prompts_only")) return Stage::TrainAggregate;
  if (rel.starts_with("classifier_")) return Stage::Baselines;
  return Stage::Evaluate;
}

}  // namespace

StageIO stage_io(Stage stage, const ExperimentConfig& c) {
  StageIO io;
  const bool po = c.baseline_enabled("prompts_only");
  std::vector<std::string> uploads;
  for (int n = 0; n < c.partition_config.clients; ++n) uploads.push_back(upload_file(n));
  switch (stage) {
    case Stage::Pretrain:
      io.writes = {kWorld, kModel};
      break;
    case Stage::TrainDescriptions:
      io.reads = {kWorld, kModel};
      io.writes = {kClients, kUploadManifest};
      io.writes.insert(io.writes.end(), uploads.begin(), uploads.end());
      break;
    case Stage::Generate:
      io.reads = {kModel, kUploadManifest};
      io.reads.insert(io.reads.end(), uploads.begin(), uploads.end());
      io.writes = {kSynFedDeo};
      if (po) io.writes.emplace_back(kSynPromptsOnly);
      break;
    case Stage::TrainAggregate:
      io.reads = {kUploadManifest, kSynFedDeo};
      io.writes = {classifier_file("feddeo")};
      if (po) {
        io.reads.emplace_back(kSynPromptsOnly);
        io.writes.push_back(classifier_file("prompts_only"));
      }
      break;
    case Stage::Baselines:
      io.reads = {kClients};
      for (const std::string& m : methods(c))
        if (m != "feddeo" && m != "prompts_only") io.writes.push_back(classifier_file(m));
      break;
    case Stage::Evaluate:
      io.reads = {kClients, kSynFedDeo};
      if (po) io.reads.emplace_back(kSynPromptsOnly);
      for (const std::string& m : methods(c)) io.reads.push_back(classifier_file(m));
      io.writes = {kResults, kKL, kLedger, kSummary};
      break;
  }
  return io;
}

namespace {

fs::path marker_path(const fs::path& out, Stage stage) { return out / "stages" / (to_string(stage) + ".done"); }

std::string read_text(const fs::path& path) {
  const std::vector<std::uint8_t> bytes = read_file(path);
  return {bytes.begin(), bytes.end()};
}

std::string stage_digest(const ExperimentConfig& c, Stage stage) {
  return stage == Stage::Pretrain ? pretrain_digest(c) : config_digest(c);
}

/// One stage invocation: resolved config, declared I/O and provenance.
struct Context {
  ExperimentConfig config;
  Stage stage;
  fs::path out;
  std::string digest;
  StageIO io;
  Provenance provenance;

  Context(const ExperimentConfig& c, Stage s)
      : config(resolved(c)), stage(s), out(c.out), digest(config_digest(config)), io(stage_io(s, config)) {
    provenance = {digest, config.seed, to_string(stage)};
  }

  fs::path input(const std::string& rel) const {
    if (std::find(io.reads.begin(), io.reads.end(), rel) == io.reads.end())
      throw std::logic_error("stage " + to_string(stage) + " reads undeclared input " + rel);
    const fs::path p = out / rel;
    if (!fs::exists(p))
      throw StageError(stage, "missing input " + p.string() + "; run stage '" + to_string(producer(rel)) + "' first");
    if (rel == kWorld || rel == kModel) {
      const fs::path marker = marker_path(out, Stage::Pretrain);
      if (!fs::exists(marker) || read_text(marker) != pretrain_digest(config))
        throw StageError(stage, rel + " was produced for a different configuration; rerun stage 'pretrain'");
    }
    return p;
  }

  fs::path output(const std::string& rel) const {
    if (std::find(io.writes.begin(), io.writes.end(), rel) == io.writes.end())
      throw std::logic_error("stage " + to_string(stage) + " writes undeclared output " + rel);
    const fs::path p = out / rel;
    fs::create_directories(p.parent_path());
    return p;
  }

  void check_provenance(const std::string& rel, const std::string& found) const {
    if (found != digest)
      throw StageError(stage, rel + " was produced for a different configuration (config digest " + found +
                                  "); rerun stage '" + to_string(producer(rel)) + "'");
  }

  std::string read_csv(const std::string& rel) const {
    std::string text = read_text(input(rel));
    check_provenance(rel, csv_provenance(text).config_digest);
    return text;
  }

  Checkpoint read_checkpoint(const std::string& rel) const {
    Checkpoint ckpt = load_checkpoint(input(rel));
    if (rel != kWorld && rel != kModel) check_provenance(rel, checkpoint_provenance(ckpt).config_digest);
    return ckpt;
  }

  Json read_json(const std::string& rel) const {
    Json j = Json::parse(read_text(input(rel)));
    check_provenance(rel, j.at("config_digest").get<std::string>());
    return j;
  }

  void write_checkpoint(const std::string& rel, Checkpoint ckpt) const {
    stamp(ckpt, provenance);
    save_checkpoint(output(rel), ckpt);
  }

  void write_text(const std::string& rel, const std::string& text) const { write_file_atomic(output(rel), text); }
};

Json provenance_json(const Provenance& p) {
  return Json{{"config_digest", p.config_digest}, {"seed", p.seed}, {"stage", p.stage}};
}

std::vector<ClientDataset> make_partition(const WorldSpec& world, const ExperimentConfig& c) {
  return c.partition == PartitionKind::FeatureSkew ? partition_feature_skew(world, c.partition_config)
                                                   : partition_label_skew(world, c.partition_config);
}

void pretrain_stage(const Context& ctx) {
  const ExperimentConfig& c = ctx.config;
  const WorldSpec world = make_world(c.world);
  const CaptionedSamples corpus = make_server_corpus(world, c.corpus);
  const VarianceSchedule sched = make_schedule(c.T, c.beta_min, c.beta_max, c.eta);
  NoisePredictor model(c.model, derive_seed(c, SeedTag::ModelInit));
  Rng rng(derive_seed(c, SeedTag::StyleTable));
  Tensor style("server.style_table", gaussian_matrix(c.world.domains, c.model.cond_dim, rng, c.style_scale), false);
  const TrainTrace trace = pretrain_dm(model, sched, corpus, c.pretrain, derive_seed(c, SeedTag::Pretrain), &style);
  model.freeze();
  ctx.write_checkpoint(kWorld, world_checkpoint(world));
  ctx.write_checkpoint(kModel, model_checkpoint(model, sched, c.beta_min, c.beta_max, trace, &style));
}

void train_descriptions_stage(const Context& ctx) {
  const ExperimentConfig& c = ctx.config;
  const WorldSpec world = world_from_checkpoint(ctx.read_checkpoint(kWorld));
  const Checkpoint dm = ctx.read_checkpoint(kModel);
  const NoisePredictor model = model_from_checkpoint(dm);
  const VarianceSchedule sched = schedule_from_checkpoint(dm, c.eta);

  const std::vector<ClientDataset> clients = make_partition(world, c);
  ctx.write_text(kClients, clients_csv(clients, ctx.provenance));

  Json manifest = provenance_json(ctx.provenance);
  manifest["model_digest"] = model.frozen_digest();
  Json entries = Json::array();
  const std::uint64_t seed = derive_seed(c, SeedTag::Clients);
  for (const ClientDataset& data : clients) {
    ClientState state = make_client(data, model);
    const TrainTrace trace =
        train_descriptions(state, model, sched, c.client, stream_seed(seed, {static_cast<std::uint64_t>(data.client_id)}));
    model.verify_integrity();
    const UploadPayload payload = package_upload(state);
    const std::vector<std::uint8_t> bytes = serialize_upload(payload);
    const std::string rel = upload_file(data.client_id);
    write_file_atomic(ctx.output(rel), bytes);
    entries.push_back({{"client_id", data.client_id},
                       {"file", rel},
                       {"sha256", sha256_hex(bytes)},
                       {"categories", data.categories},
                       {"parameters", payload.parameter_count()},
                       {"epochs_trained", payload.epochs_trained},
                       {"final_loss", trace.epoch_loss.empty() ? 0.0 : trace.epoch_loss.back()}});
  }
  manifest["clients"] = entries;
  ctx.write_text(kUploadManifest, manifest.dump(2) + "\n");
}

void generate_stage(const Context& ctx) {
  const ExperimentConfig& c = ctx.config;
  const Checkpoint dm = ctx.read_checkpoint(kModel);
  const NoisePredictor model = model_from_checkpoint(dm);
  const VarianceSchedule sched = schedule_from_checkpoint(dm, c.eta);
  const Json manifest = ctx.read_json(kUploadManifest);
  const std::string expected_model = manifest.at("model_digest").get<std::string>();
  if (expected_model != model.frozen_digest())
    throw IntegrityError("generate: uploads were trained against model " + expected_model + " but " + kModel +
                         " holds " + model.frozen_digest());

  std::vector<UploadPayload> payloads;
  for (const Json& e : manifest.at("clients")) {
    const std::string rel = e.at("file").get<std::string>();
    const std::vector<std::uint8_t> bytes = read_file(ctx.input(rel));
    if (sha256_hex(bytes) != e.at("sha256").get<std::string>())
      throw IntegrityError("generate: " + rel + " does not match the sha256 recorded in " + kUploadManifest);
    UploadPayload p = parse_upload(bytes);
    p.model_digest = expected_model;
    p.epochs_trained = e.at("epochs_trained").get<int>();
    payloads.push_back(std::move(p));
  }
  SyntheticDataset syn = generate_synthetic(model, payloads, sched, c.generation, derive_seed(c, SeedTag::Generation));
  ctx.write_text(kSynFedDeo, synthetic_csv(syn, ctx.provenance));

  if (c.baseline_enabled("prompts_only")) {
    std::vector<int> categories(static_cast<std::size_t>(model.config().num_classes));
    std::iota(categories.begin(), categories.end(), 0);
    const SyntheticDataset po =
        generate_prompts_only(model, categories, sched, c.generation.R, derive_seed(c, SeedTag::PromptsOnly));
    ctx.write_text(kSynPromptsOnly, synthetic_csv(po, ctx.provenance));
  }
}

void put_ledger(Checkpoint& ckpt, std::uint64_t parameters, int rounds) {
  ckpt.scalars["ledger.parameters"] = static_cast<double>(parameters);
  ckpt.scalars["ledger.rounds"] = rounds;
}

void train_aggregate_stage(const Context& ctx) {
  const ExperimentConfig& c = ctx.config;
  const Json manifest = ctx.read_json(kUploadManifest);
  std::uint64_t uploaded = 0;
  for (const Json& e : manifest.at("clients")) uploaded += e.at("parameters").get<std::uint64_t>();

  const SyntheticDataset syn = parse_synthetic_csv(ctx.read_csv(kSynFedDeo));
  const std::uint64_t seed = derive_seed(c, SeedTag::Classifier);
  ClassifierTraining fed = train_aggregated(syn, c.world.categories, c.classifier, seed);
  Checkpoint ckpt = classifier_checkpoint(fed.classifier, fed.trace);
  put_ledger(ckpt, uploaded, 1);
  ctx.write_checkpoint(classifier_file("feddeo"), ckpt);

  if (c.baseline_enabled("prompts_only")) {
    const SyntheticDataset po = parse_synthetic_csv(ctx.read_csv(kSynPromptsOnly));
    ClassifierTraining trained = train_aggregated(po, c.world.categories, c.classifier, seed);
    Checkpoint po_ckpt = classifier_checkpoint(trained.classifier, trained.trace);
    put_ledger(po_ckpt, 0, 0);
    ctx.write_checkpoint(classifier_file("prompts_only"), po_ckpt);
  }
}

void baselines_stage(const Context& ctx) {
  const ExperimentConfig& c = ctx.config;
  const std::vector<ClientDataset> clients = parse_clients_csv(ctx.read_csv(kClients));
  const int m = c.world.categories;
  const std::uint64_t seed = derive_seed(c, SeedTag::Classifier);
  CommLedger ledger;
  auto save = [&](const std::string& method, const ClassifierTraining& t) {
    Checkpoint ckpt = classifier_checkpoint(t.classifier, t.trace);
    const bool recorded = ledger.contains(method);
    put_ledger(ckpt, recorded ? ledger.at(method).parameters : 0, recorded ? ledger.at(method).rounds : 0);
    ctx.write_checkpoint(classifier_file(method), ckpt);
  };
  if (c.baseline_enabled("ceiling")) save("ceiling", train_centralized(clients, m, c.classifier, seed, &ledger));
  if (c.baseline_enabled("fedavg"))
    save("fedavg", train_fedavg(clients, m, c.fedavg, c.classifier, derive_seed(c, SeedTag::FedAvg), &ledger));
  if (c.baseline_enabled("local"))
    for (const ClientDataset& client : clients)
      save("local_" + std::to_string(client.client_id), train_local(client, m, c.classifier, seed));
}

LabeledSamples restrict_to(const SyntheticDataset& data, const std::vector<int>& categories) {
  const LabeledSamples all = data.for_client(-1);
  LabeledSamples out;
  out.x.resize(0, data.x.cols());
  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < all.size(); ++i)
    if (std::binary_search(categories.begin(), categories.end(), all.labels[static_cast<std::size_t>(i)]))
      rows.push_back(i);
  out.x.resize(static_cast<Eigen::Index>(rows.size()), data.x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.x.row(static_cast<Eigen::Index>(i)) = all.x.row(rows[i]);
    out.labels.push_back(all.labels[static_cast<std::size_t>(rows[i])]);
    out.domains.push_back(-1);
  }
  return out;
}

Evaluation evaluate_stage(const Context& ctx) {
  const ExperimentConfig& c = ctx.config;
  const std::vector<ClientDataset> clients = parse_clients_csv(ctx.read_csv(kClients));
  Evaluation ev;

  std::vector<ResultsTable> locals;
  for (const std::string& m : methods(c)) {
    const Checkpoint ckpt = ctx.read_checkpoint(classifier_file(m));
    const Classifier clf = classifier_from_checkpoint(ckpt);
    ResultsTable table = evaluate_classifier(clf, clients, m);
    table.config_digest = ctx.digest;
    table.seed = c.seed;
    const auto parameters = static_cast<std::uint64_t>(ckpt.scalar("ledger.parameters"));
    const int rounds = static_cast<int>(ckpt.scalar("ledger.rounds"));
    if (m.starts_with("local_")) {
      ev.ledger.record("local", parameters, rounds);
      locals.push_back(std::move(table));
    } else {
      ev.ledger.record(m, parameters, rounds);
      ev.results.push_back(std::move(table));
    }
  }
  if (!locals.empty()) {
    // cell n: client n's own model on the whole federation
    ResultsTable local{"local", {}, 0.0, ctx.digest, c.seed};
    for (const ResultsTable& t : locals) local.client_accuracy.push_back(t.average);
    local.average = std::accumulate(local.client_accuracy.begin(), local.client_accuracy.end(), 0.0) /
                    static_cast<double>(local.client_accuracy.size());
    ev.results.push_back(std::move(local));
  }

  const SyntheticDataset syn = parse_synthetic_csv(ctx.read_csv(kSynFedDeo));
  std::optional<SyntheticDataset> po;
  if (c.baseline_enabled("prompts_only")) po = parse_synthetic_csv(ctx.read_csv(kSynPromptsOnly));
  const std::uint64_t kl_seed = derive_seed(c, SeedTag::Metrics);
  for (const ClientDataset& client : clients) {
    const auto id = static_cast<std::uint64_t>(client.client_id);
    ClientKL row{client.client_id, estimate_kl(client.test.x, syn.for_client(client.client_id).x, c.kl_k,
                                               stream_seed(kl_seed, {id, 0})).value, std::nullopt};
    if (po)
      row.prompts_only =
          estimate_kl(client.test.x, restrict_to(*po, client.categories).x, c.kl_k, stream_seed(kl_seed, {id, 1})).value;
    ev.kl.push_back(row);
  }

  std::string results = csv_header(ctx.provenance) + "method,client_id,accuracy\n";
  for (const ResultsTable& t : ev.results)
    for (std::size_t n = 0; n < t.client_accuracy.size(); ++n)
      results += t.method + "," + std::to_string(clients[n].client_id) + "," + format_real(t.client_accuracy[n]) + "\n";
  ev.results_digest = sha256_hex(csv_body(results));
  ctx.write_text(kResults, results);

  std::string kl = csv_header(ctx.provenance) + "client_id,kl_feddeo,kl_prompts_only\n";
  for (const ClientKL& row : ev.kl)
    kl += std::to_string(row.client_id) + "," + format_real(row.feddeo) + "," +
          (row.prompts_only ? format_real(*row.prompts_only) : "") + "\n";
  ctx.write_text(kKL, kl);

  const double reference = static_cast<double>(ev.ledger.at("feddeo").parameters);
  std::string ledger = csv_header(ctx.provenance) + "method,parameters,uploaded_bytes,rounds,ratio_to_feddeo\n";
  Json ledger_json = Json::array();
  for (const CommRecord& r : ev.ledger.records()) {
    const double ratio = reference > 0 ? static_cast<double>(r.parameters) / reference : 0.0;
    ledger += r.method + "," + std::to_string(r.parameters) + "," + std::to_string(r.uploaded_bytes) + "," +
              std::to_string(r.rounds) + "," + format_real(ratio) + "\n";
    ledger_json.push_back({{"method", r.method},
                           {"parameters", r.parameters},
                           {"uploaded_bytes", r.uploaded_bytes},
                           {"rounds", r.rounds},
                           {"ratio_to_feddeo", ratio}});
  }
  ctx.write_text(kLedger, ledger);

  Json summary = provenance_json(ctx.provenance);
  summary["partition"] = to_string(c.partition);
  Json seeds;
  const std::pair<const char*, SeedTag> tags[] = {
      {"world", SeedTag::World},         {"partition", SeedTag::Partition},   {"corpus", SeedTag::Corpus},
      {"model_init", SeedTag::ModelInit}, {"style_table", SeedTag::StyleTable}, {"pretrain", SeedTag::Pretrain},
      {"clients", SeedTag::Clients},     {"generation", SeedTag::Generation}, {"prompts_only", SeedTag::PromptsOnly},
      {"classifier", SeedTag::Classifier}, {"fedavg", SeedTag::FedAvg},       {"metrics", SeedTag::Metrics}};
  for (const auto& [name, tag] : tags) seeds[name] = derive_seed(c, tag);
  summary["seeds"] = seeds;
  Json averages, per_client;
  for (const ResultsTable& t : ev.results) {
    averages[t.method] = t.average;
    per_client[t.method] = t.client_accuracy;
  }
  summary["averages"] = averages;
  summary["client_accuracy"] = per_client;
  Json kl_json{{"k", c.kl_k}};
  double mean_fed = 0.0, mean_po = 0.0;
  int improved = 0;
  for (const ClientKL& row : ev.kl) {
    mean_fed += row.feddeo / static_cast<double>(ev.kl.size());
    if (row.prompts_only) {
      mean_po += *row.prompts_only / static_cast<double>(ev.kl.size());
      improved += row.feddeo < *row.prompts_only;
    }
  }
  kl_json["mean_feddeo"] = mean_fed;
  if (po) {
    kl_json["mean_prompts_only"] = mean_po;
    kl_json["relative_reduction"] = mean_po > 0 ? (mean_po - mean_fed) / mean_po : 0.0;
    kl_json["clients_improved"] = improved;
  }
  summary["kl"] = kl_json;
  summary["ledger"] = ledger_json;
  summary["results_digest"] = ev.results_digest;
  ev.summary_digest = sha256_hex(summary.dump(2));
  summary["digest"] = ev.summary_digest;
  ctx.write_text(kSummary, summary.dump(2) + "\n");
  return ev;
}

void record_io(const fs::path& out, Stage stage, const StageIO& io) {
  const fs::path path = out / kIoManifest;
  Json manifest = fs::exists(path) ? Json::parse(read_text(path)) : Json::object();
  manifest[to_string(stage)] = Json{{"reads", io.reads}, {"writes", io.writes}};
  write_file_atomic(path, manifest.dump(2) + "\n");
}

bool up_to_date(const Context& ctx) {
  const fs::path marker = marker_path(ctx.out, ctx.stage);
  if (!fs::exists(marker) || read_text(marker) != stage_digest(ctx.config, ctx.stage)) return false;
  return std::all_of(ctx.io.writes.begin(), ctx.io.writes.end(),
                     [&](const std::string& rel) { return fs::exists(ctx.out / rel); });
}

void copy_pretrain(const Context& ctx, const fs::path& from) {
  const fs::path marker = marker_path(from, Stage::Pretrain);
  if (!fs::exists(marker) || read_text(marker) != stage_digest(ctx.config, Stage::Pretrain))
    throw StageError(Stage::Pretrain, "no matching pretrained model in " + from.string());
  for (const char* rel : {kWorld, kModel}) {
    if (!fs::exists(from / rel)) throw StageError(Stage::Pretrain, "missing " + (from / rel).string());
    write_file_atomic(ctx.output(rel), read_file(from / rel));
  }
}

}  // namespace

std::optional<Evaluation> run_stage(const ExperimentConfig& config, Stage stage, const RunOptions& options) {
  validate(config);
  const Context ctx(config, stage);
  std::ostream* log = options.log;
  if (options.resume && stage != Stage::Evaluate && up_to_date(ctx)) {
    if (log) *log << "[" << to_string(stage) << "] up to date, skipped\n";
    return std::nullopt;
  }
  const auto start = std::chrono::steady_clock::now();
  fs::create_directories(ctx.out / "stages");
  fs::remove(marker_path(ctx.out, stage));
  std::optional<Evaluation> result;
  try {
    switch (stage) {
      case Stage::Pretrain:
        if (options.reuse_pretrain && fs::absolute(*options.reuse_pretrain) != fs::absolute(ctx.out))
          copy_pretrain(ctx, *options.reuse_pretrain);
        else
          pretrain_stage(ctx);
        break;
      case Stage::TrainDescriptions: train_descriptions_stage(ctx); break;
      case Stage::Generate: generate_stage(ctx); break;
      case Stage::TrainAggregate: train_aggregate_stage(ctx); break;
      case Stage::Baselines: baselines_stage(ctx); break;
      case Stage::Evaluate: result = evaluate_stage(ctx); break;
    }
  } catch (const StageError&) {
    throw;
  } catch (const IntegrityError&) {
    throw;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
  record_io(ctx.out, stage, ctx.io);
  write_file_atomic(marker_path(ctx.out, stage), stage_digest(ctx.config, stage));
  if (log) {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    *log << "[" << to_string(stage) << "] done in " << secs << " s\n";
  }
  return result;
}

Evaluation run_pipeline(const ExperimentConfig& config, const RunOptions& options) {
  std::optional<Evaluation> ev;
  for (Stage stage : all_stages()) ev = run_stage(config, stage, options);
  return std::move(*ev);
}

SweepResult ablation_sweep(const ExperimentConfig& config, SweepKind kind, const std::vector<int>& values,
                           const RunOptions& options) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  validate(config);
  SweepResult result{kind, values, {}, 0.0};
  run_stage(config, Stage::Pretrain, options);

  RunOptions child = options;
  child.reuse_pretrain = config.out;
  std::vector<double> averages;
  for (int v : values) {
    ExperimentConfig c = config;
    c.out = config.out / (to_string(kind) + "_" + std::to_string(v));
    c.baselines.clear();
    (kind == SweepKind::R ? c.generation.R : c.client.epochs) = v;
    if (options.log) *options.log << "[sweep] " << to_string(kind) << "=" << v << "\n";
    Evaluation ev = run_pipeline(c, child);
    result.tables.push_back(ev.method("feddeo"));
    averages.push_back(result.tables.back().average);
  }
  const std::vector<double> xs(values.begin(), values.end());
  result.spearman_rho = values.size() > 1 ? spearman(xs, averages) : 0.0;

  const ExperimentConfig base = resolved(config);
  std::string csv = csv_header({config_digest(base), base.seed, "sweep"}) + to_string(kind) + ",client_id,accuracy\n";
  for (std::size_t i = 0; i < values.size(); ++i) {
    const ResultsTable& t = result.tables[i];
    for (std::size_t n = 0; n < t.client_accuracy.size(); ++n)
      csv += std::to_string(values[i]) + "," + std::to_string(n) + "," + format_real(t.client_accuracy[n]) + "\n";
    csv += std::to_string(values[i]) + ",average," + format_real(t.average) + "\n";
  }
  write_file_atomic(config.out / ("sweep_" + to_string(kind) + ".csv"), csv);
  return result;
}

}  // namespace feddeo
