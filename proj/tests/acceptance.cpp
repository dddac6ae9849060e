// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
#include "feddeo/checkpoint.hpp"
#include "feddeo/client.hpp"
#include "feddeo/config.hpp"
#include "feddeo/diffusion.hpp"
#include "feddeo/digest.hpp"
#include "feddeo/io.hpp"
#include "feddeo/metrics.hpp"
#include "feddeo/pipeline.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

using namespace feddeo;
namespace fs = std::filesystem;

namespace {

// tolerances and budgets
constexpr double kGradRelTol = 1e-4;
constexpr int kGradGraphs = 100;
constexpr double kGradSeconds = 30;
constexpr double kDenoiserMsdTol = 0.05;
constexpr double kDenoiserSeconds = 120;
constexpr double kDdimTol = 1e-10;
constexpr int kDdimDraws = 1000;
constexpr double kDdimSeconds = 5;
constexpr int kKlClientsImproved = 5;
constexpr double kKlMeanReduction = 0.20;
constexpr double kKlSeconds = 600;
constexpr double kAccuracyMargin = 0.03;
constexpr double kCeilingGap = 0.10;
constexpr double kAccuracySeconds = 900;
constexpr double kAblationSeconds = 1800;
constexpr double kReferenceRatio = 66.0;
constexpr double kReferenceRatioTol = 0.5;
constexpr double kKlCalibrationTol = 0.1;
constexpr int kKlCalibrationSamples = 2000;
constexpr double kKlCalibrationSeconds = 10;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

int failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
  std::printf("[%s] %2d %-26s %s\n", pass ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
  std::fflush(stdout);
  failures += !pass;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  const std::vector<std::uint8_t> b = read_file(p);
  return {b.begin(), b.end()};
}

// 1 ------------------------------------------------------------------------

/// Small graph with random shapes and a random chain of ops over b x h values.
struct RandomGraph {
  std::vector<Tensor> tensors;
  std::vector<int> ops;
  std::vector<int> ids;
  std::vector<int> labels;
  std::vector<double> scales;
  int loss = 0;

  explicit RandomGraph(std::uint64_t seed) {
    Rng rng(seed);
    auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
    const int b = pick(1, 4), d = pick(1, 4), h = pick(2, 5);
    tensors.reserve(6);
    tensors.emplace_back("x", gaussian_matrix(b, d, rng));
    tensors.emplace_back("w", gaussian_matrix(d, h, rng, 0.7));
    tensors.emplace_back("b", gaussian_matrix(1, h, rng, 0.3));
    tensors.emplace_back("y", gaussian_matrix(b, h, rng));
    tensors.emplace_back("table", gaussian_matrix(5, h, rng));
    tensors.emplace_back("w2", gaussian_matrix(2 * h, h, rng, 0.5));
    const int n = pick(1, 5);
    for (int i = 0; i < n; ++i) {
      ops.push_back(pick(0, 7));
      scales.push_back(std::uniform_real_distribution<double>(-2, 2)(rng));
    }
    for (int i = 0; i < b; ++i) {
      ids.push_back(pick(0, 4));
      labels.push_back(pick(0, h - 1));
    }
    loss = pick(0, 2);
  }

  std::vector<Tensor*> params() {
    std::vector<Tensor*> out;
    for (Tensor& t : tensors) out.push_back(&t);
    return out;
  }

  Var build(Graph& g) const {
    Var x = g.param(tensors[0]), w = g.param(tensors[1]), bias = g.param(tensors[2]);
    Var y = g.param(tensors[3]), table = g.param(tensors[4]), w2 = g.param(tensors[5]);
    Var v = ops.front() % 2 == 0 ? g.affine(x, w, bias) : g.add(g.matmul(x, w), g.embedding(bias, std::vector<int>(ids.size(), 0)));
    for (std::size_t i = 0; i < ops.size(); ++i) {
      switch (ops[i]) {
        case 0: v = g.silu(v); break;
        case 1: v = g.tanh(v); break;
        case 2: v = g.add(v, y); break;
        case 3: v = g.sub(y, v); break;
        case 4: v = g.mul(v, y); break;
        case 5: v = g.scale(v, scales[i]); break;
        case 6: v = g.add(v, g.embedding(table, ids)); break;
        default: {
          const Var parts[] = {v, g.tanh(y)};
          v = g.matmul(g.concat(parts), w2);
        }
      }
    }
    switch (loss) {
      case 0: return g.sum(v);
      case 1: return g.mse(v, g.scale(y, 0.5));
      default: return g.softmax_cross_entropy(v, labels);
    }
  }
};

void gradient_correctness() {
  const auto start = Clock::now();
  double worst = 0.0;
  std::size_t entries = 0;
  for (int i = 0; i < kGradGraphs; ++i) {
    RandomGraph rg(stream_seed(1, {static_cast<std::uint64_t>(i)}));
    const std::vector<Tensor*> params = rg.params();
    const GradientCheckReport r = gradient_check([&](Graph& g) { return rg.build(g); }, params, kGradRelTol);
    worst = std::max(worst, r.max_relative_error);
    entries += r.entries_checked;
  }
  const double secs = seconds_since(start);
  report(1, "gradient correctness", worst < kGradRelTol && secs < kGradSeconds,
         fmt("max rel err %.2e over %d graphs (%zu entries), tol %.0e; %.1f s", worst, kGradGraphs, entries,
             kGradRelTol, secs));
}

// 2 ------------------------------------------------------------------------

void analytic_denoiser(const ExperimentConfig& base) {
  const auto start = Clock::now();
  const VarianceSchedule sched = make_schedule(base.T, base.beta_min, base.beta_max, 0.0);
  NoisePredictorConfig mc = base.model;
  mc.data_dim = 2;
  mc.num_classes = 1;
  NoisePredictor model(mc, 5);
  Rng rng(6);
  CaptionedSamples data{gaussian_matrix(4096, 2, rng), std::vector<int>(4096, 0), std::vector<int>(4096, -1)};
  pretrain_dm(model, sched, data, {.epochs = 60, .batch_size = 128, .adam = {.learning_rate = 2e-3},
                                   .final_lr_fraction = 0.05}, 7);
  model.freeze();

  Matrix grid(81, 2);
  for (int i = 0; i < 9; ++i)
    for (int j = 0; j < 9; ++j) grid.row(i * 9 + j) << -2.0 + 0.5 * i, -2.0 + 0.5 * j;
  double total = 0.0;
  int count = 0;
  for (int t : {1, base.T / 10, base.T / 4, base.T / 2, 3 * base.T / 4, base.T}) {
    const Matrix pred = predict_noise(model, grid, t, model.class_condition(0));
    const Matrix oracle = std::sqrt(1.0 - sched.alpha_bar(t)) * grid;
    total += (pred - oracle).squaredNorm();
    count += static_cast<int>(grid.size());
  }
  const double msd = total / count;
  const double secs = seconds_since(start);
  report(2, "analytic denoiser", msd < kDenoiserMsdTol && secs < kDenoiserSeconds,
         fmt("MSD %.4f on a 9x9 grid x 6 timesteps, tol %.2f; %.1f s", msd, kDenoiserMsdTol, secs));
}

// 3 ------------------------------------------------------------------------

void ddim_identity(const ExperimentConfig& base) {
  const auto start = Clock::now();
  const VarianceSchedule sched = make_schedule(base.T, base.beta_min, base.beta_max, 0.0);
  Rng rng(8);
  std::uniform_int_distribution<int> draw_t(1, sched.T());
  double worst = 0.0;
  for (int i = 0; i < kDdimDraws; ++i) {
    const int t = draw_t(rng);
    const Matrix x0 = gaussian_matrix(1, base.world.dim, rng, 2.0);
    const Matrix eps = gaussian_matrix(1, base.world.dim, rng);
    const Matrix prev = ddim_step(forward_noise(x0, eps, t, sched), eps, t, sched, Matrix());
    const Matrix expected = t == 1 ? x0 : forward_noise(x0, eps, t - 1, sched);
    worst = std::max(worst, (prev - expected).cwiseAbs().maxCoeff());
  }
  const double secs = seconds_since(start);
  report(3, "DDIM identity", worst < kDdimTol && secs < kDdimSeconds,
         fmt("max abs err %.2e over %d draws, tol %.0e; %.2f s", worst, kDdimDraws, kDdimTol, secs));
}

// 4 ------------------------------------------------------------------------

/// The frozen model in `dir` trains every client of clients.csv again in
/// memory and must keep its digest; uploads and the checkpoint must agree.
bool freeze_holds(const fs::path& dir, const ExperimentConfig& config, std::string& detail) {
  const Checkpoint ckpt = load_checkpoint(dir / "dm.fdeo");
  const NoisePredictor model = model_from_checkpoint(ckpt);
  const std::string before = model.digest();
  const VarianceSchedule sched = schedule_from_checkpoint(ckpt, config.eta);
  for (ClientDataset& c : parse_clients_csv(slurp(dir / "clients.csv"))) {
    ClientState s = make_client(std::move(c), model);
    train_descriptions(s, model, sched, config.client, 1);
  }
  const nlohmann::json manifest = nlohmann::json::parse(slurp(dir / "uploads/manifest.json"));
  const bool ok = model.digest() == before && before == ckpt.meta("model_digest") &&
                  manifest["model_digest"] == before;
  if (!ok) detail += " mismatch in " + dir.string();
  return ok;
}

// 5, 6 ----------------------------------------------------------------------

void kl_consequence(const Evaluation& ev, double secs) {
  int improved = 0;
  double fd = 0.0, po = 0.0;
  for (const ClientKL& row : ev.kl) {
    improved += row.prompts_only && row.feddeo < *row.prompts_only;
    fd += row.feddeo;
    po += row.prompts_only.value_or(0.0);
  }
  const double reduction = po > 0 ? (po - fd) / po : 0.0;
  report(5, "KL FedDEO vs prompts-only",
         improved >= kKlClientsImproved && reduction >= kKlMeanReduction && secs < kKlSeconds,
         fmt("%d/%zu clients improved (need %d), mean KL %.3f vs %.3f, reduction %.1f%% (need %.0f%%); %.0f s",
             improved, ev.kl.size(), kKlClientsImproved, fd / ev.kl.size(), po / ev.kl.size(), 100 * reduction,
             100 * kKlMeanReduction, secs));
}

void accuracy_ordering(const Evaluation& fs_ev, const Evaluation& ls_ev, double secs) {
  bool ok = secs < kAccuracySeconds;
  std::string detail;
  for (const auto& [name, ev] : {std::pair{"feature", &fs_ev}, std::pair{"label", &ls_ev}}) {
    const double fd = ev->method("feddeo").average;
    const double po = ev->method("prompts_only").average;
    const double ceil = ev->method("ceiling").average;
    ok = ok && fd - po >= kAccuracyMargin && ceil - fd <= kCeilingGap;
    detail += fmt("%s: FedDEO %.3f PO %.3f Ceiling %.3f; ", name, fd, po, ceil);
  }
  report(6, "accuracy ordering", ok,
         detail + fmt("margin >= %.2f, gap <= %.2f; %.0f s", kAccuracyMargin, kCeilingGap, secs));
}

// 8 ------------------------------------------------------------------------

void communication(const fs::path& dir, const ExperimentConfig& config, const Evaluation& ev) {
  const ExperimentConfig c = resolved(config);
  const nlohmann::json manifest = nlohmann::json::parse(slurp(dir / "uploads/manifest.json"));
  std::uint64_t expected = 0;
  bool sizes = true;
  for (const auto& client : manifest["clients"]) {
    const std::uint64_t cats = client["categories"].size();
    expected += cats * static_cast<std::uint64_t>(c.model.cond_dim);
    sizes = sizes && fs::file_size(dir / client["file"].get<std::string>()) ==
                         UploadPayload::kHeaderBytes + cats * (8 + 4 * static_cast<std::uint64_t>(c.model.cond_dim));
  }
  const CommRecord& fd = ev.ledger.at("feddeo");
  const CommRecord& avg = ev.ledger.at("fedavg");
  const double ratio = ReferenceUploads::kFedAvgM / ReferenceUploads::kFedDeoM;
  const bool ok = fd.parameters == expected && fd.uploaded_bytes == 4 * expected && sizes &&
                  fd.parameters < avg.parameters && avg.rounds == 20 &&
                  std::abs(ReferenceUploads::kFedAvgRoundM * ReferenceUploads::kFedAvgRounds -
                           ReferenceUploads::kFedAvgM) < 1e-9 &&
                  std::abs(ratio - kReferenceRatio) < kReferenceRatioTol;
  report(8, "communication ledger", ok,
         fmt("FedDEO %llu params (N*|C_n|*cond_dim = %llu), FedAvg %llu over %d rounds; reference %.1f/%.2f = "
             "%.2fx (%.0f +- %.1f)",
             static_cast<unsigned long long>(fd.parameters), static_cast<unsigned long long>(expected),
             static_cast<unsigned long long>(avg.parameters), avg.rounds, ReferenceUploads::kFedAvgM,
             ReferenceUploads::kFedDeoM, ratio, kReferenceRatio, kReferenceRatioTol));
}

// 10 -----------------------------------------------------------------------

void kl_calibration() {
  const auto start = Clock::now();
  auto normal1 = [](double mean, double sd) {
    Gaussian<double> g;
    g.mean = Eigen::VectorXd::Constant(1, mean);
    g.covariance = Eigen::MatrixXd::Constant(1, 1, sd * sd);
    return g;
  };
  const std::pair<Gaussian<double>, Gaussian<double>> pairs[] = {
      {normal1(0, 1), normal1(0, 1)}, {normal1(0, 1), normal1(1, 1)}, {normal1(0, 1), normal1(std::sqrt(5.0), 2)}};
  const double expected[] = {0.0, 0.5, 0.9431};
  bool ok = true;
  std::string detail;
  Rng rng(9);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& [p, q] = pairs[i];
    const double closed = estimate_kl(p, q).value;
    const Matrix xp = (gaussian_matrix(kKlCalibrationSamples, 1, rng, std::sqrt(p.covariance(0, 0))).array() +
                       p.mean[0]).matrix();
    const Matrix xq = (gaussian_matrix(kKlCalibrationSamples, 1, rng, std::sqrt(q.covariance(0, 0))).array() +
                       q.mean[0]).matrix();
    const double knn = estimate_kl(xp, xq, 5).value;
    ok = ok && std::abs(closed - expected[i]) < 1e-4 && std::abs(knn - closed) <= kKlCalibrationTol;
    detail += fmt("%.4f->%.4f ", closed, knn);
  }
  const double secs = seconds_since(start);
  report(10, "KL calibration", ok && secs < kKlCalibrationSeconds,
         detail + fmt("(tol %.1f nats, n=%d); %.2f s", kKlCalibrationTol, kKlCalibrationSamples, secs));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string out = "acceptance_out";
  bool verbose = false;
  app.add_option("--out", out, "working directory");
  app.add_flag("-v,--verbose", verbose, "stage progress on stderr");
  CLI11_PARSE(app, argc, argv);

  const ExperimentConfig defaults;
  RunOptions options;
  options.log = verbose ? &std::cerr : nullptr;

  gradient_correctness();
  analytic_denoiser(defaults);
  ddim_identity(defaults);

  try {
    ExperimentConfig fs_config;
    fs_config.baselines = {"prompts_only", "ceiling", "fedavg"};
    fs_config.out = fs::path(out) / "feature_skew";
    fs::remove_all(fs_config.out);
    auto start = Clock::now();
    const Evaluation fs_ev = run_pipeline(fs_config, options);
    const double fs_secs = seconds_since(start);

    ExperimentConfig ls_config = fs_config;
    ls_config.partition = PartitionKind::LabelSkew;
    ls_config.out = fs::path(out) / "label_skew";
    fs::remove_all(ls_config.out);
    RunOptions reuse = options;
    reuse.reuse_pretrain = fs_config.out;
    start = Clock::now();
    const Evaluation ls_ev = run_pipeline(ls_config, reuse);
    const double ls_secs = seconds_since(start);

    ExperimentConfig sweep_config = fs_config;
    sweep_config.out = fs::path(out) / "ablation";
    fs::remove_all(sweep_config.out);
    start = Clock::now();
    const SweepResult r_sweep = ablation_sweep(sweep_config, SweepKind::R, {10, 30, 50}, reuse);
    const SweepResult s_sweep = ablation_sweep(sweep_config, SweepKind::S, {1, 10, 20}, reuse);
    const double sweep_secs = seconds_since(start);

    ExperimentConfig again = fs_config;
    again.out = fs::path(out) / "feature_skew_again";
    fs::remove_all(again.out);
    const Evaluation again_ev = run_pipeline(again, options);

    std::string freeze_detail;
    bool frozen = true;
    for (const fs::path& dir : {fs_config.out, ls_config.out, again.out, sweep_config.out / "R_30",
                                sweep_config.out / "S_20"})
      frozen = freeze_holds(dir, fs_config, freeze_detail) && frozen;
    report(4, "freeze integrity", frozen, "model digest unchanged by client training in 5 runs" + freeze_detail);

    kl_consequence(fs_ev, fs_secs);
    accuracy_ordering(fs_ev, ls_ev, fs_secs + ls_secs);

    std::string sweep_detail;
    for (const SweepResult* s : {&r_sweep, &s_sweep}) {
      sweep_detail += to_string(s->kind) + ":";
      for (std::size_t i = 0; i < s->values.size(); ++i)
        sweep_detail += fmt(" %d->%.3f", s->values[i], s->tables[i].average);
      sweep_detail += fmt(" rho %.2f; ", s->spearman_rho);
    }
    report(7, "ablation directions",
           r_sweep.spearman_rho > 0 && s_sweep.spearman_rho > 0 && sweep_secs < kAblationSeconds,
           sweep_detail + fmt("%.0f s", sweep_secs));

    communication(fs_config.out, fs_config, fs_ev);

    const bool same_csv = csv_body(slurp(fs_config.out / "results.csv")) == csv_body(slurp(again.out / "results.csv"));
    report(9, "determinism", same_csv && fs_ev.summary_digest == again_ev.summary_digest,
           fmt("results.csv bodies %s, summary digest %.12s vs %.12s", same_csv ? "identical" : "differ",
               fs_ev.summary_digest.c_str(), again_ev.summary_digest.c_str()));
  } catch (const std::exception& e) {
    for (int id : {4, 5, 6, 7, 8, 9}) report(id, "pipeline", false, std::string("aborted: ") + e.what());
  }

  kl_calibration();
  std::printf("%s: %d criteria failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
