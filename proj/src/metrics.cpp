#include "feddeo/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <stdexcept>

namespace feddeo {

ResultsTable evaluate_predictor(const Predictor& predict, std::span<const ClientDataset> clients,
                                const std::string& method) {
  ResultsTable table;
  table.method = method;
  for (const ClientDataset& c : clients) {
    if (c.test.size() == 0)
      throw std::invalid_argument("evaluate: client " + std::to_string(c.client_id) + " has an empty test split");
    const std::vector<int> pred = predict(c.test.x);
    if (pred.size() != c.test.labels.size()) throw ShapeError("evaluate", "prediction count mismatch");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == c.test.labels[i];
    table.client_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(pred.size()));
  }
  if (!table.client_accuracy.empty())
    table.average = std::accumulate(table.client_accuracy.begin(), table.client_accuracy.end(), 0.0) /
                    static_cast<double>(table.client_accuracy.size());
  return table;
}

ResultsTable evaluate_classifier(const Classifier& clf, std::span<const ClientDataset> clients,
                                 const std::string& method) {
  for (const ClientDataset& c : clients)
    if (c.test.x.cols() != clf.dim())
      throw ShapeError("evaluate_classifier", "client " + std::to_string(c.client_id) + " data dim " +
                                                  std::to_string(c.test.x.cols()) + " vs classifier dim " +
                                                  std::to_string(clf.dim()));
  return evaluate_predictor([&clf](const Matrix& x) { return clf.predict(x); }, clients, method);
}

namespace {

/// k-th smallest distance from `point` to rows of `set`, skipping row `skip`.
double kth_distance(const Matrix& set, const RowVector& point, int k, Eigen::Index skip, std::vector<double>& scratch) {
  scratch.clear();
  for (Eigen::Index j = 0; j < set.rows(); ++j)
    if (j != skip) scratch.push_back((set.row(j) - point).squaredNorm());
  std::nth_element(scratch.begin(), scratch.begin() + (k - 1), scratch.end());
  return std::sqrt(scratch[static_cast<std::size_t>(k - 1)]);
}

}  // namespace

KLEstimate estimate_kl(const Matrix& p_in, const Matrix& q_in, int k, std::uint64_t jitter_seed) {
  if (k < 1) throw std::invalid_argument("estimate_kl: k must be >= 1");
  if (p_in.cols() != q_in.cols()) throw ShapeError("estimate_kl", "sample dims differ");
  if (p_in.rows() < k + 1 || q_in.rows() < k + 1)
    throw std::invalid_argument("estimate_kl: need at least k+1 samples in each set");

  Matrix p = p_in;
  Matrix q = q_in;
  KLEstimate est{0.0, KLEstimatorKind::Knn, p.rows(), q.rows(), k, false};
  const auto n = static_cast<double>(p.rows());
  const auto m = static_cast<double>(q.rows());
  const auto d = static_cast<double>(p.cols());
  std::vector<double> scratch;

  for (int attempt = 0; attempt < 2; ++attempt) {
    double acc = 0.0;
    bool degenerate = false;
    for (Eigen::Index i = 0; i < p.rows() && !degenerate; ++i) {
      const RowVector point = p.row(i);
      const double rho = kth_distance(p, point, k, i, scratch);
      const double nu = kth_distance(q, point, k, -1, scratch);
      if (rho <= 0.0 || nu <= 0.0) {
        degenerate = true;
        break;
      }
      acc += std::log(nu / rho);
    }
    if (!degenerate) {
      est.value = d / n * acc + std::log(m / (n - 1.0));
      return est;
    }
    if (attempt == 0) {
      std::cerr << "warning: estimate_kl: duplicate points, applying 1e-9 jitter\n";
      Rng rng(jitter_seed);
      p += gaussian_matrix(p.rows(), p.cols(), rng, 1e-9);
      q += gaussian_matrix(q.rows(), q.cols(), rng, 1e-9);
      est.jittered = true;
    }
  }
  throw std::runtime_error("estimate_kl: degenerate samples even after jitter");
}

KLEstimate estimate_kl(const Gaussian<double>& p, const Gaussian<double>& q) {
  return {kl_divergence(p, q), KLEstimatorKind::ClosedForm, 0, 0, 0, false};
}

namespace {

std::vector<double> ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("spearman: need two equal-length series");
  const std::vector<double> ra = ranks(a);
  const std::vector<double> rb = ranks(b);
  const Eigen::Map<const Vector> x(ra.data(), static_cast<Eigen::Index>(ra.size()));
  const Eigen::Map<const Vector> y(rb.data(), static_cast<Eigen::Index>(rb.size()));
  const Vector xc = x.array() - x.mean();
  const Vector yc = y.array() - y.mean();
  const double denom = std::sqrt(xc.squaredNorm() * yc.squaredNorm());
  return denom == 0.0 ? 0.0 : xc.dot(yc) / denom;
}

std::vector<KLCurvePoint> kl_vs_training(const NoisePredictor& model, const VarianceSchedule& sched,
                                         const ClientDataset& client, std::span<const int> epochs,
                                         const KLSweepOptions& options, std::uint64_t seed) {
  std::vector<KLCurvePoint> curve;
  for (int s : epochs) {
    ClientState state = make_client(client, model);
    DescriptionTrainingOptions train = options.training;
    train.epochs = s;
    train_descriptions(state, model, sched, train, stream_seed(seed, {1}));
    const UploadPayload payload = package_upload(state);
    const SyntheticDataset synth =
        generate_synthetic(model, std::span(&payload, 1), sched, options.generation, stream_seed(seed, {2}));
    curve.push_back({s, estimate_kl(client.test.x, synth.x, options.k, stream_seed(seed, {3}))});
  }
  return curve;
}

std::vector<CommComparison> communication_report(const CommLedger& ledger, const std::string& reference) {
  if (ledger.records().size() < 2) throw std::invalid_argument("communication_report: need at least two methods");
  const double ref = static_cast<double>(ledger.at(reference).parameters);
  std::vector<CommComparison> out;
  for (const CommRecord& r : ledger.records())
    out.push_back({r.method, r.parameters, r.uploaded_bytes, r.rounds,
                   ref > 0 ? static_cast<double>(r.parameters) / ref : 0.0});
  return out;
}

}  // namespace feddeo
