#include "feddeo/server.hpp"

#include "feddeo/digest.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace feddeo {

LabeledSamples SyntheticDataset::for_client(int client) const {
  LabeledSamples out;
  std::vector<Eigen::Index> rows;
  for (std::size_t i = 0; i < clients.size(); ++i)
    if (clients[i] == client) rows.push_back(static_cast<Eigen::Index>(i));
  out.x.resize(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.x.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
    out.labels.push_back(labels[static_cast<std::size_t>(rows[i])]);
    out.domains.push_back(-1);
  }
  return out;
}

std::string SyntheticDataset::digest() const {
  ByteWriter w;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const auto k = static_cast<std::size_t>(i);
    w.u32(static_cast<std::uint32_t>(clients[k]));
    w.u32(static_cast<std::uint32_t>(labels[k]));
    w.u32(static_cast<std::uint32_t>(replicates[k]));
    for (Eigen::Index j = 0; j < x.cols(); ++j) w.f64(x(i, j));
  }
  return sha256_hex(w.data());
}

namespace {

void append_block(SyntheticDataset& out, const Matrix& block, int label, int client) {
  const Eigen::Index old = out.x.rows();
  out.x.conservativeResize(old + block.rows(), block.cols());
  out.x.bottomRows(block.rows()) = block;
  for (Eigen::Index i = 0; i < block.rows(); ++i) {
    out.labels.push_back(label);
    out.clients.push_back(client);
    out.replicates.push_back(static_cast<int>(i) + 1);
  }
}

}  // namespace

SyntheticDataset generate_synthetic(const NoisePredictor& model, std::span<const UploadPayload> payloads,
                                    const VarianceSchedule& sched, const GenerationOptions& options,
                                    std::uint64_t seed) {
  if (options.R < 1) throw std::invalid_argument("generate_synthetic: R must be >= 1");
  model.verify_integrity();
  const int M = model.config().num_classes;
  for (const UploadPayload& p : payloads) {
    if (!p.model_digest.empty() && p.model_digest != model.frozen_digest())
      throw IntegrityError("generate_synthetic: client " + std::to_string(p.client_id) +
                           " trained against model " + p.model_digest + ", server holds " +
                           model.frozen_digest());
    for (const UploadEntry& e : p.entries) {
      if (e.category >= static_cast<std::uint32_t>(M))
        throw std::out_of_range("generate_synthetic: client " + std::to_string(p.client_id) +
                                " uploaded category " + std::to_string(e.category) + " >= M=" + std::to_string(M));
      if (e.values.size() != static_cast<std::size_t>(model.config().cond_dim))
        throw ShapeError("generate_synthetic", "description length " + std::to_string(e.values.size()) +
                                                   " vs cond_dim " + std::to_string(model.config().cond_dim));
    }
  }

  SyntheticDataset out;
  out.x.resize(0, model.config().data_dim);
  for (const UploadPayload& p : payloads) {
    for (const UploadEntry& e : p.entries) {
      const int c = static_cast<int>(e.category);
      const Matrix block = sample(model, model.class_condition(c), to_condition(e), options.R, sched,
                                  stream_seed(seed, {p.client_id, e.category}), options.weights);
      append_block(out, block, c, static_cast<int>(p.client_id));
    }
  }
  return out;
}

SyntheticDataset generate_prompts_only(const NoisePredictor& model, std::span<const int> categories,
                                       const VarianceSchedule& sched, int R, std::uint64_t seed) {
  if (R < 1) throw std::invalid_argument("generate_prompts_only: R must be >= 1");
  model.verify_integrity();
  SyntheticDataset out;
  out.x.resize(0, model.config().data_dim);
  for (int c : categories) {
    const GuidanceTerm terms[] = {{model.class_condition(c), 1.0}};
    append_block(out, sample(model, terms, R, sched, stream_seed(seed, {0x70726f6d7074ULL, static_cast<std::uint64_t>(c)})),
                 c, -1);
  }
  return out;
}

Classifier::Classifier(int dim, int num_classes, int hidden, std::uint64_t seed)
    : dim_(dim), num_classes_(num_classes), hidden_(hidden) {
  if (dim < 1 || num_classes < 1 || hidden < 1) throw std::invalid_argument("Classifier: sizes must be positive");
  Rng rng(seed);
  const int sizes[] = {dim, hidden, hidden, num_classes};
  for (int l = 0; l < 3; ++l) {
    params_.emplace_back("clf.layer" + std::to_string(l) + ".weight",
                         gaussian_matrix(sizes[l], sizes[l + 1], rng, 1.0 / std::sqrt(sizes[l])));
    params_.emplace_back("clf.layer" + std::to_string(l) + ".bias", Matrix::Zero(1, sizes[l + 1]));
  }
}

Var Classifier::forward(Graph& g, const Matrix& x) const {
  if (x.cols() != dim_)
    throw ShapeError("classifier", "input " + dims_string(x.rows(), x.cols()) + " vs dim " + std::to_string(dim_));
  Var h = g.constant(x);
  for (int l = 0; l < 3; ++l) {
    h = g.affine(h, g.param(params_[2 * l]), g.param(params_[2 * l + 1]));
    if (l < 2) h = g.silu(h);
  }
  return h;
}

Matrix Classifier::logits(const Matrix& x) const {
  Graph g;
  return g.value(forward(g, x));
}

std::vector<int> Classifier::predict(const Matrix& x) const {
  const Matrix z = logits(x);
  std::vector<int> out(static_cast<std::size_t>(z.rows()));
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    int best = 0;
    for (Eigen::Index j = 1; j < z.cols(); ++j)
      if (z(i, j) > z(i, best)) best = static_cast<int>(j);
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

std::vector<const Tensor*> Classifier::parameters() const {
  std::vector<const Tensor*> out;
  for (const Tensor& t : params_) out.push_back(&t);
  return out;
}

std::vector<Tensor*> Classifier::mutable_parameters() {
  std::vector<Tensor*> out;
  for (Tensor& t : params_) out.push_back(&t);
  return out;
}

std::uint64_t Classifier::parameter_count() const {
  std::uint64_t n = 0;
  for (const Tensor& t : params_) n += static_cast<std::uint64_t>(t.size());
  return n;
}

TrainTrace fit_classifier(Classifier& clf, const Matrix& x, std::span<const int> labels,
                          const ClassifierConfig& config, std::uint64_t seed, int max_epochs) {
  const auto n = static_cast<std::size_t>(x.rows());
  if (n == 0) throw std::invalid_argument("fit_classifier: empty dataset");
  if (labels.size() != n) throw ShapeError("fit_classifier", "labels do not match samples");
  std::vector<Tensor*> params = clf.mutable_parameters();
  AdamState adam(config.adam);
  Rng rng(seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t batch = static_cast<std::size_t>(std::max(1, config.batch_size));

  TrainTrace trace;
  for (int epoch = 0; epoch < max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t b = std::min(batch, n - start);
      Matrix xb(static_cast<Eigen::Index>(b), x.cols());
      std::vector<int> yb(b);
      for (std::size_t i = 0; i < b; ++i) {
        xb.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(order[start + i]));
        yb[i] = labels[order[start + i]];
      }
      Graph g;
      Var loss = g.softmax_cross_entropy(clf.forward(g, xb), std::move(yb));
      total += g.scalar(loss) * static_cast<double>(b);
      GradientMap grads = g.backward(loss);
      adam.step(params, grads);
    }
    trace.epoch_loss.push_back(total / static_cast<double>(n));
    const auto e = trace.epoch_loss.size();
    if (config.patience > 0 && e > static_cast<std::size_t>(config.patience) &&
        trace.epoch_loss[e - 1 - static_cast<std::size_t>(config.patience)] - trace.epoch_loss[e - 1] <
            config.convergence_tolerance)
      break;
  }
  return trace;
}

ClassifierTraining train_aggregated(const SyntheticDataset& data, int num_classes, const ClassifierConfig& config,
                                    std::uint64_t seed) {
  if (data.size() == 0) throw std::invalid_argument("train_aggregated: empty synthetic dataset");
  Classifier clf(static_cast<int>(data.x.cols()), num_classes, config.hidden, stream_seed(seed, {1}));
  TrainTrace trace = fit_classifier(clf, data.x, data.labels, config, stream_seed(seed, {2}), config.max_epochs);
  return {std::move(clf), std::move(trace)};
}

ClassifierTraining train_prompts_only(const NoisePredictor& model, std::span<const int> categories, int R,
                                      const VarianceSchedule& sched, std::uint64_t seed,
                                      const ClassifierConfig& config, CommLedger* ledger,
                                      SyntheticDataset* generated) {
  SyntheticDataset data = generate_prompts_only(model, categories, sched, R, stream_seed(seed, {0}));
  ClassifierTraining out = train_aggregated(data, model.config().num_classes, config, stream_seed(seed, {1}));
  if (ledger) ledger->record("prompts_only", 0, 0);
  if (generated) *generated = std::move(data);
  return out;
}

namespace {

LabeledSamples pooled_train(std::span<const ClientDataset> clients) {
  LabeledSamples pool;
  Eigen::Index total = 0;
  for (const ClientDataset& c : clients) total += c.train.size();
  if (total == 0) throw std::invalid_argument("train_centralized: union of client data is empty");
  pool.x.resize(total, clients.front().train.x.cols());
  Eigen::Index row = 0;
  for (const ClientDataset& c : clients) {
    pool.x.middleRows(row, c.train.size()) = c.train.x;
    row += c.train.size();
    pool.labels.insert(pool.labels.end(), c.train.labels.begin(), c.train.labels.end());
    pool.domains.insert(pool.domains.end(), c.train.domains.begin(), c.train.domains.end());
  }
  return pool;
}

}  // namespace

ClassifierTraining train_centralized(std::span<const ClientDataset> clients, int num_classes,
                                     const ClassifierConfig& config, std::uint64_t seed, CommLedger* ledger) {
  if (clients.empty()) throw std::invalid_argument("train_centralized: no clients");
  const LabeledSamples pool = pooled_train(clients);
  Classifier clf(static_cast<int>(pool.x.cols()), num_classes, config.hidden, stream_seed(seed, {1}));
  TrainTrace trace = fit_classifier(clf, pool.x, pool.labels, config, stream_seed(seed, {2}), config.max_epochs);
  if (ledger) ledger->record("ceiling", static_cast<std::uint64_t>(pool.x.size()), 1);
  return {std::move(clf), std::move(trace)};
}

ClassifierTraining train_local(const ClientDataset& client, int num_classes, const ClassifierConfig& config,
                               std::uint64_t seed) {
  if (client.train.size() == 0) throw std::invalid_argument("train_local: client has no data");
  Classifier clf(static_cast<int>(client.train.x.cols()), num_classes, config.hidden, stream_seed(seed, {1}));
  TrainTrace trace = fit_classifier(clf, client.train.x, client.train.labels, config,
                                    stream_seed(seed, {2, static_cast<std::uint64_t>(client.client_id)}),
                                    config.max_epochs);
  return {std::move(clf), std::move(trace)};
}

ClassifierTraining train_fedavg(std::span<const ClientDataset> clients, int num_classes,
                                const FedAvgOptions& options, const ClassifierConfig& config, std::uint64_t seed,
                                CommLedger* ledger) {
  if (options.rounds < 1) throw std::invalid_argument("train_fedavg: rounds must be >= 1");
  if (options.local_epochs < 1) throw std::invalid_argument("train_fedavg: local_epochs must be >= 1");
  if (clients.empty()) throw std::invalid_argument("train_fedavg: no clients");
  const int dim = static_cast<int>(clients.front().train.x.cols());
  Classifier global(dim, num_classes, config.hidden, stream_seed(seed, {1}));
  double total = 0.0;
  for (const ClientDataset& c : clients) total += static_cast<double>(c.train.size());
  if (total == 0) throw std::invalid_argument("train_fedavg: clients hold no data");

  ClassifierConfig local_config = config;
  local_config.patience = 0;
  TrainTrace trace;
  for (int round = 0; round < options.rounds; ++round) {
    std::vector<Matrix> sums;
    for (const Tensor* p : global.parameters()) sums.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    double round_loss = 0.0;
    for (const ClientDataset& c : clients) {
      if (c.train.size() == 0) continue;
      Classifier local = global;
      const std::uint64_t stream = options.shared_client_streams
                                       ? stream_seed(seed, {3, static_cast<std::uint64_t>(round)})
                                       : stream_seed(seed, {3, static_cast<std::uint64_t>(round),
                                                            static_cast<std::uint64_t>(c.client_id)});
      const TrainTrace t = fit_classifier(local, c.train.x, c.train.labels, local_config, stream, options.local_epochs);
      const double w = static_cast<double>(c.train.size()) / total;
      round_loss += w * t.epoch_loss.back();
      const auto lp = local.parameters();
      for (std::size_t i = 0; i < lp.size(); ++i) sums[i] += w * lp[i]->value;
    }
    const auto gp = global.mutable_parameters();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i]->value = sums[i];
    trace.epoch_loss.push_back(round_loss);
  }
  if (ledger)
    ledger->record("fedavg",
                   static_cast<std::uint64_t>(options.rounds) * clients.size() * global.parameter_count(),
                   options.rounds);
  return {std::move(global), std::move(trace)};
}

}  // namespace feddeo
