#include "feddeo/digest.hpp"
#include "feddeo/server.hpp"

#include <gtest/gtest.h>

#include <algorithm>

using namespace feddeo;

namespace {

NoisePredictor frozen_model() {
  NoisePredictor m({.data_dim = 2, .num_classes = 4, .hidden = 16, .hidden_layers = 2, .time_dim = 8, .cond_dim = 3},
                   31);
  m.freeze();
  return m;
}

UploadPayload payload(const NoisePredictor& model, std::uint32_t client, std::vector<std::uint32_t> cats) {
  UploadPayload p;
  p.client_id = client;
  p.model_digest = model.frozen_digest();
  for (std::uint32_t c : cats) {
    UploadEntry e{c, {}};
    for (int i = 0; i < 3; ++i) e.values.push_back(0.1f * static_cast<float>(c + client + i));
    p.entries.push_back(e);
  }
  return p;
}

ClientDataset blobs(int id, int per_class, std::uint64_t seed) {
  ClientDataset c;
  c.client_id = id;
  c.categories = {0, 1, 2};
  Rng rng(seed);
  for (int k = 0; k < 3; ++k) {
    Matrix x = gaussian_matrix(per_class, 2, rng, 0.2);
    x.col(k % 2).array() += 2.0 * (k - 1);
    c.train.append(x, k, 0);
    Matrix t = gaussian_matrix(10, 2, rng, 0.2);
    t.col(k % 2).array() += 2.0 * (k - 1);
    c.test.append(t, k, 0);
  }
  return c;
}

double accuracy(const Classifier& clf, const LabeledSamples& s) {
  const std::vector<int> pred = clf.predict(s.x);
  long hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == s.labels[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

}  // namespace

TEST(Generate, RSamplesPerDescriptionWithProvenance) {
  const NoisePredictor model = frozen_model();
  const VarianceSchedule sched = make_schedule(20, 1e-3, 0.1, 0.0);
  const UploadPayload ps[] = {payload(model, 0, {1, 3}), payload(model, 2, {0})};
  const SyntheticDataset s = generate_synthetic(model, ps, sched, {.R = 5}, 7);
  ASSERT_EQ(s.size(), 15);
  EXPECT_EQ(s.labels[5], 3);
  EXPECT_EQ(s.clients[10], 2);
  EXPECT_EQ(s.replicates[4], 5);
  EXPECT_EQ(s.replicates[5], 1);
  EXPECT_EQ(s.for_client(0).size(), 10);
}

TEST(Generate, PayloadOrderDoesNotMatter) {
  const NoisePredictor model = frozen_model();
  const VarianceSchedule sched = make_schedule(20, 1e-3, 0.1, 0.0);
  const UploadPayload ab[] = {payload(model, 0, {1}), payload(model, 1, {2})};
  const UploadPayload ba[] = {ab[1], ab[0]};
  const SyntheticDataset x = generate_synthetic(model, ab, sched, {.R = 4}, 7);
  const SyntheticDataset y = generate_synthetic(model, ba, sched, {.R = 4}, 7);
  EXPECT_EQ(x.x.topRows(4), y.x.bottomRows(4));
  EXPECT_EQ(x.x.bottomRows(4), y.x.topRows(4));
}

TEST(Generate, RejectsForeignModelAndBadEntries) {
  const NoisePredictor model = frozen_model();
  const VarianceSchedule sched = make_schedule(10, 1e-3, 0.1, 0.0);
  UploadPayload stale = payload(model, 0, {1});
  stale.model_digest = sha256_hex(std::string_view("other"));
  EXPECT_THROW(generate_synthetic(model, std::span(&stale, 1), sched, {}, 1), IntegrityError);
  UploadPayload out_of_range = payload(model, 0, {4});
  EXPECT_THROW(generate_synthetic(model, std::span(&out_of_range, 1), sched, {}, 1), std::out_of_range);
  UploadPayload short_desc = payload(model, 0, {1});
  short_desc.entries[0].values.pop_back();
  EXPECT_THROW(generate_synthetic(model, std::span(&short_desc, 1), sched, {}, 1), ShapeError);
}

TEST(Generate, PromptsOnlyCarriesNoClient) {
  const NoisePredictor model = frozen_model();
  const std::vector<int> cats{0, 2};
  const SyntheticDataset s = generate_prompts_only(model, cats, make_schedule(10, 1e-3, 0.1, 0.0), 3, 2);
  ASSERT_EQ(s.size(), 6);
  EXPECT_TRUE(std::all_of(s.clients.begin(), s.clients.end(), [](int c) { return c == -1; }));
  EXPECT_EQ(s.for_client(-1).size(), 6);
  EXPECT_EQ(s.for_client(0).size(), 0);
}

TEST(Classifier, TiesGoToTheLowestIndex) {
  Classifier clf(2, 3, 4, 1);
  for (Tensor* t : clf.mutable_parameters()) t->value.setZero();
  EXPECT_EQ(clf.predict(Matrix::Ones(2, 2)), (std::vector<int>{0, 0}));
  EXPECT_EQ(clf.parameter_count(), 2u * 4 + 4 + 4 * 4 + 4 + 4 * 3 + 3);
}

TEST(Classifier, LearnsSeparableBlobsAndStopsWhenConverged) {
  const ClientDataset c = blobs(0, 100, 3);
  const ClassifierConfig config{};
  ClassifierTraining t = train_local(c, 3, config, 4);
  EXPECT_GE(accuracy(t.classifier, c.train), 0.98);
  EXPECT_GE(accuracy(t.classifier, c.test), 0.9);
  EXPECT_LT(t.trace.epoch_loss.size(), static_cast<std::size_t>(config.max_epochs));
}

TEST(Classifier, WrongInputWidthThrows) {
  Classifier clf(2, 3, 4, 1);
  EXPECT_THROW(clf.predict(Matrix::Zero(1, 3)), ShapeError);
}

TEST(Baselines, CeilingPoolsEveryClientAndRecordsTheUpload) {
  const std::vector<ClientDataset> clients{blobs(0, 20, 5), blobs(1, 30, 6)};
  CommLedger ledger;
  train_centralized(clients, 3, {.max_epochs = 5}, 1, &ledger);
  EXPECT_EQ(ledger.at("ceiling").parameters, (60u + 90u) * 2u);
  EXPECT_EQ(ledger.at("ceiling").rounds, 1);
}

TEST(Baselines, FedAvgOfIdenticalClientsEqualsOneClient) {
  const ClientDataset a = blobs(0, 20, 7);
  ClientDataset b = a;
  b.client_id = 1;
  const FedAvgOptions opts{.rounds = 3, .local_epochs = 2, .shared_client_streams = true};
  const std::vector<ClientDataset> one{a}, two{a, b};
  CommLedger ledger;
  const ClassifierTraining x = train_fedavg(one, 3, opts, {}, 9);
  const ClassifierTraining y = train_fedavg(two, 3, opts, {}, 9, &ledger);
  for (std::size_t i = 0; i < x.classifier.parameters().size(); ++i)
    EXPECT_LT((x.classifier.parameters()[i]->value - y.classifier.parameters()[i]->value).cwiseAbs().maxCoeff(),
              1e-12);
  EXPECT_EQ(ledger.at("fedavg").parameters, 3u * 2u * y.classifier.parameter_count());
  EXPECT_EQ(ledger.at("fedavg").uploaded_bytes, 4 * ledger.at("fedavg").parameters);
}

TEST(Baselines, PromptsOnlyUploadsNothing) {
  const NoisePredictor model = frozen_model();
  const std::vector<int> cats{0, 1};
  CommLedger ledger;
  SyntheticDataset generated;
  train_prompts_only(model, cats, 4, make_schedule(10, 1e-3, 0.1, 0.0), 3, {.max_epochs = 3}, &ledger,
                     &generated);
  EXPECT_EQ(ledger.at("prompts_only").uploaded_bytes, 0u);
  EXPECT_EQ(generated.size(), 8);
}

TEST(Generate, SixClientsTenCategoriesThirtyEach) {
  NoisePredictor model({.data_dim = 2, .num_classes = 10, .hidden = 8, .hidden_layers = 1, .time_dim = 4,
                        .cond_dim = 3},
                       5);
  model.freeze();
  std::vector<UploadPayload> ps;
  for (std::uint32_t n = 0; n < 6; ++n) ps.push_back(payload(model, n, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9}));
  const VarianceSchedule sched = make_schedule(10, 1e-3, 0.1, 0.0);
  const SyntheticDataset s = generate_synthetic(model, ps, sched, {.R = 30}, 3);
  ASSERT_EQ(s.size(), 1800);
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    const auto& cats = ps[static_cast<std::size_t>(s.clients[i])].entries;
    EXPECT_TRUE(std::any_of(cats.begin(), cats.end(),
                            [&](const UploadEntry& e) { return static_cast<int>(e.category) == s.labels[i]; }));
  }
  EXPECT_EQ(s.digest(), generate_synthetic(model, ps, sched, {.R = 30}, 3).digest());
}

TEST(Classifier, SeparatedSyntheticClasses) {
  SyntheticDataset s;
  Rng rng(8);
  s.x = Matrix(200, 2);
  s.x.topRows(100) = gaussian_matrix(100, 2, rng, 0.3).array() - 3.0;
  s.x.bottomRows(100) = gaussian_matrix(100, 2, rng, 0.3).array() + 3.0;
  for (int i = 0; i < 200; ++i) {
    s.labels.push_back(i < 100 ? 0 : 1);
    s.clients.push_back(0);
    s.replicates.push_back(i % 100 + 1);
  }
  const ClassifierTraining t = train_aggregated(s, 2, {}, 9);
  EXPECT_GE(accuracy(t.classifier, LabeledSamples{s.x, s.labels, std::vector<int>(200, 0)}), 0.99);
  EXPECT_LT(t.trace.epoch_loss.back(), t.trace.epoch_loss.front());

  SyntheticDataset single = s;
  std::fill(single.labels.begin(), single.labels.end(), 1);
  const ClassifierTraining u = train_aggregated(single, 2, {.max_epochs = 20}, 9);
  EXPECT_DOUBLE_EQ(accuracy(u.classifier, LabeledSamples{s.x, single.labels, std::vector<int>(200, 0)}), 1.0);
}

TEST(Baselines, CeilingUploadIsEveryRawSampleAsFloats) {
  const std::vector<ClientDataset> clients{blobs(0, 20, 5), blobs(1, 30, 6)};
  CommLedger ledger;
  train_centralized(clients, 3, {.max_epochs = 2}, 1, &ledger);
  EXPECT_EQ(ledger.at("ceiling").uploaded_bytes, (60u + 90u) * 2u * 4u);
}
