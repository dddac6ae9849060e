#include "feddeo/client.hpp"

#include "feddeo/digest.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <stdexcept>

namespace feddeo {

Description init_description(int client_id, int category, const ConditionVector& class_cond) {
  return {client_id, category, {RowVector(class_cond.values), ConditionKind::Description}, 0};
}

ClientState make_client(ClientDataset dataset, const NoisePredictor& model) {
  model.verify_integrity();
  ClientState state;
  state.model_digest = model.frozen_digest();
  std::vector<int> cats = dataset.categories;
  std::sort(cats.begin(), cats.end());
  cats.erase(std::unique(cats.begin(), cats.end()), cats.end());
  for (int c : cats) state.descriptions.push_back(init_description(dataset.client_id, c, model.class_condition(c)));
  dataset.categories = std::move(cats);
  state.dataset = std::move(dataset);
  return state;
}

TrainTrace train_descriptions(ClientState& state, const NoisePredictor& model, const VarianceSchedule& sched,
                              const DescriptionTrainingOptions& options, std::uint64_t seed) {
  if (!model.frozen()) throw std::logic_error("train_descriptions: model must be frozen");
  if (options.epochs < 0) throw std::invalid_argument("train_descriptions: epochs must be >= 0");
  model.verify_integrity();
  if (model.frozen_digest() != state.model_digest)
    throw IntegrityError("train_descriptions: model digest differs from the one distributed to client " +
                         std::to_string(state.client_id()));

  const LabeledSamples& data = state.dataset.train;
  const std::set<int> owned(state.dataset.categories.begin(), state.dataset.categories.end());
  for (int label : data.labels)
    if (!owned.contains(label))
      throw std::invalid_argument("train_descriptions: sample label " + std::to_string(label) +
                                  " is not owned by client " + std::to_string(state.client_id()));

  const int dim = model.config().data_dim;
  const std::size_t batch = static_cast<std::size_t>(std::max(1, options.batch_size));
  std::vector<double> epoch_total(static_cast<std::size_t>(options.epochs), 0.0);

  for (Description& desc : state.descriptions) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < data.labels.size(); ++i)
      if (data.labels[i] == desc.category) rows.push_back(i);
    if (rows.empty()) continue;

    Tensor param("description." + std::to_string(desc.category), desc.values.values, true);
    Tensor* const trainable[] = {&param};
    AdamState adam(options.adam);
    Rng rng(stream_seed(seed, {static_cast<std::uint64_t>(state.client_id()),
                               static_cast<std::uint64_t>(desc.category)}));
    std::uniform_int_distribution<int> draw_t(1, sched.T());
    std::normal_distribution<double> normal;

    for (int epoch = 0; epoch < options.epochs; ++epoch) {
      std::shuffle(rows.begin(), rows.end(), rng);
      for (std::size_t start = 0; start < rows.size(); start += batch) {
        const std::size_t b = std::min(batch, rows.size() - start);
        Matrix x_t(static_cast<Eigen::Index>(b), dim);
        Matrix eps(static_cast<Eigen::Index>(b), dim);
        std::vector<int> ts(b);
        for (std::size_t i = 0; i < b; ++i) {
          const auto r = static_cast<Eigen::Index>(i);
          for (int j = 0; j < dim; ++j) eps(r, j) = normal(rng);
          ts[i] = draw_t(rng);
          const double a = sched.alpha_bar(ts[i]);
          x_t.row(r) = std::sqrt(a) * data.x.row(static_cast<Eigen::Index>(rows[start + i])) + std::sqrt(1.0 - a) * eps.row(r);
        }
        Graph g;
        Var cond = g.embedding(g.param(param), std::vector<int>(b, 0));
        Var loss = g.mse(model.forward(g, x_t, ts, cond), g.constant(eps));
        epoch_total[static_cast<std::size_t>(epoch)] += g.scalar(loss) * static_cast<double>(b);
        GradientMap grads = g.backward(loss);
        if (grads.size() != 1 || !grads.contains(&param))
          throw std::logic_error("train_descriptions: gradients reached parameters other than the description");
        adam.step(trainable, grads);
      }
    }
    desc.values.values = param.value.row(0);
    desc.epochs_trained += options.epochs;
  }

  model.verify_integrity();
  TrainTrace trace;
  const auto n = static_cast<double>(data.labels.size());
  for (double total : epoch_total) trace.epoch_loss.push_back(n > 0 ? total / n : 0.0);
  return trace;
}

std::size_t UploadPayload::value_bytes() const {
  std::size_t bytes = 0;
  for (const UploadEntry& e : entries) bytes += e.values.size() * sizeof(float);
  return bytes;
}

std::uint64_t UploadPayload::parameter_count() const { return value_bytes() / sizeof(float); }

UploadPayload package_upload(const ClientState& state) {
  UploadPayload payload;
  payload.client_id = static_cast<std::uint32_t>(state.client_id());
  payload.model_digest = state.model_digest;
  payload.epochs_trained = state.descriptions.empty() ? 0 : state.descriptions.front().epochs_trained;
  for (int c : state.dataset.categories) {
    auto it = std::find_if(state.descriptions.begin(), state.descriptions.end(),
                           [c](const Description& d) { return d.category == c; });
    if (it == state.descriptions.end())
      throw std::logic_error("package_upload: client " + std::to_string(state.client_id()) +
                             " has no description for category " + std::to_string(c));
    UploadEntry entry;
    entry.category = static_cast<std::uint32_t>(c);
    for (Eigen::Index i = 0; i < it->values.values.size(); ++i)
      entry.values.push_back(static_cast<float>(it->values.values[i]));
    payload.entries.push_back(std::move(entry));
  }
  std::sort(payload.entries.begin(), payload.entries.end(),
            [](const UploadEntry& a, const UploadEntry& b) { return a.category < b.category; });
  return payload;
}

std::vector<std::uint8_t> serialize_upload(const UploadPayload& payload) {
  ByteWriter w;
  w.bytes("FDUP");
  w.u32(UploadPayload::kVersion);
  w.u32(payload.client_id);
  w.u32(static_cast<std::uint32_t>(payload.entries.size()));
  for (const UploadEntry& e : payload.entries) {
    w.u32(e.category);
    w.u32(static_cast<std::uint32_t>(e.values.size()));
    for (float v : e.values) w.f32(v);
  }
  return w.release();
}

UploadPayload parse_upload(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.bytes(4) != "FDUP") throw std::runtime_error("upload payload: bad magic");
  const std::uint32_t version = r.u32();
  if (version != UploadPayload::kVersion)
    throw std::runtime_error("upload payload: unsupported version " + std::to_string(version));
  UploadPayload payload;
  payload.client_id = r.u32();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    UploadEntry e;
    e.category = r.u32();
    const std::uint32_t dim = r.u32();
    if (static_cast<std::size_t>(dim) * 4 > r.remaining()) throw ByteReader::TruncatedInput("upload payload: truncated values");
    e.values.reserve(dim);
    for (std::uint32_t j = 0; j < dim; ++j) e.values.push_back(r.f32());
    if (!payload.entries.empty() && e.category <= payload.entries.back().category)
      throw std::runtime_error("upload payload: categories not strictly increasing");
    payload.entries.push_back(std::move(e));
  }
  if (r.remaining() != 0) throw std::runtime_error("upload payload: trailing bytes");
  return payload;
}

ConditionVector to_condition(const UploadEntry& entry) {
  RowVector v(static_cast<Eigen::Index>(entry.values.size()));
  for (std::size_t i = 0; i < entry.values.size(); ++i) v[static_cast<Eigen::Index>(i)] = entry.values[i];
  return {v, ConditionKind::Description};
}

}  // namespace feddeo
