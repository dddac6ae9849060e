#pragma once

#include "feddeo/datagen.hpp"
#include "feddeo/diffusion.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace feddeo {

/// Trainable condition d_{n,c}: the only thing a client uploads.
struct Description {
  int client_id = 0;
  int category = 0;
  ConditionVector values;
  int epochs_trained = 0;
};

/// Copies f_c into a fresh description with epochs_trained = 0.
Description init_description(int client_id, int category, const ConditionVector& class_cond);

struct ClientState {
  ClientDataset dataset;
  std::vector<Description> descriptions;  // one per owned category, ascending
  std::string model_digest;

  int client_id() const { return dataset.client_id; }
};

/// Receives the distributed (frozen) model: records its digest and
/// initializes one description per owned category from f_c.
ClientState make_client(ClientDataset dataset, const NoisePredictor& model);

struct DescriptionTrainingOptions {
  int epochs = 10;
  int batch_size = 64;
  AdamConfig adam{.learning_rate = 1e-2};
};

/// Trains each description on the samples of its category with
///   loss = MSE(eps, eps(x_t, t | d_{n,c})),  x_t = forward_noise(x0, eps, t)
/// while the model stays frozen. Each category has its own optimizer and
/// random stream, so categories never influence each other. Returns the
/// per-epoch mean loss over all of the client's samples.
TrainTrace train_descriptions(ClientState& state, const NoisePredictor& model, const VarianceSchedule& sched,
                              const DescriptionTrainingOptions& options, std::uint64_t seed);

struct UploadEntry {
  std::uint32_t category = 0;
  std::vector<float> values;
};

/// Wire form of a client's descriptions.
///
/// Layout (little-endian): "FDUP", version u32, client_id u32, count u32,
/// then per entry category u32, cond_dim u32, cond_dim x f32. Entries are
/// in strictly increasing category order. The model digest and
/// epochs_trained travel out of band (see the upload manifest).
struct UploadPayload {
  static constexpr std::uint32_t kVersion = 1;
  static constexpr std::size_t kHeaderBytes = 16;

  std::uint32_t client_id = 0;
  std::vector<UploadEntry> entries;
  std::string model_digest;
  int epochs_trained = 0;

  std::size_t value_bytes() const;
  std::uint64_t parameter_count() const;
};

UploadPayload package_upload(const ClientState& state);

std::vector<std::uint8_t> serialize_upload(const UploadPayload& payload);
/// Throws std::runtime_error on bad magic, version, ordering or truncation.
UploadPayload parse_upload(std::span<const std::uint8_t> bytes);

/// Description view of an upload entry.
ConditionVector to_condition(const UploadEntry& entry);

}  // namespace feddeo
