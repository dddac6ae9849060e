#pragma once

#include "feddeo/checkpoint.hpp"
#include "feddeo/datagen.hpp"
#include "feddeo/diffusion.hpp"
#include "feddeo/server.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace feddeo {

/// Which run and stage produced a file. Every report and checkpoint carries it.
struct Provenance {
  std::string config_digest;
  std::uint64_t seed = 0;
  std::string stage;
};

/// Shortest decimal text that parses back to the same double.
std::string format_real(double v);
double parse_real(const std::string& text);

/// "# key=value" header lines of a CSV file.
std::string csv_header(const Provenance& p);
Provenance csv_provenance(const std::string& text);
/// The CSV without its '#' lines.
std::string csv_body(const std::string& text);

/// client_id,split,label,x_0..x_{d-1}; split is train or test.
std::string clients_csv(std::span<const ClientDataset> clients, const Provenance& p);
/// Categories are recovered from the labels; per-sample domains are not stored.
std::vector<ClientDataset> parse_clients_csv(const std::string& text);

/// client_id,category,replicate,x_0..x_{d-1}.
std::string synthetic_csv(const SyntheticDataset& data, const Provenance& p);
SyntheticDataset parse_synthetic_csv(const std::string& text);

void stamp(Checkpoint& ckpt, const Provenance& p);
Provenance checkpoint_provenance(const Checkpoint& ckpt);

/// World stored as exact f64 scalars.
Checkpoint world_checkpoint(const WorldSpec& world);
WorldSpec world_from_checkpoint(const Checkpoint& ckpt);

/// Frozen model, its schedule (T, betas) and the pretraining trace.
Checkpoint model_checkpoint(const NoisePredictor& model, const VarianceSchedule& sched, double beta_min,
                            double beta_max, const TrainTrace& trace, const Tensor* style_table);
/// Rebuilds, freezes and verifies the model against the stored digest
/// (IntegrityError on mismatch).
NoisePredictor model_from_checkpoint(const Checkpoint& ckpt);
/// Schedule with the stored T and betas and the caller's eta.
VarianceSchedule schedule_from_checkpoint(const Checkpoint& ckpt, double eta);

Checkpoint classifier_checkpoint(const Classifier& clf, const TrainTrace& trace);
Classifier classifier_from_checkpoint(const Checkpoint& ckpt);

}  // namespace feddeo
