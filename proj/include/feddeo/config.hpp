#pragma once

#include "feddeo/client.hpp"
#include "feddeo/datagen.hpp"
#include "feddeo/diffusion.hpp"
#include "feddeo/server.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace feddeo {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class PartitionKind { FeatureSkew, LabelSkew };

std::string to_string(PartitionKind kind);

/// Every knob of one experiment. Defaults describe the standard desk-scale
/// benchmark; `describe_config_keys()` lists them with their meaning.
struct ExperimentConfig {
  std::uint64_t seed = 20240601;

  WorldConfig world{};
  PartitionKind partition = PartitionKind::FeatureSkew;
  PartitionConfig partition_config{};
  CorpusConfig corpus{};
  double style_scale = 0.1;

  int T = 200;
  double beta_min = 5e-4;
  double beta_max = 0.1;
  double eta = 0.0;
  NoisePredictorConfig model{};
  PretrainOptions pretrain{.epochs = 200, .batch_size = 128, .adam = {.learning_rate = 2e-3},
                           .final_lr_fraction = 0.05};

  DescriptionTrainingOptions client{};
  GenerationOptions generation{};
  ClassifierConfig classifier{};
  FedAvgOptions fedavg{};
  std::vector<std::string> baselines{"ceiling", "fedavg", "prompts_only"};
  int kl_k = 5;

  std::filesystem::path out = "feddeo_out";

  bool baseline_enabled(const std::string& name) const;
};

/// Seeds of the independent random streams, all derived from the master seed.
enum class SeedTag : std::uint64_t {
  World = 1,
  Partition,
  Corpus,
  ModelInit,
  StyleTable,
  Pretrain,
  Clients,
  Generation,
  PromptsOnly,
  Classifier,
  FedAvg,
  Metrics,
};

std::uint64_t derive_seed(const ExperimentConfig& config, SeedTag tag);

/// Copies derived seeds and shared sizes into the nested option structs
/// (world/partition/corpus seeds, model data_dim and num_classes).
ExperimentConfig resolved(ExperimentConfig config);

/// Overlays `key=value` lines on `base`. Blank lines and lines starting
/// with '#' are ignored; unknown keys and malformed values throw ConfigError.
ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = {});
ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base = {});
void set_config_value(ExperimentConfig& config, const std::string& key, const std::string& value);
std::string get_config_value(const ExperimentConfig& config, const std::string& key);

/// Range and consistency checks; throws ConfigError.
void validate(const ExperimentConfig& config);

/// Sorted key=value lines of every key except `out`.
std::string canonical_text(const ExperimentConfig& config);
std::string config_digest(const ExperimentConfig& config);
/// Digest of the keys that determine the world and the pretrained model.
std::string pretrain_digest(const ExperimentConfig& config);

struct ConfigKey {
  std::string key;
  std::string default_value;
  std::string help;
};
std::vector<ConfigKey> describe_config_keys();

}  // namespace feddeo
