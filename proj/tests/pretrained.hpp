#pragma once

#include "feddeo/checkpoint.hpp"
#include "feddeo/io.hpp"
#include "feddeo/pipeline.hpp"

#include <filesystem>
#include <string>

#include <unistd.h>

namespace feddeo::fixtures {

/// Default 2-D feature-skew world with a briefly pretrained model.
struct Pretrained {
  ExperimentConfig config;
  NoisePredictor model;
  VarianceSchedule sched;
  std::vector<ClientDataset> clients;
};

inline const Pretrained& cheap_pretrained() {
  static const Pretrained p = [] {
    ExperimentConfig c;
    c.corpus.per_cell = 60;
    c.pretrain.epochs = 40;
    c.out = std::filesystem::temp_directory_path() / ("feddeo_cheap_pretrained_" + std::to_string(::getpid()));
    std::filesystem::remove_all(c.out);
    run_stage(c, Stage::Pretrain);
    const Checkpoint ckpt = load_checkpoint(c.out / "dm.fdeo");
    const WorldSpec world = world_from_checkpoint(load_checkpoint(c.out / "world.fdeo"));
    Pretrained out{c, model_from_checkpoint(ckpt), schedule_from_checkpoint(ckpt, c.eta),
                   partition_feature_skew(world, c.partition_config)};
    std::filesystem::remove_all(c.out);
    return out;
  }();
  return p;
}

}  // namespace feddeo::fixtures
