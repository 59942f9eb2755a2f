#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "rlda/metrics.hpp"
#include "rlda/ppo.hpp"
#include "rlda/ssm.hpp"

namespace rlda {

struct DataConfig {
  int64_t k_train = 0, t_train = 0;
  int64_t k_test = 0, t_test = 0;
  uint64_t seed = 0;
};

struct EvalConfig {
  std::string method;  // enkf | pf; empty inherits the train backend
  int64_t n_particles = 20;
  std::vector<int64_t> horizons;
  int64_t forecast_inits = 1000;
  int64_t forecast_particles = 20;
  uint64_t seed = 0;
};

// All artifact paths; empty entries are derived from out_dir by resolve().
struct IoConfig {
  std::string out_dir = "out";
  std::string dataset_dir;
  std::string checkpoint;
  std::string train_log;
  std::string posterior_dir;
  std::string forecast_dir;
  std::string report;
};

// One JSON document with sections system/data/train/eval/io. Parsing starts
// from the named system preset, applies field overrides, and rejects unknown
// keys everywhere.
struct RunConfig {
  SystemSpec system;
  DataConfig data;
  TrainConfig train;
  EvalConfig eval;
  IoConfig io;

  void validate() const;
  // Fills every derived path from io.out_dir.
  void resolve();

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::string& path);
  void save(const std::string& path) const;
};

}  // namespace rlda
