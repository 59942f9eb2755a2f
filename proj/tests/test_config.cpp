#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "rlda/config.hpp"
#include "rlda/errors.hpp"

using namespace rlda;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("rlda_config_" + std::to_string(static_cast<long long>(::getpid())));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

json base_config() {
  return json{{"system", {{"name", "circular_motion"}}},
              {"data", {{"k_train", 3}, {"t_train", 50}, {"k_test", 2}, {"t_test", 40}, {"seed", 9}}},
              {"train", {{"iterations", 5}, {"n_particles", 8}, {"seed", 4}}},
              {"eval", {{"n_particles", 12}, {"horizons", {1, 5}}, {"seed", 2}}},
              {"io", {{"out_dir", "myrun"}}}};
}

}  // namespace

TEST_CASE("run config parsing") {
  SUBCASE("fields land where they should") {
    RunConfig cfg = RunConfig::from_json(base_config());
    CHECK(cfg.system.name == SystemName::circular_motion);
    CHECK(cfg.system.m == 2);
    CHECK(cfg.data.k_train == 3);
    CHECK(cfg.data.t_test == 40);
    CHECK(cfg.data.seed == 9);
    CHECK(cfg.train.iterations == 5);
    CHECK(cfg.train.n_particles == 8);
    CHECK(cfg.eval.n_particles == 12);
    CHECK(cfg.eval.horizons == std::vector<int64_t>{1, 5});
    CHECK(cfg.io.out_dir == "myrun");
    CHECK_NOTHROW(cfg.validate());
  }

  SUBCASE("omitted sections fall back to defaults") {
    RunConfig cfg = RunConfig::from_json(json{{"system", {{"name", "lorenz63"}}}});
    CHECK(cfg.system.m == 3);
    CHECK(cfg.data.k_train == 0);
    CHECK(cfg.eval.n_particles == 20);
    CHECK(cfg.io.out_dir == "out");
  }

  SUBCASE("system section is required") {
    CHECK_THROWS_AS(RunConfig::from_json(json{{"data", json::object()}}), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json(json::array()), ConfigError);
  }

  SUBCASE("unknown keys are rejected with their location") {
    json top = base_config();
    top["extra"] = 1;
    CHECK_THROWS_WITH_AS(static_cast<void>(RunConfig::from_json(top)),
                         doctest::Contains("unknown key 'extra'"), ConfigError);

    for (const char* section : {"system", "data", "train", "eval", "io"}) {
      json j = base_config();
      j[section]["frobnicate"] = true;
      CHECK_THROWS_WITH_AS(static_cast<void>(RunConfig::from_json(j)),
                           doctest::Contains("frobnicate"), ConfigError);
    }
  }

  SUBCASE("system overrides apply on top of the preset") {
    json j = base_config();
    j["system"]["dt"] = 0.05;
    j["system"]["q_diag"] = {0.02, 0.02};
    j["system"]["burn_in"] = 7;
    RunConfig cfg = RunConfig::from_json(j);
    CHECK(cfg.system.dt == 0.05);
    CHECK(cfg.system.q_diag == std::vector<double>{0.02, 0.02});
    CHECK(cfg.system.burn_in == 7);
  }

  SUBCASE("preset-fixed fields cannot be reassigned") {
    json j = base_config();
    j["system"]["m"] = 5;
    CHECK_THROWS_AS(static_cast<void>(RunConfig::from_json(j)), ConfigError);
    j = base_config();
    j["system"]["control"] = true;
    CHECK_THROWS_AS(static_cast<void>(RunConfig::from_json(j)), ConfigError);
  }

  SUBCASE("subsample operator needs n and honors it") {
    json j{{"system",
            {{"name", "lorenz96"}, {"obs_op", "subsample"}, {"n", 20}}}};
    RunConfig cfg = RunConfig::from_json(j);
    CHECK(cfg.system.obs_op == ObsOperator::subsample);
    CHECK(cfg.system.n == 20);

    json missing{{"system", {{"name", "lorenz96"}, {"obs_op", "subsample"}}}};
    CHECK_THROWS_WITH_AS(static_cast<void>(RunConfig::from_json(missing)),
                         doctest::Contains("subsample"), ConfigError);
  }

  SUBCASE("snr mode clears any explicit noise") {
    json j = base_config();
    j["system"]["snr_mode"] = true;
    j["system"]["snr_db"] = 15.0;
    j["system"]["r_diag"] = {0.3, 0.3};
    RunConfig cfg = RunConfig::from_json(j);
    CHECK(cfg.system.snr_mode);
    CHECK(cfg.system.snr_db == 15.0);
    CHECK(cfg.system.r_diag.empty());
  }

  SUBCASE("eval method strings are validated") {
    json j = base_config();
    j["eval"]["method"] = "pf";
    CHECK(RunConfig::from_json(j).eval.method == "pf");
    j["eval"]["method"] = "kalman";
    CHECK_THROWS_AS(static_cast<void>(RunConfig::from_json(j)), ConfigError);
  }
}

TEST_CASE("run config validation and path resolution") {
  SUBCASE("bad counts are rejected") {
    RunConfig cfg = RunConfig::from_json(base_config());
    cfg.data.k_train = -1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = RunConfig::from_json(base_config());
    cfg.eval.n_particles = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = RunConfig::from_json(base_config());
    cfg.eval.horizons = {0};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = RunConfig::from_json(base_config());
    cfg.io.out_dir.clear();
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }

  SUBCASE("resolve derives every io path under out_dir") {
    RunConfig cfg = RunConfig::from_json(base_config());
    cfg.resolve();
    const fs::path root("myrun");
    CHECK(cfg.io.dataset_dir == (root / "dataset").string());
    CHECK(cfg.io.checkpoint == (root / "checkpoint.json").string());
    CHECK(cfg.io.train_log == (root / "training_log.csv").string());
    CHECK(cfg.io.posterior_dir == (root / "posterior").string());
    CHECK(cfg.io.forecast_dir == (root / "forecast").string());
    CHECK(cfg.io.report == (root / "eval_report.json").string());
  }

  SUBCASE("explicit io paths survive resolve") {
    json j = base_config();
    j["io"]["dataset_dir"] = "/data/shared";
    j["io"]["checkpoint"] = "warm.json";
    RunConfig cfg = RunConfig::from_json(j);
    cfg.resolve();
    CHECK(cfg.io.dataset_dir == "/data/shared");
    CHECK(cfg.io.checkpoint == "warm.json");
    CHECK(cfg.io.train_log == (fs::path("myrun") / "training_log.csv").string());
  }
}

TEST_CASE("run config file round trip") {
  TempDir tmp;

  SUBCASE("save then load preserves the document") {
    RunConfig cfg = RunConfig::from_json(base_config());
    cfg.system.snr_mode = false;
    const std::string path = (tmp.path / "cfg.json").string();
    cfg.save(path);
    RunConfig back = RunConfig::load(path);
    CHECK(back.to_json() == cfg.to_json());
  }

  SUBCASE("load rejects missing or malformed files") {
    CHECK_THROWS_AS(static_cast<void>(RunConfig::load((tmp.path / "nope.json").string())),
                    ConfigError);
    const std::string bad = (tmp.path / "bad.json").string();
    std::ofstream(bad) << "{ not json";
    CHECK_THROWS_WITH_AS(static_cast<void>(RunConfig::load(bad)),
                         doctest::Contains("not valid JSON"), ConfigError);
  }

  SUBCASE("loaded config round trips through json exactly") {
    json j = base_config();
    j["train"]["backend"] = "pf";
    j["train"]["gamma"] = 0.9;
    const std::string path = (tmp.path / "cfg2.json").string();
    std::ofstream(path) << j.dump(2);
    RunConfig cfg = RunConfig::load(path);
    CHECK(cfg.train.backend == FilterMethod::pf);
    CHECK(cfg.train.gamma == 0.9);
    RunConfig again = RunConfig::from_json(cfg.to_json());
    CHECK(again.to_json() == cfg.to_json());
  }
}
