#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <vector>

#include "rlda/errors.hpp"
#include "rlda/ppo.hpp"
#include "test_support.hpp"

using namespace rlda;
using testsup::rel_err;

namespace {

Policy tiny_policy(const SystemSpec& spec, uint64_t seed) {
  ActorArch aa = default_actor_arch(spec);
  aa.layers = 2;
  aa.units = 8;
  CriticArch ca = default_critic_arch(spec);
  ca.phi1_units = 6;
  ca.phi2_units = 6;
  ca.phi3_units = 7;
  Rng rng(seed);
  return make_policy(aa, ca, rng);
}

// Small on-policy buffer over the circular-motion system; behavior log-probs
// come from the same policy that later evaluates the losses.
RolloutBuffer small_buffer(const Policy& p, uint64_t seed, int64_t k = 2, int64_t t = 6,
                           int64_t n = 4) {
  SystemSpec cm = SystemSpec::preset(SystemName::circular_motion);
  Dataset ds = generate_dataset(cm, k, t, 0, 0, seed);
  Rng rng(seed + 1);
  RolloutBuffer buf = rollout(p, ds.spec, ds.train, {FilterMethod::enkf, n, 1}, rng);
  fill_gae(buf, 1.0, 0.9);
  return buf;
}

std::vector<int64_t> all_indices(const RolloutBuffer& buf) {
  std::vector<int64_t> idx(static_cast<size_t>(buf.size()));
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

bool same_params(const ParamStore& a, const ParamStore& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    const auto& ea = a.entries()[i];
    const auto& eb = b.entries()[i];
    if (ea.name != eb.name || ea.value.numel() != eb.value.numel()) return false;
    for (int64_t k = 0; k < ea.value.numel(); ++k)
      if (ea.value.data()[k] != eb.value.data()[k]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("generalized advantage estimation") {
  SUBCASE("one-step episode reduces to r - V") {
    auto [adv, tgt] = compute_gae({2.5}, {0.7}, 1.0, 0.9);
    CHECK(adv[0] == doctest::Approx(2.5 - 0.7).epsilon(1e-15));
    CHECK(tgt[0] == doctest::Approx(2.5).epsilon(1e-15));
  }

  SUBCASE("lambda 0 gives the one-step temporal difference") {
    std::vector<double> r = {1.0, -2.0, 0.5, 3.0};
    std::vector<double> v = {0.3, 1.1, -0.4, 0.9};
    auto [adv, tgt] = compute_gae(r, v, 0.97, 0.0);
    for (size_t t = 0; t < r.size(); ++t) {
      const double vn = t + 1 < v.size() ? v[t + 1] : 0.0;
      CHECK(adv[t] == doctest::Approx(r[t] + 0.97 * vn - v[t]).epsilon(1e-14));
      CHECK(tgt[t] == doctest::Approx(adv[t] + v[t]).epsilon(1e-14));
    }
  }

  SUBCASE("recursion equals the explicit discounted sum of deltas") {
    Rng rng(31);
    std::vector<double> r(7), v(7);
    for (auto& x : r) x = rng.normal();
    for (auto& x : v) x = rng.normal();
    const double gamma = 0.93, lambda = 0.71;
    auto [adv, tgt] = compute_gae(r, v, gamma, lambda);
    for (size_t t = 0; t < 7; ++t) {
      double direct = 0.0, w = 1.0;
      for (size_t k = t; k < 7; ++k) {
        const double vn = k + 1 < 7 ? v[k + 1] : 0.0;
        direct += w * (r[k] + gamma * vn - v[k]);
        w *= gamma * lambda;
      }
      CHECK(std::abs(adv[t] - direct) < 1e-12);
      CHECK(std::abs(tgt[t] - (direct + v[t])) < 1e-12);
    }
  }

  SUBCASE("length mismatch is rejected") {
    CHECK_THROWS_AS(compute_gae({1.0, 2.0}, {0.0}, 1.0, 0.9), ContractError);
  }

  SUBCASE("fill_gae matches per-episode compute_gae") {
    SystemSpec cm = SystemSpec::preset(SystemName::circular_motion);
    Policy p = tiny_policy(cm, 3);
    RolloutBuffer buf = small_buffer(p, 33, 3, 5);
    for (const auto& [begin, end] : buf.episode_ranges) {
      std::vector<double> r, v;
      for (int64_t i = begin; i < end; ++i) {
        r.push_back(buf.transitions[static_cast<size_t>(i)].reward);
        v.push_back(buf.transitions[static_cast<size_t>(i)].value);
      }
      auto [adv, tgt] = compute_gae(r, v, 1.0, 0.9);
      for (int64_t i = begin; i < end; ++i) {
        CHECK(buf.transitions[static_cast<size_t>(i)].advantage == adv[static_cast<size_t>(i - begin)]);
        CHECK(buf.transitions[static_cast<size_t>(i)].value_target == tgt[static_cast<size_t>(i - begin)]);
      }
    }
  }
}

TEST_CASE("clipped surrogate actor loss") {
  SystemSpec cm = SystemSpec::preset(SystemName::circular_motion);
  Policy p = tiny_policy(cm, 4);
  RolloutBuffer buf = small_buffer(p, 44);
  std::vector<int64_t> idx = all_indices(buf);

  SUBCASE("at the behavior policy the loss is minus the mean advantage") {
    for (size_t k = 0; k < buf.transitions.size(); ++k)
      buf.transitions[k].advantage = 0.25 * static_cast<double>(k) - 1.0;
    double mean_adv = 0.0;
    for (const auto& tr : buf.transitions) mean_adv += tr.advantage;
    mean_adv /= static_cast<double>(buf.size());
    CHECK(actor_loss(p, buf, idx, 0.2, false) == doctest::Approx(-mean_adv).epsilon(1e-12));
  }

  SUBCASE("a ratio of two is clipped to 1 + eps") {
    RolloutBuffer one;
    one.transitions.push_back(buf.transitions[0]);
    one.transitions[0].behavior_logprob -= std::log(2.0);
    one.transitions[0].advantage = 1.0;
    one.episode_ranges.emplace_back(0, 1);
    CHECK(actor_loss(p, one, {0}, 0.2, false) == doctest::Approx(-1.2).epsilon(1e-12));
    // negative advantage flips the min to the unclipped branch
    one.transitions[0].advantage = -1.0;
    CHECK(actor_loss(p, one, {0}, 0.2, false) == doctest::Approx(2.0).epsilon(1e-12));
  }

  SUBCASE("clipped and unclipped losses coincide at the behavior policy") {
    const double clipped = actor_loss(p, buf, idx, 0.2, false);
    const double unclipped = actor_loss(p, buf, idx, 1e12, false);
    CHECK(clipped == unclipped);
  }

  SUBCASE("a huge clip range reproduces the plain surrogate") {
    Policy moved = p;
    for (auto& e : moved.actor.entries())
      for (int64_t k = 0; k < e.value.numel(); ++k) e.value.data()[k] += 0.01 * std::sin(0.7 * k);
    double plain = 0.0;
    for (const auto& tr : buf.transitions) {
      const double* c = tr.control.empty() ? nullptr : tr.control.data();
      const double lp = actor_logprob(moved, tr.state_particles, tr.action, c);
      plain += std::exp(lp - tr.behavior_logprob) * tr.advantage;
    }
    plain = -plain / static_cast<double>(buf.size());
    CHECK(rel_err(actor_loss(moved, buf, idx, 1e12, false), plain) < 1e-12);
  }

  SUBCASE("normalized advantages are shift-invariant") {
    RolloutBuffer shifted = buf;
    for (auto& tr : shifted.transitions) tr.advantage += 37.5;
    CHECK(actor_loss(p, buf, idx, 0.2, true) ==
          doctest::Approx(actor_loss(p, shifted, idx, 0.2, true)).epsilon(1e-9));
  }

  SUBCASE("gradient at the behavior policy matches finite differences of the plain surrogate") {
    std::vector<int64_t> sub = {0, 1, 2, 3, 4, 5};
    Tape t;
    TapeBinding b = bind_params(t, p.actor);
    NodeId loss = actor_loss_node(t, p, b, buf, sub, 0.2, false);
    p.actor.zero_grad();
    t.backward(loss);
    collect_grads(t, p.actor, b);

    double gmax = 0.0;
    for (const auto& e : p.actor.entries())
      for (int64_t k = 0; k < e.grad.numel(); ++k)
        gmax = std::max(gmax, std::abs(e.grad.data()[k]));
    REQUIRE(gmax > 0.0);

    const double floor = std::max(1e-3 * gmax, 1e-10);
    int checked = 0;
    for (auto& e : p.actor.entries()) {
      for (int64_t k = 0; k < e.value.numel(); k += std::max<int64_t>(1, e.value.numel() / 3)) {
        double& slot = e.value.data()[k];
        const double keep = slot;
        const double h = 1e-5;
        auto plain = [&]() {
          double s = 0.0;
          for (int64_t i : sub) {
            const Transition& tr = buf.transitions[static_cast<size_t>(i)];
            const double* c = tr.control.empty() ? nullptr : tr.control.data();
            const double lp = actor_logprob(p, tr.state_particles, tr.action, c);
            s += std::exp(lp - tr.behavior_logprob) * tr.advantage;
          }
          return -s / static_cast<double>(sub.size());
        };
        slot = keep + h;
        const double up = plain();
        slot = keep - h;
        const double dn = plain();
        slot = keep;
        const double fd = (up - dn) / (2.0 * h);
        const double ad = e.grad.data()[k];
        const double denom = std::max({std::abs(fd), std::abs(ad), floor});
        CHECK(std::abs(fd - ad) / denom < 1e-4);
        ++checked;
      }
    }
    CHECK(checked >= 10);
  }

  SUBCASE("a non-finite ratio names the offending transition") {
    RolloutBuffer broken = buf;
    broken.transitions[3].behavior_logprob = -std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(actor_loss(p, broken, idx, 0.2, false), NumericError);
    try {
      actor_loss(p, broken, idx, 0.2, false);
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("step 3") != std::string::npos);
    }
  }
}

TEST_CASE("critic regression loss") {
  SystemSpec cm = SystemSpec::preset(SystemName::circular_motion);
  Policy p = tiny_policy(cm, 5);
  RolloutBuffer buf = small_buffer(p, 55);
  std::vector<int64_t> idx = all_indices(buf);

  SUBCASE("zero when the critic already fits the targets") {
    for (auto& tr : buf.transitions)
      tr.value_target = critic_value(p, tr.state_particles, tr.y,
                                     tr.control.empty() ? nullptr : tr.control.data());
    CHECK(critic_loss(p, buf, idx) < 1e-24);
  }

  SUBCASE("an all-zero critic scores the mean squared target") {
    Policy zeroed = p;
    for (auto& e : zeroed.critic.entries()) std::fill_n(e.value.data(), e.value.numel(), 0.0);
    for (auto& tr : buf.transitions) tr.value_target = 3.0;
    CHECK(critic_loss(zeroed, buf, idx) == doctest::Approx(9.0).epsilon(1e-15));
  }

  SUBCASE("gradient matches finite differences") {
    std::vector<int64_t> sub = {0, 2, 4, 7};
    Tape t;
    TapeBinding b = bind_params(t, p.critic);
    NodeId loss = critic_loss_node(t, p, b, buf, sub);
    p.critic.zero_grad();
    t.backward(loss);
    collect_grads(t, p.critic, b);

    double gmax = 0.0;
    for (const auto& e : p.critic.entries())
      for (int64_t k = 0; k < e.grad.numel(); ++k)
        gmax = std::max(gmax, std::abs(e.grad.data()[k]));
    REQUIRE(gmax > 0.0);
    const double floor = std::max(1e-3 * gmax, 1e-10);

    int checked = 0;
    for (auto& e : p.critic.entries()) {
      for (int64_t k = 0; k < e.value.numel(); k += std::max<int64_t>(1, e.value.numel() / 2)) {
        double& slot = e.value.data()[k];
        const double keep = slot;
        const double h = 1e-5;
        slot = keep + h;
        const double up = critic_loss(p, buf, sub);
        slot = keep - h;
        const double dn = critic_loss(p, buf, sub);
        slot = keep;
        const double fd = (up - dn) / (2.0 * h);
        const double ad = e.grad.data()[k];
        const double denom = std::max({std::abs(fd), std::abs(ad), floor});
        CHECK(std::abs(fd - ad) / denom < 1e-4);
        ++checked;
      }
    }
    CHECK(checked >= 10);
  }
}

TEST_CASE("adaptive moment optimizer") {
  SUBCASE("first step moves by roughly the learning rate") {
    ParamStore store;
    store.add("x", Tensor::row({1.0, -2.0}));
    Adam opt(store, 0.01);
    store.grad("x").data()[0] = 0.5;
    store.grad("x").data()[1] = -3.0;
    const double norm = opt.step(0.0);
    CHECK(norm == doctest::Approx(std::hypot(0.5, 3.0)).epsilon(1e-14));
    CHECK(store.value("x").data()[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-6));
    CHECK(store.value("x").data()[1] == doctest::Approx(-2.0 + 0.01).epsilon(1e-6));
  }

  SUBCASE("two manual steps match the update formula") {
    ParamStore store;
    store.add("x", Tensor::row({0.0}));
    Adam opt(store, 0.1);
    double m = 0.0, v = 0.0, x = 0.0;
    const double g1 = 2.0, g2 = -1.0;
    for (int step = 1; step <= 2; ++step) {
      const double g = step == 1 ? g1 : g2;
      store.grad("x").data()[0] = g;
      opt.step(0.0);
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      const double mh = m / (1.0 - std::pow(0.9, step));
      const double vh = v / (1.0 - std::pow(0.999, step));
      x -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
      CHECK(store.value("x").data()[0] == doctest::Approx(x).epsilon(1e-15));
    }
  }

  SUBCASE("norm clipping rescales the applied gradient") {
    ParamStore a, b;
    a.add("x", Tensor::row({0.0, 0.0}));
    b.add("x", Tensor::row({0.0, 0.0}));
    Adam oa(a, 0.05), ob(b, 0.05);
    a.grad("x").data()[0] = 30.0;
    a.grad("x").data()[1] = 40.0;  // norm 50, clip at 5 -> scale 0.1
    b.grad("x").data()[0] = 3.0;
    b.grad("x").data()[1] = 4.0;
    CHECK(oa.step(5.0) == doctest::Approx(50.0).epsilon(1e-14));
    CHECK(ob.step(0.0) == doctest::Approx(5.0).epsilon(1e-14));
    for (int k = 0; k < 2; ++k)
      CHECK(a.value("x").data()[k] == doctest::Approx(b.value("x").data()[k]).epsilon(1e-12));
  }

  SUBCASE("minimizes a quadratic") {
    ParamStore store;
    store.add("x", Tensor::row({4.0, -3.0}));
    const double c0 = 1.5, c1 = -0.5;
    Adam opt(store, 0.05);
    for (int i = 0; i < 2000; ++i) {
      double* x = store.value("x").data();
      store.grad("x").data()[0] = 2.0 * (x[0] - c0);
      store.grad("x").data()[1] = 2.0 * (x[1] - c1);
      opt.step(0.0);
    }
    CHECK(std::abs(store.value("x").data()[0] - c0) < 1e-3);
    CHECK(std::abs(store.value("x").data()[1] - c1) < 1e-3);
  }
}

TEST_CASE("training loop") {
  SystemSpec cm = SystemSpec::preset(SystemName::circular_motion);

  SUBCASE("zero iterations return the initialization unchanged") {
    Dataset ds = generate_dataset(cm, 2, 5, 0, 0, 91);
    Policy init = tiny_policy(ds.spec, 6);
    TrainConfig cfg;
    cfg.iterations = 0;
    cfg.n_particles = 4;
    TrainResult res = train(ds, cfg, &init);
    CHECK(same_params(res.policy.actor, init.actor));
    CHECK(same_params(res.policy.critic, init.critic));
    CHECK(res.log.empty());
    CHECK(res.best_iteration == -1);
  }

  SUBCASE("fixed seed is bit-reproducible") {
    Dataset ds = generate_dataset(cm, 2, 10, 0, 0, 92);
    Policy init = tiny_policy(ds.spec, 7);
    TrainConfig cfg;
    cfg.iterations = 3;
    cfg.epochs = 2;
    cfg.minibatch = 8;
    cfg.n_particles = 4;
    cfg.seed = 17;
    cfg.plateau_window = 0;
    TrainResult a = train(ds, cfg, &init);
    TrainResult b = train(ds, cfg, &init);
    CHECK(same_params(a.policy.actor, b.policy.actor));
    CHECK(same_params(a.policy.critic, b.policy.critic));
    REQUIRE(a.log.size() == b.log.size());
    for (size_t i = 0; i < a.log.size(); ++i) {
      CHECK(a.log[i].mean_return == b.log[i].mean_return);
      CHECK(a.log[i].actor_loss == b.log[i].actor_loss);
      CHECK(a.log[i].critic_loss == b.log[i].critic_loss);
      CHECK(a.log[i].grad_norm == b.log[i].grad_norm);
    }
    CHECK(a.best_return == b.best_return);
  }

  SUBCASE("returns improve on a short run") {
    Dataset ds = generate_dataset(cm, 4, 30, 0, 0, 93);
    Policy init = tiny_policy(ds.spec, 8);
    TrainConfig cfg;
    cfg.iterations = 15;
    cfg.epochs = 5;
    cfg.minibatch = 64;
    cfg.n_particles = 8;
    cfg.lr_actor = 5e-3;
    cfg.lr_critic = 1e-2;
    cfg.seed = 5;
    cfg.plateau_window = 0;
    TrainResult res = train(ds, cfg, &init);
    REQUIRE(res.log.size() == 15);
    CHECK(res.best_return > res.log.front().mean_return);
    CHECK(res.log.back().mean_return > res.log.front().mean_return);
    for (const auto& row : res.log) {
      CHECK(std::isfinite(row.actor_loss));
      CHECK(std::isfinite(row.critic_loss));
      CHECK(std::isfinite(row.grad_norm));
    }
  }

  SUBCASE("training log and checkpoint land on disk") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "rlda_ppo_test";
    fs::create_directories(dir);
    Dataset ds = generate_dataset(cm, 2, 6, 0, 0, 94);
    Policy init = tiny_policy(ds.spec, 9);
    TrainConfig cfg;
    cfg.iterations = 2;
    cfg.epochs = 1;
    cfg.minibatch = 8;
    cfg.n_particles = 4;
    cfg.log_path = (dir / "log.csv").string();
    cfg.checkpoint_path = (dir / "best.json").string();
    TrainResult res = train(ds, cfg, &init);

    std::ifstream in(cfg.log_path);
    REQUIRE(in.good());
    std::string header;
    std::getline(in, header);
    CHECK(header == "iteration,mean_return,actor_loss,critic_loss,grad_norm,wall_ms");
    int rows = 0;
    for (std::string line; std::getline(in, line);)
      if (!line.empty()) ++rows;
    CHECK(rows == 2);

    Policy loaded = load_policy(cfg.checkpoint_path);
    CHECK(same_params(loaded.actor, res.policy.actor));
    CHECK(same_params(loaded.critic, res.policy.critic));
    fs::remove_all(dir);
  }

  SUBCASE("numeric blowup restores the checkpoint and halves rates once") {
    Dataset ds = generate_dataset(cm, 1, 3, 0, 0, 95);
    for (int64_t t = 0; t < 3; ++t)
      for (int64_t j = 0; j < 2; ++j) ds.train[0].obs.at2(t, j) = 1e150;
    Policy init = tiny_policy(ds.spec, 10);
    TrainConfig cfg;
    cfg.iterations = 1;
    cfg.epochs = 1;
    cfg.minibatch = 4;
    cfg.n_particles = 4;
    TrainResult res = train(ds, cfg, &init);
    CHECK(res.lr_halvings == 1);
    CHECK(same_params(res.policy.actor, init.actor));  // restored checkpoint

    cfg.iterations = 3;
    CHECK_THROWS_AS(train(ds, cfg, &init), NumericError);
  }

  SUBCASE("plateaued returns stop early") {
    Dataset ds = generate_dataset(cm, 2, 6, 0, 0, 96);
    Policy init = tiny_policy(ds.spec, 11);
    TrainConfig cfg;
    cfg.iterations = 60;
    cfg.epochs = 1;
    cfg.minibatch = 16;
    cfg.n_particles = 4;
    cfg.plateau_window = 3;
    cfg.lr_actor = 1e-12;  // effectively frozen policy -> flat returns
    cfg.lr_critic = 1e-12;
    TrainResult res = train(ds, cfg, &init);
    CHECK(res.plateaued);
    CHECK(res.log.size() < 60);
  }

  SUBCASE("config validation") {
    TrainConfig cfg;
    cfg.lambda = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.clip_eps = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.gamma = -0.1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    TrainConfig rt = TrainConfig::from_json(TrainConfig{}.to_json());
    CHECK(rt.minibatch == 512);
    CHECK(rt.lambda == 0.9);
  }
}
