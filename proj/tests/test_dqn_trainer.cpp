#include <cmath>
#include <set>

#include "doctest.h"
#include "ensemble_forge/dqn_trainer.hpp"
#include "ensemble_forge/error.hpp"
#include "ensemble_forge/mock_pool.hpp"
#include "gradcheck.hpp"
#include "metric_oracles.hpp"
#include "test_support.hpp"

using namespace ensemble_forge;
using namespace ensemble_forge::dqn;

namespace {

std::shared_ptr<const StateVector> state(const std::string& text) {
  return std::make_shared<const StateVector>(hash_embed(text));
}

// Zero network whose Q-values are head_b for every state.
qnet::QNetParams constant_q(const std::vector<double>& q) {
  auto p = qnet::QNetParams::zeros({kStateDim, 4, q.size()});
  for (std::size_t i = 0; i < q.size(); ++i) p.head_b[static_cast<Eigen::Index>(i)] = q[i];
  return p;
}

TrainerConfig small_config() {
  TrainerConfig c;
  c.episodes = 2;
  c.episode_len = 60;
  c.batch_size = 16;
  c.steps_batch_size = 4;
  c.moving_average_window = 20;
  c.target_update_interval = 5;
  c.memory_size = 200;
  c.lr = 1e-3;
  return c;
}

BackendPool echo_pool(std::size_t systems, std::function<std::string(const std::string&)> fuse_fn) {
  BackendPool pool;
  for (std::size_t i = 0; i < systems; ++i) {
    BackendSpec s;
    s.name = "echo-" + std::to_string(i);
    s.role = Role::translator;
    s.system_id = i;
    pool.translators.push_back(make_backend(s, [](const Json& r) -> Json { return {{"translation", r["source"]}}; }));
  }
  BackendSpec f;
  f.name = "fixed-fuser";
  f.role = Role::fuser;
  pool.fuser = make_backend(f, [fuse_fn](const Json& r) -> Json {
    return {{"translation", fuse_fn(r["source"].get<std::string>())}};
  });
  return pool;
}

}  // namespace

TEST_SUITE("dqn_trainer") {

TEST_CASE("epsilon schedule") {
  const TrainerConfig cfg;
  CHECK(epsilon_at(0, cfg) == doctest::Approx(0.9));
  CHECK(epsilon_at(8000, cfg) == doctest::Approx(0.05 + 0.85 * std::exp(-1.0)));
  CHECK(epsilon_at(8000, cfg) == doctest::Approx(0.3627).epsilon(1e-3));
  CHECK(epsilon_at(10'000'000, cfg) == doctest::Approx(0.05));
  double prev = 1.0;
  for (std::uint64_t s = 0; s < 50000; s += 97) {
    const double e = epsilon_at(s, cfg);
    CHECK(e <= prev);
    CHECK(e >= cfg.eps_end);
    CHECK(e <= cfg.eps_start);
    prev = e;
  }
}

TEST_CASE("config defaults and validation") {
  const TrainerConfig cfg;
  CHECK(cfg.batch_size == 128);
  CHECK(cfg.steps_batch_size == 8);
  CHECK(cfg.gamma == 0.99);
  CHECK(cfg.tau_polyak == 1e-3);
  CHECK(cfg.target_update_interval == 100);
  CHECK(cfg.memory_size == 50000);
  CHECK(cfg.lr == 4e-5);
  CHECK(cfg.episodes == 30);
  CHECK(cfg.episode_len == 1000);
  CHECK(cfg.moving_average_window == 100);
  CHECK_NOTHROW(cfg.validate(8));
  CHECK_THROWS_WITH_AS(cfg.validate(3), doctest::Contains("K = 3"), InvalidArgument);
  auto bad = cfg;
  bad.gamma = 1.0;
  CHECK_THROWS_WITH_AS(bad.validate(8), doctest::Contains("gamma"), InvalidArgument);
  bad = cfg;
  bad.eps_end = 0.95;
  CHECK_THROWS_AS(bad.validate(8), InvalidArgument);
  bad = cfg;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(8), InvalidArgument);
}

TEST_CASE("greedy top-K selection") {
  SplitMix64 rng(1);
  Eigen::VectorXd q(4);
  q << 0.1, 0.9, 0.3, 0.7;
  CHECK(select_action_set(q, 2, 0.0, rng) == std::vector<std::size_t>{1, 3});
  CHECK(select_action_set(Eigen::VectorXd::Constant(8, 0.5), 3, 0.0, rng) == std::vector<std::size_t>{0, 1, 2});
  CHECK_THROWS_AS(select_action_set(q, 5, 0.0, rng), InvalidArgument);
  CHECK_THROWS_AS(select_action_set(q, 2, 1.5, rng), InvalidArgument);
  q[0] = NAN;
  CHECK_THROWS_AS(select_action_set(q, 2, 0.0, rng), NumericError);
}

TEST_CASE("greedy selection depends only on the order of q") {
  SplitMix64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    Eigen::VectorXd q(8);
    for (auto& v : q) v = rng.uniform(-2, 2);
    const auto base = select_action_set(q, 3, 0.0, rng);
    const Eigen::VectorXd cubed = q.array().cube() * 5.0 + 1.0;
    const Eigen::VectorXd squashed = q.array().tanh() - 7.0;
    CHECK(select_action_set(cubed, 3, 0.0, rng) == base);
    CHECK(select_action_set(squashed, 3, 0.0, rng) == base);
    CHECK(q[static_cast<Eigen::Index>(base[0])] == q.maxCoeff());
  }
}

TEST_CASE("exploration is uniform over distinct subsets") {
  SplitMix64 rng(2024);
  const Eigen::VectorXd q = Eigen::VectorXd::LinSpaced(8, 0, 1);
  std::vector<int> counts(8, 0);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) {
    const auto s = select_action_set(q, 3, 1.0, rng);
    REQUIRE(std::set<std::size_t>(s.begin(), s.end()).size() == 3);
    for (auto a : s) ++counts[a];
  }
  for (int c : counts) CHECK(static_cast<double>(c) / draws == doctest::Approx(3.0 / 8.0).epsilon(0.02));

  SplitMix64 a(9), b(9);
  for (int i = 0; i < 50; ++i) CHECK(select_action_set(q, 3, 1.0, a) == select_action_set(q, 3, 1.0, b));
}

TEST_CASE("replay buffer is a FIFO ring") {
  ReplayBuffer buf(3);
  const auto s = state("x");
  for (int i = 0; i < 4; ++i) buf.push({s, static_cast<std::size_t>(i), 0.25 * i, s, false});
  CHECK(buf.size() == 3);
  CHECK(buf.at(0).a == 1);  // action 0 was evicted
  CHECK(buf.at(2).a == 3);
  CHECK_THROWS_AS(buf.at(3), InvalidArgument);
  CHECK_THROWS_AS(buf.push({s, 0, 1.2, s, false}), InvalidArgument);
  CHECK_THROWS_AS(buf.push({s, 0, -0.1, s, false}), InvalidArgument);
  CHECK_THROWS_AS(buf.push({nullptr, 0, 0.5, s, false}), InvalidArgument);
  CHECK_THROWS_AS(ReplayBuffer(0), InvalidArgument);
}

TEST_CASE("replay sampling") {
  ReplayBuffer buf(500);
  const auto s = state("y");
  SplitMix64 rng(4);
  CHECK_THROWS_AS(buf.sample(1, rng), InvalidArgument);
  for (std::size_t i = 0; i < 300; ++i) buf.push({s, i % 8, 0.5, s, false});
  CHECK_THROWS_AS(ReplayBuffer(500).sample(128, rng), InvalidArgument);
  SplitMix64 r1(17), r2(17);
  const auto b1 = buf.sample(128, r1);
  const auto b2 = buf.sample(128, r2);
  CHECK(b1.size() == 128);
  for (std::size_t i = 0; i < 128; ++i) CHECK(b1[i].a == b2[i].a);
}

TEST_CASE("huber") {
  CHECK(huber(0.5) == 0.125);
  CHECK(huber(-2.0) == 1.5);
  CHECK(huber(1.0) == 0.5);
}

TEST_CASE("bandit loss vanishes at the optimum") {
  const auto p = constant_q({0.2, 0.7, 0.4});
  const auto s = state("a"), s2 = state("b");
  const std::vector<Transition> batch{{s, 0, 0.2, s2, false}, {s2, 1, 0.7, s, false}, {s, 2, 0.4, s2, true}};
  TrainerConfig cfg;
  const auto td = td_loss_and_grads(p, constant_q({5, 5, 5}), batch, cfg);
  CHECK(td.loss == doctest::Approx(0.0));
  bool all_zero = true;
  qnet::for_each_tensor([&](const auto& g) { all_zero = all_zero && g.isZero(0.0); }, td.grads);
  CHECK(all_zero);
}

TEST_CASE("three-transition fixture with bootstrapped targets") {
  // Q_online = [0.2, 0.9, -1.5]; max Q_target = 0.3; gamma = 0.99.
  //   t1: terminal, r = 0.5         -> y = 0.5,   d = -0.3,   huber 0.045
  //   t2: a = 1, r = 0.1            -> y = 0.397, d = 0.503,  huber 0.1265045
  //   t3: a = 2, r = 0.0            -> y = 0.297, d = -1.797, huber 1.297
  const auto online = constant_q({0.2, 0.9, -1.5});
  const auto target = constant_q({0.3, 0.1, 0.0});
  const auto s = state("p"), s2 = state("q");
  const std::vector<Transition> batch{{s, 0, 0.5, s2, true}, {s, 1, 0.1, s2, false}, {s2, 2, 0.0, s, false}};
  TrainerConfig cfg;
  cfg.bandit_mode = false;
  const auto td = td_loss_and_grads(online, target, batch, cfg);
  CHECK(td.loss == doctest::Approx((0.045 + 0.1265045 + 1.297) / 3.0).epsilon(1e-12));
  CHECK(td.grads.head_b[0] == doctest::Approx(-0.3 / 3));
  CHECK(td.grads.head_b[1] == doctest::Approx(0.503 / 3));
  CHECK(td.grads.head_b[2] == doctest::Approx(-1.0 / 3));

  // Terminal targets ignore s'.
  const std::vector<Transition> terminal{{s, 0, 0.5, s2, true}};
  CHECK(td_loss_and_grads(online, target, terminal, cfg).loss ==
        td_loss_and_grads(online, constant_q({9, 9, 9}), terminal, cfg).loss);
  cfg.bandit_mode = true;
  CHECK(td_loss_and_grads(online, target, batch, cfg).loss ==
        doctest::Approx((huber(-0.3) + huber(0.8) + huber(-1.5)) / 3.0));
  CHECK_THROWS_AS(td_loss_and_grads(online, target, std::vector<Transition>{}, cfg), InvalidArgument);
  const std::vector<Transition> bad{{s, 3, 0.5, s2, true}};
  CHECK_THROWS_AS(td_loss_and_grads(online, target, bad, cfg), InvalidArgument);
}

TEST_CASE("TD gradients match finite differences") {
  SplitMix64 rng(77);
  const qnet::QNetShape shape{kStateDim, 6, 4};
  TrainerConfig cfg;
  cfg.bandit_mode = false;
  cfg.gamma = 0.9;
  for (int trial = 0; trial < 5; ++trial) {
    auto online = ef_test::random_params(shape, rng);
    const auto target = ef_test::random_params(shape, rng);
    std::vector<Transition> batch;
    for (int i = 0; i < 6; ++i)
      batch.push_back({state("s" + std::to_string(trial * 10 + i)), rng.below(4), rng.uniform(),
                       state("n" + std::to_string(i)), i % 3 == 0});
    const auto td = td_loss_and_grads(online, target, batch, cfg);
    std::vector<double*> params;
    std::vector<const double*> grads;
    qnet::for_each_tensor(
        [&](auto& t, const auto& g) {
          for (Eigen::Index i = 0; i < t.size(); ++i) {
            params.push_back(t.data() + i);
            grads.push_back(g.data() + i);
          }
        },
        online, td.grads);
    double worst = 0.0;
    for (int k = 0; k < 300; ++k) {
      const std::size_t i = rng.below(params.size());
      const double saved = *params[i], h = 1e-6;
      *params[i] = saved + h;
      const double up = td_loss_and_grads(online, target, batch, cfg).loss;
      *params[i] = saved - h;
      const double down = td_loss_and_grads(online, target, batch, cfg).loss;
      *params[i] = saved;
      const double numeric = (up - down) / (2 * h);
      if (std::abs(numeric) < 1e-9 && std::abs(*grads[i]) < 1e-9) continue;
      worst = std::max(worst, ef_test::relative_error(*grads[i], numeric, 1e-7));
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("reward from the fused translation") {
  const CorpusEntry e{0, "the source", "a b c d e f"};
  const std::vector<std::size_t> sel{0, 2};
  auto perfect = echo_pool(3, [&](const std::string&) { return e.reference; });
  CHECK(compute_reward(e, sel, perfect, "en", "hi").reward == 1.0);
  auto disjoint = echo_pool(3, [](const std::string&) { return "x y z w"; });
  CHECK(compute_reward(e, sel, disjoint, "en", "hi", {}, metrics::Smoothing::none).reward == 0.0);
  CHECK(compute_reward(e, sel, disjoint, "en", "hi").reward == 0.0);
  CHECK_THROWS_AS(compute_reward(e, std::vector<std::size_t>{}, perfect, "en", "hi"), InvalidArgument);
  CHECK_THROWS_AS(compute_reward(e, std::vector<std::size_t>{3}, perfect, "en", "hi"), InvalidArgument);
}

TEST_CASE("reward on a mock pool matches the brute-force metric") {
  mock::MockPoolConfig cfg;
  cfg.kind = mock::PoolKind::noisy_reference;
  cfg.dropout = 0.15;
  CorpusEntry e{0, "src one", "w1 w2 w3 w4 w5 w6 w7 w8 w9 w10 w11 w12 w13 w14 w15 w16 w17 w18"};
  cfg.references = std::make_shared<mock::ReferenceMap>(mock::ReferenceMap{{e.source, e.reference}});
  const auto pool = mock::make_mock_pool(cfg);
  const std::vector<std::size_t> sel{1, 4, 6};
  const auto out = compute_reward(e, sel, pool, "en", "hi");

  std::vector<std::string> cands;
  for (auto a : sel) cands.push_back(mock::noisy_translation(e.source, e.reference, a, 8, cfg.dropout, cfg.seed));
  CHECK(out.candidates == cands);
  CHECK(out.fused == mock::overlap_fuse(cands));
  const double oracle = ef_test::brute_corpus_bleu({ef_test::split_spaces(out.fused)},
                                                   {ef_test::split_spaces(e.reference)});
  REQUIRE(oracle > 0.0);  // every n-gram order matches, so smoothing plays no part
  CHECK(out.reward == doctest::Approx(oracle / 100.0).epsilon(1e-12));
}

TEST_CASE("parallel translation keeps positions") {
  mock::MockPoolConfig cfg;
  const auto pool = mock::make_mock_pool(cfg);
  const std::string src = mock::make_planted_corpus(1, 8, cfg.planted, 8).entries[0].source;
  const std::vector<std::size_t> sel{7, 0, 3, 5, 1};
  CostLedger seq_ledger, par_ledger;
  const auto seq = translate_systems(pool, src, sel, "src", "tgt", {0, &seq_ledger}, 1);
  const auto par = translate_systems(pool, src, sel, "src", "tgt", {0, &par_ledger}, 3);
  CHECK(seq == par);
  CHECK(par_ledger.role_calls(Role::translator) == 5);
}

TEST_CASE("backend failures carry the system and sentence") {
  auto pool = echo_pool(4, [](const std::string& s) { return s; });
  for (std::size_t i = 0; i < 4; ++i) {
    BackendSpec s;
    s.name = "broken-translator-" + std::to_string(i);
    s.role = Role::translator;
    s.system_id = i;
    pool.translators[i] = make_backend(s, [](const Json&) -> Json { throw std::runtime_error("down"); });
  }
  ParallelCorpus corpus;
  corpus.entries = {{5, "x y", "x y"}};
  auto cfg = small_config();
  try {
    run_training(corpus, pool, cfg, 1);
    FAIL("expected a backend error");
  } catch (const BackendError& e) {
    const std::string what = e.what();
    CHECK(what.find("broken-translator-") != std::string::npos);
    CHECK(what.find("down") != std::string::npos);
    CHECK(what.find("sentence 5") != std::string::npos);
  }
}

TEST_CASE("training edge cases") {
  mock::MockPoolConfig pcfg;
  const auto pool = mock::make_mock_pool(pcfg);
  auto cfg = small_config();
  cfg.episodes = 0;
  const auto corpus = mock::make_planted_corpus(10, 8, pcfg.planted, 1);
  const auto r = run_training(corpus, pool, cfg, 5);
  CHECK(r.params == qnet::init_network({kStateDim, qnet::kHiddenDim, 8}, combine_seed(5, 1)));
  CHECK(r.curve.empty());
  CHECK(r.env_steps == 0);
  CHECK_THROWS_AS(run_training(ParallelCorpus{}, pool, small_config(), 5), InvalidArgument);
}

TEST_CASE("training is deterministic and accounted") {
  mock::MockPoolConfig pcfg;
  pcfg.seed = 3;
  const auto pool = mock::make_mock_pool(pcfg);
  const auto corpus = mock::make_planted_corpus(40, 8, pcfg.planted, 2);
  const auto cfg = small_config();
  const auto a = run_training(corpus, pool, cfg, 9);
  const auto b = run_training(corpus, pool, cfg, 9);
  CHECK(a.params == b.params);
  CHECK(a.params.all_finite());
  CHECK_FALSE(a.params == qnet::init_network({kStateDim, qnet::kHiddenDim, 8}, combine_seed(9, 1)));

  const auto dir = ef_test::scratch_dir("dqn_determinism");
  qnet::save_checkpoint(a.params, dir / "a.bin");
  qnet::save_checkpoint(b.params, dir / "b.bin");
  CHECK(ef_test::slurp(dir / "a.bin") == ef_test::slurp(dir / "b.bin"));

  CHECK(a.env_steps == 120);
  CHECK(a.optimizer_steps == 120 / 4 - 1);  // the buffer holds 16 transitions after the 6th step
  CHECK(a.curve.size() == 6);
  CHECK(a.episode_mean_rewards.size() == 2);
  CHECK(a.ledger.role_calls(Role::translator) == 3 * 120);
  CHECK(a.ledger.role_calls(Role::fuser) == 120);
  CHECK(a.ledger.role_calls(Role::embedder) == 40);
  for (const auto& row : a.curve) {
    CHECK(row.mean_reward >= 0.0);
    CHECK(row.mean_reward <= 1.0);
    CHECK(row.step % 20 == 0);
  }
  CHECK(std::isfinite(a.curve.back().loss));

  write_learning_curve(a.curve, dir / "curve.csv");
  const auto rows = ef_test::read_tsv(dir / "curve.csv");
  CHECK(ef_test::slurp(dir / "curve.csv").rfind("episode,step,eps,mean_reward,loss\n", 0) == 0);
  CHECK(rows.size() == 7);

  const auto c = run_training(corpus, pool, cfg, 10);
  CHECK_FALSE(c.params == a.params);
}

}  // TEST_SUITE
