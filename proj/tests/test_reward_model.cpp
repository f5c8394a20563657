#include <cmath>
#include <fstream>

#include "doctest.h"
#include "ensemble_forge/error.hpp"
#include "ensemble_forge/mock_pool.hpp"
#include "ensemble_forge/reward_model.hpp"
#include "gradcheck.hpp"
#include "test_support.hpp"

using namespace ensemble_forge;
using namespace ensemble_forge::rm;

namespace {

double brute_loss(const std::vector<double>& p, const std::vector<double>& r) {
  double sum = 0.0;
  for (double a : p)
    for (double b : r) sum += -std::log(1.0 / (1.0 + std::exp(-(a - b))));
  return sum / static_cast<double>(p.size() * r.size());
}

RMParams random_rm(SplitMix64& rng, double scale = 1.0) {
  RMParams p;
  for (auto& v : p.w) v = rng.uniform(-scale, scale);
  p.bias = rng.uniform(-1, 1);
  return p;
}

}  // namespace

TEST_SUITE("reward_model") {

TEST_CASE("features") {
  const auto f = rm_featurize("a source sentence", "एक अनुवाद");
  CHECK(static_cast<std::size_t>(f.size()) == 1536);
  CHECK(f.head(768).norm() == doctest::Approx(1.0));
  CHECK(f.tail(768).norm() == doctest::Approx(1.0));
  CHECK(f == rm_featurize("a source sentence", "एक अनुवाद"));
  CHECK(f.head(768) == hash_embed("a source sentence").values());
  for (int i = 0; i < 30; ++i) {
    const auto a = rm_featurize("src", "candidate " + std::to_string(i));
    const auto b = rm_featurize("src", "candidate " + std::to_string(i + 1));
    CHECK(a.head(768) == b.head(768));
    CHECK(a.tail(768) != b.tail(768));
  }
  CHECK(rm_featurize("src", "").tail(768).norm() == doctest::Approx(1.0));
}

TEST_CASE("scores") {
  RMParams p;
  CHECK(rm_score(p, "s", "c") == 0.0);
  p.bias = 0.37;
  CHECK(rm_score(p, "s", "c") == 0.37);

  SplitMix64 rng(5);
  p = random_rm(rng);
  const auto src = hash_embed("fixture source").values();
  const auto cand = hash_embed("fixture candidate").values();
  double expected = p.bias;
  for (std::size_t i = 0; i < 768; ++i) expected += p.w[static_cast<Eigen::Index>(i)] * src[static_cast<Eigen::Index>(i)];
  for (std::size_t i = 0; i < 768; ++i)
    expected += p.w[static_cast<Eigen::Index>(768 + i)] * cand[static_cast<Eigen::Index>(i)];
  CHECK(rm_score(p, "fixture source", "fixture candidate") == doctest::Approx(expected).epsilon(1e-12));
  CHECK_THROWS_AS(rm_score(p, Eigen::VectorXd::Zero(3)), InvalidArgument);
}

TEST_CASE("log sigmoid is stable") {
  for (double x : {-30.0, -2.5, 0.0, 0.7, 12.0})
    CHECK(log_sigmoid(x) == doctest::Approx(std::log(1.0 / (1.0 + std::exp(-x)))).epsilon(1e-12));
  CHECK(log_sigmoid(1000.0) == 0.0);
  CHECK(log_sigmoid(-1000.0) == -1000.0);
}

TEST_CASE("pairwise loss examples") {
  const std::vector<double> equal{0.3, 0.3};
  CHECK(pairwise_loss(equal, std::vector<double>{0.3, 0.3, 0.3}).loss == doctest::Approx(std::log(2.0)));
  CHECK(pairwise_loss(std::vector<double>{20.0, 21.0}, std::vector<double>{0.0, 1.0}).loss < 1e-8);
  CHECK_THROWS_AS(pairwise_loss(std::vector<double>{}, equal), InvalidArgument);
  CHECK_THROWS_AS(pairwise_loss(equal, std::vector<double>{}), InvalidArgument);
}

TEST_CASE("pairwise loss equals brute force for every set size up to 5") {
  SplitMix64 rng(11);
  for (std::size_t np = 1; np <= 5; ++np)
    for (std::size_t nr = 1; nr <= 5; ++nr)
      for (int trial = 0; trial < 4; ++trial) {
        std::vector<double> p(np), r(nr);
        for (auto& v : p) v = rng.uniform(-3, 3);
        for (auto& v : r) v = rng.uniform(-3, 3);
        const auto pl = pairwise_loss(p, r);
        CHECK(pl.loss == doctest::Approx(brute_loss(p, r)).epsilon(1e-12));

        // Depends on differences only.
        auto ps = p, rs = r;
        for (auto& v : ps) v += 4.2;
        for (auto& v : rs) v += 4.2;
        CHECK(pairwise_loss(ps, rs).loss == doctest::Approx(pl.loss).epsilon(1e-10));

        // Raising every preferred score lowers the loss.
        for (auto& v : ps) v += 0.1;
        CHECK(pairwise_loss(ps, rs).loss < pl.loss);

        // Score derivatives by central differences.
        const double h = 1e-6;
        for (std::size_t i = 0; i < np; ++i) {
          auto up = p, down = p;
          up[i] += h;
          down[i] -= h;
          CHECK(pl.d_preferred[i] == doctest::Approx((brute_loss(up, r) - brute_loss(down, r)) / (2 * h)).epsilon(1e-5));
        }
      }
}

TEST_CASE("sample loss matches brute force over all pairs") {
  SplitMix64 rng(12);
  const auto p = random_rm(rng, 0.5);
  const PreferenceSets sets{{"ref text", "good one"}, {"bad a", "bad b", "worse c"}};
  std::vector<double> sp, sr;
  for (const auto& t : sets.preferred) sp.push_back(rm_score(p, "src", t));
  for (const auto& t : sets.rejected) sr.push_back(rm_score(p, "src", t));
  CHECK(rm_loss_and_grads(p, "src", sets).loss == doctest::Approx(brute_loss(sp, sr)).epsilon(1e-12));
  CHECK_THROWS_AS(rm_loss_and_grads(p, "src", {{"a"}, {}}), InvalidArgument);
}

TEST_CASE("gradients match finite differences") {
  SplitMix64 rng(13);
  for (int trial = 0; trial < 4; ++trial) {
    auto p = random_rm(rng, 0.8);
    const PreferenceSets sets{{"r e f", "p one", "p two"}, {"x one", "x two", "x three", "x four"}};
    const auto g = rm_loss_and_grads(p, "some source", sets);
    CHECK(g.grads.bias == doctest::Approx(0.0));
    double worst = 0.0;
    for (int k = 0; k < 200; ++k) {
      const auto i = static_cast<Eigen::Index>(rng.below(kFeatureDim));
      const double saved = p.w[i], h = 1e-5;
      p.w[i] = saved + h;
      const double up = rm_loss_and_grads(p, "some source", sets).loss;
      p.w[i] = saved - h;
      const double down = rm_loss_and_grads(p, "some source", sets).loss;
      p.w[i] = saved;
      const double numeric = (up - down) / (2 * h);
      if (std::abs(numeric) < 1e-9 && std::abs(g.grads.w[i]) < 1e-9) continue;
      worst = std::max(worst, ef_test::relative_error(g.grads.w[i], numeric, 1e-7));
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("separable preferences are learned") {
  SplitMix64 rng(21);
  std::vector<FeatureSample> samples;
  for (int s = 0; s < 40; ++s) {
    FeatureSample fs{Eigen::MatrixXd(kFeatureDim, 3), Eigen::MatrixXd(kFeatureDim, 4)};
    for (auto* m : {&fs.preferred, &fs.rejected})
      for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = rng.uniform(-0.05, 0.05);
    fs.preferred.row(7).setConstant(1.0);
    fs.rejected.row(7).setConstant(-1.0);
    samples.push_back(fs);
  }
  const RMParams p0;
  const auto p = sgd_train(samples, p0, 0.5, 3000, 1);
  double mean = 0.0;
  for (const auto& s : samples) mean += sample_loss(p, s);
  mean /= static_cast<double>(samples.size());
  CHECK(sample_loss(p0, samples[0]) == doctest::Approx(std::log(2.0)));
  CHECK(mean < 0.01);
  CHECK(sgd_train(samples, p0, 0.5, 0, 1) == p0);
  CHECK(sgd_train(samples, p0, 0.5, 50, 4) == sgd_train(samples, p0, 0.5, 50, 4));
  CHECK_FALSE(sgd_train(samples, p0, 0.5, 50, 4) == sgd_train(samples, p0, 0.5, 50, 5));
}

TEST_CASE("preference sets") {
  const CorpusEntry e{3, "src", "a b c d e"};
  const std::vector<TranslationCandidate> cands{
      {0, "x y z"}, {1, "a b c d e"}, {2, "a b c d"}, {3, "a b c"}, {4, "a b"}, {5, "a b c"}, {6, "q"}};
  const auto sets = preference_sets(e, cands);
  CHECK(sets.preferred == std::vector<std::string>{"a b c d e", "a b c d e", "a b c d", "a b c"});
  // system 5 duplicates a preferred text and is left out of R
  CHECK(sets.rejected == std::vector<std::string>{"a b", "x y z", "q"});
  CHECK(preference_sets(e, std::span(cands).first(3)).rejected.empty());
}

TEST_CASE("training on a candidate cache") {
  mock::MockPoolConfig pcfg;
  pcfg.kind = mock::PoolKind::noisy_reference;
  ParallelCorpus corpus;
  for (std::size_t i = 0; i < 12; ++i)
    corpus.entries.push_back({i, "source " + std::to_string(i), "w" + std::to_string(i) + " a b c d e f g h"});
  pcfg.references = std::make_shared<mock::ReferenceMap>(mock::reference_map(corpus));
  const auto pool = mock::make_mock_pool(pcfg);
  CandidateCache cache(8);
  for (const auto& e : corpus.entries)
    for (std::size_t s = 0; s < 8; ++s) cache.put(e.id, {s, translate(*pool.translators[s], e.source, "en", "hi")});

  RMTrainConfig cfg;
  cfg.steps = 400;
  cfg.seed = 2;
  const auto a = rm_train(corpus, cache, RMParams{}, cfg);
  const auto b = rm_train(corpus, cache, RMParams{}, cfg);
  CHECK(a.params == b.params);
  CHECK(a.samples + a.skipped == 12);
  CHECK(a.initial_loss == doctest::Approx(std::log(2.0)));
  CHECK(a.final_loss < a.initial_loss);
  cfg.steps = 0;
  CHECK(rm_train(corpus, cache, a.params, cfg).params == a.params);

  CandidateCache thin(8);
  for (const auto& e : corpus.entries) thin.put(e.id, {0, "only"});
  cfg.steps = 10;
  const auto none = [&] { return rm_train(corpus, thin, RMParams{}, cfg); };
  CHECK_THROWS_AS(none(), InvalidArgument);

  const auto rows = score_cache(a.params, corpus, cache);
  CHECK(rows.size() == 96);
  CHECK(rows[9].id == 1);
  CHECK(rows[9].system == 1);
  CHECK(rows[9].score == rm_score(a.params, corpus.entries[1].source, cache.candidates(1)[1].text));
  const auto dir = ef_test::scratch_dir("rm_scores");
  write_score_dump(rows, dir / "scores.csv");
  const auto text = ef_test::slurp(dir / "scores.csv");
  CHECK(text.rfind("id,system,score\n0,0,", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 97);
}

TEST_CASE("checkpoint round trip and corruption") {
  SplitMix64 rng(31);
  const auto p = random_rm(rng);
  const auto dir = ef_test::scratch_dir("rm_ckpt");
  save_rm(p, dir / "rm.bin");
  CHECK(load_rm(dir / "rm.bin") == p);
  CHECK(std::filesystem::file_size(dir / "rm.bin") == 4 + 4 + 8 + 8 + 8 * 1536);

  auto bytes = ef_test::slurp(dir / "rm.bin");
  auto write = [&](const std::string& name, const std::string& content) {
    std::ofstream(dir / name, std::ios::binary) << content;
    return dir / name;
  };
  CHECK_THROWS_AS(load_rm(write("short.bin", bytes.substr(0, bytes.size() - 3))), FormatError);
  CHECK_THROWS_AS(load_rm(write("long.bin", bytes + "x")), FormatError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(load_rm(write("magic.bin", bad_magic)), FormatError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  CHECK_THROWS_WITH_AS(load_rm(write("version.bin", bad_version)), doctest::Contains("version 9"), FormatError);
  CHECK_THROWS_AS(load_rm(dir / "missing.bin"), IoError);
}

TEST_CASE("reward backend") {
  SplitMix64 rng(41);
  const auto p = random_rm(rng, 0.1);
  const auto b = make_rm_backend(p);
  CostLedger ledger;
  CHECK(score(*b, "src", "cand", {2, &ledger}) == rm_score(p, "src", "cand"));
  CHECK(ledger.sentence_role_calls(2, Role::reward) == 1);
  CHECK(b->spec().role == Role::reward);
}

}  // TEST_SUITE
