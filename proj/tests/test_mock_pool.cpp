#include <algorithm>
#include <set>

#include "doctest.h"
#include "ensemble_forge/error.hpp"
#include "ensemble_forge/metrics.hpp"
#include "ensemble_forge/mock_pool.hpp"
#include "test_support.hpp"

using namespace ensemble_forge;
using namespace ensemble_forge::mock;

namespace {

std::vector<std::vector<std::size_t>> all_subsets(std::size_t n, std::size_t k) {
  std::vector<std::vector<std::size_t>> out;
  for (unsigned mask = 0; mask < (1u << n); ++mask) {
    if (static_cast<std::size_t>(__builtin_popcount(mask)) != k) continue;
    std::vector<std::size_t> s;
    for (std::size_t i = 0; i < n; ++i)
      if (mask & (1u << i)) s.push_back(i);
    out.push_back(s);
  }
  return out;
}

double subset_reward(const CorpusEntry& e, const std::vector<std::size_t>& subset, std::size_t systems,
                     const PlantedConfig& cfg, std::uint64_t seed) {
  std::vector<std::string> cands;
  for (auto a : subset) cands.push_back(planted_translation(e.source, a, systems, cfg, seed));
  const auto fused = overlap_fuse(cands);
  return metrics::sentence_bleu(metrics::tokenize(fused), metrics::tokenize(e.reference)).value / 100.0;
}

}  // namespace

TEST_SUITE("mock_pool") {

TEST_CASE("majority string by hand") {
  CHECK(majority_string({"a b c", "a x c", "a b"}) == "a b c");
  // Position 2 is reached by one of three candidates, so it is dropped.
  CHECK(majority_string({"a b c", "a b", "a b"}) == "a b");
  CHECK(majority_string({"z y", "a y"}) == "a y");  // tie goes to the smaller token
  CHECK(majority_string({}).empty());
}

TEST_CASE("overlap fuse is order independent") {
  std::vector<std::string> c{"the cat sat", "the cat sat down", "a cat sat", "the dog sat"};
  const auto expected = overlap_fuse(c);
  CHECK(expected == "the cat sat");
  std::sort(c.begin(), c.end());
  do {
    CHECK(overlap_fuse(c) == expected);
  } while (std::next_permutation(c.begin(), c.end()));
  CHECK(overlap_fuse({"only"}) == "only");
  CHECK(overlap_fuse({"b", "a"}) == "a");
  CHECK_THROWS_AS(overlap_fuse({}), InvalidArgument);
}

TEST_CASE("planted markers are distinct long words") {
  std::set<std::string> seen;
  for (std::size_t a = 0; a < 8; ++a)
    for (const auto& m : planted_markers(a)) {
      CHECK(m.size() == 8);
      CHECK(m.find('q') == std::string::npos);
      seen.insert(m);
    }
  CHECK(seen.size() == 16);
  CHECK(planted_reference("abc de") == "cba ed");
}

TEST_CASE("planted corpus draws good sets uniformly") {
  const PlantedConfig cfg;
  const auto corpus = make_planted_corpus(2000, 8, cfg, 11);
  std::map<std::vector<std::size_t>, int> counts;
  for (const auto& e : corpus.entries) {
    const auto g = planted_good_set(e.source, 8, cfg);
    CHECK(g.size() == 3);
    CHECK(std::is_sorted(g.begin(), g.end()));
    CHECK(e.reference == planted_reference(e.source));
    const auto words = ef_test::split_spaces(e.source);
    CHECK(words.size() >= 3 + cfg.min_fillers);
    CHECK(words.size() <= 3 + cfg.max_fillers);
    ++counts[g];
  }
  CHECK(counts.size() == 56);
  for (const auto& [g, n] : counts) {
    CHECK(n > 10);  // expected 35.7 per subset
    CHECK(n < 70);
  }
  CHECK(make_planted_corpus(5, 8, cfg, 11).entries[3].source == corpus.entries[3].source);
  CHECK(make_planted_corpus(5, 8, cfg, 12).entries[3].source != corpus.entries[3].source);
}

TEST_CASE("good set falls back deterministically without markers") {
  const PlantedConfig cfg;
  const auto g = planted_good_set("plain words only", 8, cfg);
  CHECK(g.size() == 3);
  CHECK(g == planted_good_set("plain words only", 8, cfg));
  PlantedConfig bad;
  bad.k = 9;
  CHECK_THROWS_AS(planted_good_set("x", 8, bad), InvalidArgument);
}

TEST_CASE("the good set is nearly always the best subset") {
  // With two good members and the decoy, the fuser can return a cleaner good
  // translation than G itself does, so G is not the argmax everywhere.
  const PlantedConfig cfg;
  const auto corpus = make_planted_corpus(100, 8, cfg, 5);
  const auto subsets = all_subsets(8, 3);
  int g_best = 0;
  double g_sum = 0.0, oracle_sum = 0.0;
  for (const auto& e : corpus.entries) {
    const auto g = planted_good_set(e.source, 8, cfg);
    double best_other = 0.0, good = 0.0;
    for (const auto& s : subsets) {
      const double r = subset_reward(e, s, 8, cfg, 3);
      std::size_t members = 0;
      for (auto a : s) members += std::binary_search(g.begin(), g.end(), a);
      if (members <= 1) CHECK(r < 0.25);
      if (s == g) good = r;
      else best_other = std::max(best_other, r);
    }
    CHECK(good >= 0.3);
    g_best += good >= best_other;
    g_sum += good;
    oracle_sum += std::max(good, best_other);
  }
  CHECK(g_best >= 95);
  CHECK(g_sum >= 0.97 * oracle_sum);
}

TEST_CASE("good translations always differ from the reference") {
  const PlantedConfig cfg;
  const auto corpus = make_planted_corpus(100, 8, cfg, 9);
  for (const auto& e : corpus.entries)
    for (auto a : planted_good_set(e.source, 8, cfg)) {
      const auto t = planted_translation(e.source, a, 8, cfg, 1);
      CHECK(t != e.reference);
      CHECK(ef_test::split_spaces(t).size() == ef_test::split_spaces(e.reference).size());
      CHECK(t == planted_translation(e.source, a, 8, cfg, 1));
    }
}

TEST_CASE("noisy reference pool") {
  const std::string ref = "one two three four five six seven eight nine ten";
  for (std::size_t i = 0; i < 8; ++i) CHECK(noisy_translation("src", ref, i, 8, 0.0, 1) == ref);
  // Later systems drop more on average.
  double first = 0, last = 0;
  for (int s = 0; s < 300; ++s) {
    first += ef_test::split_spaces(noisy_translation("src", ref, 0, 8, 0.3, s)).size();
    last += ef_test::split_spaces(noisy_translation("src", ref, 7, 8, 0.3, s)).size();
  }
  CHECK(first / 300 == doctest::Approx(10 * 0.85).epsilon(0.05));
  CHECK(last / 300 == doctest::Approx(10 * 0.55).epsilon(0.08));

  MockPoolConfig cfg;
  cfg.kind = PoolKind::noisy_reference;
  CHECK_THROWS_AS(make_mock_pool(cfg), InvalidArgument);
  cfg.references = std::make_shared<ReferenceMap>(ReferenceMap{{"src", ref}});
  cfg.dropout = 0.0;
  const auto pool = make_mock_pool(cfg);
  CHECK(translate(*pool.translators[4], "src", "en", "hi") == ref);
  CHECK(translate(*pool.translators[4], "unknown", "en", "hi") == "unknown");
}

TEST_CASE("fixed table pool") {
  ParallelCorpus corpus;
  corpus.entries = {{0, "hello", "namaste"}};
  CandidateCache cache(2);
  cache.put(0, {0, "namaste"});
  cache.put(0, {1, "hello ji"});
  MockPoolConfig cfg;
  cfg.kind = PoolKind::fixed_table;
  cfg.systems = 2;
  cfg.table = std::make_shared<TranslationTable>(table_from_cache(corpus, cache));
  const auto pool = make_mock_pool(cfg);
  CHECK(translate(*pool.translators[0], "hello", "en", "hi") == "namaste");
  CHECK(translate(*pool.translators[1], "hello", "en", "hi") == "hello ji");
  CHECK(translate(*pool.translators[1], "bye", "en", "hi") == "bye");
  cfg.systems = 3;
  CHECK_THROWS_AS(make_mock_pool(cfg), InvalidArgument);
}

TEST_CASE("mock pool roles and determinism") {
  MockPoolConfig cfg;
  cfg.seed = 4;
  const auto a = make_mock_pool(cfg);
  const auto b = make_mock_pool(cfg);
  CHECK(a.size() == 8);
  CHECK_FALSE(a.reward);
  const auto src = make_planted_corpus(1, 8, cfg.planted, 2).entries[0].source;
  for (std::size_t i = 0; i < 8; ++i)
    CHECK(translate(*a.translators[i], src, "src", "tgt") == translate(*b.translators[i], src, "src", "tgt"));
  CHECK((embed(*a.embedder, src).values() - hash_embed(src).values()).norm() < 1e-12);
  CHECK(parse_pool_kind("fixed_table") == PoolKind::fixed_table);
  CHECK(parse_enhancer_mode(to_string(EnhancerMode::best_rejected)) == EnhancerMode::best_rejected);
  CHECK_THROWS_AS(parse_pool_kind("table"), InvalidArgument);
  cfg.systems = 1;
  CHECK_THROWS_AS(make_mock_pool(cfg), InvalidArgument);
}

}  // TEST_SUITE
