#include <fstream>
#include <set>

#include "doctest.h"
#include "ensemble_forge/corpus.hpp"
#include "ensemble_forge/error.hpp"
#include "test_support.hpp"

using namespace ensemble_forge;

namespace {

ParallelCorpus numbered_corpus(std::size_t n) {
  ParallelCorpus c;
  for (std::size_t i = 0; i < n; ++i)
    c.entries.push_back({i, "source " + std::to_string(i), "reference " + std::to_string(i)});
  return c;
}

}  // namespace

TEST_SUITE("corpus") {

TEST_CASE("load_parallel reads well-formed files") {
  const auto dir = ef_test::scratch_dir("corpus_load");
  {
    std::ofstream(dir / "two.tsv") << "hello\tनमस्ते\n\nhow are you\tआप कैसे हैं\n";
    std::ofstream(dir / "empty.tsv");
  }
  const auto c = load_parallel(dir / "two.tsv");
  REQUIRE(c.size() == 2);
  CHECK(c.entries[0].id == 0);
  CHECK(c.entries[1].id == 1);
  CHECK(c.entries[1].reference == "आप कैसे हैं");
  CHECK(load_parallel(dir / "empty.tsv").empty());

  const auto out = dir / "copy.tsv";
  save_parallel(c, out);
  const auto again = load_parallel(out);
  REQUIRE(again.size() == 2);
  CHECK(again.entries[0].source == "hello");
}

TEST_CASE("load_parallel errors name the line") {
  const auto dir = ef_test::scratch_dir("corpus_bad");
  std::ofstream(dir / "bad.tsv") << "a\tb\nonly one column\n";
  CHECK_THROWS_WITH_AS(load_parallel(dir / "bad.tsv"), doctest::Contains(":2:"), FormatError);
  std::ofstream(dir / "three.tsv") << "a\tb\tc\n";
  CHECK_THROWS_AS(load_parallel(dir / "three.tsv"), FormatError);
  CHECK_THROWS_AS(load_parallel(dir / "missing.tsv"), IoError);
}

TEST_CASE("candidate cache round trip") {
  const auto dir = ef_test::scratch_dir("cache");
  CandidateCache empty(8);
  save_cache(empty, dir / "empty.jsonl");
  CHECK(load_cache(dir / "empty.jsonl") == empty);

  CandidateCache cache(8);
  for (std::size_t id : {3u, 1u})
    for (std::size_t s = 8; s-- > 0;)
      cache.put(id, {s, "cand " + std::to_string(id) + "/" + std::to_string(s) + " \"q\" हिं"});
  save_cache(cache, dir / "c.jsonl");
  const auto loaded = load_cache(dir / "c.jsonl", 8);
  CHECK(loaded == cache);
  save_cache(loaded, dir / "c2.jsonl");
  CHECK(ef_test::slurp(dir / "c.jsonl") == ef_test::slurp(dir / "c2.jsonl"));
  CHECK(loaded.candidates(1).front().system_id == 0);
  CHECK(loaded.find(3, 5)->text.starts_with("cand 3/5"));
  CHECK(loaded.find(2, 0) == nullptr);
  CHECK_THROWS_AS(load_cache(dir / "c.jsonl", 4), FormatError);
}

TEST_CASE("candidate cache rejects bad system ids and versions") {
  CandidateCache cache(2);
  CHECK_THROWS_AS(cache.put(0, {2, "x"}), InvalidArgument);
  cache.put(0, {1, "x"});
  CHECK_THROWS_AS(cache.put(0, {1, "y"}), InvalidArgument);

  const auto dir = ef_test::scratch_dir("cache_bad");
  std::ofstream(dir / "sys.jsonl")
      << R"({"schema":"ensemble-forge/candidates","version":1,"systems":2})" << '\n'
      << R"({"id":0,"candidates":[{"system":2,"text":"x"}]})" << '\n';
  CHECK_THROWS_AS(load_cache(dir / "sys.jsonl"), FormatError);
  std::ofstream(dir / "ver.jsonl")
      << R"({"schema":"ensemble-forge/candidates","version":9,"systems":2})" << '\n';
  CHECK_THROWS_WITH_AS(load_cache(dir / "ver.jsonl"), doctest::Contains("version"), FormatError);
}

TEST_CASE("sample_subset") {
  const auto corpus = numbered_corpus(1000);
  const auto whole = sample_subset(corpus, 1.0, 3);
  REQUIRE(whole.size() == 1000);
  CHECK(whole.entries[999].id == 999);

  const auto a = sample_subset(corpus, 0.1, 42);
  const auto b = sample_subset(corpus, 0.1, 42);
  REQUIRE(a.size() == 100);
  std::set<std::size_t> ids;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.entries[i].id == b.entries[i].id);
    CHECK(a.entries[i].source == corpus.entries[a.entries[i].id].source);
    if (i > 0) CHECK(a.entries[i - 1].id < a.entries[i].id);
    ids.insert(a.entries[i].id);
  }
  CHECK(ids.size() == 100);
  CHECK(sample_subset(corpus, 0.1, 43).entries[0].id != a.entries[0].id);
  CHECK(sample_subset(numbered_corpus(100), 0.7, 1).size() == 70);
  CHECK(sample_subset(numbered_corpus(7), 0.5, 1).size() == 4);
  CHECK_THROWS_AS(sample_subset(corpus, 0.0, 1), InvalidArgument);
  CHECK_THROWS_AS(sample_subset(corpus, 1.5, 1), InvalidArgument);
}

}  // TEST_SUITE
