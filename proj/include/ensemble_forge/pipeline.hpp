#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ensemble_forge/backends.hpp"
#include "ensemble_forge/ccb.hpp"
#include "ensemble_forge/corpus.hpp"
#include "ensemble_forge/qnet.hpp"

namespace ensemble_forge::pipeline {

/// What one strategy produced for one sentence.
struct SentenceOutput {
  std::string translation;
  /// Systems asked to translate as part of the selection, in selection order.
  std::vector<std::size_t> selected;
  /// Texts handed to the fuser, aligned with `selected`.
  std::vector<std::string> candidates;
  std::vector<std::size_t> enhanced_positions;
  std::vector<ccb::AuditRecord> ccb_audit;
};

ccb::Languages languages_of(const ParallelCorpus& corpus);

/// Greedy top-K by Q, K translator calls, one fuser call.
SentenceOutput smartgen_translate(const CorpusEntry& entry, const qnet::QNetParams& q, const BackendPool& pool,
                                  std::size_t k, const ccb::Languages& langs, const CallContext& ctx = {},
                                  std::size_t max_concurrent = 1);

/// SmartGen plus the correction block. The K candidates are scored by
/// pool.reward and sorted; rejected systems are translated and scored only
/// when a gate fires. The fuser sees candidates in selection order, so with
/// no gate firing the output equals smartgen_translate's. cfg.enhancer
/// defaults to pool.enhancer and cfg.rescore to pool.reward.
SentenceOutput smartgen_pp_translate(const CorpusEntry& entry, const qnet::QNetParams& q, const BackendPool& pool,
                                     std::size_t k, ccb::CCBConfig cfg, const ccb::Languages& langs,
                                     const CallContext& ctx = {}, std::size_t max_concurrent = 1);

/// C(n, k), saturating at SIZE_MAX.
std::size_t binomial(std::size_t n, std::size_t k);
/// All k-subsets of 0..n-1 in lexicographic order.
std::vector<std::vector<std::size_t>> k_subsets(std::size_t n, std::size_t k);
/// "0-3-5"
std::string subset_key(const std::vector<std::size_t>& subset);

inline constexpr std::size_t kMaxOracleSubsets = 10000;

struct OracleResult {
  std::vector<std::vector<std::size_t>> subsets;
  std::vector<double> rewards;
  std::vector<std::string> fused;
  std::size_t best = 0;

  const std::vector<std::size_t>& best_subset() const { return subsets.at(best); }
  double best_reward() const { return rewards.at(best); }
};

/// Translates with all L systems once, then fuses and scores every K-subset
/// (normalized sentence BLEU). The first maximum in lexicographic order wins.
/// Throws InvalidArgument when C(L, K) exceeds kMaxOracleSubsets.
OracleResult brute_force_oracle(const CorpusEntry& entry, const BackendPool& pool, std::size_t k,
                                const ccb::Languages& langs, const CallContext& ctx = {});

enum class Selector { oracle, dqn, random, fixed_rank };
std::string_view to_string(Selector s);
Selector parse_selector(std::string_view name);

struct HistogramOptions {
  Selector selector = Selector::oracle;
  const qnet::QNetParams* q = nullptr;
  std::uint64_t seed = 0;
  /// fixed_rank picks these K systems for every sentence (default 0..K-1).
  std::vector<std::size_t> fixed_rank;
};

struct SubsetHistogram {
  std::vector<std::vector<std::size_t>> subsets;  // all C(L, K), lexicographic
  std::vector<std::size_t> counts;

  std::size_t nonzero() const;
  std::size_t total() const;
  void add(std::vector<std::size_t> subset);
};

SubsetHistogram empty_histogram(std::size_t systems, std::size_t k);

/// How often each K-subset is chosen over the corpus by the selector.
SubsetHistogram triplet_histogram(const ParallelCorpus& corpus, const BackendPool& pool, std::size_t k,
                                  const HistogramOptions& opts, CostLedger* ledger = nullptr);

/// Two columns, subset and count, with a header line.
void write_histogram_tsv(const SubsetHistogram& h, const std::filesystem::path& path);

struct ProbeResult {
  std::size_t sentences = 0;
  double reference_xk = 0.0;   // fused K copies of the reference
  double reference_top = 0.0;  // fused reference + top-(K-1) candidates by sentence BLEU
};

/// Corpus BLEU of the two fusion conditions. Throws InvalidArgument when a
/// sentence has fewer than K-1 cached candidates.
ProbeResult degradation_probe(const ParallelCorpus& corpus, const CandidateCache& cache, const BackendPool& pool,
                              std::size_t k, CostLedger* ledger = nullptr);
/// condition,bleu with exactly two rows.
void write_probe_csv(const ProbeResult& r, const std::filesystem::path& path);

enum class Method {
  single_system,
  random_k,
  oracle_topk_bleu,
  dqn_best_single,
  smartgen,
  smartgen_pp,
  full_pool_fusion,
  ranker_standin,
};

struct MethodSpec {
  Method method = Method::smartgen;
  std::size_t system = 0;  // single_system only

  std::string name() const;
  bool operator==(const MethodSpec&) const = default;
};

/// "single-system[:i]", "random-k", "oracle-topk-bleu", "dqn-best-single",
/// "smartgen", "smartgen++", "full-pool-fusion", "ranker-standin".
MethodSpec parse_method(std::string_view name);
/// The seven compared strategies (no ranker stand-in).
std::vector<MethodSpec> default_methods();

struct EvalOptions {
  std::size_t k = 3;
  const qnet::QNetParams* q = nullptr;
  ccb::CCBConfig ccb;
  std::uint64_t seed = 0;
  /// Sentences evaluated in parallel; each keeps its own ledger.
  std::size_t workers = 1;
  std::size_t max_concurrent_backends = 1;
  /// Modeled per-sentence ranking time of the ranker stand-in.
  double ranker_latency_s = 0.0;
};

struct SentenceRecord {
  std::size_t id = 0;
  std::string hypothesis;
  std::vector<std::size_t> selected;
  double sentence_bleu = 0.0;
  std::uint64_t translator_calls = 0;
  std::uint64_t fuser_calls = 0;
  std::uint64_t enhancer_calls = 0;
  std::uint64_t reward_calls = 0;
  std::vector<std::size_t> enhanced_positions;
  /// Correction-block log (smartgen++ only). Holds wall-clock latencies, so
  /// it stays out of to_json.
  std::vector<ccb::AuditRecord> ccb_audit;
};

struct EvalReport {
  std::string method;
  double bleu = 0.0;
  double chrf = 0.0;
  std::vector<SentenceRecord> records;
  CostSummary cost;
  double modeled_ranking_seconds = 0.0;
  /// Subsets of K systems chosen, for methods that choose K.
  std::optional<SubsetHistogram> histogram;
  CostLedger ledger;
};

/// Runs one strategy over the corpus. Throws InvalidArgument when the
/// strategy needs something the pool or options lack (Q-network, reward
/// backend, K outside 1..L).
EvalReport evaluate_method(const ParallelCorpus& corpus, const BackendPool& pool, const MethodSpec& method,
                           const EvalOptions& opts);
std::vector<EvalReport> evaluate(const ParallelCorpus& corpus, const BackendPool& pool,
                                 const std::vector<MethodSpec>& methods, const EvalOptions& opts);

/// Call counts and scores only, so equal inputs give equal bytes.
Json to_json(const EvalReport& r);
/// eval_summary.csv, eval_report.json and cost_quality.tsv (method,
/// translator calls per sentence, BLEU) under dir.
void write_reports(const std::vector<EvalReport>& reports, const std::filesystem::path& dir);

}  // namespace ensemble_forge::pipeline
