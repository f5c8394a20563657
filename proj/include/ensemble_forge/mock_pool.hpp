#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "ensemble_forge/backends.hpp"
#include "ensemble_forge/corpus.hpp"

namespace ensemble_forge::mock {

/// Position-wise vote over whitespace tokens. Position j survives when at
/// least half of the candidates are longer than j; its token is the most
/// frequent one there, ties going to the lexicographically smallest.
std::string majority_string(const std::vector<std::string>& candidates);

/// The candidate with the largest clipped unigram overlap with the majority
/// string. Ties: length closest to the majority string, then the smallest
/// text. Independent of candidate order. Throws InvalidArgument when empty.
std::string overlap_fuse(const std::vector<std::string>& candidates);

enum class PoolKind { planted, noisy_reference, fixed_table };
enum class EnhancerMode { reference, identity, best_rejected };

std::string_view to_string(PoolKind kind);
PoolKind parse_pool_kind(std::string_view name);
std::string_view to_string(EnhancerMode mode);
EnhancerMode parse_enhancer_mode(std::string_view name);

/// Planted environment. Every source carries K marker words; the systems
/// owning those markers are the sentence's good set G. Good systems copy the
/// reference with a few substituted tokens (always at least one). All other
/// systems emit one shared decoy: a scrambled bag holding two copies of each
/// reference word and every token the good systems substituted. The decoy
/// covers whatever the majority string can contain, so the overlap fuser
/// returns it whenever it takes part, and its BLEU sits near the floor.
/// Only the subset G scores well, and it is a known function of the text.
struct PlantedConfig {
  std::size_t k = 3;
  double good_noise = 0.1;
  std::size_t min_fillers = 3;
  std::size_t max_fillers = 6;
};

/// Marker words of one system (two spellings each).
std::vector<std::string> planted_markers(std::size_t system);
/// Reference of a planted source: every word spelled backwards.
std::string planted_reference(std::string_view source);
/// Good set of a source, sorted. Marker systems in order of appearance; if
/// fewer than K markers occur the rest is filled from a hash of the text.
std::vector<std::size_t> planted_good_set(std::string_view source, std::size_t systems,
                                          const PlantedConfig& cfg);
/// n sentences whose good sets are drawn uniformly from all K-subsets.
ParallelCorpus make_planted_corpus(std::size_t n, std::size_t systems, const PlantedConfig& cfg,
                                   std::uint64_t seed);
std::string planted_translation(std::string_view source, std::size_t system, std::size_t systems,
                                const PlantedConfig& cfg, std::uint64_t seed);

/// Reference with each token dropped independently. System i uses rate
/// dropout * (0.5 + i / (L - 1)), capped at 0.95.
std::string noisy_translation(std::string_view source, std::string_view reference,
                              std::size_t system, std::size_t systems, double dropout,
                              std::uint64_t seed);

using ReferenceMap = std::map<std::string, std::string, std::less<>>;
/// Per system: source -> translation.
using TranslationTable = std::vector<std::map<std::string, std::string, std::less<>>>;

ReferenceMap reference_map(const ParallelCorpus& corpus);
TranslationTable table_from_cache(const ParallelCorpus& corpus, const CandidateCache& cache);

struct MockPoolConfig {
  PoolKind kind = PoolKind::planted;
  std::size_t systems = 8;
  std::uint64_t seed = 0;
  PlantedConfig planted;
  double dropout = 0.3;
  /// Needed by noisy_reference and by the "reference" enhancer. Sources
  /// without an entry fall back to copying the source.
  std::shared_ptr<const ReferenceMap> references;
  /// fixed_table lookups; a missing entry copies the source.
  std::shared_ptr<const TranslationTable> table;
  EnhancerMode enhancer = EnhancerMode::reference;
};

/// Translators 0..L-1, the overlap fuser, a prompt-parsing enhancer and the
/// hashing embedder, all in-process and deterministic per seed. The reward
/// slot is left empty. Throws InvalidArgument for L < 2 or missing tables.
BackendPool make_mock_pool(const MockPoolConfig& cfg);

/// Reference text the mock environment considers correct for a source
/// (planted: derived from the source; others: the reference map).
std::string mock_reference(const MockPoolConfig& cfg, const std::string& source);

}  // namespace ensemble_forge::mock
