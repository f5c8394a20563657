#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace ensemble_forge {

struct CorpusEntry {
  std::size_t id = 0;
  std::string source;
  std::string reference;
};

/// Parallel sentences. Loaded corpora have ids 0..N-1 in file order;
/// subsets keep the ids of the corpus they were drawn from.
struct ParallelCorpus {
  std::vector<CorpusEntry> entries;
  std::string src_lang = "en";
  std::string tgt_lang = "hi";

  std::size_t size() const noexcept { return entries.size(); }
  bool empty() const noexcept { return entries.empty(); }
};

/// Reads `source<TAB>reference` lines. Blank lines are skipped.
/// Throws IoError for a missing file and FormatError (with the line number)
/// for a line without exactly two columns or with an empty source.
ParallelCorpus load_parallel(const std::filesystem::path& path, std::string src_lang = "en",
                             std::string tgt_lang = "hi");
void save_parallel(const ParallelCorpus& corpus, const std::filesystem::path& path);

/// Draws ceil(fraction * N) entries uniformly without replacement and
/// returns them in their original order. Throws InvalidArgument unless
/// 0 < fraction <= 1.
ParallelCorpus sample_subset(const ParallelCorpus& corpus, double fraction, std::uint64_t seed);

struct TranslationCandidate {
  std::size_t system_id = 0;
  std::string text;

  bool operator==(const TranslationCandidate&) const = default;
};

/// Per-sentence candidate translations, at most one per system.
class CandidateCache {
 public:
  static constexpr int kSchemaVersion = 1;

  explicit CandidateCache(std::size_t num_systems);

  std::size_t num_systems() const noexcept { return num_systems_; }

  /// Throws InvalidArgument for system_id >= num_systems or a duplicate
  /// (id, system_id) pair.
  void put(std::size_t entry_id, TranslationCandidate candidate);

  const TranslationCandidate* find(std::size_t entry_id, std::size_t system_id) const;

  /// Candidates for one entry ordered by system id; empty if unknown.
  const std::vector<TranslationCandidate>& candidates(std::size_t entry_id) const;

  const std::map<std::size_t, std::vector<TranslationCandidate>>& entries() const noexcept {
    return entries_;
  }

  bool operator==(const CandidateCache&) const = default;

 private:
  std::size_t num_systems_;
  std::map<std::size_t, std::vector<TranslationCandidate>> entries_;
};

/// JSON-lines: a header line
///   {"schema":"ensemble-forge/candidates","version":1,"systems":L}
/// followed by one {"id":…,"candidates":[{"system":…,"text":…}]} per entry,
/// ordered by id. Output bytes depend only on the cache contents.
void save_cache(const CandidateCache& cache, const std::filesystem::path& path);

/// Throws FormatError on a version mismatch, a malformed record, a system id
/// outside the header's range, or when expected_systems is given and differs.
CandidateCache load_cache(const std::filesystem::path& path,
                          std::optional<std::size_t> expected_systems = std::nullopt);

}  // namespace ensemble_forge
