#include "ensemble_forge/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "ensemble_forge/error.hpp"
#include "ensemble_forge/rng.hpp"

namespace ensemble_forge {

using nlohmann::json;

namespace {

constexpr const char* kCacheSchema = "ensemble-forge/candidates";

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return in;
}

std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  return out;
}

void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

}  // namespace

ParallelCorpus load_parallel(const std::filesystem::path& path, std::string src_lang,
                             std::string tgt_lang) {
  auto in = open_input(path);
  ParallelCorpus corpus;
  corpus.src_lang = std::move(src_lang);
  corpus.tgt_lang = std::move(tgt_lang);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos)
      throw FormatError(path.string() + ":" + std::to_string(line_no) +
                        ": expected two tab-separated columns");
    CorpusEntry e{corpus.entries.size(), line.substr(0, tab), line.substr(tab + 1)};
    if (e.source.empty())
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": empty source");
    corpus.entries.push_back(std::move(e));
  }
  return corpus;
}

void save_parallel(const ParallelCorpus& corpus, const std::filesystem::path& path) {
  auto out = open_output(path);
  for (const auto& e : corpus.entries) out << e.source << '\t' << e.reference << '\n';
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

ParallelCorpus sample_subset(const ParallelCorpus& corpus, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw InvalidArgument("sample_subset: fraction must be in (0, 1], got " +
                          std::to_string(fraction));
  const std::size_t n = corpus.size();
  // The small slack keeps products like 0.7 * 100 from rounding up to 71.
  const auto wanted = static_cast<std::size_t>(
      std::ceil(fraction * static_cast<double>(n) - 1e-9));
  const std::size_t m = std::min(n, wanted);

  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  SplitMix64 rng(seed);
  for (std::size_t i = 0; i < m; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(m);
  std::sort(idx.begin(), idx.end());

  ParallelCorpus out;
  out.src_lang = corpus.src_lang;
  out.tgt_lang = corpus.tgt_lang;
  out.entries.reserve(m);
  for (auto i : idx) out.entries.push_back(corpus.entries[i]);
  return out;
}

CandidateCache::CandidateCache(std::size_t num_systems) : num_systems_(num_systems) {}

void CandidateCache::put(std::size_t entry_id, TranslationCandidate candidate) {
  if (candidate.system_id >= num_systems_)
    throw InvalidArgument("candidate cache: system " + std::to_string(candidate.system_id) +
                          " out of range (L = " + std::to_string(num_systems_) + ")");
  auto& list = entries_[entry_id];
  auto it = std::lower_bound(
      list.begin(), list.end(), candidate.system_id,
      [](const TranslationCandidate& c, std::size_t sys) { return c.system_id < sys; });
  if (it != list.end() && it->system_id == candidate.system_id)
    throw InvalidArgument("candidate cache: duplicate (id " + std::to_string(entry_id) +
                          ", system " + std::to_string(candidate.system_id) + ")");
  list.insert(it, std::move(candidate));
}

const TranslationCandidate* CandidateCache::find(std::size_t entry_id,
                                                 std::size_t system_id) const {
  auto it = entries_.find(entry_id);
  if (it == entries_.end()) return nullptr;
  for (const auto& c : it->second)
    if (c.system_id == system_id) return &c;
  return nullptr;
}

const std::vector<TranslationCandidate>& CandidateCache::candidates(std::size_t entry_id) const {
  static const std::vector<TranslationCandidate> kEmpty;
  auto it = entries_.find(entry_id);
  return it == entries_.end() ? kEmpty : it->second;
}

void save_cache(const CandidateCache& cache, const std::filesystem::path& path) {
  auto out = open_output(path);
  out << json{{"schema", kCacheSchema},
              {"version", CandidateCache::kSchemaVersion},
              {"systems", cache.num_systems()}}
             .dump()
      << '\n';
  for (const auto& [id, cands] : cache.entries()) {
    json arr = json::array();
    for (const auto& c : cands) arr.push_back({{"system", c.system_id}, {"text", c.text}});
    out << json{{"id", id}, {"candidates", std::move(arr)}}.dump() << '\n';
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

CandidateCache load_cache(const std::filesystem::path& path,
                          std::optional<std::size_t> expected_systems) {
  auto in = open_input(path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": missing cache header");
  std::size_t systems = 0;
  try {
    const json header = json::parse(line);
    if (header.value("schema", "") != kCacheSchema)
      throw FormatError(path.string() + ": not a candidate cache");
    if (header.at("version").get<int>() != CandidateCache::kSchemaVersion)
      throw FormatError(path.string() + ": unsupported cache version " +
                        header.at("version").dump());
    systems = header.at("systems").get<std::size_t>();
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ":1: bad header: " + e.what());
  }
  if (expected_systems && *expected_systems != systems)
    throw FormatError(path.string() + ": cache has " + std::to_string(systems) +
                      " systems, expected " + std::to_string(*expected_systems));

  CandidateCache cache(systems);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
    try {
      const json rec = json::parse(line);
      const auto id = rec.at("id").get<std::size_t>();
      for (const auto& c : rec.at("candidates")) {
        const auto sys = c.at("system").get<std::size_t>();
        if (sys >= systems)
          throw FormatError(where + "system " + std::to_string(sys) + " >= L = " +
                            std::to_string(systems));
        cache.put(id, {sys, c.at("text").get<std::string>()});
      }
    } catch (const json::exception& e) {
      throw FormatError(where + e.what());
    } catch (const InvalidArgument& e) {
      throw FormatError(where + e.what());
    }
  }
  return cache;
}

}  // namespace ensemble_forge
