#include "ensemble_forge/mock_pool.hpp"

#include <algorithm>
#include <array>
#include <numeric>

#include "ensemble_forge/ccb.hpp"
#include "ensemble_forge/error.hpp"
#include "ensemble_forge/rng.hpp"
#include "ensemble_forge/utf8.hpp"

namespace ensemble_forge::mock {

namespace {

constexpr std::string_view kConsonants = "bdfgklmnprstvz";
constexpr std::string_view kVowels = "aeiou";
constexpr std::size_t kFillerWords = 200;

std::string syllable_word(std::uint64_t h, std::size_t syllables) {
  std::string w;
  for (std::size_t i = 0; i < syllables; ++i) {
    w.push_back(kConsonants[h % kConsonants.size()]);
    h /= kConsonants.size();
    w.push_back(kVowels[h % kVowels.size()]);
    h /= kVowels.size();
  }
  return w;
}

std::string filler_word(std::size_t i) { return syllable_word(mix64(0x66696C6CULL + i), 2); }

// Replacement tokens carry a 'q', which never occurs in generated words.
std::string noise_word(SplitMix64& rng) { return "q" + syllable_word(rng.next(), 2); }

BackendSpec named_spec(std::string name, Role role) {
  BackendSpec spec;
  spec.name = std::move(name);
  spec.role = role;
  return spec;
}

std::string join(const std::vector<std::string>& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out.push_back(' ');
    out += t;
  }
  return out;
}

std::string reversed_word(const std::string& w) {
  auto cps = utf8::decode(w);
  std::reverse(cps.begin(), cps.end());
  return utf8::encode(cps);
}

std::size_t marker_owner(const std::string& token, std::size_t systems) {
  for (std::size_t a = 0; a < systems; ++a)
    for (const auto& m : planted_markers(a))
      if (m == token) return a;
  return systems;
}

template <class E, std::size_t N>
E parse_named(std::string_view name, const std::array<std::string_view, N>& names, const char* what) {
  for (std::size_t i = 0; i < N; ++i)
    if (names[i] == name) return static_cast<E>(i);
  throw InvalidArgument(std::string("unknown ") + what + " '" + std::string(name) + "'");
}

constexpr std::array<std::string_view, 3> kPoolNames{"planted", "noisy_reference", "fixed_table"};
constexpr std::array<std::string_view, 3> kEnhancerNames{"reference", "identity", "best_rejected"};

}  // namespace

std::string_view to_string(PoolKind k) { return kPoolNames.at(static_cast<std::size_t>(k)); }
std::string_view to_string(EnhancerMode m) { return kEnhancerNames.at(static_cast<std::size_t>(m)); }
PoolKind parse_pool_kind(std::string_view name) { return parse_named<PoolKind>(name, kPoolNames, "pool kind"); }
EnhancerMode parse_enhancer_mode(std::string_view name) {
  return parse_named<EnhancerMode>(name, kEnhancerNames, "enhancer mode");
}

std::string majority_string(const std::vector<std::string>& candidates) {
  std::vector<std::vector<std::string>> toks;
  std::size_t longest = 0;
  for (const auto& c : candidates) {
    toks.push_back(utf8::split_whitespace(c));
    longest = std::max(longest, toks.back().size());
  }
  std::vector<std::string> out;
  for (std::size_t j = 0; j < longest; ++j) {
    std::map<std::string, std::size_t> votes;
    std::size_t reach = 0;
    for (const auto& t : toks)
      if (t.size() > j) {
        ++reach;
        ++votes[t[j]];
      }
    if (2 * reach < toks.size()) break;
    const auto best = std::max_element(votes.begin(), votes.end(), [](const auto& a, const auto& b) {
      return a.second < b.second;  // first maximum = smallest token
    });
    out.push_back(best->first);
  }
  return join(out);
}

std::string overlap_fuse(const std::vector<std::string>& candidates) {
  if (candidates.empty()) throw InvalidArgument("overlap_fuse needs at least one candidate");
  const auto majority = utf8::split_whitespace(majority_string(candidates));
  std::map<std::string, std::size_t> maj_counts;
  for (const auto& t : majority) ++maj_counts[t];

  const std::string* best = nullptr;
  std::size_t best_overlap = 0, best_gap = 0;
  for (const auto& c : candidates) {
    const auto toks = utf8::split_whitespace(c);
    std::map<std::string, std::size_t> counts;
    for (const auto& t : toks) ++counts[t];
    std::size_t overlap = 0;
    for (const auto& [t, n] : counts) {
      auto it = maj_counts.find(t);
      if (it != maj_counts.end()) overlap += std::min(n, it->second);
    }
    const std::size_t gap = toks.size() > majority.size() ? toks.size() - majority.size()
                                                          : majority.size() - toks.size();
    const bool better = !best || overlap > best_overlap ||
                        (overlap == best_overlap && (gap < best_gap || (gap == best_gap && c < *best)));
    if (better) {
      best = &c;
      best_overlap = overlap;
      best_gap = gap;
    }
  }
  return *best;
}

std::vector<std::string> planted_markers(std::size_t system) {
  return {syllable_word(mix64(0x6D61726BULL + 2 * system), 4),
          syllable_word(mix64(0x6D61726BULL + 2 * system + 1), 4)};
}

std::string planted_reference(std::string_view source) {
  std::vector<std::string> out;
  for (const auto& w : utf8::split_whitespace(source)) out.push_back(reversed_word(w));
  return join(out);
}

std::vector<std::size_t> planted_good_set(std::string_view source, std::size_t systems,
                                          const PlantedConfig& cfg) {
  if (cfg.k == 0 || cfg.k > systems) throw InvalidArgument("planted K must be in 1..L");
  std::vector<std::size_t> good;
  for (const auto& tok : utf8::split_whitespace(source)) {
    const std::size_t a = marker_owner(tok, systems);
    if (a < systems && std::find(good.begin(), good.end(), a) == good.end()) good.push_back(a);
    if (good.size() == cfg.k) break;
  }
  if (good.size() < cfg.k) {
    std::vector<std::size_t> order(systems);
    std::iota(order.begin(), order.end(), 0);
    SplitMix64 rng(fnv1a64(source));
    for (std::size_t i = 0; i + 1 < systems; ++i) std::swap(order[i], order[i + rng.below(systems - i)]);
    for (auto a : order) {
      if (good.size() == cfg.k) break;
      if (std::find(good.begin(), good.end(), a) == good.end()) good.push_back(a);
    }
  }
  std::sort(good.begin(), good.end());
  return good;
}

ParallelCorpus make_planted_corpus(std::size_t n, std::size_t systems, const PlantedConfig& cfg,
                                   std::uint64_t seed) {
  if (cfg.k == 0 || cfg.k > systems) throw InvalidArgument("planted K must be in 1..L");
  if (cfg.min_fillers > cfg.max_fillers) throw InvalidArgument("min_fillers > max_fillers");
  SplitMix64 rng(combine_seed(seed, 0x706C616E74ULL));
  ParallelCorpus corpus;
  corpus.src_lang = "src";
  corpus.tgt_lang = "tgt";
  std::vector<std::size_t> order(systems);
  for (std::size_t i = 0; i < n; ++i) {
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t j = 0; j < cfg.k; ++j) std::swap(order[j], order[j + rng.below(systems - j)]);
    std::vector<std::string> words;
    for (std::size_t j = 0; j < cfg.k; ++j) words.push_back(planted_markers(order[j])[rng.below(2)]);
    const std::size_t fillers = cfg.min_fillers + rng.below(cfg.max_fillers - cfg.min_fillers + 1);
    for (std::size_t j = 0; j < fillers; ++j) words.push_back(filler_word(rng.below(kFillerWords)));
    for (std::size_t j = words.size(); j > 1; --j) std::swap(words[j - 1], words[rng.below(j)]);
    CorpusEntry e;
    e.id = i;
    e.source = join(words);
    e.reference = planted_reference(e.source);
    corpus.entries.push_back(std::move(e));
  }
  return corpus;
}

std::string planted_translation(std::string_view source, std::size_t system, std::size_t systems,
                                const PlantedConfig& cfg, std::uint64_t seed) {
  if (system >= systems) throw InvalidArgument("system id out of range");
  const auto good = planted_good_set(source, systems, cfg);
  const std::uint64_t h = fnv1a64(source);
  auto tokens = utf8::split_whitespace(planted_reference(source));
  if (std::binary_search(good.begin(), good.end(), system)) {
    SplitMix64 own(combine_seed(seed, h ^ mix64(system + 1)));
    bool touched = false;
    for (auto& t : tokens)
      if (own.uniform() < cfg.good_noise) {
        t = noise_word(own);
        touched = true;
      }
    if (!touched && !tokens.empty()) tokens[own.below(tokens.size())] = noise_word(own);
  } else {
    // Shared decoy: two copies of every reference word plus every token the
    // good systems substituted, scrambled. Its bag covers anything the
    // majority string can contain, so it wins the overlap vote whenever it
    // is fused, while its BLEU stays near the floor.
    std::vector<std::string> decoy = tokens;
    decoy.insert(decoy.end(), tokens.begin(), tokens.end());
    for (auto g : good) {
      const auto out = utf8::split_whitespace(planted_translation(source, g, systems, cfg, seed));
      for (std::size_t j = 0; j < out.size(); ++j)
        if (j >= tokens.size() || out[j] != tokens[j]) decoy.push_back(out[j]);
    }
    SplitMix64 shuffle(combine_seed(seed, h ^ 0xDEC0DEULL));
    for (std::size_t j = decoy.size(); j > 1; --j) std::swap(decoy[j - 1], decoy[shuffle.below(j)]);
    tokens = std::move(decoy);
  }
  return join(tokens);
}

std::string noisy_translation(std::string_view source, std::string_view reference,
                              std::size_t system, std::size_t systems, double dropout,
                              std::uint64_t seed) {
  if (system >= systems) throw InvalidArgument("system id out of range");
  const double spread = systems > 1 ? static_cast<double>(system) / static_cast<double>(systems - 1) : 0.0;
  const double rate = std::min(0.95, dropout * (0.5 + spread));
  SplitMix64 rng(combine_seed(seed, fnv1a64(source) ^ mix64(system + 1)));
  std::vector<std::string> kept;
  for (auto& t : utf8::split_whitespace(reference))
    if (rng.uniform() >= rate) kept.push_back(std::move(t));
  return join(kept);
}

ReferenceMap reference_map(const ParallelCorpus& corpus) {
  ReferenceMap m;
  for (const auto& e : corpus.entries) m.emplace(e.source, e.reference);
  return m;
}

TranslationTable table_from_cache(const ParallelCorpus& corpus, const CandidateCache& cache) {
  TranslationTable t(cache.num_systems());
  for (const auto& e : corpus.entries)
    for (const auto& c : cache.candidates(e.id)) t[c.system_id].emplace(e.source, c.text);
  return t;
}

std::string mock_reference(const MockPoolConfig& cfg, const std::string& source) {
  if (cfg.kind == PoolKind::planted) return planted_reference(source);
  if (cfg.references) {
    auto it = cfg.references->find(source);
    if (it != cfg.references->end()) return it->second;
  }
  return source;
}

BackendPool make_mock_pool(const MockPoolConfig& cfg) {
  if (cfg.systems < 2) throw InvalidArgument("a mock pool needs at least two systems");
  if (cfg.kind == PoolKind::noisy_reference && !cfg.references)
    throw InvalidArgument("noisy_reference pool needs a reference map");
  if (cfg.kind == PoolKind::fixed_table && (!cfg.table || cfg.table->size() != cfg.systems))
    throw InvalidArgument("fixed_table pool needs one table per system");
  if (cfg.kind == PoolKind::planted) planted_good_set("", cfg.systems, cfg.planted);  // validates K

  BackendPool pool;
  for (std::size_t i = 0; i < cfg.systems; ++i) {
    BackendSpec spec;
    spec.name = "mock-translator-" + std::to_string(i);
    spec.role = Role::translator;
    spec.system_id = i;
    pool.translators.push_back(make_backend(spec, [cfg, i](const Json& req) -> Json {
      const std::string source = req["source"];
      switch (cfg.kind) {
        case PoolKind::planted:
          return {{"translation", planted_translation(source, i, cfg.systems, cfg.planted, cfg.seed)}};
        case PoolKind::noisy_reference:
          return {{"translation",
                   noisy_translation(source, mock_reference(cfg, source), i, cfg.systems, cfg.dropout, cfg.seed)}};
        case PoolKind::fixed_table: {
          const auto& table = (*cfg.table)[i];
          auto it = table.find(source);
          return {{"translation", it == table.end() ? source : it->second}};
        }
      }
      return {};
    }));
  }

  const BackendSpec fuser = named_spec("mock-fuser", Role::fuser);
  pool.fuser = make_backend(fuser, [](const Json& req) -> Json {
    return {{"translation", overlap_fuse(req["candidates"].get<std::vector<std::string>>())}};
  });

  const BackendSpec enhancer = named_spec("mock-enhancer", Role::enhancer);
  pool.enhancer = make_backend(enhancer, [cfg](const Json& req) -> Json {
    const auto parsed = ccb::parse_enhancer_prompt(req["prompt"].get<std::string>());
    switch (cfg.enhancer) {
      case EnhancerMode::reference:
        return {{"translation", mock_reference(cfg, parsed.source)}};
      case EnhancerMode::identity:
        return {{"translation", parsed.current}};
      case EnhancerMode::best_rejected:
        return {{"translation", parsed.rejected.empty() ? parsed.current : parsed.rejected.front().first}};
    }
    return {};
  });

  const BackendSpec embedder = named_spec("mock-embedder", Role::embedder);
  pool.embedder = make_backend(embedder, [](const Json& req) -> Json {
    const auto v = hash_embed(req["text"].get<std::string>());
    return {{"vector", std::vector<double>(v.values().data(), v.values().data() + v.size())}};
  });
  return pool;
}

}  // namespace ensemble_forge::mock
