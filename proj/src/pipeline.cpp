#include "ensemble_forge/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <limits>
#include <numeric>
#include <thread>

#include "ensemble_forge/dqn_trainer.hpp"
#include "ensemble_forge/error.hpp"
#include "ensemble_forge/metrics.hpp"
#include "ensemble_forge/rng.hpp"

namespace ensemble_forge::pipeline {

namespace {

void check_k(std::size_t k, std::size_t systems) {
  if (k == 0 || k > systems)
    throw InvalidArgument("K must be in 1.." + std::to_string(systems) + ", got " + std::to_string(k));
}

void check_qnet(const qnet::QNetParams& q, const BackendPool& pool) {
  if (q.shape().actions != pool.size())
    throw InvalidArgument("Q-network has " + std::to_string(q.shape().actions) + " actions but the pool has " +
                          std::to_string(pool.size()) + " systems");
}

const Backend& require(const BackendPtr& b, std::string_view what) {
  if (!b) throw InvalidArgument("the pool has no " + std::string(what));
  return *b;
}

double sentence_reward(std::string_view hyp, std::string_view ref) {
  return metrics::normalize_reward(
      metrics::sentence_bleu(metrics::tokenize(hyp), metrics::tokenize(ref), metrics::Smoothing::exp_floor));
}

std::vector<std::size_t> all_systems(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

// k distinct systems by partial Fisher-Yates, seeded per sentence so that
// the draw does not depend on evaluation order.
std::vector<std::size_t> random_subset(std::size_t systems, std::size_t k, std::uint64_t seed, std::size_t id) {
  SplitMix64 rng(combine_seed(seed, id));
  auto v = all_systems(systems);
  for (std::size_t i = 0; i < k; ++i) std::swap(v[i], v[i + rng.below(systems - i)]);
  v.resize(k);
  std::sort(v.begin(), v.end());
  return v;
}

std::vector<std::size_t> greedy_selection(const CorpusEntry& entry, const qnet::QNetParams& q,
                                          const BackendPool& pool, std::size_t k, const CallContext& ctx) {
  check_k(k, pool.size());
  check_qnet(q, pool);
  const auto state = dqn::embed_state(pool, entry.source, ctx);
  return dqn::top_k(qnet::forward(q, state), k);
}

std::string fmt_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", x);
  return buf;
}

std::string file_safe(std::string name) {
  for (auto& c : name)
    if (c == ':' || c == '/') c = '_';
  return name;
}

}  // namespace

ccb::Languages languages_of(const ParallelCorpus& corpus) { return {corpus.src_lang, corpus.tgt_lang}; }

SentenceOutput smartgen_translate(const CorpusEntry& entry, const qnet::QNetParams& q, const BackendPool& pool,
                                  std::size_t k, const ccb::Languages& langs, const CallContext& ctx,
                                  std::size_t max_concurrent) {
  const Backend& fuser = require(pool.fuser, "fuser");
  SentenceOutput out;
  out.selected = greedy_selection(entry, q, pool, k, ctx);
  out.candidates =
      dqn::translate_systems(pool, entry.source, out.selected, langs.src, langs.tgt, ctx, max_concurrent);
  out.translation = fuse(fuser, entry.source, out.candidates, ctx);
  return out;
}

SentenceOutput smartgen_pp_translate(const CorpusEntry& entry, const qnet::QNetParams& q, const BackendPool& pool,
                                     std::size_t k, ccb::CCBConfig cfg, const ccb::Languages& langs,
                                     const CallContext& ctx, std::size_t max_concurrent) {
  const Backend& fuser = require(pool.fuser, "fuser");
  const Backend& reward = require(pool.reward, "reward backend");
  if (!cfg.enhancer) cfg.enhancer = pool.enhancer;
  if (cfg.rescore_after && !cfg.rescore)
    cfg.rescore = [&](const std::string& cand) { return score(reward, entry.source, cand, ctx); };

  SentenceOutput out;
  out.selected = greedy_selection(entry, q, pool, k, ctx);
  const auto texts =
      dqn::translate_systems(pool, entry.source, out.selected, langs.src, langs.tgt, ctx, max_concurrent);
  std::vector<ccb::ScoredCandidate> scored;
  for (std::size_t i = 0; i < texts.size(); ++i)
    scored.push_back({out.selected[i], texts[i], score(reward, entry.source, texts[i], ctx)});

  ccb::RejectedProvider rejected = [&]() {
    ccb::RejectedSet rej;
    for (std::size_t s = 0; s < pool.size(); ++s) {
      if (std::find(out.selected.begin(), out.selected.end(), s) != out.selected.end()) continue;
      auto text = translate(*pool.translators[s], entry.source, langs.src, langs.tgt, ctx);
      const double r = score(reward, entry.source, text, ctx);
      rej.push_back({s, std::move(text), r});
    }
    return rej;
  };

  auto result = ccb::apply_ccb(ccb::SelectedSet::sorted(std::move(scored)), rejected, cfg,
                               ccb::CCBInput{entry.source, langs, ctx});
  for (auto sys : out.selected)
    for (const auto& item : result.selected.items)
      if (item.system_id == sys) out.candidates.push_back(item.text);
  out.translation = fuse(fuser, entry.source, out.candidates, ctx);
  out.enhanced_positions = std::move(result.enhanced_positions);
  out.ccb_audit = std::move(result.audit);
  return out;
}

std::size_t binomial(std::size_t n, std::size_t k) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  std::size_t r = 1;
  for (std::size_t i = 1; i <= k; ++i) {
    // r * (n - k + i) / i is exact at every step; divide first where possible.
    const std::size_t num = n - k + i;
    const std::size_t g = std::gcd(r, i);
    const std::size_t r_div = r / g;
    const std::size_t num_div = num / (i / g);
    if (r_div != 0 && num_div > std::numeric_limits<std::size_t>::max() / r_div)
      return std::numeric_limits<std::size_t>::max();
    r = r_div * num_div;
  }
  return r;
}

std::vector<std::vector<std::size_t>> k_subsets(std::size_t n, std::size_t k) {
  std::vector<std::vector<std::size_t>> out;
  if (k > n) return out;
  std::vector<std::size_t> cur(k);
  std::iota(cur.begin(), cur.end(), 0);
  while (true) {
    out.push_back(cur);
    std::size_t i = k;
    while (i > 0 && cur[i - 1] == n - k + i - 1) --i;
    if (i == 0) break;
    ++cur[i - 1];
    for (std::size_t j = i; j < k; ++j) cur[j] = cur[j - 1] + 1;
  }
  return out;
}

std::string subset_key(const std::vector<std::size_t>& subset) {
  std::string s;
  for (std::size_t i = 0; i < subset.size(); ++i) {
    if (i) s.push_back('-');
    s += std::to_string(subset[i]);
  }
  return s;
}

OracleResult brute_force_oracle(const CorpusEntry& entry, const BackendPool& pool, std::size_t k,
                                const ccb::Languages& langs, const CallContext& ctx) {
  const Backend& fuser = require(pool.fuser, "fuser");
  check_k(k, pool.size());
  const auto count = binomial(pool.size(), k);
  if (count > kMaxOracleSubsets)
    throw InvalidArgument("oracle would enumerate " + std::to_string(count) + " subsets (limit " +
                          std::to_string(kMaxOracleSubsets) + ")");
  const auto systems = all_systems(pool.size());
  const auto texts = dqn::translate_systems(pool, entry.source, systems, langs.src, langs.tgt, ctx);

  OracleResult out;
  out.subsets = k_subsets(pool.size(), k);
  for (const auto& subset : out.subsets) {
    std::vector<std::string> cands;
    for (auto s : subset) cands.push_back(texts[s]);
    out.fused.push_back(fuse(fuser, entry.source, cands, ctx));
    out.rewards.push_back(sentence_reward(out.fused.back(), entry.reference));
    if (out.rewards.back() > out.rewards[out.best]) out.best = out.rewards.size() - 1;
  }
  return out;
}

std::string_view to_string(Selector s) {
  switch (s) {
    case Selector::oracle: return "oracle";
    case Selector::dqn: return "dqn";
    case Selector::random: return "random";
    case Selector::fixed_rank: return "fixed-rank";
  }
  return "?";
}

Selector parse_selector(std::string_view name) {
  for (auto s : {Selector::oracle, Selector::dqn, Selector::random, Selector::fixed_rank})
    if (to_string(s) == name) return s;
  throw InvalidArgument("unknown selector '" + std::string(name) + "'");
}

std::size_t SubsetHistogram::nonzero() const {
  return static_cast<std::size_t>(std::count_if(counts.begin(), counts.end(), [](auto c) { return c > 0; }));
}

std::size_t SubsetHistogram::total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }

void SubsetHistogram::add(std::vector<std::size_t> subset) {
  std::sort(subset.begin(), subset.end());
  const auto it = std::lower_bound(subsets.begin(), subsets.end(), subset);
  if (it == subsets.end() || *it != subset)
    throw InvalidArgument("subset " + subset_key(subset) + " is not part of the histogram");
  ++counts[static_cast<std::size_t>(it - subsets.begin())];
}

SubsetHistogram empty_histogram(std::size_t systems, std::size_t k) {
  SubsetHistogram h;
  h.subsets = k_subsets(systems, k);
  h.counts.assign(h.subsets.size(), 0);
  return h;
}

SubsetHistogram triplet_histogram(const ParallelCorpus& corpus, const BackendPool& pool, std::size_t k,
                                  const HistogramOptions& opts, CostLedger* ledger) {
  check_k(k, pool.size());
  auto fixed = opts.fixed_rank;
  if (opts.selector == Selector::fixed_rank) {
    if (fixed.empty()) fixed = all_systems(k);
    if (fixed.size() != k) throw InvalidArgument("fixed-rank selector needs exactly K systems");
  }
  if (opts.selector == Selector::dqn && !opts.q) throw InvalidArgument("dqn selector needs a Q-network");
  const auto langs = languages_of(corpus);
  auto h = empty_histogram(pool.size(), k);
  for (const auto& e : corpus.entries) {
    const CallContext ctx{e.id, ledger};
    switch (opts.selector) {
      case Selector::oracle: h.add(brute_force_oracle(e, pool, k, langs, ctx).best_subset()); break;
      case Selector::dqn: h.add(greedy_selection(e, *opts.q, pool, k, ctx)); break;
      case Selector::random: h.add(random_subset(pool.size(), k, opts.seed, e.id)); break;
      case Selector::fixed_rank: h.add(fixed); break;
    }
  }
  return h;
}

void write_histogram_tsv(const SubsetHistogram& h, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "subset\tcount\n";
  for (std::size_t i = 0; i < h.subsets.size(); ++i) out << subset_key(h.subsets[i]) << '\t' << h.counts[i] << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

ProbeResult degradation_probe(const ParallelCorpus& corpus, const CandidateCache& cache, const BackendPool& pool,
                              std::size_t k, CostLedger* ledger) {
  const Backend& fuser = require(pool.fuser, "fuser");
  if (k == 0) throw InvalidArgument("K must be positive");
  if (corpus.empty()) throw InvalidArgument("probe corpus is empty");
  std::vector<metrics::TokenSequence> refs, hyp_a, hyp_b;
  for (const auto& e : corpus.entries) {
    const CallContext ctx{e.id, ledger};
    const auto ref = metrics::tokenize(e.reference);
    const auto& cands = cache.candidates(e.id);
    if (cands.size() + 1 < k)
      throw InvalidArgument("sentence " + std::to_string(e.id) + " has " + std::to_string(cands.size()) +
                            " cached candidates, the probe needs " + std::to_string(k - 1));
    std::vector<std::pair<double, std::size_t>> ranked;  // (BLEU, index into cands)
    for (std::size_t i = 0; i < cands.size(); ++i)
      ranked.emplace_back(metrics::sentence_bleu(metrics::tokenize(cands[i].text), ref).value, i);
    // cands are ordered by system id, so the stable sort breaks ties toward the lower id.
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.first > b.first; });

    std::vector<std::string> a(k, e.reference);
    std::vector<std::string> b{e.reference};
    for (std::size_t i = 0; i + 1 < k; ++i) b.push_back(cands[ranked[i].second].text);
    hyp_a.push_back(metrics::tokenize(fuse(fuser, e.source, a, ctx)));
    hyp_b.push_back(metrics::tokenize(fuse(fuser, e.source, b, ctx)));
    refs.push_back(ref);
  }
  ProbeResult r;
  r.sentences = corpus.size();
  r.reference_xk = metrics::corpus_bleu(hyp_a, refs).value;
  r.reference_top = metrics::corpus_bleu(hyp_b, refs).value;
  return r;
}

void write_probe_csv(const ProbeResult& r, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "condition,bleu\n"
      << "reference_x_k," << fmt_double(r.reference_xk) << '\n'
      << "reference_plus_top_k_minus_1," << fmt_double(r.reference_top) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

std::string MethodSpec::name() const {
  switch (method) {
    case Method::single_system: return "single-system:" + std::to_string(system);
    case Method::random_k: return "random-k";
    case Method::oracle_topk_bleu: return "oracle-topk-bleu";
    case Method::dqn_best_single: return "dqn-best-single";
    case Method::smartgen: return "smartgen";
    case Method::smartgen_pp: return "smartgen++";
    case Method::full_pool_fusion: return "full-pool-fusion";
    case Method::ranker_standin: return "ranker-standin";
  }
  return "?";
}

MethodSpec parse_method(std::string_view name) {
  constexpr std::string_view single = "single-system";
  if (name.substr(0, single.size()) == single) {
    const auto rest = name.substr(single.size());
    if (rest.empty()) return {Method::single_system, 0};
    if (rest.size() > 1 && rest[0] == ':' &&
        std::all_of(rest.begin() + 1, rest.end(), [](char c) { return c >= '0' && c <= '9'; }) && rest.size() < 12)
      return {Method::single_system, static_cast<std::size_t>(std::stoull(std::string(rest.substr(1))))};
    throw InvalidArgument("unknown method '" + std::string(name) + "'");
  }
  for (auto m : {Method::random_k, Method::oracle_topk_bleu, Method::dqn_best_single, Method::smartgen,
                 Method::smartgen_pp, Method::full_pool_fusion, Method::ranker_standin}) {
    const MethodSpec spec{m, 0};
    if (spec.name() == name) return spec;
  }
  throw InvalidArgument("unknown method '" + std::string(name) + "'");
}

std::vector<MethodSpec> default_methods() {
  return {{Method::single_system, 0}, {Method::random_k, 0},  {Method::oracle_topk_bleu, 0},
          {Method::dqn_best_single, 0}, {Method::smartgen, 0}, {Method::smartgen_pp, 0},
          {Method::full_pool_fusion, 0}};
}

namespace {

struct SentenceRun {
  std::string hypothesis;
  std::vector<std::size_t> selected;
  bool chooses_k = false;
  std::vector<std::size_t> enhanced;
  std::vector<ccb::AuditRecord> audit;
};

SentenceRun run_sentence(const CorpusEntry& e, const BackendPool& pool, const MethodSpec& m,
                         const EvalOptions& opts, const ccb::Languages& langs, const CallContext& ctx) {
  const auto conc = opts.max_concurrent_backends;
  SentenceRun run;
  auto translate_and_fuse = [&](std::vector<std::size_t> systems) {
    const auto texts = dqn::translate_systems(pool, e.source, systems, langs.src, langs.tgt, ctx, conc);
    run.hypothesis = fuse(*pool.fuser, e.source, texts, ctx);
    run.selected = std::move(systems);
  };
  switch (m.method) {
    case Method::single_system:
      run.selected = {m.system};
      run.hypothesis = translate(*pool.translators[m.system], e.source, langs.src, langs.tgt, ctx);
      break;
    case Method::random_k:
      translate_and_fuse(random_subset(pool.size(), opts.k, opts.seed, e.id));
      run.chooses_k = true;
      break;
    case Method::oracle_topk_bleu: {
      const auto systems = all_systems(pool.size());
      const auto texts = dqn::translate_systems(pool, e.source, systems, langs.src, langs.tgt, ctx, conc);
      const auto ref = metrics::tokenize(e.reference);
      std::vector<std::pair<double, std::size_t>> ranked;
      for (auto s : systems) ranked.emplace_back(metrics::sentence_bleu(metrics::tokenize(texts[s]), ref).value, s);
      std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
      std::vector<std::string> cands;
      for (std::size_t i = 0; i < opts.k; ++i) {
        run.selected.push_back(ranked[i].second);
        cands.push_back(texts[ranked[i].second]);
      }
      run.hypothesis = fuse(*pool.fuser, e.source, cands, ctx);
      run.chooses_k = true;
      break;
    }
    case Method::dqn_best_single: {
      run.selected = greedy_selection(e, *opts.q, pool, 1, ctx);
      run.hypothesis = translate(*pool.translators[run.selected[0]], e.source, langs.src, langs.tgt, ctx);
      break;
    }
    case Method::smartgen: {
      auto out = smartgen_translate(e, *opts.q, pool, opts.k, langs, ctx, conc);
      run.hypothesis = std::move(out.translation);
      run.selected = std::move(out.selected);
      run.chooses_k = true;
      break;
    }
    case Method::smartgen_pp: {
      auto out = smartgen_pp_translate(e, *opts.q, pool, opts.k, opts.ccb, langs, ctx, conc);
      run.hypothesis = std::move(out.translation);
      run.selected = std::move(out.selected);
      run.enhanced = std::move(out.enhanced_positions);
      run.audit = std::move(out.ccb_audit);
      run.chooses_k = true;
      break;
    }
    case Method::full_pool_fusion: translate_and_fuse(all_systems(pool.size())); break;
    case Method::ranker_standin: {
      const auto systems = all_systems(pool.size());
      const auto texts = dqn::translate_systems(pool, e.source, systems, langs.src, langs.tgt, ctx, conc);
      std::size_t best = 0;
      double best_score = -std::numeric_limits<double>::infinity();
      for (auto s : systems) {
        const double sc = score(*pool.reward, e.source, texts[s], ctx);
        if (sc > best_score) best_score = sc, best = s;
      }
      run.selected = {best};
      run.hypothesis = texts[best];
      break;
    }
  }
  return run;
}

void check_method(const MethodSpec& m, const BackendPool& pool, const EvalOptions& opts) {
  const bool needs_k = m.method == Method::random_k || m.method == Method::oracle_topk_bleu ||
                       m.method == Method::smartgen || m.method == Method::smartgen_pp;
  if (needs_k) check_k(opts.k, pool.size());
  const bool needs_q = m.method == Method::dqn_best_single || m.method == Method::smartgen ||
                       m.method == Method::smartgen_pp;
  if (needs_q) {
    if (!opts.q) throw InvalidArgument(m.name() + " needs a trained Q-network");
    check_qnet(*opts.q, pool);
  }
  const bool needs_fuser = needs_k || m.method == Method::full_pool_fusion;
  if (needs_fuser) require(pool.fuser, "fuser");
  if (m.method == Method::smartgen_pp || m.method == Method::ranker_standin) require(pool.reward, "reward backend");
  if (m.method == Method::single_system && m.system >= pool.size())
    throw InvalidArgument("single-system index " + std::to_string(m.system) + " is outside the pool");
}

}  // namespace

EvalReport evaluate_method(const ParallelCorpus& corpus, const BackendPool& pool, const MethodSpec& method,
                           const EvalOptions& opts) {
  if (corpus.empty()) throw InvalidArgument("evaluation corpus is empty");
  check_method(method, pool, opts);
  const auto langs = languages_of(corpus);
  const std::size_t n = corpus.size();

  std::vector<SentenceRun> runs(n);
  std::vector<CostLedger> ledgers(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  auto worker = [&] {
    for (std::size_t i; !failed && (i = next++) < n;) {
      const auto& e = corpus.entries[i];
      try {
        try {
          runs[i] = run_sentence(e, pool, method, opts, langs, CallContext{e.id, &ledgers[i]});
        } catch (const BackendError& err) {
          throw BackendError(err.backend(), err.detail() + " [sentence " + std::to_string(e.id) + "]");
        }
      } catch (...) {
        errors[i] = std::current_exception();
        failed = true;
      }
    }
  };
  const std::size_t workers = std::clamp<std::size_t>(opts.workers, 1, n);
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> threads;
    for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(worker);
  }
  for (const auto& err : errors)
    if (err) std::rethrow_exception(err);

  EvalReport rep;
  rep.method = method.name();
  std::vector<metrics::TokenSequence> hyps, refs;
  std::vector<std::string> hyp_text, ref_text;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = corpus.entries[i];
    auto& run = runs[i];
    SentenceRecord rec;
    rec.id = e.id;
    rec.sentence_bleu = sentence_reward(run.hypothesis, e.reference) * 100.0;
    rec.translator_calls = ledgers[i].role_calls(Role::translator);
    rec.fuser_calls = ledgers[i].role_calls(Role::fuser);
    rec.enhancer_calls = ledgers[i].role_calls(Role::enhancer);
    rec.reward_calls = ledgers[i].role_calls(Role::reward);
    rec.selected = run.selected;
    rec.enhanced_positions = run.enhanced;
    rec.ccb_audit = std::move(run.audit);
    rep.ledger.merge(ledgers[i]);
    hyps.push_back(metrics::tokenize(run.hypothesis));
    refs.push_back(metrics::tokenize(e.reference));
    ref_text.push_back(e.reference);
    rec.hypothesis = std::move(run.hypothesis);
    hyp_text.push_back(rec.hypothesis);
    if (run.chooses_k) {
      if (!rep.histogram) rep.histogram = empty_histogram(pool.size(), opts.k);
      rep.histogram->add(rec.selected);
    }
    rep.records.push_back(std::move(rec));
  }
  rep.bleu = metrics::corpus_bleu(hyps, refs).value;
  rep.chrf = metrics::corpus_chrf_pp(hyp_text, ref_text).value;
  rep.cost = ledger_report(rep.ledger, n, pool.size());
  if (method.method == Method::ranker_standin) rep.modeled_ranking_seconds = opts.ranker_latency_s * n;
  return rep;
}

std::vector<EvalReport> evaluate(const ParallelCorpus& corpus, const BackendPool& pool,
                                 const std::vector<MethodSpec>& methods, const EvalOptions& opts) {
  for (const auto& m : methods) check_method(m, pool, opts);
  std::vector<EvalReport> out;
  for (const auto& m : methods) out.push_back(evaluate_method(corpus, pool, m, opts));
  return out;
}

Json to_json(const EvalReport& r) {
  Json records = Json::array();
  for (const auto& s : r.records)
    records.push_back({{"id", s.id},
                       {"hypothesis", s.hypothesis},
                       {"selected", s.selected},
                       {"sentence_bleu", s.sentence_bleu},
                       {"translator_calls", s.translator_calls},
                       {"fuser_calls", s.fuser_calls},
                       {"enhancer_calls", s.enhancer_calls},
                       {"reward_calls", s.reward_calls},
                       {"enhanced_positions", s.enhanced_positions}});
  Json j{{"method", r.method},
         {"bleu", r.bleu},
         {"chrf", r.chrf},
         {"external_metric", nullptr},
         {"sentences", r.records.size()},
         {"cost", to_json(r.cost)},
         {"modeled_ranking_seconds", r.modeled_ranking_seconds},
         {"records", std::move(records)}};
  if (r.histogram) {
    Json h = Json::object();
    for (std::size_t i = 0; i < r.histogram->subsets.size(); ++i)
      h[subset_key(r.histogram->subsets[i])] = r.histogram->counts[i];
    j["histogram"] = std::move(h);
  }
  return j;
}

void write_reports(const std::vector<EvalReport>& reports, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream csv(dir / "eval_summary.csv");
    if (!csv) throw IoError("cannot write " + (dir / "eval_summary.csv").string());
    csv << "method,bleu,chrf,external_metric,sentences,translator_calls,translator_calls_per_sentence,"
           "fuser_calls,enhancer_calls,reward_calls,full_pool_ratio,modeled_ranking_seconds\n";
    for (const auto& r : reports) {
      auto calls = [&](Role role) {
        const auto it = r.cost.role_calls.find(role);
        return it == r.cost.role_calls.end() ? std::uint64_t{0} : it->second;
      };
      csv << r.method << ',' << fmt_double(r.bleu) << ',' << fmt_double(r.chrf) << ",," << r.records.size() << ','
          << calls(Role::translator) << ',' << fmt_double(r.cost.translator_calls_per_sentence) << ','
          << calls(Role::fuser) << ',' << calls(Role::enhancer) << ',' << calls(Role::reward) << ','
          << fmt_double(r.cost.full_pool_ratio) << ',' << fmt_double(r.modeled_ranking_seconds) << '\n';
    }
    if (!csv) throw IoError("failed writing eval_summary.csv");
  }
  {
    Json all = Json::array();
    for (const auto& r : reports) all.push_back(to_json(r));
    std::ofstream js(dir / "eval_report.json");
    if (!js) throw IoError("cannot write " + (dir / "eval_report.json").string());
    js << all.dump(2) << '\n';
  }
  {
    std::ofstream tsv(dir / "cost_quality.tsv");
    if (!tsv) throw IoError("cannot write " + (dir / "cost_quality.tsv").string());
    tsv << "method\ttranslator_calls_per_sentence\tbleu\n";
    for (const auto& r : reports)
      tsv << r.method << '\t' << fmt_double(r.cost.translator_calls_per_sentence) << '\t' << fmt_double(r.bleu)
          << '\n';
  }
  for (const auto& r : reports)
    if (r.histogram) write_histogram_tsv(*r.histogram, dir / ("histogram_" + file_safe(r.method) + ".tsv"));
}

}  // namespace ensemble_forge::pipeline
