#include "ensemble_forge/cli.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "ensemble_forge/backends.hpp"
#include "ensemble_forge/ccb.hpp"
#include "ensemble_forge/config.hpp"
#include "ensemble_forge/dqn_trainer.hpp"
#include "ensemble_forge/error.hpp"
#include "ensemble_forge/pipeline.hpp"
#include "ensemble_forge/qnet.hpp"
#include "ensemble_forge/reward_model.hpp"

namespace ensemble_forge::cli {

namespace fs = std::filesystem;

namespace {

constexpr const char* kDefaultOut = "ensemble_forge_out";

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> k;
  std::string out;
  std::vector<std::string> sets;
  std::string qnet;
  std::string log_level = "warn";
};

// "key=value" with a TOML value; bare words that do not parse are taken
// as strings so that --set pool.kind=noisy_reference works unquoted.
void apply_set(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw InvalidArgument("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);
  ConfigValue v;
  try {
    const auto kv = parse_flat_toml("v = " + value, "--set " + key);
    v = kv.at(0).second;
  } catch (const FormatError&) {
    v = value;
  }
  set_config_value(cfg, key, v);
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? default_config() : load_config(c.config);
  for (const auto& s : c.sets) apply_set(cfg, s);
  if (c.seed) cfg.seed = *c.seed;
  if (c.k) cfg.k = *c.k;
  if (!c.qnet.empty()) cfg.qnet_checkpoint = c.qnet;
  cfg.validate();
  return cfg;
}

fs::path out_dir(const Common& c) {
  fs::path dir = c.out;
  if (dir.empty()) {
    const char* env = std::getenv("ENSEMBLE_FORGE_OUT");
    dir = env && *env ? env : kDefaultOut;
  }
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("failed writing " + path.string());
}

void write_json(const fs::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

void write_effective(const fs::path& dir, const RunConfig& cfg) {
  write_text(dir / "effective_config.toml", dump_config(cfg));
}

// One candidate per system for each entry; ids already present are skipped.
CandidateCache generate_cache(const std::vector<const ParallelCorpus*>& corpora, const BackendPool& pool,
                              const RunConfig& cfg, CostLedger* ledger) {
  CandidateCache cache(pool.size());
  std::vector<std::size_t> systems(pool.size());
  for (std::size_t i = 0; i < systems.size(); ++i) systems[i] = i;
  for (const auto* corpus : corpora)
    for (const auto& e : corpus->entries) {
      if (!cache.candidates(e.id).empty()) continue;
      const auto texts = dqn::translate_systems(pool, e.source, systems, corpus->src_lang, corpus->tgt_lang,
                                                CallContext{e.id, ledger}, cfg.trainer.max_concurrent_backends);
      for (std::size_t s = 0; s < texts.size(); ++s) cache.put(e.id, {s, texts[s]});
    }
  return cache;
}

CandidateCache candidates_for(const RunConfig& cfg, const ParallelCorpus& corpus, const BackendPool& pool) {
  if (!cfg.candidates_path.empty()) return load_cache(cfg.candidates_path, pool.size());
  return generate_cache({&corpus}, pool, cfg, nullptr);
}

qnet::QNetParams require_qnet(const RunConfig& cfg, const BackendPool& pool) {
  if (cfg.qnet_checkpoint.empty())
    throw InvalidArgument("this run needs a trained Q-network: pass --qnet or set dqn.checkpoint");
  return qnet::load_checkpoint(cfg.qnet_checkpoint, pool.size());
}

int cmd_gen_candidates(const Common& c, std::ostream& out) {
  const auto cfg = resolve(c);
  const auto dir = out_dir(c);
  const auto corpora = load_corpora(cfg);
  const auto pool = build_pool(cfg, corpora);
  CostLedger ledger;
  std::vector<const ParallelCorpus*> sources{&corpora.train};
  // Separately loaded files number their entries independently.
  if (cfg.eval_corpus_path.empty()) sources.push_back(&corpora.eval);
  const auto cache = generate_cache(sources, pool, cfg, &ledger);
  save_cache(cache, dir / "candidates.jsonl");
  save_parallel(corpora.train, dir / "train.tsv");
  save_parallel(corpora.eval, dir / "eval.tsv");
  write_json(dir / "cost_report.json", to_json(ledger_report(ledger, cache.entries().size(), pool.size())));
  write_effective(dir, cfg);
  out << "wrote " << cache.entries().size() << " sentences x " << pool.size() << " systems to "
      << (dir / "candidates.jsonl").string() << "\n";
  return kExitOk;
}

int cmd_train_dqn(const Common& c, std::ostream& out) {
  const auto cfg = resolve(c);
  const auto dir = out_dir(c);
  const auto corpora = load_corpora(cfg);
  const auto pool = build_pool(cfg, corpora);
  const auto result = dqn::run_training(corpora.train, pool, cfg.trainer_config(), cfg.seed);
  qnet::save_checkpoint(result.params, dir / "qnet.bin");
  dqn::write_learning_curve(result.curve, dir / "learning_curve.csv");
  const auto n = static_cast<std::size_t>(result.env_steps);
  write_json(dir / "train_summary.json", Json{{"env_steps", result.env_steps},
                                              {"optimizer_steps", result.optimizer_steps},
                                              {"episode_mean_rewards", result.episode_mean_rewards},
                                              {"cost", to_json(ledger_report(result.ledger, n, pool.size()))}});
  write_effective(dir, cfg);
  const double last = result.episode_mean_rewards.empty() ? 0.0 : result.episode_mean_rewards.back();
  out << "trained " << result.env_steps << " steps, " << result.optimizer_steps
      << " updates; last episode mean reward " << fmt::format("{:.4f}", last) << "\n";
  return kExitOk;
}

int cmd_train_rm(const Common& c, std::ostream& out) {
  const auto cfg = resolve(c);
  const auto dir = out_dir(c);
  const auto corpora = load_corpora(cfg);
  const auto pool = build_pool(cfg, corpora);
  const auto cache = candidates_for(cfg, corpora.train, pool);
  const auto r = rm::rm_train(corpora.train, cache, rm::RMParams{}, cfg.rm_config());
  rm::save_rm(r.params, dir / "rm.bin");
  rm::write_score_dump(rm::score_cache(r.params, corpora.train, cache), dir / "rm_scores.csv");
  write_json(dir / "rm_summary.json", Json{{"samples", r.samples},
                                           {"skipped", r.skipped},
                                           {"initial_loss", r.initial_loss},
                                           {"final_loss", r.final_loss}});
  write_effective(dir, cfg);
  out << "reward model: " << r.samples << " samples, loss " << fmt::format("{:.4f} -> {:.4f}", r.initial_loss, r.final_loss)
      << "\n";
  return kExitOk;
}

int cmd_eval(const Common& c, std::ostream& out) {
  const auto cfg = resolve(c);
  const auto dir = out_dir(c);
  const auto corpora = load_corpora(cfg);
  const auto pool = build_pool(cfg, corpora);
  std::vector<pipeline::MethodSpec> methods;
  bool needs_q = false;
  for (const auto& m : cfg.methods) {
    methods.push_back(pipeline::parse_method(m));
    const auto kind = methods.back().method;
    needs_q |= kind == pipeline::Method::smartgen || kind == pipeline::Method::smartgen_pp ||
               kind == pipeline::Method::dqn_best_single;
  }
  std::optional<qnet::QNetParams> q;
  if (needs_q) q = require_qnet(cfg, pool);
  pipeline::EvalOptions opts;
  opts.k = cfg.k;
  opts.q = q ? &*q : nullptr;
  opts.ccb = ccb_config(cfg);
  opts.seed = cfg.seed;
  opts.workers = cfg.workers;
  opts.max_concurrent_backends = cfg.trainer.max_concurrent_backends;
  opts.ranker_latency_s = cfg.ranker_latency_s;
  const auto reports = pipeline::evaluate(corpora.eval, pool, methods, opts);
  pipeline::write_reports(reports, dir);
  for (const auto& r : reports) {
    if (r.method != "smartgen++") continue;
    std::vector<ccb::AuditRecord> audit;
    for (const auto& rec : r.records) audit.insert(audit.end(), rec.ccb_audit.begin(), rec.ccb_audit.end());
    std::ofstream f(dir / "ccb_audit.jsonl");
    ccb::write_audit_jsonl(audit, f);
  }
  write_effective(dir, cfg);
  for (const auto& r : reports)
    out << fmt::format("{:<18} BLEU {:7.3f}  chrF++ {:7.3f}  translator calls/sentence {:.3f}\n", r.method, r.bleu,
                       r.chrf, r.cost.translator_calls_per_sentence);
  return kExitOk;
}

int cmd_oracle(const Common& c, const std::string& selector, std::size_t limit, std::ostream& out) {
  auto cfg = resolve(c);
  if (!selector.empty()) {
    cfg.oracle_selector = selector;
    cfg.validate();
  }
  const auto dir = out_dir(c);
  auto corpora = load_corpora(cfg);
  const auto pool = build_pool(cfg, corpora);
  if (limit > 0 && corpora.eval.entries.size() > limit) corpora.eval.entries.resize(limit);
  pipeline::HistogramOptions opts;
  opts.selector = pipeline::parse_selector(cfg.oracle_selector);
  opts.seed = cfg.seed;
  std::optional<qnet::QNetParams> q;
  if (opts.selector == pipeline::Selector::dqn) {
    q = require_qnet(cfg, pool);
    opts.q = &*q;
  }
  CostLedger ledger;
  const auto h = pipeline::triplet_histogram(corpora.eval, pool, cfg.k, opts, &ledger);
  const std::string name = "histogram_" + cfg.oracle_selector + ".tsv";
  pipeline::write_histogram_tsv(h, dir / name);
  write_json(dir / "oracle_summary.json", Json{{"selector", cfg.oracle_selector},
                                               {"systems", pool.size()},
                                               {"k", cfg.k},
                                               {"subsets", h.subsets.size()},
                                               {"nonzero", h.nonzero()},
                                               {"sentences", h.total()},
                                               {"cost", to_json(ledger_report(ledger, h.total(), pool.size()))}});
  write_effective(dir, cfg);
  out << cfg.oracle_selector << ": " << h.subsets.size() << " subsets, " << h.nonzero() << " chosen at least once over "
      << h.total() << " sentences\n";
  return kExitOk;
}

int cmd_probe(const Common& c, std::ostream& out) {
  const auto cfg = resolve(c);
  const auto dir = out_dir(c);
  const auto corpora = load_corpora(cfg);
  const auto pool = build_pool(cfg, corpora);
  const auto cache = candidates_for(cfg, corpora.eval, pool);
  const auto r = pipeline::degradation_probe(corpora.eval, cache, pool, cfg.k);
  pipeline::write_probe_csv(r, dir / "probe_table1.csv");
  write_effective(dir, cfg);
  out << fmt::format("reference x K: {:.3f}\nreference + top K-1: {:.3f}\n", r.reference_xk, r.reference_top);
  return kExitOk;
}

int cmd_serve_stub(const std::string& host, int port, double seconds, std::ostream& out) {
  StubServer server;
  server.start(host, port);
  out << "listening on " << server.url() << std::endl;
  const auto until = std::chrono::steady_clock::now() + std::chrono::duration<double>(seconds);
  while (seconds <= 0 || std::chrono::steady_clock::now() < until)
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  server.stop();
  return kExitOk;
}

void set_log_level(const std::string& name) {
  const auto level = spdlog::level::from_str(name);
  if (level == spdlog::level::off && name != "off") throw InvalidArgument("unknown log level '" + name + "'");
  spdlog::set_level(level);
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Learned candidate selection and fusion for machine-translation ensembles."};
  app.name("ensemble_forge");
  app.require_subcommand(1);
  app.fallthrough();

  Common common;
  bool help_config = false;
  app.add_option("--config", common.config, "flat key = value config file (see --help-config)");
  app.add_option("--seed", common.seed, "run seed; overrides the config");
  app.add_option("--k", common.k, "systems selected per sentence; overrides the config");
  app.add_option("--out", common.out, "output directory (default $ENSEMBLE_FORGE_OUT, else ./ensemble_forge_out)");
  app.add_option("--set", common.sets, "override one config key, key=value (repeatable)")
      ->expected(1)
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  app.add_option("--qnet", common.qnet, "trained Q-network checkpoint (sets dqn.checkpoint)");
  app.add_option("--log-level", common.log_level, "trace, debug, info, warn, error or off");
  app.add_flag("--help-config", help_config, "print every config key with its default and exit");

  auto* gen = app.add_subcommand("gen-candidates", "translate the corpora with every system into a candidate cache");
  auto* train_dqn = app.add_subcommand("train-dqn", "train the selection Q-network");
  auto* train_rm = app.add_subcommand("train-rm", "train the pairwise reward model on a candidate cache");
  auto* eval = app.add_subcommand("eval", "evaluate the configured methods on the evaluation corpus");
  auto* oracle = app.add_subcommand("oracle", "histogram of the K-subsets a selector picks");
  std::string selector;
  std::size_t limit = 0;
  oracle->add_option("--selector", selector, "oracle, dqn, random or fixed-rank");
  oracle->add_option("--limit", limit, "use only the first N evaluation sentences");
  auto* probe = app.add_subcommand("probe-table1", "fusion of reference copies vs reference plus top candidates");
  auto* serve = app.add_subcommand("serve-stub", "serve the stub HTTP backend");
  std::string host = "127.0.0.1";
  int port = 0;
  double seconds = 0.0;
  serve->add_option("--host", host, "bind address");
  serve->add_option("--port", port, "port, 0 picks a free one");
  serve->add_option("--seconds", seconds, "stop after this long (0 = run until killed)");

  // --help-config needs no subcommand.
  for (int i = 1; i < argc; ++i)
    if (std::string_view(argv[i]) == "--help-config") {
      out << dump_config(default_config());
      return kExitOk;
    }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  }

  try {
    set_log_level(common.log_level);
    if (gen->parsed()) return cmd_gen_candidates(common, out);
    if (train_dqn->parsed()) return cmd_train_dqn(common, out);
    if (train_rm->parsed()) return cmd_train_rm(common, out);
    if (eval->parsed()) return cmd_eval(common, out);
    if (oracle->parsed()) return cmd_oracle(common, selector, limit, out);
    if (probe->parsed()) return cmd_probe(common, out);
    if (serve->parsed()) return cmd_serve_stub(host, port, seconds, out);
  } catch (const BackendError& e) {
    err << "backend failure: " << e.what() << "\n";
    return kExitBackend;
  } catch (const InvalidArgument& e) {
    err << "error: " << e.what() << "\n(see --help and --help-config)\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace ensemble_forge::cli
