#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "ensemble_forge/backends.hpp"
#include "ensemble_forge/ccb.hpp"
#include "ensemble_forge/corpus.hpp"
#include "ensemble_forge/dqn_trainer.hpp"
#include "ensemble_forge/reward_model.hpp"

namespace ensemble_forge {

/// A value of the flat config format. Integers and floats stay apart so
/// that "k = 3.5" can be rejected.
using ConfigValue = std::variant<bool, std::int64_t, double, std::string, std::vector<std::string>>;

/// Subset of TOML: `key = value` lines, `[table]` headers prefixing the keys
/// that follow, dotted bare keys, # comments, basic and literal strings,
/// integers (underscores allowed), floats including inf and nan, booleans,
/// and single-line arrays of strings. Throws FormatError with the line
/// number for anything else and for duplicate keys.
std::vector<std::pair<std::string, ConfigValue>> parse_flat_toml(std::string_view text,
                                                                 std::string_view origin = "<config>");

/// TOML basic string with escapes.
std::string toml_quote(std::string_view s);

/// Everything a CLI run needs. Keys are listed by dump_config.
struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t k = 3;
  std::string src_lang = "en";
  std::string tgt_lang = "hi";

  /// DQN hyperparameters; trainer.k follows k.
  dqn::TrainerConfig trainer;

  /// Empty: a synthetic planted corpus is generated.
  std::string corpus_path;
  /// Empty with corpus_path set: evaluate on the training corpus.
  std::string eval_corpus_path;
  std::size_t corpus_train_size = 2000;
  std::size_t corpus_eval_size = 500;
  /// Unset values derive from seed.
  std::optional<std::uint64_t> corpus_seed;

  /// planted, noisy_reference, fixed_table or external.
  std::string pool_kind = "planted";
  std::size_t pool_systems = 8;
  std::optional<std::uint64_t> pool_seed;
  double pool_dropout = 0.3;
  double pool_good_noise = 0.1;
  std::string pool_enhancer = "reference";
  /// Candidate cache (fixed_table pool, reward-model training, probe).
  std::string candidates_path;

  /// external pool only. transport is http or subprocess; the endpoints are
  /// URLs or command lines.
  std::string backend_transport = "http";
  std::vector<std::string> backend_translators;
  std::string backend_fuser;
  std::string backend_enhancer;
  std::string backend_embedder;
  std::string backend_reward;
  double backend_timeout_s = 30.0;
  int backend_max_attempts = 3;

  /// linear-rm (rm_checkpoint, zero weights when empty), reference-bleu
  /// (mock scorer that reads the reference), external (backend_reward) or none.
  std::string reward_kind = "linear-rm";
  std::string rm_checkpoint;
  double rm_lr = 0.5;
  std::size_t rm_steps = 2000;
  std::size_t rm_top_preferred = 3;

  double ccb_tau = 0.2;
  bool ccb_lazy_rejected = true;
  bool ccb_rescore_after = false;
  std::string ccb_prompt_template_path;

  std::string qnet_checkpoint;
  std::vector<std::string> methods;
  std::size_t workers = 1;
  double ranker_latency_s = 0.0;
  /// oracle subcommand: oracle, dqn, random or fixed-rank.
  std::string oracle_selector = "oracle";

  std::uint64_t effective_corpus_seed() const;
  std::uint64_t effective_pool_seed() const;
  dqn::TrainerConfig trainer_config() const;
  rm::RMTrainConfig rm_config() const;

  /// Throws InvalidArgument naming the key at fault.
  void validate() const;
};

RunConfig default_config();
/// Defaults overridden by the text; unknown keys and wrongly typed values
/// throw InvalidArgument naming the key.
RunConfig parse_config(std::string_view text, std::string_view origin = "<config>");
RunConfig load_config(const std::filesystem::path& path);
/// Sets one key. Throws InvalidArgument for an unknown key or a value of the
/// wrong type.
void set_config_value(RunConfig& cfg, std::string_view key, const ConfigValue& value);
/// Every key with its effective value, one per line, sorted by key;
/// parse_config(dump_config(c)) reproduces c.
std::string dump_config(const RunConfig& cfg);
std::vector<std::string> config_keys();

struct Corpora {
  ParallelCorpus train;
  ParallelCorpus eval;
};

/// Loads the configured corpora or generates the planted ones.
Corpora load_corpora(const RunConfig& cfg);

/// Builds the configured pool. Mock pools get their references from the
/// corpora; a fixed_table pool reads cfg.candidates_path. The reward slot
/// is filled according to reward_kind.
BackendPool build_pool(const RunConfig& cfg, const Corpora& corpora);

ccb::CCBConfig ccb_config(const RunConfig& cfg);

}  // namespace ensemble_forge
