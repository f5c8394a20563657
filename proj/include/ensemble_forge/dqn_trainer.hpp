#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ensemble_forge/backends.hpp"
#include "ensemble_forge/corpus.hpp"
#include "ensemble_forge/embedder.hpp"
#include "ensemble_forge/metrics.hpp"
#include "ensemble_forge/qnet.hpp"
#include "ensemble_forge/rng.hpp"

namespace ensemble_forge::dqn {

/// Defaults follow the DQN hyperparameter table (batch 128, 8 environment
/// steps per update, gamma 0.99, epsilon 0.9 -> 0.05 over 8000 steps,
/// tau 1e-3, hard sync every 100 updates, 50k memory, lr 4e-5, 30 episodes
/// of 1000 steps, moving-average window 100).
struct TrainerConfig {
  std::size_t batch_size = 128;
  std::size_t steps_batch_size = 8;
  double gamma = 0.99;
  double eps_start = 0.9;
  double eps_end = 0.05;
  double eps_decay = 8000;
  double tau_polyak = 1e-3;
  std::size_t target_update_interval = 100;
  std::size_t memory_size = 50000;
  double lr = 4e-5;
  std::size_t episodes = 30;
  std::size_t episode_len = 1000;
  std::size_t k = 3;
  /// Targets are the immediate reward (every sentence is its own episode).
  bool bandit_mode = true;
  std::size_t moving_average_window = 100;
  /// Translator calls issued in parallel while computing one reward.
  std::size_t max_concurrent_backends = 1;

  /// Throws InvalidArgument naming the offending field.
  void validate(std::size_t pool_size) const;
};

/// eps_end + (eps_start - eps_end) * exp(-step / eps_decay)
double epsilon_at(std::uint64_t step, const TrainerConfig& cfg);

/// Indices of the k largest values, ordered by descending value; equal
/// values go to the lower index.
std::vector<std::size_t> top_k(const Eigen::VectorXd& q, std::size_t k);

/// One uniform draw decides exploration: below eps, k distinct indices are
/// sampled uniformly; otherwise top_k(q, k). Throws InvalidArgument for
/// k > |q| or eps outside [0, 1].
std::vector<std::size_t> select_action_set(const Eigen::VectorXd& q, std::size_t k, double eps,
                                           SplitMix64& rng);

struct Transition {
  std::shared_ptr<const StateVector> s;
  std::size_t a = 0;
  double r = 0.0;
  std::shared_ptr<const StateVector> s_next;
  bool terminal = false;
};

/// Fixed-capacity FIFO of transitions.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity);

  /// Evicts the oldest transition when full. Throws InvalidArgument for a
  /// reward outside [0, 1] or a missing state.
  void push(Transition t);
  /// Uniform with replacement. Throws InvalidArgument when fewer than
  /// `batch` transitions are stored.
  std::vector<Transition> sample(std::size_t batch, SplitMix64& rng) const;

  std::size_t size() const noexcept { return size_; }
  std::size_t capacity() const noexcept { return items_.size(); }
  /// i = 0 is the oldest stored transition.
  const Transition& at(std::size_t i) const;

 private:
  std::vector<Transition> items_;
  std::size_t head_ = 0;  // next slot to write
  std::size_t size_ = 0;
};

double huber(double x, double delta = 1.0);

struct TDResult {
  double loss = 0.0;
  qnet::QNetGrads grads;
};

/// Mean Huber(delta = 1) loss of Q_online(s, a) against r (terminal or
/// bandit mode) or r + gamma * max_a' Q_target(s', a'). Gradients flow only
/// through Q_online(s, a).
TDResult td_loss_and_grads(const qnet::QNetParams& online, const qnet::QNetParams& target,
                           std::span<const Transition> batch, const TrainerConfig& cfg);

/// The selection state of a source: the pool's embedder if it has one,
/// otherwise hash_embed.
StateVector embed_state(const BackendPool& pool, std::string_view text, const CallContext& ctx = {});

/// Translations of `systems`, in that order. With max_concurrent > 1 the
/// calls run in parallel; results are still joined by position.
std::vector<std::string> translate_systems(const BackendPool& pool, std::string_view source,
                                           std::span<const std::size_t> systems,
                                           std::string_view src_lang, std::string_view tgt_lang,
                                           const CallContext& ctx, std::size_t max_concurrent = 1);

struct RewardOutcome {
  double reward = 0.0;
  std::string fused;
  std::vector<std::string> candidates;
};

/// Translates with the selected systems, fuses, and scores the fused text
/// against the reference with sentence BLEU scaled to [0, 1].
RewardOutcome compute_reward(const CorpusEntry& entry, std::span<const std::size_t> selected,
                             const BackendPool& pool, std::string_view src_lang,
                             std::string_view tgt_lang, const CallContext& ctx = {},
                             metrics::Smoothing smoothing = metrics::Smoothing::exp_floor,
                             std::size_t max_concurrent = 1);

struct CurveRow {
  std::size_t episode = 0;
  std::uint64_t step = 0;
  double eps = 0.0;
  double mean_reward = 0.0;
  /// Mean TD loss of the updates since the previous row; NaN if none ran.
  double loss = 0.0;
};

struct TrainingResult {
  qnet::QNetParams params;
  std::vector<CurveRow> curve;
  std::vector<double> episode_mean_rewards;
  std::uint64_t env_steps = 0;
  std::uint64_t optimizer_steps = 0;
  CostLedger ledger;
};

/// The training loop. Each episode streams episode_len sentences from a
/// fresh seeded shuffle of the corpus; each step selects K systems, earns
/// one fused-translation reward and stores K transitions sharing it. Every
/// steps_batch_size steps one Adam update runs on a sampled batch, followed
/// by a Polyak update of the target network; every target_update_interval
/// updates the target is hard-synced. A curve row is emitted every
/// moving_average_window steps. Throws InvalidArgument for an empty corpus;
/// backend failures propagate with the sentence id attached.
TrainingResult run_training(const ParallelCorpus& corpus, const BackendPool& pool,
                            const TrainerConfig& cfg, std::uint64_t seed);

/// CSV with header episode,step,eps,mean_reward,loss.
void write_learning_curve(const std::vector<CurveRow>& curve, const std::filesystem::path& path);

}  // namespace ensemble_forge::dqn
