#include "ensemble_forge/dqn_trainer.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <future>
#include <limits>
#include <numeric>

#include <spdlog/spdlog.h>

#include "ensemble_forge/error.hpp"

namespace ensemble_forge::dqn {

void TrainerConfig::validate(std::size_t pool_size) const {
  auto fail = [](const std::string& what) { throw InvalidArgument("trainer config: " + what); };
  if (!(gamma >= 0.0 && gamma < 1.0)) fail("gamma must be in [0, 1)");
  if (!(eps_start >= 0.0 && eps_start <= 1.0)) fail("eps_start must be in [0, 1]");
  if (!(eps_end >= 0.0 && eps_end <= eps_start)) fail("eps_end must be in [0, eps_start]");
  if (!(eps_decay > 0.0)) fail("eps_decay must be positive");
  if (!(tau_polyak >= 0.0 && tau_polyak <= 1.0)) fail("tau_polyak must be in [0, 1]");
  if (!(lr > 0.0) || !std::isfinite(lr)) fail("lr must be positive");
  if (batch_size == 0) fail("batch_size must be positive");
  if (steps_batch_size == 0) fail("steps_batch_size must be positive");
  if (target_update_interval == 0) fail("target_update_interval must be positive");
  if (memory_size == 0) fail("memory_size must be positive");
  if (episode_len == 0) fail("episode_len must be positive");
  if (moving_average_window == 0) fail("moving_average_window must be positive");
  if (max_concurrent_backends == 0) fail("max_concurrent_backends must be positive");
  if (k == 0) fail("K must be positive");
  if (k >= pool_size)
    fail("K = " + std::to_string(k) + " must be smaller than the pool size " + std::to_string(pool_size));
}

double epsilon_at(std::uint64_t step, const TrainerConfig& cfg) {
  return cfg.eps_end + (cfg.eps_start - cfg.eps_end) * std::exp(-static_cast<double>(step) / cfg.eps_decay);
}

std::vector<std::size_t> top_k(const Eigen::VectorXd& q, std::size_t k) {
  const auto n = static_cast<std::size_t>(q.size());
  if (k > n) throw InvalidArgument("K exceeds the number of actions");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return q[static_cast<Eigen::Index>(a)] > q[static_cast<Eigen::Index>(b)];
  });
  idx.resize(k);
  return idx;
}

std::vector<std::size_t> select_action_set(const Eigen::VectorXd& q, std::size_t k, double eps,
                                           SplitMix64& rng) {
  const auto n = static_cast<std::size_t>(q.size());
  if (k > n) throw InvalidArgument("K exceeds the number of actions");
  if (!(eps >= 0.0 && eps <= 1.0)) throw InvalidArgument("epsilon must be in [0, 1]");
  if (!q.allFinite()) throw NumericError("non-finite Q-value");
  if (rng.uniform() < eps) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
    idx.resize(k);
    return idx;
  }
  return top_k(q, k);
}

ReplayBuffer::ReplayBuffer(std::size_t capacity) : items_(capacity) {
  if (capacity == 0) throw InvalidArgument("replay buffer capacity must be positive");
}

void ReplayBuffer::push(Transition t) {
  if (!(t.r >= 0.0 && t.r <= 1.0)) throw InvalidArgument("transition reward outside [0, 1]");
  if (!t.s || !t.s_next) throw InvalidArgument("transition without state");
  items_[head_] = std::move(t);
  head_ = (head_ + 1) % items_.size();
  size_ = std::min(size_ + 1, items_.size());
}

const Transition& ReplayBuffer::at(std::size_t i) const {
  if (i >= size_) throw InvalidArgument("replay buffer index out of range");
  const std::size_t oldest = size_ < items_.size() ? 0 : head_;
  return items_[(oldest + i) % items_.size()];
}

std::vector<Transition> ReplayBuffer::sample(std::size_t batch, SplitMix64& rng) const {
  if (batch == 0 || size_ < batch)
    throw InvalidArgument("cannot sample " + std::to_string(batch) + " transitions from a buffer holding " +
                          std::to_string(size_));
  std::vector<Transition> out;
  out.reserve(batch);
  for (std::size_t i = 0; i < batch; ++i) out.push_back(at(rng.below(size_)));
  return out;
}

double huber(double x, double delta) {
  const double ax = std::abs(x);
  return ax <= delta ? 0.5 * x * x : delta * (ax - 0.5 * delta);
}

TDResult td_loss_and_grads(const qnet::QNetParams& online, const qnet::QNetParams& target,
                           std::span<const Transition> batch, const TrainerConfig& cfg) {
  if (batch.empty()) throw InvalidArgument("TD batch is empty");
  const auto shape = online.shape();
  const auto n = static_cast<Eigen::Index>(batch.size());
  Eigen::MatrixXd states(static_cast<Eigen::Index>(shape.input_dim), n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& t = batch[static_cast<std::size_t>(i)];
    if (t.a >= shape.actions) throw InvalidArgument("transition action out of range");
    states.col(i) = t.s->values();
  }
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) y[i] = batch[static_cast<std::size_t>(i)].r;
  if (!cfg.bandit_mode) {
    std::vector<Eigen::Index> chained;
    for (Eigen::Index i = 0; i < n; ++i)
      if (!batch[static_cast<std::size_t>(i)].terminal) chained.push_back(i);
    if (!chained.empty()) {
      Eigen::MatrixXd next(static_cast<Eigen::Index>(shape.input_dim), static_cast<Eigen::Index>(chained.size()));
      for (std::size_t j = 0; j < chained.size(); ++j)
        next.col(static_cast<Eigen::Index>(j)) = batch[static_cast<std::size_t>(chained[j])].s_next->values();
      const Eigen::MatrixXd qn = qnet::forward_batch(target, next);
      for (std::size_t j = 0; j < chained.size(); ++j)
        y[chained[j]] += cfg.gamma * qn.col(static_cast<Eigen::Index>(j)).maxCoeff();
    }
  }

  qnet::ForwardCache cache;
  const Eigen::MatrixXd q = qnet::forward_batch(online, states, &cache);
  Eigen::MatrixXd grad_q = Eigen::MatrixXd::Zero(q.rows(), q.cols());
  TDResult out;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto a = static_cast<Eigen::Index>(batch[static_cast<std::size_t>(i)].a);
    const double d = q(a, i) - y[i];
    out.loss += huber(d);
    grad_q(a, i) = std::clamp(d, -1.0, 1.0) / static_cast<double>(n);
  }
  out.loss /= static_cast<double>(n);
  if (!std::isfinite(out.loss)) throw NumericError("non-finite TD loss");
  out.grads = qnet::backward_batch(online, cache, grad_q);
  return out;
}

StateVector embed_state(const BackendPool& pool, std::string_view text, const CallContext& ctx) {
  if (pool.embedder) return embed(*pool.embedder, text, ctx);
  return hash_embed(text);
}

std::vector<std::string> translate_systems(const BackendPool& pool, std::string_view source,
                                           std::span<const std::size_t> systems,
                                           std::string_view src_lang, std::string_view tgt_lang,
                                           const CallContext& ctx, std::size_t max_concurrent) {
  for (auto s : systems)
    if (s >= pool.size()) throw InvalidArgument("system id " + std::to_string(s) + " is not in the pool");
  std::vector<std::string> out(systems.size());
  if (max_concurrent <= 1 || systems.size() <= 1) {
    for (std::size_t i = 0; i < systems.size(); ++i)
      out[i] = translate(*pool.translators[systems[i]], source, src_lang, tgt_lang, ctx);
    return out;
  }
  for (std::size_t start = 0; start < systems.size(); start += max_concurrent) {
    const std::size_t end = std::min(systems.size(), start + max_concurrent);
    std::vector<std::future<std::string>> jobs;
    for (std::size_t i = start; i < end; ++i)
      jobs.push_back(std::async(std::launch::async, [&, i] {
        return translate(*pool.translators[systems[i]], source, src_lang, tgt_lang, ctx);
      }));
    // Joined in position order so the first failure reported is deterministic.
    for (std::size_t i = start; i < end; ++i) out[i] = jobs[i - start].get();
  }
  return out;
}

RewardOutcome compute_reward(const CorpusEntry& entry, std::span<const std::size_t> selected,
                             const BackendPool& pool, std::string_view src_lang,
                             std::string_view tgt_lang, const CallContext& ctx,
                             metrics::Smoothing smoothing, std::size_t max_concurrent) {
  if (selected.empty()) throw InvalidArgument("no systems selected");
  if (!pool.fuser) throw InvalidArgument("the pool has no fuser");
  RewardOutcome out;
  out.candidates = translate_systems(pool, entry.source, selected, src_lang, tgt_lang, ctx, max_concurrent);
  out.fused = fuse(*pool.fuser, entry.source, out.candidates, ctx);
  out.reward = metrics::normalize_reward(
      metrics::sentence_bleu(metrics::tokenize(out.fused), metrics::tokenize(entry.reference), smoothing));
  return out;
}

namespace {

// Sentence order for one episode: fresh shuffles of the corpus, concatenated
// until episode_len positions are filled.
std::vector<std::size_t> episode_stream(std::size_t n, std::size_t len, SplitMix64& rng) {
  std::vector<std::size_t> stream;
  stream.reserve(len);
  std::vector<std::size_t> perm(n);
  while (stream.size() < len) {
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    for (std::size_t i = 0; i < n && stream.size() < len; ++i) stream.push_back(perm[i]);
  }
  return stream;
}

}  // namespace

TrainingResult run_training(const ParallelCorpus& corpus, const BackendPool& pool,
                            const TrainerConfig& cfg, std::uint64_t seed) {
  pool.validate();
  cfg.validate(pool.size());
  if (corpus.empty()) throw InvalidArgument("training corpus is empty");
  if (!pool.fuser) throw InvalidArgument("the pool has no fuser");

  TrainingResult result;
  result.params = qnet::init_network({kStateDim, qnet::kHiddenDim, pool.size()}, combine_seed(seed, 1));
  if (cfg.episodes == 0) return result;

  std::vector<std::shared_ptr<const StateVector>> states;
  states.reserve(corpus.size());
  for (const auto& e : corpus.entries)
    states.push_back(std::make_shared<const StateVector>(
        embed_state(pool, e.source, CallContext{e.id, &result.ledger})));

  qnet::QNetParams& online = result.params;
  qnet::QNetParams target = online;
  auto adam = qnet::AdamState::zeros_like(online);
  SplitMix64 policy_rng(combine_seed(seed, 2));
  SplitMix64 stream_rng(combine_seed(seed, 3));
  SplitMix64 sample_rng(combine_seed(seed, 4));
  ReplayBuffer buffer(cfg.memory_size);

  std::deque<double> window;
  double window_sum = 0.0;
  double loss_sum = 0.0;
  std::size_t loss_count = 0;

  for (std::size_t ep = 0; ep < cfg.episodes; ++ep) {
    const auto stream = episode_stream(corpus.size(), cfg.episode_len, stream_rng);
    double episode_sum = 0.0;
    for (std::size_t t = 0; t < stream.size(); ++t) {
      const auto& entry = corpus.entries[stream[t]];
      const auto& s = states[stream[t]];
      const double eps = epsilon_at(result.env_steps, cfg);
      const auto actions = select_action_set(qnet::forward(online, *s), cfg.k, eps, policy_rng);
      double r = 0.0;
      try {
        r = compute_reward(entry, actions, pool, corpus.src_lang, corpus.tgt_lang,
                           CallContext{entry.id, &result.ledger}, metrics::Smoothing::exp_floor,
                           cfg.max_concurrent_backends)
                .reward;
      } catch (const BackendError& e) {
        throw BackendError(e.backend(), e.detail() + " [episode " + std::to_string(ep) +
                                            ", sentence " + std::to_string(entry.id) + "]");
      }
      const bool terminal = t + 1 == stream.size();
      const auto& s_next = terminal ? s : states[stream[t + 1]];
      for (auto a : actions) buffer.push(Transition{s, a, r, s_next, terminal});
      ++result.env_steps;
      episode_sum += r;

      window.push_back(r);
      window_sum += r;
      if (window.size() > cfg.moving_average_window) {
        window_sum -= window.front();
        window.pop_front();
      }

      if (result.env_steps % cfg.steps_batch_size == 0 && buffer.size() >= cfg.batch_size) {
        const auto batch = buffer.sample(cfg.batch_size, sample_rng);
        const auto td = td_loss_and_grads(online, target, batch, cfg);
        qnet::adam_step(online, td.grads, adam, cfg.lr);
        qnet::soft_update(target, online, cfg.tau_polyak);
        ++result.optimizer_steps;
        if (result.optimizer_steps % cfg.target_update_interval == 0) target = online;
        loss_sum += td.loss;
        ++loss_count;
      }

      if (result.env_steps % cfg.moving_average_window == 0) {
        result.curve.push_back(CurveRow{ep, result.env_steps, eps,
                                        window_sum / static_cast<double>(window.size()),
                                        loss_count ? loss_sum / static_cast<double>(loss_count)
                                                   : std::numeric_limits<double>::quiet_NaN()});
        loss_sum = 0.0;
        loss_count = 0;
      }
    }
    result.episode_mean_rewards.push_back(episode_sum / static_cast<double>(stream.size()));
    spdlog::info("episode {}/{}: mean reward {:.4f}, epsilon {:.3f}", ep + 1, cfg.episodes,
                 result.episode_mean_rewards.back(), epsilon_at(result.env_steps, cfg));
  }
  return result;
}

void write_learning_curve(const std::vector<CurveRow>& curve, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "episode,step,eps,mean_reward,loss\n";
  char buf[160];
  for (const auto& row : curve) {
    std::snprintf(buf, sizeof buf, "%zu,%llu,%.6f,%.6f,%.8g\n", row.episode,
                  static_cast<unsigned long long>(row.step), row.eps, row.mean_reward, row.loss);
    out << buf;
  }
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace ensemble_forge::dqn
