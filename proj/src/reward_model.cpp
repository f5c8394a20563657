#include "ensemble_forge/reward_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include <spdlog/spdlog.h>

#include "binary_io.hpp"
#include "ensemble_forge/error.hpp"
#include "ensemble_forge/metrics.hpp"
#include "ensemble_forge/rng.hpp"

namespace ensemble_forge::rm {

namespace {

constexpr char kMagic[4] = {'E', 'F', 'R', 'M'};
constexpr std::uint32_t kVersion = 1;

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Eigen::MatrixXd feature_columns(std::string_view source, const std::vector<std::string>& texts) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(kFeatureDim), static_cast<Eigen::Index>(texts.size()));
  for (std::size_t i = 0; i < texts.size(); ++i) m.col(static_cast<Eigen::Index>(i)) = rm_featurize(source, texts[i]);
  return m;
}

}  // namespace

bool RMParams::all_finite() const { return std::isfinite(bias) && w.allFinite(); }

Eigen::VectorXd rm_featurize(std::string_view source, std::string_view candidate) {
  Eigen::VectorXd f(static_cast<Eigen::Index>(kFeatureDim));
  const auto n = static_cast<Eigen::Index>(kStateDim);
  f.head(n) = hash_embed(source).values();
  f.tail(n) = hash_embed(candidate).values();
  return f;
}

double rm_score(const RMParams& p, const Eigen::VectorXd& features) {
  if (features.size() != p.w.size()) throw InvalidArgument("feature dimension does not match the reward model");
  return p.w.dot(features) + p.bias;
}

double rm_score(const RMParams& p, std::string_view source, std::string_view candidate) {
  return rm_score(p, rm_featurize(source, candidate));
}

double log_sigmoid(double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }

PairwiseLoss pairwise_loss(std::span<const double> preferred, std::span<const double> rejected) {
  if (preferred.empty() || rejected.empty()) throw InvalidArgument("pairwise loss needs non-empty P and R");
  PairwiseLoss out;
  out.d_preferred.assign(preferred.size(), 0.0);
  out.d_rejected.assign(rejected.size(), 0.0);
  const double scale = 1.0 / static_cast<double>(preferred.size() * rejected.size());
  for (std::size_t i = 0; i < preferred.size(); ++i)
    for (std::size_t j = 0; j < rejected.size(); ++j) {
      const double d = preferred[i] - rejected[j];
      out.loss -= log_sigmoid(d);
      const double g = sigmoid(-d) * scale;  // -d/dd log sigmoid(d), scaled
      out.d_preferred[i] -= g;
      out.d_rejected[j] += g;
    }
  out.loss *= scale;
  if (!std::isfinite(out.loss)) throw NumericError("non-finite reward-model loss");
  return out;
}

double sample_loss(const RMParams& p, const FeatureSample& s, RMParams* grads) {
  const Eigen::VectorXd sp = (s.preferred.transpose() * p.w).array() + p.bias;
  const Eigen::VectorXd sr = (s.rejected.transpose() * p.w).array() + p.bias;
  const auto pl = pairwise_loss(std::span(sp.data(), static_cast<std::size_t>(sp.size())),
                                std::span(sr.data(), static_cast<std::size_t>(sr.size())));
  if (grads) {
    const Eigen::Map<const Eigen::VectorXd> dp(pl.d_preferred.data(), static_cast<Eigen::Index>(pl.d_preferred.size()));
    const Eigen::Map<const Eigen::VectorXd> dr(pl.d_rejected.data(), static_cast<Eigen::Index>(pl.d_rejected.size()));
    grads->w = s.preferred * dp + s.rejected * dr;
    grads->bias = dp.sum() + dr.sum();
  }
  return pl.loss;
}

RMLoss rm_loss_and_grads(const RMParams& p, std::string_view source, const PreferenceSets& sets) {
  if (sets.preferred.empty() || sets.rejected.empty())
    throw InvalidArgument("preference sets must both be non-empty");
  const FeatureSample s{feature_columns(source, sets.preferred), feature_columns(source, sets.rejected)};
  RMLoss out;
  out.loss = sample_loss(p, s, &out.grads);
  return out;
}

PreferenceSets preference_sets(const CorpusEntry& entry, std::span<const TranslationCandidate> candidates,
                               std::size_t top) {
  const auto ref = metrics::tokenize(entry.reference);
  std::vector<std::pair<double, const TranslationCandidate*>> scored;
  for (const auto& c : candidates) scored.emplace_back(metrics::sentence_bleu(metrics::tokenize(c.text), ref).value, &c);
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second->system_id < b.second->system_id;
  });
  PreferenceSets sets;
  sets.preferred.push_back(entry.reference);
  for (std::size_t i = 0; i < scored.size(); ++i) {
    const auto& text = scored[i].second->text;
    if (i < top) {
      sets.preferred.push_back(text);
    } else if (std::find(sets.preferred.begin(), sets.preferred.end(), text) == sets.preferred.end()) {
      sets.rejected.push_back(text);
    }
  }
  return sets;
}

RMParams sgd_train(std::span<const FeatureSample> samples, const RMParams& p0, double lr, std::size_t steps,
                   std::uint64_t seed) {
  if (steps == 0) return p0;
  if (samples.empty()) throw InvalidArgument("reward-model training has no usable samples");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw InvalidArgument("reward-model lr must be positive");
  RMParams p = p0;
  RMParams g;
  SplitMix64 rng(combine_seed(seed, 0x524D));
  for (std::size_t t = 0; t < steps; ++t) {
    sample_loss(p, samples[rng.below(samples.size())], &g);
    p.w -= lr * g.w;
    p.bias -= lr * g.bias;
  }
  if (!p.all_finite()) throw NumericError("reward-model parameters diverged");
  return p;
}

RMTrainResult rm_train(const ParallelCorpus& corpus, const CandidateCache& cache, const RMParams& p0,
                       const RMTrainConfig& cfg) {
  std::vector<FeatureSample> samples;
  RMTrainResult out;
  for (const auto& e : corpus.entries) {
    const auto sets = preference_sets(e, cache.candidates(e.id), cfg.top_preferred);
    if (sets.rejected.empty()) {
      spdlog::warn("reward model: sentence {} has no rejected candidates; skipped", e.id);
      ++out.skipped;
      continue;
    }
    samples.push_back({feature_columns(e.source, sets.preferred), feature_columns(e.source, sets.rejected)});
  }
  out.samples = samples.size();
  auto mean_loss = [&](const RMParams& p) {
    double sum = 0.0;
    for (const auto& s : samples) sum += sample_loss(p, s);
    return samples.empty() ? 0.0 : sum / static_cast<double>(samples.size());
  };
  out.initial_loss = mean_loss(p0);
  out.params = sgd_train(samples, p0, cfg.lr, cfg.steps, cfg.seed);
  out.final_loss = mean_loss(out.params);
  return out;
}

void save_rm(const RMParams& p, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(kMagic, sizeof kMagic);
  detail::write_pod<std::uint32_t>(out, kVersion);
  detail::write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(p.w.size()));
  detail::write_pod<double>(out, p.bias);
  for (Eigen::Index i = 0; i < p.w.size(); ++i) detail::write_pod<double>(out, p.w[i]);
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

RMParams load_rm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open reward model '" + path.string() + "'");
  const std::string name = "reward model '" + path.string() + "'";
  char magic[4];
  if (!in.read(magic, sizeof magic) || !std::equal(magic, magic + 4, kMagic))
    throw FormatError(name + ": bad magic bytes");
  const auto version = detail::read_pod<std::uint32_t>(in, name);
  if (version != kVersion) throw FormatError(name + ": unsupported version " + std::to_string(version));
  const auto dim = detail::read_pod<std::uint64_t>(in, name);
  if (dim != kFeatureDim)
    throw FormatError(name + ": feature dimension " + std::to_string(dim) + ", expected " +
                      std::to_string(kFeatureDim));
  RMParams p;
  p.bias = detail::read_pod<double>(in, name);
  for (Eigen::Index i = 0; i < p.w.size(); ++i) p.w[i] = detail::read_pod<double>(in, name);
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError(name + ": trailing bytes");
  if (!p.all_finite()) throw FormatError(name + ": non-finite weights");
  return p;
}

void write_score_dump(const std::vector<ScoreRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "id,system,score\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g\n", r.id, r.system, r.score);
    out << buf;
  }
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<ScoreRow> score_cache(const RMParams& p, const ParallelCorpus& corpus, const CandidateCache& cache) {
  std::vector<ScoreRow> rows;
  for (const auto& e : corpus.entries)
    for (const auto& c : cache.candidates(e.id)) rows.push_back({e.id, c.system_id, rm_score(p, e.source, c.text)});
  return rows;
}

BackendPtr make_rm_backend(RMParams params, std::string name) {
  BackendSpec spec;
  spec.name = std::move(name);
  spec.role = Role::reward;
  return make_backend(spec, [p = std::move(params)](const Json& req) -> Json {
    return {{"score", rm_score(p, req["source"].get<std::string>(), req["candidate"].get<std::string>())}};
  });
}

}  // namespace ensemble_forge::rm
