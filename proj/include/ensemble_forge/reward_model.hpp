#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "ensemble_forge/backends.hpp"
#include "ensemble_forge/corpus.hpp"
#include "ensemble_forge/embedder.hpp"

namespace ensemble_forge::rm {

/// hash_embed(source) followed by hash_embed(candidate).
inline constexpr std::size_t kFeatureDim = 2 * kStateDim;

/// Linear scorer r(x, y) = w . phi(x, y) + b.
struct RMParams {
  Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(kFeatureDim));
  double bias = 0.0;

  bool all_finite() const;
  bool operator==(const RMParams& o) const { return bias == o.bias && w == o.w; }
};

struct PreferenceSets {
  std::vector<std::string> preferred;
  std::vector<std::string> rejected;
};

Eigen::VectorXd rm_featurize(std::string_view source, std::string_view candidate);

double rm_score(const RMParams& p, const Eigen::VectorXd& features);
double rm_score(const RMParams& p, std::string_view source, std::string_view candidate);

/// log(sigmoid(x)) without overflow for large |x|.
double log_sigmoid(double x);

struct PairwiseLoss {
  double loss = 0.0;
  std::vector<double> d_preferred;  // dloss / dscore
  std::vector<double> d_rejected;
};

/// -(1 / (|P| |R|)) sum_p sum_r log sigmoid(s_p - s_r), with its derivative
/// with respect to every score. Throws InvalidArgument if either side is empty.
PairwiseLoss pairwise_loss(std::span<const double> preferred, std::span<const double> rejected);

struct RMLoss {
  double loss = 0.0;
  RMParams grads;
};

/// The pairwise loss over all P x R pairs of one sample and its exact
/// gradient. Throws InvalidArgument when P or R is empty.
RMLoss rm_loss_and_grads(const RMParams& p, std::string_view source, const PreferenceSets& sets);

/// P = the reference plus the `top` candidates with the highest sentence BLEU
/// (ties to the lower system id); R = the remaining candidates. Candidates
/// whose text already appears in P are left out of R.
PreferenceSets preference_sets(const CorpusEntry& entry, std::span<const TranslationCandidate> candidates,
                               std::size_t top = 3);

struct RMTrainConfig {
  double lr = 0.5;
  std::size_t steps = 2000;
  std::uint64_t seed = 0;
  std::size_t top_preferred = 3;
};

struct RMTrainResult {
  RMParams params;
  std::size_t samples = 0;
  std::size_t skipped = 0;
  /// Mean loss over all usable samples before and after training.
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

/// SGD on one uniformly drawn sample per step. Samples without rejected
/// candidates are skipped with a warning; throws InvalidArgument when no
/// sample is usable and steps > 0.
RMTrainResult rm_train(const ParallelCorpus& corpus, const CandidateCache& cache, const RMParams& p0,
                       const RMTrainConfig& cfg);

/// Same loop over prepared samples (features already split into P and R).
struct FeatureSample {
  Eigen::MatrixXd preferred;  // F x |P|
  Eigen::MatrixXd rejected;   // F x |R|
};
double sample_loss(const RMParams& p, const FeatureSample& s, RMParams* grads = nullptr);
RMParams sgd_train(std::span<const FeatureSample> samples, const RMParams& p0, double lr, std::size_t steps,
                   std::uint64_t seed);

/// "EFRM", version, F, bias, then F little-endian doubles.
void save_rm(const RMParams& p, const std::filesystem::path& path);
/// Throws IoError if unreadable, FormatError on bad magic, version, F or length.
RMParams load_rm(const std::filesystem::path& path);

struct ScoreRow {
  std::size_t id = 0;
  std::size_t system = 0;
  double score = 0.0;
};
/// CSV with header id,system,score.
void write_score_dump(const std::vector<ScoreRow>& rows, const std::filesystem::path& path);
std::vector<ScoreRow> score_cache(const RMParams& p, const ParallelCorpus& corpus, const CandidateCache& cache);

/// In-process reward backend serving rm_score over the /score schema.
BackendPtr make_rm_backend(RMParams params, std::string name = "linear-rm");

}  // namespace ensemble_forge::rm
