#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

/// Sentence and corpus BLEU, chrF++ and reward normalization.
///
/// All functions are pure and reentrant.
namespace ensemble_forge::metrics {

using TokenSequence = std::vector<std::string>;

/// Version tag of the punctuation rule table applied by tokenize().
inline constexpr std::string_view kTokenizerRulesVersion = "v1";

/// Splits on Unicode whitespace, then pads punctuation into separate tokens.
///
/// Rule table v1 (applied per whitespace-delimited piece):
///   - every punctuation code point becomes its own token: ASCII
///     !"#$%&'()*+,-./:;<=>?@[\]^_`{|}~ plus । ॥ ‘ ’ “ ” – — … « » ¿ ¡ 、 。 ，
///   - '.' and ',' stay attached when a digit is on both sides (3.14, 1,000)
///   - '-', ''' and '’' stay attached when a word character is on both sides
TokenSequence tokenize(std::string_view text);

bool is_punctuation(char32_t cp);

enum class Smoothing {
  exp_floor,  // k-th zero precision becomes 1 / (2^k * total_n); effective order;
              // a hypothesis with no matching n-gram at all still scores 0
  none,
};

struct MetricScore {
  double value = 0.0;  // [0, 100]
  /// BLEU: raw clipped precisions p1..p4 in [0,1].
  /// chrF++: character F-score and word F-score, both in [0,100].
  std::vector<double> components;
  double brevity_penalty = 1.0;
};

inline constexpr int kBleuOrder = 4;

/// Sufficient statistics for BLEU; corpus BLEU sums these before scoring.
struct BleuStats {
  std::array<std::size_t, kBleuOrder> matches{};
  std::array<std::size_t, kBleuOrder> totals{};
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;

  BleuStats& operator+=(const BleuStats& o);
};

/// Clipped n-gram matches against the maximum count over all references.
/// ref_len is the reference length closest to the hypothesis length
/// (shorter wins ties).
BleuStats bleu_statistics(const TokenSequence& hyp, std::span<const TokenSequence> refs);

MetricScore bleu_from_statistics(const BleuStats& stats, Smoothing smoothing);

/// Throws InvalidArgument when refs is empty.
MetricScore sentence_bleu(const TokenSequence& hyp, std::span<const TokenSequence> refs,
                          Smoothing smoothing = Smoothing::exp_floor);
MetricScore sentence_bleu(const TokenSequence& hyp, const TokenSequence& ref,
                          Smoothing smoothing = Smoothing::exp_floor);

/// Pools statistics over the corpus, no smoothing.
/// Throws InvalidArgument on size mismatch or an empty corpus.
MetricScore corpus_bleu(std::span<const TokenSequence> hyps,
                        std::span<const std::vector<TokenSequence>> refs);
MetricScore corpus_bleu(std::span<const TokenSequence> hyps, std::span<const TokenSequence> refs);

struct ChrfConfig {
  int char_order = 6;
  int word_order = 2;
  double beta = 2.0;
};

/// Per order: {hypothesis n-grams, reference n-grams, matches}. Character
/// orders first, then word orders.
struct ChrfStats {
  std::vector<std::array<std::size_t, 3>> orders;

  ChrfStats& operator+=(const ChrfStats& o);
};

ChrfStats chrf_statistics(std::string_view hyp, std::string_view ref, const ChrfConfig& cfg = {});
MetricScore chrf_from_statistics(const ChrfStats& stats, const ChrfConfig& cfg = {});

/// Character n-grams skip whitespace; word n-grams split leading/trailing
/// punctuation off each word. Both strings empty gives 0.
MetricScore chrf_pp(std::string_view hyp, std::string_view ref, const ChrfConfig& cfg = {});
MetricScore corpus_chrf_pp(std::span<const std::string> hyps, std::span<const std::string> refs,
                           const ChrfConfig& cfg = {});

/// Maps a [0,100] score to [0,1].
double normalize_reward(const MetricScore& score);

}  // namespace ensemble_forge::metrics
