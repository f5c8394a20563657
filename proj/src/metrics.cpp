#include "ensemble_forge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "ensemble_forge/error.hpp"
#include "ensemble_forge/utf8.hpp"

namespace ensemble_forge::metrics {

namespace {

bool is_digit(char32_t cp) { return cp >= U'0' && cp <= U'9'; }

bool is_word_char(char32_t cp) { return !utf8::is_space(cp) && !is_punctuation(cp); }

void flush(std::u32string& current, TokenSequence& out) {
  if (!current.empty()) {
    out.push_back(utf8::encode(current));
    current.clear();
  }
}

void tokenize_piece(const std::u32string& piece, TokenSequence& out) {
  std::u32string current;
  for (std::size_t i = 0; i < piece.size(); ++i) {
    const char32_t cp = piece[i];
    if (!is_punctuation(cp)) {
      current.push_back(cp);
      continue;
    }
    const bool has_neighbours = i > 0 && i + 1 < piece.size();
    bool attach = false;
    if (has_neighbours) {
      const char32_t prev = piece[i - 1];
      const char32_t next = piece[i + 1];
      if ((cp == U'.' || cp == U',') && is_digit(prev) && is_digit(next)) attach = true;
      if ((cp == U'-' || cp == U'\'' || cp == U'’') && is_word_char(prev) &&
          is_word_char(next))
        attach = true;
    }
    if (attach) {
      current.push_back(cp);
    } else {
      flush(current, out);
      out.push_back(utf8::encode(cp));
    }
  }
  flush(current, out);
}

using NgramCounts = std::unordered_map<std::string, std::size_t>;

NgramCounts word_ngrams(const TokenSequence& tokens, std::size_t n) {
  NgramCounts counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    std::string key = tokens[i];
    for (std::size_t k = 1; k < n; ++k) {
      key.push_back('\x1f');
      key += tokens[i + k];
    }
    ++counts[key];
  }
  return counts;
}

NgramCounts char_ngrams(const std::u32string& chars, std::size_t n) {
  NgramCounts counts;
  if (chars.size() < n) return counts;
  for (std::size_t i = 0; i + n <= chars.size(); ++i)
    ++counts[utf8::encode(std::u32string_view(chars).substr(i, n))];
  return counts;
}

std::size_t total_count(const NgramCounts& c) {
  std::size_t t = 0;
  for (const auto& [_, n] : c) t += n;
  return t;
}

std::size_t clipped_matches(const NgramCounts& hyp, const NgramCounts& ref) {
  std::size_t m = 0;
  for (const auto& [gram, n] : hyp) {
    if (auto it = ref.find(gram); it != ref.end()) m += std::min(n, it->second);
  }
  return m;
}

bool is_ascii_punct(char32_t cp) {
  static constexpr std::u32string_view kPuncts = U"!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";
  return kPuncts.find(cp) != std::u32string_view::npos;
}

// Word splitting used by the word n-gram part of chrF++.
TokenSequence chrf_words(std::string_view text) {
  TokenSequence words;
  for (const auto& w : utf8::split_whitespace(text)) {
    const std::u32string cps = utf8::decode(w);
    if (cps.size() == 1) {
      words.push_back(w);
    } else if (is_ascii_punct(cps.back())) {
      words.push_back(utf8::encode(std::u32string_view(cps).substr(0, cps.size() - 1)));
      words.push_back(utf8::encode(cps.back()));
    } else if (is_ascii_punct(cps.front())) {
      words.push_back(utf8::encode(cps.front()));
      words.push_back(utf8::encode(std::u32string_view(cps).substr(1)));
    } else {
      words.push_back(w);
    }
  }
  return words;
}

double f_beta(double prec, double rec, double beta) {
  const double factor = beta * beta;
  if (prec + rec <= 0.0) return 0.0;
  return (1.0 + factor) * prec * rec / (factor * prec + rec);
}

// F-score over the precision/recall averaged across orders [begin, end)
// that have both hypothesis and reference n-grams.
double averaged_f(const ChrfStats& stats, std::size_t begin, std::size_t end, double beta) {
  double prec = 0.0;
  double rec = 0.0;
  int effective = 0;
  for (std::size_t i = begin; i < end; ++i) {
    const auto [n_hyp, n_ref, n_match] = stats.orders[i];
    if (n_hyp > 0 && n_ref > 0) {
      prec += static_cast<double>(n_match) / static_cast<double>(n_hyp);
      rec += static_cast<double>(n_match) / static_cast<double>(n_ref);
      ++effective;
    }
  }
  if (effective == 0) return 0.0;
  return 100.0 * f_beta(prec / effective, rec / effective, beta);
}

}  // namespace

bool is_punctuation(char32_t cp) {
  if (is_ascii_punct(cp)) return true;
  switch (cp) {
    case U'।': case U'॥': case U'‘': case U'’': case U'“':
    case U'”': case U'–': case U'—': case U'…': case U'«':
    case U'»': case U'¿': case U'¡': case U'、': case U'。':
    case U'，':
      return true;
    default:
      return false;
  }
}

TokenSequence tokenize(std::string_view text) {
  TokenSequence out;
  std::u32string piece;
  for (char32_t cp : utf8::decode(text)) {
    if (utf8::is_space(cp)) {
      if (!piece.empty()) tokenize_piece(piece, out);
      piece.clear();
    } else {
      piece.push_back(cp);
    }
  }
  if (!piece.empty()) tokenize_piece(piece, out);
  return out;
}

BleuStats& BleuStats::operator+=(const BleuStats& o) {
  for (int n = 0; n < kBleuOrder; ++n) {
    matches[n] += o.matches[n];
    totals[n] += o.totals[n];
  }
  hyp_len += o.hyp_len;
  ref_len += o.ref_len;
  return *this;
}

BleuStats bleu_statistics(const TokenSequence& hyp, std::span<const TokenSequence> refs) {
  if (refs.empty()) throw InvalidArgument("bleu: at least one reference is required");
  BleuStats stats;
  stats.hyp_len = hyp.size();

  // Closest reference length; the shorter one wins a tie.
  std::size_t best_len = refs.front().size();
  for (const auto& ref : refs) {
    const auto diff = [&](std::size_t len) {
      return len > hyp.size() ? len - hyp.size() : hyp.size() - len;
    };
    if (diff(ref.size()) < diff(best_len) ||
        (diff(ref.size()) == diff(best_len) && ref.size() < best_len))
      best_len = ref.size();
  }
  stats.ref_len = best_len;

  for (int n = 1; n <= kBleuOrder; ++n) {
    const NgramCounts hyp_counts = word_ngrams(hyp, n);
    NgramCounts max_ref;
    for (const auto& ref : refs) {
      for (const auto& [gram, c] : word_ngrams(ref, n)) {
        auto& slot = max_ref[gram];
        slot = std::max(slot, c);
      }
    }
    stats.matches[n - 1] = clipped_matches(hyp_counts, max_ref);
    stats.totals[n - 1] = hyp.size() >= static_cast<std::size_t>(n) ? hyp.size() - n + 1 : 0;
  }
  return stats;
}

MetricScore bleu_from_statistics(const BleuStats& stats, Smoothing smoothing) {
  MetricScore score;
  score.components.resize(kBleuOrder, 0.0);
  for (int n = 0; n < kBleuOrder; ++n) {
    if (stats.totals[n] > 0)
      score.components[n] =
          static_cast<double>(stats.matches[n]) / static_cast<double>(stats.totals[n]);
  }

  if (stats.hyp_len == 0) {
    score.brevity_penalty = 0.0;
    return score;
  }
  if (stats.hyp_len < stats.ref_len)
    score.brevity_penalty =
        std::exp(1.0 - static_cast<double>(stats.ref_len) / static_cast<double>(stats.hyp_len));

  // No matching n-gram at all scores 0 under every smoothing mode.
  if (std::all_of(stats.matches.begin(), stats.matches.end(), [](std::size_t m) { return m == 0; }))
    return score;

  double log_sum = 0.0;
  int order = 0;
  double zero_scale = 1.0;
  for (int n = 0; n < kBleuOrder; ++n) {
    const double total = static_cast<double>(stats.totals[n]);
    if (smoothing == Smoothing::exp_floor) {
      if (stats.totals[n] == 0) break;  // effective order
      double p;
      if (stats.matches[n] == 0) {
        zero_scale *= 2.0;
        p = 1.0 / (zero_scale * total);
      } else {
        p = static_cast<double>(stats.matches[n]) / total;
      }
      log_sum += std::log(p);
      ++order;
    } else {
      if (stats.matches[n] == 0) return score;  // any zero precision gives 0
      log_sum += std::log(static_cast<double>(stats.matches[n]) / total);
      ++order;
    }
  }
  if (order == 0) return score;
  score.value = std::clamp(100.0 * score.brevity_penalty * std::exp(log_sum / order), 0.0, 100.0);
  return score;
}

MetricScore sentence_bleu(const TokenSequence& hyp, std::span<const TokenSequence> refs,
                          Smoothing smoothing) {
  return bleu_from_statistics(bleu_statistics(hyp, refs), smoothing);
}

MetricScore sentence_bleu(const TokenSequence& hyp, const TokenSequence& ref,
                          Smoothing smoothing) {
  return sentence_bleu(hyp, std::span<const TokenSequence>(&ref, 1), smoothing);
}

MetricScore corpus_bleu(std::span<const TokenSequence> hyps,
                        std::span<const std::vector<TokenSequence>> refs) {
  if (hyps.size() != refs.size())
    throw InvalidArgument("corpus_bleu: " + std::to_string(hyps.size()) + " hypotheses but " +
                          std::to_string(refs.size()) + " reference sets");
  if (hyps.empty()) throw InvalidArgument("corpus_bleu: empty corpus");
  BleuStats total;
  for (std::size_t i = 0; i < hyps.size(); ++i) total += bleu_statistics(hyps[i], refs[i]);
  return bleu_from_statistics(total, Smoothing::none);
}

MetricScore corpus_bleu(std::span<const TokenSequence> hyps, std::span<const TokenSequence> refs) {
  std::vector<std::vector<TokenSequence>> wrapped;
  wrapped.reserve(refs.size());
  for (const auto& r : refs) wrapped.push_back({r});
  return corpus_bleu(hyps, std::span<const std::vector<TokenSequence>>(wrapped));
}

ChrfStats& ChrfStats::operator+=(const ChrfStats& o) {
  if (orders.empty()) orders.resize(o.orders.size());
  for (std::size_t i = 0; i < orders.size() && i < o.orders.size(); ++i)
    for (int k = 0; k < 3; ++k) orders[i][k] += o.orders[i][k];
  return *this;
}

ChrfStats chrf_statistics(std::string_view hyp, std::string_view ref, const ChrfConfig& cfg) {
  ChrfStats stats;
  const std::u32string hyp_chars = utf8::strip_whitespace(utf8::decode(hyp));
  const std::u32string ref_chars = utf8::strip_whitespace(utf8::decode(ref));
  for (int n = 1; n <= cfg.char_order; ++n) {
    const auto h = char_ngrams(hyp_chars, n);
    const auto r = char_ngrams(ref_chars, n);
    stats.orders.push_back({total_count(h), total_count(r), clipped_matches(h, r)});
  }
  const TokenSequence hyp_words = chrf_words(hyp);
  const TokenSequence ref_words = chrf_words(ref);
  for (int n = 1; n <= cfg.word_order; ++n) {
    const auto h = word_ngrams(hyp_words, n);
    const auto r = word_ngrams(ref_words, n);
    stats.orders.push_back({total_count(h), total_count(r), clipped_matches(h, r)});
  }
  return stats;
}

MetricScore chrf_from_statistics(const ChrfStats& stats, const ChrfConfig& cfg) {
  MetricScore score;
  const auto n_char = static_cast<std::size_t>(cfg.char_order);
  score.value = std::clamp(averaged_f(stats, 0, stats.orders.size(), cfg.beta), 0.0, 100.0);
  score.components = {averaged_f(stats, 0, n_char, cfg.beta),
                      averaged_f(stats, n_char, stats.orders.size(), cfg.beta)};
  return score;
}

MetricScore chrf_pp(std::string_view hyp, std::string_view ref, const ChrfConfig& cfg) {
  return chrf_from_statistics(chrf_statistics(hyp, ref, cfg), cfg);
}

MetricScore corpus_chrf_pp(std::span<const std::string> hyps, std::span<const std::string> refs,
                           const ChrfConfig& cfg) {
  if (hyps.size() != refs.size())
    throw InvalidArgument("corpus_chrf_pp: hypothesis/reference count mismatch");
  ChrfStats total;
  for (std::size_t i = 0; i < hyps.size(); ++i) total += chrf_statistics(hyps[i], refs[i], cfg);
  return chrf_from_statistics(total, cfg);
}

double normalize_reward(const MetricScore& score) {
  return std::clamp(score.value / 100.0, 0.0, 1.0);
}

}  // namespace ensemble_forge::metrics
