#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ensemble_forge/backends.hpp"

namespace ensemble_forge::ccb {

struct ScoredCandidate {
  std::size_t system_id = 0;
  std::string text;
  double reward = 0.0;

  bool operator==(const ScoredCandidate&) const = default;
};

/// K candidates ordered by reward, highest first.
struct SelectedSet {
  std::vector<ScoredCandidate> items;

  /// Stable sort by descending reward (equal rewards keep input order).
  static SelectedSet sorted(std::vector<ScoredCandidate> items);
  std::vector<double> rewards() const;
  std::size_t size() const noexcept { return items.size(); }
  bool operator==(const SelectedSet&) const = default;
};

/// Candidates from systems outside the selected set.
using RejectedSet = std::vector<ScoredCandidate>;
/// Produces the rejected set on demand; only called when some gate fires.
using RejectedProvider = std::function<RejectedSet()>;

/// {r1, r1 - r2, ..., r(K-1) - rK}. Throws InvalidArgument for an empty or
/// increasing sequence and NumericError for non-finite rewards.
std::vector<double> compute_margins(std::span<const double> rewards);

/// Margins this close below tau still meet it, so decimal rewards gate as
/// written (0.3 - 0.1 is 0.19999999999999998 in binary).
inline constexpr double kMarginTolerance = 1e-9;

/// 1-based positions m in 2..K whose margin[m] >= tau. margin[1] is never
/// consulted.
std::vector<std::size_t> gated_positions(std::span<const double> margins, double tau);

struct Languages {
  std::string src = "en";
  std::string tgt = "hi";
};

struct CCBConfig {
  double tau = 0.2;
  BackendPtr enhancer;
  /// When false the rejected set is fetched even if no gate fires.
  bool lazy_rejected = true;
  /// Keep an enhanced candidate only if it rescores strictly higher.
  bool rescore_after = false;
  std::function<double(const std::string& candidate)> rescore;
  /// Template text with {src_lang} {tgt_lang} {source} {current_reward}
  /// {current} {rejected} placeholders; empty means the built-in template.
  std::string prompt_template;
};

struct AuditRecord {
  std::optional<std::size_t> sentence_id;
  std::size_t position = 0;  // 1-based, as in the margin sequence
  double margin = 0.0;
  bool fired = false;
  double enhancer_latency_ms = 0.0;
  bool replaced = false;
  std::string error;
};

struct CCBResult {
  SelectedSet selected;
  std::vector<AuditRecord> audit;
  std::vector<std::size_t> enhanced_positions;
  bool rejected_requested = false;
};

struct CCBInput {
  std::string source;
  Languages langs;
  CallContext call;
};

/// Margins come from the input rewards once; positions are visited in
/// order 2..K and a firing position is replaced by the enhancer's output
/// (same system id, original reward kept unless rescored). A failing
/// enhancer leaves the position untouched and records the error.
CCBResult apply_ccb(const SelectedSet& selected, const RejectedProvider& rejected,
                    const CCBConfig& cfg, const CCBInput& input);

inline constexpr int kPromptTemplateVersion = 1;
std::string_view default_prompt_template();

/// Fills the template. Rejected candidates are listed by descending reward
/// as "- (reward 0.1234) text"; an empty set is listed as "- (none)".
/// Newlines inside texts become spaces.
std::string build_enhancer_prompt(const ScoredCandidate& current, const RejectedSet& rejected,
                                  std::string_view source, const Languages& langs,
                                  std::string_view template_text = {});

struct ParsedPrompt {
  std::string source;
  std::string current;
  double current_reward = 0.0;
  std::vector<std::pair<std::string, double>> rejected;
};

/// Inverse of build_enhancer_prompt for the built-in template. Throws
/// FormatError when the source or current-translation line is missing.
ParsedPrompt parse_enhancer_prompt(std::string_view prompt);

/// {"sentence_id","position","margin","fired","enhancer_latency_ms","replaced"}
/// per line, plus "error" when the enhancer failed.
void write_audit_jsonl(const std::vector<AuditRecord>& records, std::ostream& out);

}  // namespace ensemble_forge::ccb
