#include "ensemble_forge/ccb.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

#include <spdlog/spdlog.h>

#include "ensemble_forge/error.hpp"

namespace ensemble_forge::ccb {

namespace detail {
extern const std::string_view kPromptTemplateV1;
}

namespace {

std::string format_reward(double r) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", r);
  return buf;
}

std::string one_line(std::string_view text) {
  std::string s(text);
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '\r', ' ');
  return s;
}

bool starts_with(std::string_view s, std::string_view prefix) {
  return s.substr(0, prefix.size()) == prefix;
}

double parse_reward(std::string_view text) {
  try {
    std::size_t used = 0;
    const double v = std::stod(std::string(text), &used);
    if (used != text.size()) throw FormatError("");
    return v;
  } catch (const std::exception&) {
    throw FormatError("bad reward '" + std::string(text) + "' in enhancer prompt");
  }
}

}  // namespace

SelectedSet SelectedSet::sorted(std::vector<ScoredCandidate> items) {
  std::stable_sort(items.begin(), items.end(),
                   [](const ScoredCandidate& a, const ScoredCandidate& b) { return a.reward > b.reward; });
  return SelectedSet{std::move(items)};
}

std::vector<double> SelectedSet::rewards() const {
  std::vector<double> r;
  for (const auto& c : items) r.push_back(c.reward);
  return r;
}

std::vector<double> compute_margins(std::span<const double> rewards) {
  if (rewards.empty()) throw InvalidArgument("compute_margins needs at least one reward");
  for (double r : rewards)
    if (!std::isfinite(r)) throw NumericError("non-finite reward");
  std::vector<double> m{rewards[0]};
  for (std::size_t i = 1; i < rewards.size(); ++i) {
    if (rewards[i] > rewards[i - 1]) throw InvalidArgument("rewards must be sorted in non-increasing order");
    m.push_back(rewards[i - 1] - rewards[i]);
  }
  return m;
}

std::vector<std::size_t> gated_positions(std::span<const double> margins, double tau) {
  std::vector<std::size_t> out;
  for (std::size_t m = 2; m <= margins.size(); ++m)
    if (margins[m - 1] >= tau - kMarginTolerance) out.push_back(m);
  return out;
}

CCBResult apply_ccb(const SelectedSet& selected, const RejectedProvider& rejected,
                    const CCBConfig& cfg, const CCBInput& input) {
  if (std::isnan(cfg.tau)) throw InvalidArgument("CCB threshold must not be NaN");
  const auto rewards = selected.rewards();
  const auto margins = compute_margins(rewards);
  const auto fire = gated_positions(margins, cfg.tau);

  CCBResult result;
  result.selected = selected;
  RejectedSet rej;
  bool have_rejected = false;
  auto fetch_rejected = [&] {
    if (have_rejected) return;
    if (rejected) rej = rejected();
    have_rejected = true;
    result.rejected_requested = true;
  };
  if (!cfg.lazy_rejected) fetch_rejected();

  for (std::size_t m = 2; m <= selected.size(); ++m) {
    AuditRecord rec;
    rec.sentence_id = input.call.sentence_id;
    rec.position = m;
    rec.margin = margins[m - 1];
    rec.fired = std::find(fire.begin(), fire.end(), m) != fire.end();
    if (rec.fired) {
      result.enhanced_positions.push_back(m);
      fetch_rejected();
      const ScoredCandidate& original = selected.items[m - 1];
      const auto t0 = std::chrono::steady_clock::now();
      try {
        if (!cfg.enhancer) throw Error("no enhancer configured");
        const std::string prompt =
            build_enhancer_prompt(original, rej, input.source, input.langs, cfg.prompt_template);
        std::string improved = enhance(*cfg.enhancer, prompt, input.call);
        rec.enhancer_latency_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        bool keep = true;
        if (cfg.rescore_after && cfg.rescore) keep = cfg.rescore(improved) > original.reward;
        if (keep) {
          result.selected.items[m - 1].text = std::move(improved);
          rec.replaced = true;
        }
      } catch (const Error& e) {
        rec.enhancer_latency_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        rec.error = e.what();
        spdlog::warn("CCB position {}: keeping original candidate: {}", m, e.what());
      }
    }
    result.audit.push_back(std::move(rec));
  }
  return result;
}

std::string_view default_prompt_template() { return detail::kPromptTemplateV1; }

std::string build_enhancer_prompt(const ScoredCandidate& current, const RejectedSet& rejected,
                                  std::string_view source, const Languages& langs,
                                  std::string_view template_text) {
  if (template_text.empty()) template_text = default_prompt_template();
  RejectedSet ordered = rejected;
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const ScoredCandidate& a, const ScoredCandidate& b) { return a.reward > b.reward; });
  std::string block;
  for (const auto& r : ordered) {
    if (!block.empty()) block.push_back('\n');
    block += "- (reward " + format_reward(r.reward) + ") " + one_line(r.text);
  }
  if (block.empty()) block = "- (none)";

  const std::pair<std::string_view, std::string> fields[] = {
      {"src_lang", langs.src},
      {"tgt_lang", langs.tgt},
      {"source", one_line(source)},
      {"current_reward", format_reward(current.reward)},
      {"current", one_line(current.text)},
      {"rejected", block},
  };
  std::string out;
  std::size_t i = 0;
  while (i < template_text.size()) {
    if (template_text[i] == '{') {
      const auto close = template_text.find('}', i);
      if (close != std::string_view::npos) {
        const auto key = template_text.substr(i + 1, close - i - 1);
        auto it = std::find_if(std::begin(fields), std::end(fields),
                               [&](const auto& f) { return f.first == key; });
        if (it != std::end(fields)) {
          out += it->second;
          i = close + 1;
          continue;
        }
      }
    }
    out.push_back(template_text[i++]);
  }
  return out;
}

ParsedPrompt parse_enhancer_prompt(std::string_view prompt) {
  ParsedPrompt p;
  bool have_source = false, have_current = false;
  std::istringstream in{std::string(prompt)};
  std::string line;
  while (std::getline(in, line)) {
    if (starts_with(line, "Source (")) {
      const auto at = line.find("): ");
      if (at == std::string::npos) continue;
      p.source = line.substr(at + 3);
      have_source = true;
    } else if (starts_with(line, "Current translation (reward ")) {
      const std::size_t start = std::string_view("Current translation (reward ").size();
      const auto close = line.find("): ", start);
      if (close == std::string::npos) throw FormatError("malformed current-translation line");
      p.current_reward = parse_reward(std::string_view(line).substr(start, close - start));
      p.current = line.substr(close + 3);
      have_current = true;
    } else if (starts_with(line, "- (reward ")) {
      const std::size_t start = std::string_view("- (reward ").size();
      const auto close = line.find(") ", start);
      if (close == std::string::npos) throw FormatError("malformed rejected-candidate line");
      p.rejected.emplace_back(line.substr(close + 2),
                              parse_reward(std::string_view(line).substr(start, close - start)));
    }
  }
  if (!have_source) throw FormatError("enhancer prompt has no source line");
  if (!have_current) throw FormatError("enhancer prompt has no current-translation line");
  return p;
}

void write_audit_jsonl(const std::vector<AuditRecord>& records, std::ostream& out) {
  for (const auto& r : records) {
    Json j{{"sentence_id", r.sentence_id ? Json(*r.sentence_id) : Json(nullptr)},
           {"position", r.position},
           {"margin", r.margin},
           {"fired", r.fired},
           {"enhancer_latency_ms", r.enhancer_latency_ms},
           {"replaced", r.replaced}};
    if (!r.error.empty()) j["error"] = r.error;
    out << j.dump() << '\n';
  }
}

}  // namespace ensemble_forge::ccb
