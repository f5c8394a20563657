#include "ensemble_forge/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "ensemble_forge/error.hpp"
#include "ensemble_forge/metrics.hpp"
#include "ensemble_forge/mock_pool.hpp"
#include "ensemble_forge/pipeline.hpp"
#include "ensemble_forge/rng.hpp"

namespace ensemble_forge {

namespace {

bool is_bare_key_char(char c) {
  return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_' || c == '-';
}

bool is_dotted_bare_key(std::string_view k) {
  if (k.empty() || k.front() == '.' || k.back() == '.') return false;
  for (std::size_t i = 0; i < k.size(); ++i) {
    if (k[i] == '.') {
      if (k[i + 1] == '.') return false;
    } else if (!is_bare_key_char(k[i])) {
      return false;
    }
  }
  return true;
}

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

void append_utf8(std::string& out, std::uint32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

// Reads one value starting at s[pos]; leaves pos after it.
class ValueReader {
 public:
  ValueReader(std::string_view s, std::size_t pos, std::string where) : s_(s), where_(std::move(where)), pos_(pos) {}

  ConfigValue value() {
    skip_space();
    if (pos_ >= s_.size()) fail("missing value");
    const char c = s_[pos_];
    if (c == '"' || c == '\'') return string();
    if (c == '[') return array();
    return scalar();
  }

  void expect_end() {
    skip_space();
    if (pos_ < s_.size() && s_[pos_] != '#') fail("unexpected text after value");
  }

 private:
  [[noreturn]] void fail(const std::string& what) const { throw FormatError(where_ + ": " + what); }

  void skip_space() {
    while (pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t' || s_[pos_] == '\r')) ++pos_;
  }

  std::string string() {
    const char quote = s_[pos_++];
    if (s_.substr(pos_, 2) == std::string(2, quote)) fail("multi-line strings are not supported");
    std::string out;
    while (true) {
      if (pos_ >= s_.size()) fail("unterminated string");
      const char c = s_[pos_++];
      if (c == quote) return out;
      if (quote == '\'' || c != '\\') {
        out.push_back(c);
        continue;
      }
      if (pos_ >= s_.size()) fail("unterminated escape");
      const char e = s_[pos_++];
      switch (e) {
        case 'b': out.push_back('\b'); break;
        case 't': out.push_back('\t'); break;
        case 'n': out.push_back('\n'); break;
        case 'f': out.push_back('\f'); break;
        case 'r': out.push_back('\r'); break;
        case '"': out.push_back('"'); break;
        case '\\': out.push_back('\\'); break;
        case 'u':
        case 'U': {
          const std::size_t n = e == 'u' ? 4 : 8;
          if (pos_ + n > s_.size()) fail("short unicode escape");
          std::uint32_t cp = 0;
          const auto hex = s_.substr(pos_, n);
          const auto r = std::from_chars(hex.data(), hex.data() + n, cp, 16);
          if (r.ec != std::errc() || r.ptr != hex.data() + n || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF))
            fail("bad unicode escape");
          append_utf8(out, cp);
          pos_ += n;
          break;
        }
        default: fail(std::string("unknown escape \\") + e);
      }
    }
  }

  std::vector<std::string> array() {
    ++pos_;
    std::vector<std::string> out;
    while (true) {
      skip_space();
      if (pos_ >= s_.size()) fail("unterminated array (arrays must fit on one line)");
      if (s_[pos_] == ']') {
        ++pos_;
        return out;
      }
      if (s_[pos_] != '"' && s_[pos_] != '\'') fail("arrays may only hold strings");
      out.push_back(string());
      skip_space();
      if (pos_ < s_.size() && s_[pos_] == ',') {
        ++pos_;
      } else if (pos_ >= s_.size() || s_[pos_] != ']') {
        fail("expected ',' or ']' in array");
      }
    }
  }

  ConfigValue scalar() {
    const auto start = pos_;
    while (pos_ < s_.size() && s_[pos_] != ' ' && s_[pos_] != '\t' && s_[pos_] != '#' && s_[pos_] != '\r') ++pos_;
    const std::string_view tok = s_.substr(start, pos_ - start);
    if (tok == "true") return true;
    if (tok == "false") return false;
    if (tok == "inf" || tok == "+inf") return std::numeric_limits<double>::infinity();
    if (tok == "-inf") return -std::numeric_limits<double>::infinity();
    if (tok == "nan" || tok == "+nan" || tok == "-nan") return std::numeric_limits<double>::quiet_NaN();

    // Underscores must sit between digits.
    std::string digits;
    for (std::size_t i = 0; i < tok.size(); ++i) {
      if (tok[i] == '_') {
        const bool ok = i > 0 && i + 1 < tok.size() && std::isdigit(static_cast<unsigned char>(tok[i - 1])) &&
                        std::isdigit(static_cast<unsigned char>(tok[i + 1]));
        if (!ok) fail("bad value '" + std::string(tok) + "'");
        continue;
      }
      digits.push_back(tok[i]);
    }
    if (digits.empty()) fail("missing value");
    const bool is_float = digits.find_first_of(".eE") != std::string::npos;
    const char* b = digits.data() + (digits[0] == '+' ? 1 : 0);
    const char* e = digits.data() + digits.size();
    const std::string_view body(b, static_cast<std::size_t>(e - b));
    const std::string_view unsigned_body = body.substr(!body.empty() && body[0] == '-' ? 1 : 0);
    if (unsigned_body.empty() || !std::isdigit(static_cast<unsigned char>(unsigned_body[0])))
      fail("bad value '" + std::string(tok) + "'");
    // No leading zeros on the integer part.
    const auto int_part = unsigned_body.substr(0, unsigned_body.find_first_of(".eE"));
    if (int_part.size() > 1 && int_part[0] == '0') fail("leading zero in '" + std::string(tok) + "'");
    if (is_float) {
      const auto dot = unsigned_body.find('.');
      if (dot != std::string_view::npos &&
          (dot + 1 >= unsigned_body.size() || !std::isdigit(static_cast<unsigned char>(unsigned_body[dot + 1]))))
        fail("bad float '" + std::string(tok) + "'");
      double v = 0.0;
      const auto r = std::from_chars(b, e, v);
      if (r.ec != std::errc() || r.ptr != e) fail("bad float '" + std::string(tok) + "'");
      return v;
    }
    std::int64_t v = 0;
    const auto r = std::from_chars(b, e, v);
    if (r.ec != std::errc() || r.ptr != e) fail("bad value '" + std::string(tok) + "'");
    return v;
  }

  std::string_view s_;
  std::string where_;
  std::size_t pos_ = 0;
};

std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  std::string s(buf, r.ptr);
  if (s.find_first_of(".e") == std::string::npos) s += ".0";
  // TOML wants a digit after the dot and allows "1e-05".
  return s;
}

std::string format_value(const ConfigValue& v) {
  return std::visit(
      [](const auto& x) -> std::string {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, bool>) {
          return x ? "true" : "false";
        } else if constexpr (std::is_same_v<T, std::int64_t>) {
          return std::to_string(x);
        } else if constexpr (std::is_same_v<T, double>) {
          return format_double(x);
        } else if constexpr (std::is_same_v<T, std::string>) {
          return toml_quote(x);
        } else {
          std::string s = "[";
          for (std::size_t i = 0; i < x.size(); ++i) s += (i ? ", " : "") + toml_quote(x[i]);
          return s + "]";
        }
      },
      v);
}

[[noreturn]] void type_error(std::string_view key, std::string_view want) {
  throw InvalidArgument("config key '" + std::string(key) + "' expects " + std::string(want));
}

std::uint64_t as_u64(std::string_view key, const ConfigValue& v) {
  const auto* i = std::get_if<std::int64_t>(&v);
  if (!i || *i < 0) type_error(key, "a non-negative integer");
  return static_cast<std::uint64_t>(*i);
}

std::size_t as_size(std::string_view key, const ConfigValue& v) { return static_cast<std::size_t>(as_u64(key, v)); }

double as_double(std::string_view key, const ConfigValue& v) {
  if (const auto* d = std::get_if<double>(&v)) return *d;
  if (const auto* i = std::get_if<std::int64_t>(&v)) return static_cast<double>(*i);
  type_error(key, "a number");
}

bool as_bool(std::string_view key, const ConfigValue& v) {
  const auto* b = std::get_if<bool>(&v);
  if (!b) type_error(key, "true or false");
  return *b;
}

std::string as_string(std::string_view key, const ConfigValue& v) {
  const auto* s = std::get_if<std::string>(&v);
  if (!s) type_error(key, "a string");
  return *s;
}

std::vector<std::string> as_strings(std::string_view key, const ConfigValue& v) {
  const auto* s = std::get_if<std::vector<std::string>>(&v);
  if (!s) type_error(key, "an array of strings");
  return *s;
}

struct KeyDef {
  std::function<void(RunConfig&, std::string_view, const ConfigValue&)> set;
  std::function<ConfigValue(const RunConfig&)> get;
};

ConfigValue int_value(std::uint64_t v) { return static_cast<std::int64_t>(v); }

const std::map<std::string, KeyDef, std::less<>>& registry() {
  static const std::map<std::string, KeyDef, std::less<>> keys = [] {
    std::map<std::string, KeyDef, std::less<>> m;
    auto size_key = [&](const char* name, auto member) {
      m[name] = {[member](RunConfig& c, std::string_view k, const ConfigValue& v) { member(c) = as_size(k, v); },
                 [member](const RunConfig& c) { return int_value(member(c)); }};
    };
    auto double_key = [&](const char* name, auto member) {
      m[name] = {[member](RunConfig& c, std::string_view k, const ConfigValue& v) { member(c) = as_double(k, v); },
                 [member](const RunConfig& c) { return ConfigValue(member(c)); }};
    };
    auto bool_key = [&](const char* name, auto member) {
      m[name] = {[member](RunConfig& c, std::string_view k, const ConfigValue& v) { member(c) = as_bool(k, v); },
                 [member](const RunConfig& c) { return ConfigValue(member(c)); }};
    };
    auto string_key = [&](const char* name, auto member) {
      m[name] = {[member](RunConfig& c, std::string_view k, const ConfigValue& v) { member(c) = as_string(k, v); },
                 [member](const RunConfig& c) { return ConfigValue(member(c)); }};
    };
    auto strings_key = [&](const char* name, auto member) {
      m[name] = {[member](RunConfig& c, std::string_view k, const ConfigValue& v) { member(c) = as_strings(k, v); },
                 [member](const RunConfig& c) { return ConfigValue(member(c)); }};
    };
#define EF_FIELD(expr) [](auto& c) -> decltype(auto) { return (c.expr); }
    m["seed"] = {[](RunConfig& c, std::string_view k, const ConfigValue& v) { c.seed = as_u64(k, v); },
                 [](const RunConfig& c) { return int_value(c.seed); }};
    size_key("k", EF_FIELD(k));
    string_key("src_lang", EF_FIELD(src_lang));
    string_key("tgt_lang", EF_FIELD(tgt_lang));
    size_key("max_concurrent_backends", EF_FIELD(trainer.max_concurrent_backends));

    size_key("dqn.batch_size", EF_FIELD(trainer.batch_size));
    size_key("dqn.steps_batch_size", EF_FIELD(trainer.steps_batch_size));
    double_key("dqn.gamma", EF_FIELD(trainer.gamma));
    double_key("dqn.eps_start", EF_FIELD(trainer.eps_start));
    double_key("dqn.eps_end", EF_FIELD(trainer.eps_end));
    double_key("dqn.eps_decay", EF_FIELD(trainer.eps_decay));
    double_key("dqn.tau", EF_FIELD(trainer.tau_polyak));
    size_key("dqn.target_update", EF_FIELD(trainer.target_update_interval));
    size_key("dqn.memory_size", EF_FIELD(trainer.memory_size));
    double_key("dqn.learning_rate", EF_FIELD(trainer.lr));
    size_key("dqn.episodes", EF_FIELD(trainer.episodes));
    size_key("dqn.episode_len", EF_FIELD(trainer.episode_len));
    size_key("dqn.moving_average_window", EF_FIELD(trainer.moving_average_window));
    bool_key("dqn.bandit_mode", EF_FIELD(trainer.bandit_mode));
    string_key("dqn.checkpoint", EF_FIELD(qnet_checkpoint));

    string_key("corpus.path", EF_FIELD(corpus_path));
    string_key("corpus.eval_path", EF_FIELD(eval_corpus_path));
    size_key("corpus.train_size", EF_FIELD(corpus_train_size));
    size_key("corpus.eval_size", EF_FIELD(corpus_eval_size));
    m["corpus.seed"] = {[](RunConfig& c, std::string_view k, const ConfigValue& v) { c.corpus_seed = as_u64(k, v); },
                        [](const RunConfig& c) { return int_value(c.effective_corpus_seed()); }};

    string_key("pool.kind", EF_FIELD(pool_kind));
    size_key("pool.systems", EF_FIELD(pool_systems));
    m["pool.seed"] = {[](RunConfig& c, std::string_view k, const ConfigValue& v) { c.pool_seed = as_u64(k, v); },
                      [](const RunConfig& c) { return int_value(c.effective_pool_seed()); }};
    double_key("pool.dropout", EF_FIELD(pool_dropout));
    double_key("pool.good_noise", EF_FIELD(pool_good_noise));
    string_key("pool.enhancer", EF_FIELD(pool_enhancer));
    string_key("pool.candidates", EF_FIELD(candidates_path));

    string_key("backend.transport", EF_FIELD(backend_transport));
    strings_key("backend.translators", EF_FIELD(backend_translators));
    string_key("backend.fuser", EF_FIELD(backend_fuser));
    string_key("backend.enhancer", EF_FIELD(backend_enhancer));
    string_key("backend.embedder", EF_FIELD(backend_embedder));
    string_key("backend.reward", EF_FIELD(backend_reward));
    double_key("backend.timeout_s", EF_FIELD(backend_timeout_s));
    m["backend.max_attempts"] = {
        [](RunConfig& c, std::string_view k, const ConfigValue& v) {
          const auto n = as_u64(k, v);
          if (n > 1000) type_error(k, "an integer in 1..1000");
          c.backend_max_attempts = static_cast<int>(n);
        },
        [](const RunConfig& c) { return ConfigValue(static_cast<std::int64_t>(c.backend_max_attempts)); }};

    string_key("reward.kind", EF_FIELD(reward_kind));
    string_key("rm.checkpoint", EF_FIELD(rm_checkpoint));
    double_key("rm.lr", EF_FIELD(rm_lr));
    size_key("rm.steps", EF_FIELD(rm_steps));
    size_key("rm.top_preferred", EF_FIELD(rm_top_preferred));

    double_key("ccb.tau", EF_FIELD(ccb_tau));
    bool_key("ccb.lazy_rejected", EF_FIELD(ccb_lazy_rejected));
    bool_key("ccb.rescore_after", EF_FIELD(ccb_rescore_after));
    string_key("ccb.prompt_template", EF_FIELD(ccb_prompt_template_path));

    strings_key("eval.methods", EF_FIELD(methods));
    size_key("eval.workers", EF_FIELD(workers));
    double_key("eval.ranker_latency_s", EF_FIELD(ranker_latency_s));
    string_key("oracle.selector", EF_FIELD(oracle_selector));
#undef EF_FIELD
    return m;
  }();
  return keys;
}

void check(bool ok, std::string_view key, const std::string& message) {
  if (!ok) throw InvalidArgument("config key '" + std::string(key) + "': " + message);
}

}  // namespace

std::vector<std::pair<std::string, ConfigValue>> parse_flat_toml(std::string_view text, std::string_view origin) {
  std::vector<std::pair<std::string, ConfigValue>> out;
  std::set<std::string, std::less<>> seen;
  std::set<std::string, std::less<>> tables;
  std::string prefix;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const auto line = trim(text.substr(start, end - start));
    start = end + 1;
    ++line_no;
    const std::string where = std::string(origin) + ":" + std::to_string(line_no);
    if (line.empty() || line[0] == '#') {
      if (end == text.size()) break;
      continue;
    }
    if (line[0] == '[') {
      const auto close = line.find(']');
      if (line.substr(0, 2) == "[[" || close == std::string_view::npos)
        throw FormatError(where + ": bad table header");
      const auto rest = trim(line.substr(close + 1));
      if (!rest.empty() && rest[0] != '#') throw FormatError(where + ": text after table header");
      const auto name = trim(line.substr(1, close - 1));
      if (!is_dotted_bare_key(name)) throw FormatError(where + ": bad table name '" + std::string(name) + "'");
      if (!tables.emplace(name).second) throw FormatError(where + ": duplicate table [" + std::string(name) + "]");
      prefix = std::string(name) + ".";
    } else {
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) throw FormatError(where + ": expected key = value");
      const auto key = trim(line.substr(0, eq));
      if (!is_dotted_bare_key(key)) throw FormatError(where + ": bad key '" + std::string(key) + "'");
      ValueReader reader(line, eq + 1, where);
      auto value = reader.value();
      reader.expect_end();
      std::string full = prefix + std::string(key);
      if (!seen.insert(full).second) throw FormatError(where + ": duplicate key '" + full + "'");
      out.emplace_back(std::move(full), std::move(value));
    }
    if (end == text.size()) break;
  }
  return out;
}

std::string toml_quote(std::string_view s) {
  std::string out = "\"";
  for (unsigned char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\r': out += "\\r"; break;
      case '\b': out += "\\b"; break;
      case '\f': out += "\\f"; break;
      default:
        if (c < 0x20 || c == 0x7F) {
          char buf[8];
          std::snprintf(buf, sizeof buf, "\\u%04X", c);
          out += buf;
        } else {
          out.push_back(static_cast<char>(c));
        }
    }
  }
  return out + "\"";
}

// Derived seeds keep to 63 bits so they survive a round trip through a TOML integer.
constexpr std::uint64_t kSeedMask = 0x7fffffffffffffffULL;
std::uint64_t RunConfig::effective_corpus_seed() const {
  return corpus_seed.value_or(combine_seed(seed, 0xC0) & kSeedMask);
}
std::uint64_t RunConfig::effective_pool_seed() const {
  return pool_seed.value_or(combine_seed(seed, 0x9001) & kSeedMask);
}

dqn::TrainerConfig RunConfig::trainer_config() const {
  auto t = trainer;
  t.k = k;
  return t;
}

rm::RMTrainConfig RunConfig::rm_config() const {
  rm::RMTrainConfig r;
  r.lr = rm_lr;
  r.steps = rm_steps;
  r.seed = seed;
  r.top_preferred = rm_top_preferred;
  return r;
}

void RunConfig::validate() const {
  static const std::set<std::string, std::less<>> kinds{"planted", "noisy_reference", "fixed_table", "external"};
  check(kinds.count(pool_kind) > 0, "pool.kind", "expected planted, noisy_reference, fixed_table or external");
  const bool external = pool_kind == "external";
  const std::size_t systems = external ? backend_translators.size() : pool_systems;
  if (external) {
    check(!backend_translators.empty(), "backend.translators", "external pool needs translators");
    check(!backend_fuser.empty(), "backend.fuser", "external pool needs a fuser");
    check(backend_transport == "http" || backend_transport == "subprocess", "backend.transport",
          "expected http or subprocess");
    check(backend_timeout_s > 0 && std::isfinite(backend_timeout_s), "backend.timeout_s", "must be positive");
    check(backend_max_attempts >= 1, "backend.max_attempts", "must be at least 1");
  } else {
    check(pool_systems >= 2, "pool.systems", "need at least 2 systems");
    check(pool_dropout >= 0 && pool_dropout <= 1, "pool.dropout", "must be in [0, 1]");
    check(pool_good_noise >= 0 && pool_good_noise <= 1, "pool.good_noise", "must be in [0, 1]");
    try {
      mock::parse_enhancer_mode(pool_enhancer);
    } catch (const Error& e) {
      check(false, "pool.enhancer", e.what());
    }
    if (pool_kind == "fixed_table")
      check(!candidates_path.empty(), "pool.candidates", "fixed_table pool needs a candidate cache");
  }
  check(k >= 1 && k <= systems, "k", "must be in 1.." + std::to_string(systems));
  try {
    // K = L is fine for evaluation; train-dqn checks K < L itself.
    auto t = trainer_config();
    t.k = 1;
    t.validate(std::max<std::size_t>(systems, 2));
  } catch (const InvalidArgument& e) {
    throw InvalidArgument(std::string("DQN settings: ") + e.what());
  }
  if (corpus_path.empty()) {
    check(corpus_train_size > 0, "corpus.train_size", "must be positive");
    check(corpus_eval_size > 0, "corpus.eval_size", "must be positive");
  }
  check(!eval_corpus_path.empty() ? !corpus_path.empty() : true, "corpus.eval_path",
        "needs corpus.path as well");
  static const std::set<std::string, std::less<>> rewards{"linear-rm", "reference-bleu", "external", "none"};
  check(rewards.count(reward_kind) > 0, "reward.kind",
        "expected linear-rm, reference-bleu, external or none");
  if (reward_kind == "external")
    check(!backend_reward.empty(), "backend.reward", "reward.kind = external needs an endpoint");
  check(rm_lr > 0 && std::isfinite(rm_lr), "rm.lr", "must be positive");
  check(!std::isnan(ccb_tau) && ccb_tau >= 0, "ccb.tau", "must be >= 0 (inf disables the block)");
  check(workers >= 1, "eval.workers", "must be at least 1");
  check(ranker_latency_s >= 0 && std::isfinite(ranker_latency_s), "eval.ranker_latency_s",
        "must be finite and >= 0");
  check(!methods.empty(), "eval.methods", "must not be empty");
  for (const auto& m : methods) {
    try {
      const auto spec = pipeline::parse_method(m);
      if (spec.method == pipeline::Method::single_system)
        check(spec.system < systems, "eval.methods", m + " is outside the pool");
    } catch (const InvalidArgument& e) {
      check(false, "eval.methods", e.what());
    }
  }
  try {
    pipeline::parse_selector(oracle_selector);
  } catch (const InvalidArgument& e) {
    check(false, "oracle.selector", e.what());
  }
}

RunConfig default_config() {
  RunConfig c;
  for (const auto& m : pipeline::default_methods()) c.methods.push_back(m.name());
  return c;
}

void set_config_value(RunConfig& cfg, std::string_view key, const ConfigValue& value) {
  const auto& reg = registry();
  const auto it = reg.find(key);
  if (it == reg.end()) throw InvalidArgument("unknown config key '" + std::string(key) + "'");
  it->second.set(cfg, key, value);
}

RunConfig parse_config(std::string_view text, std::string_view origin) {
  RunConfig c = default_config();
  for (const auto& [key, value] : parse_flat_toml(text, origin)) set_config_value(c, key, value);
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, _] : registry()) keys.push_back(k);
  return keys;
}

std::string dump_config(const RunConfig& cfg) {
  std::string out = "# effective configuration\n";
  for (const auto& [key, def] : registry()) out += key + " = " + format_value(def.get(cfg)) + "\n";
  return out;
}

Corpora load_corpora(const RunConfig& cfg) {
  Corpora c;
  if (cfg.corpus_path.empty()) {
    mock::PlantedConfig pc;
    pc.k = cfg.k;
    pc.good_noise = cfg.pool_good_noise;
    auto all = mock::make_planted_corpus(cfg.corpus_train_size + cfg.corpus_eval_size, cfg.pool_systems, pc,
                                         cfg.effective_corpus_seed());
    all.src_lang = cfg.src_lang;
    all.tgt_lang = cfg.tgt_lang;
    c.train.src_lang = c.eval.src_lang = cfg.src_lang;
    c.train.tgt_lang = c.eval.tgt_lang = cfg.tgt_lang;
    c.train.entries.assign(all.entries.begin(), all.entries.begin() + static_cast<std::ptrdiff_t>(cfg.corpus_train_size));
    c.eval.entries.assign(all.entries.begin() + static_cast<std::ptrdiff_t>(cfg.corpus_train_size), all.entries.end());
    return c;
  }
  c.train = load_parallel(cfg.corpus_path, cfg.src_lang, cfg.tgt_lang);
  c.eval = cfg.eval_corpus_path.empty() ? c.train : load_parallel(cfg.eval_corpus_path, cfg.src_lang, cfg.tgt_lang);
  return c;
}

namespace {

BackendPtr reference_bleu_scorer(std::shared_ptr<const mock::ReferenceMap> refs) {
  BackendSpec s;
  s.name = "reference-bleu";
  s.role = Role::reward;
  return make_backend(s, [refs](const Json& r) -> Json {
    const auto it = refs->find(r["source"].get<std::string>());
    if (it == refs->end()) return {{"score", 0.0}};
    return {{"score", metrics::normalize_reward(metrics::sentence_bleu(
                          metrics::tokenize(r["candidate"].get<std::string>()), metrics::tokenize(it->second)))}};
  });
}

BackendPtr external(const RunConfig& cfg, std::string name, Role role, const std::string& endpoint,
                    std::optional<std::size_t> system_id = std::nullopt) {
  BackendSpec s;
  s.name = std::move(name);
  s.role = role;
  s.transport = parse_transport(cfg.backend_transport);
  s.endpoint = endpoint;
  s.system_id = system_id;
  s.timeout_s = cfg.backend_timeout_s;
  s.max_attempts = cfg.backend_max_attempts;
  return make_backend(s);
}

}  // namespace

BackendPool build_pool(const RunConfig& cfg, const Corpora& corpora) {
  cfg.validate();
  auto refs = std::make_shared<mock::ReferenceMap>(mock::reference_map(corpora.train));
  for (const auto& e : corpora.eval.entries) refs->emplace(e.source, e.reference);

  BackendPool pool;
  if (cfg.pool_kind == "external") {
    for (std::size_t i = 0; i < cfg.backend_translators.size(); ++i)
      pool.translators.push_back(
          external(cfg, "translator-" + std::to_string(i), Role::translator, cfg.backend_translators[i], i));
    pool.fuser = external(cfg, "fuser", Role::fuser, cfg.backend_fuser);
    if (!cfg.backend_enhancer.empty()) pool.enhancer = external(cfg, "enhancer", Role::enhancer, cfg.backend_enhancer);
    if (!cfg.backend_embedder.empty()) pool.embedder = external(cfg, "embedder", Role::embedder, cfg.backend_embedder);
  } else {
    mock::MockPoolConfig mc;
    mc.kind = mock::parse_pool_kind(cfg.pool_kind);
    mc.systems = cfg.pool_systems;
    mc.seed = cfg.effective_pool_seed();
    mc.planted.k = cfg.k;
    mc.planted.good_noise = cfg.pool_good_noise;
    mc.dropout = cfg.pool_dropout;
    mc.references = refs;
    mc.enhancer = mock::parse_enhancer_mode(cfg.pool_enhancer);
    if (mc.kind == mock::PoolKind::fixed_table) {
      const auto cache = load_cache(cfg.candidates_path, cfg.pool_systems);
      auto table = mock::table_from_cache(corpora.train, cache);
      // Separate corpus files number their entries independently, so the
      // cache ids only identify training sentences then.
      if (cfg.corpus_path.empty() || cfg.eval_corpus_path.empty()) {
        const auto more = mock::table_from_cache(corpora.eval, cache);
        for (std::size_t s = 0; s < table.size(); ++s) table[s].insert(more[s].begin(), more[s].end());
      }
      mc.table = std::make_shared<const mock::TranslationTable>(std::move(table));
    }
    pool = mock::make_mock_pool(mc);
  }

  if (cfg.reward_kind == "linear-rm") {
    pool.reward = rm::make_rm_backend(cfg.rm_checkpoint.empty() ? rm::RMParams{} : rm::load_rm(cfg.rm_checkpoint));
  } else if (cfg.reward_kind == "reference-bleu") {
    pool.reward = reference_bleu_scorer(refs);
  } else if (cfg.reward_kind == "external") {
    pool.reward = external(cfg, "reward", Role::reward, cfg.backend_reward);
  }
  pool.validate();
  return pool;
}

ccb::CCBConfig ccb_config(const RunConfig& cfg) {
  ccb::CCBConfig c;
  c.tau = cfg.ccb_tau;
  c.lazy_rejected = cfg.ccb_lazy_rejected;
  c.rescore_after = cfg.ccb_rescore_after;
  if (!cfg.ccb_prompt_template_path.empty()) {
    std::ifstream in(cfg.ccb_prompt_template_path, std::ios::binary);
    if (!in) throw IoError("cannot open prompt template '" + cfg.ccb_prompt_template_path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    c.prompt_template = ss.str();
  }
  return c;
}

}  // namespace ensemble_forge
