#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ensemble_forge/embedder.hpp"
#include "ensemble_forge/error.hpp"

namespace ensemble_forge {

using Json = nlohmann::json;

enum class Role { translator, fuser, enhancer, embedder, reward };
enum class Transport { mock, subprocess, http };

std::string_view to_string(Role role);
std::string_view to_string(Transport transport);
Role parse_role(std::string_view name);
Transport parse_transport(std::string_view name);

/// HTTP path for a role: /translate, /fuse, /enhance, /embed or /score.
std::string_view endpoint_path(Role role);

/// Wire schema (JSON objects, same for every transport):
///   translator  {source, src_lang, tgt_lang} -> {translation}
///   fuser       {source, candidates:[string]} -> {translation}
///   enhancer    {prompt}                      -> {translation}
///   embedder    {text}                        -> {vector:[768 numbers]}
///   reward      {source, candidate}           -> {score}
/// Extra fields are tolerated. Both throw InvalidArgument with the first
/// violated field.
void validate_request(Role role, const Json& request);
void validate_response(Role role, const Json& response);

struct BackendSpec {
  std::string name;
  Role role = Role::translator;
  Transport transport = Transport::mock;
  /// http: base URL ("http://host:port"); subprocess: shell command line.
  std::string endpoint;
  /// Translators only; dense 0..L-1 within a pool.
  std::optional<std::size_t> system_id;
  double timeout_s = 30.0;
  /// Attempts per call for the http transport. Other transports try once.
  int max_attempts = 3;
  double backoff_initial_s = 0.05;
  double backoff_max_s = 1.0;
};

/// Thread-safe call accounting. Every attempt counts as one call, so a call
/// that times out three times shows up as three.
class CostLedger {
 public:
  struct Totals {
    Role role = Role::translator;
    std::uint64_t calls = 0;
    std::uint64_t failures = 0;
    double seconds = 0.0;
  };

  CostLedger() = default;
  CostLedger(const CostLedger& other);
  CostLedger& operator=(const CostLedger& other);

  void record(const std::string& backend, Role role, std::optional<std::size_t> sentence_id,
              double seconds, bool ok);
  void merge(const CostLedger& other);

  std::map<std::string, Totals> backends() const;
  /// sentence id -> backend name -> attempts.
  std::map<std::size_t, std::map<std::string, std::uint64_t>> per_sentence() const;
  std::uint64_t role_calls(Role role) const;
  std::uint64_t sentence_role_calls(std::size_t sentence_id, Role role) const;
  std::uint64_t total_calls() const;

 private:
  mutable std::mutex mutex_;
  std::map<std::string, Totals> backends_;
  std::map<std::size_t, std::map<std::string, std::uint64_t>> sentences_;
};

struct CallContext {
  std::optional<std::size_t> sentence_id;
  CostLedger* ledger = nullptr;
};

/// Raised by channels. Retryable failures (timeouts, HTTP 5xx, refused
/// connections) are retried by http backends; everything else is final.
class TransportError : public Error {
 public:
  TransportError(const std::string& what, bool retryable) : Error(what), retryable_(retryable) {}
  bool retryable() const noexcept { return retryable_; }

 private:
  bool retryable_;
};

/// One request/response exchange over some transport.
class Channel {
 public:
  virtual ~Channel() = default;
  virtual Json exchange(Role role, const Json& request) = 0;
};

using MockHandler = std::function<Json(const Json& request)>;

class Backend {
 public:
  Backend(BackendSpec spec, std::unique_ptr<Channel> channel);

  const BackendSpec& spec() const noexcept { return spec_; }
  const std::string& name() const noexcept { return spec_.name; }

  /// Validates the request, exchanges it (with retries for http), validates
  /// the response and records every attempt in ctx.ledger. Failures are
  /// raised as BackendError naming this backend.
  Json call(const Json& request, const CallContext& ctx = {}) const;

 private:
  BackendSpec spec_;
  std::unique_ptr<Channel> channel_;
};

using BackendPtr = std::shared_ptr<const Backend>;

/// Builds the channel described by spec.transport. Mock specs need a handler.
BackendPtr make_backend(BackendSpec spec, MockHandler handler = {});

std::string translate(const Backend& b, std::string_view source, std::string_view src_lang,
                      std::string_view tgt_lang, const CallContext& ctx = {});
std::string fuse(const Backend& b, std::string_view source,
                 const std::vector<std::string>& candidates, const CallContext& ctx = {});
std::string enhance(const Backend& b, std::string_view prompt, const CallContext& ctx = {});
StateVector embed(const Backend& b, std::string_view text, const CallContext& ctx = {});
double score(const Backend& b, std::string_view source, std::string_view candidate,
             const CallContext& ctx = {});

/// Translators indexed by system id plus the single-instance roles.
/// Everything except the translators is optional.
struct BackendPool {
  std::vector<BackendPtr> translators;
  BackendPtr fuser;
  BackendPtr enhancer;
  BackendPtr embedder;
  BackendPtr reward;

  std::size_t size() const noexcept { return translators.size(); }
  /// Throws InvalidArgument if roles are mismatched or system ids are not
  /// exactly 0..L-1 in order.
  void validate() const;
};

struct CostSummary {
  std::size_t sentences = 0;
  std::size_t pool_size = 0;
  std::map<Role, std::uint64_t> role_calls;
  double translator_calls_per_sentence = 0.0;
  /// pool_size * sentences: what a ranker that translates with every system pays.
  std::uint64_t full_pool_translator_calls = 0;
  /// full_pool_translator_calls / translator calls (0 when nothing was called).
  double full_pool_ratio = 0.0;
  double translator_seconds = 0.0;
};

CostSummary ledger_report(const CostLedger& ledger, std::size_t sentences, std::size_t pool_size);
/// Call counts only; wall time is excluded so the output is reproducible.
Json to_json(const CostSummary& summary);

/// Local HTTP server speaking the wire schema with trivial behaviour:
/// /translate echoes the source, /fuse applies the overlap fuser, /enhance
/// returns the current translation found in the prompt, /embed hashes the
/// text, /score returns token overlap with the source, /ping -> {"ok":true}.
/// Misbehaviour knobs exist so clients can be tested against failures.
class StubServer {
 public:
  struct Options {
    double delay_s = 0.0;
    /// The first n requests answer 503.
    int fail_first = 0;
    /// Answer with a JSON body that violates the response schema.
    bool malformed = false;
  };

  StubServer();
  explicit StubServer(Options options);
  ~StubServer();
  StubServer(const StubServer&) = delete;
  StubServer& operator=(const StubServer&) = delete;

  /// Binds (port 0 picks a free port) and serves on a background thread.
  int start(const std::string& host = "127.0.0.1", int port = 0);
  /// Serves on the calling thread until stop().
  void listen(const std::string& host, int port);
  void stop();
  int port() const noexcept { return port_; }
  std::string url() const;
  std::uint64_t requests() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int port_ = 0;
};

}  // namespace ensemble_forge
