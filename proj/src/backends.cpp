#include "ensemble_forge/backends.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstring>
#include <thread>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "ensemble_forge/ccb.hpp"
#include "ensemble_forge/metrics.hpp"
#include "ensemble_forge/mock_pool.hpp"
#include "ensemble_forge/utf8.hpp"

namespace ensemble_forge {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

template <class E, std::size_t N>
E parse_enum(std::string_view name, const std::array<std::string_view, N>& names, const char* what) {
  for (std::size_t i = 0; i < N; ++i)
    if (names[i] == name) return static_cast<E>(i);
  throw InvalidArgument(std::string("unknown ") + what + " '" + std::string(name) + "'");
}

constexpr std::array<std::string_view, 5> kRoleNames{"translator", "fuser", "enhancer", "embedder",
                                                     "reward"};
constexpr std::array<std::string_view, 3> kTransportNames{"mock", "subprocess", "http"};

void require_string(const Json& j, const char* field) {
  if (!j.is_object()) throw InvalidArgument("expected a JSON object");
  auto it = j.find(field);
  if (it == j.end()) throw InvalidArgument(std::string("missing field '") + field + "'");
  if (!it->is_string()) throw InvalidArgument(std::string("field '") + field + "' must be a string");
}

}  // namespace

std::string_view to_string(Role role) { return kRoleNames.at(static_cast<std::size_t>(role)); }
std::string_view to_string(Transport t) { return kTransportNames.at(static_cast<std::size_t>(t)); }
Role parse_role(std::string_view name) { return parse_enum<Role>(name, kRoleNames, "role"); }
Transport parse_transport(std::string_view name) {
  return parse_enum<Transport>(name, kTransportNames, "transport");
}

std::string_view endpoint_path(Role role) {
  switch (role) {
    case Role::translator: return "/translate";
    case Role::fuser: return "/fuse";
    case Role::enhancer: return "/enhance";
    case Role::embedder: return "/embed";
    case Role::reward: return "/score";
  }
  throw InvalidArgument("bad role");
}

void validate_request(Role role, const Json& r) {
  switch (role) {
    case Role::translator:
      require_string(r, "source");
      require_string(r, "src_lang");
      require_string(r, "tgt_lang");
      return;
    case Role::fuser: {
      require_string(r, "source");
      auto it = r.find("candidates");
      if (it == r.end() || !it->is_array() || it->empty())
        throw InvalidArgument("field 'candidates' must be a non-empty array");
      for (const auto& c : *it)
        if (!c.is_string()) throw InvalidArgument("field 'candidates' must hold strings");
      return;
    }
    case Role::enhancer:
      require_string(r, "prompt");
      return;
    case Role::embedder:
      require_string(r, "text");
      return;
    case Role::reward:
      require_string(r, "source");
      require_string(r, "candidate");
      return;
  }
}

void validate_response(Role role, const Json& r) {
  switch (role) {
    case Role::translator:
    case Role::fuser:
    case Role::enhancer:
      require_string(r, "translation");
      return;
    case Role::embedder: {
      if (!r.is_object()) throw InvalidArgument("expected a JSON object");
      auto it = r.find("vector");
      if (it == r.end() || !it->is_array())
        throw InvalidArgument("field 'vector' must be an array");
      if (it->size() != kStateDim)
        throw InvalidArgument("field 'vector' has " + std::to_string(it->size()) +
                              " entries, expected " + std::to_string(kStateDim));
      for (const auto& v : *it)
        if (!v.is_number() || !std::isfinite(v.get<double>()))
          throw InvalidArgument("field 'vector' must hold finite numbers");
      return;
    }
    case Role::reward: {
      if (!r.is_object()) throw InvalidArgument("expected a JSON object");
      auto it = r.find("score");
      if (it == r.end() || !it->is_number() || !std::isfinite(it->get<double>()))
        throw InvalidArgument("field 'score' must be a finite number");
      return;
    }
  }
}

// ---------------------------------------------------------------- ledger

CostLedger::CostLedger(const CostLedger& other) {
  std::lock_guard lock(other.mutex_);
  backends_ = other.backends_;
  sentences_ = other.sentences_;
}

CostLedger& CostLedger::operator=(const CostLedger& other) {
  if (this == &other) return *this;
  std::scoped_lock lock(mutex_, other.mutex_);
  backends_ = other.backends_;
  sentences_ = other.sentences_;
  return *this;
}

void CostLedger::record(const std::string& backend, Role role,
                        std::optional<std::size_t> sentence_id, double seconds, bool ok) {
  std::lock_guard lock(mutex_);
  auto& t = backends_[backend];
  t.role = role;
  ++t.calls;
  if (!ok) ++t.failures;
  t.seconds += seconds;
  if (sentence_id) ++sentences_[*sentence_id][backend];
}

void CostLedger::merge(const CostLedger& other) {
  if (this == &other) return;
  std::scoped_lock lock(mutex_, other.mutex_);
  for (const auto& [name, t] : other.backends_) {
    auto& mine = backends_[name];
    mine.role = t.role;
    mine.calls += t.calls;
    mine.failures += t.failures;
    mine.seconds += t.seconds;
  }
  for (const auto& [id, calls] : other.sentences_)
    for (const auto& [name, n] : calls) sentences_[id][name] += n;
}

std::map<std::string, CostLedger::Totals> CostLedger::backends() const {
  std::lock_guard lock(mutex_);
  return backends_;
}

std::map<std::size_t, std::map<std::string, std::uint64_t>> CostLedger::per_sentence() const {
  std::lock_guard lock(mutex_);
  return sentences_;
}

std::uint64_t CostLedger::role_calls(Role role) const {
  std::lock_guard lock(mutex_);
  std::uint64_t n = 0;
  for (const auto& [name, t] : backends_)
    if (t.role == role) n += t.calls;
  return n;
}

std::uint64_t CostLedger::sentence_role_calls(std::size_t sentence_id, Role role) const {
  std::lock_guard lock(mutex_);
  auto it = sentences_.find(sentence_id);
  if (it == sentences_.end()) return 0;
  std::uint64_t n = 0;
  for (const auto& [name, calls] : it->second) {
    auto b = backends_.find(name);
    if (b != backends_.end() && b->second.role == role) n += calls;
  }
  return n;
}

std::uint64_t CostLedger::total_calls() const {
  std::lock_guard lock(mutex_);
  std::uint64_t n = 0;
  for (const auto& [name, t] : backends_) n += t.calls;
  return n;
}

CostSummary ledger_report(const CostLedger& ledger, std::size_t sentences, std::size_t pool_size) {
  CostSummary s;
  s.sentences = sentences;
  s.pool_size = pool_size;
  for (const auto& [name, t] : ledger.backends()) {
    s.role_calls[t.role] += t.calls;
    if (t.role == Role::translator) s.translator_seconds += t.seconds;
  }
  const std::uint64_t translator = s.role_calls[Role::translator];
  if (sentences > 0)
    s.translator_calls_per_sentence = static_cast<double>(translator) / static_cast<double>(sentences);
  s.full_pool_translator_calls = static_cast<std::uint64_t>(pool_size) * sentences;
  if (translator > 0)
    s.full_pool_ratio =
        static_cast<double>(s.full_pool_translator_calls) / static_cast<double>(translator);
  return s;
}

Json to_json(const CostSummary& s) {
  Json roles = Json::object();
  for (std::size_t r = 0; r < kRoleNames.size(); ++r) {
    auto it = s.role_calls.find(static_cast<Role>(r));
    roles[std::string(kRoleNames[r])] = it == s.role_calls.end() ? 0 : it->second;
  }
  return Json{{"sentences", s.sentences},
              {"pool_size", s.pool_size},
              {"calls", roles},
              {"translator_calls_per_sentence", s.translator_calls_per_sentence},
              {"full_pool_translator_calls", s.full_pool_translator_calls},
              {"full_pool_ratio", s.full_pool_ratio}};
}

// -------------------------------------------------------------- channels

namespace {

class MockChannel final : public Channel {
 public:
  explicit MockChannel(MockHandler h) : handler_(std::move(h)) {}
  Json exchange(Role, const Json& request) override { return handler_(request); }

 private:
  MockHandler handler_;
};

class HttpChannel final : public Channel {
 public:
  HttpChannel(std::string base, double timeout_s) : base_(std::move(base)), timeout_s_(timeout_s) {}

  Json exchange(Role role, const Json& request) override {
    httplib::Client client(base_);
    const auto whole = static_cast<time_t>(timeout_s_);
    const auto micro = static_cast<time_t>((timeout_s_ - static_cast<double>(whole)) * 1e6);
    client.set_connection_timeout(whole, micro);
    client.set_read_timeout(whole, micro);
    client.set_write_timeout(whole, micro);
    auto res = client.Post(std::string(endpoint_path(role)), request.dump(), "application/json");
    if (!res) throw TransportError("request failed: " + httplib::to_string(res.error()), true);
    if (res->status >= 500)
      throw TransportError("HTTP " + std::to_string(res->status) + ": " + error_text(res->body), true);
    if (res->status != 200)
      throw TransportError("HTTP " + std::to_string(res->status) + ": " + error_text(res->body), false);
    try {
      return Json::parse(res->body);
    } catch (const Json::parse_error& e) {
      throw TransportError(std::string("malformed response body: ") + e.what(), false);
    }
  }

 private:
  static std::string error_text(const std::string& body) {
    auto j = Json::parse(body, nullptr, false);
    if (j.is_object() && j.contains("error") && j["error"].is_string()) return j["error"];
    return body.substr(0, 200);
  }

  std::string base_;
  double timeout_s_;
};

// A persistent child process: one JSON request per line on its stdin, one
// JSON response per line on its stdout. Restarted after it dies or hangs.
class SubprocessChannel final : public Channel {
 public:
  SubprocessChannel(std::string command, double timeout_s)
      : command_(std::move(command)), timeout_s_(timeout_s) {}
  ~SubprocessChannel() override { shutdown(); }

  Json exchange(Role, const Json& request) override {
    std::lock_guard lock(mutex_);
    if (pid_ < 0) spawn();
    std::string line = request.dump() + "\n";
    std::size_t off = 0;
    while (off < line.size()) {
      const ssize_t n = ::write(to_child_, line.data() + off, line.size() - off);
      if (n < 0) {
        if (errno == EINTR) continue;
        const std::string status = reap();
        throw TransportError("write to subprocess failed (" + status + ")", false);
      }
      off += static_cast<std::size_t>(n);
    }
    const auto deadline = Clock::now() + std::chrono::duration<double>(timeout_s_);
    for (;;) {
      auto nl = buffer_.find('\n');
      if (nl != std::string::npos) {
        std::string reply = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        try {
          return Json::parse(reply);
        } catch (const Json::parse_error&) {
          throw TransportError("malformed response line: " + reply.substr(0, 200), false);
        }
      }
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now());
      if (left.count() <= 0) {
        ::kill(pid_, SIGKILL);
        reap();
        throw TransportError("timed out after " + std::to_string(timeout_s_) + " s", true);
      }
      pollfd p{from_child_, POLLIN, 0};
      const int ready = ::poll(&p, 1, static_cast<int>(left.count()));
      if (ready < 0 && errno != EINTR) throw TransportError(std::strerror(errno), false);
      if (ready <= 0) continue;
      char chunk[4096];
      const ssize_t n = ::read(from_child_, chunk, sizeof chunk);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) {
        const std::string status = reap();
        throw TransportError("subprocess closed its output (" + status + ")", false);
      }
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

 private:
  void spawn() {
    static const bool sigpipe_ignored = [] {
      ::signal(SIGPIPE, SIG_IGN);
      return true;
    }();
    (void)sigpipe_ignored;
    int in[2], out[2];
    if (::pipe2(in, O_CLOEXEC) != 0) throw TransportError("pipe failed", false);
    if (::pipe2(out, O_CLOEXEC) != 0) {
      ::close(in[0]);
      ::close(in[1]);
      throw TransportError("pipe failed", false);
    }
    const pid_t pid = ::fork();
    if (pid < 0) throw TransportError("fork failed", false);
    if (pid == 0) {
      ::dup2(in[0], STDIN_FILENO);
      ::dup2(out[1], STDOUT_FILENO);
      ::execl("/bin/sh", "sh", "-c", command_.c_str(), static_cast<char*>(nullptr));
      ::_exit(127);
    }
    ::close(in[0]);
    ::close(out[1]);
    pid_ = pid;
    to_child_ = in[1];
    from_child_ = out[0];
    buffer_.clear();
  }

  // Closes the pipes and waits for the child; describes how it ended.
  std::string reap() {
    if (to_child_ >= 0) ::close(to_child_);
    if (from_child_ >= 0) ::close(from_child_);
    to_child_ = from_child_ = -1;
    std::string status = "not running";
    if (pid_ > 0) {
      int ws = 0;
      const auto deadline = Clock::now() + std::chrono::seconds(2);
      pid_t r;
      while ((r = ::waitpid(pid_, &ws, WNOHANG)) == 0 && Clock::now() < deadline)
        std::this_thread::sleep_for(std::chrono::milliseconds(5));
      if (r == 0) {
        ::kill(pid_, SIGKILL);
        ::waitpid(pid_, &ws, 0);
      }
      if (WIFEXITED(ws))
        status = "exit status " + std::to_string(WEXITSTATUS(ws));
      else if (WIFSIGNALED(ws))
        status = "killed by signal " + std::to_string(WTERMSIG(ws));
    }
    pid_ = -1;
    return status;
  }

  void shutdown() {
    std::lock_guard lock(mutex_);
    if (pid_ > 0) reap();
  }

  std::string command_;
  double timeout_s_;
  std::mutex mutex_;
  pid_t pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  std::string buffer_;
};

}  // namespace

// --------------------------------------------------------------- backend

Backend::Backend(BackendSpec spec, std::unique_ptr<Channel> channel)
    : spec_(std::move(spec)), channel_(std::move(channel)) {
  if (spec_.name.empty()) throw InvalidArgument("backend name must not be empty");
  if (!channel_) throw InvalidArgument("backend '" + spec_.name + "' has no channel");
  if (!(spec_.timeout_s > 0)) throw InvalidArgument("backend '" + spec_.name + "': timeout must be positive");
}

Json Backend::call(const Json& request, const CallContext& ctx) const {
  validate_request(spec_.role, request);
  const int attempts = spec_.transport == Transport::http ? std::max(1, spec_.max_attempts) : 1;
  auto note = [&](Clock::time_point t0, bool ok) {
    if (ctx.ledger) ctx.ledger->record(spec_.name, spec_.role, ctx.sentence_id, seconds_since(t0), ok);
  };
  for (int attempt = 1;; ++attempt) {
    const auto t0 = Clock::now();
    Json response;
    try {
      response = channel_->exchange(spec_.role, request);
    } catch (const TransportError& e) {
      note(t0, false);
      if (!e.retryable() || attempt >= attempts)
        throw BackendError(spec_.name, std::string(e.what()) + " (attempt " + std::to_string(attempt) +
                                           " of " + std::to_string(attempts) + ")");
      const double wait = std::min(spec_.backoff_max_s,
                                   spec_.backoff_initial_s * std::pow(2.0, attempt - 1));
      spdlog::warn("backend '{}': {}; retrying in {:.3f} s", spec_.name, e.what(), wait);
      std::this_thread::sleep_for(std::chrono::duration<double>(wait));
      continue;
    } catch (const BackendError&) {
      note(t0, false);
      throw;
    } catch (const std::exception& e) {
      note(t0, false);
      throw BackendError(spec_.name, e.what());
    }
    try {
      validate_response(spec_.role, response);
    } catch (const InvalidArgument& e) {
      note(t0, false);
      throw BackendError(spec_.name, std::string("malformed response: ") + e.what());
    }
    note(t0, true);
    return response;
  }
}

BackendPtr make_backend(BackendSpec spec, MockHandler handler) {
  std::unique_ptr<Channel> channel;
  switch (spec.transport) {
    case Transport::mock:
      if (!handler) throw InvalidArgument("mock backend '" + spec.name + "' needs a handler");
      channel = std::make_unique<MockChannel>(std::move(handler));
      break;
    case Transport::http:
      if (spec.endpoint.empty()) throw InvalidArgument("http backend '" + spec.name + "' needs an endpoint");
      channel = std::make_unique<HttpChannel>(spec.endpoint, spec.timeout_s);
      break;
    case Transport::subprocess:
      if (spec.endpoint.empty())
        throw InvalidArgument("subprocess backend '" + spec.name + "' needs a command");
      channel = std::make_unique<SubprocessChannel>(spec.endpoint, spec.timeout_s);
      break;
  }
  return std::make_shared<const Backend>(std::move(spec), std::move(channel));
}

std::string translate(const Backend& b, std::string_view source, std::string_view src_lang,
                      std::string_view tgt_lang, const CallContext& ctx) {
  return b.call({{"source", source}, {"src_lang", src_lang}, {"tgt_lang", tgt_lang}}, ctx)
      .at("translation")
      .get<std::string>();
}

std::string fuse(const Backend& b, std::string_view source,
                 const std::vector<std::string>& candidates, const CallContext& ctx) {
  return b.call({{"source", source}, {"candidates", candidates}}, ctx).at("translation").get<std::string>();
}

std::string enhance(const Backend& b, std::string_view prompt, const CallContext& ctx) {
  return b.call({{"prompt", prompt}}, ctx).at("translation").get<std::string>();
}

StateVector embed(const Backend& b, std::string_view text, const CallContext& ctx) {
  const Json r = b.call({{"text", text}}, ctx);
  Eigen::VectorXd v(static_cast<Eigen::Index>(kStateDim));
  for (std::size_t i = 0; i < kStateDim; ++i) v[static_cast<Eigen::Index>(i)] = r["vector"][i].get<double>();
  try {
    return StateVector::normalized(std::move(v));
  } catch (const Error& e) {
    throw BackendError(b.name(), std::string("unusable embedding: ") + e.what());
  }
}

double score(const Backend& b, std::string_view source, std::string_view candidate,
             const CallContext& ctx) {
  return b.call({{"source", source}, {"candidate", candidate}}, ctx).at("score").get<double>();
}

void BackendPool::validate() const {
  for (std::size_t i = 0; i < translators.size(); ++i) {
    const auto& t = translators[i];
    if (!t) throw InvalidArgument("translator slot " + std::to_string(i) + " is empty");
    if (t->spec().role != Role::translator)
      throw InvalidArgument("backend '" + t->name() + "' in translator slot is a " +
                            std::string(to_string(t->spec().role)));
    if (t->spec().system_id != i)
      throw InvalidArgument("translator '" + t->name() + "' must have system_id " + std::to_string(i));
  }
  auto check = [](const BackendPtr& b, Role role) {
    if (b && b->spec().role != role)
      throw InvalidArgument("backend '" + b->name() + "' is a " + std::string(to_string(b->spec().role)) +
                            ", expected " + std::string(to_string(role)));
  };
  check(fuser, Role::fuser);
  check(enhancer, Role::enhancer);
  check(embedder, Role::embedder);
  check(reward, Role::reward);
}

// ----------------------------------------------------------- stub server

struct StubServer::Impl {
  Options options;
  httplib::Server server;
  std::thread thread;
  std::atomic<std::uint64_t> requests{0};
  std::atomic<int> failures_left{0};

  static Json respond(Role role, const Json& req) {
    switch (role) {
      case Role::translator: return {{"translation", req["source"]}};
      case Role::fuser:
        return {{"translation", mock::overlap_fuse(req["candidates"].get<std::vector<std::string>>())}};
      case Role::enhancer: {
        const std::string prompt = req["prompt"];
        try {
          return {{"translation", ccb::parse_enhancer_prompt(prompt).current}};
        } catch (const FormatError&) {
          return {{"translation", prompt}};
        }
      }
      case Role::embedder: {
        const auto v = hash_embed(req["text"].get<std::string>());
        return {{"vector", std::vector<double>(v.values().data(), v.values().data() + v.size())}};
      }
      case Role::reward: {
        const auto src = utf8::split_whitespace(req["source"].get<std::string>());
        const auto cand = utf8::split_whitespace(req["candidate"].get<std::string>());
        std::size_t hit = 0;
        for (const auto& t : cand)
          if (std::find(src.begin(), src.end(), t) != src.end()) ++hit;
        return {{"score", cand.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(cand.size())}};
      }
    }
    return {};
  }

  void install() {
    failures_left = options.fail_first;
    server.Get("/ping", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(R"({"ok":true})", "application/json");
    });
    for (std::size_t r = 0; r < kRoleNames.size(); ++r) {
      const Role role = static_cast<Role>(r);
      server.Post(std::string(endpoint_path(role)),
                  [this, role](const httplib::Request& req, httplib::Response& res) {
                    ++requests;
                    auto fail = [&](int status, const std::string& msg) {
                      res.status = status;
                      res.set_content(Json{{"error", msg}}.dump(), "application/json");
                    };
                    if (failures_left.fetch_sub(1) > 0) return fail(503, "stub failure");
                    if (options.delay_s > 0)
                      std::this_thread::sleep_for(std::chrono::duration<double>(options.delay_s));
                    const Json body = Json::parse(req.body, nullptr, false);
                    if (body.is_discarded()) return fail(400, "body is not JSON");
                    try {
                      validate_request(role, body);
                    } catch (const InvalidArgument& e) {
                      return fail(400, e.what());
                    }
                    if (options.malformed) {
                      res.set_content(R"({"unexpected":true})", "application/json");
                      return;
                    }
                    try {
                      res.set_content(respond(role, body).dump(), "application/json");
                    } catch (const std::exception& e) {
                      fail(500, e.what());
                    }
                  });
    }
  }
};

StubServer::StubServer() : StubServer(Options{}) {}

StubServer::StubServer(Options options) : impl_(std::make_unique<Impl>()) {
  impl_->options = options;
  impl_->install();
}

StubServer::~StubServer() { stop(); }

int StubServer::start(const std::string& host, int port) {
  if (port == 0) {
    port_ = impl_->server.bind_to_any_port(host);
  } else {
    port_ = impl_->server.bind_to_port(host, port) ? port : -1;
  }
  if (port_ <= 0) throw IoError("cannot bind stub server to " + host + ":" + std::to_string(port));
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return port_;
}

void StubServer::listen(const std::string& host, int port) {
  port_ = port;
  if (!impl_->server.listen(host, port))
    throw IoError("cannot serve on " + host + ":" + std::to_string(port));
}

void StubServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

std::string StubServer::url() const { return "http://127.0.0.1:" + std::to_string(port_); }

std::uint64_t StubServer::requests() const { return impl_->requests.load(); }

}  // namespace ensemble_forge
