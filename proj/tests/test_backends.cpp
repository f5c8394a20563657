#include <atomic>
#include <thread>

#include "doctest.h"
#include "ensemble_forge/backends.hpp"
#include "ensemble_forge/error.hpp"
#include "ensemble_forge/mock_pool.hpp"
#include "test_support.hpp"

// After Eigen: resolv.h defines a _res macro that collides with Eigen internals.
#include <httplib.h>

using namespace ensemble_forge;

namespace {

BackendSpec spec(std::string name, Role role, Transport t = Transport::mock, std::string endpoint = {}) {
  BackendSpec s;
  s.name = std::move(name);
  s.role = role;
  s.transport = t;
  s.endpoint = std::move(endpoint);
  return s;
}

BackendPtr stub_process(const std::string& name, const std::string& flags, Role role = Role::translator,
                        double timeout = 5.0) {
  auto s = spec(name, role, Transport::subprocess, std::string(EF_STUB_BACKEND) + " " + flags);
  s.timeout_s = timeout;
  return make_backend(s);
}

}  // namespace

TEST_SUITE("backends") {

TEST_CASE("role and transport names") {
  for (auto r : {Role::translator, Role::fuser, Role::enhancer, Role::embedder, Role::reward})
    CHECK(parse_role(to_string(r)) == r);
  for (auto t : {Transport::mock, Transport::subprocess, Transport::http})
    CHECK(parse_transport(to_string(t)) == t);
  CHECK_THROWS_AS(parse_role("ranker"), InvalidArgument);
  CHECK(endpoint_path(Role::reward) == "/score");
  CHECK(endpoint_path(Role::embedder) == "/embed");
}

TEST_CASE("wire schema validation") {
  CHECK_NOTHROW(validate_request(Role::translator, {{"source", "a"}, {"src_lang", "en"}, {"tgt_lang", "hi"}}));
  CHECK_THROWS_WITH_AS(validate_request(Role::translator, {{"source", "a"}, {"src_lang", "en"}}),
                       doctest::Contains("tgt_lang"), InvalidArgument);
  CHECK_THROWS_AS(validate_request(Role::fuser, {{"source", "a"}, {"candidates", Json::array()}}), InvalidArgument);
  CHECK_THROWS_AS(validate_request(Role::fuser, {{"source", "a"}, {"candidates", {1, 2}}}), InvalidArgument);
  CHECK_NOTHROW(validate_request(Role::reward, {{"source", "a"}, {"candidate", "b"}, {"extra", 1}}));
  CHECK_THROWS_AS(validate_request(Role::enhancer, Json::array()), InvalidArgument);

  CHECK_NOTHROW(validate_response(Role::fuser, {{"translation", "x"}}));
  CHECK_THROWS_AS(validate_response(Role::fuser, {{"translation", 3}}), InvalidArgument);
  CHECK_NOTHROW(validate_response(Role::embedder, {{"vector", std::vector<double>(768, 0.5)}}));
  CHECK_THROWS_WITH_AS(validate_response(Role::embedder, {{"vector", std::vector<double>(767, 0.5)}}),
                       doctest::Contains("767"), InvalidArgument);
  CHECK_THROWS_AS(validate_response(Role::reward, {{"score", "high"}}), InvalidArgument);
}

TEST_CASE("mock translator table lookup") {
  auto b = make_backend(spec("table", Role::translator), [](const Json& req) -> Json {
    static const std::map<std::string, std::string> table{{"hi", "नमस्ते"}};
    auto it = table.find(req["source"]);
    return {{"translation", it == table.end() ? req["source"].get<std::string>() : it->second}};
  });
  CostLedger ledger;
  CHECK(translate(*b, "hi", "en", "hi", {0, &ledger}) == "नमस्ते");
  CHECK(ledger.role_calls(Role::translator) == 1);
  CHECK_THROWS_AS(make_backend(spec("x", Role::translator)), InvalidArgument);
}

TEST_CASE("ledger counts every invocation") {
  std::atomic<int> invoked{0};
  auto b = make_backend(spec("counted", Role::reward), [&](const Json&) -> Json {
    ++invoked;
    return {{"score", 0.5}};
  });
  CostLedger ledger;
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t)
    threads.emplace_back([&, t] {
      for (int i = 0; i < 250; ++i) score(*b, "s", "c", {static_cast<std::size_t>(t), &ledger});
    });
  for (auto& th : threads) th.join();
  CHECK(invoked == 1000);
  CHECK(ledger.role_calls(Role::reward) == 1000);
  CHECK(ledger.total_calls() == 1000);
  for (std::size_t t = 0; t < 4; ++t) CHECK(ledger.sentence_role_calls(t, Role::reward) == 250);

  auto failing = make_backend(spec("broken", Role::reward), [](const Json&) -> Json {
    throw std::runtime_error("boom");
  });
  CHECK_THROWS_WITH_AS(score(*failing, "s", "c", {7, &ledger}), doctest::Contains("broken"), BackendError);
  CHECK(ledger.backends().at("broken").failures == 1);

  CostLedger other;
  other.record("counted", Role::reward, 0, 0.0, true);
  ledger.merge(other);
  CHECK(ledger.sentence_role_calls(0, Role::reward) == 251);
  CHECK(ledger.sentence_role_calls(99, Role::reward) == 0);
}

TEST_CASE("malformed mock responses are backend errors") {
  auto b = make_backend(spec("liar", Role::embedder), [](const Json&) -> Json {
    return {{"vector", std::vector<double>(10, 1.0)}};
  });
  CHECK_THROWS_WITH_AS(embed(*b, "x"), doctest::Contains("liar"), BackendError);
  auto zero = make_backend(spec("zero", Role::embedder), [](const Json&) -> Json {
    return {{"vector", std::vector<double>(768, 0.0)}};
  });
  CHECK_THROWS_AS(embed(*zero, "x"), BackendError);
}

TEST_CASE("pool validation") {
  auto pool = mock::make_mock_pool({});
  CHECK_NOTHROW(pool.validate());
  std::swap(pool.translators[0], pool.translators[1]);
  CHECK_THROWS_AS(pool.validate(), InvalidArgument);
  std::swap(pool.translators[0], pool.translators[1]);
  pool.fuser = pool.enhancer;
  CHECK_THROWS_WITH_AS(pool.validate(), doctest::Contains("expected fuser"), InvalidArgument);
}

TEST_CASE("ledger report") {
  CostLedger ledger;
  for (std::size_t s = 0; s < 100; ++s) {
    for (int k = 0; k < 3; ++k) ledger.record("t" + std::to_string(k), Role::translator, s, 0.01, true);
    ledger.record("fuser", Role::fuser, s, 0.01, true);
  }
  const auto summary = ledger_report(ledger, 100, 8);
  CHECK(summary.role_calls.at(Role::translator) == 300);
  CHECK(summary.translator_calls_per_sentence == 3.0);
  CHECK(summary.full_pool_translator_calls == 800);
  CHECK(summary.full_pool_ratio == doctest::Approx(8.0 / 3.0));
  const auto j = to_json(summary);
  CHECK(j["calls"]["fuser"] == 100);
  CHECK(j["calls"]["enhancer"] == 0);
  CHECK(j.dump().find("seconds") == std::string::npos);
  CHECK(ledger_report(CostLedger{}, 0, 8).full_pool_ratio == 0.0);
}

TEST_CASE("http transport against the stub server") {
  StubServer server;
  server.start();
  httplib::Client ping(server.url());
  auto res = ping.Get("/ping");
  REQUIRE(res);
  CHECK(Json::parse(res->body) == Json{{"ok", true}});

  CostLedger ledger;
  auto tr = make_backend(spec("http-echo", Role::translator, Transport::http, server.url()));
  CHECK(translate(*tr, "hello there", "en", "hi", {0, &ledger}) == "hello there");
  CHECK(ledger.role_calls(Role::translator) == 1);

  auto fu = make_backend(spec("http-fuse", Role::fuser, Transport::http, server.url()));
  CHECK(fuse(*fu, "s", {"a b c", "a b d", "a b c"}) == "a b c");
  auto em = make_backend(spec("http-embed", Role::embedder, Transport::http, server.url()));
  CHECK(embed(*em, "some text") == hash_embed("some text"));
  auto sc = make_backend(spec("http-score", Role::reward, Transport::http, server.url()));
  CHECK(score(*sc, "a b c d", "a b x y") == doctest::Approx(0.5));
  auto en = make_backend(spec("http-enhance", Role::enhancer, Transport::http, server.url()));
  CHECK(enhance(*en, "free text") == "free text");

  // Schema violations come back as 400 and are not retried.
  auto raw = ping.Post("/translate", R"({"source":"x"})", "application/json");
  REQUIRE(raw);
  CHECK(raw->status == 400);
  CHECK(Json::parse(raw->body).contains("error"));
}

TEST_CASE("http timeouts are retried three times") {
  StubServer server(StubServer::Options{.delay_s = 0.6});
  server.start();
  auto s = spec("slow-http", Role::translator, Transport::http, server.url());
  s.timeout_s = 0.1;
  s.backoff_initial_s = 0.01;
  auto b = make_backend(s);
  CostLedger ledger;
  CHECK_THROWS_WITH_AS(translate(*b, "x", "en", "hi", {0, &ledger}), doctest::Contains("slow-http"), BackendError);
  CHECK(ledger.backends().at("slow-http").calls == 3);
  CHECK(ledger.backends().at("slow-http").failures == 3);
}

TEST_CASE("http 5xx is retried and can recover") {
  StubServer server(StubServer::Options{.fail_first = 2});
  server.start();
  auto s = spec("flaky", Role::translator, Transport::http, server.url());
  s.backoff_initial_s = 0.001;
  auto b = make_backend(s);
  CostLedger ledger;
  CHECK(translate(*b, "ok", "en", "hi", {0, &ledger}) == "ok");
  CHECK(ledger.backends().at("flaky").calls == 3);
  CHECK(ledger.backends().at("flaky").failures == 2);
  CHECK(server.requests() == 3);
}

TEST_CASE("http malformed responses fail without retry") {
  StubServer server(StubServer::Options{.malformed = true});
  server.start();
  auto b = make_backend(spec("odd", Role::translator, Transport::http, server.url()));
  CostLedger ledger;
  CHECK_THROWS_WITH_AS(translate(*b, "x", "en", "hi", {0, &ledger}), doctest::Contains("malformed"), BackendError);
  CHECK(ledger.backends().at("odd").calls == 1);
}

TEST_CASE("http connection refused names the backend") {
  auto s = spec("nowhere", Role::translator, Transport::http, "http://127.0.0.1:1");
  s.backoff_initial_s = 0.001;
  s.timeout_s = 0.5;
  CostLedger ledger;
  CHECK_THROWS_WITH_AS(translate(*make_backend(s), "x", "en", "hi", {0, &ledger}), doctest::Contains("nowhere"),
                       BackendError);
  CHECK(ledger.total_calls() == 3);
}

TEST_CASE("subprocess line protocol") {
  auto b = stub_process("proc", "--upper");
  for (int i = 1; i <= 3; ++i) {
    const Json r = b->call({{"source", "abc"}, {"src_lang", "en"}, {"tgt_lang", "hi"}});
    CHECK(r["translation"] == "ABC");
    CHECK(r["served"] == i);  // one persistent process
  }
  auto e = stub_process("proc-embed", "--role embedder", Role::embedder);
  const auto v = embed(*e, "abcd");
  CHECK(v[4] == 1.0);
}

TEST_CASE("subprocess failures carry the backend name") {
  CHECK_THROWS_WITH_AS(translate(*stub_process("garbled", "--garbage"), "x", "en", "hi"),
                       doctest::Contains("garbled"), BackendError);
  CHECK_THROWS_WITH_AS(translate(*stub_process("schema", "--bad-schema"), "x", "en", "hi"),
                       doctest::Contains("malformed response"), BackendError);

  auto dying = stub_process("dying", "--exit-after 1");
  CHECK(translate(*dying, "x", "en", "hi") == "x");
  CHECK_THROWS_WITH_AS(translate(*dying, "x", "en", "hi"), doctest::Contains("exit status 3"), BackendError);
  CHECK(translate(*dying, "y", "en", "hi") == "y");  // restarted

  CostLedger ledger;
  CHECK_THROWS_WITH_AS(translate(*stub_process("sleepy", "--sleep 5", Role::translator, 0.2), "x", "en", "hi",
                                 {0, &ledger}),
                       doctest::Contains("timed out"), BackendError);
  CHECK(ledger.total_calls() == 1);

  auto missing = make_backend(spec("missing", Role::translator, Transport::subprocess,
                                   "/nonexistent/ensemble-forge-backend"));
  CHECK_THROWS_WITH_AS(translate(*missing, "x", "en", "hi"), doctest::Contains("exit status 127"), BackendError);
}

}  // TEST_SUITE
