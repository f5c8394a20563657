// Line-protocol backend used by the subprocess transport tests.
//
//   stub_line_backend [--role R] [--upper] [--garbage] [--bad-schema]
//                     [--exit-after N] [--sleep SECONDS]
//
// Reads one JSON request per line and answers with one JSON line. Every
// response carries "served": the number of requests seen so far.

#include <chrono>
#include <cstdlib>
#include <iostream>
#include <string>
#include <thread>

#include <nlohmann/json.hpp>

int main(int argc, char** argv) {
  std::string role = "translator";
  bool upper = false, garbage = false, bad_schema = false;
  long exit_after = -1;
  double sleep_s = 0.0;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    auto value = [&]() -> std::string {
      if (i + 1 >= argc) {
        std::cerr << "missing value for " << a << "\n";
        std::exit(64);
      }
      return argv[++i];
    };
    if (a == "--role") role = value();
    else if (a == "--upper") upper = true;
    else if (a == "--garbage") garbage = true;
    else if (a == "--bad-schema") bad_schema = true;
    else if (a == "--exit-after") exit_after = std::stol(value());
    else if (a == "--sleep") sleep_s = std::stod(value());
    else {
      std::cerr << "unknown flag " << a << "\n";
      return 64;
    }
  }

  long served = 0;
  std::string line;
  while (std::getline(std::cin, line)) {
    if (exit_after >= 0 && served >= exit_after) return 3;
    ++served;
    if (sleep_s > 0) std::this_thread::sleep_for(std::chrono::duration<double>(sleep_s));
    if (garbage) {
      std::cout << "this is not json" << std::endl;
      continue;
    }
    nlohmann::json out{{"served", served}};
    if (bad_schema) {
      std::cout << out.dump() << std::endl;
      continue;
    }
    const auto req = nlohmann::json::parse(line);
    if (role == "translator") {
      std::string text = req.at("source");
      if (upper)
        for (auto& c : text) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
      out["translation"] = text;
    } else if (role == "fuser") {
      out["translation"] = req.at("candidates").at(0);
    } else if (role == "enhancer") {
      out["translation"] = "enhanced";
    } else if (role == "embedder") {
      std::vector<double> v(768, 0.0);
      v[req.at("text").get<std::string>().size() % 768] = 1.0;
      out["vector"] = v;
    } else if (role == "reward") {
      out["score"] = static_cast<double>(req.at("candidate").get<std::string>().size());
    }
    std::cout << out.dump() << std::endl;
  }
  return 0;
}
