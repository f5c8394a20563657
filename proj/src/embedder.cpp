#include "ensemble_forge/embedder.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "ensemble_forge/error.hpp"
#include "ensemble_forge/rng.hpp"
#include "ensemble_forge/utf8.hpp"

namespace ensemble_forge {

namespace {
constexpr const char* kTableHeader = "# ensemble-forge embeddings v1 dim=768";
}

StateVector StateVector::normalized(Eigen::VectorXd values) {
  if (static_cast<std::size_t>(values.size()) != kStateDim)
    throw InvalidArgument("state vector must have " + std::to_string(kStateDim) +
                          " entries, got " + std::to_string(values.size()));
  if (!values.allFinite()) throw NumericError("state vector has non-finite entries");
  const double norm = values.norm();
  if (norm == 0.0) throw NumericError("cannot normalize a zero state vector");
  values /= norm;
  return StateVector(std::move(values));
}

Eigen::VectorXd hashed_char_ngrams(std::string_view text, std::size_t dim) {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim));
  const std::u32string cps = utf8::decode(text);
  for (std::size_t n = 1; n <= 3; ++n) {
    if (cps.size() < n) break;
    for (std::size_t i = 0; i + n <= cps.size(); ++i) {
      bool all_space = true;
      for (std::size_t k = i; k < i + n; ++k) all_space = all_space && utf8::is_space(cps[k]);
      if (all_space) continue;
      const std::string gram = utf8::encode(std::u32string_view(cps).substr(i, n));
      const std::uint64_t h = mix64(fnv1a64(gram) ^ (n * 0x9E3779B97F4A7C15ULL));
      const auto bucket = static_cast<Eigen::Index>(h % dim);
      v[bucket] += (h >> 63) ? -1.0 : 1.0;
    }
  }
  return v;
}

StateVector hash_embed(std::string_view text) {
  Eigen::VectorXd v = hashed_char_ngrams(text);
  if (v.isZero(0.0)) {
    v.setZero();
    v[0] = 1.0;
  }
  return StateVector::normalized(std::move(v));
}

EmbeddingTable load_embedding_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open embedding table '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || line != kTableHeader)
    throw FormatError(path.string() + ": missing or unsupported header (want '" +
                      kTableHeader + "')");
  EmbeddingTable table;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
    std::istringstream ss(line);
    std::size_t id = 0;
    if (!(ss >> id)) throw FormatError(where + "missing id");
    std::vector<double> vals;
    double x;
    while (ss >> x) vals.push_back(x);
    if (!ss.eof()) throw FormatError(where + "non-numeric value");
    if (vals.size() != kStateDim)
      throw FormatError(where + "expected " + std::to_string(kStateDim) + " values, got " +
                        std::to_string(vals.size()));
    if (table.count(id)) throw FormatError(where + "duplicate id " + std::to_string(id));
    try {
      table.emplace(id, StateVector::normalized(
                            Eigen::Map<const Eigen::VectorXd>(vals.data(), kStateDim)));
    } catch (const Error& e) {
      throw FormatError(where + e.what());
    }
  }
  return table;
}

void save_embedding_table(const EmbeddingTable& table, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << kTableHeader << '\n' << std::setprecision(17);
  for (const auto& [id, v] : table) {
    out << id;
    for (std::size_t i = 0; i < v.size(); ++i) out << ' ' << v[i];
    out << '\n';
  }
}

}  // namespace ensemble_forge
