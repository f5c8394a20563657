#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string_view>

#include <Eigen/Core>

namespace ensemble_forge {

inline constexpr std::size_t kStateDim = 768;

/// Unit-norm sentence embedding used as the selection state.
class StateVector {
 public:
  /// Normalizes to unit L2 norm. Throws InvalidArgument for a wrong
  /// dimension and NumericError for non-finite or all-zero input.
  static StateVector normalized(Eigen::VectorXd values);

  const Eigen::VectorXd& values() const noexcept { return values_; }
  std::size_t size() const noexcept { return static_cast<std::size_t>(values_.size()); }
  double operator[](std::size_t i) const { return values_[static_cast<Eigen::Index>(i)]; }

  bool operator==(const StateVector& o) const { return values_ == o.values_; }

 private:
  explicit StateVector(Eigen::VectorXd v) : values_(std::move(v)) {}
  Eigen::VectorXd values_;
};

/// Signed character n-gram counts (n = 1..3 over code points) hashed into
/// `dim` buckets, before normalization. N-grams made only of whitespace are
/// skipped; whitespace inside mixed n-grams marks word boundaries.
Eigen::VectorXd hashed_char_ngrams(std::string_view text, std::size_t dim = kStateDim);

/// Normalized hashed_char_ngrams. Empty text (or a fully cancelled count
/// vector) maps to the first unit basis vector.
StateVector hash_embed(std::string_view text);

using EmbeddingTable = std::map<std::size_t, StateVector>;

/// Text format, version 1:
///   # ensemble-forge embeddings v1 dim=768
///   <id> <f0> ... <f767>
/// Vectors are re-normalized on load. Throws FormatError on wrong
/// dimensionality, a duplicate id or a zero vector.
EmbeddingTable load_embedding_table(const std::filesystem::path& path);
void save_embedding_table(const EmbeddingTable& table, const std::filesystem::path& path);

}  // namespace ensemble_forge
