#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>

#include <Eigen/Core>

#include "ensemble_forge/embedder.hpp"

/// Residual Q-network: input affine 768 -> 256 with ReLU, three residual
/// blocks, and a linear head producing one Q-value per candidate system.
namespace ensemble_forge::qnet {

inline constexpr std::size_t kHiddenDim = 256;
inline constexpr std::size_t kResidualBlocks = 3;

struct QNetShape {
  std::size_t input_dim = kStateDim;
  std::size_t hidden_dim = kHiddenDim;
  std::size_t actions = 8;

  bool operator==(const QNetShape&) const = default;
};

/// out = ReLU(x + W2 ReLU(W1 x + b1) + b2)
struct ResidualBlock {
  Eigen::MatrixXd w1;
  Eigen::VectorXd b1;
  Eigen::MatrixXd w2;
  Eigen::VectorXd b2;
};

struct QNetParams {
  Eigen::MatrixXd input_w;  // hidden x input
  Eigen::VectorXd input_b;
  std::array<ResidualBlock, kResidualBlocks> blocks;
  Eigen::MatrixXd head_w;  // actions x hidden
  Eigen::VectorXd head_b;

  static QNetParams zeros(const QNetShape& shape);

  QNetShape shape() const;
  std::size_t parameter_count() const;
  bool all_finite() const;
  bool operator==(const QNetParams& o) const;
};

/// Gradients share the parameter layout.
using QNetGrads = QNetParams;

/// Calls f on corresponding tensors of every argument, in checkpoint order.
template <typename F, typename... Ps>
void for_each_tensor(F&& f, Ps&&... ps) {
  f(ps.input_w...);
  f(ps.input_b...);
  for (std::size_t i = 0; i < kResidualBlocks; ++i) {
    f(ps.blocks[i].w1...);
    f(ps.blocks[i].b1...);
    f(ps.blocks[i].w2...);
    f(ps.blocks[i].b2...);
  }
  f(ps.head_w...);
  f(ps.head_b...);
}

/// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero. Deterministic
/// per seed. Throws InvalidArgument when shape.actions < 2.
QNetParams init_network(const QNetShape& shape, std::uint64_t seed);
QNetParams init_network(std::size_t actions, std::uint64_t seed);

/// Activations kept by forward_batch for the backward pass.
struct ForwardCache {
  Eigen::MatrixXd input;
  Eigen::MatrixXd hidden0;  // after the input ReLU
  struct Block {
    Eigen::MatrixXd in;
    Eigen::MatrixXd z1;
    Eigen::MatrixXd a1;
    Eigen::MatrixXd out;  // ReLU(sum); sum > 0 exactly where out > 0
  };
  std::array<Block, kResidualBlocks> blocks;
};

/// states: input_dim x B, one column per state. Returns actions x B.
/// Throws NumericError if any activation becomes non-finite and
/// InvalidArgument on a shape mismatch.
Eigen::MatrixXd forward_batch(const QNetParams& p, const Eigen::MatrixXd& states,
                              ForwardCache* cache = nullptr);
Eigen::VectorXd forward(const QNetParams& p, const Eigen::VectorXd& state);
Eigen::VectorXd forward(const QNetParams& p, const StateVector& state);

/// Exact gradient of sum(grad_q .* Q) with respect to every parameter.
QNetGrads backward_batch(const QNetParams& p, const ForwardCache& cache,
                         const Eigen::MatrixXd& grad_q);
QNetGrads backward(const QNetParams& p, const Eigen::VectorXd& state,
                   const Eigen::VectorXd& grad_q);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One bias-corrected Adam update over flat buffers; `step` is the 1-based
/// index of this update.
void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m,
                 std::span<double> v, std::uint64_t step, double lr, const AdamConfig& cfg = {});

struct AdamState {
  QNetParams m;
  QNetParams v;
  std::uint64_t step = 0;

  static AdamState zeros_like(const QNetParams& p);
};

/// Throws NumericError on non-finite gradients (nothing is modified) and
/// InvalidArgument for lr <= 0 or mismatched shapes.
void adam_step(QNetParams& p, const QNetGrads& grads, AdamState& state, double lr,
               const AdamConfig& cfg = {});

/// target <- tau * online + (1 - tau) * target. Throws InvalidArgument for
/// tau outside [0, 1] or mismatched shapes.
void soft_update(QNetParams& target, const QNetParams& online, double tau);

/// Binary checkpoint, little-endian:
///   "EFQN" | u32 version=1 | u64 input_dim | u64 hidden_dim | u64 actions |
///   u64 blocks | per tensor: u64 rows, u64 cols, rows*cols f64 row-major
void save_checkpoint(const QNetParams& p, const std::filesystem::path& path);

/// Throws FormatError on bad magic/version, truncation, inconsistent shapes,
/// or when expected_actions is given and differs.
QNetParams load_checkpoint(const std::filesystem::path& path,
                           std::optional<std::size_t> expected_actions = std::nullopt);

}  // namespace ensemble_forge::qnet
