#include "ensemble_forge/qnet.hpp"

#include <cmath>
#include <fstream>

#include "binary_io.hpp"
#include "ensemble_forge/error.hpp"
#include "ensemble_forge/rng.hpp"

namespace ensemble_forge::qnet {

namespace {

constexpr char kMagic[4] = {'E', 'F', 'Q', 'N'};
constexpr std::uint32_t kVersion = 1;

Eigen::MatrixXd relu(const Eigen::MatrixXd& x) { return x.cwiseMax(0.0); }

// Elementwise g * [x > 0].
Eigen::MatrixXd relu_grad(const Eigen::MatrixXd& g, const Eigen::MatrixXd& x) {
  return ((x.array() > 0.0).cast<double>() * g.array()).matrix();
}

void require_finite(const Eigen::MatrixXd& m, const char* where) {
  if (!m.allFinite()) throw NumericError(std::string("Q-network produced non-finite values in ") + where);
}

void fill_uniform(Eigen::MatrixXd& w, SplitMix64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(w.cols()));
  for (Eigen::Index r = 0; r < w.rows(); ++r)
    for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = rng.uniform(-bound, bound);
}

template <typename A, typename B>
bool same_shape(const A& a, const B& b) {
  return a.rows() == b.rows() && a.cols() == b.cols();
}

bool same_layout(const QNetParams& a, const QNetParams& b) {
  bool ok = true;
  for_each_tensor([&](const auto& x, const auto& y) { ok = ok && same_shape(x, y); }, a, b);
  return ok;
}

}  // namespace

QNetParams QNetParams::zeros(const QNetShape& s) {
  const auto in = static_cast<Eigen::Index>(s.input_dim);
  const auto h = static_cast<Eigen::Index>(s.hidden_dim);
  const auto a = static_cast<Eigen::Index>(s.actions);
  QNetParams p;
  p.input_w = Eigen::MatrixXd::Zero(h, in);
  p.input_b = Eigen::VectorXd::Zero(h);
  for (auto& b : p.blocks) {
    b.w1 = Eigen::MatrixXd::Zero(h, h);
    b.b1 = Eigen::VectorXd::Zero(h);
    b.w2 = Eigen::MatrixXd::Zero(h, h);
    b.b2 = Eigen::VectorXd::Zero(h);
  }
  p.head_w = Eigen::MatrixXd::Zero(a, h);
  p.head_b = Eigen::VectorXd::Zero(a);
  return p;
}

QNetShape QNetParams::shape() const {
  return {static_cast<std::size_t>(input_w.cols()), static_cast<std::size_t>(input_w.rows()),
          static_cast<std::size_t>(head_w.rows())};
}

std::size_t QNetParams::parameter_count() const {
  std::size_t n = 0;
  for_each_tensor([&](const auto& t) { n += static_cast<std::size_t>(t.size()); }, *this);
  return n;
}

bool QNetParams::all_finite() const {
  bool ok = true;
  for_each_tensor([&](const auto& t) { ok = ok && t.allFinite(); }, *this);
  return ok;
}

bool QNetParams::operator==(const QNetParams& o) const {
  if (!same_layout(*this, o)) return false;
  bool eq = true;
  for_each_tensor([&](const auto& a, const auto& b) { eq = eq && a == b; }, *this, o);
  return eq;
}

QNetParams init_network(const QNetShape& shape, std::uint64_t seed) {
  if (shape.actions < 2)
    throw InvalidArgument("init_network: need at least 2 actions, got " +
                          std::to_string(shape.actions));
  if (shape.input_dim == 0 || shape.hidden_dim == 0)
    throw InvalidArgument("init_network: dimensions must be positive");
  QNetParams p = QNetParams::zeros(shape);
  SplitMix64 rng(seed);
  fill_uniform(p.input_w, rng);
  for (auto& b : p.blocks) {
    fill_uniform(b.w1, rng);
    fill_uniform(b.w2, rng);
  }
  fill_uniform(p.head_w, rng);
  return p;
}

QNetParams init_network(std::size_t actions, std::uint64_t seed) {
  return init_network(QNetShape{kStateDim, kHiddenDim, actions}, seed);
}

Eigen::MatrixXd forward_batch(const QNetParams& p, const Eigen::MatrixXd& states,
                              ForwardCache* cache) {
  if (states.rows() != p.input_w.cols())
    throw InvalidArgument("forward: state has " + std::to_string(states.rows()) +
                          " rows, network expects " + std::to_string(p.input_w.cols()));
  Eigen::MatrixXd z0 = p.input_w * states;
  z0.colwise() += p.input_b;
  Eigen::MatrixXd x = relu(z0);
  require_finite(x, "input layer");
  if (cache) {
    cache->input = states;
    cache->hidden0 = x;
  }
  for (std::size_t i = 0; i < kResidualBlocks; ++i) {
    const auto& blk = p.blocks[i];
    Eigen::MatrixXd z1 = blk.w1 * x;
    z1.colwise() += blk.b1;
    Eigen::MatrixXd a1 = relu(z1);
    Eigen::MatrixXd sum = blk.w2 * a1;
    sum.colwise() += blk.b2;
    sum += x;
    Eigen::MatrixXd out = relu(sum);
    require_finite(out, "residual block");
    if (cache) {
      auto& c = cache->blocks[i];
      c.in = std::move(x);
      c.z1 = std::move(z1);
      c.a1 = std::move(a1);
      c.out = out;
    }
    x = std::move(out);
  }
  Eigen::MatrixXd q = p.head_w * x;
  q.colwise() += p.head_b;
  require_finite(q, "output head");
  return q;
}

Eigen::VectorXd forward(const QNetParams& p, const Eigen::VectorXd& state) {
  return forward_batch(p, state);
}

Eigen::VectorXd forward(const QNetParams& p, const StateVector& state) {
  return forward_batch(p, state.values());
}

QNetGrads backward_batch(const QNetParams& p, const ForwardCache& cache,
                         const Eigen::MatrixXd& grad_q) {
  if (grad_q.rows() != p.head_w.rows() || grad_q.cols() != cache.input.cols())
    throw InvalidArgument("backward: grad_q has shape " + std::to_string(grad_q.rows()) + "x" +
                          std::to_string(grad_q.cols()) + ", expected " +
                          std::to_string(p.head_w.rows()) + "x" +
                          std::to_string(cache.input.cols()));
  QNetGrads g;
  const Eigen::MatrixXd& last =
      kResidualBlocks > 0 ? cache.blocks[kResidualBlocks - 1].out : cache.hidden0;
  g.head_w = grad_q * last.transpose();
  g.head_b = grad_q.rowwise().sum();
  Eigen::MatrixXd gx = p.head_w.transpose() * grad_q;

  for (std::size_t i = kResidualBlocks; i-- > 0;) {
    const auto& blk = p.blocks[i];
    const auto& c = cache.blocks[i];
    auto& gb = g.blocks[i];
    const Eigen::MatrixXd gsum = relu_grad(gx, c.out);
    gb.w2 = gsum * c.a1.transpose();
    gb.b2 = gsum.rowwise().sum();
    const Eigen::MatrixXd gz1 = relu_grad(blk.w2.transpose() * gsum, c.z1);
    gb.w1 = gz1 * c.in.transpose();
    gb.b1 = gz1.rowwise().sum();
    gx = gsum + blk.w1.transpose() * gz1;
  }

  const Eigen::MatrixXd gz0 = relu_grad(gx, cache.hidden0);
  g.input_w = gz0 * cache.input.transpose();
  g.input_b = gz0.rowwise().sum();
  return g;
}

QNetGrads backward(const QNetParams& p, const Eigen::VectorXd& state,
                   const Eigen::VectorXd& grad_q) {
  ForwardCache cache;
  forward_batch(p, state, &cache);
  return backward_batch(p, cache, grad_q);
}

void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m,
                 std::span<double> v, std::uint64_t step, double lr, const AdamConfig& cfg) {
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double m_hat = m[i] / bc1;
    const double v_hat = v[i] / bc2;
    param[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
  }
}

AdamState AdamState::zeros_like(const QNetParams& p) {
  return {QNetParams::zeros(p.shape()), QNetParams::zeros(p.shape()), 0};
}

void adam_step(QNetParams& p, const QNetGrads& grads, AdamState& state, double lr,
               const AdamConfig& cfg) {
  if (!(lr > 0.0)) throw InvalidArgument("adam_step: learning rate must be positive");
  if (!same_layout(p, grads) || !same_layout(p, state.m) || !same_layout(p, state.v))
    throw InvalidArgument("adam_step: parameter/gradient shape mismatch");
  if (!grads.all_finite()) throw NumericError("adam_step: non-finite gradient");
  ++state.step;
  for_each_tensor(
      [&](auto& w, const auto& g, auto& m, auto& v) {
        const auto n = static_cast<std::size_t>(w.size());
        adam_update({w.data(), n}, {g.data(), n}, {m.data(), n}, {v.data(), n}, state.step, lr,
                    cfg);
      },
      p, grads, state.m, state.v);
}

void soft_update(QNetParams& target, const QNetParams& online, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0))
    throw InvalidArgument("soft_update: tau must be in [0, 1]");
  if (!same_layout(target, online)) throw InvalidArgument("soft_update: shape mismatch");
  for_each_tensor([&](auto& t, const auto& o) { t = tau * o + (1.0 - tau) * t; }, target, online);
}

void save_checkpoint(const QNetParams& p, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  const QNetShape s = p.shape();
  out.write(kMagic, sizeof kMagic);
  detail::write_pod<std::uint32_t>(out, kVersion);
  detail::write_pod<std::uint64_t>(out, s.input_dim);
  detail::write_pod<std::uint64_t>(out, s.hidden_dim);
  detail::write_pod<std::uint64_t>(out, s.actions);
  detail::write_pod<std::uint64_t>(out, kResidualBlocks);
  for_each_tensor(
      [&](const auto& t) {
        detail::write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(t.rows()));
        detail::write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(t.cols()));
        for (Eigen::Index r = 0; r < t.rows(); ++r)
          for (Eigen::Index c = 0; c < t.cols(); ++c) detail::write_pod<double>(out, t(r, c));
      },
      p);
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

QNetParams load_checkpoint(const std::filesystem::path& path,
                           std::optional<std::size_t> expected_actions) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  const std::string name = "checkpoint '" + path.string() + "'";
  char magic[4];
  if (!in.read(magic, sizeof magic) || std::string(magic, 4) != std::string(kMagic, 4))
    throw FormatError(name + ": bad magic bytes");
  const auto version = detail::read_pod<std::uint32_t>(in, name);
  if (version != kVersion)
    throw FormatError(name + ": unsupported version " + std::to_string(version));
  QNetShape shape;
  shape.input_dim = detail::read_pod<std::uint64_t>(in, name);
  shape.hidden_dim = detail::read_pod<std::uint64_t>(in, name);
  shape.actions = detail::read_pod<std::uint64_t>(in, name);
  const auto blocks = detail::read_pod<std::uint64_t>(in, name);
  if (blocks != kResidualBlocks)
    throw FormatError(name + ": expected " + std::to_string(kResidualBlocks) +
                      " residual blocks, found " + std::to_string(blocks));
  if (expected_actions && *expected_actions != shape.actions)
    throw FormatError(name + ": network has " + std::to_string(shape.actions) +
                      " actions, expected " + std::to_string(*expected_actions));
  if (shape.input_dim == 0 || shape.hidden_dim == 0 || shape.actions < 2 ||
      shape.input_dim > (1u << 20) || shape.hidden_dim > (1u << 16) || shape.actions > (1u << 16))
    throw FormatError(name + ": implausible shape");

  QNetParams p = QNetParams::zeros(shape);
  for_each_tensor(
      [&](auto& t) {
        const auto rows = detail::read_pod<std::uint64_t>(in, name);
        const auto cols = detail::read_pod<std::uint64_t>(in, name);
        if (rows != static_cast<std::uint64_t>(t.rows()) ||
            cols != static_cast<std::uint64_t>(t.cols()))
          throw FormatError(name + ": tensor shape " + std::to_string(rows) + "x" +
                            std::to_string(cols) + " does not match header");
        for (Eigen::Index r = 0; r < t.rows(); ++r)
          for (Eigen::Index c = 0; c < t.cols(); ++c) t(r, c) = detail::read_pod<double>(in, name);
      },
      p);
  if (in.peek() != std::char_traits<char>::eof())
    throw FormatError(name + ": trailing bytes after parameters");
  return p;
}

}  // namespace ensemble_forge::qnet
