#pragma once
// Minimal dense network core in f64: batched MLP forward/backward (samples
// are matrix columns), the contrastive / cross-entropy / MSE losses, Adam,
// a central finite-difference gradient checker and the "O4AM" weight file.

#include <algorithm>
#include <cmath>
#include <functional>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "o4a/common.hpp"

namespace o4a {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class OutputHead : std::uint8_t { Identity = 0, Softplus = 1, Logits = 2 };

struct DenseLayer {
  MatrixXd weights;  // rows = outputs, cols = inputs
  VectorXd biases;
};

/// Gradients (and Adam moments) share the layer shapes of the parameters.
using LayerTensors = std::vector<DenseLayer>;

struct MlpParams {
  std::vector<DenseLayer> layers;
  OutputHead head = OutputHead::Identity;
  /// Bumped by every in-place update; forward caches remember it.
  std::uint64_t revision = 0;

  Eigen::Index input_dim() const { return layers.empty() ? 0 : layers.front().weights.cols(); }
  Eigen::Index output_dim() const { return layers.empty() ? 0 : layers.back().weights.rows(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += static_cast<std::size_t>(l.weights.size() + l.biases.size());
    return n;
  }

  /// Flat view used by the gradient checker: per layer, weights in storage
  /// order then biases.
  double& parameter(std::size_t i) {
    for (auto& l : layers) {
      const auto nw = static_cast<std::size_t>(l.weights.size());
      if (i < nw) return l.weights.data()[i];
      i -= nw;
      const auto nb = static_cast<std::size_t>(l.biases.size());
      if (i < nb) return l.biases.data()[i];
      i -= nb;
    }
    throw std::out_of_range("MlpParams::parameter index out of range");
  }

  void validate() const {
    if (layers.empty()) throw DimensionMismatch("MLP has no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].biases.size() != layers[i].weights.rows())
        throw DimensionMismatch("MLP layer " + std::to_string(i) + ": bias length != rows");
      if (i > 0 && layers[i].weights.cols() != layers[i - 1].weights.rows())
        throw DimensionMismatch("MLP layer " + std::to_string(i) + ": incompatible with previous layer");
    }
  }

  bool all_finite() const {
    return std::all_of(layers.begin(), layers.end(),
                       [](const DenseLayer& l) { return l.weights.allFinite() && l.biases.allFinite(); });
  }

  friend bool operator==(const MlpParams& a, const MlpParams& b) {
    if (a.head != b.head || a.layers.size() != b.layers.size()) return false;
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
      const auto& la = a.layers[i];
      const auto& lb = b.layers[i];
      if (la.weights.rows() != lb.weights.rows() || la.weights.cols() != lb.weights.cols() ||
          la.weights != lb.weights || la.biases != lb.biases)
        return false;
    }
    return true;
  }
};

inline LayerTensors zeros_like(const MlpParams& p) {
  LayerTensors t;
  t.reserve(p.layers.size());
  for (const auto& l : p.layers)
    t.push_back({MatrixXd::Zero(l.weights.rows(), l.weights.cols()), VectorXd::Zero(l.biases.size())});
  return t;
}

inline void accumulate(LayerTensors& into, const LayerTensors& g, double scale = 1.0) {
  for (std::size_t i = 0; i < into.size(); ++i) {
    into[i].weights += scale * g[i].weights;
    into[i].biases += scale * g[i].biases;
  }
}

/// Glorot-uniform weights, zero biases. `dims` lists every layer width
/// including input and output.
inline MlpParams make_mlp(std::span<const int> dims, OutputHead head, Rng& rng) {
  if (dims.size() < 2) throw std::invalid_argument("make_mlp: need at least input and output dims");
  MlpParams p;
  p.head = head;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const int fan_in = dims[i], fan_out = dims[i + 1];
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> u(-limit, limit);
    DenseLayer l{MatrixXd(fan_out, fan_in), VectorXd::Zero(fan_out)};
    for (int r = 0; r < fan_out; ++r)
      for (int c = 0; c < fan_in; ++c) l.weights(r, c) = u(rng);
    p.layers.push_back(std::move(l));
  }
  return p;
}

inline MlpParams make_mlp(std::initializer_list<int> dims, OutputHead head, Rng& rng) {
  std::vector<int> v(dims);
  return make_mlp(std::span<const int>(v), head, rng);
}

inline double softplus(double z) noexcept { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }
inline double sigmoid(double z) noexcept {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}
inline double inverse_softplus(double y) {
  if (!(y > 0.0)) throw std::invalid_argument("inverse_softplus: argument must be positive");
  return y > 30.0 ? y : std::log(std::expm1(y));
}

/// Everything the backward pass needs from one forward call.
struct ForwardCache {
  std::vector<MatrixXd> inputs;  // inputs[l] feeds layer l
  std::vector<MatrixXd> pre;     // pre-activations of layer l
  const MlpParams* owner = nullptr;
  std::uint64_t revision = 0;
};

/// Affine + ReLU stack over the columns of `input`; ReLU'(0) is taken as 0.
inline MatrixXd mlp_forward(const MlpParams& params, const Eigen::Ref<const MatrixXd>& input,
                            ForwardCache* cache = nullptr) {
  if (params.layers.empty()) throw DimensionMismatch("mlp_forward: empty network");
  if (input.rows() != params.input_dim())
    throw DimensionMismatch("mlp_forward: input has " + std::to_string(input.rows()) + " rows, expected " +
                            std::to_string(params.input_dim()));
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
    cache->owner = &params;
    cache->revision = params.revision;
  }
  MatrixXd a = input;
  const std::size_t last = params.layers.size() - 1;
  for (std::size_t l = 0; l <= last; ++l) {
    const auto& layer = params.layers[l];
    MatrixXd z = layer.weights * a;
    z.colwise() += layer.biases;
    if (cache) {
      cache->inputs.push_back(std::move(a));
      cache->pre.push_back(z);
    }
    if (l < last) {
      a = z.cwiseMax(0.0);
    } else if (params.head == OutputHead::Softplus) {
      a = z.unaryExpr([](double v) { return softplus(v); });
    } else {
      a = std::move(z);
    }
  }
  return a;
}

inline VectorXd mlp_apply(const MlpParams& params, const Eigen::Ref<const VectorXd>& input) {
  return mlp_forward(params, input).col(0);
}

struct BackwardResult {
  LayerTensors grads;
  MatrixXd input_grad;
};

/// Exact reverse-mode gradients for the batch seen by `cache`; output_grad
/// is dLoss/dOutput with one column per sample.
inline BackwardResult mlp_backward(const MlpParams& params, const ForwardCache& cache,
                                   const Eigen::Ref<const MatrixXd>& output_grad) {
  if (cache.owner != &params || cache.revision != params.revision || cache.pre.size() != params.layers.size())
    throw ContractViolation("mlp_backward: stale forward cache");
  const MatrixXd& z_last = cache.pre.back();
  if (output_grad.rows() != z_last.rows() || output_grad.cols() != z_last.cols())
    throw DimensionMismatch("mlp_backward: output_grad shape does not match forward output");
  BackwardResult res;
  res.grads.resize(params.layers.size());
  MatrixXd dz = output_grad;
  if (params.head == OutputHead::Softplus)
    dz.array() *= z_last.unaryExpr([](double v) { return sigmoid(v); }).array();
  for (std::size_t l = params.layers.size(); l-- > 0;) {
    res.grads[l].weights = dz * cache.inputs[l].transpose();
    res.grads[l].biases = dz.rowwise().sum();
    MatrixXd da = params.layers[l].weights.transpose() * dz;
    if (l == 0) {
      res.input_grad = std::move(da);
    } else {
      dz = (cache.pre[l - 1].array() > 0.0).select(da, 0.0);
    }
  }
  return res;
}

/// Sign pattern of every hidden pre-activation; used to skip finite
/// differences that straddle a ReLU kink.
inline std::vector<bool> relu_signature(const MlpParams& params, const Eigen::Ref<const MatrixXd>& input) {
  ForwardCache cache;
  mlp_forward(params, input, &cache);
  std::vector<bool> sig;
  for (std::size_t l = 0; l + 1 < cache.pre.size(); ++l)
    for (Eigen::Index i = 0; i < cache.pre[l].size(); ++i) sig.push_back(cache.pre[l].data()[i] > 0.0);
  return sig;
}

// ---------------------------------------------------------------- losses

struct LossResult {
  double loss = 0.0;
  VectorXd grad;
};

/// Temporal contrastive loss: (m+ - d(a,p))^2 + mean_n max(0, m- - d(a,n))^2
/// with d the Euclidean distance. Negatives are the columns of `negatives`.
/// At d = 0 the direction is undefined and the gradient is taken as 0.
struct ContrastiveResult {
  double loss = 0.0;
  VectorXd grad_anchor;
  VectorXd grad_positive;
  MatrixXd grad_negatives;
};

inline ContrastiveResult contrastive_loss(const Eigen::Ref<const VectorXd>& anchor,
                                          const Eigen::Ref<const VectorXd>& positive,
                                          const Eigen::Ref<const MatrixXd>& negatives, double m_plus,
                                          double m_minus) {
  if (!(m_plus < m_minus)) throw ContractViolation("contrastive_loss: requires m_plus < m_minus");
  if (negatives.cols() == 0) throw std::invalid_argument("contrastive_loss: empty negative set");
  if (positive.size() != anchor.size() || negatives.rows() != anchor.size())
    throw DimensionMismatch("contrastive_loss: embedding dimensions differ");
  ContrastiveResult r;
  r.grad_anchor = VectorXd::Zero(anchor.size());
  r.grad_negatives = MatrixXd::Zero(negatives.rows(), negatives.cols());

  const VectorXd diff = anchor - positive;
  const double d = diff.norm();
  r.loss = (m_plus - d) * (m_plus - d);
  if (d > 0.0) r.grad_anchor = (-2.0 * (m_plus - d) / d) * diff;
  r.grad_positive = -r.grad_anchor;

  const double inv_k = 1.0 / static_cast<double>(negatives.cols());
  for (Eigen::Index k = 0; k < negatives.cols(); ++k) {
    const VectorXd dn = anchor - negatives.col(k);
    const double dk = dn.norm();
    const double gap = m_minus - dk;
    if (gap <= 0.0) continue;
    r.loss += inv_k * gap * gap;
    if (dk > 0.0) {
      const VectorXd g = (-2.0 * gap * inv_k / dk) * dn;
      r.grad_anchor += g;
      r.grad_negatives.col(k) = -g;
    }
  }
  return r;
}

/// Softmax cross-entropy; gradient is softmax(logits) - onehot(target).
inline LossResult cross_entropy_loss(const Eigen::Ref<const VectorXd>& logits, Eigen::Index target) {
  if (target < 0 || target >= logits.size())
    throw std::out_of_range("cross_entropy_loss: target class out of range");
  const double mx = logits.maxCoeff();
  const VectorXd shifted = logits.array() - mx;
  const double lse = std::log(shifted.array().exp().sum());
  LossResult r;
  r.loss = lse - shifted[target];
  r.grad = (shifted.array() - lse).exp();
  r.grad[target] -= 1.0;
  return r;
}

inline LossResult mse_loss(const Eigen::Ref<const VectorXd>& pred, const Eigen::Ref<const VectorXd>& target) {
  if (pred.size() != target.size() || pred.size() == 0)
    throw DimensionMismatch("mse_loss: prediction and target lengths differ");
  LossResult r;
  const VectorXd diff = pred - target;
  const double n = static_cast<double>(pred.size());
  r.loss = diff.squaredNorm() / n;
  r.grad = (2.0 / n) * diff;
  return r;
}

// ---------------------------------------------------------------- Adam

struct NonFiniteGradient : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct AdamState {
  LayerTensors first_moment;
  LayerTensors second_moment;
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState for_params(const MlpParams& p) {
    AdamState s;
    s.first_moment = zeros_like(p);
    s.second_moment = zeros_like(p);
    return s;
  }
};

/// One bias-corrected Adam update in place. Throws NonFiniteGradient (and
/// leaves params untouched) if any gradient entry is NaN or infinite.
inline void adam_step(MlpParams& params, const LayerTensors& grads, AdamState& state, double lr) {
  if (grads.size() != params.layers.size() || state.first_moment.size() != params.layers.size())
    throw DimensionMismatch("adam_step: gradient/state shapes do not match parameters");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].weights.rows() != params.layers[i].weights.rows() ||
        grads[i].weights.cols() != params.layers[i].weights.cols() ||
        grads[i].biases.size() != params.layers[i].biases.size())
      throw DimensionMismatch("adam_step: gradient shape mismatch in layer " + std::to_string(i));
    if (!grads[i].weights.allFinite() || !grads[i].biases.allFinite())
      throw NonFiniteGradient("adam_step: non-finite gradient in layer " + std::to_string(i));
  }
  ++state.step;
  const double b1 = state.beta1, b2 = state.beta2, eps = state.epsilon;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  auto update = [&](auto& p, const auto& g, auto& m, auto& v) {
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
    p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  };
  for (std::size_t i = 0; i < grads.size(); ++i) {
    update(params.layers[i].weights, grads[i].weights, state.first_moment[i].weights,
           state.second_moment[i].weights);
    update(params.layers[i].biases, grads[i].biases, state.first_moment[i].biases,
           state.second_moment[i].biases);
  }
  ++params.revision;
}

// ---------------------------------------------------------------- gradient check

using LossAndGrad = std::function<std::pair<double, LayerTensors>(const MlpParams&)>;

struct FiniteDiffOptions {
  double step = 1e-5;
  std::size_t max_parameters = 0;  // 0 = check every parameter
  std::uint64_t seed = 0;
  double denominator_floor = 1e-6;
  /// Optional: parameters whose +/- perturbation changes this signature are
  /// skipped (ReLU kinks).
  std::function<std::vector<bool>(const MlpParams&)> kink_signature;
};

struct FiniteDiffReport {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

/// Central differences against the analytic gradient on a random subsample
/// of parameters. Relative error is |a - n| / max(|a|, |n|, floor * max(1, |loss|)).
inline FiniteDiffReport finite_diff_check(const MlpParams& params, const LossAndGrad& loss_fn,
                                          const FiniteDiffOptions& opt = {}) {
  MlpParams base = params;
  const auto [loss0, analytic] = loss_fn(base);
  const double floor = opt.denominator_floor * std::max(1.0, std::abs(loss0));
  std::vector<double> flat_grad;
  for (const auto& g : analytic) {
    flat_grad.insert(flat_grad.end(), g.weights.data(), g.weights.data() + g.weights.size());
    flat_grad.insert(flat_grad.end(), g.biases.data(), g.biases.data() + g.biases.size());
  }
  const std::size_t n = base.parameter_count();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (opt.max_parameters > 0 && opt.max_parameters < n) {
    Rng rng(derive_seed(opt.seed, "finite-diff"));
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(opt.max_parameters);
  }
  std::vector<bool> sig0;
  if (opt.kink_signature) sig0 = opt.kink_signature(base);
  FiniteDiffReport rep;
  for (std::size_t i : idx) {
    const double orig = base.parameter(i);
    base.parameter(i) = orig + opt.step;
    ++base.revision;
    const bool kink_plus = opt.kink_signature && opt.kink_signature(base) != sig0;
    const double lp = loss_fn(base).first;
    base.parameter(i) = orig - opt.step;
    ++base.revision;
    const bool kink_minus = opt.kink_signature && opt.kink_signature(base) != sig0;
    const double lm = loss_fn(base).first;
    base.parameter(i) = orig;
    ++base.revision;
    if (kink_plus || kink_minus) {
      ++rep.skipped;
      continue;
    }
    const double numeric = (lp - lm) / (2.0 * opt.step);
    const double a = flat_grad[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), floor});
    rep.max_relative_error = std::max(rep.max_relative_error, std::abs(a - numeric) / denom);
    ++rep.checked;
  }
  return rep;
}

// ---------------------------------------------------------------- O4AM files

inline constexpr std::uint32_t kModelFileVersion = 1;

/// Which learned module a weight file holds.
enum class ModuleTag : std::uint8_t { Backbone = 1, InverseKinematics = 2, ForwardKinematics = 3, Geodesic = 4 };

struct ModelFile {
  MlpParams params;
  ModuleTag tag = ModuleTag::Backbone;
  std::string env_id;  // empty for shared modules
};

inline void write_model(std::ostream& out, const MlpParams& p, ModuleTag tag, std::string_view env_id = {}) {
  p.validate();
  io::write_magic(out, "O4AM");
  io::write_le<std::uint32_t>(out, kModelFileVersion);
  io::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(tag));
  io::write_string16(out, env_id);
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.layers.size()));
  for (const auto& l : p.layers) {
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(l.weights.rows()));
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(l.weights.cols()));
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) io::write_le<double>(out, l.weights(r, c));
    for (Eigen::Index r = 0; r < l.biases.size(); ++r) io::write_le<double>(out, l.biases[r]);
  }
  io::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(p.head));
}

inline ModelFile read_model(std::istream& in) {
  io::expect_magic(in, "O4AM");
  const auto version = io::read_le<std::uint32_t>(in);
  if (version != kModelFileVersion) throw FormatError("unsupported model file version " + std::to_string(version));
  ModelFile f;
  const auto tag = io::read_le<std::uint8_t>(in);
  if (tag < 1 || tag > 4) throw FormatError("invalid module tag " + std::to_string(tag));
  f.tag = static_cast<ModuleTag>(tag);
  f.env_id = io::read_string16(in);
  const auto count = io::read_le<std::uint32_t>(in);
  if (count == 0 || count > 64) throw FormatError("implausible layer count " + std::to_string(count));
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto rows = io::read_le<std::uint32_t>(in);
    const auto cols = io::read_le<std::uint32_t>(in);
    if (rows == 0 || cols == 0 || rows > (1u << 16) || cols > (1u << 16))
      throw FormatError("implausible layer shape");
    DenseLayer l{MatrixXd(rows, cols), VectorXd(rows)};
    for (std::uint32_t r = 0; r < rows; ++r)
      for (std::uint32_t c = 0; c < cols; ++c) l.weights(r, c) = io::read_le<double>(in);
    for (std::uint32_t r = 0; r < rows; ++r) l.biases[r] = io::read_le<double>(in);
    f.params.layers.push_back(std::move(l));
  }
  const auto head = io::read_le<std::uint8_t>(in);
  if (head > 2) throw FormatError("invalid output head tag " + std::to_string(head));
  f.params.head = static_cast<OutputHead>(head);
  f.params.validate();
  return f;
}

}  // namespace o4a
