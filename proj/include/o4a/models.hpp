#pragma once
// The four learnable modules (backbone h, inverse kinematics f-dagger,
// forward kinematics f, per-environment geodesic regressors p+) and the
// potential-function primitives built on them.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "o4a/config.hpp"
#include "o4a/nn.hpp"
#include "o4a/sim.hpp"

namespace o4a {

/// Backbone output. Only produced by embed(); carries the local metric.
using Embedding = VectorXd;

/// Output classes of the inverse kinematics head.
enum class IkLabel : std::uint8_t { Forward = 0, RotateRight = 1, RotateLeft = 2, NotConnected = 3 };
inline constexpr int kIkClasses = 4;

inline int ik_class_of(Action a) { return move_index(a); }
inline bool ik_is_move(IkLabel l) noexcept { return l != IkLabel::NotConnected; }
inline Action ik_action(IkLabel l) {
  if (!ik_is_move(l)) throw ContractViolation("ik_action: NOT_CONNECTED has no action");
  return kMoveActions[static_cast<std::size_t>(l)];
}

struct NavConfig {
  double m_plus = 1.0;
  double m_minus = 10.0;
  double m_r = 2.5;
  double stop_thresh = 3.5;
  std::size_t buffer_capacity = 500;
  std::size_t max_steps = 500;
  double success_radius_m = 1.0;

  void validate() const {
    if (!(m_plus > 0 && m_minus > 0 && m_r > 0 && stop_thresh > 0 && success_radius_m > 0))
      throw std::invalid_argument("NavConfig: margins, radii and thresholds must be positive");
    if (!(m_plus < m_minus)) throw std::invalid_argument("NavConfig: m_plus must be < m_minus");
    if (buffer_capacity == 0 || max_steps == 0)
      throw std::invalid_argument("NavConfig: buffer_capacity and max_steps must be positive");
  }

  void write(KeyValueFile& kv) const {
    kv.set("nav.m_plus", m_plus);
    kv.set("nav.m_minus", m_minus);
    kv.set("nav.m_r", m_r);
    kv.set("nav.stop_thresh", stop_thresh);
    kv.set("nav.buffer_capacity", static_cast<std::uint64_t>(buffer_capacity));
    kv.set("nav.max_steps", static_cast<std::uint64_t>(max_steps));
    kv.set("nav.success_radius_m", success_radius_m);
  }

  static NavConfig read(const KeyValueFile& kv) {
    NavConfig c;
    c.m_plus = kv.get_double_or("nav.m_plus", c.m_plus);
    c.m_minus = kv.get_double_or("nav.m_minus", c.m_minus);
    c.m_r = kv.get_double_or("nav.m_r", c.m_r);
    c.stop_thresh = kv.get_double_or("nav.stop_thresh", c.stop_thresh);
    c.buffer_capacity = kv.get_size_or("nav.buffer_capacity", c.buffer_capacity);
    c.max_steps = kv.get_size_or("nav.max_steps", c.max_steps);
    c.success_radius_m = kv.get_double_or("nav.success_radius_m", c.success_radius_m);
    c.validate();
    return c;
  }
};

struct ModelShape {
  int obs_dim = 2 * kDefaultRays;
  int embedding_dim = 16;
  int hidden = 64;
};

struct SystemBundle {
  MlpParams backbone;                                // obs -> n
  MlpParams ik_head;                                 // 2n -> 4 logits
  MlpParams forward_model;                           // n + 3 -> n
  std::map<std::string, MlpParams> regressors;       // env_id -> (2n -> 1, softplus)
  NavConfig nav;

  int embedding_dim() const { return static_cast<int>(backbone.output_dim()); }
  int obs_dim() const { return static_cast<int>(backbone.input_dim()); }

  const MlpParams& regressor(const std::string& env_id) const {
    auto it = regressors.find(env_id);
    if (it == regressors.end()) throw std::out_of_range("no geodesic regressor for environment '" + env_id + "'");
    return it->second;
  }

  void validate() const {
    for (const auto* m : {&backbone, &ik_head, &forward_model}) m->validate();
    const auto n = backbone.output_dim();
    if (ik_head.input_dim() != 2 * n || ik_head.output_dim() != kIkClasses)
      throw DimensionMismatch("bundle: inverse kinematics head must map 2n -> 4");
    if (forward_model.input_dim() != n + 3 || forward_model.output_dim() != n)
      throw DimensionMismatch("bundle: forward model must map n+3 -> n");
    if (regressors.empty()) throw DimensionMismatch("bundle: at least one geodesic regressor required");
    for (const auto& [env, p] : regressors) {
      p.validate();
      if (p.input_dim() != 2 * n || p.output_dim() != 1 || p.head != OutputHead::Softplus)
        throw DimensionMismatch("bundle: regressor '" + env + "' must map 2n -> 1 with softplus head");
    }
    nav.validate();
  }
};

inline MlpParams make_backbone(const ModelShape& s, Rng& rng) {
  return make_mlp({s.obs_dim, s.hidden, s.hidden, s.embedding_dim}, OutputHead::Identity, rng);
}
inline MlpParams make_ik_head(const ModelShape& s, Rng& rng) {
  return make_mlp({2 * s.embedding_dim, s.hidden, s.hidden, kIkClasses}, OutputHead::Logits, rng);
}
inline MlpParams make_forward_model(const ModelShape& s, Rng& rng) {
  return make_mlp({s.embedding_dim + 3, s.hidden, s.hidden, s.embedding_dim}, OutputHead::Identity, rng);
}
inline MlpParams make_regressor(const ModelShape& s, Rng& rng) {
  return make_mlp({2 * s.embedding_dim, s.hidden, s.hidden, s.hidden, 1}, OutputHead::Softplus, rng);
}

// ---------------------------------------------------------------- operations

inline Embedding embed(const MlpParams& backbone, const Observation& obs) {
  if (obs.size() != backbone.input_dim())
    throw DimensionMismatch("embed: observation dimension " + std::to_string(obs.size()) +
                            " does not match backbone input " + std::to_string(backbone.input_dim()));
  return mlp_apply(backbone, obs.values);
}

/// Embeds a list of observations; columns of the result follow input order.
inline MatrixXd embed_all(const MlpParams& backbone, std::span<const Observation> observations,
                          std::size_t chunk = 4096) {
  const auto n = static_cast<Eigen::Index>(observations.size());
  MatrixXd out(backbone.output_dim(), n);
  for (Eigen::Index start = 0; start < n; start += static_cast<Eigen::Index>(chunk)) {
    const Eigen::Index len = std::min<Eigen::Index>(static_cast<Eigen::Index>(chunk), n - start);
    MatrixXd in(backbone.input_dim(), len);
    for (Eigen::Index i = 0; i < len; ++i) {
      const auto& o = observations[static_cast<std::size_t>(start + i)];
      if (o.size() != backbone.input_dim()) throw DimensionMismatch("embed_all: observation dimension mismatch");
      in.col(i) = o.values;
    }
    out.middleCols(start, len) = mlp_forward(backbone, in);
  }
  return out;
}

inline double local_distance(const Eigen::Ref<const VectorXd>& a, const Eigen::Ref<const VectorXd>& b) {
  if (a.size() != b.size()) throw DimensionMismatch("local_distance: embedding dimensions differ");
  // Fixed-order sum so that d(a, b) == d(b, a) bit for bit.
  double s = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

/// Row-wise argmax with ties going to the lowest class index.
inline int argmax_first(const Eigen::Ref<const VectorXd>& v) {
  int best = 0;
  for (int i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

struct IkPrediction {
  IkLabel label = IkLabel::NotConnected;
  VectorXd logits;
};

inline VectorXd concat(const Eigen::Ref<const VectorXd>& a, const Eigen::Ref<const VectorXd>& b) {
  VectorXd v(a.size() + b.size());
  v << a, b;
  return v;
}

/// Predicts the action that takes `source` to `target`, or NOT_CONNECTED.
inline IkPrediction inverse_kinematics(const MlpParams& ik_head, const Eigen::Ref<const VectorXd>& source,
                                       const Eigen::Ref<const VectorXd>& target) {
  if (source.size() != target.size()) throw DimensionMismatch("inverse_kinematics: embedding dimensions differ");
  IkPrediction p;
  p.logits = mlp_apply(ik_head, concat(source, target));
  p.label = static_cast<IkLabel>(argmax_first(p.logits));
  return p;
}

inline VectorXd action_onehot(Action a) {
  VectorXd v = VectorXd::Zero(3);
  v[move_index(a)] = 1.0;
  return v;
}

inline Embedding forward_kinematics(const MlpParams& fwd, const Eigen::Ref<const VectorXd>& x, Action a) {
  if (!is_move(a)) throw ContractViolation("forward_kinematics: STOP is not a move action");
  return mlp_apply(fwd, concat(x, action_onehot(a)));
}

/// Predicted geodesic distance from `current` to `goal`; always > 0.
inline double geodesic_predict(const MlpParams& regressor, const Eigen::Ref<const VectorXd>& current,
                               const Eigen::Ref<const VectorXd>& goal) {
  if (current.size() != goal.size()) throw DimensionMismatch("geodesic_predict: embedding dimensions differ");
  return mlp_apply(regressor, concat(current, goal))[0];
}

inline double repulsor(const Eigen::Ref<const VectorXd>& a, const Eigen::Ref<const VectorXd>& b, double m_r) {
  if (!(m_r > 0.0)) throw ContractViolation("repulsor: m_r must be positive");
  return std::max(0.0, m_r - local_distance(a, b));
}

inline double repulsor_sum(const Eigen::Ref<const VectorXd>& x, std::span<const Embedding> buffer, double m_r) {
  double s = 0.0;
  for (const auto& b : buffer) s += repulsor(x, b, m_r);
  return s;
}

/// Attractor p+(x, goal) plus repulsors around every buffered embedding.
inline double total_potential(const Eigen::Ref<const VectorXd>& x, const Eigen::Ref<const VectorXd>& goal,
                              std::span<const Embedding> buffer, const SystemBundle& bundle,
                              const std::string& env_id) {
  return geodesic_predict(bundle.regressor(env_id), x, goal) + repulsor_sum(x, buffer, bundle.nav.m_r);
}

// ---------------------------------------------------------------- persistence

inline constexpr int kBundleFormatVersion = 1;

inline std::string regressor_file_name(const std::string& env_id) { return "geodesic_" + env_id + ".o4am"; }

inline void save_model_file(const std::filesystem::path& path, const MlpParams& p, ModuleTag tag,
                            const std::string& env_id = {}) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_model(out, p, tag, env_id);
}

inline ModelFile load_model_file(const std::filesystem::path& path, ModuleTag expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  ModelFile f = read_model(in);
  if (f.tag != expected) throw FormatError(path.string() + ": unexpected module tag");
  return f;
}

/// Directory of O4AM weight files plus a key = value manifest.
inline void save_bundle(const SystemBundle& b, const std::filesystem::path& dir) {
  b.validate();
  std::filesystem::create_directories(dir);
  save_model_file(dir / "backbone.o4am", b.backbone, ModuleTag::Backbone);
  save_model_file(dir / "inverse_kinematics.o4am", b.ik_head, ModuleTag::InverseKinematics);
  save_model_file(dir / "forward_kinematics.o4am", b.forward_model, ModuleTag::ForwardKinematics);
  std::string envs;
  for (const auto& [env, p] : b.regressors) {
    save_model_file(dir / regressor_file_name(env), p, ModuleTag::Geodesic, env);
    envs += (envs.empty() ? "" : ",") + env;
  }
  KeyValueFile m;
  m.set("bundle.version", kBundleFormatVersion);
  m.set("bundle.embedding_dim", b.embedding_dim());
  m.set("bundle.obs_dim", b.obs_dim());
  m.set("bundle.envs", envs);
  m.set("module.1", std::string("backbone.o4am"));
  m.set("module.2", std::string("inverse_kinematics.o4am"));
  m.set("module.3", std::string("forward_kinematics.o4am"));
  for (const auto& [env, p] : b.regressors) m.set("module.4." + env, regressor_file_name(env));
  b.nav.write(m);
  m.save(dir / "manifest.txt");
}

inline SystemBundle load_bundle(const std::filesystem::path& dir) {
  const auto m = KeyValueFile::load(dir / "manifest.txt");
  if (m.get_int("bundle.version") != kBundleFormatVersion)
    throw FormatError("unsupported bundle version in " + (dir / "manifest.txt").string());
  SystemBundle b;
  b.backbone = load_model_file(dir / m.get("module.1"), ModuleTag::Backbone).params;
  b.ik_head = load_model_file(dir / m.get("module.2"), ModuleTag::InverseKinematics).params;
  b.forward_model = load_model_file(dir / m.get("module.3"), ModuleTag::ForwardKinematics).params;
  for (const auto& env : m.get_list("bundle.envs")) {
    auto f = load_model_file(dir / m.get("module.4." + env), ModuleTag::Geodesic);
    if (f.env_id != env) throw FormatError("regressor file env_id mismatch for " + env);
    b.regressors.emplace(env, std::move(f.params));
  }
  b.nav = NavConfig::read(m);
  if (b.embedding_dim() != m.get_int("bundle.embedding_dim"))
    throw FormatError("manifest embedding_dim disagrees with backbone weights");
  b.validate();
  return b;
}

}  // namespace o4a
