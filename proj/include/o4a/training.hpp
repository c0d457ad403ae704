#pragma once
// Four-stage training: (1) backbone + inverse kinematics head on temporal
// pairs, (2) per-environment graph construction, (3) forward kinematics on
// graph edges, (4) one geodesic regressor per environment.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "o4a/config.hpp"
#include "o4a/graph.hpp"
#include "o4a/models.hpp"
#include "o4a/nn.hpp"
#include "o4a/sim.hpp"

namespace o4a {

struct TrainConfig {
  std::size_t batch_size = 512;
  double lr = 5e-4;
  std::size_t negatives_per_anchor = 8;
  std::size_t steps_local = 20000;
  std::size_t steps_forward = 10000;
  std::size_t steps_geodesic = 10000;
  std::uint64_t seed = 0;
  double val_fraction = 0.3;
  double cross_env_negative_prob = 0.5;
  double ik_weight = 1.0;
  std::size_t num_sources = 512;
  double candidate_radius = 10.0;
  bool exhaustive_graph = false;
  std::size_t log_every = 1000;
  std::size_t threads = 1;
  ModelShape shape;

  void validate() const {
    if (batch_size < 1 || negatives_per_anchor < 1 || steps_local < 1 || steps_forward < 1 || steps_geodesic < 1 ||
        num_sources < 1 || log_every < 1)
      throw std::invalid_argument("train config: counts must be positive");
    if (!(lr > 0.0)) throw std::invalid_argument("train config: lr must be positive");
    if (!(val_fraction > 0.0 && val_fraction < 1.0))
      throw std::invalid_argument("train config: val_fraction must be in (0,1)");
    if (!(cross_env_negative_prob >= 0.0 && cross_env_negative_prob <= 1.0))
      throw std::invalid_argument("train config: cross_env_negative_prob must be in [0,1]");
    if (!(ik_weight >= 0.0)) throw std::invalid_argument("train config: ik_weight must be non-negative");
    if (!(candidate_radius > 0.0)) throw std::invalid_argument("train config: candidate_radius must be positive");
    if (shape.obs_dim < 1 || shape.embedding_dim < 1 || shape.hidden < 1)
      throw std::invalid_argument("train config: model sizes must be positive");
  }

  void write(KeyValueFile& kv) const {
    kv.set("train.batch_size", batch_size);
    kv.set("train.lr", lr);
    kv.set("train.negatives_per_anchor", negatives_per_anchor);
    kv.set("train.steps_local", steps_local);
    kv.set("train.steps_forward", steps_forward);
    kv.set("train.steps_geodesic", steps_geodesic);
    kv.set("train.seed", seed);
    kv.set("train.val_fraction", val_fraction);
    kv.set("train.cross_env_negative_prob", cross_env_negative_prob);
    kv.set("train.ik_weight", ik_weight);
    kv.set("train.num_sources", num_sources);
    kv.set("train.candidate_radius", candidate_radius);
    kv.set("train.exhaustive_graph", exhaustive_graph);
    kv.set("train.log_every", log_every);
    kv.set("train.embedding_dim", static_cast<std::size_t>(shape.embedding_dim));
    kv.set("train.hidden", static_cast<std::size_t>(shape.hidden));
  }

  static TrainConfig read(const KeyValueFile& kv) {
    TrainConfig c;
    c.batch_size = kv.get_size_or("train.batch_size", c.batch_size);
    c.lr = kv.get_double_or("train.lr", c.lr);
    c.negatives_per_anchor = kv.get_size_or("train.negatives_per_anchor", c.negatives_per_anchor);
    c.steps_local = kv.get_size_or("train.steps_local", c.steps_local);
    c.steps_forward = kv.get_size_or("train.steps_forward", c.steps_forward);
    c.steps_geodesic = kv.get_size_or("train.steps_geodesic", c.steps_geodesic);
    c.seed = kv.get_u64_or("train.seed", c.seed);
    c.val_fraction = kv.get_double_or("train.val_fraction", c.val_fraction);
    c.cross_env_negative_prob = kv.get_double_or("train.cross_env_negative_prob", c.cross_env_negative_prob);
    c.ik_weight = kv.get_double_or("train.ik_weight", c.ik_weight);
    c.num_sources = kv.get_size_or("train.num_sources", c.num_sources);
    c.candidate_radius = kv.get_double_or("train.candidate_radius", c.candidate_radius);
    c.exhaustive_graph = kv.get_bool_or("train.exhaustive_graph", c.exhaustive_graph);
    c.log_every = kv.get_size_or("train.log_every", c.log_every);
    c.shape.embedding_dim = static_cast<int>(kv.get_size_or("train.embedding_dim", c.shape.embedding_dim));
    c.shape.hidden = static_cast<int>(kv.get_size_or("train.hidden", c.shape.hidden));
    c.validate();
    return c;
  }
};

/// Column-oriented training log written as CSV.
struct MetricsLog {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  void add(std::vector<double> row) {
    if (row.size() != columns.size()) throw DimensionMismatch("metrics log: row width mismatch");
    rows.push_back(std::move(row));
  }
  const std::vector<double>& last() const {
    if (rows.empty()) throw std::out_of_range("metrics log is empty");
    return rows.back();
  }
  double last(const std::string& column) const {
    auto it = std::find(columns.begin(), columns.end(), column);
    if (it == columns.end()) throw std::out_of_range("metrics log: no column " + column);
    return last()[static_cast<std::size_t>(it - columns.begin())];
  }
  void write_csv(std::ostream& out) const {
    for (std::size_t i = 0; i < columns.size(); ++i) out << (i ? "," : "") << columns[i];
    out << '\n';
    for (const auto& r : rows) {
      for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << format_double(r[i]);
      out << '\n';
    }
  }
};

using ProgressFn = std::function<void(const std::string&)>;

namespace detail {

inline void check_obs_dims(std::span<const Trajectory> trajs, Eigen::Index dim) {
  for (const auto& t : trajs)
    for (const auto& o : t.observations)
      if (o.size() != dim)
        throw DimensionMismatch("trajectory " + t.env_id + ": observation dimension " + std::to_string(o.size()) +
                                " differs from " + std::to_string(dim));
}

/// Softmax cross-entropy over columns; returns weighted loss and writes
/// weight * (softmax - onehot) into `grad`.
inline double cross_entropy_columns(const MatrixXd& logits, std::span<const int> targets,
                                    std::span<const double> weights, MatrixXd& grad) {
  grad.resize(logits.rows(), logits.cols());
  double loss = 0.0;
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    const auto r = cross_entropy_loss(logits.col(c), targets[static_cast<std::size_t>(c)]);
    const double w = weights[static_cast<std::size_t>(c)];
    loss += w * r.loss;
    grad.col(c) = w * r.grad;
  }
  return loss;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  const auto mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
  return m;
}

}  // namespace detail

// ---------------------------------------------------------------- stage 1

struct LocalMetrics {
  double positive_mean = 0.0;      // mean d_local over held-out consecutive pairs
  double far_fraction = 0.0;       // share of held-out random pairs with d_local > far_threshold
  double ik_balanced_accuracy = 0.0;
  std::array<double, kIkClasses> ik_recall{};
  std::size_t positives = 0;
  std::size_t random_pairs = 0;
};

/// Held-out metrics on the validation segment of every trajectory. Random
/// pairs are drawn within one trajectory, excluding identical and
/// consecutive indices.
inline LocalMetrics evaluate_local(const MlpParams& backbone, const MlpParams& ik_head,
                                   std::span<const Trajectory> trajectories, double far_threshold,
                                   std::uint64_t seed, std::size_t random_pairs = 4000) {
  Rng rng(derive_seed(seed, "local-eval"));
  LocalMetrics m;
  std::array<std::size_t, kIkClasses> correct{}, total{};
  double pos_sum = 0.0;
  std::size_t far = 0;
  std::vector<std::size_t> eligible;
  for (std::size_t k = 0; k < trajectories.size(); ++k)
    if (trajectories[k].size() - std::min(trajectories[k].size(), trajectories[k].train_count) >= 3)
      eligible.push_back(k);
  if (eligible.empty()) throw std::invalid_argument("evaluate_local: no trajectory has a validation segment");

  std::vector<MatrixXd> emb(trajectories.size());
  for (std::size_t k : eligible) {
    const auto& t = trajectories[k];
    emb[k] = embed_all(backbone, std::span(t.observations).subspan(t.train_count));
  }
  std::vector<std::pair<Eigen::Index, Eigen::Index>> pairs;
  std::vector<std::size_t> owner;
  std::vector<int> labels;
  for (std::size_t k : eligible) {
    const auto& t = trajectories[k];
    for (std::size_t s = t.train_count; s + 1 < t.size(); ++s) {
      const auto i = static_cast<Eigen::Index>(s - t.train_count);
      pairs.emplace_back(i, i + 1);
      owner.push_back(k);
      labels.push_back(ik_class_of(t.actions[s]));
      pos_sum += local_distance(emb[k].col(i), emb[k].col(i + 1));
      ++m.positives;
    }
  }
  for (std::size_t r = 0; r < random_pairs; ++r) {
    const std::size_t k = eligible[uniform_index(rng, eligible.size())];
    const auto n = static_cast<std::size_t>(emb[k].cols());
    std::size_t i = 0, j = 0;
    do {
      i = uniform_index(rng, n);
      j = uniform_index(rng, n);
    } while (i == j || j == i + 1);
    const auto ii = static_cast<Eigen::Index>(i), jj = static_cast<Eigen::Index>(j);
    if (local_distance(emb[k].col(ii), emb[k].col(jj)) > far_threshold) ++far;
    pairs.emplace_back(ii, jj);
    owner.push_back(k);
    labels.push_back(static_cast<int>(IkLabel::NotConnected));
  }
  m.random_pairs = random_pairs;
  m.positive_mean = pos_sum / static_cast<double>(std::max<std::size_t>(1, m.positives));
  m.far_fraction = random_pairs ? static_cast<double>(far) / static_cast<double>(random_pairs) : 0.0;

  const Eigen::Index dim = backbone.output_dim();
  constexpr std::size_t kChunk = 4096;
  for (std::size_t start = 0; start < pairs.size(); start += kChunk) {
    const std::size_t len = std::min(kChunk, pairs.size() - start);
    MatrixXd in(2 * dim, static_cast<Eigen::Index>(len));
    for (std::size_t c = 0; c < len; ++c) {
      const auto& [i, j] = pairs[start + c];
      const auto& e = emb[owner[start + c]];
      in.col(static_cast<Eigen::Index>(c)) << e.col(i), e.col(j);
    }
    const MatrixXd logits = mlp_forward(ik_head, in);
    for (std::size_t c = 0; c < len; ++c) {
      const int label = labels[start + c];
      ++total[static_cast<std::size_t>(label)];
      if (argmax_first(logits.col(static_cast<Eigen::Index>(c))) == label) ++correct[static_cast<std::size_t>(label)];
    }
  }
  double acc = 0.0;
  int classes = 0;
  for (int c = 0; c < kIkClasses; ++c) {
    const auto cu = static_cast<std::size_t>(c);
    m.ik_recall[cu] = total[cu] ? static_cast<double>(correct[cu]) / static_cast<double>(total[cu]) : 0.0;
    if (total[cu]) {
      acc += m.ik_recall[cu];
      ++classes;
    }
  }
  m.ik_balanced_accuracy = classes ? acc / classes : 0.0;
  return m;
}

struct LocalResult {
  MlpParams backbone;
  MlpParams ik_head;
  MetricsLog log;
  LocalMetrics metrics;
};

/// Joint training of the backbone (temporal contrastive loss) and the
/// inverse kinematics head (cross-entropy on observed actions, plus
/// NOT_CONNECTED on the same negatives). Each step draws one negative pool
/// of `batch_size` training observations, stratified by environment, and
/// every anchor picks its negatives from that pool.
inline LocalResult train_local(std::span<const Trajectory> trajectories, const TrainConfig& cfg,
                               const NavConfig& nav, const ProgressFn& progress = {}) {
  cfg.validate();
  nav.validate();
  if (trajectories.empty()) throw std::invalid_argument("train_local: no trajectories");
  const Eigen::Index obs_dim = trajectories.front().obs_dim();
  detail::check_obs_dims(trajectories, obs_dim);
  if (obs_dim != cfg.shape.obs_dim)
    throw DimensionMismatch("train_local: observation dimension " + std::to_string(obs_dim) +
                            " does not match configured " + std::to_string(cfg.shape.obs_dim));

  // Flatten observations; index transitions and per-environment pools.
  std::vector<const Observation*> obs;
  struct Transition {
    std::uint32_t from, to;
    int label;
    std::uint32_t env;
  };
  std::vector<Transition> transitions;
  std::map<std::string, std::uint32_t> env_index;
  std::vector<std::vector<std::uint32_t>> env_obs;
  for (const auto& t : trajectories) {
    auto [it, fresh] = env_index.emplace(t.env_id, static_cast<std::uint32_t>(env_index.size()));
    if (fresh) env_obs.emplace_back();
    const auto base = static_cast<std::uint32_t>(obs.size());
    for (std::size_t s = 0; s < t.size(); ++s) {
      obs.push_back(&t.observations[s]);
      if (t.is_train_observation(s)) env_obs[it->second].push_back(base + static_cast<std::uint32_t>(s));
    }
    for (std::size_t s = 0; s + 1 < t.size(); ++s)
      if (t.is_train_transition(s))
        transitions.push_back({base + static_cast<std::uint32_t>(s), base + static_cast<std::uint32_t>(s + 1),
                               ik_class_of(t.actions[s]), it->second});
  }
  if (transitions.empty()) throw std::invalid_argument("train_local: no training transitions");
  // Environments seen through ids that share a name are merged above; the
  // other-environment draw needs at least two with training data.
  std::vector<std::uint32_t> envs_with_data;
  for (std::uint32_t e = 0; e < env_obs.size(); ++e)
    if (!env_obs[e].empty()) envs_with_data.push_back(e);
  const std::size_t num_envs = env_obs.size();

  Rng init_rng(derive_seed(cfg.seed, "init-local"));
  LocalResult res;
  res.backbone = make_backbone(cfg.shape, init_rng);
  res.ik_head = make_ik_head(cfg.shape, init_rng);
  MlpParams& h = res.backbone;
  MlpParams& ik = res.ik_head;
  AdamState adam_h = AdamState::for_params(h), adam_ik = AdamState::for_params(ik);
  Rng rng(derive_seed(cfg.seed, "local"));

  const std::size_t B = cfg.batch_size, K = cfg.negatives_per_anchor;
  const auto n = static_cast<Eigen::Index>(cfg.shape.embedding_dim);
  res.log.columns = {"step", "loss", "contrastive", "cross_entropy", "val_positive_mean", "val_far_fraction",
                     "val_ik_balanced_accuracy"};

  // Pool layout: contiguous segment per environment.
  std::vector<std::size_t> pool_begin(num_envs), pool_size(num_envs);
  {
    std::size_t offset = 0;
    const std::size_t per_env = std::max(K, (B + envs_with_data.size() - 1) / envs_with_data.size());
    for (std::size_t e = 0; e < num_envs; ++e) {
      pool_begin[e] = offset;
      pool_size[e] = env_obs[e].empty() ? 0 : per_env;
      offset += pool_size[e];
    }
  }
  const std::size_t P = pool_begin.back() + pool_size.back();
  const auto cols = static_cast<Eigen::Index>(2 * B + P);

  MatrixXd input(obs_dim, cols), negatives(n, static_cast<Eigen::Index>(K)), dz(n, cols), ce_grad;
  MatrixXd ik_in(2 * n, static_cast<Eigen::Index>(B * (K + 1)));
  std::vector<std::uint32_t> batch(B), pool(P);
  std::vector<Eigen::Index> neg_col(B * K);
  std::vector<int> ik_target(B * (K + 1));
  std::vector<double> ik_weight(B * (K + 1));
  double run_loss = 0.0, run_con = 0.0, run_ce = 0.0;
  std::size_t run_count = 0;

  for (std::size_t step = 1; step <= cfg.steps_local; ++step) {
    for (auto& b : batch) b = static_cast<std::uint32_t>(uniform_index(rng, transitions.size()));
    for (std::size_t e = 0; e < num_envs; ++e)
      for (std::size_t k = 0; k < pool_size[e]; ++k)
        pool[pool_begin[e] + k] = env_obs[e][uniform_index(rng, env_obs[e].size())];
    for (std::size_t b = 0; b < B; ++b) {
      const std::uint32_t own = transitions[batch[b]].env;
      for (std::size_t k = 0; k < K; ++k) {
        std::uint32_t e = own;
        if (envs_with_data.size() > 1 && uniform01(rng) < cfg.cross_env_negative_prob) {
          do e = envs_with_data[uniform_index(rng, envs_with_data.size())];
          while (e == own);
        }
        if (pool_size[e] == 0) e = own;
        neg_col[b * K + k] = static_cast<Eigen::Index>(2 * B + pool_begin[e] + uniform_index(rng, pool_size[e]));
      }
    }
    for (std::size_t b = 0; b < B; ++b) {
      input.col(static_cast<Eigen::Index>(b)) = obs[transitions[batch[b]].from]->values;
      input.col(static_cast<Eigen::Index>(B + b)) = obs[transitions[batch[b]].to]->values;
    }
    for (std::size_t p = 0; p < P; ++p) input.col(static_cast<Eigen::Index>(2 * B + p)) = obs[pool[p]]->values;

    ForwardCache h_cache;
    const MatrixXd z = mlp_forward(h, input, &h_cache);
    dz.setZero();
    double con = 0.0;
    const double inv_b = 1.0 / static_cast<double>(B);
    for (std::size_t b = 0; b < B; ++b) {
      const auto a = static_cast<Eigen::Index>(b), p = static_cast<Eigen::Index>(B + b);
      for (std::size_t k = 0; k < K; ++k) negatives.col(static_cast<Eigen::Index>(k)) = z.col(neg_col[b * K + k]);
      const auto r = contrastive_loss(z.col(a), z.col(p), negatives, nav.m_plus, nav.m_minus);
      con += r.loss * inv_b;
      dz.col(a) += inv_b * r.grad_anchor;
      dz.col(p) += inv_b * r.grad_positive;
      for (std::size_t k = 0; k < K; ++k)
        dz.col(neg_col[b * K + k]) += inv_b * r.grad_negatives.col(static_cast<Eigen::Index>(k));
    }

    // Column b*(K+1) is the positive pair, the next K are negatives. The
    // negatives of one anchor share the weight of its positive, as in the
    // contrastive loss.
    const double pos_weight = cfg.ik_weight / static_cast<double>(B);
    const double neg_weight = pos_weight / static_cast<double>(K);
    for (std::size_t b = 0; b < B; ++b) {
      const auto a = static_cast<Eigen::Index>(b);
      const std::size_t c0 = b * (K + 1);
      ik_in.col(static_cast<Eigen::Index>(c0)) << z.col(a), z.col(static_cast<Eigen::Index>(B + b));
      ik_target[c0] = transitions[batch[b]].label;
      ik_weight[c0] = pos_weight;
      for (std::size_t k = 0; k < K; ++k) {
        ik_in.col(static_cast<Eigen::Index>(c0 + 1 + k)) << z.col(a), z.col(neg_col[b * K + k]);
        ik_target[c0 + 1 + k] = static_cast<int>(IkLabel::NotConnected);
        ik_weight[c0 + 1 + k] = neg_weight;
      }
    }
    ForwardCache ik_cache;
    const MatrixXd logits = mlp_forward(ik, ik_in, &ik_cache);
    const double ce = detail::cross_entropy_columns(logits, ik_target, ik_weight, ce_grad);
    auto ik_back = mlp_backward(ik, ik_cache, ce_grad);
    for (std::size_t b = 0; b < B; ++b) {
      const auto a = static_cast<Eigen::Index>(b);
      const std::size_t c0 = b * (K + 1);
      dz.col(a) += ik_back.input_grad.col(static_cast<Eigen::Index>(c0)).head(n);
      dz.col(static_cast<Eigen::Index>(B + b)) += ik_back.input_grad.col(static_cast<Eigen::Index>(c0)).tail(n);
      for (std::size_t k = 0; k < K; ++k) {
        const auto c = static_cast<Eigen::Index>(c0 + 1 + k);
        dz.col(a) += ik_back.input_grad.col(c).head(n);
        dz.col(neg_col[b * K + k]) += ik_back.input_grad.col(c).tail(n);
      }
    }
    auto h_back = mlp_backward(h, h_cache, dz);
    adam_step(h, h_back.grads, adam_h, cfg.lr);
    adam_step(ik, ik_back.grads, adam_ik, cfg.lr);

    run_loss += con + ce;
    run_con += con;
    run_ce += ce;
    ++run_count;
    if (step % cfg.log_every == 0 || step == cfg.steps_local) {
      const auto vm = evaluate_local(h, ik, trajectories, 0.8 * nav.m_minus, cfg.seed);
      const double c = static_cast<double>(run_count);
      res.log.add({static_cast<double>(step), run_loss / c, run_con / c, run_ce / c, vm.positive_mean,
                   vm.far_fraction, vm.ik_balanced_accuracy});
      if (progress)
        progress("local step " + std::to_string(step) + " loss " + format_double(run_loss / c) + " val_pos " +
                 format_double(vm.positive_mean) + " val_far " + format_double(vm.far_fraction) + " ik_acc " +
                 format_double(vm.ik_balanced_accuracy));
      if (step == cfg.steps_local) res.metrics = vm;
      run_loss = run_con = run_ce = 0.0;
      run_count = 0;
    }
  }
  return res;
}

// ---------------------------------------------------------------- stage 2

/// Recomputes node embeddings and split flags for a graph read from an
/// export, using the trajectories it was built from.
inline void attach_embeddings(TransitionGraph& g, std::span<const Trajectory> trajectories, const MlpParams& backbone) {
  std::vector<Observation> all;
  std::vector<std::uint8_t> train;
  for (const auto& t : trajectories) {
    if (t.env_id != g.env_id()) continue;
    for (std::size_t i = 0; i < t.size(); ++i) {
      all.push_back(t.observations[i]);
      train.push_back(t.is_train_observation(i) ? 1 : 0);
    }
  }
  if (all.size() != g.node_count())
    throw DimensionMismatch("attach_embeddings: graph for " + g.env_id() + " has " + std::to_string(g.node_count()) +
                            " nodes but trajectories hold " + std::to_string(all.size()) + " observations");
  g.node_embeddings = embed_all(backbone, all);
  g.train_node = std::move(train);
}

/// Groups trajectories by environment id (sorted by id).
inline std::map<std::string, std::vector<Trajectory>> group_by_env(std::span<const Trajectory> trajectories) {
  std::map<std::string, std::vector<Trajectory>> out;
  for (const auto& t : trajectories) out[t.env_id].push_back(t);
  return out;
}

// ---------------------------------------------------------------- stage 3

struct ForwardMetrics {
  double val_mse = 0.0;             // mean squared error per coordinate on held-out chain edges
  double embedding_variance = 0.0;  // mean per-coordinate variance of held-out targets
  double closer_fraction = 0.0;     // d(f(x,a), x') < d(x, x') share on held-out chain edges
  std::size_t val_edges = 0;
};

struct ForwardResult {
  MlpParams forward_model;
  MetricsLog log;
  ForwardMetrics metrics;
  std::size_t closed_edges_used = 0;
};

namespace detail {

struct EdgeRef {
  std::uint32_t graph;
  std::uint32_t source;
  std::uint32_t target;
  Action action;
};

inline ForwardMetrics evaluate_forward(const MlpParams& fwd, std::span<const TransitionGraph* const> graphs,
                                       std::span<const EdgeRef> val) {
  ForwardMetrics m;
  m.val_edges = val.size();
  if (val.empty()) return m;
  const Eigen::Index n = graphs.front()->node_embeddings.rows();
  MatrixXd in(n + 3, static_cast<Eigen::Index>(val.size())), target(n, static_cast<Eigen::Index>(val.size()));
  for (std::size_t c = 0; c < val.size(); ++c) {
    const auto& e = val[c];
    const auto& emb = graphs[e.graph]->node_embeddings;
    in.col(static_cast<Eigen::Index>(c)) << emb.col(e.source), action_onehot(e.action);
    target.col(static_cast<Eigen::Index>(c)) = emb.col(e.target);
  }
  const MatrixXd pred = mlp_forward(fwd, in);
  m.val_mse = (pred - target).squaredNorm() / static_cast<double>(pred.size());
  const VectorXd mean = target.rowwise().mean();
  m.embedding_variance = (target.colwise() - mean).squaredNorm() / static_cast<double>(target.size());
  std::size_t closer = 0;
  for (Eigen::Index c = 0; c < pred.cols(); ++c)
    if ((pred.col(c) - target.col(c)).norm() < (in.col(c).head(n) - target.col(c)).norm()) ++closer;
  m.closer_fraction = static_cast<double>(closer) / static_cast<double>(pred.cols());
  return m;
}

}  // namespace detail

/// Fits f(x_i, a_ij) -> x_j on graph edges between training nodes, sampled
/// uniformly across all graphs. Chain edges carry the recorded action and
/// closed edges the head's label. Held-out chain edges are used for metrics.
inline ForwardResult train_forward(std::span<const TransitionGraph* const> graphs, const TrainConfig& cfg,
                                   const ProgressFn& progress = {}) {
  cfg.validate();
  if (graphs.empty()) throw std::invalid_argument("train_forward: no graphs");
  std::vector<detail::EdgeRef> train, val;
  std::size_t closed = 0;
  for (std::uint32_t gi = 0; gi < graphs.size(); ++gi) {
    const auto& g = *graphs[gi];
    if (g.edge_count() == 0) throw std::invalid_argument("train_forward: graph " + g.env_id() + " has no edges");
    if (static_cast<std::size_t>(g.node_embeddings.cols()) != g.node_count() || g.train_node.size() != g.node_count())
      throw ContractViolation("train_forward: graph " + g.env_id() + " lacks node embeddings");
    for (std::uint32_t i = 0; i < g.node_count(); ++i)
      for (const Edge& e : g.edges_from(i)) {
        if (g.train_node[i] && g.train_node[e.target]) {
          train.push_back({gi, i, e.target, e.action});
          if (e.kind == EdgeKind::Closed) ++closed;
        } else if (!g.train_node[i] && !g.train_node[e.target] && e.kind == EdgeKind::Observed) {
          val.push_back({gi, i, e.target, e.action});
        }
      }
  }
  if (train.empty()) throw std::invalid_argument("train_forward: no training edges");
  const Eigen::Index n = graphs.front()->node_embeddings.rows();

  Rng init_rng(derive_seed(cfg.seed, "init-forward"));
  ForwardResult res;
  res.closed_edges_used = closed;
  res.forward_model = make_forward_model(cfg.shape, init_rng);
  MlpParams& f = res.forward_model;
  if (f.input_dim() != n + 3) throw DimensionMismatch("train_forward: embedding size does not match configuration");
  AdamState adam = AdamState::for_params(f);
  Rng rng(derive_seed(cfg.seed, "forward"));
  res.log.columns = {"step", "loss", "val_mse", "embedding_variance", "val_closer_fraction"};

  const auto B = static_cast<Eigen::Index>(cfg.batch_size);
  MatrixXd in(n + 3, B), target(n, B);
  double run = 0.0;
  std::size_t count = 0;
  for (std::size_t step = 1; step <= cfg.steps_forward; ++step) {
    for (Eigen::Index c = 0; c < B; ++c) {
      const auto& e = train[uniform_index(rng, train.size())];
      const auto& emb = graphs[e.graph]->node_embeddings;
      in.col(c) << emb.col(e.source), action_onehot(e.action);
      target.col(c) = emb.col(e.target);
    }
    ForwardCache cache;
    const MatrixXd pred = mlp_forward(f, in, &cache);
    const MatrixXd diff = pred - target;
    const double scale = 1.0 / static_cast<double>(diff.size());
    run += diff.squaredNorm() * scale;
    ++count;
    auto back = mlp_backward(f, cache, 2.0 * scale * diff);
    adam_step(f, back.grads, adam, cfg.lr);
    if (step % cfg.log_every == 0 || step == cfg.steps_forward) {
      const auto vm = detail::evaluate_forward(f, graphs, val);
      res.log.add({static_cast<double>(step), run / static_cast<double>(count), vm.val_mse, vm.embedding_variance,
                   vm.closer_fraction});
      if (progress)
        progress("forward step " + std::to_string(step) + " loss " + format_double(run / static_cast<double>(count)) +
                 " val_mse " + format_double(vm.val_mse) + " var " + format_double(vm.embedding_variance));
      if (step == cfg.steps_forward) res.metrics = vm;
      run = 0.0;
      count = 0;
    }
  }
  return res;
}

// ---------------------------------------------------------------- stage 4

struct GeodesicMetrics {
  double median_relative_error = 0.0;  // median |p - d_G| / max(d_G, 1) over held-out pairs
  double mean_absolute_error = 0.0;
  std::size_t val_pairs = 0;
  std::size_t train_pairs = 0;
};

struct GeodesicResult {
  MlpParams regressor;
  MetricsLog log;
  GeodesicMetrics metrics;
  std::vector<std::uint32_t> val_sources;
};

inline GeodesicMetrics evaluate_geodesic(const MlpParams& regressor, const MatrixXd& emb,
                                         std::span<const GeodesicPair> pairs) {
  GeodesicMetrics m;
  m.val_pairs = pairs.size();
  if (pairs.empty()) return m;
  const Eigen::Index n = emb.rows();
  std::vector<double> rel;
  rel.reserve(pairs.size());
  double abs_sum = 0.0;
  constexpr std::size_t kChunk = 8192;
  for (std::size_t start = 0; start < pairs.size(); start += kChunk) {
    const std::size_t len = std::min(kChunk, pairs.size() - start);
    MatrixXd in(2 * n, static_cast<Eigen::Index>(len));
    for (std::size_t c = 0; c < len; ++c)
      in.col(static_cast<Eigen::Index>(c)) << emb.col(pairs[start + c].source), emb.col(pairs[start + c].target);
    const MatrixXd pred = mlp_forward(regressor, in);
    for (std::size_t c = 0; c < len; ++c) {
      const double d = pairs[start + c].distance;
      const double err = std::abs(pred(0, static_cast<Eigen::Index>(c)) - d);
      abs_sum += err;
      rel.push_back(err / std::max(d, 1.0));
    }
  }
  m.median_relative_error = detail::median(std::move(rel));
  m.mean_absolute_error = abs_sum / static_cast<double>(pairs.size());
  return m;
}

/// Regresses p+(x_s, x_t) onto Dijkstra distances. Source nodes are split
/// into training and held-out sets; the output bias starts at the value
/// whose softplus is the mean training distance.
inline GeodesicResult train_geodesic(const TransitionGraph& g, const TrainConfig& cfg, const ProgressFn& progress = {},
                                     std::size_t max_val_pairs = 20000) {
  cfg.validate();
  if (static_cast<std::size_t>(g.node_embeddings.cols()) != g.node_count())
    throw ContractViolation("train_geodesic: graph " + g.env_id() + " lacks node embeddings");
  const auto set = sample_training_pairs(g, cfg.num_sources, derive_seed(cfg.seed, "pairs:" + g.env_id()),
                                         cfg.threads);
  if (set.pairs.empty()) throw std::invalid_argument("train_geodesic: empty pair set for " + g.env_id());

  GeodesicResult res;
  Rng rng(derive_seed(cfg.seed, "geodesic:" + g.env_id()));
  std::vector<std::uint32_t> sources = set.sources;
  std::shuffle(sources.begin(), sources.end(), rng);
  std::size_t n_val = 0;
  if (sources.size() >= 2)
    n_val = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(cfg.val_fraction * sources.size())), 1,
                                    sources.size() - 1);
  res.val_sources.assign(sources.begin(), sources.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::sort(res.val_sources.begin(), res.val_sources.end());
  std::vector<GeodesicPair> train, val;
  for (const auto& p : set.pairs)
    (std::binary_search(res.val_sources.begin(), res.val_sources.end(), p.source) ? val : train).push_back(p);
  if (val.size() > max_val_pairs) {
    Rng pick(derive_seed(cfg.seed, "geodesic-val:" + g.env_id()));
    std::vector<GeodesicPair> sub;
    sub.reserve(max_val_pairs);
    std::sample(val.begin(), val.end(), std::back_inserter(sub), max_val_pairs, pick);
    val = std::move(sub);
  }

  Rng init_rng(derive_seed(cfg.seed, "init-geodesic:" + g.env_id()));
  res.regressor = make_regressor(cfg.shape, init_rng);
  MlpParams& p = res.regressor;
  double mean_d = 0.0;
  for (const auto& q : train) mean_d += q.distance;
  mean_d /= static_cast<double>(train.size());
  p.layers.back().biases.setConstant(inverse_softplus(std::max(mean_d, 1e-3)));
  AdamState adam = AdamState::for_params(p);
  res.log.columns = {"step", "loss", "val_median_relative_error", "val_mean_absolute_error"};

  const MatrixXd& emb = g.node_embeddings;
  const Eigen::Index n = emb.rows();
  const auto B = static_cast<Eigen::Index>(cfg.batch_size);
  MatrixXd in(2 * n, B);
  VectorXd target(B);
  double run = 0.0;
  std::size_t count = 0;
  for (std::size_t step = 1; step <= cfg.steps_geodesic; ++step) {
    for (Eigen::Index c = 0; c < B; ++c) {
      const auto& q = train[uniform_index(rng, train.size())];
      in.col(c) << emb.col(q.source), emb.col(q.target);
      target[c] = q.distance;
    }
    ForwardCache cache;
    const MatrixXd pred = mlp_forward(p, in, &cache);
    const MatrixXd diff = pred - target.transpose();
    run += diff.squaredNorm() / static_cast<double>(B);
    ++count;
    auto back = mlp_backward(p, cache, (2.0 / static_cast<double>(B)) * diff);
    adam_step(p, back.grads, adam, cfg.lr);
    if (step % cfg.log_every == 0 || step == cfg.steps_geodesic) {
      auto vm = evaluate_geodesic(p, emb, val);
      vm.train_pairs = train.size();
      res.log.add({static_cast<double>(step), run / static_cast<double>(count), vm.median_relative_error,
                   vm.mean_absolute_error});
      if (progress)
        progress("geodesic[" + g.env_id() + "] step " + std::to_string(step) + " loss " +
                 format_double(run / static_cast<double>(count)) + " val_median_rel " +
                 format_double(vm.median_relative_error));
      if (step == cfg.steps_geodesic) res.metrics = vm;
      run = 0.0;
      count = 0;
    }
  }
  return res;
}

// ---------------------------------------------------------------- pipeline

struct PipelineResult {
  SystemBundle bundle;
  std::map<std::string, TransitionGraph> graphs;
  std::map<std::string, GraphBuildStats> graph_stats;
  LocalResult local;
  ForwardResult forward;
  std::map<std::string, GeodesicResult> geodesic;
};

inline GraphOptions graph_options(const TrainConfig& cfg) {
  GraphOptions o;
  o.candidate_radius = cfg.candidate_radius;
  o.exhaustive = cfg.exhaustive_graph;
  return o;
}

/// Runs all four stages in order. The backbone and both kinematics heads are
/// shared; one regressor is trained per environment id.
inline PipelineResult train_pipeline(std::span<const Trajectory> trajectories, const TrainConfig& cfg,
                                     const NavConfig& nav, const ProgressFn& progress = {}) {
  if (trajectories.empty()) throw std::invalid_argument("train_pipeline: no trajectories");
  PipelineResult out;
  out.local = train_local(trajectories, cfg, nav, progress);
  const auto by_env = group_by_env(trajectories);
  for (const auto& [env, trajs] : by_env) {
    GraphBuildStats stats;
    out.graphs.emplace(env, build_graph(trajs, out.local.backbone, out.local.ik_head, graph_options(cfg), &stats));
    out.graph_stats[env] = stats;
    if (progress)
      progress("graph[" + env + "] nodes " + std::to_string(out.graphs.at(env).node_count()) + " closed edges " +
               std::to_string(stats.closed_edges) + " candidates " + std::to_string(stats.candidates));
  }
  std::vector<const TransitionGraph*> graph_ptrs;
  for (const auto& [env, g] : out.graphs) graph_ptrs.push_back(&g);
  out.forward = train_forward(graph_ptrs, cfg, progress);
  for (const auto& [env, g] : out.graphs) out.geodesic.emplace(env, train_geodesic(g, cfg, progress));

  out.bundle.backbone = out.local.backbone;
  out.bundle.ik_head = out.local.ik_head;
  out.bundle.forward_model = out.forward.forward_model;
  for (const auto& [env, r] : out.geodesic) out.bundle.regressors.emplace(env, r.regressor);
  out.bundle.nav = nav;
  out.bundle.validate();
  return out;
}

}  // namespace o4a
