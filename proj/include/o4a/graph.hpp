#pragma once
// Training-time transition graph: chain edges from the recorded data plus
// loop-closure edges proposed by the inverse kinematics head, all weighted
// by the local metric. Dijkstra over this graph supervises the geodesic
// regressor; the graph itself is not needed for navigation.

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <numeric>
#include <queue>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "o4a/config.hpp"
#include "o4a/models.hpp"
#include "o4a/parallel.hpp"
#include "o4a/sim.hpp"

namespace o4a {

enum class EdgeKind : std::uint8_t { Observed = 0, Closed = 1 };

inline std::string_view edge_kind_name(EdgeKind k) { return k == EdgeKind::Observed ? "OBSERVED" : "CLOSED"; }

struct Edge {
  std::uint32_t target = 0;
  double weight = 0.0;
  Action action = Action::Forward;
  EdgeKind kind = EdgeKind::Observed;
};

class TransitionGraph {
 public:
  TransitionGraph() = default;
  TransitionGraph(std::string env_id, std::size_t node_count)
      : env_id_(std::move(env_id)), adjacency_(node_count) {}

  const std::string& env_id() const noexcept { return env_id_; }
  std::size_t node_count() const noexcept { return adjacency_.size(); }
  std::span<const Edge> edges_from(std::size_t node) const { return adjacency_.at(node); }

  std::size_t edge_count() const noexcept {
    std::size_t n = 0;
    for (const auto& a : adjacency_) n += a.size();
    return n;
  }
  std::size_t edge_count(EdgeKind kind) const noexcept {
    std::size_t n = 0;
    for (const auto& a : adjacency_)
      n += static_cast<std::size_t>(std::count_if(a.begin(), a.end(), [kind](const Edge& e) { return e.kind == kind; }));
    return n;
  }

  void add_edge(std::size_t source, const Edge& e) {
    if (source >= node_count() || e.target >= node_count()) throw std::out_of_range("add_edge: node out of range");
    if (source == e.target) throw ContractViolation("add_edge: self-loops are not allowed");
    if (!(e.weight >= 0.0) || !std::isfinite(e.weight))
      throw ContractViolation("add_edge: weight must be finite and non-negative");
    if (!is_move(e.action)) throw ContractViolation("add_edge: edge action must be a move action");
    adjacency_[source].push_back(e);
  }

  /// Embedding of every node (one column per node); empty when loaded from
  /// an export without re-embedding.
  MatrixXd node_embeddings;
  /// 1 for nodes inside their trajectory's training segment.
  std::vector<std::uint8_t> train_node;

 private:
  std::string env_id_;
  std::vector<std::vector<Edge>> adjacency_;
};

struct GraphOptions {
  double candidate_radius = 10.0;
  bool exhaustive = false;
  std::size_t classify_batch = 4096;
};

struct GraphBuildStats {
  std::size_t candidates = 0;
  std::size_t closed_edges = 0;
};

/// Builds the graph for one environment. Chain edges t -> t+1 carry the
/// recorded action. Every other ordered pair (i, j) (all of them when
/// `exhaustive`, else those with d_local < candidate_radius) is classified by
/// the inverse kinematics head in index order and becomes a CLOSED edge when
/// the predicted label is a move action. No produced edge is ever removed.
inline TransitionGraph build_graph(std::span<const Trajectory> trajectories, const MlpParams& backbone,
                                   const MlpParams& ik_head, const GraphOptions& opt = {},
                                   GraphBuildStats* stats = nullptr) {
  if (trajectories.empty()) throw std::invalid_argument("build_graph: empty trajectory list");
  const std::string env_id = trajectories.front().env_id;
  std::vector<Observation> all;
  std::vector<std::uint8_t> train;
  std::vector<std::size_t> offsets;
  for (const auto& t : trajectories) {
    if (t.env_id != env_id) throw std::invalid_argument("build_graph: trajectories from different environments");
    offsets.push_back(all.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
      all.push_back(t.observations[i]);
      train.push_back(t.is_train_observation(i) ? 1 : 0);
    }
  }
  const std::size_t n = all.size();
  TransitionGraph g(env_id, n);
  g.node_embeddings = embed_all(backbone, all);
  g.train_node = std::move(train);
  const MatrixXd& emb = g.node_embeddings;

  // successor[i] = chain successor of node i, or n when i ends a trajectory.
  std::vector<std::size_t> successor(n, n);
  for (std::size_t k = 0; k < trajectories.size(); ++k) {
    const auto& t = trajectories[k];
    for (std::size_t s = 0; s + 1 < t.size(); ++s) {
      const std::size_t i = offsets[k] + s;
      successor[i] = i + 1;
      g.add_edge(i, {static_cast<std::uint32_t>(i + 1), local_distance(emb.col(i), emb.col(i + 1)),
                     t.actions[s], EdgeKind::Observed});
    }
  }

  const Eigen::Index dim = emb.rows();
  std::vector<std::pair<std::uint32_t, std::uint32_t>> pending;
  std::vector<double> pending_dist;
  GraphBuildStats st;
  auto flush = [&] {
    if (pending.empty()) return;
    MatrixXd in(2 * dim, static_cast<Eigen::Index>(pending.size()));
    for (std::size_t k = 0; k < pending.size(); ++k) {
      in.col(static_cast<Eigen::Index>(k)).head(dim) = emb.col(pending[k].first);
      in.col(static_cast<Eigen::Index>(k)).tail(dim) = emb.col(pending[k].second);
    }
    const MatrixXd logits = mlp_forward(ik_head, in);
    for (std::size_t k = 0; k < pending.size(); ++k) {
      const auto label = static_cast<IkLabel>(argmax_first(logits.col(static_cast<Eigen::Index>(k))));
      if (!ik_is_move(label)) continue;
      g.add_edge(pending[k].first, {pending[k].second, pending_dist[k], ik_action(label), EdgeKind::Closed});
      ++st.closed_edges;
    }
    st.candidates += pending.size();
    pending.clear();
    pending_dist.clear();
  };

  const VectorXd sq = emb.colwise().squaredNorm().transpose();
  const double r = opt.candidate_radius;
  // Gram-matrix screen with slack, then the exact distance decides.
  const double screen = (r + 1e-6) * (r + 1e-6) + 1e-6 * (1.0 + sq.maxCoeff());
  constexpr Eigen::Index kBlock = 256;
  for (Eigen::Index b0 = 0; b0 < static_cast<Eigen::Index>(n); b0 += kBlock) {
    const Eigen::Index len = std::min<Eigen::Index>(kBlock, static_cast<Eigen::Index>(n) - b0);
    MatrixXd d2;
    if (!opt.exhaustive) {
      d2 = -2.0 * emb.middleCols(b0, len).transpose() * emb;
      d2.colwise() += sq.segment(b0, len);
      d2.rowwise() += sq.transpose();
    }
    for (Eigen::Index bi = 0; bi < len; ++bi) {
      const auto i = static_cast<std::size_t>(b0 + bi);
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i || j == successor[i]) continue;
        if (!opt.exhaustive && d2(bi, static_cast<Eigen::Index>(j)) >= screen) continue;
        const double d = local_distance(emb.col(static_cast<Eigen::Index>(i)), emb.col(static_cast<Eigen::Index>(j)));
        if (!opt.exhaustive && !(d < r)) continue;
        pending.emplace_back(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j));
        pending_dist.push_back(d);
        if (pending.size() >= opt.classify_batch) flush();
      }
    }
  }
  flush();
  if (stats) *stats = st;
  return g;
}

/// Single-source shortest paths; unreachable nodes get +infinity.
inline std::vector<double> dijkstra(const TransitionGraph& g, std::size_t source) {
  if (source >= g.node_count()) throw std::out_of_range("dijkstra: source out of range");
  std::vector<double> dist(g.node_count(), kInfinity);
  using Item = std::pair<double, std::uint32_t>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> open;
  dist[source] = 0.0;
  open.push({0.0, static_cast<std::uint32_t>(source)});
  while (!open.empty()) {
    auto [d, u] = open.top();
    open.pop();
    if (d > dist[u]) continue;
    for (const Edge& e : g.edges_from(u)) {
      const double nd = d + e.weight;
      if (nd < dist[e.target]) {
        dist[e.target] = nd;
        open.push({nd, e.target});
      }
    }
  }
  return dist;
}

inline constexpr std::size_t kBruteForceMaxNodes = 12;

/// Minimum weight over all simple paths from i to j by exhaustive DFS.
inline double brute_force_shortest(const TransitionGraph& g, std::size_t i, std::size_t j) {
  if (g.node_count() > kBruteForceMaxNodes)
    throw std::invalid_argument("brute_force_shortest: graph exceeds 12 nodes");
  if (i >= g.node_count() || j >= g.node_count()) throw std::out_of_range("brute_force_shortest: node out of range");
  if (i == j) return 0.0;
  double best = kInfinity;
  std::vector<char> on_path(g.node_count(), 0);
  auto dfs = [&](auto&& self, std::size_t u, double len) -> void {
    if (u == j) {
      best = std::min(best, len);
      return;
    }
    on_path[u] = 1;
    for (const Edge& e : g.edges_from(u))
      if (!on_path[e.target]) self(self, e.target, len + e.weight);
    on_path[u] = 0;
  };
  dfs(dfs, i, 0.0);
  return best;
}

struct GeodesicPair {
  std::uint32_t source = 0;
  std::uint32_t target = 0;
  double distance = 0.0;
};

struct GeodesicPairSet {
  std::vector<std::uint32_t> sources;  // ascending
  std::vector<GeodesicPair> pairs;     // grouped by source, targets ascending
};

/// Dijkstra from `num_sources` distinct, uniformly drawn source nodes
/// (every node when num_sources >= node count); keeps all finite pairs.
inline GeodesicPairSet sample_training_pairs(const TransitionGraph& g, std::size_t num_sources, std::uint64_t seed,
                                             std::size_t threads = 1) {
  if (num_sources < 1) throw std::invalid_argument("sample_training_pairs: num_sources must be >= 1");
  GeodesicPairSet set;
  std::vector<std::uint32_t> nodes(g.node_count());
  std::iota(nodes.begin(), nodes.end(), 0u);
  if (num_sources < nodes.size()) {
    Rng rng(derive_seed(seed, "geodesic-sources"));
    std::shuffle(nodes.begin(), nodes.end(), rng);
    nodes.resize(num_sources);
    std::sort(nodes.begin(), nodes.end());
  }
  set.sources = nodes;
  std::vector<std::vector<GeodesicPair>> per_source(nodes.size());
  parallel_for(nodes.size(), threads, [&](std::size_t k) {
    const auto dist = dijkstra(g, nodes[k]);
    auto& out = per_source[k];
    for (std::size_t t = 0; t < dist.size(); ++t)
      if (std::isfinite(dist[t])) out.push_back({nodes[k], static_cast<std::uint32_t>(t), dist[t]});
  });
  std::size_t total = 0;
  for (const auto& v : per_source) total += v.size();
  set.pairs.reserve(total);
  for (auto& v : per_source) set.pairs.insert(set.pairs.end(), v.begin(), v.end());
  return set;
}

// ---------------------------------------------------------------- export

/// Line format: header "nodes <N> <env_id>", then one "i j weight action kind"
/// line per edge in adjacency order. Weights use round-trip precision.
inline void write_graph_export(std::ostream& out, const TransitionGraph& g) {
  out << "nodes " << g.node_count() << ' ' << g.env_id() << '\n';
  for (std::size_t i = 0; i < g.node_count(); ++i)
    for (const Edge& e : g.edges_from(i))
      out << i << ' ' << e.target << ' ' << format_double(e.weight) << ' ' << static_cast<int>(e.action) << ' '
          << edge_kind_name(e.kind) << '\n';
}

inline TransitionGraph read_graph_export(std::istream& in) {
  std::string line, word, env;
  std::size_t n = 0;
  std::getline(in, line);
  std::istringstream header(line);
  if (!(header >> word >> n) || word != "nodes") throw FormatError("graph export: missing 'nodes' header");
  header >> env;
  TransitionGraph g(env, n);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::size_t i = 0, j = 0;
    std::string weight, kind;
    int action = 0;
    if (!(ls >> i >> j >> weight >> action >> kind)) throw FormatError("graph export: malformed edge line: " + line);
    if (action < 1 || action > 3) throw FormatError("graph export: invalid action code");
    EdgeKind k;
    if (kind == "OBSERVED") k = EdgeKind::Observed;
    else if (kind == "CLOSED") k = EdgeKind::Closed;
    else throw FormatError("graph export: invalid edge kind " + kind);
    double w = 0.0;
    auto [ptr, ec] = std::from_chars(weight.data(), weight.data() + weight.size(), w);
    if (ec != std::errc{}) throw FormatError("graph export: invalid weight " + weight);
    g.add_edge(i, {static_cast<std::uint32_t>(j), w, static_cast<Action>(action), k});
  }
  return g;
}

/// CSV of hidden oracle positions per node, for external visualisation.
inline void write_node_positions_csv(std::ostream& out, std::span<const Pose> poses) {
  out << "node,x,y,heading\n";
  for (std::size_t i = 0; i < poses.size(); ++i)
    out << i << ',' << format_double(poses[i].x) << ',' << format_double(poses[i].y) << ',' << poses[i].heading << '\n';
}

}  // namespace o4a
