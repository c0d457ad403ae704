#pragma once
// Graph-free navigation by greedy descent on the learned potential, plus the
// uniform random baseline with oracle stopping.

#include <array>
#include <cmath>
#include <deque>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "o4a/config.hpp"
#include "o4a/models.hpp"
#include "o4a/sim.hpp"

namespace o4a {

enum class Ablation : std::uint8_t { Full = 0, NoRepulsor = 1, NoAttractor = 2 };

inline std::string_view ablation_name(Ablation a) noexcept {
  switch (a) {
    case Ablation::Full: return "full";
    case Ablation::NoRepulsor: return "no-repulsor";
    case Ablation::NoAttractor: return "no-attractor";
  }
  return "?";
}

inline Ablation ablation_from_name(std::string_view s) {
  if (s == "full") return Ablation::Full;
  if (s == "no-repulsor" || s == "no_repulsor") return Ablation::NoRepulsor;
  if (s == "no-attractor" || s == "no_attractor") return Ablation::NoAttractor;
  throw std::invalid_argument("unknown ablation '" + std::string(s) + "'");
}

/// FIFO buffer of visited embeddings; the oldest entry is evicted first.
class RepulsorBuffer {
 public:
  explicit RepulsorBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity_ == 0) throw std::invalid_argument("RepulsorBuffer: capacity must be positive");
  }

  void push(Embedding x) {
    if (items_.size() == capacity_) items_.pop_front();
    items_.push_back(std::move(x));
  }
  std::size_t size() const noexcept { return items_.size(); }
  std::size_t capacity() const noexcept { return capacity_; }
  bool empty() const noexcept { return items_.empty(); }
  const Embedding& operator[](std::size_t i) const { return items_.at(i); }
  std::vector<Embedding> contents() const { return {items_.begin(), items_.end()}; }

  /// Sum of repulsors in insertion order.
  double repulsion(const Eigen::Ref<const VectorXd>& x, double m_r) const {
    double s = 0.0;
    for (const auto& b : items_) s += repulsor(x, b, m_r);
    return s;
  }

 private:
  std::size_t capacity_;
  std::deque<Embedding> items_;
};

struct ActionScores {
  std::array<double, 3> attractor{};  // indexed by move_index
  std::array<double, 3> repulsion{};
  std::array<double, 3> potential{};
  std::array<bool, 3> candidate{};
};

struct Selection {
  Action action = Action::Forward;
  ActionScores scores;
};

/// Argmin over the free set of the potential at f(x, a); ties go to the
/// earliest action in FORWARD, ROTATE_RIGHT, ROTATE_LEFT order.
inline Selection select_action(const Eigen::Ref<const VectorXd>& x, const Eigen::Ref<const VectorXd>& goal,
                               const RepulsorBuffer& buffer, const ActionSet& free, const SystemBundle& bundle,
                               const std::string& env_id, Ablation ablation = Ablation::Full) {
  std::vector<Action> cands;
  for (Action a : kMoveActions)
    if (free.contains(a)) cands.push_back(a);
  if (cands.empty()) throw std::invalid_argument("select_action: empty free action set");
  Selection sel;
  sel.action = cands.front();
  if (cands.size() == 1) {
    sel.scores.candidate[static_cast<std::size_t>(move_index(sel.action))] = true;
    return sel;
  }
  const Eigen::Index n = x.size();
  MatrixXd fk_in(n + 3, static_cast<Eigen::Index>(cands.size()));
  for (std::size_t c = 0; c < cands.size(); ++c) fk_in.col(static_cast<Eigen::Index>(c)) << x, action_onehot(cands[c]);
  const MatrixXd next = mlp_forward(bundle.forward_model, fk_in);
  VectorXd attract = VectorXd::Zero(next.cols());
  if (ablation != Ablation::NoAttractor) {
    MatrixXd reg_in(2 * n, next.cols());
    for (Eigen::Index c = 0; c < next.cols(); ++c) reg_in.col(c) << next.col(c), goal;
    attract = mlp_forward(bundle.regressor(env_id), reg_in).row(0).transpose();
  }
  double best = kInfinity;
  for (std::size_t c = 0; c < cands.size(); ++c) {
    const auto k = static_cast<std::size_t>(move_index(cands[c]));
    const double rep = ablation == Ablation::NoRepulsor
                           ? 0.0
                           : buffer.repulsion(next.col(static_cast<Eigen::Index>(c)), bundle.nav.m_r);
    const double pot = attract[static_cast<Eigen::Index>(c)] + rep;
    sel.scores.candidate[k] = true;
    sel.scores.attractor[k] = attract[static_cast<Eigen::Index>(c)];
    sel.scores.repulsion[k] = rep;
    sel.scores.potential[k] = pot;
    if (pot < best) {
      best = pot;
      sel.action = cands[c];
    }
  }
  return sel;
}

inline bool should_stop(const Eigen::Ref<const VectorXd>& x, const Eigen::Ref<const VectorXd>& goal,
                        double stop_thresh) {
  return local_distance(x, goal) <= stop_thresh;
}

struct EpisodeResult {
  bool success = false;
  bool soft_success = false;
  std::size_t steps_taken = 0;
  std::size_t forward_steps = 0;
  std::size_t rotate_steps = 0;
  bool collided_ever = false;
  double agent_path_length_m = 0.0;
  double oracle_shortest_m = 0.0;
  double final_distance_to_goal_m = 0.0;
  bool stop_called = false;
};

struct TraceRow {
  std::size_t step = 0;
  Action action = Action::Stop;
  double d_h_to_goal = 0.0;
  double attractor = 0.0;
  double repulsor_sum = 0.0;
  Pose oracle_pose;  // evaluation only
  ActionScores scores;
};

inline void write_trace_csv(std::ostream& out, const std::vector<TraceRow>& rows) {
  out << "step,action,d_h_to_goal,attractor,repulsor_sum,oracle_x,oracle_y,heading\n";
  for (const auto& r : rows)
    out << r.step << ',' << action_name(r.action) << ',' << format_double(r.d_h_to_goal) << ','
        << format_double(r.attractor) << ',' << format_double(r.repulsor_sum) << ','
        << format_double(r.oracle_pose.x) << ',' << format_double(r.oracle_pose.y) << ',' << r.oracle_pose.heading
        << '\n';
}

/// Ground-truth distance to a fixed goal, used only to fill evaluation
/// fields and by the random baseline's oracle stop.
class GoalOracle {
 public:
  GoalOracle(const EnvMap& env, const Pose& goal) : env_(&env) {
    require_valid_pose(env, goal, "goal oracle");
    auto [gx, gy] = env.cell_of(goal.x, goal.y);
    field_ = GridDistanceField::compute(env, gx, gy);
  }
  double distance(const Pose& p) const {
    auto [x, y] = env_->cell_of(p.x, p.y);
    return field_.at(x, y);
  }

 private:
  const EnvMap* env_;
  GridDistanceField field_;
};

struct EpisodeOptions {
  double noise_sigma = 0.0;
  int rays = kDefaultRays;
  std::uint64_t noise_seed = 0;
  std::vector<TraceRow>* trace = nullptr;
};

namespace detail {

struct EpisodeTracker {
  const GoalOracle& oracle;
  EpisodeResult r;
  double min_distance = kInfinity;

  EpisodeTracker(const GoalOracle& o, const Pose& start) : oracle(o) {
    r.oracle_shortest_m = oracle.distance(start);
    observe_pose(start);
  }
  void observe_pose(const Pose& p) {
    r.final_distance_to_goal_m = oracle.distance(p);
    min_distance = std::min(min_distance, r.final_distance_to_goal_m);
  }
  void record_step(Action a, const StepResult& s) {
    ++r.steps_taken;
    if (a == Action::Forward) {
      ++r.forward_steps;
      if (!s.collided) r.agent_path_length_m += kForwardStep;
    } else {
      ++r.rotate_steps;
    }
    r.collided_ever = r.collided_ever || s.collided;
    observe_pose(s.pose);
  }
  EpisodeResult finish(double success_radius) {
    r.soft_success = min_distance <= success_radius;
    r.success = r.stop_called && r.final_distance_to_goal_m <= success_radius;
    return r;
  }
};

}  // namespace detail

/// Greedy potential descent: stop when the local metric to the goal is
/// within the threshold, otherwise take the free action whose predicted
/// next embedding has the lowest potential. Pose is read only to fill
/// evaluation fields.
inline EpisodeResult navigate(const EnvMap& env, const Pose& start, const Observation& goal_obs, const Pose& goal_pose,
                              const SystemBundle& bundle, const NavConfig& nav, Ablation ablation,
                              const EpisodeOptions& opt = {}) {
  require_valid_pose(env, start, "navigate");
  nav.validate();
  if (ablation != Ablation::NoAttractor) (void)bundle.regressor(env.env_id());
  const GoalOracle oracle(env, goal_pose);
  detail::EpisodeTracker track(oracle, start);
  Rng noise(derive_seed(opt.noise_seed, "nav-noise"));

  Pose pose = start;
  Embedding x = embed(bundle.backbone, observe(env, pose, opt.noise_sigma, &noise, opt.rays));
  const Embedding goal = embed(bundle.backbone, goal_obs);
  RepulsorBuffer buffer(nav.buffer_capacity);
  buffer.push(x);

  auto attractor_at = [&](const Eigen::Ref<const VectorXd>& v) {
    return ablation == Ablation::NoAttractor ? 0.0 : geodesic_predict(bundle.regressor(env.env_id()), v, goal);
  };
  auto repulsion_at = [&](const Eigen::Ref<const VectorXd>& v) {
    return ablation == Ablation::NoRepulsor ? 0.0 : buffer.repulsion(v, nav.m_r);
  };

  while (true) {
    const double d_h = local_distance(x, goal);
    const bool stop = d_h <= nav.stop_thresh;
    if (stop || track.r.steps_taken >= nav.max_steps) {
      track.r.stop_called = stop;
      if (opt.trace && stop)
        opt.trace->push_back({track.r.steps_taken, Action::Stop, d_h, attractor_at(x), repulsion_at(x), pose, {}});
      break;
    }
    const ActionSet free = scan_free_actions(env, pose);
    const Selection sel = select_action(x, goal, buffer, free, bundle, env.env_id(), ablation);
    if (opt.trace) {
      const auto k = static_cast<std::size_t>(move_index(sel.action));
      opt.trace->push_back(
          {track.r.steps_taken, sel.action, d_h, sel.scores.attractor[k], sel.scores.repulsion[k], pose, sel.scores});
    }
    const StepResult s = step(env, pose, sel.action);
    track.record_step(sel.action, s);
    pose = s.pose;
    x = embed(bundle.backbone, observe(env, pose, opt.noise_sigma, &noise, opt.rays));
    buffer.push(x);
  }
  return track.finish(nav.success_radius_m);
}

/// Uniform choice over the free set each step; stops by oracle distance.
inline EpisodeResult run_random_agent(const EnvMap& env, const Pose& start, const Pose& goal_pose,
                                      const NavConfig& nav, std::uint64_t seed) {
  require_valid_pose(env, start, "run_random_agent");
  nav.validate();
  const GoalOracle oracle(env, goal_pose);
  detail::EpisodeTracker track(oracle, start);
  Rng rng(derive_seed(seed, "random-agent"));
  Pose pose = start;
  while (true) {
    if (oracle.distance(pose) <= nav.success_radius_m) {
      track.r.stop_called = true;
      break;
    }
    if (track.r.steps_taken >= nav.max_steps) break;
    const auto free = scan_free_actions(env, pose).to_vector();
    const Action a = free[uniform_index(rng, free.size())];
    const StepResult s = step(env, pose, a);
    track.record_step(a, s);
    pose = s.pose;
  }
  return track.finish(nav.success_radius_m);
}

}  // namespace o4a
