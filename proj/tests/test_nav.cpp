#include <gtest/gtest.h>

#include <sstream>

#include "o4a/maps.hpp"
#include "o4a/nav.hpp"
#include "test_util.hpp"

using namespace o4a;

namespace {

SystemBundle random_bundle(std::uint64_t seed, const std::string& env = "room") {
  Rng rng(seed);
  ModelShape s;
  SystemBundle b;
  b.backbone = make_backbone(s, rng);
  b.ik_head = make_ik_head(s, rng);
  b.forward_model = make_forward_model(s, rng);
  b.regressors.emplace(env, make_regressor(s, rng));
  return b;
}

VectorXd random_vec(Rng& rng, Eigen::Index n, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  return VectorXd::NullaryExpr(n, [&] { return d(rng); });
}

VectorXd axis(double d, Eigen::Index n = 16) {
  VectorXd v = VectorXd::Zero(n);
  v[0] = d;
  return v;
}

const ActionSet kAll = ActionSet::of({Action::Forward, Action::RotateRight, Action::RotateLeft});

}  // namespace

TEST(RepulsorBuffer, FifoEviction) {
  RepulsorBuffer b(3);
  for (int i = 0; i < 5; ++i) b.push(axis(i));
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[0][0], 2.0);
  EXPECT_EQ(b[2][0], 4.0);
  EXPECT_THROW(RepulsorBuffer(0), std::invalid_argument);
}

TEST(RepulsorBuffer, RepulsionSumsRepulsors) {
  RepulsorBuffer b(10);
  b.push(axis(0.5));
  b.push(axis(1.5));
  b.push(axis(9.0));
  EXPECT_DOUBLE_EQ(b.repulsion(axis(0.0), 2.5), 2.0 + 1.0);
}

TEST(SelectAction, SingleCandidateIsReturned) {
  const auto b = random_bundle(1);
  Rng rng(2);
  RepulsorBuffer buf(5);
  for (int i = 0; i < 20; ++i) {
    const VectorXd x = random_vec(rng, 16), g = random_vec(rng, 16);
    EXPECT_EQ(select_action(x, g, buf, ActionSet::of({Action::RotateLeft}), b, "room").action, Action::RotateLeft);
  }
}

TEST(SelectAction, TiesFollowCanonicalOrder) {
  auto b = random_bundle(3);
  for (auto& l : b.forward_model.layers) {
    l.weights.setZero();
    l.biases.setZero();
  }
  RepulsorBuffer buf(5);
  const VectorXd x = axis(1.0), g = axis(4.0);
  EXPECT_EQ(select_action(x, g, buf, kAll, b, "room").action, Action::Forward);
  EXPECT_EQ(select_action(x, g, buf, ActionSet::of({Action::RotateRight, Action::RotateLeft}), b, "room").action,
            Action::RotateRight);
}

TEST(SelectAction, EmptyFreeSetThrows) {
  const auto b = random_bundle(4);
  RepulsorBuffer buf(5);
  EXPECT_THROW(select_action(axis(0), axis(1), buf, ActionSet{}, b, "room"), std::invalid_argument);
  EXPECT_THROW(select_action(axis(0), axis(1), buf, ActionSet::of({Action::Stop}), b, "room"), std::invalid_argument);
}

TEST(SelectAction, IsArgminOfTotalPotentialAtPredictedStates) {
  const auto b = random_bundle(5);
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const VectorXd x = random_vec(rng, 16), g = random_vec(rng, 16);
    RepulsorBuffer buf(50);
    for (int i = 0; i < 10; ++i) buf.push(x + random_vec(rng, 16, 0.3));
    const auto sel = select_action(x, g, buf, kAll, b, "room");
    const auto contents = buf.contents();
    double best = kInfinity;
    Action arg = Action::Stop;
    for (Action a : kMoveActions) {
      const double p = total_potential(forward_kinematics(b.forward_model, x, a), g, contents, b, "room");
      EXPECT_NEAR(sel.scores.potential[static_cast<std::size_t>(move_index(a))], p, 1e-12);
      if (p < best) {
        best = p;
        arg = a;
      }
    }
    EXPECT_EQ(sel.action, arg);
  }
}

TEST(SelectAction, AblationsDropTheirTerm) {
  const auto b = random_bundle(7);
  Rng rng(8);
  const VectorXd x = random_vec(rng, 16), g = random_vec(rng, 16);
  RepulsorBuffer buf(50);
  for (Action a : kMoveActions) buf.push(forward_kinematics(b.forward_model, x, a));
  const auto nr = select_action(x, g, buf, kAll, b, "room", Ablation::NoRepulsor);
  const auto na = select_action(x, g, buf, kAll, b, "room", Ablation::NoAttractor);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(nr.scores.repulsion[k], 0.0);
    EXPECT_EQ(na.scores.attractor[k], 0.0);
    EXPECT_GT(na.scores.repulsion[k], 0.0);
  }
  // NoAttractor never needs a regressor.
  EXPECT_NO_THROW(select_action(x, g, buf, kAll, b, "elsewhere", Ablation::NoAttractor));
  EXPECT_THROW(select_action(x, g, buf, kAll, b, "elsewhere"), std::out_of_range);
}

TEST(ShouldStop, InclusiveThreshold) {
  EXPECT_TRUE(should_stop(axis(0), axis(0), 3.5));
  EXPECT_TRUE(should_stop(axis(0), axis(3.5), 3.5));
  EXPECT_FALSE(should_stop(axis(0), axis(std::nextafter(3.5, 4.0)), 3.5));
  EXPECT_FALSE(should_stop(axis(0), axis(10), 3.5));
}

TEST(Navigate, GoalAtStartStopsImmediately) {
  const auto env = test::open_room(30, 30);
  const auto b = random_bundle(9);
  const Pose start{3.0, 3.0, 5};
  std::vector<TraceRow> trace;
  EpisodeOptions opt;
  opt.trace = &trace;
  const auto r = navigate(env, start, observe(env, start), start, b, NavConfig{}, Ablation::Full, opt);
  EXPECT_EQ(r.steps_taken, 0u);
  EXPECT_TRUE(r.stop_called);
  EXPECT_TRUE(r.success);
  EXPECT_TRUE(r.soft_success);
  ASSERT_EQ(trace.size(), 1u);
  EXPECT_EQ(trace[0].action, Action::Stop);
}

TEST(Navigate, UntrainedBundleRespectsEpisodeContract) {
  const auto env = generate_rooms(40, 40, 5, "room");
  const auto b = random_bundle(10);
  NavConfig nav;
  nav.stop_thresh = 1e-9;
  nav.max_steps = 120;
  nav.buffer_capacity = 30;
  Rng rng(11);
  for (Ablation ab : {Ablation::Full, Ablation::NoRepulsor, Ablation::NoAttractor}) {
    const Pose start = random_valid_pose(env, rng), goal = random_valid_pose(env, rng);
    std::vector<TraceRow> trace;
    EpisodeOptions opt;
    opt.trace = &trace;
    const auto r = navigate(env, start, observe(env, goal), goal, b, nav, ab, opt);
    EXPECT_LE(r.steps_taken, nav.max_steps);
    EXPECT_EQ(r.forward_steps + r.rotate_steps, r.steps_taken);
    EXPECT_FALSE(r.collided_ever);
    EXPECT_EQ(r.agent_path_length_m, kForwardStep * static_cast<double>(r.forward_steps));
    if (r.success) {
      EXPECT_TRUE(r.stop_called && r.final_distance_to_goal_m <= 1.0);
      EXPECT_TRUE(r.soft_success);
    }
    if (!r.stop_called) {
      EXPECT_EQ(r.steps_taken, nav.max_steps);
    }
    for (const auto& row : trace) {
      if (row.action == Action::Stop) continue;
      EXPECT_TRUE(row.scores.candidate[static_cast<std::size_t>(move_index(row.action))]);
      if (ab == Ablation::NoRepulsor) {
        for (std::size_t k = 0; k < 3; ++k)
          if (row.scores.candidate[k]) {
            EXPECT_GE(row.scores.attractor[k], row.attractor);
          }
      }
    }
  }
}

TEST(Navigate, DeterministicAndMissingRegressor) {
  const auto env = test::open_room(30, 30);
  const auto b = random_bundle(12);
  NavConfig nav;
  nav.max_steps = 60;
  const Pose start{2.0, 2.0, 0}, goal{3.5, 2.0, 0};
  ASSERT_TRUE(pose_is_valid(env, start) && pose_is_valid(env, goal));
  const auto a = navigate(env, start, observe(env, goal), goal, b, nav, Ablation::Full);
  const auto c = navigate(env, start, observe(env, goal), goal, b, nav, Ablation::Full);
  EXPECT_EQ(a.steps_taken, c.steps_taken);
  EXPECT_EQ(a.final_distance_to_goal_m, c.final_distance_to_goal_m);
  const auto other = random_bundle(12, "other");
  EXPECT_THROW(navigate(env, start, observe(env, goal), goal, other, nav, Ablation::Full), std::out_of_range);
  EXPECT_NO_THROW(navigate(env, start, observe(env, goal), goal, other, nav, Ablation::NoAttractor));
  EXPECT_THROW(navigate(env, Pose{0.1, 0.1, 0}, observe(env, goal), goal, b, nav, Ablation::Full), ContractViolation);
}

TEST(RandomAgent, GoalWithinRadiusSucceedsAtStepZero) {
  const auto env = test::open_room(30, 30);
  const Pose start{3.0, 3.0, 0}, goal{3.5, 3.0, 0};
  const auto r = run_random_agent(env, start, goal, NavConfig{}, 1);
  EXPECT_EQ(r.steps_taken, 0u);
  EXPECT_TRUE(r.success);
}

TEST(RandomAgent, NeverCollides) {
  const auto env = generate_rooms(40, 40, 5, "room");
  Rng rng(13);
  NavConfig nav;
  nav.max_steps = 200;
  for (int i = 0; i < 10; ++i) {
    const auto r = run_random_agent(env, random_valid_pose(env, rng), random_valid_pose(env, rng), nav, i);
    EXPECT_FALSE(r.collided_ever);
    EXPECT_LE(r.steps_taken, 200u);
  }
}

TEST(Trace, CsvColumns) {
  std::vector<TraceRow> rows{{0, Action::Forward, 4.0, 2.0, 0.5, {1.0, 2.0, 3}, {}}};
  std::ostringstream out;
  write_trace_csv(out, rows);
  EXPECT_EQ(out.str(), "step,action,d_h_to_goal,attractor,repulsor_sum,oracle_x,oracle_y,heading\n0,FORWARD,4,2,0.5,1,2,3\n");
}
