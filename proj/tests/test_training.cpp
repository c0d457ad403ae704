#include <gtest/gtest.h>

#include <sstream>

#include "o4a/maps.hpp"
#include "o4a/training.hpp"

using namespace o4a;

namespace {

TrainConfig small_config(std::uint64_t seed = 1) {
  TrainConfig c;
  c.batch_size = 32;
  c.steps_local = 300;
  c.steps_forward = 200;
  c.steps_geodesic = 200;
  c.num_sources = 16;
  c.log_every = 50;
  c.seed = seed;
  c.shape.hidden = 32;
  c.shape.embedding_dim = 8;
  return c;
}

std::vector<Trajectory> walks(const std::vector<std::string>& ids, std::size_t steps) {
  std::vector<Trajectory> out;
  std::uint64_t seed = 1;
  for (const auto& id : ids) {
    auto run = collect_random_walk(generate_rooms(40, 40, seed, id), steps, seed);
    mark_split(run.trajectory, 0.3);
    out.push_back(std::move(run.trajectory));
    ++seed;
  }
  return out;
}

std::size_t column(const MetricsLog& log, const std::string& name) {
  return static_cast<std::size_t>(std::find(log.columns.begin(), log.columns.end(), name) - log.columns.begin());
}

}  // namespace

TEST(TrainConfig, ValidationAndRoundTrip) {
  TrainConfig c;
  EXPECT_EQ(c.batch_size, 512u);
  EXPECT_EQ(c.lr, 5e-4);
  EXPECT_NO_THROW(c.validate());
  auto bad = c;
  bad.val_fraction = 1.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = c;
  bad.steps_local = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = c;
  bad.shape.hidden = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  c.seed = 42;
  c.candidate_radius = 7.5;
  KeyValueFile kv;
  c.write(kv);
  const auto back = TrainConfig::read(kv);
  EXPECT_EQ(back.seed, 42u);
  EXPECT_EQ(back.candidate_radius, 7.5);
}

TEST(TrainLocal, DeterministicAndLossDecreases) {
  const auto data = walks({"a"}, 1500);
  const auto cfg = small_config();
  const auto r1 = train_local(data, cfg, NavConfig{});
  const auto r2 = train_local(data, cfg, NavConfig{});
  EXPECT_TRUE(r1.backbone == r2.backbone);
  EXPECT_TRUE(r1.ik_head == r2.ik_head);
  const auto loss = column(r1.log, "loss");
  ASSERT_GE(r1.log.rows.size(), 2u);
  EXPECT_LT(r1.log.rows.back()[loss], r1.log.rows.front()[loss]);
  EXPECT_GT(r1.metrics.positives, 0u);
  auto other = cfg;
  other.seed = 2;
  EXPECT_FALSE(train_local(data, other, NavConfig{}).backbone == r1.backbone);
}

TEST(TrainLocal, RejectsBadInput) {
  const auto cfg = small_config();
  EXPECT_THROW(train_local(std::span<const Trajectory>{}, cfg, NavConfig{}), std::invalid_argument);
  auto data = walks({"a", "b"}, 200);
  data[1].observations[5].values = VectorXd::Zero(10);
  EXPECT_THROW(train_local(data, cfg, NavConfig{}), DimensionMismatch);
}

TEST(TrainPipeline, OneRegressorPerEnvironment) {
  const auto cfg = small_config(3);
  const auto one = train_pipeline(walks({"solo"}, 600), cfg, NavConfig{});
  EXPECT_EQ(one.bundle.regressors.size(), 1u);
  EXPECT_TRUE(one.bundle.regressors.count("solo"));
  const auto three = train_pipeline(walks({"x", "y", "z"}, 400), cfg, NavConfig{});
  EXPECT_EQ(three.bundle.regressors.size(), 3u);
  EXPECT_EQ(three.graphs.size(), 3u);
  EXPECT_EQ(three.bundle.embedding_dim(), 8);
  EXPECT_NO_THROW(three.bundle.validate());
  for (const auto& [env, g] : three.graphs) EXPECT_EQ(g.edge_count(EdgeKind::Observed), 399u) << env;
}

TEST(TrainPipeline, StagesReproduceByteForByte) {
  const auto data = walks({"det"}, 500);
  const auto cfg = small_config(5);
  const auto a = train_pipeline(data, cfg, NavConfig{});
  const auto b = train_pipeline(data, cfg, NavConfig{});
  std::ostringstream la, lb;
  a.forward.log.write_csv(la);
  b.forward.log.write_csv(lb);
  EXPECT_EQ(la.str(), lb.str());
  EXPECT_TRUE(a.bundle.forward_model == b.bundle.forward_model);
  EXPECT_TRUE(a.bundle.regressor("det") == b.bundle.regressor("det"));
}

TEST(TrainForward, BeatsConstantPredictor) {
  auto cfg = small_config(7);
  cfg.steps_local = 600;
  cfg.steps_forward = 800;
  const auto data = walks({"fk"}, 2000);
  const auto local = train_local(data, cfg, NavConfig{});
  auto g = build_graph(data, local.backbone, local.ik_head, graph_options(cfg));
  const TransitionGraph* gp = &g;
  const auto fw = train_forward(std::span<const TransitionGraph* const>(&gp, 1), cfg);
  EXPECT_GT(fw.metrics.val_edges, 0u);
  EXPECT_LT(fw.metrics.val_mse, fw.metrics.embedding_variance);
  const auto loss = column(fw.log, "loss");
  EXPECT_LT(fw.log.rows.back()[loss], fw.log.rows.front()[loss]);
}

TEST(TrainGeodesic, FitsGraphDistances) {
  auto cfg = small_config(9);
  cfg.steps_geodesic = 1500;
  const auto data = walks({"geo"}, 800);
  const auto local = train_local(data, cfg, NavConfig{});
  const auto g = build_graph(data, local.backbone, local.ik_head, graph_options(cfg));
  const auto r = train_geodesic(g, cfg);
  EXPECT_GT(r.metrics.val_pairs, 0u);
  const auto err = column(r.log, "val_median_relative_error");
  EXPECT_LT(r.log.rows.back()[err], r.log.rows.front()[err]);
  EXPECT_EQ(r.log.rows.back()[err], r.metrics.median_relative_error);
  TransitionGraph bare("e", 3);
  EXPECT_THROW(train_geodesic(bare, cfg), ContractViolation);
}
